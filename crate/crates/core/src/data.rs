//! Dataset ingestion: IDX parsing, binarization schemes, synthetic desk-scale
//! tasks, and the input-distribution report.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

use crate::circuit::{eval_scalar, extract_circuit, CompiledCircuit};
use crate::error::{Error, Result};
use crate::network::{build_network, mix_seed, Arch};

/// A labeled dataset of unit-interval features, sample-major.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub dims: usize,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dims: usize, labels: Vec<u8>, classes: usize) -> Result<Dataset> {
        let ds = Dataset {
            features,
            dims,
            labels,
            classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 {
            return Err(Error::data("dataset has zero feature dimensions".to_string()));
        }
        if self.features.len() != self.labels.len() * self.dims {
            return Err(Error::data(format!(
                "feature buffer holds {} values; expected {} samples x {} dims",
                self.features.len(),
                self.labels.len(),
                self.dims
            )));
        }
        if let Some(bad) = self
            .features
            .iter()
            .find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v))
        {
            return Err(Error::data(format!("feature value {bad} outside [0,1]")));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::data(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    /// True when every feature is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.features.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Deterministic subset: first `n` samples after a seeded shuffle.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        let n = n.min(self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7375_6273_6574)); // "subset"
        order.shuffle(&mut rng);
        order.truncate(n);
        let mut features = Vec::with_capacity(n * self.dims);
        let mut labels = Vec::with_capacity(n);
        for &i in &order {
            features.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            dims: self.dims,
            labels,
            classes: self.classes,
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw images from an IDX3 file: `count` images of `rows * cols` bytes.
#[derive(Clone, Debug)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_be_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::data(format!("IDX file truncated reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Parses an IDX3 image file (big-endian magic 0x00000803, three dimension
/// sizes, then raw bytes). All dimensions are validated before allocation.
pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?,
    );
    let magic = read_be_u32(&mut f, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::data(format!(
            "bad IDX image magic {magic:#010x}; expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(&mut f, "image count")? as usize;
    let rows = read_be_u32(&mut f, "row count")? as usize;
    let cols = read_be_u32(&mut f, "column count")? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::data("IDX dimensions overflow".to_string()))?;
    let mut pixels = vec![0u8; expected];
    let mut read = 0usize;
    while read < expected {
        match f.read(&mut pixels[read..]) {
            Ok(0) => break,
            Ok(n) => read += n,
            Err(e) => return Err(Error::data(format!("IDX read failed: {e}"))),
        }
    }
    if read != expected {
        return Err(Error::data(format!(
            "IDX image file truncated: expected {expected} pixel bytes, found {read}"
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

/// Parses an IDX1 label file (big-endian magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?,
    );
    let magic = read_be_u32(&mut f, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::data(format!(
            "bad IDX label magic {magic:#010x}; expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(&mut f, "label count")? as usize;
    let mut labels = vec![0u8; count];
    let mut read = 0usize;
    while read < count {
        match f.read(&mut labels[read..]) {
            Ok(0) => break,
            Ok(n) => read += n,
            Err(e) => return Err(Error::data(format!("IDX read failed: {e}"))),
        }
    }
    if read != count {
        return Err(Error::data(format!(
            "IDX label file truncated: expected {count} bytes, found {read}"
        )));
    }
    Ok(labels)
}

/// In-place threshold binarization: `bit = 1 iff x > theta` (strict, matching
/// the gate-level threshold rule).
pub fn binarize_threshold(features: &mut [f64], theta: f64) {
    for v in features.iter_mut() {
        *v = if *v > theta { 1.0 } else { 0.0 };
    }
}

/// Thermometer code: each raw channel value expands to `count` bits,
/// bit t = 1 iff value > threshold_t, thresholds evenly spaced strictly
/// inside `[0, range]` (t_j = range * j / (count + 1)).
#[derive(Clone, Debug)]
pub struct ThermometerSpec {
    pub thresholds: Vec<f64>,
}

impl ThermometerSpec {
    /// The standard 31-threshold code over raw byte range [0, 255].
    pub fn bytes_default() -> ThermometerSpec {
        ThermometerSpec::evenly_spaced(31, 255.0)
    }

    pub fn evenly_spaced(count: usize, range: f64) -> ThermometerSpec {
        let thresholds = (1..=count)
            .map(|j| range * j as f64 / (count + 1) as f64)
            .collect();
        ThermometerSpec { thresholds }
    }
}

/// Expands channel-major raw values (`values[c * pixels + p]` in `[0, range]`)
/// into thermometer bits laid out `[channel][threshold][pixel]`, matching an
/// output dimensionality of channels x thresholds x pixels.
pub fn binarize_thermometer(
    values: &[f64],
    channels: usize,
    pixels: usize,
    spec: &ThermometerSpec,
) -> Vec<f64> {
    assert_eq!(values.len(), channels * pixels);
    let t = spec.thresholds.len();
    let mut out = vec![0.0; channels * t * pixels];
    for c in 0..channels {
        for (ti, &thr) in spec.thresholds.iter().enumerate() {
            let base = (c * t + ti) * pixels;
            for p in 0..pixels {
                if values[c * pixels + p] > thr {
                    out[base + p] = 1.0;
                }
            }
        }
    }
    out
}

/// Which preprocessing a real-image dataset gets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinarizeSpec {
    /// Raw intensities scaled to [0,1].
    None,
    /// Strict threshold on the [0,1] intensity (default 0.5).
    Threshold(f64),
}

/// MNIST split selector.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Test,
}

/// Loads MNIST from IDX files under `dir` (standard file names), scales
/// pixels by 1/255, and applies the requested binarization.
pub fn mnist_dataset(dir: &Path, split: Split, binarize: BinarizeSpec) -> Result<Dataset> {
    let (images_name, labels_name) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let images = load_idx_images(&dir.join(images_name))?;
    let labels = load_idx_labels(&dir.join(labels_name))?;
    if images.count != labels.len() {
        return Err(Error::data(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::data(format!("MNIST label {bad} out of range 0..10")));
    }
    let dims = images.rows * images.cols;
    let mut features: Vec<f64> = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    if let BinarizeSpec::Threshold(theta) = binarize {
        binarize_threshold(&mut features, theta);
    }
    Dataset::new(features, dims, labels, 10)
}

/// One CIFAR-10 binary batch file: 3073-byte records of one label byte plus
/// 3072 pixel bytes in row-major RGB planes.
pub fn load_cifar10_batch(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    const RECORD: usize = 3073;
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::data(format!(
            "CIFAR batch size {} is not a multiple of {RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(RECORD) {
        if rec[0] >= 10 {
            return Err(Error::data(format!("CIFAR label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Loads CIFAR-10 from binary batch files and thermometer-binarizes each
/// channel with 31 thresholds over [0, 255]. Output dims: 3 x 31 x 1024.
pub fn cifar10_dataset(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let spec = ThermometerSpec::bytes_default();
    let dims = 3 * spec.thresholds.len() * 1024;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let (batch_labels, pixels) = load_cifar10_batch(&dir.join(name))?;
        for (i, &label) in batch_labels.iter().enumerate() {
            let raw: Vec<f64> = pixels[i * 3072..(i + 1) * 3072]
                .iter()
                .map(|&p| p as f64)
                .collect();
            features.extend(binarize_thermometer(&raw, 3, 1024, &spec));
            labels.push(label);
        }
    }
    Dataset::new(features, dims, labels, 10)
}

/// Synthetic desk-scale tasks.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SyntheticKind {
    /// Random bit vectors labeled by the XOR of all bits.
    Parity,
    /// Two interleaving half-moons, coordinates thermometer-binarized.
    TwoMoonsBinarized,
    /// Random bit vectors labeled by a hidden random hard circuit, so a gate
    /// network can reach 100%.
    RandomTeacherCircuit,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<SyntheticKind> {
        match s {
            "parity" => Ok(SyntheticKind::Parity),
            "two-moons" | "two-moons-binarized" => Ok(SyntheticKind::TwoMoonsBinarized),
            "teacher-circuit" | "random-teacher-circuit" => Ok(SyntheticKind::RandomTeacherCircuit),
            other => Err(Error::config(format!(
                "unknown synthetic task '{other}'; expected parity, two-moons, or teacher-circuit"
            ))),
        }
    }
}

/// A synthetic dataset plus, for the teacher task, the generating circuit.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub teacher: Option<CompiledCircuit>,
}

/// Builds a deterministic synthetic dataset.
pub fn synthetic_task(
    kind: SyntheticKind,
    dims: usize,
    samples: usize,
    seed: u64,
) -> Result<SyntheticData> {
    if dims < 2 {
        return Err(Error::config(format!(
            "synthetic tasks need at least 2 dims, got {dims}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7379_6e74_68)); // "synth"
    match kind {
        SyntheticKind::Parity => {
            let mut features = Vec::with_capacity(samples * dims);
            let mut labels = Vec::with_capacity(samples);
            for _ in 0..samples {
                let mut parity = 0u8;
                for _ in 0..dims {
                    let bit = rng.random::<bool>() as u8;
                    parity ^= bit;
                    features.push(bit as f64);
                }
                labels.push(parity);
            }
            Ok(SyntheticData {
                dataset: Dataset::new(features, dims, labels, 2)?,
                teacher: None,
            })
        }
        SyntheticKind::TwoMoonsBinarized => {
            let bits_x = dims / 2;
            let bits_y = dims - bits_x;
            let spec_x = ThermometerSpec::evenly_spaced(bits_x, 1.0);
            let spec_y = ThermometerSpec::evenly_spaced(bits_y, 1.0);
            let mut features = Vec::with_capacity(samples * dims);
            let mut labels = Vec::with_capacity(samples);
            for _ in 0..samples {
                let label = rng.random::<bool>() as u8;
                let t = rng.random::<f64>() * std::f64::consts::PI;
                let (mut x, mut y) = if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                x += (rng.random::<f64>() - 0.5) * 0.2;
                y += (rng.random::<f64>() - 0.5) * 0.2;
                // Map the moon bounding box into [0,1]^2.
                let xn = ((x + 1.1) / 3.2).clamp(0.0, 1.0);
                let yn = ((y + 0.7) / 2.4).clamp(0.0, 1.0);
                features.extend(binarize_thermometer(&[xn], 1, 1, &spec_x));
                features.extend(binarize_thermometer(&[yn], 1, 1, &spec_y));
                labels.push(label);
            }
            Ok(SyntheticData {
                dataset: Dataset::new(features, dims, labels, 2)?,
                teacher: None,
            })
        }
        SyntheticKind::RandomTeacherCircuit => {
            let classes = 4usize.min(dims);
            let classes = classes.max(2);
            let width = classes * 8;
            let teacher_net = build_network(
                Arch {
                    input_width: dims,
                    layers: 2,
                    width,
                    classes,
                },
                mix_seed(seed, 0x7465_6163_68), // "teach"
            )?;
            let teacher = extract_circuit(&teacher_net);
            let mut features = Vec::with_capacity(samples * dims);
            let mut labels = Vec::with_capacity(samples);
            let mut bits = vec![false; dims];
            for _ in 0..samples {
                for b in bits.iter_mut() {
                    *b = rng.random();
                }
                let scores = eval_scalar(&teacher, &bits);
                let mut best = 0;
                for (c, &v) in scores.iter().enumerate().skip(1) {
                    if v > scores[best] {
                        best = c;
                    }
                }
                features.extend(bits.iter().map(|&b| b as u8 as f64));
                labels.push(best as u8);
            }
            Ok(SyntheticData {
                dataset: Dataset::new(features, dims, labels, classes)?,
                teacher: Some(teacher),
            })
        }
    }
}

/// Fractions of feature values per bin: exactly 0, (0, 0.1), [0.1, 0.9],
/// (0.9, 1]. `binary_like` is the mass below 0.1 or above 0.9.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelDistribution {
    pub exactly_zero: f64,
    pub low: f64,
    pub mid: f64,
    pub high: f64,
    pub binary_like: f64,
}

/// Histogram of unit-interval features over the distribution-report bins.
pub fn pixel_distribution_report(features: &[f64]) -> PixelDistribution {
    assert!(!features.is_empty());
    let mut zero = 0usize;
    let mut low = 0usize;
    let mut mid = 0usize;
    let mut high = 0usize;
    for &v in features {
        if v == 0.0 {
            zero += 1;
        } else if v < 0.1 {
            low += 1;
        } else if v <= 0.9 {
            mid += 1;
        } else {
            high += 1;
        }
    }
    let n = features.len() as f64;
    let f = |c: usize| c as f64 / n;
    PixelDistribution {
        exactly_zero: f(zero),
        low: f(low),
        mid: f(mid),
        high: f(high),
        binary_like: f(zero + low + high),
    }
}
