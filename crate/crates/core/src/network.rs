//! Flat multi-layer logic gate networks: random wiring, per-node selection
//! logits, a GroupSum class readout, and the three evaluation pipelines used
//! by the gap decomposition.
//!
//! Layer 0 reads input features; every later layer reads the previous layer.
//! Each node has two distinct source wires fixed at build time. The readout
//! sums contiguous groups of final-layer nodes per class and divides by a
//! variance-derived temperature.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gates::{gate_coeffs, soft_eval_unchecked, GateId, GateSpec, GATE_COUNT};
use crate::selection::{argmax_select, gumbel_from_uniform, MethodConfig};

/// Gates per node.
pub const K: usize = GATE_COUNT;

/// Samples per parallel work unit; fixed so that reductions have a
/// scheduler-independent shape and runs are bitwise reproducible.
pub(crate) const SAMPLE_CHUNK: usize = 32;

/// Network shape: `layers` equal-width layers over `input_width` features,
/// read out into `classes` scores.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Arch {
    pub input_width: usize,
    pub layers: usize,
    pub width: usize,
    pub classes: usize,
}

/// GroupSum readout: `classes` contiguous groups of `group_size` final-layer
/// nodes, scaled by temperature `tau`.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct GroupSumConfig {
    pub classes: usize,
    pub group_size: usize,
    pub tau: f64,
}

/// Class-count coefficient of the readout temperature,
/// `alpha(C) = 1.42 / (ln(C - 1) + 0.7)`.
pub fn groupsum_alpha(classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::config(format!(
            "groupsum needs at least 2 classes, got {classes}"
        )));
    }
    Ok(1.42 / (((classes - 1) as f64).ln() + 0.7))
}

/// Readout temperature `alpha(C) * sqrt(k)` for `k` nodes per class group.
pub fn groupsum_tau(classes: usize, group_size: usize) -> Result<f64> {
    if group_size < 1 {
        return Err(Error::config("group size must be at least 1".to_string()));
    }
    Ok(groupsum_alpha(classes)? * (group_size as f64).sqrt())
}

/// A logic gate network: fixed wiring plus per-node selection logits.
#[derive(Clone, Debug)]
pub struct Network {
    pub arch: Arch,
    /// Per layer, per node: the two source indices into the previous layer
    /// (or the input features for layer 0).
    pub wiring: Vec<Vec<[u32; 2]>>,
    /// Per layer, per node: selection logits over the K gates.
    pub logits: Vec<Vec<[f64; K]>>,
    pub groupsum: GroupSumConfig,
    /// Seed the parameters were built from.
    pub seed: u64,
}

/// Splitmix-style seed combinator used to derive independent RNG streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn validate_arch(arch: &Arch) -> Result<()> {
    if arch.layers < 1 {
        return Err(Error::config("need at least one layer".to_string()));
    }
    if arch.classes < 2 {
        return Err(Error::config("need at least two classes".to_string()));
    }
    if arch.width < arch.classes {
        return Err(Error::config(format!(
            "width {} is smaller than class count {}",
            arch.width, arch.classes
        )));
    }
    if arch.width % arch.classes != 0 {
        return Err(Error::config(format!(
            "width {} is not divisible by class count {}",
            arch.width, arch.classes
        )));
    }
    if arch.input_width < 2 {
        return Err(Error::config(
            "need at least two input features for distinct wiring".to_string(),
        ));
    }
    Ok(())
}

/// Builds a network with uniform-random distinct source pairs and standard
/// normal logits. Deterministic given the seed.
pub fn build_network(arch: Arch, seed: u64) -> Result<Network> {
    validate_arch(&arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6275_696c_64)); // "build"
    let mut wiring = Vec::with_capacity(arch.layers);
    let mut logits = Vec::with_capacity(arch.layers);
    for layer in 0..arch.layers {
        let prev_width = if layer == 0 { arch.input_width } else { arch.width };
        let mut layer_wiring = Vec::with_capacity(arch.width);
        let mut layer_logits = Vec::with_capacity(arch.width);
        for _ in 0..arch.width {
            let a = rng.random_range(0..prev_width as u32);
            let b = loop {
                let candidate = rng.random_range(0..prev_width as u32);
                if candidate != a {
                    break candidate;
                }
            };
            layer_wiring.push([a, b]);
            let mut z = [0.0; K];
            for slot in z.iter_mut() {
                *slot = StandardNormal.sample(&mut rng);
            }
            layer_logits.push(z);
        }
        wiring.push(layer_wiring);
        logits.push(layer_logits);
    }
    let group_size = arch.width / arch.classes;
    let groupsum = GroupSumConfig {
        classes: arch.classes,
        group_size,
        tau: groupsum_tau(arch.classes, group_size)?,
    };
    Ok(Network {
        arch,
        wiring,
        logits,
        groupsum,
        seed,
    })
}

impl Network {
    pub fn total_nodes(&self) -> usize {
        self.arch.layers * self.arch.width
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        vec![self.arch.width; self.arch.layers]
    }

    fn prev_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.arch.input_width
        } else {
            self.arch.width
        }
    }

    fn check_features(&self, features: &[f64], batch: usize) -> Result<()> {
        if features.len() != batch * self.arch.input_width {
            return Err(Error::shape(format!(
                "feature buffer has {} values, expected {} x {}",
                features.len(),
                batch,
                self.arch.input_width
            )));
        }
        Ok(())
    }
}

/// One Gumbel draw per gate per node, shared across the batch for one
/// training step or evaluation pass.
#[derive(Clone, Debug)]
pub struct NoiseField {
    pub layers: Vec<Vec<[f64; K]>>,
}

/// Draws a full per-node noise field from one seeded stream, walking layers
/// and nodes in fixed order so the field is a pure function of the seed.
pub fn draw_noise_field(layer_widths: &[usize], stream_seed: u64) -> NoiseField {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let layers = layer_widths
        .iter()
        .map(|&w| {
            (0..w)
                .map(|_| {
                    let mut g = [0.0; K];
                    for slot in g.iter_mut() {
                        *slot = gumbel_from_uniform(rng.random());
                    }
                    g
                })
                .collect()
        })
        .collect();
    NoiseField { layers }
}

/// Noise wiring for a forward pass.
#[derive(Clone, Copy)]
pub enum NoiseSpec<'a> {
    /// Deterministic methods.
    None,
    /// One draw per node, shared across the batch.
    Shared(&'a NoiseField),
    /// Independent draws per sample, derived from `stream` and the sample
    /// slot; used by the per-example noise switch.
    PerExample { stream: u64 },
}

/// Per-sample per-layer RNG for per-example noise. Re-seeded identically by
/// the forward and backward passes.
pub(crate) fn per_example_rng(stream: u64, sample: usize, layer: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(stream, sample as u64), layer as u64))
}

/// Everything one node contributes to a step, shared across the batch:
/// surrogate weights and the bilinear coefficients of the surrogate mixture
/// and of the forward output.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NodePrep {
    pub weights: [f64; K],
    /// Coefficients of the surrogate mixture `sum_i w_i g_i`.
    pub mix: [f64; 4],
    /// Coefficients of the forward output (winner gate for hard methods,
    /// surrogate mixture for mixtures).
    pub fwd: [f64; 4],
}

pub(crate) fn weighted_coeffs(weights: &[f64; K]) -> [f64; 4] {
    let mut mix = [0.0; 4];
    for (gate, &w) in weights.iter().enumerate() {
        let c = gate_coeffs(gate);
        mix[0] += w * c[0];
        mix[1] += w * c[1];
        mix[2] += w * c[2];
        mix[3] += w * c[3];
    }
    mix
}

/// Computes one node's prep from its logits, optional noise, method, and the
/// temperature its weights are taken at.
pub(crate) fn prep_node(
    z: &[f64; K],
    noise: Option<&[f64; K]>,
    method: MethodConfig,
    tau: f64,
) -> NodePrep {
    let mut noised = *z;
    if let Some(g) = noise {
        for (zi, gi) in noised.iter_mut().zip(g) {
            *zi += gi;
        }
    }
    // Inline softmax with max subtraction over the fixed-size gate axis.
    let max = noised.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights = [0.0; K];
    let mut sum = 0.0;
    for (w, &zi) in weights.iter_mut().zip(noised.iter()) {
        let e = ((zi - max) / tau).exp();
        *w = e;
        sum += e;
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    let mix = weighted_coeffs(&weights);
    let fwd = if method.is_hard() {
        gate_coeffs(argmax_select(&noised))
    } else {
        mix
    };
    NodePrep { weights, mix, fwd }
}

fn prep_layer(
    logits: &[[f64; K]],
    noise: Option<&[[f64; K]]>,
    method: MethodConfig,
    tau: f64,
) -> Vec<NodePrep> {
    let mut out = vec![
        NodePrep {
            weights: [0.0; K],
            mix: [0.0; 4],
            fwd: [0.0; 4],
        };
        logits.len()
    ];
    out.par_chunks_mut(256)
        .enumerate()
        .for_each(|(chunk, slots)| {
            let base = chunk * 256;
            for (i, slot) in slots.iter_mut().enumerate() {
                let n = base + i;
                *slot = prep_node(&logits[n], noise.map(|f| &f[n]), method, tau);
            }
        });
    out
}

/// Nodes per parallel work unit in the layer kernels.
const NODE_BLOCK: usize = 256;

/// Evaluates one layer of bilinear nodes over `rows` samples in wire-major
/// layout: `out[n * rows + s] = c0 + c1 a + c2 b + c3 ab` with the operand
/// rows selected by the wiring.
pub(crate) fn bilinear_layer_forward_t(
    prev: &[f64],
    prev_width: usize,
    out: &mut [f64],
    width: usize,
    wiring: &[[u32; 2]],
    coeffs: &[[f64; 4]],
    rows: usize,
) {
    assert_eq!(out.len(), rows * width);
    assert_eq!(prev.len(), rows * prev_width);
    assert_eq!(wiring.len(), width);
    assert_eq!(coeffs.len(), width);
    assert!(wiring
        .iter()
        .all(|&[a, b]| (a as usize) < prev_width && (b as usize) < prev_width));
    // Wire-major on both sides: per node the sample axis is contiguous, so
    // the inner loop is a straight-line fused multiply-add stream.
    out.par_chunks_mut(NODE_BLOCK * rows)
        .enumerate()
        .for_each(|(chunk, block)| {
            let n0 = chunk * NODE_BLOCK;
            for (j, orow) in block.chunks_mut(rows).enumerate() {
                let n = n0 + j;
                let [sa, sb] = wiring[n];
                let c = coeffs[n];
                let arow = &prev[sa as usize * rows..(sa as usize + 1) * rows];
                let brow = &prev[sb as usize * rows..(sb as usize + 1) * rows];
                for ((o, &a), &b) in orow.iter_mut().zip(arow).zip(brow) {
                    *o = c[0] + c[1] * a + c[2] * b + c[3] * (a * b);
                }
            }
        });
}

/// Hard counterpart of [`bilinear_layer_forward_t`] on bit-valued
/// activations, using packed 4-bit truth tables per node.
fn hard_layer_forward_t(
    prev: &[u8],
    prev_width: usize,
    out: &mut [u8],
    width: usize,
    wiring: &[[u32; 2]],
    tables: &[u8],
    rows: usize,
) {
    assert_eq!(out.len(), rows * width);
    assert_eq!(prev.len(), rows * prev_width);
    assert_eq!(wiring.len(), width);
    assert_eq!(tables.len(), width);
    assert!(wiring
        .iter()
        .all(|&[a, b]| (a as usize) < prev_width && (b as usize) < prev_width));
    out.par_chunks_mut(NODE_BLOCK * rows)
        .enumerate()
        .for_each(|(chunk, block)| {
            let n0 = chunk * NODE_BLOCK;
            for (j, orow) in block.chunks_mut(rows).enumerate() {
                let n = n0 + j;
                let [sa, sb] = wiring[n];
                let tt = tables[n];
                let arow = &prev[sa as usize * rows..(sa as usize + 1) * rows];
                let brow = &prev[sb as usize * rows..(sb as usize + 1) * rows];
                for ((o, &a), &b) in orow.iter_mut().zip(arow).zip(brow) {
                    *o = (tt >> ((a << 1) | b)) & 1;
                }
            }
        });
}

/// Transposes a sample-major matrix (`rows` samples by `width` features)
/// into wire-major layout.
pub(crate) fn transpose_to_wire_major(src: &[f64], rows: usize, width: usize) -> Vec<f64> {
    assert_eq!(src.len(), rows * width);
    let mut dst = vec![0.0; rows * width];
    // Block the sample axis so writes hit each destination line several
    // times while it is resident.
    const B: usize = 32;
    let mut s0 = 0;
    while s0 < rows {
        let s1 = (s0 + B).min(rows);
        for f in 0..width {
            for s in s0..s1 {
                dst[f * rows + s] = src[s * width + f];
            }
        }
        s0 = s1;
    }
    dst
}

/// Trace of a training-mode forward pass, consumed by the backward pass.
pub struct ForwardTrace {
    pub method: MethodConfig,
    /// Temperature the surrogate weights were computed at.
    pub tau: f64,
    pub batch: usize,
    /// Per layer: node outputs in wire-major layout (`width * batch`, the
    /// sample axis contiguous per node); see [`ForwardTrace::node_output`].
    pub(crate) activations: Vec<Vec<f64>>,
    /// Input features in wire-major layout.
    pub(crate) inputs_t: Vec<f64>,
    /// Per-node step data when noise is shared across the batch.
    pub(crate) node: Option<Vec<Vec<NodePrep>>>,
    /// Per-example noise stream, when enabled.
    pub(crate) per_example_stream: Option<u64>,
}

impl ForwardTrace {
    /// Output of one node for one sample.
    pub fn node_output(&self, layer: usize, sample: usize, node: usize) -> f64 {
        self.activations[layer][node * self.batch + sample]
    }
}

fn check_noise_spec(method: MethodConfig, noise: &NoiseSpec<'_>) -> Result<()> {
    let has = !matches!(noise, NoiseSpec::None);
    if method.uses_noise() != has {
        return Err(Error::shape(format!(
            "method {method} {} noise but the spec {} it",
            if method.uses_noise() { "requires" } else { "takes no" },
            if has { "supplies" } else { "omits" },
        )));
    }
    Ok(())
}

impl Network {
    /// Training-mode forward pass over a batch. Returns class logits
    /// (`batch * classes`, scaled by the readout temperature) and the trace
    /// needed for the backward pass.
    ///
    /// `tau` is the mixture temperature for soft methods and the backward
    /// temperature for hard methods; for hard methods it affects only the
    /// recorded surrogate weights, never the activations.
    pub fn forward(
        &self,
        features: &[f64],
        batch: usize,
        method: MethodConfig,
        tau: f64,
        noise: NoiseSpec<'_>,
    ) -> Result<(Vec<f64>, ForwardTrace)> {
        self.check_features(features, batch)?;
        check_noise_spec(method, &noise)?;
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::config(format!("temperature must be positive: {tau}")));
        }

        let width = self.arch.width;
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.arch.layers);
        let (node, per_example_stream) = match noise {
            NoiseSpec::PerExample { stream } => (None, Some(stream)),
            NoiseSpec::Shared(field) => {
                let prep: Vec<Vec<NodePrep>> = (0..self.arch.layers)
                    .map(|l| {
                        prep_layer(
                            &self.logits[l],
                            Some(field.layers[l].as_slice()),
                            method,
                            tau,
                        )
                    })
                    .collect();
                (Some(prep), None)
            }
            NoiseSpec::None => {
                let prep: Vec<Vec<NodePrep>> = (0..self.arch.layers)
                    .map(|l| prep_layer(&self.logits[l], None, method, tau))
                    .collect();
                (Some(prep), None)
            }
        };

        let inputs_t = transpose_to_wire_major(features, batch, self.arch.input_width);
        for layer in 0..self.arch.layers {
            let prev_width = self.prev_width(layer);
            let prev: &[f64] = if layer == 0 {
                &inputs_t
            } else {
                &activations[layer - 1]
            };
            let wiring = &self.wiring[layer];
            let mut act = vec![0.0; batch * width];
            match (&node, per_example_stream) {
                (Some(prep), _) => {
                    let coeffs: Vec<[f64; 4]> = prep[layer].iter().map(|p| p.fwd).collect();
                    bilinear_layer_forward_t(
                        prev, prev_width, &mut act, width, wiring, &coeffs, batch,
                    );
                }
                (None, Some(stream)) => {
                    // Per-sample noise: sequential walk over samples, writing
                    // wire-major. This is the measurement path, not the fast
                    // path.
                    for s in 0..batch {
                        let mut rng = per_example_rng(stream, s, layer);
                        for n in 0..width {
                            let mut g = [0.0; K];
                            for slot in g.iter_mut() {
                                *slot = gumbel_from_uniform(rng.random());
                            }
                            let prep = prep_node(&self.logits[layer][n], Some(&g), method, tau);
                            let [sa, sb] = wiring[n];
                            let a = prev[sa as usize * batch + s];
                            let b = prev[sb as usize * batch + s];
                            act[n * batch + s] = soft_eval_unchecked(&prep.fwd, a, b);
                        }
                    }
                }
                (None, None) => unreachable!(),
            }
            activations.push(act);
        }

        let y = self.group_sum_scaled_t(activations.last().unwrap(), batch);
        let trace = ForwardTrace {
            method,
            tau,
            batch,
            activations,
            inputs_t,
            node,
            per_example_stream,
        };
        Ok((y, trace))
    }

    /// GroupSum readout over wire-major final activations, scaled by the
    /// readout temperature. Returns sample-major class logits.
    fn group_sum_scaled_t(&self, last_t: &[f64], batch: usize) -> Vec<f64> {
        let gs = &self.groupsum;
        let mut y = vec![0.0; batch * gs.classes];
        let mut acc = vec![0.0; batch];
        for c in 0..gs.classes {
            acc.fill(0.0);
            for g in 0..gs.group_size {
                let n = c * gs.group_size + g;
                let row = &last_t[n * batch..(n + 1) * batch];
                for (a, &h) in acc.iter_mut().zip(row) {
                    *a += h;
                }
            }
            for (s, &a) in acc.iter().enumerate() {
                y[s * gs.classes + c] = a / gs.tau;
            }
        }
        y
    }
}

/// The three evaluation pipelines behind the gap decomposition.
pub enum EvalMode<'a> {
    /// The training-time forward computation of a method.
    Method {
        method: MethodConfig,
        tau: f64,
        noise: NoiseSpec<'a>,
    },
    /// Argmax selection with soft gate evaluation.
    SoftGateArgmax,
    /// Argmax selection with hard gate evaluation: inputs are thresholded at
    /// entry and class scores are raw integer group sums (unscaled; class
    /// argmax is scale-invariant).
    HardGateArgmax,
}

impl Network {
    /// Evaluation forward pass. Returns class logits (`batch * classes`);
    /// see [`EvalMode`] for the three pipelines. Uses ping-pong layer buffers
    /// so large batches stay cheap.
    pub fn forward_eval_mode(
        &self,
        features: &[f64],
        batch: usize,
        mode: EvalMode<'_>,
    ) -> Result<Vec<f64>> {
        self.check_features(features, batch)?;
        match mode {
            EvalMode::Method { method, tau, noise } => {
                check_noise_spec(method, &noise)?;
                if tau <= 0.0 || !tau.is_finite() {
                    return Err(Error::config(format!(
                        "temperature must be positive: {tau}"
                    )));
                }
                match noise {
                    NoiseSpec::PerExample { .. } => {
                        // Per-sample noise cannot be folded into per-node
                        // coefficient tables; use the training path.
                        Ok(self.forward(features, batch, method, tau, noise)?.0)
                    }
                    _ => Ok(self.eval_method(features, batch, method, tau, noise)),
                }
            }
            EvalMode::SoftGateArgmax => Ok(self.eval_soft_argmax(features, batch)),
            EvalMode::HardGateArgmax => Ok(self.eval_hard_argmax(features, batch)),
        }
    }

    /// Method-mode evaluation with per-node forward coefficients folded once
    /// per pass: the winner gate's coefficients for hard methods, the
    /// softmax-weighted mixture for soft methods. Ping-pong buffers, no
    /// trace.
    fn eval_method(
        &self,
        features: &[f64],
        batch: usize,
        method: MethodConfig,
        tau: f64,
        noise: NoiseSpec<'_>,
    ) -> Vec<f64> {
        let coeffs: Vec<Vec<[f64; 4]>> = (0..self.arch.layers)
            .map(|layer| {
                let field = match noise {
                    NoiseSpec::Shared(f) => Some(f.layers[layer].as_slice()),
                    _ => None,
                };
                self.logits[layer]
                    .iter()
                    .enumerate()
                    .map(|(n, z)| {
                        let mut noised = *z;
                        if let Some(f) = field {
                            for (zi, gi) in noised.iter_mut().zip(&f[n]) {
                                *zi += gi;
                            }
                        }
                        if method.is_hard() {
                            gate_coeffs(argmax_select(&noised))
                        } else {
                            let mut w = [0.0; K];
                            crate::selection::softmax_temp_into(&noised, tau, &mut w)
                                .expect("tau validated");
                            weighted_coeffs(&w)
                        }
                    })
                    .collect()
            })
            .collect();
        self.eval_bilinear_pipeline(features, batch, &coeffs)
    }

    /// Shared ping-pong driver over per-layer coefficient tables.
    fn eval_bilinear_pipeline(
        &self,
        features: &[f64],
        batch: usize,
        coeffs: &[Vec<[f64; 4]>],
    ) -> Vec<f64> {
        let width = self.arch.width;
        let mut prev: Vec<f64> = Vec::new();
        let mut next: Vec<f64> = vec![0.0; batch * width];
        for layer in 0..self.arch.layers {
            let prev_width = self.prev_width(layer);
            let src: &[f64] = if layer == 0 { features } else { &prev };
            bilinear_layer_forward(
                src,
                prev_width,
                &mut next,
                width,
                &self.wiring[layer],
                &coeffs[layer],
                batch,
            );
            std::mem::swap(&mut prev, &mut next);
            if next.len() != batch * width {
                next = vec![0.0; batch * width];
            }
        }
        self.group_sum_scaled(&prev, batch)
    }

    /// Winner gate per node under deterministic argmax of the raw logits.
    pub fn argmax_winners(&self) -> Vec<Vec<u32>> {
        self.logits
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|z| argmax_select(z) as u32)
                    .collect::<Vec<u32>>()
            })
            .collect()
    }

    fn eval_soft_argmax(&self, features: &[f64], batch: usize) -> Vec<f64> {
        let coeffs: Vec<Vec<[f64; 4]>> = self
            .logits
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|z| gate_coeffs(argmax_select(z)))
                    .collect()
            })
            .collect();
        self.eval_bilinear_pipeline(features, batch, &coeffs)
    }

    fn eval_hard_argmax(&self, features: &[f64], batch: usize) -> Vec<f64> {
        let width = self.arch.width;
        let tables: Vec<Vec<u8>> = self
            .logits
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|z| {
                        GateSpec::of(GateId::new(argmax_select(z)).unwrap()).truth_table_bits()
                    })
                    .collect()
            })
            .collect();

        let input_width = self.arch.input_width;
        // Threshold features once at entry.
        let mut bits: Vec<u8> = vec![0; batch * input_width];
        bits.par_chunks_mut(SAMPLE_CHUNK * input_width)
            .enumerate()
            .for_each(|(chunk, out)| {
                let base = chunk * SAMPLE_CHUNK * input_width;
                for (i, slot) in out.iter_mut().enumerate() {
                    *slot = (features[base + i] > 0.5) as u8;
                }
            });

        let mut prev: Vec<u8> = bits;
        let mut next: Vec<u8> = vec![0; batch * width];
        for layer in 0..self.arch.layers {
            let prev_width = self.prev_width(layer);
            hard_layer_forward(
                &prev,
                prev_width,
                &mut next,
                width,
                &self.wiring[layer],
                &tables[layer],
                batch,
            );
            std::mem::swap(&mut prev, &mut next);
            if next.len() != batch * width {
                next = vec![0; batch * width];
            }
        }

        // Raw integer group sums.
        let gs = &self.groupsum;
        let mut y = vec![0.0; batch * gs.classes];
        y.par_chunks_mut(gs.classes)
            .enumerate()
            .for_each(|(s, row)| {
                let acts = &prev[s * width..(s + 1) * width];
                for (c, slot) in row.iter_mut().enumerate() {
                    let group = &acts[c * gs.group_size..(c + 1) * gs.group_size];
                    *slot = group.iter().map(|&b| b as u32).sum::<u32>() as f64;
                }
            });
        y
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GNETCKP\x01";

impl Network {
    /// Writes a versioned binary checkpoint: arch, groupsum, seed, wiring,
    /// logits. Stable little-endian layout.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            self.seed,
            self.arch.input_width as u64,
            self.arch.layers as u64,
            self.arch.width as u64,
            self.arch.classes as u64,
            self.groupsum.group_size as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.groupsum.tau.to_le_bytes())?;
        for layer in &self.wiring {
            for [a, b] in layer {
                w.write_all(&a.to_le_bytes())?;
                w.write_all(&b.to_le_bytes())?;
            }
        }
        for layer in &self.logits {
            for z in layer {
                for v in z {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`Network::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Network> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::data("checkpoint truncated before magic".to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::data(format!(
                "bad checkpoint magic {magic:02x?}; expected {CHECKPOINT_MAGIC:02x?}"
            )));
        }
        let mut u64_buf = [0u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut u64_buf)
                .map_err(|_| Error::data("checkpoint truncated in header".to_string()))?;
            Ok(u64::from_le_bytes(u64_buf))
        };
        let seed = read_u64(&mut r)?;
        let input_width = read_u64(&mut r)? as usize;
        let layers = read_u64(&mut r)? as usize;
        let width = read_u64(&mut r)? as usize;
        let classes = read_u64(&mut r)? as usize;
        let group_size = read_u64(&mut r)? as usize;
        let mut f64_buf = [0u8; 8];
        r.read_exact(&mut f64_buf)
            .map_err(|_| Error::data("checkpoint truncated in header".to_string()))?;
        let tau = f64::from_le_bytes(f64_buf);

        let arch = Arch {
            input_width,
            layers,
            width,
            classes,
        };
        validate_arch(&arch)?;
        if group_size != width / classes || !(tau.is_finite() && tau > 0.0) {
            return Err(Error::data("inconsistent groupsum in checkpoint".to_string()));
        }

        let mut wiring = Vec::with_capacity(layers);
        for layer in 0..layers {
            let prev_width = if layer == 0 { input_width } else { width };
            let mut lw = Vec::with_capacity(width);
            for _ in 0..width {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)
                    .map_err(|_| Error::data("checkpoint truncated in wiring".to_string()))?;
                let a = u32::from_le_bytes(buf[0..4].try_into().unwrap());
                let b = u32::from_le_bytes(buf[4..8].try_into().unwrap());
                if a as usize >= prev_width || b as usize >= prev_width || a == b {
                    return Err(Error::data(format!(
                        "invalid wiring ({a},{b}) in layer {layer}"
                    )));
                }
                lw.push([a, b]);
            }
            wiring.push(lw);
        }
        let mut logits = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut ll = Vec::with_capacity(width);
            for _ in 0..width {
                let mut z = [0.0; K];
                for slot in z.iter_mut() {
                    r.read_exact(&mut f64_buf)
                        .map_err(|_| Error::data("checkpoint truncated in logits".to_string()))?;
                    *slot = f64::from_le_bytes(f64_buf);
                    if !slot.is_finite() {
                        return Err(Error::data("non-finite logit in checkpoint".to_string()));
                    }
                }
                ll.push(z);
            }
            logits.push(ll);
        }
        Ok(Network {
            arch,
            wiring,
            logits,
            groupsum: GroupSumConfig {
                classes,
                group_size,
                tau,
            },
            seed,
        })
    }
}
