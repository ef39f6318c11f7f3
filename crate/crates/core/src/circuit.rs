//! Hard-circuit deployment: extracts the argmax-selected gates of a trained
//! network into a flat circuit and evaluates it with word-packed bitwise
//! operations.
//!
//! Packing is sample-parallel: each 64-bit word holds the same wire across 64
//! samples, so every gate costs one bitwise expression per word regardless of
//! gate type. Padding bits in the last word of a row are kept at zero.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gates::{GateId, GateSpec};
use crate::network::{EvalMode, Network};
use crate::selection::argmax_select;

/// Samples evaluated per gate word operation.
pub const PACKING_FACTOR: usize = 64;

/// One gate of a compiled circuit. Sources are global wire indices: wires
/// `0..input_width` are inputs, wire `input_width + i` is gate `i`'s output.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CircuitGate {
    pub gate: GateId,
    pub src_a: u32,
    pub src_b: u32,
}

/// A topologically ordered hard circuit with a grouped class readout over its
/// final layer.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CompiledCircuit {
    pub input_width: usize,
    pub layer_widths: Vec<usize>,
    pub classes: usize,
    pub group_size: usize,
    /// Gates in evaluation order, layer-major.
    pub gates: Vec<CircuitGate>,
}

impl CompiledCircuit {
    pub fn total_wires(&self) -> usize {
        self.input_width + self.gates.len()
    }

    /// Wire index of the first final-layer gate output.
    pub fn final_layer_start(&self) -> usize {
        let last = *self.layer_widths.last().unwrap_or(&0);
        self.total_wires() - last
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() {
            return Err(Error::data("circuit has no layers".to_string()));
        }
        let total: usize = self.layer_widths.iter().sum();
        if total != self.gates.len() {
            return Err(Error::data(format!(
                "layer widths sum to {total} but the circuit lists {} gates",
                self.gates.len()
            )));
        }
        let last = *self.layer_widths.last().unwrap();
        if self.classes * self.group_size != last {
            return Err(Error::data(format!(
                "groups ({} x {}) do not partition the final layer of width {last}",
                self.classes, self.group_size
            )));
        }
        for (i, g) in self.gates.iter().enumerate() {
            let wire = self.input_width + i;
            if g.src_a as usize >= wire || g.src_b as usize >= wire {
                return Err(Error::data(format!(
                    "gate {i} reads wires ({}, {}) at or after its own wire {wire}",
                    g.src_a, g.src_b
                )));
            }
        }
        Ok(())
    }
}

/// Extracts the deployed circuit: per node, the argmax gate (ties to the
/// lowest index) with its wiring, preserving class groups.
pub fn extract_circuit(net: &Network) -> CompiledCircuit {
    let in_w = net.arch.input_width;
    let w = net.arch.width;
    let mut gates = Vec::with_capacity(net.total_nodes());
    for (layer, (wires, logits)) in net.wiring.iter().zip(&net.logits).enumerate() {
        let base = if layer == 0 {
            0
        } else {
            in_w + (layer - 1) * w
        };
        for ([sa, sb], z) in wires.iter().zip(logits) {
            gates.push(CircuitGate {
                gate: GateId::new(argmax_select(z)).unwrap(),
                src_a: base as u32 + sa,
                src_b: base as u32 + sb,
            });
        }
    }
    CompiledCircuit {
        input_width: in_w,
        layer_widths: net.layer_widths(),
        classes: net.groupsum.classes,
        group_size: net.groupsum.group_size,
        gates,
    }
}

/// Sample-parallel bit matrix: one row of 64-bit words per feature, bit `s`
/// of a word holds sample `s`'s value for that feature.
#[derive(Clone, Debug)]
pub struct BitBatch {
    pub samples: usize,
    pub width: usize,
    words_per_row: usize,
    rows: Vec<u64>,
}

impl BitBatch {
    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    fn empty(samples: usize, width: usize) -> BitBatch {
        let words_per_row = samples.div_ceil(PACKING_FACTOR).max(1);
        BitBatch {
            samples,
            width,
            words_per_row,
            rows: vec![0; width * words_per_row],
        }
    }

    /// Packs unit-interval features (sample-major, `samples * width`) by
    /// thresholding each value at 0.5.
    pub fn from_unit_features(features: &[f64], samples: usize, width: usize) -> BitBatch {
        assert_eq!(features.len(), samples * width);
        let mut batch = BitBatch::empty(samples, width);
        for s in 0..samples {
            let row = &features[s * width..(s + 1) * width];
            for (f, &v) in row.iter().enumerate() {
                if v > 0.5 {
                    batch.set(f, s);
                }
            }
        }
        batch
    }

    fn set(&mut self, row: usize, sample: usize) {
        self.rows[row * self.words_per_row + sample / 64] |= 1u64 << (sample % 64);
    }

    pub fn get(&self, row: usize, sample: usize) -> bool {
        (self.rows[row * self.words_per_row + sample / 64] >> (sample % 64)) & 1 == 1
    }
}

/// Word-wise evaluation of one gate on packed operands.
#[inline]
fn gate_word(gate: GateId, a: u64, b: u64) -> u64 {
    match gate.index() {
        0 => 0,
        1 => a & b,
        2 => a & !b,
        3 => a,
        4 => !a & b,
        5 => b,
        6 => a ^ b,
        7 => a | b,
        8 => !(a | b),
        9 => !(a ^ b),
        10 => !b,
        11 => a | !b,
        12 => !a,
        13 => !a | b,
        14 => !(a & b),
        15 => !0,
        _ => unreachable!(),
    }
}

/// Evaluates the circuit on a packed batch. Returns per-sample integer class
/// scores, sample-major (`samples * classes`).
pub fn eval_bitpacked(circuit: &CompiledCircuit, batch: &BitBatch) -> Result<Vec<u32>> {
    if batch.width != circuit.input_width {
        return Err(Error::shape(format!(
            "batch width {} does not match circuit input width {}",
            batch.width, circuit.input_width
        )));
    }
    circuit.validate()?;
    let wpr = batch.words_per_row;
    let total = circuit.total_wires();
    let tail_bits = batch.samples % PACKING_FACTOR;
    let tail_mask: u64 = if batch.samples == 0 {
        0
    } else if tail_bits == 0 {
        !0
    } else {
        (1u64 << tail_bits) - 1
    };

    let mut wires = vec![0u64; total * wpr];
    wires[..circuit.input_width * wpr].copy_from_slice(&batch.rows);

    for (i, g) in circuit.gates.iter().enumerate() {
        let out_base = (circuit.input_width + i) * wpr;
        let a_base = g.src_a as usize * wpr;
        let b_base = g.src_b as usize * wpr;
        for w in 0..wpr {
            let v = gate_word(g.gate, wires[a_base + w], wires[b_base + w]);
            wires[out_base + w] = if w + 1 == wpr { v & tail_mask } else { v };
        }
    }

    let mut scores = vec![0u32; batch.samples * circuit.classes];
    let final_start = circuit.final_layer_start();
    for c in 0..circuit.classes {
        for i in 0..circuit.group_size {
            let wire = final_start + c * circuit.group_size + i;
            let row = &wires[wire * wpr..(wire + 1) * wpr];
            for (wi, &word) in row.iter().enumerate() {
                let mut bits = word;
                while bits != 0 {
                    let s = wi * 64 + bits.trailing_zeros() as usize;
                    scores[s * circuit.classes + c] += 1;
                    bits &= bits - 1;
                }
            }
        }
    }
    Ok(scores)
}

/// Scalar reference evaluation for one sample of input bits. Returns every
/// wire value; used for diagnostics and as the unpacked comparison point.
pub fn eval_scalar_wires(circuit: &CompiledCircuit, input_bits: &[bool]) -> Vec<bool> {
    assert_eq!(input_bits.len(), circuit.input_width);
    let mut wires = Vec::with_capacity(circuit.total_wires());
    wires.extend_from_slice(input_bits);
    for g in &circuit.gates {
        let a = wires[g.src_a as usize];
        let b = wires[g.src_b as usize];
        let spec = GateSpec::of(g.gate);
        wires.push(spec.truth_table[((a as usize) << 1) | (b as usize)]);
    }
    wires
}

/// Scalar class scores for one sample.
pub fn eval_scalar(circuit: &CompiledCircuit, input_bits: &[bool]) -> Vec<u32> {
    let wires = eval_scalar_wires(circuit, input_bits);
    let final_start = circuit.final_layer_start();
    (0..circuit.classes)
        .map(|c| {
            (0..circuit.group_size)
                .map(|i| wires[final_start + c * circuit.group_size + i] as u32)
                .sum()
        })
        .collect()
}

/// Class prediction from integer scores; ties break to the lowest class.
pub fn predict_from_scores(scores: &[u32], classes: usize) -> Vec<usize> {
    scores
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Location of the first disagreement between the packed and float pipelines.
#[derive(Clone, Copy, Debug)]
pub struct Mismatch {
    pub sample: usize,
    /// First diverging wire, when wire-level comparison located one.
    pub wire: Option<usize>,
}

/// Outcome of a packed-vs-float equivalence check.
#[derive(Clone, Debug)]
pub struct EquivalenceReport {
    pub pass: bool,
    pub samples: usize,
    pub first_mismatch: Option<Mismatch>,
}

impl std::fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.samples == 0 {
            return write!(f, "vacuous pass (0 samples)");
        }
        match (self.pass, self.first_mismatch) {
            (true, _) => write!(f, "pass ({} samples, bit-exact)", self.samples),
            (false, Some(m)) => write!(
                f,
                "FAIL at sample {}{}",
                m.sample,
                match m.wire {
                    Some(w) => format!(", first divergent wire {w}"),
                    None => ", predictions differ".to_string(),
                }
            ),
            (false, None) => write!(f, "FAIL"),
        }
    }
}

/// Compares packed circuit predictions against the float hard pipeline of the
/// network on seeded random binary inputs. The requirement is bit-exact
/// agreement of predictions; on failure the report carries the sample index
/// and the first diverging wire.
pub fn verify_equivalence(
    circuit: &CompiledCircuit,
    net: &Network,
    samples: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    if circuit.input_width != net.arch.input_width {
        return Err(Error::shape(format!(
            "circuit input width {} does not match network input width {}",
            circuit.input_width, net.arch.input_width
        )));
    }
    if samples == 0 {
        return Ok(EquivalenceReport {
            pass: true,
            samples: 0,
            first_mismatch: None,
        });
    }
    let features = random_binary_features(circuit.input_width, samples, seed);
    verify_equivalence_on(circuit, net, &features, samples)
}

/// Seeded random binary feature matrix (sample-major), as used by the
/// equivalence check and throughput measurements.
pub fn random_binary_features(width: usize, samples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples * width)
        .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
        .collect()
}

/// Equivalence check on caller-provided unit-interval features.
pub fn verify_equivalence_on(
    circuit: &CompiledCircuit,
    net: &Network,
    features: &[f64],
    samples: usize,
) -> Result<EquivalenceReport> {
    let width = circuit.input_width;
    let batch = BitBatch::from_unit_features(features, samples, width);
    let scores = eval_bitpacked(circuit, &batch)?;
    let packed_preds = predict_from_scores(&scores, circuit.classes);

    let y_hard = net.forward_eval_mode(features, samples, EvalMode::HardGateArgmax)?;
    for s in 0..samples {
        let row = &y_hard[s * circuit.classes..(s + 1) * circuit.classes];
        let float_pred = argmax_select(row);
        if float_pred != packed_preds[s] {
            // Locate the first diverging wire via the scalar references.
            let input_bits: Vec<bool> = (0..width)
                .map(|f| features[s * width + f] > 0.5)
                .collect();
            let circuit_wires = eval_scalar_wires(circuit, &input_bits);
            let net_wires = net_hard_wires(net, &input_bits);
            let wire = (0..circuit.total_wires())
                .find(|&wi| circuit_wires[wi] != net_wires[wi]);
            return Ok(EquivalenceReport {
                pass: false,
                samples,
                first_mismatch: Some(Mismatch { sample: s, wire }),
            });
        }
    }
    Ok(EquivalenceReport {
        pass: true,
        samples,
        first_mismatch: None,
    })
}

/// Per-wire values of the network's hard pipeline for one sample, in circuit
/// wire order (inputs, then nodes layer-major).
fn net_hard_wires(net: &Network, input_bits: &[bool]) -> Vec<bool> {
    let mut wires = Vec::with_capacity(net.arch.input_width + net.total_nodes());
    wires.extend_from_slice(input_bits);
    let mut prev: Vec<bool> = input_bits.to_vec();
    for (layer, (wiring, logits)) in net.wiring.iter().zip(&net.logits).enumerate() {
        let _ = layer;
        let mut next = Vec::with_capacity(wiring.len());
        for ([sa, sb], z) in wiring.iter().zip(logits) {
            let spec = GateSpec::of(GateId::new(argmax_select(z)).unwrap());
            let a = prev[*sa as usize];
            let b = prev[*sb as usize];
            next.push(spec.truth_table[((a as usize) << 1) | (b as usize)]);
        }
        wires.extend_from_slice(&next);
        prev = next;
    }
    wires
}

const CIRCUIT_HEADER: &str = "gatenet-circuit v1";

/// Writes the circuit in the versioned text format: a header naming widths,
/// layers, and groups, then one `gate src_a src_b` line per node.
pub fn write_circuit(circuit: &CompiledCircuit, mut w: impl Write) -> Result<()> {
    writeln!(w, "{CIRCUIT_HEADER}")?;
    writeln!(w, "inputs {}", circuit.input_width)?;
    writeln!(w, "layers {}", circuit.layer_widths.len())?;
    let widths: Vec<String> = circuit.layer_widths.iter().map(|w| w.to_string()).collect();
    writeln!(w, "widths {}", widths.join(" "))?;
    writeln!(w, "classes {}", circuit.classes)?;
    writeln!(w, "group_size {}", circuit.group_size)?;
    writeln!(w, "gates {}", circuit.gates.len())?;
    for g in &circuit.gates {
        writeln!(w, "{} {} {}", g.gate.index(), g.src_a, g.src_b)?;
    }
    Ok(())
}

/// Parses a circuit written by [`write_circuit`].
pub fn read_circuit(r: impl BufRead) -> Result<CompiledCircuit> {
    let mut lines = r.lines();
    let mut next_line = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::data(format!("circuit file truncated before {what}")))
    };
    let header = next_line("header")?;
    if header.trim() != CIRCUIT_HEADER {
        return Err(Error::data(format!(
            "bad circuit header '{header}'; expected '{CIRCUIT_HEADER}'"
        )));
    }
    let mut field = |name: &str| -> Result<Vec<u64>> {
        let line = next_line(name)?;
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        if key != name {
            return Err(Error::data(format!(
                "expected '{name}' line, found '{line}'"
            )));
        }
        parts
            .map(|p| {
                p.parse::<u64>()
                    .map_err(|_| Error::data(format!("bad integer '{p}' in '{name}' line")))
            })
            .collect()
    };
    let input_width = *field("inputs")?
        .first()
        .ok_or_else(|| Error::data("missing inputs value"))? as usize;
    let layer_count = *field("layers")?
        .first()
        .ok_or_else(|| Error::data("missing layers value"))? as usize;
    let widths: Vec<usize> = field("widths")?.iter().map(|&v| v as usize).collect();
    if widths.len() != layer_count {
        return Err(Error::data(format!(
            "widths line has {} entries, expected {layer_count}",
            widths.len()
        )));
    }
    let classes = *field("classes")?
        .first()
        .ok_or_else(|| Error::data("missing classes value"))? as usize;
    let group_size = *field("group_size")?
        .first()
        .ok_or_else(|| Error::data("missing group_size value"))? as usize;
    let gate_count = *field("gates")?
        .first()
        .ok_or_else(|| Error::data("missing gates value"))? as usize;

    let mut gates = Vec::with_capacity(gate_count);
    for i in 0..gate_count {
        let line = next_line(&format!("gate {i}"))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::data(format!("bad gate line '{line}'")));
        }
        let gate_idx: usize = parts[0]
            .parse()
            .map_err(|_| Error::data(format!("bad gate id '{}'", parts[0])))?;
        let src_a: u32 = parts[1]
            .parse()
            .map_err(|_| Error::data(format!("bad source '{}'", parts[1])))?;
        let src_b: u32 = parts[2]
            .parse()
            .map_err(|_| Error::data(format!("bad source '{}'", parts[2])))?;
        gates.push(CircuitGate {
            gate: GateId::new(gate_idx)?,
            src_a,
            src_b,
        });
    }
    let circuit = CompiledCircuit {
        input_width,
        layer_widths: widths,
        classes,
        group_size,
        gates,
    };
    circuit.validate()?;
    Ok(circuit)
}

pub fn save_circuit(circuit: &CompiledCircuit, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_circuit(circuit, f)
}

pub fn load_circuit(path: &Path) -> Result<CompiledCircuit> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_circuit(f)
}
