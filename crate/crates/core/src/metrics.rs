//! Measurement instruments: the three-way gap decomposition, commitment,
//! gate usage, and the first-order loss-gap diagnostic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gates::GATE_COUNT;
use crate::network::{
    draw_noise_field, mix_seed, EvalMode, Network, NoiseSpec, K,
};
use crate::selection::{argmax_select, MethodConfig};
use crate::training::MetricsRow;

/// Evaluation batch size; evaluation streams the dataset so memory stays
/// bounded regardless of its size.
const EVAL_BATCH: usize = 512;

/// The accuracy triple of one checkpoint and the gaps derived from it.
///
/// Accuracies are exact ratios of correct counts, so identical computation
/// paths produce exactly equal accuracies and exactly zero gaps. The total
/// gap is defined as the sum of the two components (telescoping identity).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub a_method: f64,
    pub a_soft: f64,
    pub a_hard: f64,
    pub correct_method: u64,
    pub method_trials: u64,
    pub correct_soft: u64,
    pub correct_hard: u64,
    pub trials: u64,
}

impl GapReport {
    pub fn selection_gap(&self) -> f64 {
        self.a_method - self.a_soft
    }

    pub fn computation_gap(&self) -> f64 {
        self.a_soft - self.a_hard
    }

    pub fn total_gap(&self) -> f64 {
        self.selection_gap() + self.computation_gap()
    }
}

/// Counts argmax-class matches over sample rows of class scores.
pub fn count_correct(logits: &[f64], labels: &[u8], classes: usize) -> u64 {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax_select(row) == label as usize)
        .count() as u64
}

struct PassOutcome {
    correct: u64,
    loss_sum: f64,
}

/// Streams one evaluation pass over the dataset and counts correct argmax
/// predictions; also accumulates per-sample cross-entropy of the scaled
/// logits when `with_loss` is set.
fn eval_pass(
    net: &Network,
    ds: &Dataset,
    mode: EvalMode<'_>,
    with_loss: bool,
) -> Result<PassOutcome> {
    let mut correct = 0u64;
    let mut loss_sum = 0.0;
    let classes = ds.classes;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + EVAL_BATCH).min(ds.len());
        let n = end - start;
        let features = &ds.features[start * ds.dims..end * ds.dims];
        let y = match mode {
            EvalMode::Method { method, tau, noise } => {
                net.forward_eval_mode(features, n, EvalMode::Method { method, tau, noise })?
            }
            EvalMode::SoftGateArgmax => {
                net.forward_eval_mode(features, n, EvalMode::SoftGateArgmax)?
            }
            EvalMode::HardGateArgmax => {
                net.forward_eval_mode(features, n, EvalMode::HardGateArgmax)?
            }
        };
        let labels = &ds.labels[start..end];
        correct += count_correct(&y, labels, classes);
        if with_loss {
            loss_sum += y
                .par_chunks(classes)
                .zip(labels.par_iter())
                .map(|(row, &label)| crate::training::cross_entropy_loss_and_grad(row, label as usize).0)
                .sum::<f64>();
        }
        start = end;
    }
    Ok(PassOutcome { correct, loss_sum })
}

fn check_dataset(net: &Network, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::shape("evaluation dataset is empty"));
    }
    if ds.dims != net.arch.input_width {
        return Err(Error::shape(format!(
            "dataset dims {} do not match network input width {}",
            ds.dims, net.arch.input_width
        )));
    }
    if ds.classes != net.groupsum.classes {
        return Err(Error::shape(format!(
            "dataset classes {} do not match network classes {}",
            ds.classes, net.groupsum.classes
        )));
    }
    Ok(())
}

/// Accuracy of the method's own forward computation over a dataset; one pass
/// with fresh noise from `noise_seed` for stochastic methods.
pub fn method_accuracy(
    net: &Network,
    ds: &Dataset,
    method: MethodConfig,
    tau: f64,
    noise_seed: u64,
    per_example_noise: bool,
) -> Result<f64> {
    check_dataset(net, ds)?;
    let outcome = method_pass(net, ds, method, tau, noise_seed, per_example_noise, false)?;
    Ok(outcome.correct as f64 / ds.len() as f64)
}

fn method_pass(
    net: &Network,
    ds: &Dataset,
    method: MethodConfig,
    tau: f64,
    noise_seed: u64,
    per_example_noise: bool,
    with_loss: bool,
) -> Result<PassOutcome> {
    let field;
    let noise = if !method.uses_noise() {
        NoiseSpec::None
    } else if per_example_noise {
        NoiseSpec::PerExample { stream: noise_seed }
    } else {
        field = draw_noise_field(&net.layer_widths(), noise_seed);
        NoiseSpec::Shared(&field)
    };
    eval_pass(net, ds, EvalMode::Method { method, tau, noise }, with_loss)
}

/// Runs the three evaluation pipelines over a test set: the method's own
/// forward pass, argmax selection with soft gates, and argmax selection with
/// hard gates. Stochastic methods use fresh noise per method pass; `repeats`
/// averages several such passes.
pub fn evaluate_three_ways(
    net: &Network,
    ds: &Dataset,
    method: MethodConfig,
    tau: f64,
    noise_seed: u64,
    repeats: usize,
) -> Result<GapReport> {
    Ok(evaluate_three_ways_opts(net, ds, method, tau, noise_seed, repeats, false)?.0)
}

/// As [`evaluate_three_ways`], optionally with per-example evaluation noise;
/// also returns the mean cross-entropy of the method pass.
pub fn evaluate_three_ways_opts(
    net: &Network,
    ds: &Dataset,
    method: MethodConfig,
    tau: f64,
    noise_seed: u64,
    repeats: usize,
    per_example_noise: bool,
) -> Result<(GapReport, f64)> {
    check_dataset(net, ds)?;
    if repeats == 0 {
        return Err(Error::config("evaluation needs at least one repeat"));
    }
    let n = ds.len() as u64;

    let mut correct_method = 0u64;
    let mut loss_sum = 0.0;
    for rep in 0..repeats {
        let outcome = method_pass(
            net,
            ds,
            method,
            tau,
            mix_seed(noise_seed, rep as u64),
            per_example_noise,
            true,
        )?;
        correct_method += outcome.correct;
        loss_sum += outcome.loss_sum;
    }
    let method_trials = n * repeats as u64;

    let soft = eval_pass(net, ds, EvalMode::SoftGateArgmax, false)?;
    let hard = eval_pass(net, ds, EvalMode::HardGateArgmax, false)?;

    let report = GapReport {
        a_method: correct_method as f64 / method_trials as f64,
        a_soft: soft.correct as f64 / n as f64,
        a_hard: hard.correct as f64 / n as f64,
        correct_method,
        method_trials,
        correct_soft: soft.correct,
        correct_hard: hard.correct,
        trials: n,
    };
    Ok((report, loss_sum / method_trials as f64))
}

/// Winner softmax weight of one node at temperature 1, computed as
/// `1 / sum_j exp(z_j - z_max)`.
#[inline]
pub(crate) fn node_confidence(z: &[f64; K]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&zi| (zi - max).exp()).sum();
    1.0 / sum
}

/// Per-layer and network-wide mean of the winner softmax probability at
/// temperature 1. A pure function of the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct CommitmentReport {
    pub per_layer: Vec<f64>,
    pub network_mean: f64,
}

pub fn commitment_by_layer(net: &Network) -> CommitmentReport {
    let per_layer: Vec<f64> = net
        .logits
        .iter()
        .map(|layer| {
            // Fixed-size chunks summed in order keep the reduction exact
            // across thread counts.
            let partials: Vec<f64> = layer
                .par_chunks(1024)
                .map(|chunk| chunk.iter().map(node_confidence).sum::<f64>())
                .collect();
            partials.iter().sum::<f64>() / layer.len() as f64
        })
        .collect();
    let total_nodes = net.total_nodes();
    let network_mean = per_layer
        .iter()
        .zip(net.logits.iter().map(|l| l.len()))
        .map(|(m, n)| m * n as f64)
        .sum::<f64>()
        / total_nodes as f64;
    CommitmentReport {
        per_layer,
        network_mean,
    }
}

/// Counts of the argmax-selected gate per node.
#[derive(Clone, Debug, PartialEq)]
pub struct GateUsageHistogram {
    pub per_layer: Vec<[u64; GATE_COUNT]>,
    pub total: [u64; GATE_COUNT],
}

pub fn gate_usage(net: &Network) -> GateUsageHistogram {
    let mut per_layer = Vec::with_capacity(net.arch.layers);
    let mut total = [0u64; GATE_COUNT];
    for layer in &net.logits {
        let mut counts = [0u64; GATE_COUNT];
        for z in layer {
            counts[argmax_select(z)] += 1;
        }
        for (t, c) in total.iter_mut().zip(&counts) {
            *t += c;
        }
        per_layer.push(counts);
    }
    GateUsageHistogram { per_layer, total }
}

/// First-order loss-gap diagnostic for one sample:
/// `2 (1 - sigma_true) * max_c sum_{n in G_c} (1 - w_{n,winner})`.
pub fn holder_bound(sigma_true: f64, max_group_noncommitment: f64) -> f64 {
    2.0 * (1.0 - sigma_true) * max_group_noncommitment
}

/// Per-sample loss-gap bounds over a batch, with `sigma_true` taken from the
/// hard-inference softmax (integer group sums rescaled by the readout
/// temperature) and the non-commitment term from the final-layer winner
/// weights at temperature 1.
pub fn loss_gap_bound(
    net: &Network,
    features: &[f64],
    labels: &[u8],
    batch: usize,
) -> Result<Vec<f64>> {
    if labels.len() != batch {
        return Err(Error::shape("labels do not match batch size"));
    }
    let classes = net.groupsum.classes;
    let group_size = net.groupsum.group_size;
    let last = net.logits.last().unwrap();
    let max_group_noncommitment = (0..classes)
        .map(|c| {
            last[c * group_size..(c + 1) * group_size]
                .iter()
                .map(|z| 1.0 - node_confidence(z))
                .sum::<f64>()
        })
        .fold(0.0, f64::max);

    let y_hard = net.forward_eval_mode(features, batch, EvalMode::HardGateArgmax)?;
    let mut bounds = Vec::with_capacity(batch);
    for (row, &label) in y_hard.chunks(classes).zip(labels) {
        let scaled: Vec<f64> = row.iter().map(|v| v / net.groupsum.tau).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = scaled.iter().map(|&v| (v - max).exp()).sum();
        let sigma_true = (scaled[label as usize] - max).exp() / denom;
        bounds.push(holder_bound(sigma_true, max_group_noncommitment));
    }
    Ok(bounds)
}

/// Selection-gap value with the largest magnitude over the checkpoints,
/// sign preserved.
pub fn peak_gap(rows: &[MetricsRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::data("peak gap of an empty metrics log"));
    }
    Ok(rows
        .iter()
        .map(|r| r.selection_gap)
        .fold(0.0f64, |acc, g| if g.abs() > acc.abs() { g } else { acc }))
}

/// Peak selection gap over the trailing `window` fraction of the iteration
/// span (`window = 0.8` reproduces the last-80% convention).
pub fn peak_gap_in_window(rows: &[MetricsRow], window: f64) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::data("peak gap of an empty metrics log"));
    }
    let max_iter = rows.iter().map(|r| r.iteration).max().unwrap();
    let cutoff = (1.0 - window.clamp(0.0, 1.0)) * max_iter as f64;
    let tail: Vec<MetricsRow> = rows
        .iter()
        .filter(|r| r.iteration as f64 >= cutoff)
        .cloned()
        .collect();
    peak_gap(&tail)
}
