//! Loss, the network backward pass, Adam, the confidence-adaptive backward
//! temperature controller, and the training loop.
//!
//! All four estimators share one backward form: per node,
//! `dz_j = (delta / tau_b) * w_j * (g_j - hbar)` against the surrogate
//! mixture `hbar = sum_i w_i g_i`. Because every gate is bilinear, the batch
//! sum of these gradients factors through a per-node 4-vector accumulator
//! `v = sum_s delta_s * (1, a, b, ab)`, which keeps the per-step cost at a
//! few multiply-adds per node per sample.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gates::gate_coeffs;
use crate::metrics;
use crate::network::{
    draw_noise_field, mix_seed, per_example_rng, prep_node, ForwardTrace, Network, NoiseSpec, K,
    SAMPLE_CHUNK, SAMPLE_GROUP,
};
use crate::selection::{gumbel_from_uniform, ForwardKind, MethodConfig};

const BATCH_STREAM: u64 = 0x6261_7463_68; // "batch"
const NOISE_STREAM: u64 = 0x6e6f_6973_65; // "noise"
const EVAL_STREAM: u64 = 0x6576_616c; // "eval"

/// Cross-entropy of one sample's class logits, with its gradient
/// `d loss / d y_c = softmax(y)_c - 1[c == label]`.
pub fn cross_entropy_loss_and_grad(y: &[f64], label: usize) -> (f64, Vec<f64>) {
    debug_assert!(label < y.len());
    let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut grad = vec![0.0; y.len()];
    let mut sum = 0.0;
    for (g, &yc) in grad.iter_mut().zip(y) {
        let e = (yc - max).exp();
        *g = e;
        sum += e;
    }
    for g in grad.iter_mut() {
        *g /= sum;
    }
    let loss = max + sum.ln() - y[label];
    grad[label] -= 1.0;
    (loss, grad)
}

/// Logit gradients matching the network's parameter layout.
#[derive(Clone, Debug)]
pub struct LogitGradients(pub Vec<Vec<[f64; K]>>);

impl LogitGradients {
    fn zeros(net: &Network) -> LogitGradients {
        LogitGradients(
            net.logits
                .iter()
                .map(|layer| vec![[0.0; K]; layer.len()])
                .collect(),
        )
    }
}

/// Reverse pass over a forward trace: class-logit gradients are pushed down
/// through the GroupSum readout, node by node through the surrogate mixture,
/// accumulating logit gradients per node and input gradients into the layer
/// below. `dy` is sample-major (`batch * classes`) and already carries any
/// batch averaging.
pub fn backward_network(
    net: &Network,
    trace: &ForwardTrace,
    features: &[f64],
    dy: &[f64],
    tau_b: f64,
) -> Result<LogitGradients> {
    if (trace.tau - tau_b).abs() > 1e-12 {
        return Err(Error::shape(format!(
            "trace weights were computed at tau={}, backward called with tau_b={tau_b}",
            trace.tau
        )));
    }
    if tau_b <= 0.0 || !tau_b.is_finite() {
        return Err(Error::config(format!(
            "backward temperature must be positive: {tau_b}"
        )));
    }
    let batch = trace.batch;
    let classes = net.groupsum.classes;
    if dy.len() != batch * classes {
        return Err(Error::shape(format!(
            "dy has {} entries, expected {batch} x {classes}",
            dy.len()
        )));
    }
    if features.len() != batch * net.arch.input_width {
        return Err(Error::shape("feature buffer does not match trace batch"));
    }

    match (&trace.node, trace.per_example_stream) {
        (Some(prep), None) => backward_shared(net, trace, prep, features, dy, tau_b),
        (None, Some(stream)) => backward_per_example(net, trace, stream, features, dy, tau_b),
        _ => Err(Error::shape("trace carries no backward data")),
    }
}

/// Shared-noise backward: weights are per node, so the batch reduction runs
/// through the per-node 4-vector accumulators.
fn backward_shared(
    net: &Network,
    trace: &ForwardTrace,
    prep: &[Vec<crate::network::NodePrep>],
    features: &[f64],
    dy: &[f64],
    tau_b: f64,
) -> Result<LogitGradients> {
    let batch = trace.batch;
    let width = net.arch.width;
    let layers = net.arch.layers;
    let classes = net.groupsum.classes;
    let group_size = net.groupsum.group_size;
    let gs_tau = net.groupsum.tau;
    let max_width = width.max(net.arch.input_width);

    let chunk_count = batch.div_ceil(SAMPLE_CHUNK);
    // One 4-vector accumulator per node per chunk, folded in chunk order so
    // the reduction is scheduler-independent. Samples advance in groups that
    // share each node's wiring and mixture loads.
    let partials: Vec<Vec<Vec<[f64; 4]>>> = (0..chunk_count)
        .into_par_iter()
        .map(|chunk| {
            let mut v: Vec<Vec<[f64; 4]>> = (0..layers).map(|_| vec![[0.0; 4]; width]).collect();
            let group = SAMPLE_GROUP;
            let mut delta = vec![0.0; group * max_width];
            let mut next_delta = vec![0.0; group * max_width];
            let s0 = chunk * SAMPLE_CHUNK;
            let s1 = ((chunk + 1) * SAMPLE_CHUNK).min(batch);
            let mut g0 = s0;
            while g0 < s1 {
                let glen = (s1 - g0).min(group);
                for i in 0..glen {
                    for n in 0..width {
                        delta[i * width + n] = dy[(g0 + i) * classes + n / group_size] / gs_tau;
                    }
                }
                for layer in (0..layers).rev() {
                    let prev_width = if layer == 0 {
                        net.arch.input_width
                    } else {
                        width
                    };
                    let prev: &[f64] = if layer == 0 { features } else { &trace.activations[layer - 1] };
                    next_delta[..glen * prev_width].fill(0.0);
                    let wiring = &net.wiring[layer];
                    let node_prep = &prep[layer];
                    let vl = &mut v[layer];
                    assert!(wiring.len() == width && node_prep.len() == width && vl.len() == width);
                    assert!(prev.len() >= (g0 + glen) * prev_width);
                    assert!(delta.len() >= glen * width && next_delta.len() >= glen * prev_width);
                    assert!(wiring
                        .iter()
                        .all(|&[a, b]| (a as usize) < prev_width && (b as usize) < prev_width));
                    for n in 0..width {
                        // Wiring sources are < prev_width by construction and
                        // every composed index is covered by the assertions
                        // above.
                        let [sa, sb] = unsafe { *wiring.get_unchecked(n) };
                        let cw = unsafe { &node_prep.get_unchecked(n).mix };
                        let acc = unsafe { vl.get_unchecked_mut(n) };
                        for i in 0..glen {
                            let d = unsafe { *delta.get_unchecked(i * width + n) };
                            if d == 0.0 {
                                continue;
                            }
                            let pbase = (g0 + i) * prev_width;
                            unsafe {
                                let a = *prev.get_unchecked(pbase + sa as usize);
                                let b = *prev.get_unchecked(pbase + sb as usize);
                                acc[0] += d;
                                acc[1] += d * a;
                                acc[2] += d * b;
                                acc[3] += d * a * b;
                                if layer > 0 {
                                    *next_delta.get_unchecked_mut(i * prev_width + sa as usize) +=
                                        d * (cw[1] + cw[3] * b);
                                    *next_delta.get_unchecked_mut(i * prev_width + sb as usize) +=
                                        d * (cw[2] + cw[3] * a);
                                }
                            }
                        }
                    }
                    std::mem::swap(&mut delta, &mut next_delta);
                }
                g0 += glen;
            }
            v
        })
        .collect();

    let mut v_total: Vec<Vec<[f64; 4]>> = (0..layers).map(|_| vec![[0.0; 4]; width]).collect();
    for part in partials {
        for (vt, vp) in v_total.iter_mut().zip(part) {
            for (t, p) in vt.iter_mut().zip(vp) {
                for (ti, pi) in t.iter_mut().zip(p) {
                    *ti += pi;
                }
            }
        }
    }

    let mut grads = LogitGradients::zeros(net);
    for layer in 0..layers {
        let node_prep = &prep[layer];
        let vl = &v_total[layer];
        grads.0[layer]
            .par_chunks_mut(512)
            .enumerate()
            .for_each(|(chunk, out)| {
                let base = chunk * 512;
                for (i, dz) in out.iter_mut().enumerate() {
                    let n = base + i;
                    let p = &node_prep[n];
                    let vv = &vl[n];
                    let mix_dot =
                        p.mix[0] * vv[0] + p.mix[1] * vv[1] + p.mix[2] * vv[2] + p.mix[3] * vv[3];
                    for (j, slot) in dz.iter_mut().enumerate() {
                        let c = gate_coeffs(j);
                        let g_dot = c[0] * vv[0] + c[1] * vv[1] + c[2] * vv[2] + c[3] * vv[3];
                        *slot = p.weights[j] / tau_b * (g_dot - mix_dot);
                    }
                }
            });
    }
    Ok(grads)
}

/// Per-example-noise backward: the noise (and so the weights) differ per
/// sample, so each sample redraws its field and accumulates full K-vector
/// gradients directly.
fn backward_per_example(
    net: &Network,
    trace: &ForwardTrace,
    stream: u64,
    features: &[f64],
    dy: &[f64],
    tau_b: f64,
) -> Result<LogitGradients> {
    let batch = trace.batch;
    let width = net.arch.width;
    let layers = net.arch.layers;
    let classes = net.groupsum.classes;
    let group_size = net.groupsum.group_size;
    let gs_tau = net.groupsum.tau;
    let max_width = width.max(net.arch.input_width);
    let method = trace.method;

    let chunk_count = batch.div_ceil(SAMPLE_CHUNK);
    let partials: Vec<Vec<Vec<[f64; K]>>> = (0..chunk_count)
        .into_par_iter()
        .map(|chunk| {
            let mut dz: Vec<Vec<[f64; K]>> = (0..layers).map(|_| vec![[0.0; K]; width]).collect();
            let mut delta = vec![0.0; max_width];
            let mut next_delta = vec![0.0; max_width];
            let s0 = chunk * SAMPLE_CHUNK;
            let s1 = ((chunk + 1) * SAMPLE_CHUNK).min(batch);
            for s in s0..s1 {
                for n in 0..width {
                    delta[n] = dy[s * classes + n / group_size] / gs_tau;
                }
                for layer in (0..layers).rev() {
                    let prev_width = if layer == 0 {
                        net.arch.input_width
                    } else {
                        width
                    };
                    let prev: &[f64] = if layer == 0 {
                        &features[s * prev_width..(s + 1) * prev_width]
                    } else {
                        &trace.activations[layer - 1][s * width..(s + 1) * width]
                    };
                    next_delta[..prev_width].fill(0.0);
                    let wiring = &net.wiring[layer];
                    // Identical stream to the forward pass for this
                    // (sample, layer), walked in node order.
                    let mut rng = per_example_rng(stream, s, layer);
                    let dzl = &mut dz[layer];
                    for n in 0..width {
                        let mut g = [0.0; K];
                        for slot in g.iter_mut() {
                            *slot = gumbel_from_uniform(rng.random());
                        }
                        let p = prep_node(&net.logits[layer][n], Some(&g), method, tau_b);
                        let d = delta[n];
                        if d == 0.0 {
                            continue;
                        }
                        let [sa, sb] = wiring[n];
                        let a = prev[sa as usize];
                        let b = prev[sb as usize];
                        let u = [1.0, a, b, a * b];
                        let hbar =
                            p.mix[0] * u[0] + p.mix[1] * u[1] + p.mix[2] * u[2] + p.mix[3] * u[3];
                        for (j, slot) in dzl[n].iter_mut().enumerate() {
                            let c = gate_coeffs(j);
                            let gj = c[0] + c[1] * a + c[2] * b + c[3] * u[3];
                            *slot += d / tau_b * p.weights[j] * (gj - hbar);
                        }
                        next_delta[sa as usize] += d * (p.mix[1] + p.mix[3] * b);
                        next_delta[sb as usize] += d * (p.mix[2] + p.mix[3] * a);
                    }
                    std::mem::swap(&mut delta, &mut next_delta);
                }
            }
            dz
        })
        .collect();

    let mut grads = LogitGradients::zeros(net);
    for part in partials {
        for (gl, pl) in grads.0.iter_mut().zip(part) {
            for (g, p) in gl.iter_mut().zip(pl) {
                for (gi, pi) in g.iter_mut().zip(p) {
                    *gi += pi;
                }
            }
        }
    }
    Ok(grads)
}

/// Bias-corrected Adam over the logit tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<[f64; K]>>,
    v: Vec<Vec<[f64; K]>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(net: &Network) -> AdamState {
        let zeros: Vec<Vec<[f64; K]>> = net
            .logits
            .iter()
            .map(|layer| vec![[0.0; K]; layer.len()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One standard bias-corrected Adam update of the logits.
pub fn adam_step(
    logits: &mut [Vec<[f64; K]>],
    grads: &LogitGradients,
    state: &mut AdamState,
    lr: f64,
) {
    state.step += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for l in 0..logits.len() {
        let gl = &grads.0[l];
        let ml = &mut state.m[l];
        let vl = &mut state.v[l];
        let pl = &mut logits[l];
        for n in 0..pl.len() {
            for j in 0..K {
                let g = gl[n][j];
                ml[n][j] = b1 * ml[n][j] + (1.0 - b1) * g;
                vl[n][j] = b2 * vl[n][j] + (1.0 - b2) * g * g;
                let m_hat = ml[n][j] / c1;
                let v_hat = vl[n][j] / c2;
                pl[n][j] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
            }
        }
    }
}

/// Settings of the confidence-adaptive backward temperature controller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CageConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    /// EMA coefficient for the confidence average.
    pub beta: f64,
}

impl Default for CageConfig {
    fn default() -> CageConfig {
        CageConfig {
            tau_min: 0.5,
            tau_max: 3.0,
            beta: 0.99,
        }
    }
}

/// Controller state: an EMA of network confidence mapped linearly onto
/// `[tau_max, tau_min]` over the confidence range `[1/K, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct CageState {
    pub config: CageConfig,
    pub c_ema: f64,
    pub k: usize,
    pub tau_b: f64,
}

impl CageState {
    pub fn new(config: CageConfig, k: usize) -> CageState {
        CageState {
            config,
            c_ema: 1.0 / k as f64,
            k,
            tau_b: config.tau_max,
        }
    }

    /// Linear interpolation from confidence to backward temperature,
    /// clamped to the configured bounds.
    pub fn map_confidence(config: &CageConfig, k: usize, c_ema: f64) -> f64 {
        let floor = 1.0 / k as f64;
        let t = (c_ema - floor) / (1.0 - floor);
        (config.tau_max - (config.tau_max - config.tau_min) * t)
            .clamp(config.tau_min, config.tau_max)
    }

    /// Folds a fresh confidence reading into the EMA and returns the updated
    /// backward temperature.
    pub fn update(&mut self, confidence: f64) -> f64 {
        self.c_ema = self.config.beta * self.c_ema + (1.0 - self.config.beta) * confidence;
        self.tau_b = Self::map_confidence(&self.config, self.k, self.c_ema);
        self.tau_b
    }
}

/// Network-wide selection confidence: the mean over all nodes of the winner
/// softmax probability at temperature 1.
pub fn cage_confidence(net: &Network) -> f64 {
    metrics::commitment_by_layer(net).network_mean
}

/// Training configuration for one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: MethodConfig,
    /// Mixture temperature for soft methods; fixed backward temperature for
    /// hard methods when the controller is off.
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub cage: Option<CageConfig>,
    /// Draw selection noise per sample instead of per step.
    pub per_example_noise: bool,
    /// Method-pass repeats per evaluation for stochastic methods.
    pub eval_repeats: usize,
}

impl TrainConfig {
    pub fn new(method: MethodConfig, tau: f64) -> TrainConfig {
        TrainConfig {
            method,
            tau,
            learning_rate: 0.01,
            batch_size: 128,
            iterations: 10_000,
            eval_every: 500,
            seed: 0,
            cage: None,
            per_example_noise: false,
            eval_repeats: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive: {}", self.tau)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive: {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        if self.eval_repeats == 0 {
            return Err(Error::config("eval_repeats must be positive"));
        }
        if let Some(cage) = &self.cage {
            if self.method.forward != ForwardKind::Hard {
                return Err(Error::config(format!(
                    "the adaptive backward temperature applies only to hard forward \
                     methods, not {}",
                    self.method
                )));
            }
            if !(cage.tau_min > 0.0 && cage.tau_max >= cage.tau_min) {
                return Err(Error::config(format!(
                    "invalid temperature bounds [{}, {}]",
                    cage.tau_min, cage.tau_max
                )));
            }
            if !(0.0..1.0).contains(&cage.beta) {
                return Err(Error::config(format!("invalid EMA beta {}", cage.beta)));
            }
        }
        if self.per_example_noise && !self.method.uses_noise() {
            return Err(Error::config(format!(
                "per-example noise has no effect for method {}",
                self.method
            )));
        }
        Ok(())
    }
}

/// One metrics checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Mean test cross-entropy under the method's forward pass.
    pub loss: f64,
    pub train_accuracy: f64,
    pub a_method: f64,
    pub a_soft: f64,
    pub a_hard: f64,
    pub selection_gap: f64,
    pub computation_gap: f64,
    pub total_gap: f64,
    pub mean_confidence: f64,
    pub tau_b: f64,
}

/// Checkpoint rows of one run, ordered by iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(s: &str) -> Result<MetricsLog> {
        let mut rows = Vec::new();
        for (i, line) in s.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: MetricsRow = serde_json::from_str(line)
                .map_err(|e| Error::data(format!("bad metrics line {}: {e}", i + 1)))?;
            rows.push(row);
        }
        Ok(MetricsLog { rows })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<MetricsLog> {
        let s = std::fs::read_to_string(path)?;
        MetricsLog::from_jsonl(&s)
    }

    /// CSV with one line per checkpoint, mirroring the JSONL fields.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "iteration,loss,train_accuracy,a_method,a_soft,a_hard,selection_gap,\
             computation_gap,total_gap,mean_confidence,tau_b\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.iteration,
                r.loss,
                r.train_accuracy,
                r.a_method,
                r.a_soft,
                r.a_hard,
                r.selection_gap,
                r.computation_gap,
                r.total_gap,
                r.mean_confidence,
                r.tau_b
            ));
        }
        out
    }

    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

fn checkpoint_row(
    net: &Network,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    iteration: usize,
    tau_b: f64,
) -> Result<MetricsRow> {
    let eval_base = mix_seed(cfg.seed, EVAL_STREAM);
    let (report, method_loss) = metrics::evaluate_three_ways_opts(
        net,
        test_ds,
        cfg.method,
        tau_b,
        mix_seed(eval_base, 2 * iteration as u64),
        cfg.eval_repeats,
        cfg.per_example_noise,
    )?;
    let train_accuracy = metrics::method_accuracy(
        net,
        train_ds,
        cfg.method,
        tau_b,
        mix_seed(eval_base, 2 * iteration as u64 + 1),
        cfg.per_example_noise,
    )?;
    let mean_confidence = metrics::commitment_by_layer(net).network_mean;
    Ok(MetricsRow {
        iteration,
        loss: method_loss,
        train_accuracy,
        a_method: report.a_method,
        a_soft: report.a_soft,
        a_hard: report.a_hard,
        selection_gap: report.selection_gap(),
        computation_gap: report.computation_gap(),
        total_gap: report.total_gap(),
        mean_confidence,
        tau_b,
    })
}

fn max_abs_logit(net: &Network) -> f64 {
    net.logits
        .iter()
        .flat_map(|layer| layer.iter())
        .flat_map(|z| z.iter())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
}

/// Runs the training loop: per step, sample a batch with replacement, update
/// the backward temperature (controller or fixed), draw selection noise,
/// forward, cross-entropy, backward, Adam. Emits a metrics row every
/// `eval_every` steps (starting at step 0) plus a final row. A non-finite
/// loss aborts with diagnostics rather than being masked.
pub fn train(
    net: &mut Network,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
) -> Result<MetricsLog> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok(MetricsLog::default());
    }
    if train_ds.is_empty() {
        return Err(Error::shape("training dataset is empty"));
    }
    if train_ds.dims != net.arch.input_width || test_ds.dims != net.arch.input_width {
        return Err(Error::shape(format!(
            "dataset dims ({}, {}) do not match network input width {}",
            train_ds.dims, test_ds.dims, net.arch.input_width
        )));
    }
    if train_ds.classes != net.groupsum.classes || test_ds.classes != net.groupsum.classes {
        return Err(Error::shape("dataset classes do not match the network"));
    }

    let batch = cfg.batch_size;
    let dims = net.arch.input_width;
    let classes = net.groupsum.classes;
    let widths = net.layer_widths();

    let mut adam = AdamState::new(net);
    let mut cage = cfg.cage.map(|c| CageState::new(c, K));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, BATCH_STREAM));
    let noise_base = mix_seed(cfg.seed, NOISE_STREAM);

    let mut rows = Vec::new();
    let mut batch_features = vec![0.0; batch * dims];
    let mut batch_labels = vec![0u8; batch];
    let mut dy = vec![0.0; batch * classes];

    for step in 0..cfg.iterations {
        if step % cfg.eval_every == 0 {
            let tau_now = cage.as_ref().map(|c| c.tau_b).unwrap_or(cfg.tau);
            rows.push(checkpoint_row(net, cfg, train_ds, test_ds, step, tau_now)?);
        }

        let tau_b = match &mut cage {
            Some(state) => {
                let c = cage_confidence(net);
                state.update(c)
            }
            None => cfg.tau,
        };

        for i in 0..batch {
            let idx = batch_rng.random_range(0..train_ds.len());
            batch_features[i * dims..(i + 1) * dims].copy_from_slice(train_ds.feature_row(idx));
            batch_labels[i] = train_ds.labels[idx];
        }

        let field;
        let noise = if !cfg.method.uses_noise() {
            NoiseSpec::None
        } else if cfg.per_example_noise {
            NoiseSpec::PerExample {
                stream: mix_seed(noise_base, step as u64),
            }
        } else {
            field = draw_noise_field(&widths, mix_seed(noise_base, step as u64));
            NoiseSpec::Shared(&field)
        };

        let (y, trace) = net.forward(&batch_features, batch, cfg.method, tau_b, noise)?;

        let mut loss_sum = 0.0;
        for s in 0..batch {
            let (loss, grad) =
                cross_entropy_loss_and_grad(&y[s * classes..(s + 1) * classes], batch_labels[s] as usize);
            loss_sum += loss;
            for (c, g) in grad.iter().enumerate() {
                dy[s * classes + c] = g / batch as f64;
            }
        }
        let loss = loss_sum / batch as f64;
        if !loss.is_finite() {
            return Err(Error::NumericAbort {
                step,
                loss,
                tau_b,
                logit_max: max_abs_logit(net),
            });
        }

        let grads = backward_network(net, &trace, &batch_features, &dy, tau_b)?;
        adam_step(&mut net.logits, &grads, &mut adam, cfg.learning_rate);
    }

    let tau_final = cage.as_ref().map(|c| c.tau_b).unwrap_or(cfg.tau);
    rows.push(checkpoint_row(
        net,
        cfg,
        train_ds,
        test_ds,
        cfg.iterations,
        tau_final,
    )?);
    Ok(MetricsLog { rows })
}

/// First checkpoint iteration whose method-forward test accuracy reaches the
/// target; `None` when the log never gets there.
pub fn convergence_iterations(log: &MetricsLog, target_accuracy: f64) -> Option<usize> {
    log.rows
        .iter()
        .find(|r| r.a_method >= target_accuracy)
        .map(|r| r.iteration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_task, SyntheticKind};
    use crate::network::{build_network, Arch};

    fn small_net(seed: u64, input: usize, classes: usize) -> Network {
        build_network(
            Arch {
                input_width: input,
                layers: 2,
                width: 8,
                classes,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let (loss, grad) = cross_entropy_loss_and_grad(&[0.0; 10], 3);
        assert!((loss - 10.0f64.ln()).abs() < 1e-12);
        assert!((grad.iter().sum::<f64>()).abs() < 1e-12);
        assert!((grad[3] - (0.1 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let y = [0.3, -1.2, 0.8, 2.0];
        let label = 2;
        let (_, grad) = cross_entropy_loss_and_grad(&y, label);
        let eps = 1e-6;
        for c in 0..y.len() {
            let mut yp = y;
            yp[c] += eps;
            let mut ym = y;
            ym[c] -= eps;
            let fd = (cross_entropy_loss_and_grad(&yp, label).0
                - cross_entropy_loss_and_grad(&ym, label).0)
                / (2.0 * eps);
            assert!(
                ((grad[c] - fd) / fd.abs().max(1e-6)).abs() < 1e-6,
                "c={c}: {} vs {fd}",
                grad[c]
            );
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let net = small_net(1, 6, 2);
        let mut logits = net.logits.clone();
        let before = logits.clone();
        let mut state = AdamState::new(&net);
        let grads = LogitGradients::zeros(&net);
        adam_step(&mut logits, &grads, &mut state, 0.1);
        assert_eq!(logits, before);
    }

    #[test]
    fn adam_constant_gradient_step_magnitude() {
        let net = small_net(2, 6, 2);
        let mut logits = net.logits.clone();
        let mut state = AdamState::new(&net);
        let mut grads = LogitGradients::zeros(&net);
        for layer in grads.0.iter_mut() {
            for g in layer.iter_mut() {
                *g = [0.37; K];
            }
        }
        let lr = 0.01;
        let mut prev = logits[0][0][0];
        let mut step_size = 0.0;
        for _ in 0..200 {
            adam_step(&mut logits, &grads, &mut state, lr);
            step_size = (prev - logits[0][0][0]).abs();
            prev = logits[0][0][0];
        }
        assert!((step_size - lr).abs() < 0.05 * lr, "step {step_size}");
    }

    /// Three hand-executed Adam updates on one parameter.
    #[test]
    fn adam_hand_trace() {
        let net = small_net(3, 6, 2);
        let mut logits = net.logits.clone();
        let start = logits[0][0][0];
        let mut state = AdamState::new(&net);
        let gs = [0.5, -1.0, 0.25];
        let lr = 0.1;
        for &g in &gs {
            let mut grads = LogitGradients::zeros(&net);
            grads.0[0][0][0] = g;
            adam_step(&mut logits, &grads, &mut state, lr);
        }
        // Independent recurrence.
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, start);
        for (t, &g) in gs.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((logits[0][0][0] - p).abs() < 1e-15);
    }

    #[test]
    fn cage_endpoints_and_midpoint() {
        let cfg = CageConfig::default();
        let k = 16;
        assert_eq!(CageState::map_confidence(&cfg, k, 1.0 / 16.0), 3.0);
        assert_eq!(CageState::map_confidence(&cfg, k, 1.0), 0.5);
        let mid = (1.0 / 16.0 + 1.0) / 2.0;
        assert!((CageState::map_confidence(&cfg, k, mid) - 1.75).abs() < 1e-12);
        // Monotone non-increasing in confidence, always within bounds.
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let c = 1.0 / 16.0 + (1.0 - 1.0 / 16.0) * i as f64 / 100.0;
            let tau = CageState::map_confidence(&cfg, k, c);
            assert!((0.5..=3.0).contains(&tau));
            assert!(tau <= prev + 1e-12);
            prev = tau;
        }
    }

    #[test]
    fn cage_state_updates_ema() {
        let mut state = CageState::new(CageConfig::default(), 16);
        assert_eq!(state.tau_b, 3.0);
        assert!((state.c_ema - 1.0 / 16.0).abs() < 1e-15);
        let tau = state.update(1.0);
        let expect_ema = 0.99 * (1.0 / 16.0) + 0.01;
        assert!((state.c_ema - expect_ema).abs() < 1e-12);
        assert!(tau < 3.0);
        // Confidence readings in [1/K, 1] keep the EMA in [1/K, 1].
        for _ in 0..3000 {
            state.update(1.0);
            assert!(state.c_ema <= 1.0 + 1e-12 && state.c_ema >= 1.0 / 16.0 - 1e-12);
        }
        assert!((state.tau_b - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cage_confidence_hand_cases() {
        let mut net = build_network(
            Arch {
                input_width: 2,
                layers: 1,
                width: 2,
                classes: 2,
            },
            0,
        )
        .unwrap();
        net.logits[0][0] = [0.0; K];
        net.logits[0][1] = [0.0; K];
        assert!((cage_confidence(&net) - 1.0 / 16.0).abs() < 1e-12);
        net.logits[0][1][5] = 1000.0;
        let expect = (1.0 / 16.0 + 1.0) / 2.0;
        assert!((cage_confidence(&net) - expect).abs() < 1e-9);
    }

    /// Full-network Soft-Mix gradient against central finite differences of
    /// the batch loss, on a 2-layer x 8-node network.
    #[test]
    fn network_gradient_matches_finite_differences() {
        let mut net = small_net(4, 6, 2);
        let data = synthetic_task(SyntheticKind::Parity, 6, 16, 5).unwrap().dataset;
        let batch = data.len();
        let tau = 0.9;

        let loss_of = |net: &Network| -> f64 {
            let (y, _) = net
                .forward(&data.features, batch, MethodConfig::SOFT_MIX, tau, NoiseSpec::None)
                .unwrap();
            (0..batch)
                .map(|s| {
                    cross_entropy_loss_and_grad(&y[s * 2..(s + 1) * 2], data.labels[s] as usize).0
                })
                .sum::<f64>()
                / batch as f64
        };

        let (y, trace) = net
            .forward(&data.features, batch, MethodConfig::SOFT_MIX, tau, NoiseSpec::None)
            .unwrap();
        let mut dy = vec![0.0; batch * 2];
        for s in 0..batch {
            let (_, grad) = cross_entropy_loss_and_grad(&y[s * 2..(s + 1) * 2], data.labels[s] as usize);
            for c in 0..2 {
                dy[s * 2 + c] = grad[c] / batch as f64;
            }
        }
        let grads = backward_network(&net, &trace, &data.features, &dy, tau).unwrap();

        let eps = 1e-5;
        let mut num = 0.0;
        let mut den = 0.0;
        for layer in 0..2 {
            for n in 0..8 {
                for j in 0..K {
                    let orig = net.logits[layer][n][j];
                    net.logits[layer][n][j] = orig + eps;
                    let lp = loss_of(&net);
                    net.logits[layer][n][j] = orig - eps;
                    let lm = loss_of(&net);
                    net.logits[layer][n][j] = orig;
                    let fd = (lp - lm) / (2.0 * eps);
                    let diff = grads.0[layer][n][j] - fd;
                    num += diff * diff;
                    den += fd * fd;
                }
            }
        }
        let rel = (num / den.max(1e-300)).sqrt();
        assert!(rel < 1e-5, "relative gradient error {rel}");
    }

    #[test]
    fn backward_rejects_mismatched_temperature() {
        let net = small_net(5, 6, 2);
        let features = vec![0.5; 6];
        let (y, trace) = net
            .forward(&features, 1, MethodConfig::SOFT_MIX, 1.0, NoiseSpec::None)
            .unwrap();
        let _ = y;
        let dy = vec![0.1, -0.1];
        assert!(backward_network(&net, &trace, &features, &dy, 2.0).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_logit_gradients() {
        let net = small_net(6, 6, 2);
        let features = vec![0.25; 2 * 6];
        let (_, trace) = net
            .forward(&features, 2, MethodConfig::HARD_ST, 0.7, NoiseSpec::None)
            .unwrap();
        let dy = vec![0.0; 4];
        let grads = backward_network(&net, &trace, &features, &dy, 0.7).unwrap();
        for layer in &grads.0 {
            for g in layer {
                assert!(g.iter().all(|&v| v == 0.0));
            }
        }
    }

    /// Hard-ST at tau_b and 2 tau_b: identical forward outputs; gradients
    /// differ exactly by the reweighted softmax and the 1/tau_b prefactor.
    #[test]
    fn hard_st_gradient_temperature_rescaling() {
        let net = small_net(7, 6, 2);
        let features = vec![0.3, 0.8, 0.1, 0.9, 0.4, 0.6];
        let dy = vec![0.7, -0.7];
        let tau = 0.8;

        let (y1, t1) = net
            .forward(&features, 1, MethodConfig::HARD_ST, tau, NoiseSpec::None)
            .unwrap();
        let (y2, t2) = net
            .forward(&features, 1, MethodConfig::HARD_ST, 2.0 * tau, NoiseSpec::None)
            .unwrap();
        assert_eq!(y1, y2);
        assert_eq!(t1.activations, t2.activations);

        let g1 = backward_network(&net, &t1, &features, &dy, tau).unwrap();
        let g2 = backward_network(&net, &t2, &features, &dy, 2.0 * tau).unwrap();
        // Top layer receives the same upstream delta in both traces, so each
        // gradient must match the surrogate formula applied with its own
        // temperature; rebuild both independently and compare.
        let layer = 1;
        for n in 0..8 {
            for j in 0..K {
                for (g, t) in [(&g1, tau), (&g2, 2.0 * tau)] {
                    let rebuilt = reconstruct_dz(&net, &t1, &features, &dy, t, layer, n, j);
                    assert!(
                        (g.0[layer][n][j] - rebuilt).abs() < 1e-12,
                        "layer {layer} node {n} gate {j} at tau_b {t}"
                    );
                }
            }
            let sum1: f64 = g1.0[layer][n].iter().sum();
            let sum2: f64 = g2.0[layer][n].iter().sum();
            assert!(sum1.abs() < 1e-12 && sum2.abs() < 1e-12);
        }
    }

    /// Independent single-gate gradient reconstruction used by the
    /// temperature-rescaling test: walks the trace for one (layer, node,
    /// gate) and applies the surrogate formula directly per sample.
    fn reconstruct_dz(
        net: &Network,
        trace: &ForwardTrace,
        features: &[f64],
        dy: &[f64],
        tau_b: f64,
        layer: usize,
        node: usize,
        gate: usize,
    ) -> f64 {
        assert_eq!(layer, net.arch.layers - 1, "only top layer supported");
        let classes = net.groupsum.classes;
        let group_size = net.groupsum.group_size;
        let w = crate::selection::softmax_temp(&net.logits[layer][node], tau_b).unwrap();
        let mix = crate::network::weighted_coeffs(&w.clone().try_into().unwrap());
        let cj = gate_coeffs(gate);
        let mut total = 0.0;
        for s in 0..trace.batch {
            let d = dy[s * classes + node / group_size] / net.groupsum.tau;
            let prev: &[f64] = if layer == 0 {
                &features[s * net.arch.input_width..(s + 1) * net.arch.input_width]
            } else {
                &trace.activations[layer - 1][s * net.arch.width..(s + 1) * net.arch.width]
            };
            let [sa, sb] = net.wiring[layer][node];
            let (a, b) = (prev[sa as usize], prev[sb as usize]);
            let gj = cj[0] + cj[1] * a + cj[2] * b + cj[3] * a * b;
            let hbar = mix[0] + mix[1] * a + mix[2] * b + mix[3] * a * b;
            total += d / tau_b * w[gate] * (gj - hbar);
        }
        total
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let mut net = small_net(8, 6, 2);
        let before = net.logits.clone();
        let data = synthetic_task(SyntheticKind::Parity, 6, 32, 1).unwrap().dataset;
        let mut cfg = TrainConfig::new(MethodConfig::HARD_ST, 1.0);
        cfg.iterations = 0;
        let log = train(&mut net, &cfg, &data, &data).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(net.logits, before);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(MethodConfig::SOFT_MIX, 1.0);
        cfg.cage = Some(CageConfig::default());
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(MethodConfig::GUMBEL_ST, 1.0);
        cfg.cage = Some(CageConfig::default());
        assert!(cfg.validate().is_ok());
        let mut cfg = TrainConfig::new(MethodConfig::HARD_ST, 0.0);
        cfg.tau = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(MethodConfig::HARD_ST, 1.0);
        cfg.per_example_noise = true;
        assert!(cfg.validate().is_err());
    }

    fn quick_cfg(method: MethodConfig, iters: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(method, 1.0);
        cfg.iterations = iters;
        cfg.batch_size = 16;
        cfg.eval_every = 50;
        cfg.learning_rate = 0.05;
        cfg.seed = seed;
        cfg
    }

    #[test]
    fn training_is_deterministic() {
        let data = synthetic_task(SyntheticKind::RandomTeacherCircuit, 8, 200, 2).unwrap();
        let train_ds = data.dataset.subset(160, 1);
        let test_ds = data.dataset.subset(40, 2);
        for method in [MethodConfig::GUMBEL_ST, MethodConfig::SOFT_GUMBEL] {
            let cfg = quick_cfg(method, 60, 9);
            let mut net1 = build_network(
                Arch {
                    input_width: 8,
                    layers: 2,
                    width: 16,
                    classes: 4,
                },
                3,
            )
            .unwrap();
            let log1 = train(&mut net1, &cfg, &train_ds, &test_ds).unwrap();
            let mut net2 = build_network(
                Arch {
                    input_width: 8,
                    layers: 2,
                    width: 16,
                    classes: 4,
                },
                3,
            )
            .unwrap();
            let log2 = train(&mut net2, &cfg, &train_ds, &test_ds).unwrap();
            assert_eq!(log1.to_jsonl(), log2.to_jsonl(), "{method}");
            assert_eq!(net1.logits, net2.logits, "{method}");
        }
    }

    #[test]
    fn hard_st_run_has_identically_zero_selection_gap() {
        let data = synthetic_task(SyntheticKind::Parity, 6, 100, 3).unwrap().dataset;
        let mut net = small_net(9, 6, 2);
        let cfg = quick_cfg(MethodConfig::HARD_ST, 120, 4);
        let log = train(&mut net, &cfg, &data, &data).unwrap();
        assert!(!log.rows.is_empty());
        for row in &log.rows {
            assert_eq!(row.selection_gap, 0.0);
            assert_eq!(row.computation_gap, 0.0); // binary inputs
        }
    }

    #[test]
    fn cage_run_tau_descends_within_bounds() {
        let data = synthetic_task(SyntheticKind::RandomTeacherCircuit, 8, 200, 6).unwrap();
        let mut net = build_network(
            Arch {
                input_width: 8,
                layers: 2,
                width: 16,
                classes: 4,
            },
            5,
        )
        .unwrap();
        let mut cfg = quick_cfg(MethodConfig::HARD_ST, 300, 5);
        cfg.cage = Some(CageConfig::default());
        let log = train(&mut net, &cfg, &data.dataset, &data.dataset).unwrap();
        let taus: Vec<f64> = log.rows.iter().map(|r| r.tau_b).collect();
        assert_eq!(taus[0], 3.0);
        for w in taus.windows(2) {
            assert!(w[1] <= w[0] + 0.05, "tau_b rose: {w:?}");
        }
        for &t in &taus {
            assert!((0.5..=3.0).contains(&t));
        }
        assert!(*taus.last().unwrap() < taus[0]);
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let data = synthetic_task(SyntheticKind::Parity, 6, 64, 7).unwrap().dataset;
        let mut net = small_net(10, 6, 2);
        let mut cfg = quick_cfg(MethodConfig::SOFT_MIX, 50, 6);
        // Steps of ~lr overflow the logits to infinity within a few updates,
        // after which the softmax produces NaN and the loss check trips.
        cfg.learning_rate = 1e308;
        let err = train(&mut net, &cfg, &data, &data).unwrap_err();
        match err {
            Error::NumericAbort { step, tau_b, .. } => {
                assert!(step < 50);
                assert_eq!(tau_b, 1.0);
            }
            other => panic!("expected numeric abort, got {other}"),
        }
    }

    #[test]
    fn per_example_noise_trains_and_is_deterministic() {
        let data = synthetic_task(SyntheticKind::Parity, 6, 80, 8).unwrap().dataset;
        let mut cfg = quick_cfg(MethodConfig::GUMBEL_ST, 40, 7);
        cfg.per_example_noise = true;
        let mut net1 = small_net(11, 6, 2);
        let log1 = train(&mut net1, &cfg, &data, &data).unwrap();
        let mut net2 = small_net(11, 6, 2);
        let log2 = train(&mut net2, &cfg, &data, &data).unwrap();
        assert_eq!(log1.to_jsonl(), log2.to_jsonl());
    }

    /// Per-example Gumbel-ST gradients against finite differences of the
    /// expected loss are intractable; instead check the per-example backward
    /// agrees with the shared backward when the per-example draws are forced
    /// to coincide (batch of one sample).
    #[test]
    fn per_example_single_sample_matches_shared_semantics() {
        let net = small_net(12, 6, 2);
        let features = vec![0.9, 0.2, 0.7, 0.3, 0.6, 0.4];
        let dy = vec![0.4, -0.4];
        let tau = 1.1;
        let stream = 77;

        let (_, trace) = net
            .forward(
                &features,
                1,
                MethodConfig::GUMBEL_ST,
                tau,
                NoiseSpec::PerExample { stream },
            )
            .unwrap();
        let g_pe = backward_network(&net, &trace, &features, &dy, tau).unwrap();

        // Rebuild the same noise into a shared field: sample 0's draws.
        let mut field = draw_noise_field(&net.layer_widths(), 0);
        for layer in 0..net.arch.layers {
            let mut rng = per_example_rng(stream, 0, layer);
            for n in 0..net.arch.width {
                for slot in field.layers[layer][n].iter_mut() {
                    *slot = gumbel_from_uniform(rng.random());
                }
            }
        }
        let (_, trace_shared) = net
            .forward(
                &features,
                1,
                MethodConfig::GUMBEL_ST,
                tau,
                NoiseSpec::Shared(&field),
            )
            .unwrap();
        let g_sh = backward_network(&net, &trace_shared, &features, &dy, tau).unwrap();
        for (l, (a, b)) in g_pe.0.iter().zip(&g_sh.0).enumerate() {
            for (n, (ga, gb)) in a.iter().zip(b).enumerate() {
                for j in 0..K {
                    assert!(
                        (ga[j] - gb[j]).abs() < 1e-12,
                        "layer {l} node {n} gate {j}: {} vs {}",
                        ga[j],
                        gb[j]
                    );
                }
            }
        }
    }

    #[test]
    fn convergence_iteration_scan() {
        let mut log = MetricsLog::default();
        for (i, acc) in [0.2, 0.5, 0.93, 0.97].iter().enumerate() {
            log.rows.push(MetricsRow {
                iteration: i * 500,
                loss: 0.0,
                train_accuracy: *acc,
                a_method: *acc,
                a_soft: *acc,
                a_hard: *acc,
                selection_gap: 0.0,
                computation_gap: 0.0,
                total_gap: 0.0,
                mean_confidence: 0.5,
                tau_b: 1.0,
            });
        }
        assert_eq!(convergence_iterations(&log, 0.9), Some(1000));
        assert_eq!(convergence_iterations(&log, 0.99), None);
    }

    #[test]
    fn metrics_log_roundtrips() {
        let data = synthetic_task(SyntheticKind::Parity, 6, 50, 9).unwrap().dataset;
        let mut net = small_net(13, 6, 2);
        let cfg = quick_cfg(MethodConfig::SOFT_GUMBEL, 30, 8);
        let log = train(&mut net, &cfg, &data, &data).unwrap();
        let parsed = MetricsLog::from_jsonl(&log.to_jsonl()).unwrap();
        assert_eq!(log, parsed);
        let csv = log.summary_csv();
        assert_eq!(csv.lines().count(), log.rows.len() + 1);
    }
}
