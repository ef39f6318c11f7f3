//! Per-node discrete selection: the four forward modes, Gumbel sampling,
//! straight-through surrogate gradients, and node-level gap quantities.
//!
//! A node holds a logit vector `z` over K candidate gates. Mixture methods
//! output a softmax-weighted blend of the gate outputs; hard methods output a
//! single selected gate and use the softmax mixture only as the backward
//! surrogate. For hard methods the temperature is backward-only: it never
//! changes the forward output.

use rand::Rng;

use crate::error::{Error, Result};

/// Clamp applied to the uniform draw under a Gumbel sample so that
/// `-ln(-ln u)` stays finite.
const GUMBEL_EPS: f64 = 1e-12;

/// Forward-pass structure: blend all gates or commit to one.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ForwardKind {
    Mixture,
    Hard,
}

/// Noise injected into the logits before selection.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NoiseKind {
    None,
    Gumbel,
}

/// One cell of the 2x2 (forward x noise) factorial.
///
/// For mixture methods a single temperature is used in both the forward and
/// backward pass. For hard methods the temperature is backward-only.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct MethodConfig {
    pub forward: ForwardKind,
    pub noise: NoiseKind,
}

impl MethodConfig {
    pub const SOFT_MIX: MethodConfig = MethodConfig {
        forward: ForwardKind::Mixture,
        noise: NoiseKind::None,
    };
    pub const SOFT_GUMBEL: MethodConfig = MethodConfig {
        forward: ForwardKind::Mixture,
        noise: NoiseKind::Gumbel,
    };
    pub const HARD_ST: MethodConfig = MethodConfig {
        forward: ForwardKind::Hard,
        noise: NoiseKind::None,
    };
    pub const GUMBEL_ST: MethodConfig = MethodConfig {
        forward: ForwardKind::Hard,
        noise: NoiseKind::Gumbel,
    };

    pub const ALL: [MethodConfig; 4] = [
        Self::SOFT_MIX,
        Self::SOFT_GUMBEL,
        Self::HARD_ST,
        Self::GUMBEL_ST,
    ];

    #[inline]
    pub fn is_hard(&self) -> bool {
        self.forward == ForwardKind::Hard
    }

    #[inline]
    pub fn uses_noise(&self) -> bool {
        self.noise == NoiseKind::Gumbel
    }

    pub fn name(&self) -> &'static str {
        match (self.forward, self.noise) {
            (ForwardKind::Mixture, NoiseKind::None) => "soft-mix",
            (ForwardKind::Mixture, NoiseKind::Gumbel) => "soft-gumbel",
            (ForwardKind::Hard, NoiseKind::None) => "hard-st",
            (ForwardKind::Hard, NoiseKind::Gumbel) => "gumbel-st",
        }
    }

    pub fn parse(s: &str) -> Result<MethodConfig> {
        match s {
            "soft-mix" => Ok(Self::SOFT_MIX),
            "soft-gumbel" => Ok(Self::SOFT_GUMBEL),
            "hard-st" => Ok(Self::HARD_ST),
            "gumbel-st" => Ok(Self::GUMBEL_ST),
            other => Err(Error::config(format!(
                "unknown method '{other}'; expected one of soft-mix, soft-gumbel, \
                 hard-st, gumbel-st (append -cage or pass --cage for the adaptive \
                 backward-temperature variants of the hard methods)"
            ))),
        }
    }
}

impl std::fmt::Display for MethodConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Temperature softmax `pi_i = exp(z_i/tau) / sum_j exp(z_j/tau)`, computed
/// with max subtraction and renormalized so the weights sum to one.
pub fn softmax_temp(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; z.len()];
    softmax_temp_into(z, tau, &mut out)?;
    Ok(out)
}

/// Non-allocating form of [`softmax_temp`].
pub fn softmax_temp_into(z: &[f64], tau: f64, out: &mut [f64]) -> Result<()> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::config(format!("temperature must be positive: {tau}")));
    }
    assert_eq!(z.len(), out.len());
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &zi) in out.iter_mut().zip(z) {
        let e = ((zi - max) / tau).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// Maps a uniform draw in (0,1) to a standard Gumbel sample, clamping the
/// uniform away from {0,1} to keep the double logarithm finite.
#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

/// Draws `k` i.i.d. standard Gumbel samples.
pub fn sample_gumbel<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k).map(|_| gumbel_from_uniform(rng.random())).collect()
}

/// Index of the maximum entry; ties break to the lowest index so that hard
/// selection is deterministic.
#[inline]
pub fn argmax_select(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// What one node computed in its forward pass.
///
/// `weights` are the mixture weights for soft methods and the straight-through
/// surrogate softmax for hard methods; in both cases they are the weights the
/// backward pass differentiates through, computed at `tau`.
#[derive(Clone, Debug)]
pub struct NodeForwardRecord {
    pub h: f64,
    pub weights: Vec<f64>,
    /// Selected gate for hard methods; `None` for mixtures.
    pub winner: Option<usize>,
    pub gate_outputs: Vec<f64>,
    /// Temperature at which `weights` were computed.
    pub tau: f64,
    pub method: MethodConfig,
}

fn check_noise(method: MethodConfig, noise: Option<&[f64]>, k: usize) -> Result<()> {
    match (method.uses_noise(), noise) {
        (true, Some(g)) if g.len() == k => Ok(()),
        (true, Some(g)) => Err(Error::shape(format!(
            "noise length {} does not match K={k}",
            g.len()
        ))),
        (true, None) => Err(Error::shape(format!(
            "method {method} requires Gumbel noise but none was supplied"
        ))),
        (false, Some(_)) => Err(Error::shape(format!(
            "method {method} takes no noise but a Gumbel vector was supplied"
        ))),
        (false, None) => Ok(()),
    }
}

/// Runs one node's forward pass.
///
/// * Soft-Mix: `h = sum_i softmax(z/tau)_i g_i`
/// * Soft-Gumbel: `h = sum_i softmax((z+G)/tau)_i g_i`
/// * Hard-ST: `h = g[argmax z]`, surrogate weights `softmax(z/tau_b)`
/// * Gumbel-ST: `h = g[argmax(z+G)]`, surrogate weights `softmax((z+G)/tau_b)`
///
/// For hard methods `tau` is the backward temperature and does not enter the
/// output.
pub fn forward_node(
    z: &[f64],
    method: MethodConfig,
    tau: f64,
    noise: Option<&[f64]>,
    gate_outputs: &[f64],
) -> Result<NodeForwardRecord> {
    let k = z.len();
    if gate_outputs.len() != k {
        return Err(Error::shape(format!(
            "gate outputs length {} does not match K={k}",
            gate_outputs.len()
        )));
    }
    check_noise(method, noise, k)?;

    // Effective logits the selection operates on.
    let noised: Vec<f64> = match noise {
        Some(g) => z.iter().zip(g).map(|(zi, gi)| zi + gi).collect(),
        None => z.to_vec(),
    };
    let weights = softmax_temp(&noised, tau)?;

    let (h, winner) = match method.forward {
        ForwardKind::Mixture => {
            let h = weights
                .iter()
                .zip(gate_outputs)
                .map(|(w, g)| w * g)
                .sum::<f64>();
            (h, None)
        }
        ForwardKind::Hard => {
            let w = argmax_select(&noised);
            (gate_outputs[w], Some(w))
        }
    };

    Ok(NodeForwardRecord {
        h,
        weights,
        winner,
        gate_outputs: gate_outputs.to_vec(),
        tau,
        method,
    })
}

/// Gradients produced by one node's backward pass.
#[derive(Clone, Debug)]
pub struct NodeGradient {
    pub dz: Vec<f64>,
    pub da: f64,
    pub db: f64,
}

/// Backward pass of one node under the unified surrogate gradient:
/// `dz_j = (delta / tau_b) * w_j * (g_j - hbar)` with `hbar = sum_i w_i g_i`.
///
/// Input gradients flow through the same surrogate mixture:
/// `da = delta * sum_i w_i * dgate_da_i` (likewise `db`), so the chain rule
/// composes across layers for hard methods as well.
pub fn backward_node(
    record: &NodeForwardRecord,
    delta: f64,
    tau_b: f64,
    dgate_da: &[f64],
    dgate_db: &[f64],
) -> Result<NodeGradient> {
    if tau_b <= 0.0 || !tau_b.is_finite() {
        return Err(Error::config(format!(
            "backward temperature must be positive: {tau_b}"
        )));
    }
    if (record.tau - tau_b).abs() > 1e-12 {
        return Err(Error::shape(format!(
            "record weights were computed at tau={}, backward called with tau_b={tau_b}",
            record.tau
        )));
    }
    let k = record.weights.len();
    if dgate_da.len() != k || dgate_db.len() != k {
        return Err(Error::shape("gate partials length mismatch".to_string()));
    }

    let w = &record.weights;
    let g = &record.gate_outputs;
    let hbar: f64 = w.iter().zip(g).map(|(wi, gi)| wi * gi).sum();

    let dz = (0..k)
        .map(|j| (delta / tau_b) * w[j] * (g[j] - hbar))
        .collect();
    let da = delta * w.iter().zip(dgate_da).map(|(wi, d)| wi * d).sum::<f64>();
    let db = delta * w.iter().zip(dgate_db).map(|(wi, d)| wi * d).sum::<f64>();

    Ok(NodeGradient { dz, da, db })
}

/// Node-level selection gap: the method's forward output minus the
/// argmax-selected gate output `g[argmax z]`.
pub fn node_selection_gap(
    z: &[f64],
    method: MethodConfig,
    tau: f64,
    noise: Option<&[f64]>,
    gate_outputs: &[f64],
) -> Result<f64> {
    let record = forward_node(z, method, tau, noise, gate_outputs)?;
    Ok(record.h - gate_outputs[argmax_select(z)])
}

/// Expected selection gap of Gumbel-ST, `sum_{i != i*} p_i (g_i - g_{i*})`
/// with `p = softmax(z)`. Determined entirely by the logit-induced
/// distribution, independent of the backward temperature.
pub fn gumbel_st_expected_gap(z: &[f64], gate_outputs: &[f64]) -> Result<f64> {
    if z.len() != gate_outputs.len() {
        return Err(Error::shape("logits and gate outputs differ in length"));
    }
    let p = softmax_temp(z, 1.0)?;
    let star = argmax_select(z);
    Ok(p.iter()
        .zip(gate_outputs)
        .enumerate()
        .filter(|(i, _)| *i != star)
        .map(|(_, (pi, gi))| pi * (gi - gate_outputs[star]))
        .sum())
}
