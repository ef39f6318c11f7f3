//! The 16 two-input Boolean gates in soft (real-valued) and hard (bit) form.
//!
//! Every soft gate is affine-bilinear in its inputs,
//! `g(a, b) = c0 + c1*a + c2*b + c3*a*b`, so the whole family is stored as a
//! single coefficient table and evaluated with one fused multiply-add chain.
//! Hard gates are truth-table lookups on thresholded bits. The soft and hard
//! forms agree exactly on binary inputs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of two-input Boolean gates.
pub const GATE_COUNT: usize = 16;

/// Gate names in index order.
const GATE_NAMES: [&str; GATE_COUNT] = [
    "FALSE",
    "AND",
    "A_AND_NOT_B",
    "A",
    "NOT_A_AND_B",
    "B",
    "XOR",
    "OR",
    "NOR",
    "XNOR",
    "NOT_B",
    "A_OR_NOT_B",
    "NOT_A",
    "NOT_A_OR_B",
    "NAND",
    "TRUE",
];

/// Bilinear coefficients `(c0, c1, c2, c3)` of each gate's soft form.
const GATE_COEFFS: [[f64; 4]; GATE_COUNT] = [
    [0.0, 0.0, 0.0, 0.0],   // FALSE: 0
    [0.0, 0.0, 0.0, 1.0],   // AND: ab
    [0.0, 1.0, 0.0, -1.0],  // A_AND_NOT_B: a(1-b)
    [0.0, 1.0, 0.0, 0.0],   // A: a
    [0.0, 0.0, 1.0, -1.0],  // NOT_A_AND_B: (1-a)b
    [0.0, 0.0, 1.0, 0.0],   // B: b
    [0.0, 1.0, 1.0, -2.0],  // XOR: a+b-2ab
    [0.0, 1.0, 1.0, -1.0],  // OR: a+b-ab
    [1.0, -1.0, -1.0, 1.0], // NOR: 1-a-b+ab
    [1.0, -1.0, -1.0, 2.0], // XNOR: 1-a-b+2ab
    [1.0, 0.0, -1.0, 0.0],  // NOT_B: 1-b
    [1.0, 0.0, -1.0, 1.0],  // A_OR_NOT_B: 1-b+ab
    [1.0, -1.0, 0.0, 0.0],  // NOT_A: 1-a
    [1.0, -1.0, 0.0, 1.0],  // NOT_A_OR_B: 1-a+ab
    [1.0, 0.0, 0.0, -1.0],  // NAND: 1-ab
    [1.0, 0.0, 0.0, 0.0],   // TRUE: 1
];

/// Identifier of one of the 16 gates; the index order is
/// FALSE, AND, A∧¬B, A, ¬A∧B, B, XOR, OR, NOR, XNOR, ¬B, A∨¬B, ¬A, ¬A∨B,
/// NAND, TRUE.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct GateId(u8);

impl GateId {
    pub const FALSE: GateId = GateId(0);
    pub const AND: GateId = GateId(1);
    pub const A_AND_NOT_B: GateId = GateId(2);
    pub const A: GateId = GateId(3);
    pub const NOT_A_AND_B: GateId = GateId(4);
    pub const B: GateId = GateId(5);
    pub const XOR: GateId = GateId(6);
    pub const OR: GateId = GateId(7);
    pub const NOR: GateId = GateId(8);
    pub const XNOR: GateId = GateId(9);
    pub const NOT_B: GateId = GateId(10);
    pub const A_OR_NOT_B: GateId = GateId(11);
    pub const NOT_A: GateId = GateId(12);
    pub const NOT_A_OR_B: GateId = GateId(13);
    pub const NAND: GateId = GateId(14);
    pub const TRUE: GateId = GateId(15);

    pub fn new(index: usize) -> Result<GateId> {
        if index < GATE_COUNT {
            Ok(GateId(index as u8))
        } else {
            Err(Error::config(format!(
                "gate index {index} out of range 0..{GATE_COUNT}"
            )))
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        GATE_NAMES[self.index()]
    }

    /// All 16 gates in index order.
    pub fn all() -> impl Iterator<Item = GateId> {
        (0..GATE_COUNT as u8).map(GateId)
    }
}

impl std::fmt::Display for GateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// A single bit; the continuous-to-bit conversion goes through [`threshold`]
/// only, so the strict `> 0.5` rule is applied uniformly.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Bit(bool);

impl Bit {
    pub const ZERO: Bit = Bit(false);
    pub const ONE: Bit = Bit(true);

    #[inline]
    pub fn as_bool(self) -> bool {
        self.0
    }

    #[inline]
    pub fn as_f64(self) -> f64 {
        if self.0 {
            1.0
        } else {
            0.0
        }
    }
}

impl From<bool> for Bit {
    fn from(b: bool) -> Bit {
        Bit(b)
    }
}

/// Thresholds a unit-interval value to a bit: 1 iff `x > 0.5`.
/// Exactly 0.5 maps to 0 (strict inequality).
#[inline]
pub fn threshold(x: f64) -> Bit {
    debug_assert!((0.0..=1.0).contains(&x), "threshold input out of [0,1]: {x}");
    Bit(x > 0.5)
}

/// One gate's soft bilinear form and hard truth table.
#[derive(Clone, Copy, Debug)]
pub struct GateSpec {
    pub id: GateId,
    /// Coefficients of `c0 + c1*a + c2*b + c3*a*b`.
    pub coeffs: [f64; 4],
    /// Outputs at inputs (0,0), (0,1), (1,0), (1,1).
    pub truth_table: [bool; 4],
}

impl GateSpec {
    pub fn of(id: GateId) -> GateSpec {
        let coeffs = GATE_COEFFS[id.index()];
        let mut truth_table = [false; 4];
        for (i, slot) in truth_table.iter_mut().enumerate() {
            let a = (i >> 1) as f64;
            let b = (i & 1) as f64;
            let v = coeffs[0] + coeffs[1] * a + coeffs[2] * b + coeffs[3] * a * b;
            *slot = v > 0.5;
        }
        GateSpec {
            id,
            coeffs,
            truth_table,
        }
    }

    pub fn all() -> impl Iterator<Item = GateSpec> {
        GateId::all().map(GateSpec::of)
    }

    /// Truth table packed as 4 bits: bit `2a+b` is the output at `(a, b)`.
    pub fn truth_table_bits(&self) -> u8 {
        self.truth_table
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &v)| acc | ((v as u8) << i))
    }
}

/// Coefficient row of a gate, for callers that index the table directly.
#[inline]
pub fn gate_coeffs(gate: usize) -> [f64; 4] {
    GATE_COEFFS[gate]
}

/// Evaluates the soft bilinear form without validating input range.
#[inline]
pub fn soft_eval_unchecked(coeffs: &[f64; 4], a: f64, b: f64) -> f64 {
    coeffs[0] + coeffs[1] * a + coeffs[2] * b + coeffs[3] * (a * b)
}

/// Evaluates a gate's soft form on unit-interval inputs.
/// Out-of-range inputs are rejected; they signal an upstream activation bug.
pub fn soft_gate_eval(gate: &GateSpec, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
        return Err(Error::shape(format!(
            "soft gate input out of [0,1]: a={a}, b={b}"
        )));
    }
    Ok(soft_eval_unchecked(&gate.coeffs, a, b))
}

/// Evaluates a gate's hard form: a truth-table lookup at `(a, b)`.
#[inline]
pub fn hard_gate_eval(gate: &GateSpec, a: Bit, b: Bit) -> Bit {
    let idx = ((a.as_bool() as usize) << 1) | (b.as_bool() as usize);
    Bit(gate.truth_table[idx])
}

/// Integral of `c0 + c1*a + c2*b + c3*a*b` over `[a0,a1] x [b0,b1]`.
fn bilinear_integral(c: &[f64; 4], a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let da = a1 - a0;
    let db = b1 - b0;
    let ia = (a1 * a1 - a0 * a0) / 2.0;
    let ib = (b1 * b1 - b0 * b0) / 2.0;
    c[0] * da * db + c[1] * ia * db + c[2] * da * ib + c[3] * ia * ib
}

/// Expected |soft - hard| under uniform inputs on [0,1]^2, computed in closed
/// form by integrating the bilinear form over the four threshold quadrants.
/// Within a quadrant the hard output H is constant and the soft output stays
/// in [0,1], so the integrand is `g` when H = 0 and `1 - g` when H = 1.
pub fn computation_gap_uniform(gate: &GateSpec) -> f64 {
    let mut gap = 0.0;
    for qa in 0..2 {
        for qb in 0..2 {
            let (a0, a1) = if qa == 0 { (0.0, 0.5) } else { (0.5, 1.0) };
            let (b0, b1) = if qb == 0 { (0.0, 0.5) } else { (0.5, 1.0) };
            let hard = gate.truth_table[(qa << 1) | qb];
            let integral = bilinear_integral(&gate.coeffs, a0, a1, b0, b1);
            let area = (a1 - a0) * (b1 - b0);
            gap += if hard { area - integral } else { integral };
        }
    }
    gap
}

/// Input distribution for the Monte Carlo gap estimate.
#[derive(Clone, Copy, Debug)]
pub enum GapSampler<'a> {
    /// Independent uniform draws on [0,1].
    Uniform,
    /// Independent fair bits.
    Binary,
    /// Independent draws from an empirical collection of unit-interval values.
    Empirical(&'a [f64]),
}

impl GapSampler<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            GapSampler::Uniform => rng.random::<f64>(),
            GapSampler::Binary => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    0.0
                }
            }
            GapSampler::Empirical(values) => values[rng.random_range(0..values.len())],
        }
    }
}

/// Monte Carlo estimate of the expected |soft - hard| gap under `sampler`,
/// together with the standard error of the estimate.
pub fn computation_gap_empirical_with_se(
    gate: &GateSpec,
    sampler: GapSampler<'_>,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    assert!(n >= 1, "need at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let a = sampler.draw(&mut rng);
        let b = sampler.draw(&mut rng);
        let soft = soft_eval_unchecked(&gate.coeffs, a, b);
        let hard = hard_gate_eval(gate, threshold(a), threshold(b)).as_f64();
        let d = (soft - hard).abs();
        sum += d;
        sum_sq += d * d;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    let se = (var / n as f64).sqrt();
    (mean, se)
}

/// Monte Carlo estimate of the expected |soft - hard| gap under `sampler`.
pub fn computation_gap_empirical(
    gate: &GateSpec,
    sampler: GapSampler<'_>,
    n: usize,
    seed: u64,
) -> f64 {
    computation_gap_empirical_with_se(gate, sampler, n, seed).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn soft_examples() {
        let xor = GateSpec::of(GateId::XOR);
        assert_eq!(soft_gate_eval(&xor, 1.0, 1.0).unwrap(), 0.0);
        let and = GateSpec::of(GateId::AND);
        assert_eq!(soft_gate_eval(&and, 0.5, 0.5).unwrap(), 0.25);
        let or = GateSpec::of(GateId::OR);
        // a + b - ab = 0.3 + 0.4 - 0.12
        let got = soft_gate_eval(&or, 0.3, 0.4).unwrap();
        assert!((got - 0.58).abs() < 1e-15);
    }

    #[test]
    fn soft_rejects_out_of_range() {
        let and = GateSpec::of(GateId::AND);
        assert!(soft_gate_eval(&and, -0.1, 0.5).is_err());
        assert!(soft_gate_eval(&and, 0.5, 1.5).is_err());
    }

    #[test]
    fn hard_examples() {
        let nand = GateSpec::of(GateId::NAND);
        assert_eq!(hard_gate_eval(&nand, Bit::ONE, Bit::ONE), Bit::ZERO);
        let xor = GateSpec::of(GateId::XOR);
        assert_eq!(hard_gate_eval(&xor, Bit::ZERO, Bit::ONE), Bit::ONE);
        let f = GateSpec::of(GateId::FALSE);
        for a in [Bit::ZERO, Bit::ONE] {
            for b in [Bit::ZERO, Bit::ONE] {
                assert_eq!(hard_gate_eval(&f, a, b), Bit::ZERO);
            }
        }
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(threshold(0.5), Bit::ZERO);
        assert_eq!(threshold(0.9), Bit::ONE);
        assert_eq!(threshold(0.0), Bit::ZERO);
        assert_eq!(threshold(0.5 + 1e-12), Bit::ONE);
    }

    /// Soft and hard forms agree at all four binary corners, for all gates.
    #[test]
    fn corner_agreement() {
        for gate in GateSpec::all() {
            for a in 0..2u8 {
                for b in 0..2u8 {
                    let soft = soft_gate_eval(&gate, a as f64, b as f64).unwrap();
                    let hard =
                        hard_gate_eval(&gate, Bit::from(a == 1), Bit::from(b == 1)).as_f64();
                    assert_eq!(soft, hard, "{} at ({a},{b})", gate.id);
                }
            }
        }
    }

    /// Gate 15-i has the negated truth table of gate i, checked table-wise.
    #[test]
    fn complement_pairs() {
        for i in 0..8 {
            let g = GateSpec::of(GateId::new(i).unwrap());
            let ng = GateSpec::of(GateId::new(15 - i).unwrap());
            for idx in 0..4 {
                assert_eq!(
                    g.truth_table[idx], !ng.truth_table[idx],
                    "{} vs {}",
                    g.id, ng.id
                );
            }
        }
    }

    #[test]
    fn truth_table_matches_bilinear_corners() {
        for gate in GateSpec::all() {
            for (idx, &tt) in gate.truth_table.iter().enumerate() {
                let a = (idx >> 1) as f64;
                let b = (idx & 1) as f64;
                let v = soft_eval_unchecked(&gate.coeffs, a, b);
                assert_eq!(v, tt as u8 as f64, "{} corner {idx}", gate.id);
            }
        }
    }

    /// Exact analytic gaps per family. The four-quadrant integral for the
    /// XOR/XNOR pair evaluates to 3/8; see also the Monte Carlo cross-check
    /// below, which agrees with the integral for every gate.
    #[test]
    fn analytic_gap_families() {
        let gap = |id: GateId| computation_gap_uniform(&GateSpec::of(id));
        assert_eq!(gap(GateId::FALSE), 0.0);
        assert_eq!(gap(GateId::TRUE), 0.0);
        for id in [GateId::A, GateId::B, GateId::NOT_A, GateId::NOT_B] {
            assert_eq!(gap(id), 0.25, "{id}");
        }
        for id in [
            GateId::AND,
            GateId::OR,
            GateId::NOR,
            GateId::NAND,
            GateId::A_AND_NOT_B,
            GateId::NOT_A_AND_B,
            GateId::A_OR_NOT_B,
            GateId::NOT_A_OR_B,
        ] {
            assert_eq!(gap(id), 0.21875, "{id}");
        }
        for id in [GateId::XOR, GateId::XNOR] {
            assert_eq!(gap(id), 0.375, "{id}");
        }
    }

    /// Negation preserves the uniform gap for all eight complement pairs.
    #[test]
    fn negation_preserves_gap() {
        for i in 0..8 {
            let g = computation_gap_uniform(&GateSpec::of(GateId::new(i).unwrap()));
            let ng = computation_gap_uniform(&GateSpec::of(GateId::new(15 - i).unwrap()));
            assert!((g - ng).abs() < 1e-15);
        }
    }

    /// The analytic integral is the oracle for the Monte Carlo estimator.
    #[test]
    fn monte_carlo_matches_analytic() {
        for gate in GateSpec::all() {
            let exact = computation_gap_uniform(&gate);
            let (mc, se) =
                computation_gap_empirical_with_se(&gate, GapSampler::Uniform, 1_000_000, 42);
            let tol = 3.0 * se.max(1e-9);
            assert!(
                (mc - exact).abs() < tol,
                "{}: mc={mc} exact={exact} se={se}",
                gate.id
            );
        }
    }

    #[test]
    fn binary_sampler_gap_is_zero() {
        for gate in GateSpec::all() {
            let mc = computation_gap_empirical(&gate, GapSampler::Binary, 10_000, 7);
            assert_eq!(mc, 0.0, "{}", gate.id);
        }
    }

    #[test]
    fn empirical_sampler_uses_given_values() {
        // All mass at 0.5: unary gate A has |0.5 - 0| = 0.5 everywhere.
        let vals = [0.5];
        let a = GateSpec::of(GateId::A);
        let mc = computation_gap_empirical(&a, GapSampler::Empirical(&vals), 100, 3);
        assert_eq!(mc, 0.5);
    }

    proptest! {
        /// Soft outputs stay in [0,1] over the whole unit square.
        #[test]
        fn range_invariant(gate in 0usize..GATE_COUNT, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let spec = GateSpec::of(GateId::new(gate).unwrap());
            let v = soft_eval_unchecked(&spec.coeffs, a, b);
            prop_assert!((-1e-15..=1.0 + 1e-15).contains(&v), "{} at ({a},{b}) -> {v}", spec.id);
        }
    }
}
