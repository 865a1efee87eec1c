//! Frame length, training time and training bandwidth under random blockage.
//!
//! A path survives an exponential time with rate `δ`. Data flows from the end
//! of initial access until the path dies or the frame ends, so the long-term
//! rate is `E[T_data]/T_frame · E[log(1 + SINR)]`.

use rayon::prelude::*;

use crate::codebooks::CodebookKind;
use crate::error::{invalid, Error, Result};
use crate::scenario::{simulate_frame, Scenario, TrainingShape};
use crate::seeds;
use crate::signaling::EstimatorKind;

/// Timing and blockage parameters of one frame design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameParams {
    pub t_frame: f64,
    pub t_ia: f64,
    /// `τ + 1/B_tr`.
    pub t_slot: f64,
    pub b_tr: f64,
    /// Guard interval `τ`.
    pub guard: f64,
    pub t_switch: f64,
    pub t_max: f64,
    pub blockage_rate: f64,
}

impl FrameParams {
    /// Check every constraint of the frame design problem.
    pub fn validate(&self) -> Result<()> {
        let slot = self.guard + 1.0 / self.b_tr;
        if (self.t_slot - slot).abs() > 1e-12 * slot {
            return Err(invalid(format!("slot {} s differs from τ + 1/B_tr = {slot} s", self.t_slot)));
        }
        if self.t_slot < self.t_switch * (1.0 - 1e-12) {
            return Err(invalid("slot shorter than the beam switching time"));
        }
        if !(self.t_ia <= self.t_frame && self.t_frame <= self.t_max * (1.0 + 1e-12)) {
            return Err(invalid("need T_IA ≤ T_frame ≤ T_max"));
        }
        if !(self.blockage_rate >= 0.0) {
            return Err(invalid("blockage rate must be nonnegative"));
        }
        Ok(())
    }
}

/// Empirical distribution of data SINRs (linear).
#[derive(Debug, Clone, PartialEq)]
pub struct SinrCdf {
    samples: Vec<f64>,
}

impl SinrCdf {
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("an SINR distribution needs at least one sample"));
        }
        if let Some(x) = samples.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(invalid(format!("SINR sample {x} is not a finite nonnegative number")));
        }
        samples.sort_by(f64::total_cmp);
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fraction of samples `≤ x`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.samples.partition_point(|&s| s <= x) as f64 / self.samples.len() as f64
    }

    /// `∫ log(1 + x) dF(x)` in nats.
    pub fn mean_log_rate(&self) -> f64 {
        self.samples.iter().map(|x| x.ln_1p()).sum::<f64>() / self.samples.len() as f64
    }
}

/// `E[max{min{T_path, T_frame} − T_IA, 0}] = (e^{−δT_IA} − e^{−δT_frame})/δ`,
/// with the `δ → 0` limit `T_frame − T_IA`.
pub fn expected_data_time(blockage_rate: f64, t_ia: f64, t_frame: f64) -> Result<f64> {
    if !(t_ia >= 0.0 && t_ia <= t_frame) {
        return Err(invalid(format!("need 0 ≤ T_IA ≤ T_frame, got {t_ia} and {t_frame}")));
    }
    if !(blockage_rate >= 0.0) {
        return Err(invalid(format!("blockage rate must be nonnegative, got {blockage_rate}")));
    }
    if blockage_rate * t_frame < 1e-8 {
        return Ok(t_frame - t_ia);
    }
    let d = blockage_rate;
    Ok((-d * t_ia).exp() * -(-d * (t_frame - t_ia)).exp_m1() / d)
}

/// Fraction of the frame spent sending data, `E[T_data]/T_frame`.
pub fn data_fraction(blockage_rate: f64, t_ia: f64, t_frame: f64) -> Result<f64> {
    if !(t_frame > 0.0) {
        return Err(invalid("frame length must be positive"));
    }
    Ok(expected_data_time(blockage_rate, t_ia, t_frame)? / t_frame)
}

/// `E[T_data]/T_frame · ∫ log(1 + x) dF(x)`.
pub fn rate_objective(params: &FrameParams, cdf: &SinrCdf) -> Result<f64> {
    Ok(data_fraction(params.blockage_rate, params.t_ia, params.t_frame)? * cdf.mean_log_rate())
}

/// `1 − e^{−x}(1 + x)`, accurate for small `x`.
fn survival_gap(x: f64) -> f64 {
    if x < 0.1 {
        // Σ_{n≥2} (−1)ⁿ (n−1) xⁿ / n!
        let mut term = x * x / 2.0;
        let mut sum = 0.0;
        for n in 2..30 {
            sum += term * (n - 1) as f64;
            term *= -x / (n + 1) as f64;
        }
        sum
    } else {
        1.0 - (-x).exp() * (1.0 + x)
    }
}

/// Frame length maximizing `E[T_data]/T_frame` over `[T_IA, T_max]`.
///
/// The derivative has the sign of `(1 − e^{−δT_IA}) − (1 − e^{−δT}(1 + δT))`,
/// which decreases in `T`, so its root is found by bisection.
pub fn optimal_frame_length(blockage_rate: f64, t_ia: f64, t_max: f64) -> Result<f64> {
    if !(t_ia > 0.0 && t_ia <= t_max) {
        return Err(invalid(format!("need 0 < T_IA ≤ T_max, got {t_ia} and {t_max}")));
    }
    if !(blockage_rate >= 0.0) {
        return Err(invalid("blockage rate must be nonnegative"));
    }
    let target = -(-blockage_rate * t_ia).exp_m1();
    let rising = |t: f64| target - survival_gap(blockage_rate * t) > 0.0;
    if blockage_rate == 0.0 || rising(t_max) {
        return Ok(t_max);
    }
    let (mut lo, mut hi) = (t_ia, t_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if rising(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Hardware and latency limits of the frame design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadConstraints {
    pub guard: f64,
    pub t_switch: f64,
    pub t_max: f64,
    pub blockage_rate: f64,
}

impl OverheadConstraints {
    /// `B_tr* = 1/(T_switch − τ)`: the widest training tone the switching
    /// time allows.
    pub fn optimal_bandwidth(&self) -> Result<f64> {
        if !(self.t_switch > self.guard && self.guard >= 0.0) {
            return Err(invalid(format!(
                "need T_switch > τ ≥ 0, got T_switch = {} and τ = {}",
                self.t_switch, self.guard
            )));
        }
        Ok(1.0 / (self.t_switch - self.guard))
    }

    pub fn slot_length(&self) -> Result<f64> {
        Ok(self.guard + 1.0 / self.optimal_bandwidth()?)
    }
}

/// One candidate training length and its SINR distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderPoint {
    pub shape: TrainingShape,
    /// Training slots per round.
    pub slots: usize,
    /// Active training antennas at the AP and mobile.
    pub ap_antennas: usize,
    pub mobile_antennas: usize,
    /// Whether every direction must be covered by the sweep.
    pub needs_coverage: bool,
    pub cdf: SinrCdf,
}

impl LadderPoint {
    pub fn pilots(&self) -> usize {
        self.shape.repetitions * self.shape.p * self.shape.q
    }

    /// `Ω ≥ N̄·M̄` unless the codebook does not sweep.
    /// Ladder point for `shape` in `scenario`, with slot count and active
    /// antennas filled in.
    pub fn new(scenario: &Scenario, shape: TrainingShape, cdf: SinrCdf) -> Self {
        let ap = scenario.topology.ap_array;
        let mob = scenario.topology.mobile_array;
        Self {
            shape,
            slots: shape.repetitions * shape.p * shape.q + shape.repetitions * shape.q + 2,
            ap_antennas: active_antennas(scenario.codebook, shape.q, ap.total_elements(), ap.elements_per_subarray),
            mobile_antennas: active_antennas(scenario.codebook, shape.p, mob.total_elements(), mob.elements_per_subarray),
            needs_coverage: scenario.codebook != CodebookKind::Random,
            cdf,
        }
    }

    pub fn covers(&self) -> bool {
        !self.needs_coverage || self.pilots() >= self.ap_antennas * self.mobile_antennas
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderResult {
    pub shape: TrainingShape,
    pub feasible: bool,
    pub t_ia: f64,
    pub t_frame: f64,
    pub objective: f64,
    pub overhead_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadSolution {
    pub t_ia: f64,
    pub t_frame: f64,
    pub b_tr: f64,
    pub t_slot: f64,
    pub objective: f64,
    pub overhead_ratio: f64,
    pub shape: TrainingShape,
    /// Every ladder point, in ladder order.
    pub ladder: Vec<LadderResult>,
}

impl OverheadSolution {
    pub fn params(&self, c: &OverheadConstraints) -> FrameParams {
        FrameParams {
            t_frame: self.t_frame,
            t_ia: self.t_ia,
            t_slot: self.t_slot,
            b_tr: self.b_tr,
            guard: c.guard,
            t_switch: c.t_switch,
            t_max: c.t_max,
            blockage_rate: c.blockage_rate,
        }
    }
}

/// Exhaustive search over the ladder with the optimal frame length at each
/// point. Ties keep the earlier (shorter) ladder point.
pub fn optimize_ladder(constraints: &OverheadConstraints, ladder: &[LadderPoint]) -> Result<OverheadSolution> {
    let b_tr = constraints.optimal_bandwidth()?;
    let t_slot = constraints.slot_length()?;
    let mut results: Vec<LadderResult> = Vec::with_capacity(ladder.len());
    let mut best: Option<usize> = None;
    for point in ladder {
        let t_ia = point.slots as f64 * t_slot;
        let feasible = point.covers() && t_ia <= constraints.t_max;
        let (t_frame, objective) = if feasible {
            let t_frame = optimal_frame_length(constraints.blockage_rate, t_ia, constraints.t_max)?;
            let obj = data_fraction(constraints.blockage_rate, t_ia, t_frame)? * point.cdf.mean_log_rate();
            (t_frame, obj)
        } else {
            (f64::NAN, f64::NAN)
        };
        if feasible && best.is_none_or(|b: usize| objective > results[b].objective) {
            best = Some(results.len());
        }
        results.push(LadderResult {
            shape: point.shape,
            feasible,
            t_ia,
            t_frame,
            objective,
            overhead_ratio: t_ia / t_frame,
        });
    }
    let b = best.ok_or_else(|| {
        Error::Infeasible(format!(
            "no training length fits: the shortest covering round exceeds T_max = {} s",
            constraints.t_max
        ))
    })?;
    let r = &results[b];
    Ok(OverheadSolution {
        t_ia: r.t_ia,
        t_frame: r.t_frame,
        b_tr,
        t_slot,
        objective: r.objective,
        overhead_ratio: r.overhead_ratio,
        shape: r.shape,
        ladder: results,
    })
}

/// SINR samples of all mobiles over `n_trials` independent frames.
///
/// Trial `t` uses topology seed `("trial", t)` and noise seed `("noise", t)`
/// of `seed`, so different training shapes see the same networks and the
/// same noise streams.
pub fn estimate_sinr_cdf(
    scenario: &Scenario,
    shape: TrainingShape,
    estimator: EstimatorKind,
    n_trials: usize,
    seed: u64,
) -> Result<SinrCdf> {
    if n_trials == 0 {
        return Err(invalid("at least one trial is needed"));
    }
    let per_trial = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let topo = seeds::derive_u64(seed, "trial", &[t as u64]);
            let noise = seeds::derive_u64(seed, "noise", &[t as u64]);
            simulate_frame(scenario, shape, estimator, topo, noise).map(|f| f.sinr)
        })
        .collect::<Result<Vec<_>>>()?;
    SinrCdf::new(per_trial.into_iter().flatten().collect())
}

/// Square training rounds `P = Q = s` for each size.
pub fn square_ladder(sizes: &[usize]) -> Vec<TrainingShape> {
    sizes
        .iter()
        .map(|&s| TrainingShape {
            repetitions: 1,
            p: s,
            q: s,
        })
        .collect()
}

fn active_antennas(kind: CodebookKind, size: usize, total: usize, per_subarray: usize) -> usize {
    match kind {
        CodebookKind::Adaptive => size.min(total),
        CodebookKind::SingleRf => per_subarray,
        _ => total,
    }
}

/// Estimate one SINR distribution per training shape.
pub fn build_ladder(
    scenario: &Scenario,
    shapes: &[TrainingShape],
    estimator: EstimatorKind,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<LadderPoint>> {
    shapes
        .iter()
        .map(|&shape| {
            let cdf = estimate_sinr_cdf(scenario, shape, estimator, n_trials, seed)?;
            Ok(LadderPoint::new(scenario, shape, cdf))
        })
        .collect()
}

/// Estimate SINR distributions along the ladder, then optimize.
pub fn optimize_overhead(
    scenario: &Scenario,
    constraints: &OverheadConstraints,
    shapes: &[TrainingShape],
    estimator: EstimatorKind,
    n_trials: usize,
    seed: u64,
) -> Result<OverheadSolution> {
    let ladder = build_ladder(scenario, shapes, estimator, n_trials, seed)?;
    optimize_ladder(constraints, &ladder)
}
