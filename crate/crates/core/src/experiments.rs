//! Link- and network-level studies.
//!
//! Every study derives per-trial seeds from a master seed, the study name and
//! the trial index, so results do not depend on thread scheduling. Trial `t`
//! of a study sees the same drop and the same noise streams for every
//! codebook, estimator, FFT size and pilot budget it sweeps.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::arrays::{array_response, ArrayGeometry, PhaseGrid};
use crate::channel::{Channel, PathComponent};
use crate::codebooks::{build_codebook, CodebookKind};
use crate::error::{invalid, Result};
use crate::estimators::{misalignment_probability, MlEstimator};
use crate::overhead::{build_ladder, optimize_ladder, OverheadConstraints, OverheadSolution};
use crate::scenario::{generate_topology, steered_snr, ArraySpec, Network, Scenario, TrainingShape};
use crate::seeds;
use crate::signaling::{
    downlink_observations, estimate_downlink, estimate_uplink, uplink_observations, EstimatorKind, LinkSet,
    TrainingConfig,
};
use crate::units::{db_to_linear, dbm_to_watts};

/// Positions and channels of one network realization.
#[derive(Debug, Clone)]
pub struct Drop {
    pub network: Network,
    pub links: LinkSet,
    /// Seed the drop was generated from; it also keys the codebooks.
    pub seed: u64,
}

pub fn draw_drop(scenario: &Scenario, seed: u64) -> Result<Drop> {
    let network = generate_topology(&scenario.topology, &mut seeds::stream(seed, "topology", &[]))?;
    let links = network.sample_links(scenario.carrier_freq, &scenario.channel, seed)?;
    Ok(Drop { network, links, seed })
}

/// Topology and noise seeds of trial `t` of `study`.
pub fn trial_seeds(seed: u64, study: &str, t: usize) -> (u64, u64) {
    (
        seeds::derive_u64(seed, &format!("{study}/topology"), &[t as u64]),
        seeds::derive_u64(seed, &format!("{study}/noise"), &[t as u64]),
    )
}

/// Post-training SNR `ρ|uᴴ(θ̂) H a(φ̂)|²/σ²` of every mobile, per estimator.
///
/// As in the access protocol, the mobile steers along its downlink AoA
/// estimate and the AP along the AoD it estimates from the uplink; the AP is
/// the one with the largest estimated uplink SNR.
pub fn post_training_snrs(
    scenario: &Scenario,
    drop: &Drop,
    shape: TrainingShape,
    estimators: &[EstimatorKind],
    noise_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let links = &drop.links;
    let cfg = scenario.training_config(&drop.network, shape, drop.seed)?;
    let obs = downlink_observations(links, &cfg, noise_seed)?;
    estimators
        .iter()
        .map(|&est| {
            let downlink = obs
                .iter()
                .map(|o| estimate_downlink(o, links, &cfg, est))
                .collect::<Result<Vec<_>>>()?;
            steer_via_uplink(links, &cfg, est, &downlink, noise_seed)
        })
        .collect()
}

fn steer_via_uplink(
    links: &LinkSet,
    cfg: &TrainingConfig,
    est: EstimatorKind,
    downlink: &[crate::estimators::Estimate],
    noise_seed: u64,
) -> Result<Vec<f64>> {
    let beamformers = downlink
        .iter()
        .zip(&links.mobile_geoms)
        .map(|(e, g)| array_response(g, e.aoa).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let samples = uplink_observations(links, &beamformers, cfg, noise_seed)?;
    let lml = (0..links.num_aps())
        .map(|l| match est {
            EstimatorKind::Mp => Ok(None),
            _ => crate::estimators::LmlEstimator::new(&cfg.ap_codebooks[l], &links.ap_geoms[l], cfg.fft_size).map(Some),
        })
        .collect::<Result<Vec<_>>>()?;
    (0..links.num_mobiles())
        .map(|k| {
            let mut best: Option<(usize, crate::signaling::UplinkEstimate)> = None;
            for l in 0..links.num_aps() {
                let u = estimate_uplink(&samples[l][k], &cfg.ap_codebooks[l], &links.ap_geoms[l], lml[l].as_ref(), cfg.noise)?;
                if best.as_ref().is_none_or(|b| u.snr > b.1.snr) {
                    best = Some((l, u));
                }
            }
            let (l, u) = best.ok_or_else(|| invalid("no AP to steer toward"))?;
            steered_snr(links, l, k, downlink[k].aoa, u.aod, cfg.ap_power, cfg.noise)
        })
        .collect()
}

/// Best steered SNR over the `C`-point sin-space grid at both ends and over
/// all APs, per mobile: the limit of any grid-based estimator.
pub fn optimal_dft_snrs(scenario: &Scenario, drop: &Drop, fft_size: usize) -> Result<Vec<f64>> {
    let links = &drop.links;
    let power = dbm_to_watts(scenario.ap_power_dbm);
    let noise = scenario.training_noise();
    let ap_grids = links
        .ap_geoms
        .iter()
        .map(|g| PhaseGrid::new(g, fft_size))
        .collect::<Result<Vec<_>>>()?;
    (0..links.num_mobiles())
        .map(|k| {
            let mgrid = PhaseGrid::new(&links.mobile_geoms[k], fft_size)?;
            let mut best = 0.0f64;
            for (l, agrid) in ap_grids.iter().enumerate() {
                let resp = links.response(l, k);
                let coeffs = resp.coefficients();
                let mob: Vec<Vec<Complex64>> = (0..mgrid.len())
                    .map(|i| {
                        let p = resp.mobile_projections(&mgrid.response(i));
                        p.iter().zip(&coeffs).map(|(p, c)| p * c).collect()
                    })
                    .collect();
                let ap: Vec<Vec<Complex64>> = (0..agrid.len()).map(|j| resp.ap_projections(&agrid.response(j))).collect();
                for m in &mob {
                    for a in &ap {
                        let g: Complex64 = m.iter().zip(a).map(|(m, a)| m * a).sum();
                        best = best.max(g.norm_sqr());
                    }
                }
            }
            Ok(power * best / noise)
        })
        .collect()
}

/// Run `trials` independent trials in parallel, in trial order.
fn run_trials<T: Send>(trials: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if trials == 0 {
        return Err(invalid("at least one trial is needed"));
    }
    (0..trials).into_par_iter().map(f).collect()
}

/// `P = Q = s` single-shot sweeps.
pub fn square_shape(s: usize) -> TrainingShape {
    TrainingShape {
        repetitions: 1,
        p: s,
        q: s,
    }
}

/// Post-training SNR samples (linear) for one configuration of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrSeries {
    pub label: String,
    pub ap_antennas: usize,
    pub fft_size: usize,
    pub shape: TrainingShape,
    pub snr: Vec<f64>,
}

impl SnrSeries {
    pub fn pilots(&self) -> usize {
        self.shape.repetitions * self.shape.p * self.shape.q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStudy {
    pub scenario: Scenario,
    pub ap_arrays: Vec<ArraySpec>,
    pub codebooks: Vec<CodebookKind>,
    /// Beams per side; the pilot budget is `s²`.
    pub sweep_sizes: Vec<usize>,
    pub trials: usize,
}

/// Post-training SNR of ML estimation for each AP array, codebook and sweep
/// size.
pub fn compare_codebooks(study: &CodebookStudy, seed: u64) -> Result<Vec<SnrSeries>> {
    let mut out = Vec::new();
    for &ap_array in &study.ap_arrays {
        let mut scenario = study.scenario.clone();
        scenario.topology.ap_array = ap_array;
        let per_trial = run_trials(study.trials, |t| {
            let (topo, noise) = trial_seeds(seed, "compare-codebooks", t);
            let drop = draw_drop(&scenario, topo)?;
            let mut row = Vec::new();
            for &kind in &study.codebooks {
                let sc = Scenario {
                    codebook: kind,
                    ..scenario.clone()
                };
                for &s in &study.sweep_sizes {
                    row.push(post_training_snrs(&sc, &drop, square_shape(s), &[EstimatorKind::Ml], noise)?.remove(0));
                }
            }
            Ok(row)
        })?;
        let mut i = 0;
        for &kind in &study.codebooks {
            for &s in &study.sweep_sizes {
                out.push(SnrSeries {
                    label: kind.name().to_string(),
                    ap_antennas: ap_array.total_elements(),
                    fft_size: scenario.fft_size,
                    shape: square_shape(s),
                    snr: per_trial.iter().flat_map(|r| r[i].iter().copied()).collect(),
                });
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Label of the grid upper bound in estimator comparisons.
pub const OPTIMAL_DFT: &str = "optimal-dft";

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorStudy {
    pub scenario: Scenario,
    pub estimators: Vec<EstimatorKind>,
    pub sweep_sizes: Vec<usize>,
    pub trials: usize,
}

/// Post-training SNR of each estimator per sweep size, followed by the
/// optimal-DFT bound (one series, independent of the sweep).
pub fn compare_estimators(study: &EstimatorStudy, seed: u64) -> Result<Vec<SnrSeries>> {
    let scenario = &study.scenario;
    let per_trial = run_trials(study.trials, |t| {
        let (topo, noise) = trial_seeds(seed, "compare-estimators", t);
        let drop = draw_drop(scenario, topo)?;
        let mut row = Vec::new();
        for &s in &study.sweep_sizes {
            row.extend(post_training_snrs(scenario, &drop, square_shape(s), &study.estimators, noise)?);
        }
        row.push(optimal_dft_snrs(scenario, &drop, scenario.fft_size)?);
        Ok(row)
    })?;
    let ap_antennas = scenario.topology.ap_array.total_elements();
    let column = |i: usize| -> Vec<f64> { per_trial.iter().flat_map(|r| r[i].iter().copied()).collect() };
    let mut out = Vec::new();
    let mut i = 0;
    for &s in &study.sweep_sizes {
        for est in &study.estimators {
            out.push(SnrSeries {
                label: est.name().to_string(),
                ap_antennas,
                fft_size: scenario.fft_size,
                shape: square_shape(s),
                snr: column(i),
            });
            i += 1;
        }
    }
    out.push(SnrSeries {
        label: OPTIMAL_DFT.to_string(),
        ap_antennas,
        fft_size: scenario.fft_size,
        shape: square_shape(0),
        snr: column(i),
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FftSizeStudy {
    pub scenario: Scenario,
    pub fft_sizes: Vec<usize>,
    pub sweep_sizes: Vec<usize>,
    pub trials: usize,
}

/// ML post-training SNR per FFT size and sweep size. The optimal-DFT bound
/// at the largest FFT size is appended with `shape` zero.
pub fn fft_size_study(study: &FftSizeStudy, seed: u64) -> Result<Vec<SnrSeries>> {
    let finest = *study
        .fft_sizes
        .iter()
        .max()
        .ok_or_else(|| invalid("at least one FFT size is needed"))?;
    let per_trial = run_trials(study.trials, |t| {
        let (topo, noise) = trial_seeds(seed, "fft-size", t);
        let drop = draw_drop(&study.scenario, topo)?;
        let mut row = Vec::new();
        for &c in &study.fft_sizes {
            let sc = Scenario {
                fft_size: c,
                ..study.scenario.clone()
            };
            for &s in &study.sweep_sizes {
                row.push(post_training_snrs(&sc, &drop, square_shape(s), &[EstimatorKind::Ml], noise)?.remove(0));
            }
        }
        row.push(optimal_dft_snrs(&study.scenario, &drop, finest)?);
        Ok(row)
    })?;
    let ap_antennas = study.scenario.topology.ap_array.total_elements();
    let column = |i: usize| -> Vec<f64> { per_trial.iter().flat_map(|r| r[i].iter().copied()).collect() };
    let mut out = Vec::new();
    let mut i = 0;
    for &c in &study.fft_sizes {
        for &s in &study.sweep_sizes {
            out.push(SnrSeries {
                label: EstimatorKind::Ml.name().to_string(),
                ap_antennas,
                fft_size: c,
                shape: square_shape(s),
                snr: column(i),
            });
            i += 1;
        }
    }
    out.push(SnrSeries {
        label: OPTIMAL_DFT.to_string(),
        ap_antennas,
        fft_size: finest,
        shape: square_shape(0),
        snr: column(i),
    });
    Ok(out)
}

/// A point-to-point ULA link with on-grid paths, used to study ML
/// misalignment in isolation.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLink {
    pub ap_subarrays: usize,
    pub ap_elements: usize,
    pub mobile_subarrays: usize,
    pub mobile_elements: usize,
    pub carrier_freq: f64,
    pub codebook: CodebookKind,
    pub shape: TrainingShape,
    pub fft_size: usize,
    /// Path powers relative to the strongest path, in dB, strongest first.
    pub path_offsets_db: Vec<f64>,
}

impl PointLink {
    fn geometries(&self) -> Result<(ArrayGeometry, ArrayGeometry)> {
        Ok((
            ArrayGeometry::ula(self.ap_subarrays, self.ap_elements, self.carrier_freq)?,
            ArrayGeometry::ula(self.mobile_subarrays, self.mobile_elements, self.carrier_freq)?,
        ))
    }
}

/// One ML run on a [`PointLink`].
#[derive(Debug, Clone, PartialEq)]
pub struct PointTrial {
    /// Grid indices `(aoa, aod)` of each path.
    pub paths: Vec<(usize, usize)>,
    pub estimate: (usize, usize),
    /// `|uᴴ H a|²/σ²` at the estimate.
    pub snr: f64,
}

impl PointTrial {
    /// Index of the path whose grid point lies within one bin of the
    /// estimate in both dimensions, if any.
    pub fn aligned_path(&self, fft_size: usize) -> Option<usize> {
        let dist = |a: usize, b: usize| {
            let d = a.abs_diff(b);
            d.min(fft_size - d)
        };
        self.paths
            .iter()
            .position(|&(a, d)| dist(a, self.estimate.0) <= 1 && dist(d, self.estimate.1) <= 1)
    }
}

/// Draw `count` distinct grid indices that are multiples of `spacing`.
fn spaced_indices<R: Rng + ?Sized>(rng: &mut R, fft_size: usize, spacing: usize, count: usize) -> Result<Vec<usize>> {
    let slots = fft_size / spacing;
    if count > slots {
        return Err(invalid(format!("cannot place {count} paths {spacing} bins apart on a {fft_size}-point grid")));
    }
    Ok(sample(rng, slots, count).into_iter().map(|i| i * spacing).collect())
}

/// Simulate one training round on a point link where the strongest path has
/// per-pilot SNR `snr` (`ρ|να̃₁|²/σ²`).
///
/// Paths sit on grid points at least four bins apart, which are mutually
/// orthogonal whenever `C = 2·J·M`. Path phases are uniform.
pub fn point_link_trial(link: &PointLink, snr: f64, seed: u64) -> Result<PointTrial> {
    let (ag, mg) = link.geometries()?;
    let mut rng = seeds::stream(seed, "paths", &[]);
    let n_paths = link.path_offsets_db.len();
    if n_paths == 0 {
        return Err(invalid("a point link needs at least one path"));
    }
    let mgrid = PhaseGrid::new(&mg, link.fft_size)?;
    let agrid = PhaseGrid::new(&ag, link.fft_size)?;
    let aoas = spaced_indices(&mut rng, link.fft_size, 4, n_paths)?;
    let aods = spaced_indices(&mut rng, link.fft_size, 4, n_paths)?;
    let nu = ((ag.total_elements() * mg.total_elements()) as f64 / n_paths as f64).sqrt();
    let paths: Vec<PathComponent> = link
        .path_offsets_db
        .iter()
        .enumerate()
        .map(|(s, &off)| PathComponent {
            gain: Complex64::from_polar((snr * db_to_linear(off)).sqrt() / nu, rng.random_range(0.0..2.0 * PI)),
            aoa: mgrid.angle(aoas[s]),
            aod: agrid.angle(aods[s]),
            is_los: s == 0,
        })
        .collect();
    let channel = Channel::new(0, 0, paths, &ag, &mg)?;
    let links = LinkSet::new(vec![ag.clone()], vec![mg.clone()], vec![vec![channel]])?;
    let mut cb_rng = seeds::stream(seed, "codebooks", &[]);
    let cfg = TrainingConfig {
        repetitions: link.shape.repetitions,
        ap_codebooks: vec![build_codebook(link.codebook, &ag, link.shape.q, &mut cb_rng)?],
        mobile_codebooks: vec![build_codebook(link.codebook, &mg, link.shape.p, &mut cb_rng)?],
        ap_power: 1.0,
        mobile_power: 1.0,
        noise: 1.0,
        fft_size: link.fft_size,
        ack_threshold_db: 0.0,
        max_served_per_ap: 1,
    };
    let obs = downlink_observations(&links, &cfg, seed)?;
    let est = MlEstimator::new(
        &[(&cfg.ap_codebooks[0], &ag)],
        &cfg.mobile_codebooks[0],
        &mg,
        link.fft_size,
    )?
    .estimate(obs[0].y.view())?;
    let aod_index = est.aod_index.ok_or_else(|| invalid("ML estimate without an AoD"))?;
    let g = links
        .response(0, 0)
        .gain(&mgrid.response(est.aoa_index), &agrid.response(aod_index));
    Ok(PointTrial {
        paths: aoas.into_iter().zip(aods).collect(),
        estimate: (est.aoa_index, aod_index),
        snr: g.norm_sqr(),
    })
}

/// Fraction of trials in which ML misses the strongest path's grid point.
pub fn misalignment_rate(link: &PointLink, snr: f64, trials: usize, seed: u64) -> Result<f64> {
    let missed = run_trials(trials, |t| {
        let trial = point_link_trial(link, snr, seeds::derive_u64(seed, "misalignment", &[t as u64]))?;
        Ok(trial.estimate != trial.paths[0])
    })?;
    Ok(missed.iter().filter(|&&m| m).count() as f64 / trials as f64)
}

/// Empirical and approximate alignment probabilities at one training SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkAnalysisPoint {
    /// `γ_max` in dB.
    pub snr_db: f64,
    /// Fraction of trials aligned to each path.
    pub empirical: Vec<f64>,
    /// `Q((√γ_max − √γ_s)/√(NMJ²/Ω))` per weaker path; the strongest path
    /// gets the complement of their sum.
    pub approximation: Vec<f64>,
    /// Post-training SNRs (linear), in trial order.
    pub post_training: Vec<f64>,
}

pub fn link_analysis(link: &PointLink, snrs_db: &[f64], trials: usize, seed: u64) -> Result<Vec<LinkAnalysisPoint>> {
    if link.ap_subarrays != link.mobile_subarrays {
        return Err(invalid("link analysis needs the same sub-array count J at both ends"));
    }
    let pilots = (link.shape.repetitions * link.shape.p * link.shape.q) as f64;
    snrs_db
        .iter()
        .enumerate()
        .map(|(i, &snr_db)| {
            let snr = db_to_linear(snr_db);
            let results = run_trials(trials, |t| {
                point_link_trial(link, snr, seeds::derive_u64(seed, "link-analysis", &[i as u64, t as u64]))
            })?;
            let mut counts = vec![0usize; link.path_offsets_db.len()];
            for r in &results {
                if let Some(s) = r.aligned_path(link.fft_size) {
                    counts[s] += 1;
                }
            }
            let mut approximation: Vec<f64> = link
                .path_offsets_db
                .iter()
                .map(|&off| {
                    misalignment_probability(
                        snr,
                        snr * db_to_linear(off),
                        pilots,
                        link.ap_elements,
                        link.mobile_elements,
                        link.ap_subarrays,
                    )
                })
                .collect();
            approximation[0] = (1.0 - approximation[1..].iter().sum::<f64>()).max(0.0);
            Ok(LinkAnalysisPoint {
                snr_db,
                empirical: counts.iter().map(|&c| c as f64 / trials as f64).collect(),
                approximation,
                post_training: results.iter().map(|r| r.snr).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadStudy {
    pub scenario: Scenario,
    pub estimator: EstimatorKind,
    pub mobile_counts: Vec<usize>,
    pub blockage_rates: Vec<f64>,
    pub t_max_values: Vec<f64>,
    pub guard: f64,
    pub t_switch: f64,
    pub shapes: Vec<TrainingShape>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadCell {
    pub num_mobiles: usize,
    pub blockage_rate: f64,
    pub t_max: f64,
    pub solution: OverheadSolution,
}

/// Optimized overhead over the grid of mobile counts, blockage rates and
/// frame-length caps. SINR distributions depend only on the mobile count, so
/// the ladder is simulated once per count.
pub fn overhead_study(study: &OverheadStudy, seed: u64) -> Result<Vec<OverheadCell>> {
    let mut out = Vec::new();
    for &n in &study.mobile_counts {
        let mut scenario = study.scenario.clone();
        scenario.topology.num_mobiles = n;
        let ladder = build_ladder(
            &scenario,
            &study.shapes,
            study.estimator,
            study.trials,
            seeds::derive_u64(seed, "optimize-overhead", &[n as u64]),
        )?;
        for &t_max in &study.t_max_values {
            for &delta in &study.blockage_rates {
                let constraints = OverheadConstraints {
                    guard: study.guard,
                    t_switch: study.t_switch,
                    t_max,
                    blockage_rate: delta,
                };
                out.push(OverheadCell {
                    num_mobiles: n,
                    blockage_rate: delta,
                    t_max,
                    solution: optimize_ladder(&constraints, &ladder)?,
                });
            }
        }
    }
    Ok(out)
}

/// Empirical quantile (linear interpolation between order statistics).
pub fn quantile(samples: &[f64], level: f64) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = level.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// SNR in dB with a floor for exact zeros, so outputs stay finite.
pub fn snr_db(snr: f64) -> f64 {
    10.0 * snr.max(1e-30).log10()
}

/// Mean of the SNRs in dB.
pub fn mean_db(samples: &[f64]) -> f64 {
    samples.iter().map(|&s| snr_db(s)).sum::<f64>() / samples.len() as f64
}
