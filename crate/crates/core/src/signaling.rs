//! The three-stage initial-access protocol: downlink training, uplink
//! training and handshake.
//!
//! Every mobile trains on its own tone, so mobiles never interfere with each
//! other; APs do, since all of them transmit on every tone during downlink
//! training. Noise for mobile `k` (and for link `(l, k)` on the uplink) comes
//! from its own seeded stream.

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arrays::{array_response, Angle, ArrayGeometry, Beam};
use crate::channel::{Channel, PathResponses};
use crate::codebooks::Codebook;
use crate::error::{invalid, Error, Result};
use crate::estimators::{estimate_mp, Estimate, LmlEstimator, MlEstimator};
use crate::seeds;
use crate::units::linear_to_db;

/// Mobile id → tone index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToneAssignment {
    tones: BTreeMap<usize, usize>,
}

impl ToneAssignment {
    pub fn tone(&self, mobile: usize) -> Option<usize> {
        self.tones.get(&mobile).copied()
    }

    pub fn len(&self) -> usize {
        self.tones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tones.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.tones.iter().map(|(&m, &t)| (m, t))
    }
}

/// Tones in list order: the `i`-th mobile gets tone `i`.
pub fn assign_tones(mobile_ids: &[usize]) -> Result<ToneAssignment> {
    let mut tones = BTreeMap::new();
    for (t, &m) in mobile_ids.iter().enumerate() {
        if tones.insert(m, t).is_some() {
            return Err(invalid(format!("mobile {m} listed twice")));
        }
    }
    Ok(ToneAssignment { tones })
}

/// Every AP–mobile channel of a network, with array responses resolved.
#[derive(Debug, Clone)]
pub struct LinkSet {
    pub ap_geoms: Vec<ArrayGeometry>,
    pub mobile_geoms: Vec<ArrayGeometry>,
    channels: Vec<Vec<Channel>>,
    responses: Vec<Vec<PathResponses>>,
}

impl LinkSet {
    /// `channels[l][k]` is the channel from AP `l` to mobile `k`.
    pub fn new(
        ap_geoms: Vec<ArrayGeometry>,
        mobile_geoms: Vec<ArrayGeometry>,
        channels: Vec<Vec<Channel>>,
    ) -> Result<Self> {
        if channels.len() != ap_geoms.len() || channels.iter().any(|row| row.len() != mobile_geoms.len()) {
            return Err(invalid(format!(
                "need a channel for each of the {}x{} AP/mobile pairs",
                ap_geoms.len(),
                mobile_geoms.len()
            )));
        }
        let responses = channels
            .iter()
            .zip(&ap_geoms)
            .map(|(row, ag)| {
                row.iter()
                    .zip(&mobile_geoms)
                    .map(|(ch, mg)| ch.responses(ag, mg))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ap_geoms,
            mobile_geoms,
            channels,
            responses,
        })
    }

    pub fn num_aps(&self) -> usize {
        self.ap_geoms.len()
    }

    pub fn num_mobiles(&self) -> usize {
        self.mobile_geoms.len()
    }

    pub fn channel(&self, ap: usize, mobile: usize) -> &Channel {
        &self.channels[ap][mobile]
    }

    pub fn response(&self, ap: usize, mobile: usize) -> &PathResponses {
        &self.responses[ap][mobile]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Mp,
    Ml,
    Lml,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Mp, EstimatorKind::Ml, EstimatorKind::Lml];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Mp => "mp",
            EstimatorKind::Ml => "ml",
            EstimatorKind::Lml => "lml",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown estimator {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    /// Pilot repetitions `I`.
    pub repetitions: usize,
    /// Downlink training beams, one codebook of `Q` beams per AP.
    pub ap_codebooks: Vec<Codebook>,
    /// Receive combiners, one codebook of `P` beams per mobile.
    pub mobile_codebooks: Vec<Codebook>,
    /// AP transmit power per tone, watts.
    pub ap_power: f64,
    /// Mobile transmit power, watts.
    pub mobile_power: f64,
    /// Noise power over one training tone, watts.
    pub noise: f64,
    pub fft_size: usize,
    /// Handshake messages are detected when their SNR reaches this level.
    pub ack_threshold_db: f64,
    /// Mobiles each AP may accept in one frame.
    pub max_served_per_ap: usize,
}

impl TrainingConfig {
    pub fn p(&self) -> usize {
        self.mobile_codebooks.first().map_or(0, Codebook::size)
    }

    pub fn q(&self) -> usize {
        self.ap_codebooks.first().map_or(0, Codebook::size)
    }

    /// Pilot budget `Ω = I·P·Q`.
    pub fn pilots(&self) -> usize {
        self.repetitions * self.p() * self.q()
    }

    pub fn slots(&self) -> SlotAccount {
        SlotAccount {
            downlink: self.repetitions * self.p() * self.q(),
            uplink: self.repetitions * self.q(),
            handshake: 2,
        }
    }

    fn validate(&self, links: &LinkSet) -> Result<()> {
        if self.repetitions == 0 {
            return Err(invalid("at least one pilot repetition is needed"));
        }
        if self.ap_codebooks.len() != links.num_aps() || self.mobile_codebooks.len() != links.num_mobiles() {
            return Err(invalid(format!(
                "{} AP and {} mobile codebooks for {} APs and {} mobiles",
                self.ap_codebooks.len(),
                self.mobile_codebooks.len(),
                links.num_aps(),
                links.num_mobiles()
            )));
        }
        let (p, q) = (self.p(), self.q());
        if self.ap_codebooks.iter().any(|c| c.size() != q) || self.mobile_codebooks.iter().any(|c| c.size() != p) {
            return Err(invalid("all APs must sweep Q beams and all mobiles P beams"));
        }
        for (cb, g) in self.ap_codebooks.iter().zip(&links.ap_geoms) {
            if cb.beams.iter().any(|b| b.weights.len() != g.total_elements()) {
                return Err(invalid("AP codebook does not match its array"));
            }
        }
        for (cb, g) in self.mobile_codebooks.iter().zip(&links.mobile_geoms) {
            if cb.beams.iter().any(|b| b.weights.len() != g.total_elements()) {
                return Err(invalid("mobile codebook does not match its array"));
            }
        }
        if !(self.ap_power >= 0.0 && self.mobile_power >= 0.0) {
            return Err(invalid("transmit powers must be nonnegative"));
        }
        if !(self.noise > 0.0) {
            return Err(invalid("noise power must be positive"));
        }
        Ok(())
    }
}

/// Training slots used by one initial-access round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotAccount {
    pub downlink: usize,
    pub uplink: usize,
    pub handshake: usize,
}

impl SlotAccount {
    pub fn total(&self) -> usize {
        self.downlink + self.uplink + self.handshake
    }
}

/// Averaged received training samples of one mobile, `P × Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    pub mobile_id: usize,
    pub y: Array2<Complex64>,
}

/// `CN(0, variance)` sample.
fn complex_noise<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let n = Normal::new(0.0, (variance / 2.0).sqrt()).expect("finite variance");
    Complex64::new(n.sample(rng), n.sample(rng))
}

/// Downlink training samples for every mobile.
///
/// `y_{p,q} = Σ_l √ρ·w_pᴴ H_l f_{l,q} + n` with `n ~ CN(0, σ²/I)` and unit
/// pilots; mobile `k`'s noise comes from stream `("downlink", k)` of `seed`.
pub fn downlink_observations(links: &LinkSet, cfg: &TrainingConfig, seed: u64) -> Result<Vec<ObservationMatrix>> {
    cfg.validate(links)?;
    (0..links.num_mobiles())
        .map(|k| downlink_for_mobile(links, cfg, k, seed))
        .collect()
}

fn downlink_for_mobile(links: &LinkSet, cfg: &TrainingConfig, k: usize, seed: u64) -> Result<ObservationMatrix> {
    let (p_n, q_n) = (cfg.p(), cfg.q());
    let amp = cfg.ap_power.sqrt();
    let mut y = Array2::<Complex64>::zeros((p_n, q_n));
    let combiners = &cfg.mobile_codebooks[k];
    for l in 0..links.num_aps() {
        let resp = links.response(l, k);
        let coeffs = resp.coefficients();
        let mob: Vec<Vec<Complex64>> = (0..p_n).map(|p| resp.mobile_projections(combiners.weights(p))).collect();
        let ap: Vec<Vec<Complex64>> = (0..q_n)
            .map(|q| resp.ap_projections(cfg.ap_codebooks[l].weights(q)))
            .collect();
        for ((p, q), v) in y.indexed_iter_mut() {
            let s: Complex64 = coeffs
                .iter()
                .zip(&mob[p])
                .zip(&ap[q])
                .map(|((c, m), a)| c * m * a)
                .sum();
            *v += s * amp;
        }
    }
    let mut rng = seeds::stream(seed, "downlink", &[k as u64]);
    let var = cfg.noise / cfg.repetitions as f64;
    y.iter_mut().for_each(|v| *v += complex_noise(&mut rng, var));
    Ok(ObservationMatrix { mobile_id: k, y })
}

/// Uplink samples `r_{l,k,q} = √ρ_m·g_qᴴ H_{l,k}ᴴ ŵ_k + n` at every AP,
/// returned as `[ap][mobile]` vectors of length `Q`.
///
/// The AP combiners `g_q` are its downlink training beams.
pub fn uplink_observations(
    links: &LinkSet,
    beamformers: &[Option<Vec<Complex64>>],
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<Vec<Vec<Vec<Complex64>>>> {
    cfg.validate(links)?;
    if beamformers.len() != links.num_mobiles() {
        return Err(invalid("one uplink beamformer slot per mobile is required"));
    }
    let amp = cfg.mobile_power.sqrt();
    let var = cfg.noise / cfg.repetitions as f64;
    (0..links.num_aps())
        .map(|l| {
            (0..links.num_mobiles())
                .map(|k| {
                    let w = beamformers[k]
                        .as_ref()
                        .ok_or_else(|| Error::Protocol(format!("mobile {k} has no uplink beamformer")))?;
                    let resp = links.response(l, k);
                    let mut rng = seeds::stream(seed, "uplink", &[l as u64, k as u64]);
                    Ok((0..cfg.q())
                        .map(|q| resp.gain(w, cfg.ap_codebooks[l].weights(q)).conj() * amp + complex_noise(&mut rng, var))
                        .collect())
                })
                .collect()
        })
        .collect()
}

/// What an AP learned about one mobile from the uplink.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkEstimate {
    pub aod: Angle,
    /// `|β̂|²/σ²`: SNR of the mobile's uplink with the AP steered to `aod`.
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobileOutcome {
    /// Downlink estimate. For MP the indices are codebook indices
    /// `(p̂, q̂)`, not grid indices.
    pub downlink: Estimate,
    pub serving_ap: Option<usize>,
    pub downlink_ack: bool,
    pub uplink_ack: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccessOutcome {
    pub mobiles: Vec<MobileOutcome>,
    /// `[ap][mobile]`.
    pub uplink: Vec<Vec<UplinkEstimate>>,
    /// Mobiles each AP selected for the handshake.
    pub scheduled: Vec<Vec<usize>>,
    pub slots: SlotAccount,
}

impl AccessOutcome {
    pub fn association(&self, mobile: usize) -> Option<usize> {
        self.mobiles[mobile].serving_ap
    }

    pub fn associated_count(&self) -> usize {
        self.mobiles.iter().filter(|m| m.serving_ap.is_some()).count()
    }

    /// Mobile-side steering beam toward the downlink AoA estimate.
    pub fn mobile_beam(&self, links: &LinkSet, mobile: usize) -> Result<Beam> {
        crate::arrays::steering_beam(&links.mobile_geoms[mobile], self.mobiles[mobile].downlink.aoa, 1.0)
    }

    /// AP-side steering beam toward the uplink AoD estimate of `mobile`.
    pub fn ap_beam(&self, links: &LinkSet, ap: usize, mobile: usize) -> Result<Beam> {
        crate::arrays::steering_beam(&links.ap_geoms[ap], self.uplink[ap][mobile].aod, 1.0)
    }
}

/// Downlink estimate for one mobile with the chosen estimator.
pub fn estimate_downlink(
    obs: &ObservationMatrix,
    links: &LinkSet,
    cfg: &TrainingConfig,
    estimator: EstimatorKind,
) -> Result<Estimate> {
    let k = obs.mobile_id;
    let mob_cb = &cfg.mobile_codebooks[k];
    let mob_geom = &links.mobile_geoms[k];
    match estimator {
        EstimatorKind::Mp => {
            let (p, q) = estimate_mp(obs.y.view());
            let aoa = mob_cb
                .steer_angle(mob_geom, p)
                .ok_or_else(|| invalid("MP needs directional receive beams"))?;
            Ok(Estimate {
                aoa,
                aoa_index: p,
                aod: None,
                aod_index: Some(q),
                ap: None,
                gain: None,
                statistic: obs.y[[p, q]].norm_sqr(),
                degenerate: obs.y[[p, q]].norm_sqr() == 0.0,
            })
        }
        EstimatorKind::Ml => {
            let aps: Vec<(&Codebook, &ArrayGeometry)> = cfg.ap_codebooks.iter().zip(&links.ap_geoms).collect();
            MlEstimator::new(&aps, mob_cb, mob_geom, cfg.fft_size)?.estimate(obs.y.view())
        }
        EstimatorKind::Lml => LmlEstimator::new(mob_cb, mob_geom, cfg.fft_size)?.estimate(obs.y.view()),
    }
}

/// AoD estimate and uplink SNR from the `Q` samples an AP received from one
/// mobile.
pub fn estimate_uplink(
    r: &[Complex64],
    codebook: &Codebook,
    geom: &ArrayGeometry,
    lml: Option<&LmlEstimator>,
    noise: f64,
) -> Result<UplinkEstimate> {
    match lml {
        None => {
            let y = Array2::from_shape_vec((r.len(), 1), r.to_vec()).expect("column shape");
            let (q, _) = estimate_mp(y.view());
            let aod = codebook
                .steer_angle(geom, q)
                .ok_or_else(|| invalid("MP needs directional AP beams"))?;
            Ok(UplinkEstimate {
                aod,
                snr: r[q].norm_sqr() / noise,
            })
        }
        Some(est) => {
            let y = Array2::from_shape_vec((r.len(), 1), r.to_vec()).expect("column shape");
            let e = est.estimate(y.view())?;
            let beta = est.fitted_gain(r, e.aoa_index);
            Ok(UplinkEstimate {
                aod: e.aoa,
                snr: beta.norm_sqr() / noise,
            })
        }
    }
}

/// SNR of a single symbol sent with steering beams `w` (mobile) and `f` (AP).
fn link_snr(resp: &PathResponses, w: &[Complex64], f: &[Complex64], power: f64, noise: f64) -> f64 {
    power * resp.gain(w, f).norm_sqr() / noise
}

/// Run downlink training, uplink training, scheduling and the handshake.
///
/// Per-mobile noise streams are derived from one `u64` drawn from `rng`.
pub fn run_initial_access<R: Rng + ?Sized>(
    links: &LinkSet,
    cfg: &TrainingConfig,
    estimator: EstimatorKind,
    rng: &mut R,
) -> Result<AccessOutcome> {
    cfg.validate(links)?;
    let seed: u64 = rng.random();
    let (num_aps, num_mobiles) = (links.num_aps(), links.num_mobiles());

    let observations = downlink_observations(links, cfg, seed)?;
    let downlink = observations
        .iter()
        .map(|obs| estimate_downlink(obs, links, cfg, estimator))
        .collect::<Result<Vec<_>>>()?;

    let beamformers = downlink
        .iter()
        .zip(&links.mobile_geoms)
        .map(|(e, g)| array_response(g, e.aoa).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let samples = uplink_observations(links, &beamformers, cfg, seed)?;
    let uplink = (0..num_aps)
        .map(|l| {
            let lml = match estimator {
                EstimatorKind::Mp => None,
                _ => Some(LmlEstimator::new(&cfg.ap_codebooks[l], &links.ap_geoms[l], cfg.fft_size)?),
            };
            samples[l]
                .iter()
                .map(|r| estimate_uplink(r, &cfg.ap_codebooks[l], &links.ap_geoms[l], lml.as_ref(), cfg.noise))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    // each AP takes its strongest mobiles; ties go to the lower mobile id
    let scheduled: Vec<Vec<usize>> = uplink
        .iter()
        .map(|row| {
            let mut ids: Vec<usize> = (0..num_mobiles).collect();
            ids.sort_by(|&a, &b| row[b].snr.total_cmp(&row[a].snr).then(a.cmp(&b)));
            ids.truncate(cfg.max_served_per_ap);
            ids.sort_unstable();
            ids
        })
        .collect();

    let threshold = cfg.ack_threshold_db;
    let mut mobiles = Vec::with_capacity(num_mobiles);
    for (k, est) in downlink.into_iter().enumerate() {
        let w = beamformers[k].as_ref().expect("set above");
        let mut best: Option<(usize, f64)> = None;
        for (l, sched) in scheduled.iter().enumerate() {
            if !sched.contains(&k) {
                continue;
            }
            let f = array_response(&links.ap_geoms[l], uplink[l][k].aod)?;
            let snr = link_snr(links.response(l, k), w, &f, cfg.ap_power, cfg.noise);
            if snr > 0.0 && linear_to_db(snr) >= threshold && best.is_none_or(|b| snr > b.1) {
                best = Some((l, snr));
            }
        }
        let (serving_ap, uplink_ack) = match best {
            Some((l, _)) => {
                let f = array_response(&links.ap_geoms[l], uplink[l][k].aod)?;
                let snr = link_snr(links.response(l, k), w, &f, cfg.mobile_power, cfg.noise);
                let ok = snr > 0.0 && linear_to_db(snr) >= threshold;
                (ok.then_some(l), ok)
            }
            None => (None, false),
        };
        mobiles.push(MobileOutcome {
            downlink: est,
            serving_ap,
            downlink_ack: best.is_some(),
            uplink_ack,
        });
    }

    Ok(AccessOutcome {
        mobiles,
        uplink,
        scheduled,
        slots: cfg.slots(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arrays::PhaseGrid;
    use crate::channel::PathComponent;
    use crate::codebooks::{build_codebook, CodebookKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FC: f64 = 28e9;

    fn ula(j: usize, m: usize) -> ArrayGeometry {
        ArrayGeometry::ula(j, m, FC).unwrap()
    }

    fn path(gain: Complex64, aoa: f64, aod: f64) -> PathComponent {
        PathComponent {
            gain,
            aoa: Angle::Linear(aoa),
            aod: Angle::Linear(aod),
            is_los: false,
        }
    }

    /// Angle whose flat phase is `2πk/size` on a half-wavelength ULA.
    fn grid_angle(k: usize, size: usize) -> f64 {
        let mut ph = 2.0 * std::f64::consts::PI * k as f64 / size as f64;
        if ph >= std::f64::consts::PI {
            ph -= 2.0 * std::f64::consts::PI;
        }
        (ph / std::f64::consts::PI).asin()
    }

    fn config(aps: &[ArrayGeometry], mobs: &[ArrayGeometry], p: usize, q: usize, kind: CodebookKind) -> TrainingConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        TrainingConfig {
            repetitions: 1,
            ap_codebooks: aps.iter().map(|g| build_codebook(kind, g, q, &mut rng).unwrap()).collect(),
            mobile_codebooks: mobs.iter().map(|g| build_codebook(kind, g, p, &mut rng).unwrap()).collect(),
            ap_power: 0.1,
            mobile_power: 0.03,
            noise: 1e-30,
            fft_size: 64,
            ack_threshold_db: 0.0,
            max_served_per_ap: 2,
        }
    }

    #[test]
    fn tones_are_injective_and_follow_list_order() {
        let t = assign_tones(&[0, 1, 2]).unwrap();
        assert_eq!((t.tone(0), t.tone(1), t.tone(2)), (Some(0), Some(1), Some(2)));
        let ids: Vec<usize> = (0..1000).collect();
        let t = assign_tones(&ids).unwrap();
        let mut seen: Vec<usize> = t.iter().map(|(_, tone)| tone).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 1000);
        let t = assign_tones(&[7, 3, 5]).unwrap();
        assert_eq!((t.tone(7), t.tone(3), t.tone(5)), (Some(0), Some(1), Some(2)));
        assert!(assign_tones(&[1, 1]).is_err());
    }

    #[test]
    fn matched_dft_beams_give_scaled_gain() {
        let (ag, mg) = (ula(2, 8), ula(2, 8));
        let alpha = Complex64::new(3e-6, -1e-6);
        let ch = Channel::new(0, 0, vec![path(alpha, grid_angle(3, 16), grid_angle(5, 16))], &ag, &mg).unwrap();
        let nu = ch.antenna_gain();
        let links = LinkSet::new(vec![ag], vec![mg], vec![vec![ch]]).unwrap();
        let mut cfg = config(&links.ap_geoms, &links.mobile_geoms, 16, 16, CodebookKind::FullSweep);
        cfg.noise = 1e-300;
        let y = &downlink_observations(&links, &cfg, 1).unwrap()[0].y;
        let expect = alpha * nu * cfg.ap_power.sqrt();
        assert!((y[[3, 5]] - expect).norm() < 1e-9 * expect.norm());
        // every other pair is orthogonal to the path
        let off: f64 = y.indexed_iter().filter(|(i, _)| *i != (3, 5)).map(|(_, v)| v.norm()).fold(0.0, f64::max);
        assert!(off < 1e-9 * expect.norm());
    }

    #[test]
    fn averaged_noise_variance() {
        let (ag, mg) = (ula(1, 4), ula(1, 4));
        let ch = Channel::new(0, 0, vec![path(Complex64::new(0.0, 0.0), 0.0, 0.0)], &ag, &mg).unwrap();
        let links = LinkSet::new(vec![ag], vec![mg], vec![vec![ch]]).unwrap();
        let mut cfg = config(&links.ap_geoms, &links.mobile_geoms, 100, 100, CodebookKind::Random);
        cfg.repetitions = 4;
        cfg.noise = 2.0;
        let y = &downlink_observations(&links, &cfg, 5).unwrap()[0].y;
        let var = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / y.len() as f64;
        assert!((var / 0.5 - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn observations_are_linear_in_path_gains() {
        let (ag, mg) = (ula(2, 4), ula(2, 4));
        let mk = |a: Complex64, b: Complex64| {
            Channel::new(0, 0, vec![path(a, 0.3, -0.2), path(b, -1.0, 0.9)], &ag, &mg).unwrap()
        };
        let run = |a, b| {
            let links = LinkSet::new(vec![ag.clone()], vec![mg.clone()], vec![vec![mk(a, b)]]).unwrap();
            let mut cfg = config(&links.ap_geoms, &links.mobile_geoms, 8, 8, CodebookKind::Random);
            cfg.noise = 1e-300;
            downlink_observations(&links, &cfg, 1).unwrap().remove(0).y
        };
        let (a1, b1) = (Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.1));
        let (a2, b2) = (Complex64::new(0.3, -1.0), Complex64::new(2.0, 0.0));
        let sum = run(a1 + a2, b1 + b2);
        let parts = &run(a1, b1) + &run(a2, b2);
        assert!(sum.iter().zip(parts.iter()).all(|(x, y)| (x - y).norm() < 1e-12));
    }

    #[test]
    fn uplink_is_tone_isolated_and_reciprocal() {
        let (ag, mg) = (ula(2, 4), ula(2, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ch1 = crate::channel::sample_channel(
            0,
            0,
            &crate::channel::LinkGeometry {
                ap_pos: [0.0, 0.0, 10.0],
                mobile_pos: [40.0, 30.0, 1.5],
                ap_orientation: 0.0,
                mobile_orientation: 0.0,
                los: true,
            },
            &ag,
            &mg,
            &crate::channel::ChannelParams::default(),
            &mut rng,
        )
        .unwrap();
        let dead = ch1.scaled(Complex64::new(0.0, 0.0));
        let links = LinkSet::new(vec![ag.clone()], vec![mg.clone(), mg.clone()], vec![vec![dead.clone(), ch1.clone()]])
            .unwrap();
        let mut cfg = config(&links.ap_geoms, &links.mobile_geoms, 8, 8, CodebookKind::Random);
        let w: Vec<Complex64> = cfg.mobile_codebooks[0].weights(3).to_vec();
        let bf = vec![Some(w.clone()), Some(w.clone())];
        let r1 = uplink_observations(&links, &bf, &cfg, 7).unwrap();
        cfg.mobile_power *= 1e6;
        let r2 = uplink_observations(&links, &bf, &cfg, 7).unwrap();
        // mobile 0's samples are the same pure noise whatever mobile 1 sends
        assert_eq!(r1[0][0], r2[0][0]);
        assert_eq!(r1[0][0].len(), 8);

        cfg.noise = 1e-300;
        cfg.mobile_power = cfg.ap_power;
        let up = uplink_observations(&links, &bf, &cfg, 7).unwrap();
        cfg.mobile_codebooks[1] = cfg.mobile_codebooks[0].clone();
        let down = downlink_observations(&links, &cfg, 7).unwrap();
        for (q, u) in up[0][1].iter().enumerate() {
            let d = down[1].y[[3, q]];
            assert!((u - d.conj()).norm() < 1e-9 * d.norm().max(1e-30));
        }
        assert!(matches!(
            uplink_observations(&links, &[Some(w), None], &cfg, 7),
            Err(Error::Protocol(_))
        ));
    }

    fn oracle_best_pair(links: &LinkSet, l: usize, k: usize, c: usize) -> (usize, usize) {
        let mg = PhaseGrid::new(&links.mobile_geoms[k], c).unwrap();
        let ag = PhaseGrid::new(&links.ap_geoms[l], c).unwrap();
        let resp = links.response(l, k);
        let mut best = ((0, 0), -1.0);
        for t in 0..mg.len() {
            let u = mg.response(t);
            for g in 0..ag.len() {
                let v = resp.gain(&u, &ag.response(g)).norm_sqr();
                if v > best.1 {
                    best = ((t, g), v);
                }
            }
        }
        best.0
    }

    #[test]
    fn noiseless_single_link_aligns_with_strongest_path() {
        let (ag, mg) = (ula(2, 8), ula(2, 8));
        let ch = Channel::new(
            0,
            0,
            vec![
                path(Complex64::new(1e-5, 0.0), 0.41, -0.73),
                path(Complex64::new(0.0, 3e-6), -0.2, 0.3),
            ],
            &ag,
            &mg,
        )
        .unwrap();
        let links = LinkSet::new(vec![ag], vec![mg], vec![vec![ch]]).unwrap();
        let cfg = config(&links.ap_geoms, &links.mobile_geoms, 16, 16, CodebookKind::FullSweep);
        let (t, g) = oracle_best_pair(&links, 0, 0, 64);
        for est in [EstimatorKind::Ml, EstimatorKind::Lml] {
            let out = run_initial_access(&links, &cfg, est, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(out.association(0), Some(0), "{est}");
            let grid = PhaseGrid::new(&links.mobile_geoms[0], 64).unwrap();
            assert_eq!(grid.nearest_index(out.mobiles[0].downlink.aoa).unwrap(), t, "{est}");
            let agrid = PhaseGrid::new(&links.ap_geoms[0], 64).unwrap();
            assert_eq!(agrid.nearest_index(out.uplink[0][0].aod).unwrap(), g, "{est}");
            if est == EstimatorKind::Ml {
                assert_eq!(out.mobiles[0].downlink.aod_index, Some(g));
            }
            assert_eq!(out.slots.total(), 16 * 16 + 16 + 2);
        }
        let out = run_initial_access(&links, &cfg, EstimatorKind::Mp, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.association(0), Some(0));
    }

    #[test]
    fn zero_power_means_no_associations() {
        let (ag, mg) = (ula(2, 4), ula(2, 4));
        let ch = Channel::new(0, 0, vec![path(Complex64::new(1e-5, 0.0), 0.1, 0.2)], &ag, &mg).unwrap();
        let links = LinkSet::new(vec![ag], vec![mg], vec![vec![ch]]).unwrap();
        let mut cfg = config(&links.ap_geoms, &links.mobile_geoms, 8, 8, CodebookKind::Adaptive);
        cfg.ap_power = 0.0;
        cfg.mobile_power = 0.0;
        cfg.noise = 1e-13;
        for est in EstimatorKind::ALL {
            let out = run_initial_access(&links, &cfg, est, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(out.associated_count(), 0);
            assert!(!out.mobiles[0].downlink_ack);
        }
    }

    #[test]
    fn mobiles_join_their_strongest_ap() {
        let (ag, mg) = (ula(2, 8), ula(2, 8));
        let strong = Complex64::new(1e-5, 0.0);
        let weak = Complex64::new(1e-7, 0.0);
        let chans = vec![
            vec![
                Channel::new(0, 0, vec![path(strong, 0.2, 0.5)], &ag, &mg).unwrap(),
                Channel::new(0, 1, vec![path(weak, -0.6, 0.1)], &ag, &mg).unwrap(),
            ],
            vec![
                Channel::new(1, 0, vec![path(weak, 0.9, -0.4)], &ag, &mg).unwrap(),
                Channel::new(1, 1, vec![path(strong, -0.3, 0.7)], &ag, &mg).unwrap(),
            ],
        ];
        let links = LinkSet::new(vec![ag.clone(), ag], vec![mg.clone(), mg], chans).unwrap();
        // direct per-AP received powers with aligned beams
        for k in 0..2 {
            let p: Vec<f64> = (0..2)
                .map(|l| {
                    let resp = links.response(l, k);
                    resp.coefficients().iter().map(|c| c.norm_sqr()).sum()
                })
                .collect();
            assert!(p[k] > p[1 - k]);
        }
        let mut cfg = config(&links.ap_geoms, &links.mobile_geoms, 16, 16, CodebookKind::FullSweep);
        cfg.noise = 1e-15;
        // identical sweeps would leave ML unable to tell the APs apart
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        cfg.ap_codebooks.iter_mut().for_each(|c| c.scramble(&mut rng));
        for est in EstimatorKind::ALL {
            let out = run_initial_access(&links, &cfg, est, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
            assert_eq!(out.association(0), Some(0), "{est}");
            assert_eq!(out.association(1), Some(1), "{est}");
            if est == EstimatorKind::Ml {
                assert_eq!(out.mobiles[0].downlink.ap, Some(0));
                assert_eq!(out.mobiles[1].downlink.ap, Some(1));
            }
        }
    }

    #[test]
    fn same_seed_same_outcome() {
        let (ag, mg) = (ula(2, 4), ula(2, 4));
        let ch = Channel::new(0, 0, vec![path(Complex64::new(2e-6, 1e-6), 0.1, 0.2)], &ag, &mg).unwrap();
        let links = LinkSet::new(vec![ag], vec![mg], vec![vec![ch]]).unwrap();
        let mut cfg = config(&links.ap_geoms, &links.mobile_geoms, 8, 8, CodebookKind::Cross);
        cfg.noise = 1e-12;
        let a = run_initial_access(&links, &cfg, EstimatorKind::Ml, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = run_initial_access(&links, &cfg, EstimatorKind::Ml, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mp_rejects_random_beams() {
        let (ag, mg) = (ula(2, 4), ula(2, 4));
        let ch = Channel::new(0, 0, vec![path(Complex64::new(2e-6, 0.0), 0.1, 0.2)], &ag, &mg).unwrap();
        let links = LinkSet::new(vec![ag], vec![mg], vec![vec![ch]]).unwrap();
        let cfg = config(&links.ap_geoms, &links.mobile_geoms, 8, 8, CodebookKind::Random);
        let r = run_initial_access(&links, &cfg, EstimatorKind::Mp, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn estimator_names_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
        }
        assert!("fft".parse::<EstimatorKind>().is_err());
    }
}
