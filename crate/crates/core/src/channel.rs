//! Sparse multipath channels between one AP and one mobile.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::arrays::{array_response, inner, Angle, ArrayGeometry, ArrayKind};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PathComponent {
    /// Linear amplitude including path loss and phase delay.
    pub gain: Complex64,
    pub aoa: Angle,
    pub aod: Angle,
    pub is_los: bool,
}

/// The paths between one AP and one mobile.
///
/// The antenna gain `ν = √(N_total·M_total/S)` is derived from the element
/// counts and the current path count, so it always tracks `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub ap_id: usize,
    pub mobile_id: usize,
    paths: Vec<PathComponent>,
    ap_elements: usize,
    mobile_elements: usize,
}

impl Channel {
    pub fn new(
        ap_id: usize,
        mobile_id: usize,
        paths: Vec<PathComponent>,
        ap_geom: &ArrayGeometry,
        mobile_geom: &ArrayGeometry,
    ) -> Result<Self> {
        if paths.is_empty() {
            return Err(invalid("a channel needs at least one path"));
        }
        if let Some(p) = paths.iter().find(|p| !(p.gain.re.is_finite() && p.gain.im.is_finite())) {
            return Err(invalid(format!("non-finite path gain {}", p.gain)));
        }
        Ok(Self {
            ap_id,
            mobile_id,
            paths,
            ap_elements: ap_geom.total_elements(),
            mobile_elements: mobile_geom.total_elements(),
        })
    }

    pub fn paths(&self) -> &[PathComponent] {
        &self.paths
    }

    pub fn num_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn push_path(&mut self, path: PathComponent) {
        self.paths.push(path);
    }

    pub fn antenna_gain(&self) -> f64 {
        ((self.ap_elements * self.mobile_elements) as f64 / self.paths.len() as f64).sqrt()
    }

    /// Every path gain multiplied by `c`.
    pub fn scaled(&self, c: Complex64) -> Self {
        let mut out = self.clone();
        for p in &mut out.paths {
            p.gain *= c;
        }
        out
    }

    fn check_dims(&self, ap_geom: &ArrayGeometry, mobile_geom: &ArrayGeometry) -> Result<()> {
        if ap_geom.total_elements() != self.ap_elements
            || mobile_geom.total_elements() != self.mobile_elements
        {
            return Err(invalid(format!(
                "channel built for {}x{} elements, got geometries with {}x{}",
                self.mobile_elements,
                self.ap_elements,
                mobile_geom.total_elements(),
                ap_geom.total_elements()
            )));
        }
        Ok(())
    }

    /// Precompute per-path response vectors for repeated beamformed-gain
    /// evaluations.
    pub fn responses(&self, ap_geom: &ArrayGeometry, mobile_geom: &ArrayGeometry) -> Result<PathResponses> {
        self.check_dims(ap_geom, mobile_geom)?;
        let nu = self.antenna_gain();
        let paths = self
            .paths
            .iter()
            .map(|p| {
                Ok(ResolvedPath {
                    coeff: p.gain * nu,
                    mobile: array_response(mobile_geom, p.aoa)?,
                    ap: array_response(ap_geom, p.aod)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PathResponses {
            paths,
            ap_elements: self.ap_elements,
            mobile_elements: self.mobile_elements,
        })
    }
}

#[derive(Debug, Clone)]
struct ResolvedPath {
    coeff: Complex64,
    mobile: Vec<Complex64>,
    ap: Vec<Complex64>,
}

/// A channel with its array responses evaluated, so that `wᴴ H f` costs
/// `O(S·(JM + JN))` without forming `H`.
#[derive(Debug, Clone)]
pub struct PathResponses {
    paths: Vec<ResolvedPath>,
    ap_elements: usize,
    mobile_elements: usize,
}

impl PathResponses {
    pub fn ap_elements(&self) -> usize {
        self.ap_elements
    }

    pub fn mobile_elements(&self) -> usize {
        self.mobile_elements
    }

    /// `wᴴ H f` for mobile combiner `w` and AP precoder `f`.
    pub fn gain(&self, w: &[Complex64], f: &[Complex64]) -> Complex64 {
        self.paths
            .iter()
            .map(|p| p.coeff * inner(w, &p.mobile) * inner(&p.ap, f))
            .sum()
    }

    /// `aₛᴴ f` for every path.
    pub fn ap_projections(&self, f: &[Complex64]) -> Vec<Complex64> {
        self.paths.iter().map(|p| inner(&p.ap, f)).collect()
    }

    /// `wᴴ uₛ` for every path.
    pub fn mobile_projections(&self, w: &[Complex64]) -> Vec<Complex64> {
        self.paths.iter().map(|p| inner(w, &p.mobile)).collect()
    }

    /// `ν·α̃ₛ` for every path.
    pub fn coefficients(&self) -> Vec<Complex64> {
        self.paths.iter().map(|p| p.coeff).collect()
    }

    /// `H f` as a mobile-side vector.
    pub fn apply(&self, f: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.mobile_elements];
        for p in &self.paths {
            let c = p.coeff * inner(&p.ap, f);
            for (o, u) in out.iter_mut().zip(&p.mobile) {
                *o += c * u;
            }
        }
        out
    }

    /// `Hᴴ w` as an AP-side vector.
    pub fn apply_adjoint(&self, w: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.ap_elements];
        for p in &self.paths {
            let c = p.coeff.conj() * inner(&p.mobile, w);
            for (o, a) in out.iter_mut().zip(&p.ap) {
                *o += c * a;
            }
        }
        out
    }
}

/// `H = Σₛ ν·α̃ₛ·u(θₛ)·aᴴ(φₛ)`, shape `JM × JN`.
pub fn channel_matrix(
    ch: &Channel,
    ap_geom: &ArrayGeometry,
    mobile_geom: &ArrayGeometry,
) -> Result<Array2<Complex64>> {
    ch.check_dims(ap_geom, mobile_geom)?;
    let nu = ch.antenna_gain();
    let mut h = Array2::zeros((mobile_geom.total_elements(), ap_geom.total_elements()));
    for p in ch.paths() {
        let u = array_response(mobile_geom, p.aoa)?;
        let a = array_response(ap_geom, p.aod)?;
        let c = p.gain * nu;
        for (i, ui) in u.iter().enumerate() {
            for (j, aj) in a.iter().enumerate() {
                h[[i, j]] += c * ui * aj.conj();
            }
        }
    }
    Ok(h)
}

/// Linear SNR `ρ·|uᴴ(θ̂) H a(φ̂)|² / σ²` after steering both ends.
pub fn post_training_snr(
    ch: &Channel,
    ap_geom: &ArrayGeometry,
    mobile_geom: &ArrayGeometry,
    aoa: Angle,
    aod: Angle,
    tx_power: f64,
    noise: f64,
) -> Result<f64> {
    if !(noise > 0.0) {
        return Err(invalid("noise power must be positive"));
    }
    let resp = ch.responses(ap_geom, mobile_geom)?;
    let u = array_response(mobile_geom, aoa)?;
    let a = array_response(ap_geom, aod)?;
    Ok(tx_power * resp.gain(&u, &a).norm_sqr() / noise)
}

/// Result of the close-in path-loss model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLoss {
    pub db: f64,
    /// Set when the distance was below the 1 m reference and got clamped.
    pub clamped: bool,
}

pub const LOS_EXPONENT: f64 = 2.0;
pub const NLOS_EXPONENT: f64 = 3.2;

/// Close-in free-space-reference path loss
/// `32.4 + 20·log₁₀(f/1 GHz) + 10·n·log₁₀(d)` with `n = 2.0` (LoS) or `3.2`
/// (NLoS). This stands in for the 3GPP UMi formulas.
pub fn path_loss_db(distance: f64, los: bool, carrier_freq: f64) -> PathLoss {
    let clamped = distance < 1.0;
    if clamped {
        log::warn!("link distance {distance} m below 1 m reference, clamping");
    }
    let d = distance.max(1.0);
    let n = if los { LOS_EXPONENT } else { NLOS_EXPONENT };
    PathLoss {
        db: 32.4 + 20.0 * (carrier_freq / 1e9).log10() + 10.0 * n * d.log10(),
        clamped,
    }
}

/// 3GPP UMi street-canyon LoS probability for a 2-D distance in meters.
pub fn umi_los_probability(distance_2d: f64) -> f64 {
    if distance_2d <= 18.0 {
        1.0
    } else {
        18.0 / distance_2d + (-distance_2d / 36.0).exp() * (1.0 - 18.0 / distance_2d)
    }
}

/// Endpoint positions and array orientations of one AP–mobile link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkGeometry {
    pub ap_pos: [f64; 3],
    pub mobile_pos: [f64; 3],
    /// Azimuth of the AP array broadside (radians).
    pub ap_orientation: f64,
    pub mobile_orientation: f64,
    pub los: bool,
}

impl LinkGeometry {
    pub fn distance(&self) -> f64 {
        let [dx, dy, dz] = diff(self.mobile_pos, self.ap_pos);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    /// Direction in which `to` is seen from `from`, for an array of the given
    /// kind and broadside orientation.
    fn bearing(kind: ArrayKind, from: [f64; 3], to: [f64; 3], orientation: f64) -> Angle {
        let [dx, dy, dz] = diff(to, from);
        let azimuth = dy.atan2(dx) - orientation;
        match kind {
            ArrayKind::Ula => Angle::Linear(azimuth),
            ArrayKind::Upa => {
                let r = (dx * dx + dy * dy + dz * dz).sqrt();
                Angle::Planar {
                    azimuth,
                    elevation: (dz.abs() / r).acos(),
                }
            }
        }
    }

    pub fn los_aoa(&self, mobile_kind: ArrayKind) -> Angle {
        Self::bearing(mobile_kind, self.mobile_pos, self.ap_pos, self.mobile_orientation)
    }

    pub fn los_aod(&self, ap_kind: ArrayKind) -> Angle {
        Self::bearing(ap_kind, self.ap_pos, self.mobile_pos, self.ap_orientation)
    }
}

fn diff(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Knobs for random channel generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub num_nlos_paths: usize,
    /// Extra per-path NLoS attenuation drawn uniformly from `[0, max]` dB.
    pub nlos_extra_attenuation_db: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            num_nlos_paths: 3,
            nlos_extra_attenuation_db: 10.0,
        }
    }
}

fn random_direction<R: Rng + ?Sized>(kind: ArrayKind, rng: &mut R) -> Angle {
    match kind {
        ArrayKind::Ula => Angle::Linear(rng.random_range(0.0..2.0 * PI)),
        ArrayKind::Upa => Angle::Planar {
            azimuth: rng.random_range(0.0..2.0 * PI),
            elevation: rng.random_range(0.0..PI / 2.0),
        },
    }
}

/// Draw a channel for one link.
///
/// LoS links get a geometric LoS path first; all NLoS paths have uniform
/// AoA, AoD and phase.
pub fn sample_channel<R: Rng + ?Sized>(
    ap_id: usize,
    mobile_id: usize,
    link: &LinkGeometry,
    ap_geom: &ArrayGeometry,
    mobile_geom: &ArrayGeometry,
    params: &ChannelParams,
    rng: &mut R,
) -> Result<Channel> {
    if params.num_nlos_paths == 0 && !link.los {
        return Err(invalid("a blocked link needs at least one NLoS path"));
    }
    let fc = ap_geom.carrier_freq;
    let dist = link.distance();
    let mut paths = Vec::with_capacity(params.num_nlos_paths + 1);
    if link.los {
        let amp = 10f64.powf(-path_loss_db(dist, true, fc).db / 20.0);
        let phase = -2.0 * PI * (dist / ap_geom.wavelength()).fract();
        paths.push(PathComponent {
            gain: Complex64::from_polar(amp, phase),
            aoa: link.los_aoa(mobile_geom.kind),
            aod: link.los_aod(ap_geom.kind),
            is_los: true,
        });
    }
    let nlos_db = path_loss_db(dist, false, fc).db;
    for _ in 0..params.num_nlos_paths {
        let aoa = random_direction(mobile_geom.kind, rng);
        let aod = random_direction(ap_geom.kind, rng);
        let phase = rng.random_range(0.0..2.0 * PI);
        let extra = rng.random_range(0.0..=params.nlos_extra_attenuation_db);
        let amp = 10f64.powf(-(nlos_db + extra) / 20.0);
        paths.push(PathComponent {
            gain: Complex64::from_polar(amp, phase),
            aoa,
            aod,
            is_los: false,
        });
    }
    Channel::new(ap_id, mobile_id, paths, ap_geom, mobile_geom)
}

/// Path lifetime under blockage rate `δ` (exponential with mean `1/δ`).
pub fn sample_path_duration<R: Rng + ?Sized>(blockage_rate: f64, rng: &mut R) -> Result<f64> {
    let exp = Exp::new(blockage_rate)
        .ok()
        .filter(|_| blockage_rate > 0.0)
        .ok_or_else(|| invalid(format!("blockage rate must be positive, got {blockage_rate}")))?;
    Ok(exp.sample(rng))
}
