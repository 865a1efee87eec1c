//! Beam direction estimation from an observation matrix `Y`.
//!
//! * MP picks the strongest swept beam pair.
//! * ML fits a single-path model for every AP and returns the AoA/AoD/AP
//!   maximizing `|Tr(Zᴴ Y)|² / ‖Z‖²_F`.
//! * LML estimates the AoA alone from the receiver's own combiners,
//!   maximizing `‖bᴴ Y‖² / ‖b‖²`.
//!
//! ML and LML statistics are evaluated on a sin-space grid with FFTs: the
//! array response of a uniform array is a (Kronecker product of) DFT
//! vector(s), so `uᴴ(θ) v` for all grid angles is a zero-padded FFT of `v`.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use statrs::function::erf::erfc;

use crate::arrays::{array_response, inner, Angle, ArrayGeometry, PhaseGrid};
use crate::codebooks::Codebook;
use crate::error::{invalid, Error, Result};

/// Default FFT size.
pub const DEFAULT_FFT_SIZE: usize = 64;

/// Denominator values below this fraction of the largest one are treated as
/// nulls of the training codebook and get a zero statistic.
const NULL_FLOOR: f64 = 1e-12;

/// Evaluates `u(g)ᴴ v` for every point `g` of a [`PhaseGrid`].
#[derive(Clone)]
pub struct GridProjector {
    grid: PhaseGrid,
    fft: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for GridProjector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridProjector").field("grid", &self.grid).finish()
    }
}

impl GridProjector {
    pub fn new(geom: &ArrayGeometry, fft_size: usize) -> Result<Self> {
        if !fft_size.is_power_of_two() {
            return Err(invalid(format!("FFT size {fft_size} is not a power of two")));
        }
        let grid = PhaseGrid::new(geom, fft_size)?;
        let needed = if grid.is_planar() {
            geom.num_subarrays.max(geom.elements_per_subarray)
        } else {
            geom.total_elements()
        };
        if fft_size < needed {
            return Err(invalid(format!(
                "FFT size {fft_size} is smaller than the {needed} array elements it must cover"
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Ok(Self {
            grid,
            fft,
            scale: 1.0 / (geom.total_elements() as f64).sqrt(),
        })
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `u(g)ᴴ v` for every grid point, in grid index order.
    pub fn project(&self, v: &[Complex64]) -> Vec<Complex64> {
        let c = self.grid.size();
        let geom = self.grid.geometry();
        if self.grid.is_planar() {
            let (j_n, m_n) = (geom.num_subarrays, geom.elements_per_subarray);
            let mut buf = vec![Complex64::new(0.0, 0.0); c * c];
            for j in 0..j_n {
                buf[j * c..j * c + m_n].copy_from_slice(&v[j * m_n..(j + 1) * m_n]);
            }
            // rows carry the element index; only the first J rows are nonzero
            for row in buf.chunks_exact_mut(c).take(j_n) {
                self.fft.process(row);
            }
            let mut col = vec![Complex64::new(0.0, 0.0); c];
            for i2 in 0..c {
                for (i1, x) in col.iter_mut().enumerate() {
                    *x = buf[i1 * c + i2];
                }
                self.fft.process(&mut col);
                for (i1, x) in col.iter().enumerate() {
                    buf[i1 * c + i2] = x * self.scale;
                }
            }
            buf
        } else {
            let mut buf = vec![Complex64::new(0.0, 0.0); c];
            buf[..v.len()].copy_from_slice(v);
            self.fft.process(&mut buf);
            buf.iter_mut().for_each(|x| *x *= self.scale);
            buf
        }
    }

    /// `Σᵢ |u(g)ᴴ bᵢ|²` over a set of beams: the codebook's total gain
    /// toward each grid direction.
    pub fn gain_profile(&self, codebook: &Codebook) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for b in &codebook.beams {
            for (o, x) in out.iter_mut().zip(self.project(&b.weights)) {
                *o += x.norm_sqr();
            }
        }
        out
    }
}

/// Decision statistic over the sin-space grid.
///
/// `values[aoa_index * aod_points + aod_index]`; LML grids have
/// `aod_points == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatisticGrid {
    pub values: Vec<f64>,
    pub aoa_points: usize,
    pub aod_points: usize,
    pub fft_size: usize,
}

impl StatisticGrid {
    pub fn get(&self, aoa: usize, aod: usize) -> f64 {
        self.values[aoa * self.aod_points + aod]
    }

    /// First index of the maximum (smallest index wins ties).
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = (0, self.values[0]);
        for (i, &v) in self.values.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub aoa: Angle,
    pub aoa_index: usize,
    /// ML and MP only.
    pub aod: Option<Angle>,
    pub aod_index: Option<usize>,
    /// AP index, ML only.
    pub ap: Option<usize>,
    /// Fitted path gain `α̂`, ML only.
    pub gain: Option<Complex64>,
    /// Statistic at the optimum.
    pub statistic: f64,
    /// Set when the statistic is identically zero (dead link); the angles then
    /// default to grid index 0.
    pub degenerate: bool,
}

fn check_shape(y: ArrayView2<Complex64>, rows: usize, cols: usize) -> Result<()> {
    if y.dim() != (rows, cols) {
        return Err(invalid(format!(
            "observation matrix is {:?}, codebooks imply {rows}x{cols}",
            y.dim()
        )));
    }
    Ok(())
}

fn check_codebook(cb: &Codebook, geom: &ArrayGeometry) -> Result<()> {
    if cb.beams.iter().any(|b| b.weights.len() != geom.total_elements()) {
        return Err(invalid("codebook beams do not match the array size"));
    }
    Ok(())
}

/// `(p̂, q̂)` maximizing `|y_{p,q}|²`; ties go to the lexicographically
/// smallest pair.
pub fn estimate_mp(y: ArrayView2<Complex64>) -> (usize, usize) {
    let mut best = ((0, 0), f64::NEG_INFINITY);
    for ((p, q), v) in y.indexed_iter() {
        let m = v.norm_sqr();
        if m > best.1 {
            best = ((p, q), m);
        }
    }
    best.0
}

/// AoA-only estimator using the receiver's own combiners.
#[derive(Debug, Clone)]
pub struct LmlEstimator {
    codebook: Codebook,
    projector: GridProjector,
    profile: Vec<f64>,
    floor: f64,
}

impl LmlEstimator {
    pub fn new(codebook: &Codebook, geom: &ArrayGeometry, fft_size: usize) -> Result<Self> {
        check_codebook(codebook, geom)?;
        let projector = GridProjector::new(geom, fft_size)?;
        let profile = projector.gain_profile(codebook);
        let floor = NULL_FLOOR * profile.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            codebook: codebook.clone(),
            projector,
            profile,
            floor,
        })
    }

    pub fn grid(&self) -> &PhaseGrid {
        self.projector.grid()
    }

    /// `‖b(θ)ᴴ Y‖² / ‖b(θ)‖²` on the grid, computed as
    /// `Σ_q |uᴴ λ_q|²` with `λ_q = Σ_p w_p y_{p,q}`.
    pub fn statistic(&self, y: ArrayView2<Complex64>) -> Result<StatisticGrid> {
        let (p_n, q_n) = y.dim();
        check_shape(y, self.codebook.size(), q_n)?;
        let n = self.codebook.beams[0].weights.len();
        let mut num = vec![0.0; self.projector.len()];
        let mut lambda = vec![Complex64::new(0.0, 0.0); n];
        for q in 0..q_n {
            lambda.iter_mut().for_each(|x| *x = Complex64::new(0.0, 0.0));
            for p in 0..p_n {
                let ypq = y[[p, q]];
                for (l, w) in lambda.iter_mut().zip(self.codebook.weights(p)) {
                    *l += w * ypq;
                }
            }
            for (o, x) in num.iter_mut().zip(self.projector.project(&lambda)) {
                *o += x.norm_sqr();
            }
        }
        let values = num
            .iter()
            .zip(&self.profile)
            .map(|(&n, &d)| if d > self.floor { n / d } else { 0.0 })
            .collect();
        Ok(StatisticGrid {
            values,
            aoa_points: self.projector.len(),
            aod_points: 1,
            fft_size: self.projector.grid().size(),
        })
    }

    pub fn estimate(&self, y: ArrayView2<Complex64>) -> Result<Estimate> {
        let grid = self.statistic(y)?;
        let (idx, value) = grid.argmax();
        let degenerate = !(value > 0.0);
        Ok(Estimate {
            aoa: self.grid().angle(idx),
            aoa_index: idx,
            aod: None,
            aod_index: None,
            ap: None,
            gain: None,
            statistic: value,
            degenerate,
        })
    }

    /// Least-squares single-path amplitude `bᴴ y / ‖b‖²` at grid point `idx`
    /// for a single-column observation (uplink use).
    pub fn fitted_gain(&self, y: &[Complex64], idx: usize) -> Complex64 {
        let u = self.grid().response(idx);
        let b: Vec<Complex64> = self.codebook.beams.iter().map(|w| inner(&w.weights, &u)).collect();
        let den: f64 = b.iter().map(|x| x.norm_sqr()).sum();
        if den > 0.0 {
            inner(&b, y) / den
        } else {
            Complex64::new(0.0, 0.0)
        }
    }
}

/// Joint AoA/AoD/AP estimator for a mobile that knows every AP's codebook.
#[derive(Debug, Clone)]
pub struct MlEstimator {
    mobile: LmlEstimator,
    aps: Vec<ApSide>,
}

#[derive(Debug, Clone)]
struct ApSide {
    codebook: Codebook,
    projector: GridProjector,
    profile: Vec<f64>,
}

impl MlEstimator {
    pub fn new(
        ap_codebooks: &[(&Codebook, &ArrayGeometry)],
        mobile_codebook: &Codebook,
        mobile_geom: &ArrayGeometry,
        fft_size: usize,
    ) -> Result<Self> {
        if ap_codebooks.is_empty() {
            return Err(invalid("ML estimation needs at least one AP codebook"));
        }
        let mobile = LmlEstimator::new(mobile_codebook, mobile_geom, fft_size)?;
        let aps = ap_codebooks
            .iter()
            .map(|&(cb, geom)| {
                check_codebook(cb, geom)?;
                let projector = GridProjector::new(geom, fft_size)?;
                let profile = projector.gain_profile(cb);
                Ok(ApSide {
                    codebook: cb.clone(),
                    projector,
                    profile,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mobile, aps })
    }

    pub fn num_aps(&self) -> usize {
        self.aps.len()
    }

    pub fn aoa_grid(&self) -> &PhaseGrid {
        self.mobile.grid()
    }

    pub fn aod_grid(&self, ap: usize) -> &PhaseGrid {
        self.aps[ap].projector.grid()
    }

    /// `Tr(Zᴴ Y) = uᴴ(θ) A a(φ)` with `A = Σ_{p,q} w_p f_qᴴ y_{p,q}`, for every
    /// grid pair, returned as `(numerator, ‖Z‖²)` grids in the same layout as
    /// [`StatisticGrid`].
    fn numerator(&self, y: ArrayView2<Complex64>, ap: usize) -> Result<Vec<Complex64>> {
        let side = &self.aps[ap];
        let (p_n, q_n) = y.dim();
        check_shape(y, self.mobile.codebook.size(), side.codebook.size())?;
        let jn = side.codebook.beams[0].weights.len();
        let jm = self.mobile.codebook.beams[0].weights.len();

        // r_p[n] = Σ_q y_{p,q} conj(f_q[n])
        let mut r = Array2::<Complex64>::zeros((p_n, jn));
        for p in 0..p_n {
            for q in 0..q_n {
                let ypq = y[[p, q]];
                for (x, f) in r.row_mut(p).iter_mut().zip(side.codebook.weights(q)) {
                    *x += ypq * f.conj();
                }
            }
        }
        // A[m][n] = Σ_p w_p[m] r_p[n]
        let mut a = Array2::<Complex64>::zeros((jm, jn));
        for p in 0..p_n {
            for (m, w) in self.mobile.codebook.weights(p).iter().enumerate() {
                if w.norm_sqr() == 0.0 {
                    continue;
                }
                for (x, rv) in a.row_mut(m).iter_mut().zip(r.row(p)) {
                    *x += w * rv;
                }
            }
        }
        // B[m][g] = Σ_n A[m][n] a_n(g) = conj(a(g)ᴴ conj(A[m,:]))
        let aod_points = side.projector.len();
        let mut b = Array2::<Complex64>::zeros((aod_points, jm));
        let mut row = vec![Complex64::new(0.0, 0.0); jn];
        for m in 0..jm {
            for (x, v) in row.iter_mut().zip(a.row(m)) {
                *x = v.conj();
            }
            for (g, v) in side.projector.project(&row).into_iter().enumerate() {
                b[[g, m]] = v.conj();
            }
        }
        let aoa_points = self.mobile.projector.len();
        let mut out = vec![Complex64::new(0.0, 0.0); aoa_points * aod_points];
        for g in 0..aod_points {
            let col = b.row(g).to_vec();
            for (t, v) in self.mobile.projector.project(&col).into_iter().enumerate() {
                out[t * aod_points + g] = v;
            }
        }
        Ok(out)
    }

    /// `|Tr(Zᴴ Y)|² / ‖Z‖²_F` on the AoA × AoD grid for AP `ap`.
    ///
    /// `‖Z‖²_F` factors into the mobile and AP codebook gain profiles, both
    /// precomputed at construction.
    pub fn statistic(&self, y: ArrayView2<Complex64>, ap: usize) -> Result<StatisticGrid> {
        let side = self
            .aps
            .get(ap)
            .ok_or_else(|| invalid(format!("no AP with index {ap}")))?;
        let num = self.numerator(y, ap)?;
        let aod_points = side.projector.len();
        let max_den = self.mobile.profile.iter().cloned().fold(0.0, f64::max)
            * side.profile.iter().cloned().fold(0.0, f64::max);
        let floor = NULL_FLOOR * max_den;
        let values = num
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let den = self.mobile.profile[i / aod_points] * side.profile[i % aod_points];
                if den > floor {
                    x.norm_sqr() / den
                } else {
                    0.0
                }
            })
            .collect();
        Ok(StatisticGrid {
            values,
            aoa_points: self.mobile.projector.len(),
            aod_points,
            fft_size: self.mobile.projector.grid().size(),
        })
    }

    /// Maximize over APs and the grid; ties go to the smallest AP, then the
    /// smallest grid index.
    pub fn estimate(&self, y: ArrayView2<Complex64>) -> Result<Estimate> {
        let mut best: Option<(usize, usize, f64)> = None;
        for ap in 0..self.aps.len() {
            let grid = self.statistic(y, ap)?;
            let (idx, v) = grid.argmax();
            if best.is_none_or(|b| v > b.2) {
                best = Some((ap, idx, v));
            }
        }
        let (ap, idx, value) = best.expect("at least one AP");
        let aod_points = self.aps[ap].projector.len();
        let (ti, gi) = (idx / aod_points, idx % aod_points);
        let u = self.aoa_grid().response(ti);
        let a = self.aod_grid(ap).response(gi);
        let gain = fitted_ml_gain(y, &self.mobile.codebook, &self.aps[ap].codebook, &u, &a);
        Ok(Estimate {
            aoa: self.aoa_grid().angle(ti),
            aoa_index: ti,
            aod: Some(self.aod_grid(ap).angle(gi)),
            aod_index: Some(gi),
            ap: Some(ap),
            gain: Some(gain),
            statistic: value,
            degenerate: !(value > 0.0),
        })
    }
}

/// `z_{p,q} = (w_pᴴ u)(aᴴ f_q)` for explicit response vectors.
pub fn beamforming_gain_matrix(
    mobile_codebook: &Codebook,
    ap_codebook: &Codebook,
    u: &[Complex64],
    a: &[Complex64],
) -> Array2<Complex64> {
    let bw: Vec<Complex64> = mobile_codebook.beams.iter().map(|w| inner(&w.weights, u)).collect();
    let bf: Vec<Complex64> = ap_codebook.beams.iter().map(|f| inner(a, &f.weights)).collect();
    Array2::from_shape_fn((bw.len(), bf.len()), |(p, q)| bw[p] * bf[q])
}

/// `α̂ = Tr(Zᴴ Y) / ‖Z‖²_F`.
pub fn fitted_ml_gain(
    y: ArrayView2<Complex64>,
    mobile_codebook: &Codebook,
    ap_codebook: &Codebook,
    u: &[Complex64],
    a: &[Complex64],
) -> Complex64 {
    let z = beamforming_gain_matrix(mobile_codebook, ap_codebook, u, a);
    let num: Complex64 = z.iter().zip(y.iter()).map(|(z, y)| z.conj() * y).sum();
    let den: f64 = z.iter().map(|z| z.norm_sqr()).sum();
    if den > 0.0 {
        num / den
    } else {
        Complex64::new(0.0, 0.0)
    }
}

pub fn ml_statistic(
    y: ArrayView2<Complex64>,
    ap_codebook: &Codebook,
    ap_geom: &ArrayGeometry,
    mobile_codebook: &Codebook,
    mobile_geom: &ArrayGeometry,
    fft_size: usize,
) -> Result<StatisticGrid> {
    MlEstimator::new(&[(ap_codebook, ap_geom)], mobile_codebook, mobile_geom, fft_size)?.statistic(y, 0)
}

pub fn estimate_ml(
    y: ArrayView2<Complex64>,
    ap_codebooks: &[(&Codebook, &ArrayGeometry)],
    mobile_codebook: &Codebook,
    mobile_geom: &ArrayGeometry,
    fft_size: usize,
) -> Result<Estimate> {
    MlEstimator::new(ap_codebooks, mobile_codebook, mobile_geom, fft_size)?.estimate(y)
}

pub fn lml_statistic(
    y: ArrayView2<Complex64>,
    mobile_codebook: &Codebook,
    mobile_geom: &ArrayGeometry,
    fft_size: usize,
) -> Result<StatisticGrid> {
    LmlEstimator::new(mobile_codebook, mobile_geom, fft_size)?.statistic(y)
}

pub fn estimate_lml(
    y: ArrayView2<Complex64>,
    mobile_codebook: &Codebook,
    mobile_geom: &ArrayGeometry,
    fft_size: usize,
) -> Result<Estimate> {
    LmlEstimator::new(mobile_codebook, mobile_geom, fft_size)?.estimate(y)
}

/// Training dimensions entering the normalized decision statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingDims {
    pub repetitions: usize,
    /// Receive beams.
    pub p: usize,
    /// Transmit beams.
    pub q: usize,
    /// Active AP training antennas.
    pub n_bar: usize,
    /// Active mobile training antennas.
    pub m_bar: usize,
}

impl TrainingDims {
    pub fn pilots(&self) -> usize {
        self.repetitions * self.p * self.q
    }

    fn check_sweep(&self) -> Result<()> {
        if self.p < self.m_bar || self.q < self.n_bar {
            return Err(Error::Precondition(format!(
                "sweeping needs P >= M̄ and Q >= N̄, got P={}, Q={}, M̄={}, N̄={}",
                self.p, self.q, self.m_bar, self.n_bar
            )));
        }
        Ok(())
    }

    /// `ω = √(I·N̄·M̄/(P·Q)) / σ_n`: scales `Tr(Zᴴ Y)` to unit noise variance.
    pub fn normalizer(&self, noise: f64) -> f64 {
        ((self.repetitions * self.n_bar * self.m_bar) as f64 / (self.p * self.q) as f64).sqrt() / noise.sqrt()
    }
}

/// Mean of the normalized statistic `λ(ψ)`:
/// `√(Ω/(N̄M̄))·Σ √γ_{s,l}·G(ψ, ψ_{s,l})`.
///
/// Each term is `(γ, G)`; fold the phase of the path gain into `G` to get the
/// complex mean of a specific realization.
pub fn decision_statistic_mean(terms: &[(f64, Complex64)], dims: TrainingDims) -> Result<Complex64> {
    dims.check_sweep()?;
    let scale = (dims.pilots() as f64 / (dims.n_bar * dims.m_bar) as f64).sqrt();
    Ok(terms.iter().map(|&(gamma, g)| g * gamma.sqrt()).sum::<Complex64>() * scale)
}

/// `λ(ψ) = ω·Tr(Zᴴ(θ, φ) Y)` for one hypothesis.
#[allow(clippy::too_many_arguments)]
pub fn decision_statistic(
    y: ArrayView2<Complex64>,
    ap_codebook: &Codebook,
    ap_geom: &ArrayGeometry,
    mobile_codebook: &Codebook,
    mobile_geom: &ArrayGeometry,
    aoa: Angle,
    aod: Angle,
    dims: TrainingDims,
    noise: f64,
) -> Result<Complex64> {
    dims.check_sweep()?;
    let u = array_response(mobile_geom, aoa)?;
    let a = array_response(ap_geom, aod)?;
    let z = beamforming_gain_matrix(mobile_codebook, ap_codebook, &u, &a);
    check_shape(y, z.nrows(), z.ncols())?;
    let tr: Complex64 = z.iter().zip(y.iter()).map(|(z, y)| z.conj() * y).sum();
    Ok(tr * dims.normalizer(noise))
}

/// Standard normal upper tail `Q(x)`.
pub fn normal_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Approximate probability that ML locks onto a weaker path of SNR `γ_s`
/// instead of the strongest (`γ_max`):
/// `Q((√γ_max − √γ_s) / √(N·M·J²/Ω))`.
pub fn misalignment_probability(gamma_max: f64, gamma_s: f64, pilots: f64, n: usize, m: usize, j: usize) -> f64 {
    let spread = ((n * m * j * j) as f64 / pilots).sqrt();
    normal_tail((gamma_max.sqrt() - gamma_s.sqrt()) / spread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebooks::{build_codebook, CodebookKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FC: f64 = 28e9;

    fn random_y(rng: &mut ChaCha8Rng, p: usize, q: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((p, q), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    /// Straight evaluation of the ML objective from explicit `Z` matrices.
    fn direct_ml(y: &Array2<Complex64>, mob: &Codebook, mg: &ArrayGeometry, ap: &Codebook, ag: &ArrayGeometry, c: usize) -> Vec<f64> {
        let mgrid = PhaseGrid::new(mg, c).unwrap();
        let agrid = PhaseGrid::new(ag, c).unwrap();
        let mut raw = Vec::new();
        for t in 0..mgrid.len() {
            let u = mgrid.response(t);
            for g in 0..agrid.len() {
                let a = agrid.response(g);
                let z = beamforming_gain_matrix(mob, ap, &u, &a);
                let num: Complex64 = z.iter().zip(y.iter()).map(|(z, y)| z.conj() * y).sum();
                let den: f64 = z.iter().map(|z| z.norm_sqr()).sum();
                raw.push((num.norm_sqr(), den));
            }
        }
        let max_den = raw.iter().map(|r| r.1).fold(0.0, f64::max);
        raw.iter().map(|&(n, d)| if d > NULL_FLOOR * max_den { n / d } else { 0.0 }).collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().cloned().fold(0.0, f64::max);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn ml_fft_matches_direct_ula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mg = ArrayGeometry::ula(2, 4, FC).unwrap();
        let ag = ArrayGeometry::ula(2, 8, FC).unwrap();
        for kind in CodebookKind::ALL {
            let mob = build_codebook(kind, &mg, 6, &mut rng).unwrap();
            let ap = build_codebook(kind, &ag, 10, &mut rng).unwrap();
            let y = random_y(&mut rng, 6, 10);
            let fft = ml_statistic(y.view(), &ap, &ag, &mob, &mg, 32).unwrap();
            let direct = direct_ml(&y, &mob, &mg, &ap, &ag, 32);
            assert!(max_rel_err(&fft.values, &direct) < 1e-9, "{kind}");
        }
    }

    #[test]
    fn ml_fft_matches_direct_upa() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mg = ArrayGeometry::upa(2, 3, FC).unwrap();
        let ag = ArrayGeometry::upa(2, 4, FC).unwrap();
        let mob = build_codebook(CodebookKind::Random, &mg, 5, &mut rng).unwrap();
        let ap = build_codebook(CodebookKind::FullSweep, &ag, 8, &mut rng).unwrap();
        let y = random_y(&mut rng, 5, 8);
        let fft = ml_statistic(y.view(), &ap, &ag, &mob, &mg, 4).unwrap();
        assert_eq!(fft.values.len(), 16 * 16);
        let direct = direct_ml(&y, &mob, &mg, &ap, &ag, 4);
        assert!(max_rel_err(&fft.values, &direct) < 1e-9);
    }

    #[test]
    fn lml_fft_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for geom in [ArrayGeometry::ula(2, 8, FC).unwrap(), ArrayGeometry::upa(2, 4, FC).unwrap()] {
            let cb = build_codebook(CodebookKind::Cross, &geom, 7, &mut rng).unwrap();
            let y = random_y(&mut rng, 7, 3);
            let grid = PhaseGrid::new(&geom, 16).unwrap();
            let direct: Vec<f64> = (0..grid.len())
                .map(|t| {
                    let u = grid.response(t);
                    let b: Vec<Complex64> = cb.beams.iter().map(|w| inner(&w.weights, &u)).collect();
                    let num: f64 = (0..3)
                        .map(|q| b.iter().enumerate().map(|(p, bp)| bp.conj() * y[[p, q]]).sum::<Complex64>().norm_sqr())
                        .sum();
                    num / b.iter().map(|x| x.norm_sqr()).sum::<f64>()
                })
                .collect();
            let fft = lml_statistic(y.view(), &cb, &geom, 16).unwrap();
            assert!(max_rel_err(&fft.values, &direct) < 1e-9);
        }
    }

    #[test]
    fn fft_size_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = ArrayGeometry::ula(2, 16, FC).unwrap();
        let cb = build_codebook(CodebookKind::FullSweep, &g, 32, &mut rng).unwrap();
        let y = Array2::zeros((32, 32));
        assert!(ml_statistic(y.view(), &cb, &g, &cb, &g, 48).is_err());
        assert!(ml_statistic(y.view(), &cb, &g, &cb, &g, 16).is_err());
        assert!(lml_statistic(y.view(), &cb, &g, 100).is_err());
        let bad = Array2::zeros((31, 32));
        assert!(lml_statistic(bad.view(), &cb, &g, 64).is_err());
    }

    #[test]
    fn zero_observation_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = ArrayGeometry::ula(2, 8, FC).unwrap();
        let cb = build_codebook(CodebookKind::Adaptive, &g, 8, &mut rng).unwrap();
        let y = Array2::zeros((8, 8));
        let grid = ml_statistic(y.view(), &cb, &g, &cb, &g, 64).unwrap();
        assert!(grid.values.iter().all(|&v| v == 0.0));
        let e = estimate_lml(y.view(), &cb, &g, 64).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.aoa_index, 0);
        assert_eq!(e.statistic, 0.0);
        let e = estimate_ml(y.view(), &[(&cb, &g)], &cb, &g, 64).unwrap();
        assert!(e.degenerate);
        assert_eq!((e.ap, e.aoa_index, e.aod_index), (Some(0), 0, Some(0)));
    }

    #[test]
    fn mp_picks_max_and_breaks_ties_low() {
        let mut y = Array2::from_elem((4, 5), Complex64::new(1.0, 0.0));
        assert_eq!(estimate_mp(y.view()), (0, 0));
        y[[2, 3]] = Complex64::new(0.0, 2.0);
        assert_eq!(estimate_mp(y.view()), (2, 3));
        y[[1, 4]] = Complex64::new(-2.0, 0.0);
        assert_eq!(estimate_mp(y.view()), (1, 4));
    }

    #[test]
    fn ml_gain_is_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mg = ArrayGeometry::ula(2, 4, FC).unwrap();
        let ag = ArrayGeometry::ula(2, 4, FC).unwrap();
        let mob = build_codebook(CodebookKind::FullSweep, &mg, 8, &mut rng).unwrap();
        let ap = build_codebook(CodebookKind::FullSweep, &ag, 8, &mut rng).unwrap();
        let est = MlEstimator::new(&[(&ap, &ag)], &mob, &mg, 32).unwrap();
        let u = est.aoa_grid().response(9);
        let a = est.aod_grid(0).response(22);
        let c = Complex64::new(-0.4, 1.7);
        let y = beamforming_gain_matrix(&mob, &ap, &u, &a).mapv(|z| z * c);
        let e = est.estimate(y.view()).unwrap();
        assert_eq!((e.aoa_index, e.aod_index), (9, Some(22)));
        assert!((e.gain.unwrap() - c).norm() < 1e-12);
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = ArrayGeometry::ula(2, 8, FC).unwrap();
        let cb = build_codebook(CodebookKind::Random, &g, 12, &mut rng).unwrap();
        for _ in 0..10 {
            let y = random_y(&mut rng, 12, 12);
            let c = Complex64::from_polar(rng.random_range(0.01..100.0), rng.random_range(0.0..6.0));
            let yc = y.mapv(|x| x * c);
            let a = estimate_ml(y.view(), &[(&cb, &g)], &cb, &g, 64).unwrap();
            let b = estimate_ml(yc.view(), &[(&cb, &g)], &cb, &g, 64).unwrap();
            assert_eq!((a.aoa_index, a.aod_index), (b.aoa_index, b.aod_index));
            let a = estimate_lml(y.view(), &cb, &g, 64).unwrap();
            let b = estimate_lml(yc.view(), &cb, &g, 64).unwrap();
            assert_eq!(a.aoa_index, b.aoa_index);
            assert_eq!(estimate_mp(y.view()), estimate_mp(yc.view()));
        }
    }

    #[test]
    fn single_column_lml_matches_ml_over_aoa() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mg = ArrayGeometry::ula(2, 8, FC).unwrap();
        let ag = ArrayGeometry::ula(1, 4, FC).unwrap();
        let mob = build_codebook(CodebookKind::Adaptive, &mg, 16, &mut rng).unwrap();
        let ap = build_codebook(CodebookKind::FullSweep, &ag, 1, &mut rng).unwrap();
        let y = random_y(&mut rng, 16, 1);
        let lml = lml_statistic(y.view(), &mob, &mg, 64).unwrap();
        let ml = ml_statistic(y.view(), &ap, &ag, &mob, &mg, 64).unwrap();
        // with one transmit beam, ML over AoD at a fixed AoD is the LML
        // periodogram up to a positive AoD-only factor
        let aod = 3;
        let ratio = ml.get(0, aod) / lml.values[0];
        for t in 0..64 {
            assert!((ml.get(t, aod) - ratio * lml.values[t]).abs() < 1e-9 * ml.get(t, aod).max(1.0));
        }
        let ml_best = (0..64).max_by(|&a, &b| ml.get(a, aod).total_cmp(&ml.get(b, aod))).unwrap();
        assert_eq!(ml_best, lml.argmax().0);
    }

    #[test]
    fn two_aps_pick_the_stronger() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mg = ArrayGeometry::ula(2, 4, FC).unwrap();
        let ag = ArrayGeometry::ula(2, 4, FC).unwrap();
        let mob = build_codebook(CodebookKind::FullSweep, &mg, 8, &mut rng).unwrap();
        let ap1 = build_codebook(CodebookKind::Random, &ag, 8, &mut rng).unwrap();
        let ap2 = build_codebook(CodebookKind::Random, &ag, 8, &mut rng).unwrap();
        let est = MlEstimator::new(&[(&ap1, &ag), (&ap2, &ag)], &mob, &mg, 32).unwrap();
        let z1 = beamforming_gain_matrix(&mob, &ap1, &est.aoa_grid().response(3), &est.aod_grid(0).response(11));
        let z2 = beamforming_gain_matrix(&mob, &ap2, &est.aoa_grid().response(20), &est.aod_grid(1).response(5));
        let y = &z1 + &z2.mapv(|z| z * 10.0);
        let e = est.estimate(y.view()).unwrap();
        assert_eq!(e.ap, Some(1));
        assert_eq!((e.aoa_index, e.aod_index), (20, Some(5)));
    }

    #[test]
    fn statistic_mean_and_tail() {
        let dims = TrainingDims { repetitions: 1, p: 32, q: 32, n_bar: 32, m_bar: 32 };
        let m = decision_statistic_mean(&[(4.0, Complex64::new(1.0, 0.0))], dims).unwrap();
        assert!((m - Complex64::new(2.0, 0.0)).norm() < 1e-12);
        let half = TrainingDims { repetitions: 2, p: 32, q: 32, n_bar: 16, m_bar: 32 };
        let m2 = decision_statistic_mean(&[(4.0, Complex64::new(1.0, 0.0))], half).unwrap();
        let other = TrainingDims { repetitions: 1, p: 64, q: 32, n_bar: 16, m_bar: 32 };
        let m3 = decision_statistic_mean(&[(4.0, Complex64::new(1.0, 0.0))], other).unwrap();
        assert!((m2 - m3).norm() < 1e-12);
        let bad = TrainingDims { repetitions: 1, p: 16, q: 32, n_bar: 32, m_bar: 32 };
        assert!(matches!(decision_statistic_mean(&[], bad), Err(Error::Precondition(_))));

        assert!((misalignment_probability(10.0, 10.0, 1024.0, 16, 16, 2) - 0.5).abs() < 1e-12);
        assert!(misalignment_probability(10.0, 5.0, 1e9, 16, 16, 2) < 1e-12);
        let q1 = normal_tail(1.0);
        assert!((q1 - 0.158_655_253_931_457).abs() < 1e-9, "{q1}");
    }
}
