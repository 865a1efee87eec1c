//! Uniform array geometry and response vectors.
//!
//! Every array is a set of `J` identical sub-arrays. The response to a
//! direction is the Kronecker product `e(ϑ₁; J) ⊗ e(ϑ₂; M)` of two DFT
//! vectors, where the phases `(ϑ₁, ϑ₂)` depend on the geometry. Downstream
//! code (codebooks, estimator grids) works directly in that phase domain.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayKind {
    Ula,
    Upa,
}

/// A direction of arrival or departure.
///
/// ULA directions are a single angle measured from array broadside; UPA
/// directions are an azimuth and an elevation measured from the array normal,
/// with elevation in `[0, π/2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Angle {
    Linear(f64),
    Planar { azimuth: f64, elevation: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    pub kind: ArrayKind,
    pub num_subarrays: usize,
    pub elements_per_subarray: usize,
    /// Element spacing inside a sub-array (meters).
    pub intra_spacing: f64,
    /// Distance between the first elements of adjacent sub-arrays (meters).
    pub inter_spacing: f64,
    pub carrier_freq: f64,
}

impl ArrayGeometry {
    pub fn new(
        kind: ArrayKind,
        num_subarrays: usize,
        elements_per_subarray: usize,
        intra_spacing: f64,
        inter_spacing: f64,
        carrier_freq: f64,
    ) -> Result<Self> {
        if num_subarrays == 0 || elements_per_subarray == 0 {
            return Err(invalid("array dimensions must be positive"));
        }
        if !(intra_spacing > 0.0 && inter_spacing > 0.0 && carrier_freq > 0.0) {
            return Err(invalid("spacings and carrier frequency must be positive"));
        }
        if intra_spacing > inter_spacing * (1.0 + 1e-12) {
            return Err(invalid(format!(
                "intra-subarray spacing {intra_spacing} exceeds inter-subarray spacing {inter_spacing}"
            )));
        }
        Ok(Self {
            kind,
            num_subarrays,
            elements_per_subarray,
            intra_spacing,
            inter_spacing,
            carrier_freq,
        })
    }

    /// Half-wavelength ULA whose sub-arrays abut, so the whole array is one
    /// contiguous line of `J·M` elements.
    pub fn ula(num_subarrays: usize, elements_per_subarray: usize, carrier_freq: f64) -> Result<Self> {
        let d = SPEED_OF_LIGHT / carrier_freq / 2.0;
        Self::new(
            ArrayKind::Ula,
            num_subarrays,
            elements_per_subarray,
            d,
            d * elements_per_subarray as f64,
            carrier_freq,
        )
    }

    /// Half-wavelength UPA: `J` rows (y axis) of `M` elements (x axis).
    pub fn upa(num_subarrays: usize, elements_per_subarray: usize, carrier_freq: f64) -> Result<Self> {
        let d = SPEED_OF_LIGHT / carrier_freq / 2.0;
        Self::new(ArrayKind::Upa, num_subarrays, elements_per_subarray, d, d, carrier_freq)
    }

    pub fn total_elements(&self) -> usize {
        self.num_subarrays * self.elements_per_subarray
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    fn wavenumber(&self) -> f64 {
        2.0 * PI * self.carrier_freq / SPEED_OF_LIGHT
    }

    /// Same physical array operated at another frequency.
    pub fn at_frequency(&self, freq: f64) -> Self {
        Self {
            carrier_freq: freq,
            ..self.clone()
        }
    }

    /// A ULA whose inter-subarray spacing is `M·d`: its response is a single
    /// DFT vector of length `J·M`.
    pub fn is_contiguous_ula(&self) -> bool {
        self.kind == ArrayKind::Ula
            && (self.inter_spacing - self.elements_per_subarray as f64 * self.intra_spacing).abs()
                <= 1e-9 * self.inter_spacing
    }

    /// Phases `(ϑ₁, ϑ₂)` of the sub-array and element DFT factors.
    pub fn phases(&self, angle: Angle) -> Result<(f64, f64)> {
        let k = self.wavenumber();
        match (self.kind, angle) {
            (ArrayKind::Ula, Angle::Linear(theta)) => {
                let s = theta.sin();
                Ok((k * self.inter_spacing * s, k * self.intra_spacing * s))
            }
            (ArrayKind::Upa, Angle::Planar { azimuth, elevation }) => {
                let se = elevation.sin();
                Ok((
                    k * self.inter_spacing * se * azimuth.sin(),
                    k * self.intra_spacing * se * azimuth.cos(),
                ))
            }
            (kind, angle) => Err(invalid(format!("{angle:?} is not a direction for a {kind:?}"))),
        }
    }

    /// Response vector for explicit phases.
    pub fn response_from_phases(&self, phase_sub: f64, phase_elem: f64) -> Vec<Complex64> {
        let outer = dft(phase_sub, self.num_subarrays);
        let inner = dft(phase_elem, self.elements_per_subarray);
        kron(&outer, &inner)
    }

    /// Phases of a linear phase progression `ϑ` across the flattened element
    /// index `n = j·M + m`.
    pub fn flat_phase_pair(&self, phase: f64) -> (f64, f64) {
        (wrap_phase(self.elements_per_subarray as f64 * phase), wrap_phase(phase))
    }

    /// Map phases back to a physical direction.
    ///
    /// Phases outside the visible region (|sin| > 1) are clamped to endfire.
    pub fn angle_from_phases(&self, phase_sub: f64, phase_elem: f64) -> Angle {
        let k = self.wavenumber();
        match self.kind {
            ArrayKind::Ula => {
                let s = (wrap_phase(phase_elem) / (k * self.intra_spacing)).clamp(-1.0, 1.0);
                Angle::Linear(s.asin())
            }
            ArrayKind::Upa => {
                let a = wrap_phase(phase_sub) / (k * self.inter_spacing);
                let b = wrap_phase(phase_elem) / (k * self.intra_spacing);
                let r = a.hypot(b).min(1.0);
                Angle::Planar {
                    azimuth: a.atan2(b),
                    elevation: r.asin(),
                }
            }
        }
    }
}

/// Wrap a phase into `[-π, π)`.
pub fn wrap_phase(phase: f64) -> f64 {
    let w = (phase + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

fn dft(phase: f64, len: usize) -> Vec<Complex64> {
    let scale = 1.0 / (len as f64).sqrt();
    (0..len)
        .map(|n| Complex64::from_polar(scale, phase * n as f64))
        .collect()
}

pub(crate) fn kron(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)).collect()
}

/// `√(1/len)·[1, e^{jϑ}, …, e^{j(len−1)ϑ}]`.
pub fn dft_vector(phase: f64, len: usize) -> Result<Vec<Complex64>> {
    if len == 0 {
        return Err(invalid("DFT vector length must be at least 1"));
    }
    Ok(dft(phase, len))
}

pub fn array_response(geom: &ArrayGeometry, angle: Angle) -> Result<Vec<Complex64>> {
    let (p1, p2) = geom.phases(angle)?;
    Ok(geom.response_from_phases(p1, p2))
}

/// Unit-norm antenna weights with the transmit power carried separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub weights: Vec<Complex64>,
    /// Leading antennas that carry nonzero weight.
    pub active_antennas: usize,
    /// Watts.
    pub power: f64,
}

impl Beam {
    pub fn norm(&self) -> f64 {
        norm(&self.weights)
    }

    /// Weights scaled by `√power`.
    pub fn scaled_weights(&self) -> Vec<Complex64> {
        let s = self.power.sqrt();
        self.weights.iter().map(|w| w * s).collect()
    }
}

pub fn steering_beam(geom: &ArrayGeometry, angle: Angle, power: f64) -> Result<Beam> {
    if !(power >= 0.0) {
        return Err(invalid(format!("beam power must be nonnegative, got {power}")));
    }
    Ok(Beam {
        weights: array_response(geom, angle)?,
        active_antennas: geom.total_elements(),
        power,
    })
}

/// `aᴴ b`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Uniform sin-space grid over which estimators evaluate their statistics.
///
/// Contiguous ULAs use `size` points `ϑ = 2πc/size` of the flattened phase.
/// UPAs use a `size × size` grid over `(ϑ₁, ϑ₂)`, indexed `i₁·size + i₂`.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    geom: ArrayGeometry,
    size: usize,
}

impl PhaseGrid {
    pub fn new(geom: &ArrayGeometry, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(invalid("grid size must be positive"));
        }
        if geom.kind == ArrayKind::Ula && !geom.is_contiguous_ula() {
            return Err(invalid(
                "sin-space grids for a ULA require inter-subarray spacing equal to M·d",
            ));
        }
        Ok(Self {
            geom: geom.clone(),
            size,
        })
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geom
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_planar(&self) -> bool {
        self.geom.kind == ArrayKind::Upa
    }

    pub fn len(&self) -> usize {
        if self.is_planar() {
            self.size * self.size
        } else {
            self.size
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn step(&self) -> f64 {
        2.0 * PI / self.size as f64
    }

    pub fn phases(&self, index: usize) -> (f64, f64) {
        let step = self.step();
        if self.is_planar() {
            let (i1, i2) = (index / self.size, index % self.size);
            (i1 as f64 * step, i2 as f64 * step)
        } else {
            self.geom.flat_phase_pair(index as f64 * step)
        }
    }

    pub fn response(&self, index: usize) -> Vec<Complex64> {
        let (p1, p2) = self.phases(index);
        self.geom.response_from_phases(p1, p2)
    }

    pub fn angle(&self, index: usize) -> Angle {
        let (p1, p2) = self.phases(index);
        self.geom.angle_from_phases(p1, p2)
    }

    fn round_index(&self, phase: f64) -> usize {
        ((phase / self.step()).round() as i64).rem_euclid(self.size as i64) as usize
    }

    /// Grid point closest to `angle` in sin-space.
    pub fn nearest_index(&self, angle: Angle) -> Result<usize> {
        let (p1, p2) = self.geom.phases(angle)?;
        Ok(if self.is_planar() {
            self.round_index(p1) * self.size + self.round_index(p2)
        } else {
            self.round_index(p2)
        })
    }

    /// Largest per-dimension circular index distance between two grid points.
    pub fn circular_distance(&self, a: usize, b: usize) -> usize {
        let d = |x: usize, y: usize| {
            let diff = x.abs_diff(y);
            diff.min(self.size - diff)
        };
        if self.is_planar() {
            d(a / self.size, b / self.size).max(d(a % self.size, b % self.size))
        } else {
            d(a, b)
        }
    }
}
