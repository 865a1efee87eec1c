//! Training codebooks swept during initial access.
//!
//! All beams are unit norm with power split equally over the active
//! antennas; directional kinds are DFT beams over a prefix of the flattened
//! element index.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arrays::{array_response, inner, Angle, ArrayGeometry, Beam};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CodebookKind {
    #[serde(rename = "full")]
    FullSweep,
    #[serde(rename = "single-rf")]
    SingleRf,
    #[serde(rename = "adaptive")]
    Adaptive,
    #[serde(rename = "cross")]
    Cross,
    #[serde(rename = "random")]
    Random,
}

impl CodebookKind {
    pub const ALL: [CodebookKind; 5] = [
        CodebookKind::FullSweep,
        CodebookKind::SingleRf,
        CodebookKind::Adaptive,
        CodebookKind::Cross,
        CodebookKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CodebookKind::FullSweep => "full",
            CodebookKind::SingleRf => "single-rf",
            CodebookKind::Adaptive => "adaptive",
            CodebookKind::Cross => "cross",
            CodebookKind::Random => "random",
        }
    }
}

impl fmt::Display for CodebookKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CodebookKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown codebook kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub kind: CodebookKind,
    pub beams: Vec<Beam>,
    /// Flattened-index phase of each beam's main lobe; `None` for random
    /// beams, which have no main lobe.
    pub steer_phases: Vec<Option<f64>>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.beams.len()
    }

    /// Largest number of active antennas over the beams.
    pub fn active_antennas(&self) -> usize {
        self.beams.iter().map(|b| b.active_antennas).max().unwrap_or(0)
    }

    pub fn weights(&self, i: usize) -> &[Complex64] {
        &self.beams[i].weights
    }

    /// Multiply every beam by its own random unit-modulus phase.
    ///
    /// Patterns are unchanged, but APs sharing a codebook kind become
    /// distinguishable to a receiver that knows each AP's beams.
    pub fn scramble<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for b in &mut self.beams {
            let rot = Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI));
            b.weights.iter_mut().for_each(|w| *w *= rot);
        }
    }

    /// Direction of beam `i`'s main lobe, if it has one.
    pub fn steer_angle(&self, geom: &ArrayGeometry, i: usize) -> Option<Angle> {
        self.steer_phases[i].map(|p| {
            let (p1, p2) = geom.flat_phase_pair(p);
            geom.angle_from_phases(p1, p2)
        })
    }
}

fn prefix_dft(phase: f64, active: usize, total: usize) -> Vec<Complex64> {
    let scale = 1.0 / (active as f64).sqrt();
    (0..total)
        .map(|n| {
            if n < active {
                Complex64::from_polar(scale, phase * n as f64)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect()
}

fn grid_phase(k: usize, size: usize) -> f64 {
    2.0 * PI * k as f64 / size as f64
}

/// Build `size` training beams of the given kind.
///
/// Sizes too small to cover all directions are allowed; callers enforce the
/// pilot-count constraint.
pub fn build_codebook<R: Rng + ?Sized>(
    kind: CodebookKind,
    geom: &ArrayGeometry,
    size: usize,
    rng: &mut R,
) -> Result<Codebook> {
    if size == 0 {
        return Err(invalid("codebook size must be at least 1"));
    }
    let total = geom.total_elements();
    let directional = |active: usize| {
        let beams = (0..size)
            .map(|k| Beam {
                weights: prefix_dft(grid_phase(k, size), active, total),
                active_antennas: active,
                power: 1.0,
            })
            .collect();
        let phases = (0..size).map(|k| Some(grid_phase(k, size))).collect();
        (beams, phases)
    };
    let (beams, steer_phases) = match kind {
        CodebookKind::FullSweep => directional(total),
        CodebookKind::SingleRf => directional(geom.elements_per_subarray),
        CodebookKind::Adaptive => directional(size.min(total)),
        CodebookKind::Cross => {
            let half = total / 2;
            let scale = 1.0 / (total as f64).sqrt();
            let beams = (0..size)
                .map(|k| {
                    let first = grid_phase(k, size);
                    let second = grid_phase((k + size / 2) % size, size);
                    let weights = (0..total)
                        .map(|n| {
                            let ph = if n < half { first } else { second };
                            Complex64::from_polar(scale, ph * n as f64)
                        })
                        .collect();
                    Beam {
                        weights,
                        active_antennas: total,
                        power: 1.0,
                    }
                })
                .collect();
            (beams, (0..size).map(|k| Some(grid_phase(k, size))).collect())
        }
        CodebookKind::Random => {
            let scale = 1.0 / (total as f64).sqrt();
            let beams = (0..size)
                .map(|_| Beam {
                    weights: (0..total)
                        .map(|_| Complex64::from_polar(scale, rng.random_range(0.0..2.0 * PI)))
                        .collect(),
                    active_antennas: total,
                    power: 1.0,
                })
                .collect();
            (beams, vec![None; size])
        }
    };
    Ok(Codebook {
        kind,
        beams,
        steer_phases,
    })
}

/// `|⟨beam, a(angle)⟩|` for each angle.
pub fn beam_pattern(beam: &Beam, geom: &ArrayGeometry, grid: &[Angle]) -> Result<Vec<f64>> {
    grid.iter()
        .map(|&a| Ok(inner(&beam.weights, &array_response(geom, a)?).norm()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arrays::{norm, PhaseGrid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FC: f64 = 28e9;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    fn ula() -> ArrayGeometry {
        ArrayGeometry::ula(2, 16, FC).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for k in CodebookKind::ALL {
            assert_eq!(k.name().parse::<CodebookKind>().unwrap(), k);
        }
        assert!("sweep".parse::<CodebookKind>().is_err());
    }

    #[test]
    fn every_beam_unit_norm() {
        let g = ula();
        for kind in CodebookKind::ALL {
            for size in [1, 4, 7, 32, 64] {
                let cb = build_codebook(kind, &g, size, &mut rng()).unwrap();
                assert_eq!(cb.size(), size);
                for b in &cb.beams {
                    assert!((b.norm() - 1.0).abs() < 1e-12, "{kind} size {size}");
                    assert!(b.weights[b.active_antennas..].iter().all(|w| w.norm() == 0.0));
                }
            }
        }
        assert!(build_codebook(CodebookKind::FullSweep, &g, 0, &mut rng()).is_err());
    }

    #[test]
    fn full_sweep_is_orthonormal() {
        let g = ula();
        let cb = build_codebook(CodebookKind::FullSweep, &g, 32, &mut rng()).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((inner(cb.weights(i), cb.weights(j)) - e).norm() < 1e-12);
            }
        }
        let cb = build_codebook(CodebookKind::Adaptive, &g, 8, &mut rng()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((inner(cb.weights(i), cb.weights(j)) - e).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn adaptive_activation() {
        let g = ula();
        assert_eq!(build_codebook(CodebookKind::Adaptive, &g, 64, &mut rng()).unwrap().active_antennas(), 32);
        assert_eq!(build_codebook(CodebookKind::Adaptive, &g, 32, &mut rng()).unwrap().active_antennas(), 32);
        assert_eq!(build_codebook(CodebookKind::Adaptive, &g, 12, &mut rng()).unwrap().active_antennas(), 12);
        assert_eq!(build_codebook(CodebookKind::SingleRf, &g, 40, &mut rng()).unwrap().active_antennas(), 16);
    }

    #[test]
    fn random_beams_are_unit_modulus() {
        let g = ula();
        let cb = build_codebook(CodebookKind::Random, &g, 16, &mut rng()).unwrap();
        let m = 1.0 / 32f64.sqrt();
        assert!(cb.beams.iter().flat_map(|b| &b.weights).all(|w| (w.norm() - m).abs() < 1e-12));
        assert_eq!(cb, build_codebook(CodebookKind::Random, &g, 16, &mut rng()).unwrap());
        assert!(cb.steer_angle(&g, 0).is_none());
    }

    #[test]
    fn matched_dft_beam_has_unit_gain() {
        let g = ula();
        let cb = build_codebook(CodebookKind::FullSweep, &g, 32, &mut rng()).unwrap();
        let grid = PhaseGrid::new(&g, 32).unwrap();
        for k in [0, 5, 17, 31] {
            let p = beam_pattern(&cb.beams[k], &g, &[grid.angle(k)]).unwrap();
            assert!((p[0] - 1.0).abs() < 1e-12);
            let steer = cb.steer_angle(&g, k).unwrap();
            assert_eq!(grid.nearest_index(steer).unwrap(), k);
        }
    }

    #[test]
    fn pattern_symmetric_about_endfire() {
        let g = ula();
        let cb = build_codebook(CodebookKind::Cross, &g, 8, &mut rng()).unwrap();
        let angles: Vec<Angle> = (0..100).map(|i| Angle::Linear(-PI / 2.0 + 0.03 * i as f64)).collect();
        let mirrored: Vec<Angle> = angles
            .iter()
            .map(|a| match a {
                Angle::Linear(t) => Angle::Linear(PI - t),
                _ => unreachable!(),
            })
            .collect();
        let a = beam_pattern(&cb.beams[3], &g, &angles).unwrap();
        let b = beam_pattern(&cb.beams[3], &g, &mirrored).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Width of the region around the peak where the pattern stays within
    /// 3 dB, measured in sin-space on a dense grid.
    fn half_power_width(beam: &Beam, geom: &ArrayGeometry) -> f64 {
        let n = 4096;
        let grid = PhaseGrid::new(geom, n).unwrap();
        let pattern: Vec<f64> = (0..n).map(|i| inner(&beam.weights, &grid.response(i)).norm_sqr()).collect();
        let (peak_i, peak) = pattern
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let above = |i: usize| pattern[i % n] >= peak / 2.0;
        let mut lo = 0;
        while above((peak_i + n - lo - 1) % n) && lo < n {
            lo += 1;
        }
        let mut hi = 0;
        while above(peak_i + hi + 1) && hi < n {
            hi += 1;
        }
        (lo + hi + 1) as f64 * 2.0 * PI / n as f64
    }

    #[test]
    fn single_rf_beams_are_j_times_wider() {
        let g = ula();
        let full = build_codebook(CodebookKind::FullSweep, &g, 32, &mut rng()).unwrap();
        let single = build_codebook(CodebookKind::SingleRf, &g, 32, &mut rng()).unwrap();
        let ratio = half_power_width(&single.beams[4], &g) / half_power_width(&full.beams[4], &g);
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn single_rf_pattern_is_subarray_pattern() {
        let g = ula();
        let sub = ArrayGeometry::ula(1, 16, FC).unwrap();
        let cb = build_codebook(CodebookKind::SingleRf, &g, 16, &mut rng()).unwrap();
        let sub_cb = build_codebook(CodebookKind::FullSweep, &sub, 16, &mut rng()).unwrap();
        let angles: Vec<Angle> = (0..50).map(|i| Angle::Linear(-1.5 + 0.06 * i as f64)).collect();
        let a = beam_pattern(&cb.beams[5], &g, &angles).unwrap();
        let b = beam_pattern(&sub_cb.beams[5], &sub, &angles).unwrap();
        // same lobe shape, scaled by the sub-array's share of the full response
        let s = (16.0f64 / 32.0).sqrt();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - s * y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_beam_points_two_ways() {
        let g = ula();
        let cb = build_codebook(CodebookKind::Cross, &g, 8, &mut rng()).unwrap();
        let grid = PhaseGrid::new(&g, 8).unwrap();
        let p = beam_pattern(&cb.beams[1], &g, &[grid.angle(1), grid.angle(5), grid.angle(3)]).unwrap();
        assert!(p[0] > 0.4 && p[1] > 0.4);
        assert!(p[2] < p[0]);
        assert!((norm(cb.weights(1)) - 1.0).abs() < 1e-12);
    }
}
