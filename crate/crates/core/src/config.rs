//! Experiment configuration files.
//!
//! Configs are TOML. Every key that carries a physical quantity names its
//! unit (`ap_power_dbm`, `t_max_s`, ...). Omitted tables and keys take the
//! desk-scale defaults below, and unknown keys are rejected. A resolved
//! config serializes back to TOML that reproduces the run exactly.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arrays::ArrayGeometry;
use crate::channel::ChannelParams;
use crate::codebooks::{build_codebook, CodebookKind};
use crate::error::{Error, Result};
use crate::estimators::GridProjector;
use crate::experiments::{
    square_shape, CodebookStudy, EstimatorStudy, FftSizeStudy, OverheadStudy, PointLink,
};
use crate::overhead::{optimize_ladder, LadderPoint, OverheadConstraints, SinrCdf};
use crate::scenario::{read_topology_file, ArraySpec, LosModel, Scenario, TopologyKind, TopologyParams, TrainingShape};
use crate::signaling::EstimatorKind;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(config_err(msg()))
    }
}

fn finite(name: &str, x: f64) -> Result<()> {
    ensure(x.is_finite(), || format!("{name} must be finite, got {x}"))
}

fn positive(name: &str, x: f64) -> Result<()> {
    ensure(x.is_finite() && x > 0.0, || format!("{name} must be positive, got {x}"))
}

fn nonnegative(name: &str, x: f64) -> Result<()> {
    ensure(x.is_finite() && x >= 0.0, || format!("{name} must be nonnegative, got {x}"))
}

fn nonempty<T>(name: &str, v: &[T]) -> Result<()> {
    ensure(!v.is_empty(), || format!("{name} must not be empty"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 1, trials: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub topology: TopologyKind,
    /// Hex lattice only.
    pub num_aps: usize,
    pub num_mobiles: usize,
    pub inter_ap_distance_m: f64,
    pub min_distance_m: f64,
    pub ap_height_m: f64,
    pub mobile_height_m: f64,
    pub num_obstacles: usize,
    pub obstacle_size_m: f64,
    pub obstacle_height_m: f64,
    pub los_model: LosModel,
    pub mobile_speed_mps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topology_file: Option<PathBuf>,
    pub carrier_freq_hz: f64,
    pub num_nlos_paths: usize,
    pub nlos_extra_attenuation_db: f64,
    pub codebook: CodebookKind,
    pub fft_size: usize,
    pub ap_power_dbm: f64,
    pub mobile_power_dbm: f64,
    pub data_power_dbm: f64,
    pub training_bandwidth_hz: f64,
    pub noise_figure_db: f64,
    pub num_subbands: usize,
    pub subband_bandwidth_hz: f64,
    pub max_served_per_ap: usize,
    pub ack_threshold_db: f64,
    pub ap_array: ArraySpec,
    pub mobile_array: ArraySpec,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::from_scenario(&Scenario::default())
    }
}

impl ScenarioConfig {
    pub fn from_scenario(s: &Scenario) -> Self {
        let t = &s.topology;
        Self {
            topology: t.kind,
            num_aps: t.num_aps,
            num_mobiles: t.num_mobiles,
            inter_ap_distance_m: t.inter_ap_distance,
            min_distance_m: t.min_distance,
            ap_height_m: t.ap_height,
            mobile_height_m: t.mobile_height,
            num_obstacles: t.num_obstacles,
            obstacle_size_m: t.obstacle_size,
            obstacle_height_m: t.obstacle_height,
            los_model: t.los_model,
            mobile_speed_mps: t.mobile_speed,
            topology_file: t.file.clone(),
            carrier_freq_hz: s.carrier_freq,
            num_nlos_paths: s.channel.num_nlos_paths,
            nlos_extra_attenuation_db: s.channel.nlos_extra_attenuation_db,
            codebook: s.codebook,
            fft_size: s.fft_size,
            ap_power_dbm: s.ap_power_dbm,
            mobile_power_dbm: s.mobile_power_dbm,
            data_power_dbm: s.data_power_dbm,
            training_bandwidth_hz: s.training_bandwidth_hz,
            noise_figure_db: s.noise_figure_db,
            num_subbands: s.num_subbands,
            subband_bandwidth_hz: s.subband_bandwidth_hz,
            max_served_per_ap: s.max_served_per_ap,
            ack_threshold_db: s.ack_threshold_db,
            ap_array: t.ap_array,
            mobile_array: t.mobile_array,
        }
    }

    /// Validate and convert. A topology file is read here so that a missing
    /// or malformed file is reported before anything runs.
    pub fn to_scenario(&self) -> Result<Scenario> {
        positive("carrier_freq_hz", self.carrier_freq_hz)?;
        ensure(self.num_mobiles >= 1, || "num_mobiles must be at least 1".into())?;
        ensure(self.num_aps >= 1, || "num_aps must be at least 1".into())?;
        positive("inter_ap_distance_m", self.inter_ap_distance_m)?;
        nonnegative("min_distance_m", self.min_distance_m)?;
        nonnegative("ap_height_m", self.ap_height_m)?;
        nonnegative("mobile_height_m", self.mobile_height_m)?;
        positive("obstacle_size_m", self.obstacle_size_m)?;
        positive("obstacle_height_m", self.obstacle_height_m)?;
        nonnegative("mobile_speed_mps", self.mobile_speed_mps)?;
        // a blocked link has only NLoS paths
        let always_los = self.los_model == LosModel::Geometric && self.num_obstacles == 0;
        ensure(self.num_nlos_paths >= 1 || always_los, || {
            "num_nlos_paths = 0 needs los_model = \"geometric\" and no obstacles".into()
        })?;
        nonnegative("nlos_extra_attenuation_db", self.nlos_extra_attenuation_db)?;
        finite("ap_power_dbm", self.ap_power_dbm)?;
        finite("mobile_power_dbm", self.mobile_power_dbm)?;
        finite("data_power_dbm", self.data_power_dbm)?;
        positive("training_bandwidth_hz", self.training_bandwidth_hz)?;
        finite("noise_figure_db", self.noise_figure_db)?;
        ensure(self.num_subbands >= 1, || "num_subbands must be at least 1".into())?;
        positive("subband_bandwidth_hz", self.subband_bandwidth_hz)?;
        ensure(self.max_served_per_ap >= 1, || "max_served_per_ap must be at least 1".into())?;
        finite("ack_threshold_db", self.ack_threshold_db)?;
        let ag = array_geometry("ap_array", &self.ap_array, self.carrier_freq_hz)?;
        let mg = array_geometry("mobile_array", &self.mobile_array, self.carrier_freq_hz)?;
        fft_grid("fft_size", &ag, self.fft_size)?;
        fft_grid("fft_size", &mg, self.fft_size)?;
        match (self.topology, &self.topology_file) {
            (TopologyKind::File, None) => return Err(config_err("topology = \"file\" needs topology_file")),
            (TopologyKind::File, Some(path)) => {
                read_topology_file(path).map_err(|e| config_err(format!("topology_file {}: {e}", path.display())))?;
            }
            (_, Some(_)) => return Err(config_err("topology_file is only used with topology = \"file\"")),
            _ => {}
        }
        Ok(Scenario {
            topology: TopologyParams {
                kind: self.topology,
                num_aps: self.num_aps,
                num_mobiles: self.num_mobiles,
                inter_ap_distance: self.inter_ap_distance_m,
                min_distance: self.min_distance_m,
                ap_height: self.ap_height_m,
                mobile_height: self.mobile_height_m,
                num_obstacles: self.num_obstacles,
                obstacle_size: self.obstacle_size_m,
                obstacle_height: self.obstacle_height_m,
                ap_array: self.ap_array,
                mobile_array: self.mobile_array,
                los_model: self.los_model,
                mobile_speed: self.mobile_speed_mps,
                file: self.topology_file.clone(),
            },
            channel: ChannelParams {
                num_nlos_paths: self.num_nlos_paths,
                nlos_extra_attenuation_db: self.nlos_extra_attenuation_db,
            },
            carrier_freq: self.carrier_freq_hz,
            codebook: self.codebook,
            fft_size: self.fft_size,
            ap_power_dbm: self.ap_power_dbm,
            mobile_power_dbm: self.mobile_power_dbm,
            data_power_dbm: self.data_power_dbm,
            training_bandwidth_hz: self.training_bandwidth_hz,
            noise_figure_db: self.noise_figure_db,
            num_subbands: self.num_subbands,
            subband_bandwidth_hz: self.subband_bandwidth_hz,
            max_served_per_ap: self.max_served_per_ap,
            ack_threshold_db: self.ack_threshold_db,
        })
    }
}

fn array_geometry(name: &str, spec: &ArraySpec, carrier_freq: f64) -> Result<ArrayGeometry> {
    spec.geometry(carrier_freq).map_err(|e| config_err(format!("{name}: {e}")))
}

fn fft_grid(name: &str, geom: &ArrayGeometry, size: usize) -> Result<()> {
    GridProjector::new(geom, size)
        .map(|_| ())
        .map_err(|e| config_err(format!("{name} = {size}: {e}")))
}

/// Build every codebook a study will use once, so that bad sizes fail early.
fn check_codebooks(kind: CodebookKind, geoms: &[&ArrayGeometry], sizes: &[usize]) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for geom in geoms {
        for &s in sizes {
            build_codebook(kind, geom, s, &mut rng)
                .map_err(|e| config_err(format!("{} codebook of size {s}: {e}", kind.name())))?;
        }
    }
    Ok(())
}

fn check_estimator(est: EstimatorKind, codebook: CodebookKind) -> Result<()> {
    ensure(!(est == EstimatorKind::Mp && codebook == CodebookKind::Random), || {
        "the mp estimator needs directional beams and cannot use the random codebook".into()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebooksConfig {
    pub codebooks: Vec<CodebookKind>,
    /// Beams per side; the pilot budget is the square.
    pub sweep_sizes: Vec<usize>,
    pub ap_arrays: Vec<ArraySpec>,
}

impl Default for CodebooksConfig {
    fn default() -> Self {
        Self {
            codebooks: CodebookKind::ALL.to_vec(),
            sweep_sizes: vec![4, 8, 16, 32],
            ap_arrays: vec![ArraySpec::ula(2, 8), ArraySpec::ula(2, 32)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorsConfig {
    pub estimators: Vec<EstimatorKind>,
    pub sweep_sizes: Vec<usize>,
}

impl Default for EstimatorsConfig {
    fn default() -> Self {
        Self {
            estimators: EstimatorKind::ALL.to_vec(),
            sweep_sizes: vec![4, 8, 16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FftSizeConfig {
    pub fft_sizes: Vec<usize>,
    pub sweep_sizes: Vec<usize>,
}

impl Default for FftSizeConfig {
    fn default() -> Self {
        Self {
            fft_sizes: vec![32, 64, 128, 256],
            sweep_sizes: vec![8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverheadConfig {
    pub estimator: EstimatorKind,
    pub mobile_counts: Vec<usize>,
    pub blockage_rates_per_s: Vec<f64>,
    pub t_max_s: Vec<f64>,
    pub guard_s: f64,
    pub t_switch_s: f64,
    /// Candidate training lengths, as beams per side.
    pub sweep_sizes: Vec<usize>,
}

impl Default for OverheadConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Lml,
            mobile_counts: vec![10, 20, 30],
            blockage_rates_per_s: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            t_max_s: vec![0.1, 0.02],
            guard_s: 0.0,
            t_switch_s: 4e-6,
            sweep_sizes: vec![4, 6, 8, 12, 16, 24, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkAnalysisConfig {
    pub num_subarrays: usize,
    pub ap_elements_per_subarray: usize,
    pub mobile_elements_per_subarray: usize,
    pub carrier_freq_hz: f64,
    pub codebook: CodebookKind,
    pub repetitions: usize,
    pub mobile_beams: usize,
    pub ap_beams: usize,
    pub fft_size: usize,
    /// Path powers relative to the strongest, strongest first.
    pub path_offsets_db: Vec<f64>,
    /// Per-pilot SNR of the strongest path.
    pub training_snrs_db: Vec<f64>,
}

impl Default for LinkAnalysisConfig {
    fn default() -> Self {
        Self {
            num_subarrays: 2,
            ap_elements_per_subarray: 16,
            mobile_elements_per_subarray: 16,
            carrier_freq_hz: 28e9,
            codebook: CodebookKind::FullSweep,
            repetitions: 1,
            mobile_beams: 32,
            ap_beams: 32,
            fft_size: 64,
            path_offsets_db: vec![0.0, -3.0, -5.0],
            training_snrs_db: vec![10.0, 12.5, 15.0, 17.5, 20.0],
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub scenario: ScenarioConfig,
    pub compare_codebooks: CodebooksConfig,
    pub compare_estimators: EstimatorsConfig,
    pub fft_size: FftSizeConfig,
    pub optimize_overhead: OverheadConfig,
    pub link_analysis: LinkAnalysisConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        ensure(self.run.seed <= i64::MAX as u64, || {
            format!("seed {} does not fit a TOML integer (max {})", self.run.seed, i64::MAX)
        })?;
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    fn trials(&self) -> Result<usize> {
        ensure(self.run.trials >= 1, || "trials must be at least 1".into())?;
        Ok(self.run.trials)
    }

    pub fn codebook_study(&self) -> Result<CodebookStudy> {
        let c = &self.compare_codebooks;
        let scenario = self.scenario.to_scenario()?;
        nonempty("compare_codebooks.codebooks", &c.codebooks)?;
        nonempty("compare_codebooks.sweep_sizes", &c.sweep_sizes)?;
        nonempty("compare_codebooks.ap_arrays", &c.ap_arrays)?;
        let mg = array_geometry("mobile_array", &scenario.topology.mobile_array, scenario.carrier_freq)?;
        for spec in &c.ap_arrays {
            let ag = array_geometry("compare_codebooks.ap_arrays", spec, scenario.carrier_freq)?;
            fft_grid("fft_size", &ag, scenario.fft_size)?;
            for &kind in &c.codebooks {
                check_codebooks(kind, &[&ag, &mg], &c.sweep_sizes)?;
            }
        }
        Ok(CodebookStudy {
            scenario,
            ap_arrays: c.ap_arrays.clone(),
            codebooks: c.codebooks.clone(),
            sweep_sizes: c.sweep_sizes.clone(),
            trials: self.trials()?,
        })
    }

    fn check_scenario_sweeps(&self, scenario: &Scenario, sizes: &[usize]) -> Result<()> {
        let ag = array_geometry("ap_array", &scenario.topology.ap_array, scenario.carrier_freq)?;
        let mg = array_geometry("mobile_array", &scenario.topology.mobile_array, scenario.carrier_freq)?;
        check_codebooks(scenario.codebook, &[&ag, &mg], sizes)
    }

    pub fn estimator_study(&self) -> Result<EstimatorStudy> {
        let c = &self.compare_estimators;
        let scenario = self.scenario.to_scenario()?;
        nonempty("compare_estimators.estimators", &c.estimators)?;
        nonempty("compare_estimators.sweep_sizes", &c.sweep_sizes)?;
        for &e in &c.estimators {
            check_estimator(e, scenario.codebook)?;
        }
        self.check_scenario_sweeps(&scenario, &c.sweep_sizes)?;
        Ok(EstimatorStudy {
            scenario,
            estimators: c.estimators.clone(),
            sweep_sizes: c.sweep_sizes.clone(),
            trials: self.trials()?,
        })
    }

    pub fn fft_size_study(&self) -> Result<FftSizeStudy> {
        let c = &self.fft_size;
        let scenario = self.scenario.to_scenario()?;
        nonempty("fft_size.fft_sizes", &c.fft_sizes)?;
        nonempty("fft_size.sweep_sizes", &c.sweep_sizes)?;
        let ag = array_geometry("ap_array", &scenario.topology.ap_array, scenario.carrier_freq)?;
        let mg = array_geometry("mobile_array", &scenario.topology.mobile_array, scenario.carrier_freq)?;
        for &size in &c.fft_sizes {
            fft_grid("fft_size.fft_sizes", &ag, size)?;
            fft_grid("fft_size.fft_sizes", &mg, size)?;
        }
        self.check_scenario_sweeps(&scenario, &c.sweep_sizes)?;
        Ok(FftSizeStudy {
            scenario,
            fft_sizes: c.fft_sizes.clone(),
            sweep_sizes: c.sweep_sizes.clone(),
            trials: self.trials()?,
        })
    }

    pub fn overhead_study(&self) -> Result<OverheadStudy> {
        let c = &self.optimize_overhead;
        let scenario = self.scenario.to_scenario()?;
        nonempty("optimize_overhead.mobile_counts", &c.mobile_counts)?;
        nonempty("optimize_overhead.blockage_rates_per_s", &c.blockage_rates_per_s)?;
        nonempty("optimize_overhead.t_max_s", &c.t_max_s)?;
        nonempty("optimize_overhead.sweep_sizes", &c.sweep_sizes)?;
        ensure(c.mobile_counts.iter().all(|&n| n >= 1), || {
            "optimize_overhead.mobile_counts must all be at least 1".into()
        })?;
        for &d in &c.blockage_rates_per_s {
            nonnegative("optimize_overhead.blockage_rates_per_s", d)?;
        }
        for &t in &c.t_max_s {
            positive("optimize_overhead.t_max_s", t)?;
        }
        nonnegative("optimize_overhead.guard_s", c.guard_s)?;
        positive("optimize_overhead.t_switch_s", c.t_switch_s)?;
        let probe = OverheadConstraints {
            guard: c.guard_s,
            t_switch: c.t_switch_s,
            t_max: c.t_max_s[0],
            blockage_rate: c.blockage_rates_per_s[0],
        };
        probe.optimal_bandwidth().map_err(|e| config_err(format!("optimize_overhead: {e}")))?;
        check_estimator(c.estimator, scenario.codebook)?;
        self.check_scenario_sweeps(&scenario, &c.sweep_sizes)?;
        let shapes: Vec<TrainingShape> = c.sweep_sizes.iter().map(|&s| square_shape(s)).collect();
        // feasibility depends only on timing and coverage, not on SINRs
        let ladder: Vec<LadderPoint> = shapes
            .iter()
            .map(|&shape| SinrCdf::new(vec![1.0]).map(|cdf| LadderPoint::new(&scenario, shape, cdf)))
            .collect::<Result<_>>()?;
        for &t_max in &c.t_max_s {
            optimize_ladder(&OverheadConstraints { t_max, ..probe }, &ladder)
                .map_err(|e| config_err(format!("optimize_overhead: {e}")))?;
        }
        Ok(OverheadStudy {
            scenario,
            estimator: c.estimator,
            mobile_counts: c.mobile_counts.clone(),
            blockage_rates: c.blockage_rates_per_s.clone(),
            t_max_values: c.t_max_s.clone(),
            guard: c.guard_s,
            t_switch: c.t_switch_s,
            shapes,
            trials: self.trials()?,
        })
    }

    pub fn point_link(&self) -> Result<(PointLink, Vec<f64>)> {
        let c = &self.link_analysis;
        positive("link_analysis.carrier_freq_hz", c.carrier_freq_hz)?;
        ensure(c.repetitions >= 1, || "link_analysis.repetitions must be at least 1".into())?;
        nonempty("link_analysis.path_offsets_db", &c.path_offsets_db)?;
        nonempty("link_analysis.training_snrs_db", &c.training_snrs_db)?;
        ensure(c.path_offsets_db[0] == 0.0, || "link_analysis.path_offsets_db must start at 0".into())?;
        ensure(c.path_offsets_db.iter().all(|x| x.is_finite() && *x <= 0.0), || {
            "link_analysis.path_offsets_db must be finite and at most 0".into()
        })?;
        ensure(c.path_offsets_db.len() * 4 <= c.fft_size, || {
            format!(
                "link_analysis: {} paths do not fit four bins apart on a {}-point grid",
                c.path_offsets_db.len(),
                c.fft_size
            )
        })?;
        for &x in &c.training_snrs_db {
            finite("link_analysis.training_snrs_db", x)?;
        }
        let ag = ArrayGeometry::ula(c.num_subarrays, c.ap_elements_per_subarray, c.carrier_freq_hz)
            .map_err(|e| config_err(format!("link_analysis AP array: {e}")))?;
        let mg = ArrayGeometry::ula(c.num_subarrays, c.mobile_elements_per_subarray, c.carrier_freq_hz)
            .map_err(|e| config_err(format!("link_analysis mobile array: {e}")))?;
        fft_grid("link_analysis.fft_size", &ag, c.fft_size)?;
        fft_grid("link_analysis.fft_size", &mg, c.fft_size)?;
        check_codebooks(c.codebook, &[&ag], &[c.ap_beams])?;
        check_codebooks(c.codebook, &[&mg], &[c.mobile_beams])?;
        self.trials()?;
        Ok((
            PointLink {
                ap_subarrays: c.num_subarrays,
                ap_elements: c.ap_elements_per_subarray,
                mobile_subarrays: c.num_subarrays,
                mobile_elements: c.mobile_elements_per_subarray,
                carrier_freq: c.carrier_freq_hz,
                codebook: c.codebook,
                shape: TrainingShape {
                    repetitions: c.repetitions,
                    p: c.mobile_beams,
                    q: c.ap_beams,
                },
                fft_size: c.fft_size,
                path_offsets_db: c.path_offsets_db.clone(),
            },
            c.training_snrs_db.clone(),
        ))
    }
}
