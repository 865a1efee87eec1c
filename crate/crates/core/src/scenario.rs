//! Network layouts, blockage geometry, FDM scheduling and data-phase SINR.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arrays::{array_response, Angle, ArrayGeometry, ArrayKind};
use crate::channel::{sample_channel, umi_los_probability, ChannelParams, LinkGeometry};
use crate::codebooks::{build_codebook, CodebookKind};
use crate::error::{invalid, Error, Result};
use crate::seeds;
use crate::signaling::{run_initial_access, AccessOutcome, EstimatorKind, LinkSet, TrainingConfig};
use crate::units::{dbm_to_watts, thermal_noise_watts};

/// First line of every topology file.
pub const TOPOLOGY_HEADER: &str = "beamacq-topology 1";

/// Cap on data SINR (30 dB).
pub const SINR_CAP: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub kind: ArrayKind,
    pub num_subarrays: usize,
    pub elements_per_subarray: usize,
}

impl ArraySpec {
    pub fn ula(num_subarrays: usize, elements_per_subarray: usize) -> Self {
        Self {
            kind: ArrayKind::Ula,
            num_subarrays,
            elements_per_subarray,
        }
    }

    /// Half-wavelength geometry at `carrier_freq`.
    pub fn geometry(&self, carrier_freq: f64) -> Result<ArrayGeometry> {
        match self.kind {
            ArrayKind::Ula => ArrayGeometry::ula(self.num_subarrays, self.elements_per_subarray, carrier_freq),
            ArrayKind::Upa => ArrayGeometry::upa(self.num_subarrays, self.elements_per_subarray, carrier_freq),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.num_subarrays * self.elements_per_subarray
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub position: [f64; 3],
    /// Azimuth of the array broadside, radians.
    pub orientation: f64,
}

/// Axis-aligned box standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub width: f64,
    pub depth: f64,
    pub height: f64,
}

impl Obstacle {
    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        (
            [self.center[0] - self.width / 2.0, self.center[1] - self.depth / 2.0, 0.0],
            [self.center[0] + self.width / 2.0, self.center[1] + self.depth / 2.0, self.height],
        )
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = self.bounds();
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LosModel {
    /// LoS unless the segment hits an obstacle.
    Geometric,
    /// Independent draws from the UMi LoS probability (no obstacles).
    UmiProbability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub aps: Vec<Site>,
    pub mobiles: Vec<Site>,
    pub obstacles: Vec<Obstacle>,
    pub ap_array: ArraySpec,
    pub mobile_array: ArraySpec,
    pub los_model: LosModel,
    /// Mobile speed, m/s. Only informs the blockage rate.
    pub mobile_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Triangle,
    Hex,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyParams {
    pub kind: TopologyKind,
    /// Hex only; the triangle always has 3 APs.
    pub num_aps: usize,
    pub num_mobiles: usize,
    pub inter_ap_distance: f64,
    pub min_distance: f64,
    pub ap_height: f64,
    pub mobile_height: f64,
    pub num_obstacles: usize,
    /// Footprint side of each obstacle, meters.
    pub obstacle_size: f64,
    pub obstacle_height: f64,
    pub ap_array: ArraySpec,
    pub mobile_array: ArraySpec,
    pub los_model: LosModel,
    pub mobile_speed: f64,
    pub file: Option<std::path::PathBuf>,
}

impl Default for TopologyParams {
    fn default() -> Self {
        Self {
            kind: TopologyKind::Triangle,
            num_aps: 3,
            num_mobiles: 1,
            inter_ap_distance: 250.0,
            min_distance: 15.0,
            ap_height: 10.0,
            mobile_height: 1.5,
            num_obstacles: 0,
            obstacle_size: 1.0,
            obstacle_height: 2.0,
            ap_array: ArraySpec::ula(2, 8),
            mobile_array: ArraySpec::ula(2, 8),
            los_model: LosModel::UmiProbability,
            mobile_speed: 3.0 / 3.6,
            file: None,
        }
    }
}

/// `n` hex lattice points with spacing `d`, center first, then ring by ring.
pub fn hex_lattice(n: usize, d: f64) -> Vec<[f64; 2]> {
    let mut pts = vec![[0.0, 0.0]];
    let dirs: Vec<[f64; 2]> = (0..6)
        .map(|i| {
            let a = PI / 3.0 * i as f64;
            [a.cos(), a.sin()]
        })
        .collect();
    let mut ring = 1;
    while pts.len() < n {
        // walk the ring starting at its corner in direction 4
        let mut p = [dirs[4][0] * ring as f64, dirs[4][1] * ring as f64];
        for dir in &dirs {
            for _ in 0..ring {
                pts.push([p[0] * d, p[1] * d]);
                p = [p[0] + dir[0], p[1] + dir[1]];
            }
        }
        ring += 1;
    }
    pts.truncate(n);
    pts
}

fn far_enough(p: [f64; 2], aps: &[Site], min_distance: f64) -> bool {
    aps.iter()
        .all(|a| (p[0] - a.position[0]).hypot(p[1] - a.position[1]) >= min_distance)
}

/// Rejection-sample `n` points from `sample` at least `min_distance` (2-D)
/// from every AP.
fn drop_mobiles<R: Rng + ?Sized>(
    n: usize,
    aps: &[Site],
    params: &TopologyParams,
    rng: &mut R,
    mut sample: impl FnMut(&mut R) -> [f64; 2],
) -> Result<Vec<Site>> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * (n + 1) {
            return Err(invalid("could not place mobiles away from the APs; region too small"));
        }
        let p = sample(rng);
        if far_enough(p, aps, params.min_distance) {
            out.push(Site {
                position: [p[0], p[1], params.mobile_height],
                orientation: rng.random_range(0.0..2.0 * PI),
            });
        }
    }
    Ok(out)
}

pub fn generate_topology<R: Rng + ?Sized>(params: &TopologyParams, rng: &mut R) -> Result<Network> {
    if !(params.inter_ap_distance > 0.0 && params.min_distance >= 0.0) {
        return Err(invalid("inter-AP distance must be positive and the distance floor nonnegative"));
    }
    let network = |aps, mobiles, obstacles| Network {
        aps,
        mobiles,
        obstacles,
        ap_array: params.ap_array,
        mobile_array: params.mobile_array,
        los_model: params.los_model,
        mobile_speed: params.mobile_speed,
    };
    match params.kind {
        TopologyKind::Triangle => {
            let s = params.inter_ap_distance;
            let corners = [[0.0, 0.0], [s, 0.0], [s / 2.0, s * 3f64.sqrt() / 2.0]];
            let centroid = [s / 2.0, s * 3f64.sqrt() / 6.0];
            let aps: Vec<Site> = corners
                .iter()
                .map(|c| Site {
                    position: [c[0], c[1], params.ap_height],
                    orientation: (centroid[1] - c[1]).atan2(centroid[0] - c[0]),
                })
                .collect();
            let mobiles = drop_mobiles(params.num_mobiles, &aps, params, rng, |rng| {
                // uniform in the triangle by folding the unit square
                let (mut a, mut b): (f64, f64) = (rng.random(), rng.random());
                if a + b > 1.0 {
                    a = 1.0 - a;
                    b = 1.0 - b;
                }
                [
                    a * corners[1][0] + b * corners[2][0],
                    a * corners[1][1] + b * corners[2][1],
                ]
            })?;
            let obstacles = place_obstacles(params, bounding_box(&aps, s / 2.0), rng);
            Ok(network(aps, mobiles, obstacles))
        }
        TopologyKind::Hex => {
            if params.num_aps == 0 {
                return Err(invalid("a hex layout needs at least one AP"));
            }
            let aps: Vec<Site> = hex_lattice(params.num_aps, params.inter_ap_distance)
                .into_iter()
                .map(|p| Site {
                    position: [p[0], p[1], params.ap_height],
                    orientation: rng.random_range(0.0..2.0 * PI),
                })
                .collect();
            let (lo, hi) = bounding_box(&aps, params.inter_ap_distance / 2.0);
            let mobiles = drop_mobiles(params.num_mobiles, &aps, params, rng, |rng| {
                [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])]
            })?;
            let obstacles = place_obstacles(params, (lo, hi), rng);
            Ok(network(aps, mobiles, obstacles))
        }
        TopologyKind::File => {
            let path = params
                .file
                .as_ref()
                .ok_or_else(|| invalid("file topology needs a file path"))?;
            let parsed = read_topology_file(path)?;
            let net = network(parsed.aps, parsed.mobiles, parsed.obstacles);
            for (i, m) in net.mobiles.iter().enumerate() {
                let p = [m.position[0], m.position[1]];
                if !far_enough(p, &net.aps, params.min_distance) {
                    return Err(invalid(format!(
                        "mobile {i} is closer than {} m to an AP",
                        params.min_distance
                    )));
                }
            }
            Ok(net)
        }
    }
}

fn bounding_box(aps: &[Site], margin: f64) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for a in aps {
        for i in 0..2 {
            lo[i] = lo[i].min(a.position[i] - margin);
            hi[i] = hi[i].max(a.position[i] + margin);
        }
    }
    (lo, hi)
}

fn place_obstacles<R: Rng + ?Sized>(params: &TopologyParams, area: ([f64; 2], [f64; 2]), rng: &mut R) -> Vec<Obstacle> {
    let (lo, hi) = area;
    (0..params.num_obstacles)
        .map(|_| Obstacle {
            center: [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])],
            width: params.obstacle_size,
            depth: params.obstacle_size,
            height: params.obstacle_height,
        })
        .collect()
}

/// Sites and obstacles read from a topology file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TopologyFile {
    pub aps: Vec<Site>,
    pub mobiles: Vec<Site>,
    pub obstacles: Vec<Obstacle>,
}

/// Parse the line-based topology format:
///
/// ```text
/// beamacq-topology 1
/// # x_m y_m z_m orientation_rad
/// ap 0 0 10 0.5
/// mobile 40 20 1.5 0
/// # center_x_m center_y_m width_m depth_m height_m
/// obstacle 20 10 1 1 2
/// ```
pub fn parse_topology(text: &str) -> Result<TopologyFile> {
    let mut out = TopologyFile::default();
    let mut header_seen = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: line_no, message };
        if !header_seen {
            if line != TOPOLOGY_HEADER {
                return Err(err(format!("expected header {TOPOLOGY_HEADER:?}, found {line:?}")));
            }
            header_seen = true;
            continue;
        }
        let mut fields = line.split_whitespace();
        let tag = fields.next().expect("nonempty line");
        let nums = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("{f:?} is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let want = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(err(format!("{tag} takes {n} numbers, found {}", nums.len())))
            }
        };
        match tag {
            "ap" | "mobile" => {
                want(4)?;
                let site = Site {
                    position: [nums[0], nums[1], nums[2]],
                    orientation: nums[3],
                };
                if tag == "ap" {
                    out.aps.push(site);
                } else {
                    out.mobiles.push(site);
                }
            }
            "obstacle" => {
                want(5)?;
                if nums[2] <= 0.0 || nums[3] <= 0.0 || nums[4] <= 0.0 {
                    return Err(err("obstacle sizes must be positive".into()));
                }
                out.obstacles.push(Obstacle {
                    center: [nums[0], nums[1]],
                    width: nums[2],
                    depth: nums[3],
                    height: nums[4],
                });
            }
            other => return Err(err(format!("unknown record {other:?}"))),
        }
    }
    if !header_seen {
        return Err(Error::Parse {
            line: 1,
            message: format!("missing header {TOPOLOGY_HEADER:?}"),
        });
    }
    if out.aps.is_empty() {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            message: "no ap records".into(),
        });
    }
    Ok(out)
}

pub fn read_topology_file(path: &Path) -> Result<TopologyFile> {
    parse_topology(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LosState {
    Los,
    Nlos,
}

/// NLoS iff the segment `tx → rx` meets any obstacle box (slab test).
pub fn los_state(tx: [f64; 3], rx: [f64; 3], obstacles: &[Obstacle]) -> LosState {
    let d = [rx[0] - tx[0], rx[1] - tx[1], rx[2] - tx[2]];
    let hit = |o: &Obstacle| {
        let (lo, hi) = o.bounds();
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for i in 0..3 {
            if d[i] == 0.0 {
                if tx[i] < lo[i] || tx[i] > hi[i] {
                    return false;
                }
            } else {
                let (a, b) = ((lo[i] - tx[i]) / d[i], (hi[i] - tx[i]) / d[i]);
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    };
    if obstacles.iter().any(hit) {
        LosState::Nlos
    } else {
        LosState::Los
    }
}

impl Network {
    pub fn ap_geometry(&self, carrier_freq: f64) -> Result<ArrayGeometry> {
        self.ap_array.geometry(carrier_freq)
    }

    pub fn mobile_geometry(&self, carrier_freq: f64) -> Result<ArrayGeometry> {
        self.mobile_array.geometry(carrier_freq)
    }

    fn link_geometry<R: Rng + ?Sized>(&self, ap: usize, mobile: usize, rng: &mut R) -> LinkGeometry {
        let (a, m) = (&self.aps[ap], &self.mobiles[mobile]);
        let los = match self.los_model {
            LosModel::Geometric => los_state(a.position, m.position, &self.obstacles) == LosState::Los,
            LosModel::UmiProbability => {
                let d2 = (a.position[0] - m.position[0]).hypot(a.position[1] - m.position[1]);
                rng.random::<f64>() < umi_los_probability(d2)
            }
        };
        LinkGeometry {
            ap_pos: a.position,
            mobile_pos: m.position,
            ap_orientation: a.orientation,
            mobile_orientation: m.orientation,
            los,
        }
    }

    /// Draw every AP–mobile channel; link `(l, k)` uses stream
    /// `("channel", l, k)` of `seed`.
    pub fn sample_links(&self, carrier_freq: f64, params: &ChannelParams, seed: u64) -> Result<LinkSet> {
        let ag = self.ap_geometry(carrier_freq)?;
        let mg = self.mobile_geometry(carrier_freq)?;
        let channels = (0..self.aps.len())
            .map(|l| {
                (0..self.mobiles.len())
                    .map(|k| {
                        let mut rng = seeds::stream(seed, "channel", &[l as u64, k as u64]);
                        let link = self.link_geometry(l, k, &mut rng);
                        sample_channel(l, k, &link, &ag, &mg, params, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        LinkSet::new(vec![ag; self.aps.len()], vec![mg; self.mobiles.len()], channels)
    }
}

/// Sub-band index of each mobile served by one AP.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FdmAssignment {
    pub subbands: BTreeMap<usize, usize>,
}

/// Sort by AoD key (ties by mobile id) and deal sub-bands round robin.
pub fn schedule_fdm(served: &[(usize, f64)], num_subbands: usize) -> Result<FdmAssignment> {
    if num_subbands == 0 {
        return Err(invalid("at least one sub-band is needed"));
    }
    let mut order = served.to_vec();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(FdmAssignment {
        subbands: order
            .iter()
            .enumerate()
            .map(|(i, &(m, _))| (m, i % num_subbands))
            .collect(),
    })
}

/// Scalar ordering key for AoDs: `sin θ` for a ULA (the response depends on
/// nothing else), azimuth for a UPA.
pub fn aod_sort_key(angle: Angle) -> f64 {
    match angle {
        Angle::Linear(t) => t.sin(),
        Angle::Planar { azimuth, .. } => crate::arrays::wrap_phase(azimuth),
    }
}

/// Data-phase parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBand {
    pub carrier_freq: f64,
    pub num_subbands: usize,
    pub subband_bandwidth: f64,
    /// Per-stream transmit power, watts.
    pub power: f64,
    /// Noise power over one sub-band, watts.
    pub noise: f64,
}

impl DataBand {
    pub fn subband_center(&self, b: usize) -> f64 {
        self.carrier_freq + (b as f64 - (self.num_subbands as f64 - 1.0) / 2.0) * self.subband_bandwidth
    }
}

/// One scheduled data stream: AP `ap` serves `mobile` on `subband`, with
/// beams steered to the estimated angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stream {
    pub ap: usize,
    pub mobile: usize,
    pub subband: usize,
    pub aod: Angle,
    pub aoa: Angle,
}

/// Per-mobile data SINR (linear, capped at [`SINR_CAP`]); mobiles without a
/// stream get 0.
///
/// Channels and beams are re-evaluated at each sub-band's center frequency.
/// Interference comes from every other stream on the same sub-band.
pub fn data_sinr(links: &LinkSet, streams: &[Stream], band: &DataBand) -> Result<Vec<f64>> {
    if !(band.noise > 0.0) {
        return Err(invalid("data noise must be positive"));
    }
    let mut out = vec![0.0; links.num_mobiles()];
    let mut seen = vec![false; links.num_mobiles()];
    for s in streams {
        if s.subband >= band.num_subbands || s.ap >= links.num_aps() || s.mobile >= links.num_mobiles() {
            return Err(invalid(format!("stream {s:?} is outside the network or band")));
        }
        if std::mem::replace(&mut seen[s.mobile], true) {
            return Err(invalid(format!("mobile {} has two data streams", s.mobile)));
        }
    }
    for b in 0..band.num_subbands {
        let on_band: Vec<&Stream> = streams.iter().filter(|s| s.subband == b).collect();
        if on_band.is_empty() {
            continue;
        }
        let f = band.subband_center(b);
        let precoders = on_band
            .iter()
            .map(|s| array_response(&links.ap_geoms[s.ap].at_frequency(f), s.aod))
            .collect::<Result<Vec<_>>>()?;
        for s in &on_band {
            let mg = links.mobile_geoms[s.mobile].at_frequency(f);
            let w = array_response(&mg, s.aoa)?;
            let mut signal = 0.0;
            let mut interference = 0.0;
            for (t, fvec) in on_band.iter().zip(&precoders) {
                let ag = links.ap_geoms[t.ap].at_frequency(f);
                let resp = links.channel(t.ap, s.mobile).responses(&ag, &mg)?;
                let p = band.power * resp.gain(&w, fvec).norm_sqr();
                if std::ptr::eq(*t, *s) {
                    signal = p;
                } else {
                    interference += p;
                }
            }
            out[s.mobile] = (signal / (interference + band.noise)).min(SINR_CAP);
        }
    }
    Ok(out)
}

/// Everything needed to simulate one frame of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub topology: TopologyParams,
    pub channel: ChannelParams,
    pub carrier_freq: f64,
    pub codebook: CodebookKind,
    pub fft_size: usize,
    pub ap_power_dbm: f64,
    pub mobile_power_dbm: f64,
    /// Per-stream data power.
    pub data_power_dbm: f64,
    pub training_bandwidth_hz: f64,
    pub noise_figure_db: f64,
    pub num_subbands: usize,
    pub subband_bandwidth_hz: f64,
    pub max_served_per_ap: usize,
    pub ack_threshold_db: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            topology: TopologyParams::default(),
            channel: ChannelParams::default(),
            carrier_freq: 28e9,
            codebook: CodebookKind::Adaptive,
            fft_size: 64,
            ap_power_dbm: 20.0,
            mobile_power_dbm: 15.0,
            data_power_dbm: 20.0,
            training_bandwidth_hz: 250e3,
            noise_figure_db: 7.0,
            num_subbands: 10,
            subband_bandwidth_hz: 10e6,
            max_served_per_ap: 10,
            ack_threshold_db: 0.0,
        }
    }
}

/// Training shape of one initial-access round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingShape {
    pub repetitions: usize,
    /// Receive beams per mobile.
    pub p: usize,
    /// Transmit beams per AP.
    pub q: usize,
}

impl Scenario {
    pub fn training_noise(&self) -> f64 {
        thermal_noise_watts(self.training_bandwidth_hz, self.noise_figure_db)
    }

    pub fn data_band(&self) -> DataBand {
        DataBand {
            carrier_freq: self.carrier_freq,
            num_subbands: self.num_subbands,
            subband_bandwidth: self.subband_bandwidth_hz,
            power: dbm_to_watts(self.data_power_dbm),
            noise: thermal_noise_watts(self.subband_bandwidth_hz, self.noise_figure_db),
        }
    }

    /// Training configuration for a drawn network; AP codebooks are
    /// scrambled so ML can tell APs apart.
    pub fn training_config(&self, net: &Network, shape: TrainingShape, seed: u64) -> Result<TrainingConfig> {
        let ag = net.ap_geometry(self.carrier_freq)?;
        let mg = net.mobile_geometry(self.carrier_freq)?;
        let ap_codebooks = (0..net.aps.len())
            .map(|l| {
                let mut rng = seeds::stream(seed, "ap-codebook", &[l as u64]);
                let mut cb = build_codebook(self.codebook, &ag, shape.q, &mut rng)?;
                cb.scramble(&mut rng);
                Ok(cb)
            })
            .collect::<Result<Vec<_>>>()?;
        let mobile_codebooks = (0..net.mobiles.len())
            .map(|k| {
                let mut rng = seeds::stream(seed, "mobile-codebook", &[k as u64]);
                build_codebook(self.codebook, &mg, shape.p, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingConfig {
            repetitions: shape.repetitions,
            ap_codebooks,
            mobile_codebooks,
            ap_power: dbm_to_watts(self.ap_power_dbm),
            mobile_power: dbm_to_watts(self.mobile_power_dbm),
            noise: self.training_noise(),
            fft_size: self.fft_size,
            ack_threshold_db: self.ack_threshold_db,
            max_served_per_ap: self.max_served_per_ap,
        })
    }
}

/// Outcome of one simulated frame.
#[derive(Debug, Clone)]
pub struct FrameResult {
    pub network: Network,
    pub links: LinkSet,
    pub access: AccessOutcome,
    pub streams: Vec<Stream>,
    /// Per-mobile data SINR, 0 for unassociated mobiles.
    pub sinr: Vec<f64>,
}

/// Draw a network, run initial access, schedule FDM data and evaluate SINRs.
///
/// `topology_seed` fixes the drop (positions, obstacles, channels) and
/// `noise_seed` the training noise, so callers can hold one fixed while
/// varying the other.
pub fn simulate_frame(
    scenario: &Scenario,
    shape: TrainingShape,
    estimator: EstimatorKind,
    topology_seed: u64,
    noise_seed: u64,
) -> Result<FrameResult> {
    let network = generate_topology(&scenario.topology, &mut seeds::stream(topology_seed, "topology", &[]))?;
    let links = network.sample_links(scenario.carrier_freq, &scenario.channel, topology_seed)?;
    let cfg = scenario.training_config(&network, shape, topology_seed)?;
    let access = run_initial_access(&links, &cfg, estimator, &mut seeds::stream(noise_seed, "access", &[]))?;

    let mut streams = Vec::new();
    for l in 0..network.aps.len() {
        let served: Vec<(usize, f64)> = (0..network.mobiles.len())
            .filter(|&k| access.association(k) == Some(l))
            .map(|k| (k, aod_sort_key(access.uplink[l][k].aod)))
            .collect();
        let fdm = schedule_fdm(&served, scenario.num_subbands)?;
        for (&k, &b) in &fdm.subbands {
            streams.push(Stream {
                ap: l,
                mobile: k,
                subband: b,
                aod: access.uplink[l][k].aod,
                aoa: access.mobiles[k].downlink.aoa,
            });
        }
    }
    let sinr = data_sinr(&links, &streams, &scenario.data_band())?;
    Ok(FrameResult {
        network,
        links,
        access,
        streams,
        sinr,
    })
}

/// `|uᴴ H a|²` scaled by power over noise for one AP–mobile pair.
pub fn steered_snr(links: &LinkSet, ap: usize, mobile: usize, aoa: Angle, aod: Angle, power: f64, noise: f64) -> Result<f64> {
    let u = array_response(&links.mobile_geoms[mobile], aoa)?;
    let a = array_response(&links.ap_geoms[ap], aod)?;
    let g: Complex64 = links.response(ap, mobile).gain(&u, &a);
    Ok(power * g.norm_sqr() / noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{post_training_snr, Channel, PathComponent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn triangle_sides_and_distance_floor() {
        let params = TopologyParams {
            num_mobiles: 500,
            ..Default::default()
        };
        let net = generate_topology(&params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(net.aps.len(), 3);
        for i in 0..3 {
            for j in i + 1..3 {
                let (a, b) = (net.aps[i].position, net.aps[j].position);
                assert!(((a[0] - b[0]).hypot(a[1] - b[1]) - 250.0).abs() < 1e-9);
            }
        }
        for m in &net.mobiles {
            assert!(far_enough([m.position[0], m.position[1]], &net.aps, 15.0));
            // inside the triangle
            let (x, y) = (m.position[0], m.position[1]);
            assert!(y >= -1e-9 && y <= 3f64.sqrt() * x + 1e-9 && y <= 3f64.sqrt() * (250.0 - x) + 1e-9);
        }
    }

    #[test]
    fn hex_spacing() {
        let pts = hex_lattice(10, 200.0);
        assert_eq!(pts.len(), 10);
        for (i, p) in pts.iter().enumerate() {
            let nearest = pts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
                .fold(f64::INFINITY, f64::min);
            assert!((nearest - 200.0).abs() < 1e-6, "{i}: {nearest}");
        }
        // all distinct
        for i in 0..10 {
            for j in i + 1..10 {
                assert!((pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]) > 1.0);
            }
        }
        let params = TopologyParams {
            kind: TopologyKind::Hex,
            num_aps: 10,
            num_mobiles: 50,
            inter_ap_distance: 200.0,
            num_obstacles: 100,
            los_model: LosModel::Geometric,
            ..Default::default()
        };
        let a = generate_topology(&params, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate_topology(&params, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.obstacles.len(), 100);
        assert!(a.mobiles.iter().all(|m| far_enough([m.position[0], m.position[1]], &a.aps, 15.0)));
    }

    #[test]
    fn topology_file_round_trip_and_errors() {
        let text = "beamacq-topology 1\n# comment\nap 0 0 10 0\nap 200 0 10 3.14\n\nmobile 50 50 1.5 0 # inline\nobstacle 20 10 1 1 2\n";
        let t = parse_topology(text).unwrap();
        assert_eq!((t.aps.len(), t.mobiles.len(), t.obstacles.len()), (2, 1, 1));
        assert_eq!(t.obstacles[0].height, 2.0);

        let line_of = |s: &str| match parse_topology(s) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(line_of("ap 0 0 10 0\n"), 1);
        assert_eq!(line_of("beamacq-topology 1\nap 0 0 10\n"), 2);
        assert_eq!(line_of("beamacq-topology 1\nap 0 0 10 0\nmobile 1 x 1 0\n"), 3);
        assert_eq!(line_of("beamacq-topology 1\nap 0 0 10 0\n\ntree 1 2\n"), 4);
        assert_eq!(line_of("beamacq-topology 1\nap 0 0 10 0\nobstacle 0 0 -1 1 1\n"), 3);
        assert_eq!(line_of("beamacq-topology 1\n"), 1);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        std::fs::write(&path, text).unwrap();
        let params = TopologyParams {
            kind: TopologyKind::File,
            file: Some(path),
            los_model: LosModel::Geometric,
            ..Default::default()
        };
        let net = generate_topology(&params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net.aps.len(), 2);
    }

    #[test]
    fn los_basic_cases() {
        let tx = [0.0, 0.0, 10.0];
        let rx = [100.0, 0.0, 1.5];
        assert_eq!(los_state(tx, rx, &[]), LosState::Los);
        let wall = Obstacle {
            center: [50.0, 0.0],
            width: 1.0,
            depth: 1.0,
            height: 20.0,
        };
        assert_eq!(los_state(tx, rx, &[wall]), LosState::Nlos);
        assert_eq!(los_state(rx, tx, &[wall]), LosState::Nlos);
        let short = Obstacle { height: 2.0, ..wall };
        // the segment is at 5.75 m over the box
        assert_eq!(los_state(tx, rx, &[short]), LosState::Los);
        let aside = Obstacle {
            center: [50.0, 3.0],
            ..wall
        };
        assert_eq!(los_state(tx, rx, &[aside]), LosState::Los);
    }

    #[test]
    fn los_agrees_with_dense_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let obstacles: Vec<Obstacle> = (0..30)
            .map(|_| Obstacle {
                center: [rng.random_range(0.0..60.0), rng.random_range(0.0..60.0)],
                width: 1.0,
                depth: 1.0,
                height: rng.random_range(1.0..4.0),
            })
            .collect();
        let mut nlos = 0;
        for _ in 0..1000 {
            let tx: [f64; 3] = [rng.random_range(0.0..60.0), rng.random_range(0.0..60.0), rng.random_range(0.5..6.0)];
            let rx: [f64; 3] = [rng.random_range(0.0..60.0), rng.random_range(0.0..60.0), rng.random_range(0.5..6.0)];
            let len = ((0..3).map(|i| (rx[i] - tx[i]).powi(2)).sum::<f64>()).sqrt();
            let steps = (len / 0.01).ceil() as usize;
            let sampled = (0..=steps).any(|i| {
                let t = i as f64 / steps as f64;
                let p = [tx[0] + t * (rx[0] - tx[0]), tx[1] + t * (rx[1] - tx[1]), tx[2] + t * (rx[2] - tx[2])];
                obstacles.iter().any(|o| o.contains(p))
            });
            let state = los_state(tx, rx, &obstacles);
            assert_eq!(state == LosState::Nlos, sampled, "{tx:?} -> {rx:?}");
            assert_eq!(state, los_state(rx, tx, &obstacles));
            nlos += sampled as usize;
        }
        assert!(nlos > 50, "too few blocked links to be a meaningful check: {nlos}");
    }

    #[test]
    fn fdm_round_robin() {
        let a = schedule_fdm(&[(0, 0.1), (1, 0.5), (2, 0.9)], 10).unwrap();
        assert_eq!(a.subbands.values().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        let served: Vec<(usize, f64)> = (0..12).map(|i| (i, (i as f64 * 0.37).sin())).collect();
        let a = schedule_fdm(&served, 10).unwrap();
        let mut counts = [0; 10];
        a.subbands.values().for_each(|&b| counts[b] += 1);
        assert_eq!(counts.iter().filter(|&&c| c == 2).count(), 2);
        let mut rev = served.clone();
        rev.reverse();
        assert_eq!(schedule_fdm(&rev, 10).unwrap(), a);
        // neighbours in AoD land on different sub-bands
        let mut order = served.clone();
        order.sort_by(|x, y| x.1.total_cmp(&y.1));
        for w in order.windows(2) {
            assert_ne!(a.subbands[&w[0].0], a.subbands[&w[1].0]);
        }
        assert!(schedule_fdm(&served, 0).is_err());
    }

    fn single_path_links(gains: &[Complex64]) -> LinkSet {
        let g = ArrayGeometry::ula(2, 16, 28e9).unwrap();
        let chans = vec![gains
            .iter()
            .enumerate()
            .map(|(k, &gain)| {
                Channel::new(
                    0,
                    k,
                    vec![PathComponent {
                        gain,
                        aoa: Angle::Linear(0.3),
                        aod: Angle::Linear(-0.2),
                        is_los: true,
                    }],
                    &g,
                    &g,
                )
                .unwrap()
            })
            .collect()];
        LinkSet::new(vec![g.clone()], vec![g; gains.len()], chans).unwrap()
    }

    fn band(power: f64, noise: f64) -> DataBand {
        DataBand {
            carrier_freq: 28e9,
            num_subbands: 10,
            subband_bandwidth: 10e6,
            power,
            noise,
        }
    }

    #[test]
    fn sinr_cap_and_interference() {
        let links = single_path_links(&[Complex64::new(1e-4, 0.0)]);
        let s = Stream {
            ap: 0,
            mobile: 0,
            subband: 4,
            aod: Angle::Linear(-0.2),
            aoa: Angle::Linear(0.3),
        };
        let out = data_sinr(&links, &[s], &band(1.0, 1e-12)).unwrap();
        assert_eq!(out[0], SINR_CAP);

        let links = single_path_links(&[Complex64::new(1e-6, 0.0), Complex64::new(1e-6, 0.0)]);
        let streams = [s, Stream { mobile: 1, ..s }];
        let out = data_sinr(&links, &streams, &band(1.0, 1e-13)).unwrap();
        assert!(out.iter().all(|&x| x <= 1.0));
        // separating them in frequency removes the interference
        let apart = [s, Stream { mobile: 1, subband: 5, ..s }];
        let sep = data_sinr(&links, &apart, &band(1.0, 1e-13)).unwrap();
        assert!(sep.iter().zip(&out).all(|(a, b)| a >= b));
        assert!(data_sinr(&links, &[s, s], &band(1.0, 1e-13)).is_err());
    }

    #[test]
    fn lone_stream_matches_post_training_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ArrayGeometry::ula(2, 16, 28e9).unwrap();
        for _ in 0..20 {
            let ch = sample_channel(
                0,
                0,
                &LinkGeometry {
                    ap_pos: [0.0, 0.0, 10.0],
                    mobile_pos: [rng.random_range(20.0..150.0), rng.random_range(-50.0..50.0), 1.5],
                    ap_orientation: 0.0,
                    mobile_orientation: 1.0,
                    los: rng.random(),
                },
                &g,
                &g,
                &ChannelParams::default(),
                &mut rng,
            )
            .unwrap();
            let links = LinkSet::new(vec![g.clone()], vec![g.clone()], vec![vec![ch.clone()]]).unwrap();
            let (aoa, aod) = (Angle::Linear(rng.random_range(-1.5..1.5)), Angle::Linear(rng.random_range(-1.5..1.5)));
            let mut b = band(0.1, 1e-12);
            b.num_subbands = 1;
            let s = Stream {
                ap: 0,
                mobile: 0,
                subband: 0,
                aod,
                aoa,
            };
            let got = data_sinr(&links, &[s], &b).unwrap()[0];
            let want = post_training_snr(&ch, &g, &g, aoa, aod, 0.1, 1e-12).unwrap().min(SINR_CAP);
            assert!((got - want).abs() <= 1e-9 * want.max(1e-30), "{got} vs {want}");
        }
    }

    #[test]
    fn frame_simulation_is_deterministic() {
        let scenario = Scenario {
            topology: TopologyParams {
                num_mobiles: 4,
                ap_array: ArraySpec::ula(2, 8),
                mobile_array: ArraySpec::ula(2, 4),
                ..Default::default()
            },
            ..Default::default()
        };
        let shape = TrainingShape { repetitions: 1, p: 8, q: 16 };
        let a = simulate_frame(&scenario, shape, EstimatorKind::Lml, 1, 2).unwrap();
        let b = simulate_frame(&scenario, shape, EstimatorKind::Lml, 1, 2).unwrap();
        assert_eq!(a.sinr, b.sinr);
        assert!(a.sinr.iter().all(|x| x.is_finite() && *x >= 0.0 && *x <= SINR_CAP));
        assert!(a.access.associated_count() > 0);
    }
}
