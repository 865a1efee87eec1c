//! The `beamacq` command line: one subcommand per study, CSV output.
//!
//! Every CSV starts with the resolved config as `# ` comment lines; stripping
//! that prefix gives a TOML file that reproduces the run. Exit status is 0 on
//! success, 2 for a bad config or command line and 1 for anything else, with
//! a one-line JSON error record on stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiments::{
    compare_codebooks, compare_estimators, fft_size_study, link_analysis, overhead_study, quantile, snr_db,
    OverheadCell, SnrSeries,
};

#[derive(Debug, Parser)]
#[command(name = "beamacq", version, about = "Beam acquisition studies for mmWave initial access")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Trials per point, overriding the config.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Post-training SNR against pilot budget for each training codebook.
    CompareCodebooks,
    /// SNR distributions of MP, ML and LML next to the optimal DFT bound.
    CompareEstimators,
    /// Mean ML post-training SNR against FFT size.
    FftSize,
    /// Optimized training overhead over mobile count, blocking rate and T_max.
    OptimizeOverhead,
    /// Alignment probabilities and post-training SNR on a point link.
    LinkAnalysis,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::CompareCodebooks => "compare-codebooks",
            Command::CompareEstimators => "compare-estimators",
            Command::FftSize => "fft-size",
            Command::OptimizeOverhead => "optimize-overhead",
            Command::LinkAnalysis => "link-analysis",
        }
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    status: &'a str,
    kind: &'a str,
    message: String,
}

fn report(kind: &str, message: String) {
    let record = ErrorRecord {
        status: "error",
        kind,
        message,
    };
    eprintln!("{}", serde_json::to_string(&record).expect("error record serializes"));
}

enum Failure {
    Config(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Internal(other.to_string()),
        }
    }
}

/// Run the tool on `args` (program name first) and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            report("usage", e.to_string().trim_end().to_string());
            return 2;
        }
    };
    match execute(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(Failure::Config(m)) => {
            report("config", m);
            2
        }
        Err(Failure::Internal(m)) => {
            report("internal", m);
            1
        }
    }
}

/// The resolved config: file or defaults, then command-line overrides.
fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(trials) = cli.trials {
        cfg.run.trials = trials;
    }
    Ok(cfg)
}

enum Prepared {
    Codebooks(crate::experiments::CodebookStudy),
    Estimators(crate::experiments::EstimatorStudy),
    FftSize(crate::experiments::FftSizeStudy),
    Overhead(crate::experiments::OverheadStudy),
    Link(crate::experiments::PointLink, Vec<f64>),
}

fn execute(cli: &Cli) -> std::result::Result<Vec<PathBuf>, Failure> {
    let cfg = resolve(cli)?;
    // validate everything before any simulation
    let prepared = match cli.command {
        Command::CompareCodebooks => Prepared::Codebooks(cfg.codebook_study()?),
        Command::CompareEstimators => Prepared::Estimators(cfg.estimator_study()?),
        Command::FftSize => Prepared::FftSize(cfg.fft_size_study()?),
        Command::OptimizeOverhead => Prepared::Overhead(cfg.overhead_study()?),
        Command::LinkAnalysis => {
            let (link, snrs) = cfg.point_link()?;
            Prepared::Link(link, snrs)
        }
    };
    let echo = echo_header(cli.command, &cfg.to_toml()?);
    let pool = match cli.threads {
        Some(0) => return Err(Failure::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| Failure::Internal(format!("thread pool: {e}")))?;

    let seed = cfg.run.seed;
    let tables = pool.install(|| -> Result<Vec<Table>> {
        Ok(match &prepared {
            Prepared::Codebooks(study) => series_tables("compare_codebooks", &compare_codebooks(study, seed)?),
            Prepared::Estimators(study) => series_tables("compare_estimators", &compare_estimators(study, seed)?),
            Prepared::FftSize(study) => series_tables("fft_size", &fft_size_study(study, seed)?),
            Prepared::Overhead(study) => overhead_tables(&overhead_study(study, seed)?),
            Prepared::Link(link, snrs) => {
                let points = link_analysis(link, snrs, cfg.run.trials, seed)?;
                link_tables(link, &points)
            }
        })
    })?;

    fs::create_dir_all(&cli.out).map_err(|e| Failure::Internal(format!("{}: {e}", cli.out.display())))?;
    tables
        .iter()
        .map(|t| t.write(&cli.out, &echo).map_err(Failure::from))
        .collect()
}

fn echo_header(command: Command, toml: &str) -> String {
    let mut out = format!("# # beamacq {} {}\n", command.name(), env!("CARGO_PKG_VERSION"));
    for line in toml.lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Recover the config echoed at the top of a CSV written by this tool.
pub fn echoed_config(csv_text: &str) -> Result<ExperimentConfig> {
    let toml: String = csv_text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.strip_prefix("# ").unwrap_or(&l[1..]))
        .collect::<Vec<_>>()
        .join("\n");
    ExperimentConfig::parse(&toml)
}

enum Field {
    Int(usize),
    Num(f64),
    Text(String),
}

impl Field {
    fn render(&self) -> Result<String> {
        match self {
            Field::Int(n) => Ok(n.to_string()),
            Field::Num(x) if x.is_finite() => Ok(x.to_string()),
            Field::Num(x) => Err(Error::Precondition(format!("refusing to write non-finite value {x}"))),
            Field::Text(s) => Ok(s.clone()),
        }
    }
}

struct Table {
    name: String,
    header: Vec<&'static str>,
    rows: Vec<Vec<Field>>,
}

impl Table {
    fn new(name: impl Into<String>, header: Vec<&'static str>) -> Self {
        Self {
            name: name.into(),
            header,
            rows: Vec::new(),
        }
    }

    fn write(&self, dir: &Path, echo: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{}.csv", self.name));
        let mut buf = echo.as_bytes().to_vec();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&self.header)?;
            for row in &self.rows {
                debug_assert_eq!(row.len(), self.header.len());
                w.write_record(row.iter().map(Field::render).collect::<Result<Vec<_>>>()?)?;
            }
            w.flush()?;
        }
        fs::File::create(&path)?.write_all(&buf)?;
        Ok(path)
    }
}

/// Levels 0, 0.01, ..., 1 of the empirical quantile files.
fn quantile_levels() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

fn series_tables(prefix: &str, series: &[SnrSeries]) -> Vec<Table> {
    let mut summary = Table::new(
        format!("{prefix}_summary"),
        vec![
            "series",
            "ap_antennas",
            "fft_size",
            "repetitions",
            "mobile_beams",
            "ap_beams",
            "pilots",
            "samples",
            "mean_snr_db",
            "median_snr_db",
            "p10_snr_db",
            "p90_snr_db",
        ],
    );
    let mut quantiles = Table::new(
        format!("{prefix}_quantiles"),
        vec!["series", "ap_antennas", "fft_size", "pilots", "quantile", "snr_db"],
    );
    for s in series {
        let db: Vec<f64> = s.snr.iter().map(|&x| snr_db(x)).collect();
        summary.rows.push(vec![
            Field::Text(s.label.clone()),
            Field::Int(s.ap_antennas),
            Field::Int(s.fft_size),
            Field::Int(s.shape.repetitions),
            Field::Int(s.shape.p),
            Field::Int(s.shape.q),
            Field::Int(s.pilots()),
            Field::Int(db.len()),
            Field::Num(db.iter().sum::<f64>() / db.len() as f64),
            Field::Num(quantile(&db, 0.5)),
            Field::Num(quantile(&db, 0.1)),
            Field::Num(quantile(&db, 0.9)),
        ]);
        for level in quantile_levels() {
            quantiles.rows.push(vec![
                Field::Text(s.label.clone()),
                Field::Int(s.ap_antennas),
                Field::Int(s.fft_size),
                Field::Int(s.pilots()),
                Field::Num(level),
                Field::Num(quantile(&db, level)),
            ]);
        }
    }
    vec![summary, quantiles]
}

fn overhead_tables(cells: &[OverheadCell]) -> Vec<Table> {
    let mut summary = Table::new(
        "optimize_overhead_summary",
        vec![
            "num_mobiles",
            "blockage_rate_per_s",
            "t_max_s",
            "repetitions",
            "mobile_beams",
            "ap_beams",
            "training_bandwidth_hz",
            "t_slot_s",
            "t_ia_s",
            "t_frame_s",
            "rate_nats_per_s_per_hz",
            "overhead_ratio",
        ],
    );
    let mut ladder = Table::new(
        "optimize_overhead_ladder",
        vec![
            "num_mobiles",
            "blockage_rate_per_s",
            "t_max_s",
            "repetitions",
            "mobile_beams",
            "ap_beams",
            "t_ia_s",
            "t_frame_s",
            "rate_nats_per_s_per_hz",
            "overhead_ratio",
            "chosen",
        ],
    );
    for c in cells {
        let s = &c.solution;
        summary.rows.push(vec![
            Field::Int(c.num_mobiles),
            Field::Num(c.blockage_rate),
            Field::Num(c.t_max),
            Field::Int(s.shape.repetitions),
            Field::Int(s.shape.p),
            Field::Int(s.shape.q),
            Field::Num(s.b_tr),
            Field::Num(s.t_slot),
            Field::Num(s.t_ia),
            Field::Num(s.t_frame),
            Field::Num(s.objective),
            Field::Num(s.overhead_ratio),
        ]);
        // infeasible rungs have no frame length and are left out
        for r in s.ladder.iter().filter(|r| r.feasible) {
            ladder.rows.push(vec![
                Field::Int(c.num_mobiles),
                Field::Num(c.blockage_rate),
                Field::Num(c.t_max),
                Field::Int(r.shape.repetitions),
                Field::Int(r.shape.p),
                Field::Int(r.shape.q),
                Field::Num(r.t_ia),
                Field::Num(r.t_frame),
                Field::Num(r.objective),
                Field::Num(r.overhead_ratio),
                Field::Int(usize::from(r.shape == s.shape)),
            ]);
        }
    }
    vec![summary, ladder]
}

fn link_tables(link: &crate::experiments::PointLink, points: &[crate::experiments::LinkAnalysisPoint]) -> Vec<Table> {
    let mut alignment = Table::new(
        "link_analysis_alignment",
        vec![
            "training_snr_db",
            "path",
            "path_offset_db",
            "empirical_probability",
            "approximate_probability",
        ],
    );
    let mut quantiles = Table::new(
        "link_analysis_quantiles",
        vec!["training_snr_db", "quantile", "post_training_snr_db"],
    );
    for p in points {
        for (s, &off) in link.path_offsets_db.iter().enumerate() {
            alignment.rows.push(vec![
                Field::Num(p.snr_db),
                Field::Int(s + 1),
                Field::Num(off),
                Field::Num(p.empirical[s]),
                Field::Num(p.approximation[s]),
            ]);
        }
        let db: Vec<f64> = p.post_training.iter().map(|&x| snr_db(x)).collect();
        for level in quantile_levels() {
            quantiles
                .rows
                .push(vec![Field::Num(p.snr_db), Field::Num(level), Field::Num(quantile(&db, level))]);
        }
    }
    vec![alignment, quantiles]
}
