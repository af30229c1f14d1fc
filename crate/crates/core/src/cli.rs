//! `squeezesim` subcommands. Each one reads a [`RunConfig`], writes its files
//! into `--out` and echoes the effective configuration next to them, so a
//! run can be repeated from its own output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::calibration::{threshold_for_policy, Calibration};
use crate::config::{FitSection, Resolved, RunConfig};
use crate::error::{Error, Result};
use crate::model::ResonatorModel;
use crate::spectra::{
    extrema_for_state, output_covariance, pair_scattering, phase_scan_trace, power_sweep, spectrum_grid, theta_grid,
    SweepOptions,
};
use crate::steady::{select_branch, solve_with_policy, PairDrift, SteadyState};
use crate::trace::{
    detect_resonances, estimate_fsr, fit_lorentzian, load_trace, q_statistics, DetrendOptions, FitOptions,
    LoadOptions, QStatistics, ResonanceFit,
};
use crate::validate::{run_validation, ValidationReport};

/// Exit status for a run whose embedded checks failed.
pub const EXIT_CHECKS_FAILED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "squeezesim", version, about = "Kerr microresonator squeezing simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: one per processor).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Encoding of tabular outputs.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Homodyne variance over the frequency and LO-phase grids.
    Spectrum,
    /// Squeezing and anti-squeezing against pump power.
    Sweep,
    /// Emulated spectrum-analyzer trace of a scanned LO phase.
    PhaseScan,
    /// Lorentzian fits of every resonance in transmission traces.
    Fit {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Q and escape-efficiency statistics over earlier `fits.json` files.
    Stats {
        #[arg(required = true)]
        fits: Vec<PathBuf>,
    },
    /// Oscillation threshold of the configured side-mode pair.
    Threshold,
    /// Invariant suite plus the stochastic cross-check.
    Validate,
}

/// Whether all checks embedded in a command passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    ChecksFailed,
}

/// Rounds dB values to 1e-9 dB so that round-off below that (for example
/// `10 log10(1 + 2^-52)`) does not show up in output files.
fn db(x: f64) -> f64 {
    let r = (x * 1e9).round() / 1e9;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

/// Writes `rows` as `<stem>.csv` (with `header` even when empty) or as a
/// JSON array `<stem>.json`.
fn write_table<T: Serialize>(dir: &Path, stem: &str, header: &[&str], rows: &[T], format: Format) -> Result<()> {
    match format {
        Format::Json => write_json(&dir.join(format!("{stem}.json")), rows),
        Format::Csv => {
            let path = dir.join(format!("{stem}.csv"));
            let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(&path)
                .map_err(csv_err)?;
            w.write_record(header).map_err(csv_err)?;
            for row in rows {
                w.serialize(row).map_err(csv_err)?;
            }
            w.flush()?;
            info!("wrote {}", path.display());
            Ok(())
        }
    }
}

struct Context {
    cfg: RunConfig,
    resolved: Resolved,
}

fn load_context(cli: &Cli) -> Result<Context> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::config("--config", "this command needs a configuration file"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let resolved = cfg.resolve()?;
    fs::write(cli.out.join("effective_config.toml"), cfg.to_toml()?)?;
    Ok(Context { cfg, resolved })
}

/// Model (with the detuning the policy implies) and selected pump state at
/// the operating power.
fn operating_point(r: &Resolved) -> Result<(ResonatorModel, SteadyState)> {
    let (model, roots) = solve_with_policy(&r.model, r.operating_power, r.detuning)?;
    let state = select_branch(&roots, r.branch)?;
    Ok((model, state))
}

#[derive(Debug, Serialize)]
struct ThresholdInfo {
    power_mw: f64,
    rho: f64,
    /// Operating power over threshold power.
    power_ratio: f64,
}

fn threshold_info(r: &Resolved) -> Option<ThresholdInfo> {
    let th = threshold_for_policy(&r.model, r.mode_index, r.detuning).ok()?;
    Some(ThresholdInfo {
        power_mw: th.power * 1e3,
        rho: th.rho,
        power_ratio: r.operating_power / th.power,
    })
}

#[derive(Serialize)]
struct SpectrumRow {
    omega_hz: f64,
    theta_rad: f64,
    variance_db: f64,
}

#[derive(Serialize)]
struct SpectrumSummary {
    frequency_hz: f64,
    operating_power_mw: f64,
    mode_index: i32,
    s_min: f64,
    s_max: f64,
    s_min_db: f64,
    s_max_db: f64,
    /// Positive dB below shot noise.
    squeezing_db: f64,
    anti_squeezing_db: f64,
    theta_opt_rad: f64,
    rho: f64,
    kerr_shift_over_half_kappa: f64,
    kappa: f64,
    g0: f64,
    eta_escape: f64,
    eta_total: f64,
    /// `null` when the pair never reaches threshold.
    threshold: Option<ThresholdInfo>,
    calibration: Option<Calibration>,
}

fn cmd_spectrum(cli: &Cli) -> Result<Outcome> {
    let Context { cfg, resolved: r } = load_context(cli)?;
    let (model, state) = operating_point(&r)?;
    let l = r.mode_index;
    let omegas: Vec<f64> = cfg
        .analysis
        .frequencies_hz
        .iter()
        .map(|f| 2.0 * std::f64::consts::PI * f)
        .collect();
    let thetas = theta_grid(cfg.analysis.theta_points);
    let spec = spectrum_grid(&model, &state, l, &r.chain, &omegas, &thetas)?;
    let mut rows = Vec::with_capacity(omegas.len() * thetas.len());
    for (i, f) in cfg.analysis.frequencies_hz.iter().enumerate() {
        for (j, t) in thetas.iter().enumerate() {
            rows.push(SpectrumRow {
                omega_hz: *f,
                theta_rad: *t,
                variance_db: db(spec.variance_db[i][j]),
            });
        }
    }
    write_table(&cli.out, "spectrum", &["omega_hz", "theta_rad", "variance_db"], &rows, cli.format)?;

    let ext = extrema_for_state(&model, &state, l, &r.chain, r.omega)?;
    let summary = SpectrumSummary {
        frequency_hz: cfg.analysis.frequency_hz,
        operating_power_mw: cfg.drive.operating_power_mw,
        mode_index: l,
        s_min: ext.s_min,
        s_max: ext.s_max,
        s_min_db: db(ext.s_min_db),
        s_max_db: db(ext.s_max_db),
        squeezing_db: db(-ext.s_min_db),
        anti_squeezing_db: db(ext.s_max_db),
        theta_opt_rad: ext.theta_opt,
        rho: state.rho,
        kerr_shift_over_half_kappa: model.g0 * state.rho / (0.5 * model.kappa()),
        kappa: model.kappa(),
        g0: model.g0,
        eta_escape: model.escape_efficiency(),
        eta_total: r.chain.total(),
        threshold: threshold_info(&r),
        calibration: r.calibration,
    };
    write_json(&cli.out.join("summary.json"), &summary)?;
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct SweepRow {
    power_mw: f64,
    s_min_db: Option<f64>,
    s_max_db: Option<f64>,
    rho: f64,
    threshold_flag: u8,
}

fn cmd_sweep(cli: &Cli) -> Result<Outcome> {
    let Context { cfg, resolved: r } = load_context(cli)?;
    let powers: Vec<f64> = cfg.drive.powers_mw.iter().map(|p| p * 1e-3).collect();
    let opts = SweepOptions {
        branch: r.branch,
        detuning: r.detuning,
    };
    let points = power_sweep(&r.model, &r.chain, &powers, r.mode_index, r.omega, &opts)?;
    let rows: Vec<SweepRow> = cfg
        .drive
        .powers_mw
        .iter()
        .zip(&points)
        .map(|(mw, p)| SweepRow {
            power_mw: *mw,
            s_min_db: p.s_min_db.map(db),
            s_max_db: p.s_max_db.map(db),
            rho: p.rho,
            threshold_flag: u8::from(p.above_threshold),
        })
        .collect();
    let flagged = rows.iter().filter(|r| r.threshold_flag == 1).count();
    if flagged > 0 {
        warn!("{flagged} sweep point(s) at or above threshold");
    }
    write_table(
        &cli.out,
        "sweep",
        &["power_mw", "s_min_db", "s_max_db", "rho", "threshold_flag"],
        &rows,
        cli.format,
    )?;
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct PhaseScanRow {
    time_s: f64,
    theta_rad: f64,
    variance_db: f64,
    shot_noise_db: f64,
}

fn cmd_phase_scan(cli: &Cli) -> Result<Outcome> {
    let Context { cfg, resolved: r } = load_context(cli)?;
    let (model, state) = operating_point(&r)?;
    let cov = output_covariance(&pair_scattering(&model, &state, r.mode_index, r.omega)?, &r.chain)?;
    let trace = phase_scan_trace(&cov, &r.chain.lo, &cfg.analysis.phase_scan.settings(), cfg.seed)?;
    let rows: Vec<PhaseScanRow> = (0..trace.time_s.len())
        .map(|k| PhaseScanRow {
            time_s: trace.time_s[k],
            theta_rad: trace.theta[k],
            variance_db: db(trace.variance_db[k]),
            shot_noise_db: db(trace.shot_noise_db[k]),
        })
        .collect();
    write_table(
        &cli.out,
        "phase_scan",
        &["time_s", "theta_rad", "variance_db", "shot_noise_db"],
        &rows,
        cli.format,
    )?;
    Ok(Outcome::Pass)
}

/// One fitted resonance as stored in `fits.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub trace: String,
    pub resonance: usize,
    #[serde(flatten)]
    pub fit: ResonanceFit,
}

#[derive(Debug, Serialize)]
struct RejectedFit {
    trace: String,
    resonance: usize,
    center_nm: f64,
    reason: String,
}

#[derive(Debug, Serialize)]
struct TraceFsr {
    trace: String,
    resonances: usize,
    /// `null` with fewer than three fitted resonances.
    fsr_hz: Option<f64>,
}

#[derive(Debug, Serialize)]
struct StatsReport {
    count: usize,
    statistics: Option<QStatistics>,
    fsr: Vec<TraceFsr>,
}

fn fit_settings(cli: &Cli) -> Result<FitSection> {
    match &cli.config {
        None => Ok(FitSection::default()),
        Some(path) => {
            let mut cfg = RunConfig::load(path)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            fs::write(cli.out.join("effective_config.toml"), cfg.to_toml()?)?;
            Ok(cfg.fit)
        }
    }
}

fn stats_report(records: &[FitRecord], bins: usize) -> Result<StatsReport> {
    let fits: Vec<ResonanceFit> = records.iter().map(|r| r.fit).collect();
    let statistics = if fits.is_empty() {
        None
    } else {
        Some(q_statistics(&fits, bins)?)
    };
    let mut per_trace: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        per_trace.entry(&r.trace).or_default().push(r.fit.center);
    }
    let fsr = per_trace
        .into_iter()
        .map(|(trace, centers)| TraceFsr {
            trace: trace.to_string(),
            resonances: centers.len(),
            fsr_hz: estimate_fsr(&centers).ok(),
        })
        .collect();
    Ok(StatsReport {
        count: fits.len(),
        statistics,
        fsr,
    })
}

fn cmd_fit(cli: &Cli, traces: &[PathBuf]) -> Result<Outcome> {
    let settings = fit_settings(cli)?;
    let load = LoadOptions {
        detrend: settings
            .detrend
            .then(|| DetrendOptions::for_fwhm(settings.expected_fwhm_pm * 1e-3)),
    };
    let opts = FitOptions {
        prior: settings.prior,
        max_rms: settings.max_rms,
        ..FitOptions::default()
    };
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for path in traces {
        let name = path.display().to_string();
        let trace = load_trace(path, &load)?;
        let windows = detect_resonances(&trace, settings.min_prominence, settings.min_spacing_nm);
        info!("{name}: {} candidate resonance(s)", windows.len());
        for (k, w) in windows.iter().enumerate() {
            match fit_lorentzian(&trace, w, &opts) {
                Ok(fit) => records.push(FitRecord {
                    trace: name.clone(),
                    resonance: k,
                    fit,
                }),
                Err(e) => {
                    warn!("{name}: resonance {k} at {} nm rejected: {e}", w.center_nm);
                    rejected.push(RejectedFit {
                        trace: name.clone(),
                        resonance: k,
                        center_nm: w.center_nm,
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    write_json(&cli.out.join("fits.json"), &records)?;
    #[derive(Serialize)]
    struct FitStats {
        #[serde(flatten)]
        report: StatsReport,
        rejected: Vec<RejectedFit>,
    }
    let report = stats_report(&records, settings.bins)?;
    write_json(&cli.out.join("fit_stats.json"), &FitStats { report, rejected })?;
    Ok(Outcome::Pass)
}

fn cmd_stats(cli: &Cli, inputs: &[PathBuf]) -> Result<Outcome> {
    let settings = fit_settings(cli)?;
    let mut records: Vec<FitRecord> = Vec::new();
    for path in inputs {
        let text = fs::read_to_string(path)?;
        let mut batch: Vec<FitRecord> = serde_json::from_str(&text)?;
        records.append(&mut batch);
    }
    let report = stats_report(&records, settings.bins)?;
    write_json(&cli.out.join("stats.json"), &report)?;
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct ThresholdReport {
    mode_index: i32,
    reachable: bool,
    threshold_power_mw: Option<f64>,
    threshold_rho: Option<f64>,
    operating_power_mw: f64,
    /// Operating power over threshold power.
    power_ratio: Option<f64>,
    /// Whether the selected operating state is below threshold.
    operating_point_stable: bool,
    /// Growth rate of the pair fluctuations at the operating point (1/s);
    /// negative below threshold.
    growth_rate: f64,
    kappa: f64,
    g0: f64,
}

fn cmd_threshold(cli: &Cli) -> Result<Outcome> {
    let Context { cfg, resolved: r } = load_context(cli)?;
    let th = threshold_info(&r);
    let (model, state) = operating_point(&r)?;
    let drift = PairDrift::new(&model, &state, r.mode_index);
    let report = ThresholdReport {
        mode_index: r.mode_index,
        reachable: th.is_some(),
        threshold_power_mw: th.as_ref().map(|t| t.power_mw),
        threshold_rho: th.as_ref().map(|t| t.rho),
        operating_power_mw: cfg.drive.operating_power_mw,
        power_ratio: th.as_ref().map(|t| t.power_ratio),
        operating_point_stable: drift.is_stable(),
        growth_rate: drift.dominant_eigenvalue().re,
        kappa: r.model.kappa(),
        g0: r.model.g0,
    };
    write_json(&cli.out.join("threshold.json"), &report)?;
    Ok(Outcome::Pass)
}

fn cmd_validate(cli: &Cli) -> Result<Outcome> {
    let Context { cfg, resolved } = load_context(cli)?;
    let report: ValidationReport = run_validation(&cfg, &resolved, cfg.seed)?;
    for c in report.failures() {
        warn!("check {} failed: measured {} against {}", c.name, c.measured, c.limit);
    }
    write_json(&cli.out.join("validate.json"), &report)?;
    Ok(if report.pass {
        Outcome::Pass
    } else {
        Outcome::ChecksFailed
    })
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome> {
    if let Some(jobs) = cli.jobs {
        // a pool may already exist when called repeatedly in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Spectrum => cmd_spectrum(cli),
        Command::Sweep => cmd_sweep(cli),
        Command::PhaseScan => cmd_phase_scan(cli),
        Command::Fit { traces } => cmd_fit(cli, traces),
        Command::Stats { fits } => cmd_stats(cli, fits),
        Command::Threshold => cmd_threshold(cli),
        Command::Validate => cmd_validate(cli),
    }
}

/// Installs the `SQUEEZESIM_LOG` logger (default: warnings).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("SQUEEZESIM_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn db_rounding_clears_roundoff_and_negative_zero() {
        assert_eq!(db(10.0 * (1.0f64 + f64::EPSILON).log10()), 0.0);
        assert!(db(-1e-12).is_sign_positive());
        assert_eq!(db(-2.9876543211), -2.987654321);
    }

    #[test]
    fn parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from([
            "squeezesim", "sweep", "--config", "a.toml", "--out", "o", "--seed", "7", "--jobs", "2", "--format", "json",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Sweep));
        assert_eq!(cli.seed, Some(7));
        assert_eq!(cli.jobs, Some(2));
        assert_eq!(cli.format, Format::Json);
    }

    #[test]
    fn fit_requires_trace_paths() {
        assert!(Cli::try_parse_from(["squeezesim", "fit"]).is_err());
    }
}
