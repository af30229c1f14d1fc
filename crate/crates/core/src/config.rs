//! Run configuration: a TOML document with one table per concern.
//!
//! Alternatives (`q_intrinsic` / `kappa_i`, `g0` / `material` /
//! `calibrate_g0`, `eta_total` / `factors`, ...) must be given exactly once;
//! violations are reported with the dotted path of the offending field.
//! Every optional knob is materialized on load, so [`RunConfig::to_toml`]
//! emits an effective configuration that re-parses to the same value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_g0, Calibration, CalibrationTarget};
use crate::error::{Error, Result};
use crate::model::{
    g0_from_material, kappa_from_q, omega_from_wavelength, DetectionChain, G0Convention, HomodyneObservable,
    LocalOscillator, MaterialParams, ResonatorModel,
};
use crate::spectra::PhaseScanSettings;
use crate::steady::{BranchPolicy, DetuningPolicy};
use crate::trace::CouplingPrior;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub resonator: ResonatorSection,
    #[serde(default)]
    pub drive: DriveSection,
    pub detection: DetectionSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub fit: FitSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonatorSection {
    /// Pump wavelength (nm).
    pub wavelength_nm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_intrinsic: Option<f64>,
    /// Intrinsic linewidth (rad/s).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_i: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_loaded: Option<f64>,
    /// External coupling linewidth (rad/s).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_e: Option<f64>,
    pub fsr_hz: f64,
    /// Second-order dispersion (rad/s).
    #[serde(default)]
    pub d2: f64,
    #[serde(default = "default_mode_index")]
    pub mode_index: i32,
    /// Kerr coupling per photon (rad/s).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material: Option<MaterialSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrate_g0: Option<CalibrateSection>,
}

fn default_mode_index() -> i32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSection {
    pub n2: f64,
    pub n0: f64,
    pub v_eff: f64,
    #[serde(default)]
    pub convention: G0Convention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateSection {
    /// On-chip power mapped onto the target (mW).
    pub power_mw: f64,
    #[serde(default)]
    pub target: CalibrationTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetuningKind {
    #[default]
    Fixed,
    Locked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetuningSection {
    #[serde(default)]
    pub kind: DetuningKind,
    /// Laser detuning (fixed) or effective detuning (locked), in units of κ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub over_kappa: Option<f64>,
    /// The same in rad/s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rad_per_s: Option<f64>,
}

impl Default for DetuningSection {
    fn default() -> Self {
        Self {
            kind: DetuningKind::Fixed,
            over_kappa: Some(0.0),
            rad_per_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSection {
    /// Powers for `sweep` (mW).
    #[serde(default)]
    pub powers_mw: Vec<f64>,
    /// Power for single-point commands (mW).
    #[serde(default = "default_operating_power")]
    pub operating_power_mw: f64,
    #[serde(default)]
    pub detuning: DetuningSection,
}

fn default_operating_power() -> f64 {
    50.0
}

impl Default for DriveSection {
    fn default() -> Self {
        Self {
            powers_mw: Vec::new(),
            operating_power_mw: default_operating_power(),
            detuning: DetuningSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorsSection {
    pub coupling: f64,
    pub propagation: f64,
    pub visibility: f64,
    pub photodiode: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<FactorsSection>,
    /// Extra LO phase on the `-l` tooth (rad).
    #[serde(default)]
    pub lo_relative_phase: f64,
    #[serde(default)]
    pub observable: HomodyneObservable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Spectrum grid (Hz, ω/2π).
    #[serde(default = "default_frequencies")]
    pub frequencies_hz: Vec<f64>,
    /// Frequency for sweeps, scans and summaries (Hz).
    #[serde(default = "default_analysis_frequency")]
    pub frequency_hz: f64,
    /// LO phases spread over [0, π).
    #[serde(default = "default_theta_points")]
    pub theta_points: usize,
    #[serde(default)]
    pub phase_scan: PhaseScanSection,
}

fn default_frequencies() -> Vec<f64> {
    vec![7e6]
}

fn default_analysis_frequency() -> f64 {
    7e6
}

fn default_theta_points() -> usize {
    64
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            frequencies_hz: default_frequencies(),
            frequency_hz: default_analysis_frequency(),
            theta_points: default_theta_points(),
            phase_scan: PhaseScanSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseScanSection {
    pub periods: f64,
    pub samples_per_period: usize,
    pub sweep_time_s: f64,
    pub rbw_hz: f64,
    pub vbw_hz: f64,
    pub jitter: bool,
}

impl Default for PhaseScanSection {
    fn default() -> Self {
        let d = PhaseScanSettings::default();
        Self {
            periods: d.periods,
            samples_per_period: d.samples_per_period,
            sweep_time_s: d.sweep_time,
            rbw_hz: d.rbw_hz,
            vbw_hz: d.vbw_hz,
            jitter: true,
        }
    }
}

impl PhaseScanSection {
    pub fn settings(&self) -> PhaseScanSettings {
        PhaseScanSettings {
            periods: self.periods,
            samples_per_period: self.samples_per_period,
            sweep_time: self.sweep_time_s,
            theta_start: None,
            rbw_hz: self.rbw_hz,
            vbw_hz: self.vbw_hz,
            jitter: self.jitter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub branch: BranchPolicy,
    /// Slack allowed on the physicality checks of `validate`.
    pub invariant_tolerance: f64,
    /// Random parameter sets drawn by `validate`.
    pub validation_samples: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            branch: BranchPolicy::default(),
            invariant_tolerance: 1e-9,
            validation_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Welch bin spacing in units of κ.
    pub resolution_over_kappa: f64,
    pub segments: usize,
    /// Probe frequencies in units of κ.
    pub probe_over_kappa: Vec<f64>,
    pub theta_points: usize,
    pub n_sigma: f64,
    /// Scales η_total on the analytic side only (1 = faithful comparison).
    pub analytic_eta_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_dump: Option<PathBuf>,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            resolution_over_kappa: 0.02,
            segments: 400,
            probe_over_kappa: vec![0.05, 0.2, 0.5, 1.0, 3.0],
            theta_points: 8,
            n_sigma: 3.0,
            analytic_eta_scale: 1.0,
            raw_dump: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub prior: CouplingPrior,
    pub bins: usize,
    pub min_prominence: f64,
    pub min_spacing_nm: f64,
    pub detrend: bool,
    /// Sets the detrend window (10× this).
    pub expected_fwhm_pm: f64,
    pub max_rms: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            prior: CouplingPrior::Overcoupled,
            bins: 20,
            min_prominence: 0.05,
            min_spacing_nm: 0.1,
            detrend: true,
            expected_fwhm_pm: 2.0,
            max_rms: 0.05,
        }
    }
}

/// Physical objects built from a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    /// Model with g0 set and Δ as given (locked runs adjust Δ per power).
    pub model: ResonatorModel,
    pub chain: DetectionChain,
    pub detuning: DetuningPolicy,
    pub branch: BranchPolicy,
    pub mode_index: i32,
    pub operating_power: f64,
    /// Analysis angular frequency (rad/s).
    pub omega: f64,
    pub calibration: Option<Calibration>,
}

fn exactly_one(field: &str, names: [&str; 2], present: [bool; 2]) -> Result<()> {
    match present {
        [true, false] | [false, true] => Ok(()),
        [true, true] => Err(Error::config(field, format!("give only one of `{}` and `{}`", names[0], names[1]))),
        [false, false] => Err(Error::config(field, format!("one of `{}` or `{}` is required", names[0], names[1]))),
    }
}

fn positive(field: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(field, format!("must be positive (got {v})")))
    }
}

fn in_context<T>(field: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::config(field, other.to_string()),
    })
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<document>".to_string() } else { path }, e.inner().to_string())
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    /// Structural checks that need no physics.
    pub fn check(&self) -> Result<()> {
        let r = &self.resonator;
        positive("resonator.wavelength_nm", r.wavelength_nm)?;
        positive("resonator.fsr_hz", r.fsr_hz)?;
        exactly_one("resonator", ["q_intrinsic", "kappa_i"], [r.q_intrinsic.is_some(), r.kappa_i.is_some()])?;
        exactly_one("resonator", ["q_loaded", "kappa_e"], [r.q_loaded.is_some(), r.kappa_e.is_some()])?;
        let g0_forms = [r.g0.is_some(), r.material.is_some(), r.calibrate_g0.is_some()];
        match g0_forms.iter().filter(|&&b| b).count() {
            1 => {}
            0 => return Err(Error::config("resonator", "one of `g0`, `material` or `calibrate_g0` is required")),
            _ => return Err(Error::config("resonator", "give only one of `g0`, `material` and `calibrate_g0`")),
        }
        if r.mode_index == 0 {
            return Err(Error::config("resonator.mode_index", "the side mode index must be nonzero"));
        }
        let d = &self.drive.detuning;
        exactly_one("drive.detuning", ["over_kappa", "rad_per_s"], [d.over_kappa.is_some(), d.rad_per_s.is_some()])?;
        for (i, p) in self.drive.powers_mw.iter().enumerate() {
            if !(p.is_finite() && *p >= 0.0) {
                return Err(Error::config(format!("drive.powers_mw[{i}]"), format!("must be non-negative (got {p})")));
            }
        }
        positive("drive.operating_power_mw", self.drive.operating_power_mw)?;
        let det = &self.detection;
        exactly_one("detection", ["eta_total", "factors"], [det.eta_total.is_some(), det.factors.is_some()])?;
        if self.analysis.theta_points < 3 {
            return Err(Error::config("analysis.theta_points", "need at least 3 LO phases"));
        }
        if !self.analysis.frequency_hz.is_finite() {
            return Err(Error::config("analysis.frequency_hz", "must be finite"));
        }
        if self.oracle.theta_points == 0 || self.oracle.segments < 2 {
            return Err(Error::config("oracle", "need at least one LO phase and two segments"));
        }
        positive("oracle.resolution_over_kappa", self.oracle.resolution_over_kappa)?;
        positive("oracle.analytic_eta_scale", self.oracle.analytic_eta_scale)?;
        if self.fit.bins == 0 {
            return Err(Error::config("fit.bins", "must be at least 1"));
        }
        Ok(())
    }

    pub fn chain(&self) -> Result<DetectionChain> {
        let det = &self.detection;
        let chain = match (det.eta_total, det.factors) {
            (Some(eta), None) => in_context("detection.eta_total", DetectionChain::lumped(1.0, eta))?,
            (None, Some(f)) => in_context(
                "detection.factors",
                DetectionChain::new(1.0, f.coupling, f.propagation, f.visibility, f.photodiode),
            )?,
            _ => unreachable!("checked on load"),
        };
        Ok(chain.with_lo(LocalOscillator {
            relative_phase: det.lo_relative_phase,
            observable: det.observable,
        }))
    }

    /// Model without g0 applied (g0 = 0) and the detuning policy.
    fn base_model(&self) -> Result<(ResonatorModel, DetuningPolicy)> {
        let r = &self.resonator;
        let omega0 = omega_from_wavelength(r.wavelength_nm * 1e-9);
        let kappa_i = match (r.q_intrinsic, r.kappa_i) {
            (Some(q), None) => in_context("resonator.q_intrinsic", kappa_from_q(omega0, q))?,
            (None, Some(k)) => k,
            _ => unreachable!("checked on load"),
        };
        let kappa_e = match (r.q_loaded, r.kappa_e) {
            (Some(q), None) => {
                let total = in_context("resonator.q_loaded", kappa_from_q(omega0, q))?;
                if total < kappa_i {
                    return Err(Error::config(
                        "resonator.q_loaded",
                        "loaded Q exceeds intrinsic Q, which would need negative coupling",
                    ));
                }
                total - kappa_i
            }
            (None, Some(k)) => k,
            _ => unreachable!("checked on load"),
        };
        let kappa = kappa_i + kappa_e;
        let d = &self.drive.detuning;
        let value = match (d.over_kappa, d.rad_per_s) {
            (Some(x), None) => x * kappa,
            (None, Some(v)) => v,
            _ => unreachable!("checked on load"),
        };
        let (delta, policy) = match d.kind {
            DetuningKind::Fixed => (value, DetuningPolicy::Fixed),
            DetuningKind::Locked => (value, DetuningPolicy::Locked { effective_detuning: value }),
        };
        let model = in_context(
            "resonator",
            ResonatorModel::new(omega0, kappa_i, kappa_e, delta, r.d2, 0.0, r.fsr_hz),
        )?;
        Ok((model, policy))
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.check()?;
        let chain = self.chain()?;
        let (base, detuning) = self.base_model()?;
        let r = &self.resonator;
        let omega = 2.0 * std::f64::consts::PI * self.analysis.frequency_hz;
        let branch = self.solver.branch;
        let mut calibration = None;
        let model = match (r.g0, r.material, r.calibrate_g0) {
            (Some(g0), None, None) => {
                if !(g0 >= 0.0 && g0.is_finite()) {
                    return Err(Error::config("resonator.g0", format!("must be non-negative (got {g0})")));
                }
                base.with_g0(g0)
            }
            (None, Some(m), None) => {
                let params = in_context("resonator.material", MaterialParams::new(m.n2, m.n0, m.v_eff))?;
                base.with_g0(in_context(
                    "resonator.material",
                    g0_from_material(base.omega0, &params, m.convention),
                )?)
            }
            (None, None, Some(c)) => {
                let power = positive("resonator.calibrate_g0.power_mw", c.power_mw)? * 1e-3;
                let cal = in_context(
                    "resonator.calibrate_g0",
                    calibrate_g0(&base, &chain, r.mode_index, omega, power, c.target, detuning, branch),
                )?;
                let g0 = cal.g0;
                calibration = Some(cal);
                base.with_g0(g0)
            }
            _ => unreachable!("checked on load"),
        };
        Ok(Resolved {
            model,
            chain,
            detuning,
            branch,
            mode_index: r.mode_index,
            operating_power: self.drive.operating_power_mw * 1e-3,
            omega,
            calibration,
        })
    }
}
