//! Invariant suite and stochastic cross-check behind `squeezesim validate`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::threshold_for_policy;
use crate::config::{Resolved, RunConfig};
use crate::error::Result;
use crate::langevin::{cross_validate, simulate_pair, CrossValidation, LangevinSettings};
use crate::model::{DetectionChain, ResonatorModel};
use crate::spectra::{
    homodyne_variance_with, min_symplectic_eigenvalue, output_covariance, pair_scattering, spectrum_grid, theta_grid,
    QuadratureExtrema,
};
use crate::steady::{
    residual_tolerance, select_branch, solve_with_policy, steady_state_for_rho, steady_state_residual, SteadyState,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    /// Worst observed value of the checked quantity.
    pub measured: f64,
    /// Bound it is compared against.
    pub limit: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pass: bool,
    pub checks: Vec<Check>,
    pub oracle: Vec<(String, CrossValidation)>,
}

/// Worst-case margins over randomly drawn below-threshold parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalityMargins {
    pub samples: usize,
    pub min_symplectic: f64,
    pub min_uncertainty_product: f64,
    /// Smallest `variance - (1 - η)`.
    pub min_loss_floor_gap: f64,
    pub max_bogoliubov_error: f64,
    pub max_zero_pump_error: f64,
    pub max_omega_asymmetry: f64,
}

/// Draws `samples` random (coupling, detuning, pump, loss, frequency, LO)
/// combinations around `base` and records the worst invariant margins.
pub fn physicality_margins(base: &ResonatorModel, samples: usize, seed: u64) -> Result<PhysicalityMargins> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = base.kappa();
    let mut m = PhysicalityMargins {
        samples,
        min_symplectic: f64::INFINITY,
        min_uncertainty_product: f64::INFINITY,
        min_loss_floor_gap: f64::INFINITY,
        max_bogoliubov_error: 0.0,
        max_zero_pump_error: 0.0,
        max_omega_asymmetry: 0.0,
    };
    let g0 = if base.g0 > 0.0 { base.g0 } else { 1.0 };
    for _ in 0..samples {
        let escape: f64 = rng.random_range(0.05..1.0);
        let delta = rng.random_range(-2.0..2.0) * k;
        let d2 = rng.random_range(-0.5..0.5) * k;
        let fraction: f64 = rng.random_range(0.0..0.98);
        let eta: f64 = rng.random_range(0.0..=1.0);
        let omega = rng.random_range(-4.0..4.0) * k;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let model = ResonatorModel {
            kappa_e: escape * k,
            kappa_i: (1.0 - escape) * k,
            delta,
            d2,
            g0,
            ..*base
        };
        // Kerr shift up to a fraction of the first instability
        let hk = 0.5 * k;
        let dp = model.mode_detuning(1);
        let disc = dp * dp - 3.0 * hk * hk;
        let u_max = if dp > 0.0 && disc >= 0.0 { (2.0 * dp - disc.sqrt()) / 3.0 } else { 3.0 * k };
        let st = steady_state_for_rho(&model, fraction * u_max / g0)?.0;
        let chain = DetectionChain::lumped(escape, eta)?;

        let s = pair_scattering(&model, &st, 1, omega)?;
        for n in s.bogoliubov_norms() {
            m.max_bogoliubov_error = m.max_bogoliubov_error.max((n - 1.0).abs());
        }
        let cov = output_covariance(&s, &chain)?;
        m.min_symplectic = m.min_symplectic.min(min_symplectic_eigenvalue(&cov));
        let ext = QuadratureExtrema::from_covariance(&cov, &chain.lo);
        m.min_uncertainty_product = m.min_uncertainty_product.min(ext.uncertainty_product());
        m.min_loss_floor_gap = m.min_loss_floor_gap.min(ext.s_min - (1.0 - eta));
        let v = homodyne_variance_with(&cov, theta, &chain.lo);
        let cov_neg = output_covariance(&pair_scattering(&model, &st, 1, -omega)?, &chain)?;
        m.max_omega_asymmetry = m
            .max_omega_asymmetry
            .max((v - homodyne_variance_with(&cov_neg, theta, &chain.lo)).abs());
        let vac = output_covariance(&pair_scattering(&model, &SteadyState::vacuum(), 1, omega)?, &chain)?;
        m.max_zero_pump_error = m
            .max_zero_pump_error
            .max((homodyne_variance_with(&vac, theta, &chain.lo) - 1.0).abs());
    }
    Ok(m)
}

fn check(name: &str, pass: bool, measured: f64, limit: f64, detail: impl Into<String>) -> Check {
    Check {
        name: name.to_string(),
        pass,
        measured,
        limit,
        detail: detail.into(),
    }
}

/// Runs the full suite for a configuration.
pub fn run_validation(cfg: &RunConfig, resolved: &Resolved, seed: u64) -> Result<ValidationReport> {
    let tol = cfg.solver.invariant_tolerance;
    let model = &resolved.model;
    let l = resolved.mode_index;
    let mut checks = Vec::new();

    let phys = physicality_margins(model, cfg.solver.validation_samples, seed)?;
    checks.push(check(
        "symplectic_eigenvalue",
        phys.min_symplectic >= 1.0 - tol,
        phys.min_symplectic,
        1.0 - tol,
        format!("smallest symplectic eigenvalue over {} random sets", phys.samples),
    ));
    checks.push(check(
        "uncertainty_product",
        phys.min_uncertainty_product >= 1.0 - tol,
        phys.min_uncertainty_product,
        1.0 - tol,
        "smallest s_min * s_max",
    ));
    checks.push(check(
        "loss_floor",
        phys.min_loss_floor_gap >= -tol,
        phys.min_loss_floor_gap,
        -tol,
        "smallest variance - (1 - eta_total)",
    ));
    checks.push(check(
        "bogoliubov_normalization",
        phys.max_bogoliubov_error <= 1e-10,
        phys.max_bogoliubov_error,
        1e-10,
        "largest |row norm - 1|",
    ));
    checks.push(check(
        "zero_pump_identity",
        phys.max_zero_pump_error <= 1e-12,
        phys.max_zero_pump_error,
        1e-12,
        "largest |variance - 1| without pump",
    ));
    checks.push(check(
        "omega_symmetry",
        phys.max_omega_asymmetry <= 1e-10,
        phys.max_omega_asymmetry,
        1e-10,
        "largest |V(w) - V(-w)|",
    ));

    let (op_model, roots) = solve_with_policy(model, resolved.operating_power, resolved.detuning)?;
    let drive = crate::model::PumpDrive::from_power(resolved.operating_power, op_model.omega0)?;
    let worst = roots
        .iter()
        .map(|r| steady_state_residual(&op_model, &drive, r.a0))
        .fold(0.0, f64::max);
    let limit = residual_tolerance(&op_model, &drive);
    checks.push(check(
        "steady_state_residual",
        worst <= limit,
        worst,
        limit,
        format!("{} root(s) at the operating power", roots.len()),
    ));
    let op_state = select_branch(&roots, resolved.branch)?;
    let threshold = threshold_for_policy(model, l, resolved.detuning).ok();
    let below = crate::steady::PairDrift::new(&op_model, &op_state, l).is_stable();
    checks.push(check(
        "below_threshold",
        below,
        threshold.map_or(0.0, |t| resolved.operating_power / t.power),
        1.0,
        "operating power over threshold power (0 when unreachable)",
    ));

    let mut oracle = Vec::new();
    let o = &cfg.oracle;
    let kappa = model.kappa();
    let mut settings = LangevinSettings::for_model(
        model,
        o.resolution_over_kappa,
        o.segments,
        o.probe_over_kappa.iter().map(|p| p * kappa).collect(),
        theta_grid(o.theta_points),
    );
    let analytic_chain = DetectionChain::lumped(1.0, (resolved.chain.total() * o.analytic_eta_scale).min(1.0))?
        .with_lo(resolved.chain.lo);
    let mut points = vec![("vacuum".to_string(), SteadyState::vacuum())];
    if below {
        points.push(("operating_point".to_string(), op_state));
    }
    for (i, (label, st)) in points.into_iter().enumerate() {
        settings.raw_dump = (label == "operating_point").then(|| o.raw_dump.clone()).flatten();
        let run = simulate_pair(&op_model, &st, l, &resolved.chain, &settings, seed.wrapping_add(i as u64))?;
        let est = &run.psd_estimate;
        let analytic = spectrum_grid(&op_model, &st, l, &analytic_chain, &est.omega, &est.theta)?;
        let report = cross_validate(&analytic, est, o.n_sigma)?;
        checks.push(check(
            &format!("oracle_{label}"),
            report.pass,
            report.fraction_within,
            0.95,
            format!(
                "fraction of bins within {} sigma; max |dB| {:.4}",
                o.n_sigma, report.max_abs_diff_db
            ),
        ));
        oracle.push((label, report));
    }

    Ok(ValidationReport {
        pass: checks.iter().all(|c| c.pass),
        checks,
        oracle,
    })
}

impl ValidationReport {
    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}
