//! Choosing g0 so a stated on-chip power lands on a stated operating point.
//!
//! Below threshold everything the spectra see depends on g0 and ρ only
//! through `u = g0ρ` (the Kerr shift) and the phase of `A0`, which is itself
//! a function of `u` and Δ. So the operating point is picked in `u`, and g0
//! follows from the pump balance `P = ħω0 (u/g0) [(κ/2)² + Δ_eff²] / κ_e`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DetectionChain, ResonatorModel, HBAR};
use crate::spectra::{extrema_for_state, QuadratureExtrema};
use crate::steady::{
    oscillation_threshold, power_for_rho, select_branch, solve_with_policy, steady_state_for_rho, BranchPolicy,
    DetuningPolicy, SteadyState, Threshold,
};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationTarget {
    /// The Kerr shift that maximizes squeezing at the analysis frequency.
    #[default]
    SqueezingOptimum,
    /// This fraction of the oscillation-threshold photon number.
    ThresholdFraction { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub g0: f64,
    /// Kerr shift `g0ρ` at the target power (rad/s).
    pub kerr_shift: f64,
    /// `g0ρ / (κ/2)`.
    pub normalized_shift: f64,
    pub rho: f64,
    pub power: f64,
    /// Detected extrema at the target power.
    pub extrema: QuadratureExtrema,
    /// False when the squeezing optimum sits on the edge of the searched
    /// range, i.e. there is no interior optimum.
    pub interior: bool,
    /// Calibrated model, with Δ as realized at the target power.
    pub model: ResonatorModel,
}

/// Unit-g0 model and state with Kerr shift `u` under the detuning policy.
fn state_at_shift(model: &ResonatorModel, u: f64, policy: DetuningPolicy) -> Result<(ResonatorModel, SteadyState)> {
    let unit = match policy {
        DetuningPolicy::Fixed => model.with_g0(1.0),
        DetuningPolicy::Locked { effective_detuning } => model.with_g0(1.0).with_delta(effective_detuning + u),
    };
    let (st, _) = steady_state_for_rho(&unit, u)?;
    Ok((unit, st))
}

/// Largest stable Kerr shift for the pair, or `None` if it never oscillates.
fn threshold_shift(model: &ResonatorModel, l: i32, policy: DetuningPolicy) -> Option<f64> {
    let hk = 0.5 * model.kappa();
    let dispersion = 0.5 * model.d2 * f64::from(l * l);
    match policy {
        DetuningPolicy::Fixed => {
            // u² = hk² + (Δ' - 2u)²
            let dp = model.delta + dispersion;
            let disc = dp * dp - 3.0 * hk * hk;
            (dp > 0.0 && disc >= 0.0).then(|| (2.0 * dp - disc.sqrt()) / 3.0)
        }
        DetuningPolicy::Locked { effective_detuning } => {
            // δ_l = e' - u with e' = Δ_eff + D2 l²/2
            let ep = effective_detuning + dispersion;
            (ep > 0.0).then(|| (hk * hk + ep * ep) / (2.0 * ep))
        }
    }
}

/// Oscillation threshold of pair `l` when the pump follows `policy`.
pub fn threshold_for_policy(model: &ResonatorModel, l: i32, policy: DetuningPolicy) -> Result<Threshold> {
    match policy {
        DetuningPolicy::Fixed => oscillation_threshold(model, l),
        DetuningPolicy::Locked { effective_detuning } => {
            if l == 0 || !(model.g0 > 0.0) {
                return Err(Error::domain("threshold needs g0 > 0 and l != 0"));
            }
            let u = threshold_shift(model, l, policy).ok_or_else(|| {
                Error::ThresholdUnreachable("locked effective detuning keeps the pair stable".into())
            })?;
            let rho = u / model.g0;
            let power = power_for_rho(&model.with_delta(effective_detuning + u), rho)?;
            Ok(Threshold {
                mode_index: l,
                rho,
                power,
            })
        }
    }
}

fn squeezing_at(
    model: &ResonatorModel,
    u: f64,
    l: i32,
    chain: &DetectionChain,
    omega: f64,
    policy: DetuningPolicy,
) -> Result<QuadratureExtrema> {
    let (unit, st) = state_at_shift(model, u, policy)?;
    extrema_for_state(&unit, &st, l, chain, omega)
}

/// Minimizes `f` on `[a, b]` by golden-section search.
fn golden_min(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-13 * (a.abs() + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Sets g0 so that `power` realizes `target` on the selected branch.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_g0(
    model: &ResonatorModel,
    chain: &DetectionChain,
    l: i32,
    omega: f64,
    power: f64,
    target: CalibrationTarget,
    detuning: DetuningPolicy,
    branch: BranchPolicy,
) -> Result<Calibration> {
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::domain(format!("calibration power must be positive (got {power})")));
    }
    model.validate()?;
    chain.validate()?;
    let kappa = model.kappa();
    let u_th = threshold_shift(model, l, detuning);

    let (u, interior) = match target {
        CalibrationTarget::ThresholdFraction { fraction } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::domain(format!("threshold fraction must lie in (0, 1) (got {fraction})")));
            }
            let u_th = u_th.ok_or_else(|| {
                Error::ThresholdUnreachable("the pair never oscillates at this detuning".into())
            })?;
            (fraction * u_th, true)
        }
        CalibrationTarget::SqueezingOptimum => {
            let hi = u_th.map_or(20.0 * kappa, |t| t * (1.0 - 1e-9));
            let score = |u: f64| {
                squeezing_at(model, u, l, chain, omega, detuning)
                    .map(|e| e.s_min)
                    .unwrap_or(f64::INFINITY)
            };
            const N: usize = 400;
            let grid: Vec<f64> = (1..=N).map(|k| hi * k as f64 / N as f64).collect();
            let vals: Vec<f64> = grid.iter().map(|&u| score(u)).collect();
            let best = vals
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let lo = if best == 0 { 0.0 } else { grid[best - 1] };
            let up = grid[(best + 1).min(N - 1)];
            let u = golden_min(lo.max(1e-12 * hi), up, score);
            (u, best > 0 && best < N - 1)
        }
    };

    let (unit, st) = state_at_shift(model, u, detuning)?;
    let delta_eff = unit.delta - u;
    let g0 = HBAR * model.omega0 * u * (0.25 * kappa * kappa + delta_eff * delta_eff) / (model.kappa_e * power);
    let calibrated = model.with_g0(g0);

    // the state must be the one the branch policy actually selects
    let (realized_model, roots) = solve_with_policy(&calibrated, power, detuning)?;
    let chosen = select_branch(&roots, branch)?;
    let realized = g0 * chosen.rho;
    if (realized - u).abs() > 1e-6 * u {
        return Err(Error::domain(format!(
            "calibrated operating point g0ρ = {u:.6e} is not on the selected branch (got {realized:.6e})"
        )));
    }
    let extrema = extrema_for_state(&realized_model, &chosen, l, chain, omega)?;
    debug_assert!((st.rho - u).abs() <= 1e-9 * u);
    Ok(Calibration {
        g0,
        kerr_shift: u,
        normalized_shift: u / (0.5 * kappa),
        rho: chosen.rho,
        power,
        extrema,
        interior,
        model: realized_model,
    })
}
