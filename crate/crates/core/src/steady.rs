//! Classical pump steady state, branch selection and the parametric
//! oscillation threshold of a `±l` side-mode pair.
//!
//! Sign convention: the pump obeys
//! `dA/dt = -(κ/2 + iΔ) A + sqrt(κ_e) A_in + i g0 |A|² A`, so the Kerr shift
//! pulls the effective detuning to `Δ_eff = Δ - g0 ρ` with `ρ = |A|²`. The
//! steady state therefore satisfies
//!
//! ```text
//! ρ [ (κ/2)² + (Δ - g0 ρ)² ] = κ_e |A_in|²
//! A0 = sqrt(κ_e) A_in / (κ/2 + i (Δ - g0 ρ))
//! ```
//!
//! with `A_in` real and non-negative (global phase gauge). Three real roots
//! exist only for `Δ > sqrt(3) κ/2`.

use nalgebra::Matrix4;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PumpDrive, ResonatorModel, HBAR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Unique,
    Lower,
    Middle,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    /// Intracavity pump amplitude (sqrt(photons)).
    pub a0: Complex64,
    /// Intracavity photon number `|a0|^2`.
    pub rho: f64,
    pub branch: Branch,
    /// Magnitude of the complex steady-state equation at `a0`.
    pub residual: f64,
}

impl SteadyState {
    /// The empty cavity.
    pub fn vacuum() -> Self {
        Self {
            a0: Complex64::new(0.0, 0.0),
            rho: 0.0,
            branch: Branch::Unique,
            residual: 0.0,
        }
    }

    /// Effective pump detuning `Δ - g0 ρ`.
    pub fn effective_detuning(&self, model: &ResonatorModel) -> f64 {
        model.delta - model.g0 * self.rho
    }
}

/// Magnitude of `-(κ/2 + iΔ) A0 + sqrt(κ_e) A_in + i g0 |A0|² A0`.
pub fn steady_state_residual(model: &ResonatorModel, drive: &PumpDrive, a0: Complex64) -> f64 {
    let half_kappa = 0.5 * model.kappa();
    let lhs = -Complex64::new(half_kappa, model.delta) * a0
        + Complex64::new(model.kappa_e.sqrt() * drive.a_in, 0.0)
        + Complex64::new(0.0, model.g0 * a0.norm_sqr()) * a0;
    lhs.norm()
}

/// Residual tolerance used for the solver's self-check.
pub fn residual_tolerance(model: &ResonatorModel, drive: &PumpDrive) -> f64 {
    1e-10 * (model.kappa_e.sqrt() * drive.a_in).max(1.0)
}

fn amplitude_for_rho(model: &ResonatorModel, drive: &PumpDrive, rho: f64) -> Complex64 {
    let denom = Complex64::new(0.5 * model.kappa(), model.delta - model.g0 * rho);
    Complex64::new(model.kappa_e.sqrt() * drive.a_in, 0.0) / denom
}

/// All physical pump steady states for the given drive, sorted by photon number.
pub fn solve_steady_state(model: &ResonatorModel, drive: &PumpDrive) -> Result<Vec<SteadyState>> {
    model.validate()?;
    if !(drive.photon_flux >= 0.0) || !(drive.a_in >= 0.0) {
        return Err(Error::domain("drive photon flux must be non-negative"));
    }
    if drive.photon_flux == 0.0 || model.kappa_e == 0.0 {
        return Ok(vec![SteadyState::vacuum()]);
    }

    let half_kappa = 0.5 * model.kappa();
    let source = model.kappa_e * drive.photon_flux;

    let rhos: Vec<f64> = if model.g0 == 0.0 {
        vec![source / (half_kappa * half_kappa + model.delta * model.delta)]
    } else {
        // Work in t = g0 ρ / (κ/2) so the cubic has O(1) coefficients:
        //   t^3 - 2 D t^2 + (1 + D^2) t - s = 0,  D = Δ/(κ/2),  s = g0 κ_e F/(κ/2)^3
        let d = model.delta / half_kappa;
        let s = model.g0 * source / half_kappa.powi(3);
        normalized_cubic_roots(d, s)
            .into_iter()
            .map(|t| t * half_kappa / model.g0)
            .collect()
    };

    let n = rhos.len();
    let states = rhos
        .into_iter()
        .enumerate()
        .map(|(i, rho)| {
            let a0 = amplitude_for_rho(model, drive, rho);
            let branch = match (n, i) {
                (1, _) => Branch::Unique,
                (_, 0) => Branch::Lower,
                (3, 1) => Branch::Middle,
                _ => Branch::Upper,
            };
            SteadyState {
                a0,
                rho: a0.norm_sqr(),
                branch,
                residual: steady_state_residual(model, drive, a0),
            }
        })
        .collect();
    Ok(states)
}

/// Real roots of `t^3 - 2 d t^2 + (1 + d^2) t - s` for `s > 0`, ascending.
///
/// Closed form on the depressed cubic followed by a Newton polish. Roots
/// that coincide to within 1e-7 relative are merged (fold point).
fn normalized_cubic_roots(d: f64, s: f64) -> Vec<f64> {
    let f = |t: f64| ((t - 2.0 * d) * t + (1.0 + d * d)) * t - s;
    let df = |t: f64| (3.0 * t - 4.0 * d) * t + 1.0 + d * d;

    // t = y + 2d/3  ->  y^3 + p y + q = 0
    let shift = 2.0 * d / 3.0;
    let p = 1.0 - d * d / 3.0;
    let q = -16.0 * d.powi(3) / 27.0 + 2.0 * d * (1.0 + d * d) / 3.0 - s;
    let disc = -(4.0 * p * p * p + 27.0 * q * q);

    let mut roots: Vec<f64> = if p < 0.0 && disc > 0.0 {
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = ((3.0 * q) / (p * m)).clamp(-1.0, 1.0);
        let phi = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (phi - 2.0 * std::f64::consts::PI * f64::from(k) / 3.0).cos() + shift)
            .collect()
    } else {
        let half_q = 0.5 * q;
        let root_term = (half_q * half_q + p * p * p / 27.0).max(0.0).sqrt();
        let a = -(half_q.abs() + root_term).cbrt() * half_q.signum();
        let y = if a != 0.0 { a - p / (3.0 * a) } else { 0.0 };
        vec![y + shift]
    };

    for t in roots.iter_mut() {
        let mut best = *t;
        let mut best_f = f(best).abs();
        for _ in 0..50 {
            let slope = df(best);
            if slope == 0.0 {
                break;
            }
            let next = best - f(best) / slope;
            let next_f = f(next).abs();
            if !(next_f < best_f) {
                break;
            }
            best = next;
            best_f = next_f;
        }
        *t = best;
    }

    roots.retain(|t| *t > 0.0 && t.is_finite());
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-7 * a.abs().max(b.abs()));
    roots
}

/// Rule for picking one pump solution in a multistable region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchPolicy {
    Lowest,
    Highest,
    /// Thermal approach from the red side: ends on the upper (hot) branch
    /// whenever it exists.
    #[default]
    AdiabaticUpsweep,
}

pub fn select_branch(roots: &[SteadyState], policy: BranchPolicy) -> Result<SteadyState> {
    let pick = match policy {
        BranchPolicy::Lowest => roots.first(),
        BranchPolicy::Highest | BranchPolicy::AdiabaticUpsweep => roots.last(),
    };
    pick.copied().ok_or(Error::EmptyRoots)
}

/// How the pump detuning is held while power changes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DetuningPolicy {
    /// Cold-cavity detuning stays at `model.delta`.
    #[default]
    Fixed,
    /// A lock keeps the Kerr-shifted resonance at `effective_detuning` (rad/s)
    /// from the laser, i.e. `Δ = effective_detuning + g0 ρ`.
    Locked { effective_detuning: f64 },
}

/// Solves the pump for a power under a detuning policy. Returns the model
/// with the detuning the policy implies, alongside the roots.
pub fn solve_with_policy(
    model: &ResonatorModel,
    power: f64,
    policy: DetuningPolicy,
) -> Result<(ResonatorModel, Vec<SteadyState>)> {
    let drive = PumpDrive::from_power(power, model.omega0)?;
    match policy {
        DetuningPolicy::Fixed => Ok((*model, solve_steady_state(model, &drive)?)),
        DetuningPolicy::Locked { effective_detuning } => {
            let half_kappa = 0.5 * model.kappa();
            let rho = model.kappa_e * drive.photon_flux
                / (half_kappa * half_kappa + effective_detuning * effective_detuning);
            let locked = model.with_delta(effective_detuning + model.g0 * rho);
            // the lock holds this particular root even where the cubic is multistable
            let (state, _) = steady_state_for_rho(&locked, rho)?;
            Ok((locked, vec![state]))
        }
    }
}

/// On-chip power (W) whose steady state holds `rho` photons.
pub fn power_for_rho(model: &ResonatorModel, rho: f64) -> Result<f64> {
    if !(rho >= 0.0) {
        return Err(Error::domain(format!("photon number must be non-negative (got {rho})")));
    }
    if model.kappa_e == 0.0 {
        return Err(Error::domain("a cavity with kappa_e = 0 cannot be driven"));
    }
    let half_kappa = 0.5 * model.kappa();
    let eff = model.delta - model.g0 * rho;
    let flux = rho * (half_kappa * half_kappa + eff * eff) / model.kappa_e;
    Ok(flux * HBAR * model.omega0)
}

/// Builds the steady state holding exactly `rho` photons, plus its drive.
pub fn steady_state_for_rho(model: &ResonatorModel, rho: f64) -> Result<(SteadyState, PumpDrive)> {
    let power = power_for_rho(model, rho)?;
    let drive = PumpDrive::from_power(power, model.omega0)?;
    let a0 = amplitude_for_rho(model, &drive, rho);
    let state = SteadyState {
        a0,
        rho: a0.norm_sqr(),
        branch: Branch::Unique,
        residual: steady_state_residual(model, &drive, a0),
    };
    Ok((state, drive))
}

/// Linearized drift of the pair `(a_l, a_{-l}^†)`:
///
/// ```text
/// d/dt a_l      = -(κ/2 + i δ_l) a_l + i G a_{-l}^†
/// d/dt a_{-l}^† = -i G* a_l - (κ/2 - i δ_l) a_{-l}^†
/// ```
///
/// with `δ_l = Δ + D2 l²/2 - 2 g0 ρ` and `G = g0 A0²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDrift {
    pub half_kappa: f64,
    pub delta_l: f64,
    pub gain: Complex64,
}

impl PairDrift {
    pub fn new(model: &ResonatorModel, steady: &SteadyState, l: i32) -> Self {
        Self {
            half_kappa: 0.5 * model.kappa(),
            delta_l: model.mode_detuning(l) - 2.0 * model.g0 * steady.rho,
            gain: model.g0 * steady.a0 * steady.a0,
        }
    }

    /// Row-major 2x2 drift matrix.
    pub fn matrix(&self) -> [[Complex64; 2]; 2] {
        let i = Complex64::i();
        [
            [-Complex64::new(self.half_kappa, self.delta_l), i * self.gain],
            [-i * self.gain.conj(), -Complex64::new(self.half_kappa, -self.delta_l)],
        ]
    }

    /// Drift of the real quadrature vector `(q_l, p_l, q_{-l}, p_{-l})`, with
    /// `a = (q + i p) / 2`.
    pub fn quadrature_drift(&self) -> Matrix4<f64> {
        let (ar, ai) = (-self.half_kappa, -self.delta_l);
        // β = i G
        let (br, bi) = (-self.gain.im, self.gain.re);
        Matrix4::new(
            ar, -ai, br, bi, //
            ai, ar, bi, -br, //
            br, bi, ar, -ai, //
            bi, -br, ai, ar,
        )
    }

    /// `-κ/2 ± sqrt(|G|² - δ_l²)`, ordered so the first has the larger real part.
    pub fn eigenvalues(&self) -> [Complex64; 2] {
        let root = Complex64::new(self.gain.norm_sqr() - self.delta_l * self.delta_l, 0.0).sqrt();
        let base = Complex64::new(-self.half_kappa, 0.0);
        [base + root, base - root]
    }

    pub fn dominant_eigenvalue(&self) -> Complex64 {
        self.eigenvalues()[0]
    }

    pub fn is_stable(&self) -> bool {
        self.dominant_eigenvalue().re < 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub mode_index: i32,
    /// Intracavity photon number at threshold.
    pub rho: f64,
    /// On-chip pump power (W) reaching that photon number.
    pub power: f64,
}

/// Lowest pump photon number at which the `±l` pair stops decaying, i.e. the
/// smallest root of `(g0 ρ)² = (κ/2)² + (Δ + D2 l²/2 - 2 g0 ρ)²`.
pub fn oscillation_threshold(model: &ResonatorModel, l: i32) -> Result<Threshold> {
    model.validate()?;
    if l == 0 {
        return Err(Error::domain("threshold is defined for side modes l != 0"));
    }
    if model.g0 <= 0.0 {
        return Err(Error::ThresholdUnreachable("g0 = 0: no parametric gain".into()));
    }
    let half_kappa = 0.5 * model.kappa();
    let dl = model.mode_detuning(l);
    // u = g0 ρ solves 3u² - 4Δ'u + (κ/2)² + Δ'² = 0
    let disc = dl * dl - 3.0 * half_kappa * half_kappa;
    if disc < 0.0 || dl <= 0.0 {
        return Err(Error::ThresholdUnreachable(format!(
            "mode detuning {dl:.6e} rad/s is below sqrt(3) kappa/2 = {:.6e} rad/s",
            3f64.sqrt() * half_kappa
        )));
    }
    let u = (2.0 * dl - disc.sqrt()) / 3.0;
    let rho = u / model.g0;
    let power = power_for_rho(model, rho).map_err(|e| Error::ThresholdUnreachable(e.to_string()))?;
    Ok(Threshold {
        mode_index: l,
        rho,
        power,
    })
}
