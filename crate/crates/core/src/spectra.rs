//! Frequency-domain input/output theory for one `±l` side-mode pair and the
//! lossy balanced-homodyne spectrum built from it.
//!
//! Fourier convention: `a(t) = (2π)^(-1/2) ∫ ã(ω) e^{-iωt} dω`. At analysis
//! frequency `ω` the pair `(ã_l(ω), ã†_{-l}(-ω))` obeys
//!
//! ```text
//! K(ω) [ã_l ; ã†_{-l}] = B [V_e,l ; V_i,l ; V†_e,-l ; V†_i,-l]
//! K(ω) = [[κ/2 + iδ_l - iω, -iG], [iG*, κ/2 - iδ_l - iω]],  B = diag-block(√κ_e, √κ_i)
//! ```
//!
//! where the vacuum inputs are the loss-port fluctuations of the quantum
//! coupled-mode equations. The output is `√κ_e ã - Ṽ_e`. The second pair
//! `(ã_{-l}(ω), ã†_l(-ω))` has the same scattering matrix and independent
//! inputs.
//!
//! Quadratures are `q = a + a†`, `p = -i(a - a†)` (vacuum variance 1), and
//! all spectra are symmetrized, so vacuum gives exactly 1 at every `ω`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DetectionChain, HomodyneObservable, LocalOscillator, ResonatorModel};
use crate::steady::{select_branch, solve_with_policy, BranchPolicy, DetuningPolicy, PairDrift, SteadyState};

/// Linear response of the output pair to the four vacuum input channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScattering {
    pub mode_index: i32,
    /// Analysis angular frequency (rad/s).
    pub omega: f64,
    /// Rows: `ã_out,l(ω)`, `ã†_out,-l(-ω)`. Columns:
    /// `V_e,l(ω)`, `V_i,l(ω)`, `V†_e,-l(-ω)`, `V†_i,-l(-ω)`.
    pub s_matrix: [[Complex64; 4]; 2],
}

impl PairScattering {
    /// Bosonic normalization of each output row: annihilation inputs count
    /// positive, creation inputs negative. Both entries equal 1 for a
    /// commutator-preserving map.
    pub fn bogoliubov_norms(&self) -> [f64; 2] {
        let s = &self.s_matrix;
        let r0 = s[0][0].norm_sqr() + s[0][1].norm_sqr() - s[0][2].norm_sqr() - s[0][3].norm_sqr();
        let r1 = s[1][2].norm_sqr() + s[1][3].norm_sqr() - s[1][0].norm_sqr() - s[1][1].norm_sqr();
        [r0, r1]
    }
}

pub fn pair_scattering(
    model: &ResonatorModel,
    steady: &SteadyState,
    l: i32,
    omega: f64,
) -> Result<PairScattering> {
    if l == 0 {
        return Err(Error::domain("pair scattering needs a side mode l != 0"));
    }
    let drift = PairDrift::new(model, steady, l);
    if !drift.is_stable() {
        return Err(Error::AboveThreshold {
            eigenvalue: drift.dominant_eigenvalue(),
        });
    }
    let hk = drift.half_kappa;
    let i = Complex64::i();
    let g = drift.gain;
    let k00 = Complex64::new(hk, drift.delta_l - omega);
    let k01 = -i * g;
    let k10 = i * g.conj();
    let k11 = Complex64::new(hk, -drift.delta_l - omega);
    let det = k00 * k11 - k01 * k10;
    let inv = [[k11 / det, -k01 / det], [-k10 / det, k00 / det]];

    let se = model.kappa_e.sqrt();
    let si = model.kappa_i.sqrt();
    // √κ_e K^{-1} B, minus the reflected external vacuum
    let mut s = [[Complex64::new(0.0, 0.0); 4]; 2];
    for r in 0..2 {
        s[r][0] = se * se * inv[r][0];
        s[r][1] = se * si * inv[r][0];
        s[r][2] = se * se * inv[r][1];
        s[r][3] = se * si * inv[r][1];
    }
    s[0][0] -= 1.0;
    s[1][2] -= 1.0;
    Ok(PairScattering {
        mode_index: l,
        omega,
        s_matrix: s,
    })
}

/// Covariance of `(q_l, p_l, q_{-l}, p_{-l})` at the scattering frequency,
/// vacuum = identity, before detection loss.
///
/// This is the real part of the Hermitian spectral covariance, which is all
/// any real quadrature combination can see.
pub fn source_covariance(scatter: &PairScattering) -> Matrix4<f64> {
    let s = &scatter.s_matrix;
    // Σ = ½ S S† for the pair (a_l(ω), a†_{-l}(-ω)); the mirrored pair
    // (a_{-l}(ω), a†_l(-ω)) has the same Σ.
    let mut sigma = [[Complex64::new(0.0, 0.0); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            sigma[r][c] = 0.5 * (0..4).map(|k| s[r][k] * s[c][k].conj()).sum::<Complex64>();
        }
    }
    // O = (a_l(ω), a†_l(-ω), a_{-l}(ω), a†_{-l}(-ω))
    let mut so = Matrix4::<Complex64>::zeros();
    let first = [0usize, 3];
    let mirror = [2usize, 1];
    for r in 0..2 {
        for c in 0..2 {
            so[(first[r], first[c])] = sigma[r][c];
            so[(mirror[r], mirror[c])] = sigma[r][c];
        }
    }
    let one = Complex64::new(1.0, 0.0);
    let i = Complex64::i();
    let zero = Complex64::new(0.0, 0.0);
    #[rustfmt::skip]
    let to_quadratures = Matrix4::new(
        one, one, zero, zero,
        -i, i, zero, zero,
        zero, zero, one, one,
        zero, zero, -i, i,
    );
    let full = to_quadratures * so * to_quadratures.adjoint();
    let re = full.map(|z| z.re);
    // symmetrize away rounding
    (re + re.transpose()) * 0.5
}

/// Mixes in vacuum: `η V + (1 - η) I`.
pub fn apply_loss(cov: &Matrix4<f64>, eta: f64) -> Result<Matrix4<f64>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::domain(format!("efficiency must lie in [0, 1] (got {eta})")));
    }
    Ok(cov * eta + Matrix4::identity() * (1.0 - eta))
}

/// Detected quadrature covariance after the post-cavity loss budget.
pub fn output_covariance(scatter: &PairScattering, chain: &DetectionChain) -> Result<Matrix4<f64>> {
    chain.validate()?;
    apply_loss(&source_covariance(scatter), chain.total())
}

/// Coefficient vectors `(u, v)` with `X_θ = (cos θ u + sin θ v) · x` for the
/// rotated-sum observable.
fn rotated_basis(lo: &LocalOscillator) -> (Vector4<f64>, Vector4<f64>) {
    let (s, c) = lo.relative_phase.sin_cos();
    (Vector4::new(1.0, 0.0, c, -s), Vector4::new(0.0, -1.0, -s, -c))
}

fn observable_vector(theta: f64, lo: &LocalOscillator) -> Vector4<f64> {
    match lo.observable {
        HomodyneObservable::RotatedSum => {
            let (u, v) = rotated_basis(lo);
            u * theta.cos() + v * theta.sin()
        }
        HomodyneObservable::WeightedRotated => {
            let (s, c) = theta.sin_cos();
            // q(θ) = q c - p s,  p(θ) = q s + p c, weighted by c and s
            let q_coef = c * c + s * s;
            let p_coef = -s * c + c * s;
            Vector4::new(q_coef, p_coef, q_coef, p_coef)
        }
    }
}

/// Variance of the homodyne observable relative to shot noise.
pub fn homodyne_variance(cov: &Matrix4<f64>, theta: f64) -> f64 {
    homodyne_variance_with(cov, theta, &LocalOscillator::default())
}

pub fn homodyne_variance_with(cov: &Matrix4<f64>, theta: f64, lo: &LocalOscillator) -> f64 {
    let r = observable_vector(theta, lo);
    // vacuum gives |r|² = 2
    (r.transpose() * cov * r)[(0, 0)] / r.norm_squared()
}

/// Squeezed and anti-squeezed levels at one analysis frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureExtrema {
    /// Minimum variance (linear, shot noise = 1).
    pub s_min: f64,
    pub s_max: f64,
    /// Signed dB: negative below shot noise.
    pub s_min_db: f64,
    pub s_max_db: f64,
    /// LO phase of the squeezed quadrature, in [0, π).
    pub theta_opt: f64,
}

impl QuadratureExtrema {
    /// Extrema of `m + A cos 2θ + B sin 2θ`.
    fn from_harmonics(mean: f64, a: f64, b: f64) -> Self {
        let amp = a.hypot(b);
        let s_min = mean - amp;
        let s_max = mean + amp;
        let theta_opt = if amp <= 1e-14 * mean.abs().max(1e-300) {
            0.0
        } else {
            let t = 0.5 * (b.atan2(a) + std::f64::consts::PI);
            t.rem_euclid(std::f64::consts::PI)
        };
        Self {
            s_min,
            s_max,
            s_min_db: to_db(s_min),
            s_max_db: to_db(s_max),
            theta_opt,
        }
    }

    /// Closed-form optimum of the quadratic form in `(cos θ, sin θ)`.
    pub fn from_covariance(cov: &Matrix4<f64>, lo: &LocalOscillator) -> Self {
        match lo.observable {
            HomodyneObservable::RotatedSum => {
                let (u, v) = rotated_basis(lo);
                let norm = u.norm_squared();
                let a = (u.transpose() * cov * u)[(0, 0)] / norm;
                let b = (v.transpose() * cov * v)[(0, 0)] / norm;
                let c = (u.transpose() * cov * v)[(0, 0)] / norm;
                Self::from_harmonics(0.5 * (a + b), 0.5 * (a - b), c)
            }
            HomodyneObservable::WeightedRotated => {
                Self::from_harmonics(homodyne_variance_with(cov, 0.0, lo), 0.0, 0.0)
            }
        }
    }

    pub fn uncertainty_product(&self) -> f64 {
        self.s_min * self.s_max
    }
}

pub fn to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// Extrema recovered from variances sampled on a θ grid.
///
/// Any homodyne variance is `m + A cos 2θ + B sin 2θ`; the three harmonics
/// are fit by least squares and the optimum taken in closed form. The grid
/// extremes are checked against it.
pub fn optimal_quadratures(thetas: &[f64], variances: &[f64]) -> Result<QuadratureExtrema> {
    if thetas.len() != variances.len() {
        return Err(Error::GridMismatch(format!(
            "{} angles vs {} variances",
            thetas.len(),
            variances.len()
        )));
    }
    if thetas.len() < 3 {
        return Err(Error::InsufficientData("need at least 3 LO phases".into()));
    }
    let mut normal = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    for (&t, &v) in thetas.iter().zip(variances) {
        let row = Vector3::new(1.0, (2.0 * t).cos(), (2.0 * t).sin());
        normal += row * row.transpose();
        rhs += row * v;
    }
    let coef = normal
        .lu()
        .solve(&rhs)
        .filter(|c| c.iter().all(|x| x.is_finite()))
        .ok_or_else(|| Error::InsufficientData("LO phases do not span the quadrature circle".into()))?;
    let ext = QuadratureExtrema::from_harmonics(coef[0], coef[1], coef[2]);

    let scale = ext.s_max.abs().max(1.0);
    let grid_min = variances.iter().copied().fold(f64::INFINITY, f64::min);
    let grid_max = variances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if ext.s_min > grid_min + 1e-9 * scale || ext.s_max < grid_max - 1e-9 * scale {
        return Err(Error::InsufficientData(format!(
            "θ samples are not a single π-periodic quadratic form (fit [{}, {}], grid [{grid_min}, {grid_max}])",
            ext.s_min, ext.s_max
        )));
    }
    Ok(ext)
}

/// Homodyne variance over an `(ω, θ)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqueezingSpectrum {
    pub omega_grid: Vec<f64>,
    pub theta_grid: Vec<f64>,
    /// `variance[i][j]` at `omega_grid[i]`, `theta_grid[j]`; shot noise = 1.
    pub variance: Vec<Vec<f64>>,
    pub variance_db: Vec<Vec<f64>>,
}

impl SqueezingSpectrum {
    pub fn extrema_at(&self, omega_index: usize) -> Result<QuadratureExtrema> {
        optimal_quadratures(&self.theta_grid, &self.variance[omega_index])
    }
}

pub fn spectrum_grid(
    model: &ResonatorModel,
    steady: &SteadyState,
    l: i32,
    chain: &DetectionChain,
    omega_grid: &[f64],
    theta_grid: &[f64],
) -> Result<SqueezingSpectrum> {
    let rows: Vec<Vec<f64>> = omega_grid
        .par_iter()
        .map(|&omega| {
            let cov = output_covariance(&pair_scattering(model, steady, l, omega)?, chain)?;
            Ok(theta_grid
                .iter()
                .map(|&t| homodyne_variance_with(&cov, t, &chain.lo))
                .collect())
        })
        .collect::<Result<_>>()?;
    let variance_db = rows.iter().map(|r| r.iter().map(|&v| to_db(v)).collect()).collect();
    Ok(SqueezingSpectrum {
        omega_grid: omega_grid.to_vec(),
        theta_grid: theta_grid.to_vec(),
        variance: rows,
        variance_db,
    })
}

/// Evenly spaced LO phases covering `[0, π)`.
pub fn theta_grid(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| std::f64::consts::PI * k as f64 / n as f64)
        .collect()
}

/// Detected quadrature extrema for the selected pump state.
pub fn extrema_for_state(
    model: &ResonatorModel,
    steady: &SteadyState,
    l: i32,
    chain: &DetectionChain,
    omega: f64,
) -> Result<QuadratureExtrema> {
    let cov = output_covariance(&pair_scattering(model, steady, l, omega)?, chain)?;
    Ok(QuadratureExtrema::from_covariance(&cov, &chain.lo))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepOptions {
    pub branch: BranchPolicy,
    pub detuning: DetuningPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// On-chip power (W).
    pub power: f64,
    pub rho: f64,
    /// Signed dB; `None` when the pair is at or above threshold.
    pub s_min_db: Option<f64>,
    pub s_max_db: Option<f64>,
    pub above_threshold: bool,
}

/// Squeezing and anti-squeezing at `omega` for each pump power. Every power
/// is solved independently, so the result does not depend on list order.
pub fn power_sweep(
    model: &ResonatorModel,
    chain: &DetectionChain,
    powers: &[f64],
    l: i32,
    omega: f64,
    options: &SweepOptions,
) -> Result<Vec<SweepPoint>> {
    chain.validate()?;
    powers
        .par_iter()
        .map(|&power| sweep_point(model, chain, power, l, omega, options))
        .collect()
}

fn sweep_point(
    model: &ResonatorModel,
    chain: &DetectionChain,
    power: f64,
    l: i32,
    omega: f64,
    options: &SweepOptions,
) -> Result<SweepPoint> {
    let (model, roots) = solve_with_policy(model, power, options.detuning)?;
    let steady = select_branch(&roots, options.branch)?;
    match extrema_for_state(&model, &steady, l, chain, omega) {
        Ok(ext) => Ok(SweepPoint {
            power,
            rho: steady.rho,
            s_min_db: Some(ext.s_min_db),
            s_max_db: Some(ext.s_max_db),
            above_threshold: false,
        }),
        Err(Error::AboveThreshold { .. }) => Ok(SweepPoint {
            power,
            rho: steady.rho,
            s_min_db: None,
            s_max_db: None,
            above_threshold: true,
        }),
        Err(e) => Err(e),
    }
}

/// Spectrum-analyzer emulation of a linearly scanned LO phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseScanSettings {
    /// Number of π periods swept.
    pub periods: f64,
    /// Samples per π period; even, so both extrema are sampled exactly.
    pub samples_per_period: usize,
    /// Duration of the whole scan (s).
    pub sweep_time: f64,
    /// Starting phase; `None` starts on the squeezed quadrature.
    pub theta_start: Option<f64>,
    pub rbw_hz: f64,
    pub vbw_hz: f64,
    /// Add the video-averaged power-measurement scatter.
    pub jitter: bool,
}

impl Default for PhaseScanSettings {
    fn default() -> Self {
        Self {
            periods: 4.0,
            samples_per_period: 200,
            sweep_time: 0.2,
            theta_start: None,
            rbw_hz: 300e3,
            vbw_hz: 470.0,
            jitter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseScanTrace {
    pub time_s: Vec<f64>,
    pub theta: Vec<f64>,
    pub variance_db: Vec<f64>,
    pub shot_noise_db: Vec<f64>,
}

/// Synthesizes the time trace of the detected noise power while the LO
/// phase ramps linearly. With jitter on, each sample carries the relative
/// scatter `sqrt(VBW/RBW)` of a video-filtered noise-power reading.
pub fn phase_scan_trace(
    cov: &Matrix4<f64>,
    lo: &LocalOscillator,
    settings: &PhaseScanSettings,
    seed: u64,
) -> Result<PhaseScanTrace> {
    if !(settings.rbw_hz > 0.0 && settings.vbw_hz > 0.0) {
        return Err(Error::domain("RBW and VBW must be positive"));
    }
    if settings.samples_per_period < 2 || settings.samples_per_period % 2 != 0 {
        return Err(Error::domain("samples_per_period must be an even number >= 2"));
    }
    if !(settings.periods > 0.0 && settings.sweep_time > 0.0) {
        return Err(Error::domain("periods and sweep_time must be positive"));
    }
    let ext = QuadratureExtrema::from_covariance(cov, lo);
    let start = settings.theta_start.unwrap_or(ext.theta_opt);
    let n = (settings.periods * settings.samples_per_period as f64).round() as usize + 1;
    let step = std::f64::consts::PI / settings.samples_per_period as f64;
    let dt = settings.sweep_time / (n - 1).max(1) as f64;
    let sigma = if settings.jitter {
        (settings.vbw_hz / settings.rbw_hz).sqrt()
    } else {
        0.0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scatter = |x: f64| -> f64 {
        if sigma == 0.0 {
            return x;
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        x * (1.0 + sigma * z).max(1e-6)
    };

    let mut trace = PhaseScanTrace {
        time_s: Vec::with_capacity(n),
        theta: Vec::with_capacity(n),
        variance_db: Vec::with_capacity(n),
        shot_noise_db: Vec::with_capacity(n),
    };
    for k in 0..n {
        let theta = start + step * k as f64;
        let v = homodyne_variance_with(cov, theta, lo);
        trace.time_s.push(dt * k as f64);
        trace.theta.push(theta);
        trace.variance_db.push(to_db(scatter(v)));
        trace.shot_noise_db.push(to_db(scatter(1.0)));
    }
    Ok(trace)
}

/// Smallest symplectic eigenvalue of a two-mode covariance (vacuum = 1).
pub fn min_symplectic_eigenvalue(cov: &Matrix4<f64>) -> f64 {
    let a = cov.fixed_view::<2, 2>(0, 0).determinant();
    let b = cov.fixed_view::<2, 2>(2, 2).determinant();
    let c = cov.fixed_view::<2, 2>(0, 2).determinant();
    let invariant = a + b + 2.0 * c;
    let det = cov.determinant();
    let disc = (invariant * invariant - 4.0 * det).max(0.0);
    (0.5 * (invariant - disc.sqrt())).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steady::steady_state_for_rho;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn squeezer_model() -> ResonatorModel {
        ResonatorModel::from_quality_factors(1560e-9, 10.1e6, 0.83e6, 59.3e9)
            .unwrap()
            .with_g0(1.0)
    }

    fn state_at(model: &ResonatorModel, x: f64) -> SteadyState {
        steady_state_for_rho(model, x * 0.5 * model.kappa() / model.g0).unwrap().0
    }

    #[test]
    fn empty_cavity_is_a_beamsplitter() {
        let m = squeezer_model().with_delta(0.2e9);
        let s = pair_scattering(&m, &SteadyState::vacuum(), 1, 3e8).unwrap();
        for row in s.s_matrix {
            for z in row {
                assert!(z.is_finite());
            }
        }
        assert_eq!(s.s_matrix[0][2], Complex64::new(0.0, 0.0));
        assert_eq!(s.s_matrix[1][0], Complex64::new(0.0, 0.0));
        let cov = output_covariance(&s, &DetectionChain::lossless()).unwrap();
        for j in 0..8 {
            let t = j as f64 * 0.4;
            assert!((homodyne_variance(&cov, t) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn critically_coupled_resonance_at_zero_frequency() {
        let mut m = squeezer_model();
        m.kappa_i = m.kappa_e;
        let s = pair_scattering(&m, &SteadyState::vacuum(), 1, 0.0).unwrap();
        // reflection κ_e/(κ/2) - 1 = 0 at critical coupling
        assert!(s.s_matrix[0][0].norm() < 1e-15);
        assert_relative_eq!(s.s_matrix[0][1].norm(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn pure_state_minimum_matches_parametric_formula() {
        // κ_i = 0, δ_l = 0, ω = 0, x = g0ρ/(κ/2) = 0.5. Solving the 2x2
        // system by hand gives ã_out = [(1+x²)V_e + 2ix V†]/(1-x²) for real
        // i G, whose minimum quadrature variance is ((1-x)/(1+x))².
        let mut m = squeezer_model();
        m.kappa_e += m.kappa_i;
        m.kappa_i = 0.0;
        let x = 0.5;
        let rho = x * 0.5 * m.kappa() / m.g0;
        let m = m.with_delta(2.0 * m.g0 * rho);
        let st = steady_state_for_rho(&m, rho).unwrap().0;
        assert!(PairDrift::new(&m, &st, 1).delta_l.abs() < 1e-6 * m.kappa());
        let s = pair_scattering(&m, &st, 1, 0.0).unwrap();
        let cov = output_covariance(&s, &DetectionChain::lossless()).unwrap();
        let ext = QuadratureExtrema::from_covariance(&cov, &LocalOscillator::default());
        assert_relative_eq!(ext.s_min, ((1.0 - x) / (1.0 + x)).powi(2), max_relative = 1e-9);
        assert_relative_eq!(ext.uncertainty_product(), 1.0, max_relative = 1e-9);
        assert_relative_eq!(min_symplectic_eigenvalue(&cov), 1.0, max_relative = 1e-9);
        // hand-derived scattering entries
        let g = st.a0 * st.a0 * m.g0;
        let i_g = Complex64::i() * g;
        let expect_00 = (1.0 + x * x) / (1.0 - x * x);
        assert_relative_eq!(s.s_matrix[0][0].re, expect_00, max_relative = 1e-9);
        let expect_02 = 2.0 * i_g / (0.5 * m.kappa()) / (1.0 - x * x);
        assert_relative_eq!(s.s_matrix[0][2].re, expect_02.re, epsilon = 1e-9);
        assert_relative_eq!(s.s_matrix[0][2].im, expect_02.im, epsilon = 1e-9);
    }

    #[test]
    fn tmsv_correlation_signs() {
        // Choose the pump phase so that i G is real and positive.
        let mut m = squeezer_model();
        m.kappa_e += m.kappa_i;
        m.kappa_i = 0.0;
        let rho = 0.25 * m.kappa() / m.g0;
        let st = SteadyState {
            a0: Complex64::from_polar(rho.sqrt(), -std::f64::consts::FRAC_PI_4),
            rho,
            ..SteadyState::vacuum()
        };
        let m = m.with_delta(2.0 * m.g0 * rho);
        let cov = output_covariance(&pair_scattering(&m, &st, 1, 0.0).unwrap(), &DetectionChain::lossless()).unwrap();
        assert!(cov[(0, 2)] > 0.1, "{cov}");
        assert!(cov[(1, 3)] < -0.1, "{cov}");
    }

    #[test]
    fn full_loss_leaves_vacuum() {
        let m = squeezer_model().with_delta(0.4e9);
        let st = state_at(&m, 0.6);
        let s = pair_scattering(&m, &st, 1, 1e8).unwrap();
        let chain = DetectionChain::lumped(1.0, 0.0).unwrap();
        assert_eq!(output_covariance(&s, &chain).unwrap(), Matrix4::identity());
    }

    #[test]
    fn above_threshold_is_an_error() {
        let m = squeezer_model();
        let m = m.with_delta(m.kappa());
        let st = state_at(&m, 1.05);
        match pair_scattering(&m, &st, 1, 0.0) {
            Err(Error::AboveThreshold { eigenvalue }) => assert!(eigenvalue.re >= 0.0),
            other => panic!("expected threshold error, got {other:?}"),
        }
    }

    #[test]
    fn weighted_observable_collapses_to_unrotated_sum() {
        let m = squeezer_model().with_delta(0.3e9);
        let st = state_at(&m, 0.5);
        let cov = output_covariance(&pair_scattering(&m, &st, 1, 0.0).unwrap(), &DetectionChain::lossless()).unwrap();
        let lo = LocalOscillator {
            observable: HomodyneObservable::WeightedRotated,
            ..Default::default()
        };
        let base = homodyne_variance_with(&cov, 0.0, &lo);
        for k in 0..10 {
            assert_relative_eq!(homodyne_variance_with(&cov, 0.3 * k as f64, &lo), base, max_relative = 1e-12);
        }
        assert_relative_eq!(base, homodyne_variance(&cov, 0.0), max_relative = 1e-12);
    }

    #[test]
    fn relative_lo_phase_shifts_the_optimum() {
        let m = squeezer_model().with_delta(0.3e9);
        let st = state_at(&m, 0.5);
        let cov = output_covariance(&pair_scattering(&m, &st, 1, 0.0).unwrap(), &DetectionChain::lossless()).unwrap();
        let a = QuadratureExtrema::from_covariance(&cov, &LocalOscillator::default());
        let lo = LocalOscillator {
            relative_phase: 0.4,
            ..Default::default()
        };
        let b = QuadratureExtrema::from_covariance(&cov, &lo);
        // a common phase offset on one tooth only moves the angle
        assert_relative_eq!(a.s_min, b.s_min, max_relative = 1e-9);
        assert_relative_eq!((b.theta_opt - a.theta_opt).rem_euclid(std::f64::consts::PI), (-0.2f64).rem_euclid(std::f64::consts::PI), epsilon = 1e-9);
    }

    #[test]
    fn vacuum_extrema_convention() {
        let ext = QuadratureExtrema::from_covariance(&Matrix4::identity(), &LocalOscillator::default());
        assert_eq!(ext.theta_opt, 0.0);
        assert!(ext.s_min_db.abs() < 1e-15 && ext.s_max_db.abs() < 1e-15);
    }

    #[test]
    fn grid_extrema_agree_with_closed_form() {
        let m = squeezer_model().with_delta(0.2e9);
        let st = state_at(&m, 0.7);
        let chain = DetectionChain::new(0.918, 0.75, 0.95, 0.98, 0.88).unwrap();
        let thetas = theta_grid(36);
        let spec = spectrum_grid(&m, &st, 1, &chain, &[2.0 * std::f64::consts::PI * 7e6], &thetas).unwrap();
        let fitted = spec.extrema_at(0).unwrap();
        let cov = output_covariance(&pair_scattering(&m, &st, 1, spec.omega_grid[0]).unwrap(), &chain).unwrap();
        let exact = QuadratureExtrema::from_covariance(&cov, &chain.lo);
        assert_relative_eq!(fitted.s_min, exact.s_min, max_relative = 1e-10);
        assert_relative_eq!(fitted.s_max, exact.s_max, max_relative = 1e-10);
        assert_relative_eq!(fitted.theta_opt, exact.theta_opt, epsilon = 1e-8);
    }

    #[test]
    fn optimal_quadratures_input_errors() {
        assert!(matches!(optimal_quadratures(&[0.0, 1.0], &[1.0]), Err(Error::GridMismatch(_))));
        assert!(optimal_quadratures(&[0.0, 1.0], &[1.0, 1.0]).is_err());
        // three phases differing by π are degenerate
        let t = [0.0, std::f64::consts::PI, 2.0 * std::f64::consts::PI];
        assert!(optimal_quadratures(&t, &[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn one_point_grid_equals_direct_variance() {
        let m = squeezer_model().with_delta(0.2e9);
        let st = state_at(&m, 0.4);
        let chain = DetectionChain::lumped(0.918, 0.602).unwrap();
        let spec = spectrum_grid(&m, &st, 1, &chain, &[1e8], &[0.3]).unwrap();
        let cov = output_covariance(&pair_scattering(&m, &st, 1, 1e8).unwrap(), &chain).unwrap();
        assert_eq!(spec.variance[0][0], homodyne_variance(&cov, 0.3));
    }

    #[test]
    fn far_detuned_analysis_frequency_returns_to_shot_noise() {
        let m = squeezer_model().with_delta(0.3e9);
        let st = state_at(&m, 0.8);
        let chain = DetectionChain::lossless();
        let spec = spectrum_grid(&m, &st, 1, &chain, &[100.0 * m.kappa()], &theta_grid(16)).unwrap();
        for v in &spec.variance[0] {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn sweep_basics() {
        let m = squeezer_model().with_delta(0.3 * squeezer_model().kappa());
        let chain = DetectionChain::lumped(0.918, 0.602).unwrap();
        let omega = 2.0 * std::f64::consts::PI * 7e6;
        let pts = power_sweep(&m, &chain, &[0.0], 1, omega, &SweepOptions::default()).unwrap();
        assert!(pts[0].s_min_db.unwrap().abs() < 1e-12);
        assert!(pts[0].s_max_db.unwrap().abs() < 1e-12);
        // anti-squeezing grows with power
        let powers: Vec<f64> = (1..40).map(|i| i as f64 * 2e-10).collect();
        let pts = power_sweep(&m.with_g0(1.0), &chain, &powers, 1, omega, &SweepOptions::default()).unwrap();
        let anti: Vec<f64> = pts.iter().map(|p| p.s_max_db.unwrap()).collect();
        assert!(anti.windows(2).all(|w| w[1] > w[0]), "{anti:?}");
        // sweep is order independent
        let mut shuffled = powers.clone();
        shuffled.reverse();
        let rev = power_sweep(&m, &chain, &shuffled, 1, omega, &SweepOptions::default()).unwrap();
        for p in &pts {
            let q = rev.iter().find(|q| q.power == p.power).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn sweep_flags_threshold_crossing() {
        // monostable pump, with dispersion pushing the pair detuning to κ
        let m = squeezer_model();
        let k = m.kappa();
        let m = m.with_delta(0.5 * k).with_d2(k);
        let th = crate::steady::oscillation_threshold(&m, 1).unwrap();
        let chain = DetectionChain::lossless();
        let opts = SweepOptions {
            branch: BranchPolicy::Lowest,
            ..Default::default()
        };
        let pts = power_sweep(&m, &chain, &[0.5 * th.power, 0.99 * th.power], 1, 0.0, &opts).unwrap();
        assert!(!pts[0].above_threshold);
        assert!(pts[0].s_min_db.unwrap() < 0.0);
        // just below the threshold power the lowest branch is still stable
        assert!(!pts[1].above_threshold);
        let over = crate::steady::power_for_rho(&m, 1.2 * th.rho).unwrap();
        let pts = power_sweep(&m, &chain, &[over], 1, 0.0, &SweepOptions::default()).unwrap();
        assert!(pts[0].above_threshold);
        assert!(pts[0].s_min_db.is_none());
    }

    #[test]
    fn phase_scan_consistency() {
        let m = squeezer_model().with_delta(0.25e9);
        let st = state_at(&m, 0.6);
        let chain = DetectionChain::lumped(0.918, 0.602).unwrap();
        let cov = output_covariance(&pair_scattering(&m, &st, 1, 4e7).unwrap(), &chain).unwrap();
        let ext = QuadratureExtrema::from_covariance(&cov, &chain.lo);
        let settings = PhaseScanSettings::default();
        let tr = phase_scan_trace(&cov, &chain.lo, &settings, 1).unwrap();
        let mn = tr.variance_db.iter().copied().fold(f64::INFINITY, f64::min);
        let mx = tr.variance_db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((mn - ext.s_min_db).abs() < 1e-9);
        assert!((mx - ext.s_max_db).abs() < 1e-9);
        // π periodicity
        let n = settings.samples_per_period;
        for k in 0..tr.theta.len() - n {
            assert!((tr.variance_db[k] - tr.variance_db[k + n]).abs() < 1e-9);
        }
        assert!(tr.shot_noise_db.iter().all(|&v| v == 0.0));

        let flat = phase_scan_trace(&Matrix4::identity(), &chain.lo, &settings, 1).unwrap();
        assert!(flat.variance_db.iter().all(|&v| v.abs() < 1e-12));

        let jittered = PhaseScanSettings { jitter: true, ..settings };
        let a = phase_scan_trace(&cov, &chain.lo, &jittered, 9).unwrap();
        let b = phase_scan_trace(&cov, &chain.lo, &jittered, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.variance_db, tr.variance_db);
    }

    #[test]
    fn phase_scan_rejects_bad_settings() {
        let cov = Matrix4::identity();
        let lo = LocalOscillator::default();
        let bad = PhaseScanSettings { vbw_hz: 0.0, ..Default::default() };
        assert!(phase_scan_trace(&cov, &lo, &bad, 0).is_err());
        let odd = PhaseScanSettings { samples_per_period: 7, ..Default::default() };
        assert!(phase_scan_trace(&cov, &lo, &odd, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn physical_output_everywhere(
            frac in 0.0f64..0.98,
            delta_over_k in -2.0f64..2.0,
            escape in 0.05f64..1.0,
            eta in 0.0f64..=1.0,
            omega_over_k in -4.0f64..4.0,
            theta in 0.0f64..std::f64::consts::PI,
        ) {
            let base = squeezer_model();
            let k = base.kappa();
            let m = ResonatorModel { kappa_e: escape * k, kappa_i: (1.0 - escape) * k, ..base };
            // pick ρ as a fraction of the stability boundary for the pair
            let dl0 = delta_over_k * k;
            let m = m.with_delta(dl0);
            let hk = 0.5 * k;
            // largest u with u² < hk² + (dl0 - 2u)² is the smallest threshold root, if any
            let disc = dl0 * dl0 - 3.0 * hk * hk;
            let u_max = if disc >= 0.0 && dl0 > 0.0 { (2.0 * dl0 - disc.sqrt()) / 3.0 } else { 3.0 * k };
            let st = steady_state_for_rho(&m, frac * u_max / m.g0).unwrap().0;
            let s = pair_scattering(&m, &st, 1, omega_over_k * k).unwrap();
            let [n0, n1] = s.bogoliubov_norms();
            prop_assert!((n0 - 1.0).abs() < 1e-10 && (n1 - 1.0).abs() < 1e-10);
            let chain = DetectionChain::lumped(escape, eta).unwrap();
            let cov = output_covariance(&s, &chain).unwrap();
            prop_assert!(min_symplectic_eigenvalue(&cov) >= 1.0 - 1e-9);
            let ext = QuadratureExtrema::from_covariance(&cov, &chain.lo);
            prop_assert!(ext.uncertainty_product() >= 1.0 - 1e-9);
            prop_assert!(ext.s_min >= 1.0 - eta - 1e-9);
            prop_assert!(ext.s_min >= 1.0 - eta * escape - 1e-9);
            let v = homodyne_variance(&cov, theta);
            prop_assert!(v > 0.0);
            prop_assert!((v - homodyne_variance(&cov, theta + std::f64::consts::PI)).abs() < 1e-12);
            let s_neg = pair_scattering(&m, &st, 1, -omega_over_k * k).unwrap();
            let cov_neg = output_covariance(&s_neg, &chain).unwrap();
            prop_assert!((v - homodyne_variance(&cov_neg, theta)).abs() < 1e-10);
        }
    }
}
