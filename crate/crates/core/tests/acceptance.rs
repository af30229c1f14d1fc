//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! `cargo test --test acceptance -- 3 7` runs only the listed criteria.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use num_complex::Complex64;
use squeezesim::calibration::{calibrate_g0, CalibrationTarget};
use squeezesim::langevin::{cross_validate, simulate_pair, LangevinSettings};
use squeezesim::model::{
    detection_chain_total, escape_efficiency, max_onchip_squeezing_db, DetectionChain, PumpDrive, ResonatorModel,
    SPEED_OF_LIGHT,
};
use squeezesim::spectra::{extrema_for_state, power_sweep, spectrum_grid, theta_grid, SweepOptions};
use squeezesim::steady::{
    oscillation_threshold, solve_steady_state, steady_state_for_rho, steady_state_residual, BranchPolicy,
    DetuningPolicy, SteadyState,
};
use squeezesim::trace::{
    detect_resonances, estimate_fsr, fit_lorentzian, save_trace, synthetic_trace, FitOptions, ResonanceWindow,
    SyntheticResonance,
};
use squeezesim::validate::physicality_margins;

const Q_I: f64 = 10.1e6;
const Q_L: f64 = 0.83e6;
const LAMBDA_M: f64 = 1560e-9;
const FSR_SQUEEZER: f64 = 59.3e9;
const FSR_FILTER: f64 = 603e9;
/// Samples across one linewidth in the fit round-trip traces.
const SAMPLES_PER_FWHM: usize = 200;

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn squeezer() -> ResonatorModel {
    ResonatorModel::from_quality_factors(LAMBDA_M, Q_I, Q_L, FSR_SQUEEZER).unwrap()
}

fn squeezer_chain() -> DetectionChain {
    DetectionChain::new(squeezer().escape_efficiency(), 0.75, 0.95, 0.98, 0.88).unwrap()
}

fn omega_7mhz() -> f64 {
    2.0 * std::f64::consts::PI * 7e6
}

/// `x` rounded to three significant figures.
fn sig3(x: f64) -> f64 {
    let scale = 10f64.powi(2 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

fn criterion_1() -> Outcome {
    let chain = DetectionChain::new(1.0, 0.75, 0.95, 0.98, 0.88).unwrap();
    let cases = [
        ("escape_efficiency(10.1e6, 0.83e6)", escape_efficiency(Q_I, Q_L).unwrap(), 0.9178),
        ("max_onchip_squeezing_db(0.91)", max_onchip_squeezing_db(0.91).unwrap(), 10.46),
        ("max_onchip_squeezing_db(0.75)", max_onchip_squeezing_db(0.75).unwrap(), 6.02),
        ("detection_chain_total(0.75, 0.95, 0.98, 0.88)", detection_chain_total(&chain).unwrap(), 0.602),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, got, want) in cases {
        let ok = sig3(got) == sig3(want);
        pass &= ok;
        parts.push(format!("{name} = {got:.6} (want {want})"));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

struct SweepCheck {
    squeezing_db: f64,
    anti_squeezing_db: f64,
    optimum_mw: f64,
    monotone: bool,
    first_drop_mw: Option<f64>,
}

/// Calibrates g0 so 50 mW is the squeezing optimum at detuning `delta`
/// (units of κ) and sweeps 2.5 to 100 mW.
fn fig4b_sweep(delta_over_kappa: f64) -> SweepCheck {
    let base = squeezer();
    let model = base.with_delta(delta_over_kappa * base.kappa());
    let chain = DetectionChain::lumped(0.918, 0.602).unwrap();
    let cal = calibrate_g0(
        &model,
        &chain,
        1,
        omega_7mhz(),
        0.05,
        CalibrationTarget::SqueezingOptimum,
        DetuningPolicy::Fixed,
        BranchPolicy::AdiabaticUpsweep,
    )
    .unwrap();
    let powers_mw: Vec<f64> = (1..=40).map(|k| 2.5 * k as f64).collect();
    let powers: Vec<f64> = powers_mw.iter().map(|p| p * 1e-3).collect();
    let pts = power_sweep(&cal.model, &chain, &powers, 1, omega_7mhz(), &SweepOptions::default()).unwrap();
    let at50 = pts.iter().find(|p| (p.power - 0.05).abs() < 1e-12).unwrap();
    let best = pts
        .iter()
        .min_by(|a, b| a.s_min_db.unwrap().total_cmp(&b.s_min_db.unwrap()))
        .unwrap();
    let first_drop = pts
        .windows(2)
        .find(|w| w[1].s_max_db.unwrap() <= w[0].s_max_db.unwrap())
        .map(|w| w[1].power * 1e3);
    SweepCheck {
        squeezing_db: -at50.s_min_db.unwrap(),
        anti_squeezing_db: at50.s_max_db.unwrap(),
        optimum_mw: best.power * 1e3,
        monotone: first_drop.is_none(),
        first_drop_mw: first_drop,
    }
}

fn describe(s: &SweepCheck) -> String {
    format!(
        "at 50 mW squeezing {:.3} dB (band [2.8, 3.4]), anti-squeezing {:.3} dB (band [5.3, 6.7]); sweep optimum {:.1} mW; anti-squeezing monotone over 2.5-100 mW: {}{}",
        s.squeezing_db,
        s.anti_squeezing_db,
        s.optimum_mw,
        s.monotone,
        s.first_drop_mw.map_or(String::new(), |p| format!(" (first decrease at {p:.1} mW)"))
    )
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let s = fig4b_sweep(0.0);
    let pass = (2.8..=3.4).contains(&s.squeezing_db)
        && (5.3..=6.7).contains(&s.anti_squeezing_db)
        && (s.optimum_mw - 50.0).abs() < 1e-9
        && s.monotone;
    let offset = fig4b_sweep(0.285);
    Outcome {
        pass: pass && t.elapsed().as_secs_f64() < 10.0,
        detail: format!(
            "detuning 0: {}. For reference, detuning 0.285 kappa: {}. {:.2} s",
            describe(&s),
            describe(&offset),
            t.elapsed().as_secs_f64()
        ),
    }
}

fn criterion_3() -> Outcome {
    let base = squeezer();
    let k = base.kappa();
    let model = base.with_delta(k).with_g0(1.0);
    let chain = squeezer_chain();
    let rho_th = oscillation_threshold(&model, 1).unwrap().rho;
    let probes: Vec<f64> = [0.01, 0.1, 0.5, 1.0, 3.0].iter().map(|p| p * k).collect();
    let mut settings = LangevinSettings::for_model(&model, 0.005, 22_000, probes, theta_grid(8));
    settings.record_series = false;
    let points = [
        ("vacuum", SteadyState::vacuum()),
        ("0.5 threshold", steady_state_for_rho(&model, 0.5 * rho_th).unwrap().0),
        ("0.9 threshold", steady_state_for_rho(&model, 0.9 * rho_th).unwrap().0),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, (label, st)) in points.iter().enumerate() {
        let t = Instant::now();
        let run = simulate_pair(&model, st, 1, &chain, &settings, 1000 + seed as u64).unwrap();
        let est = &run.psd_estimate;
        let analytic = spectrum_grid(&model, st, 1, &chain, &est.omega, &est.theta).unwrap();
        let cv = cross_validate(&analytic, est, 3.0).unwrap();
        let within_01 =
            cv.bins.iter().filter(|b| (b.estimate_db - b.analytic_db).abs() <= 0.1).count() as f64 / cv.bins.len() as f64;
        let max_sigma = cv.bins.iter().map(|b| b.sigma_db).fold(0.0, f64::max);
        let secs = t.elapsed().as_secs_f64();
        let ok = cv.pass && within_01 >= 0.95 && secs < 300.0;
        pass &= ok;
        parts.push(format!(
            "{label}: {:.0}% of {} bins within 3 sigma, {:.0}% within 0.1 dB, max |diff| {:.3} dB, max sigma {:.3} dB, {} samples, {:.0} s",
            100.0 * cv.fraction_within,
            cv.bins.len(),
            100.0 * within_01,
            cv.max_abs_diff_db,
            max_sigma,
            settings.samples(),
            secs
        ));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let m = physicality_margins(&squeezer().with_g0(1.0), 2000, 7).unwrap();
    let tol = 1e-9;
    let pass = m.min_symplectic >= 1.0 - tol
        && m.min_uncertainty_product >= 1.0 - tol
        && m.min_loss_floor_gap >= -tol
        && m.max_zero_pump_error <= 1e-12
        && t.elapsed().as_secs_f64() < 60.0;
    Outcome {
        pass,
        detail: format!(
            "{} sets: min symplectic eigenvalue {:.12}, min s_min*s_max {:.12}, min variance-(1-eta) {:.3e}, max zero-pump |V-1| {:.1e}; {:.2} s",
            m.samples,
            m.min_symplectic,
            m.min_uncertainty_product,
            m.min_loss_floor_gap,
            m.max_zero_pump_error,
            t.elapsed().as_secs_f64()
        ),
    }
}

/// Minimum two-mode quadrature variance at ω = 0, δ_l = 0, κ_i = 0, found
/// from the 2×2 Langevin system directly: `out = (κ K⁻¹ - 1) in` with
/// `K = [[κ/2, -iG], [iG*, κ/2]]`; a two-mode squeezer with output row
/// `(μ, ν)` has minimum variance `(|μ| - |ν|)²`.
fn pure_state_reference(kappa: f64, g: Complex64) -> f64 {
    let h = Complex64::new(0.5 * kappa, 0.0);
    let i = Complex64::i();
    let det = h * h - (-i * g) * (i * g.conj());
    let inv00 = h / det;
    let inv01 = (i * g) / det;
    let mu = kappa * inv00 - 1.0;
    let nu = kappa * inv01;
    (mu.norm() - nu.norm()).powi(2)
}

fn criterion_5() -> Outcome {
    let base = squeezer();
    let k = base.kappa();
    let x = 0.5;
    let u = x * 0.5 * k;
    // κ_i = 0 and Δ = 2u so that δ_1 = Δ - 2g0ρ = 0
    let model = ResonatorModel::new(base.omega0, 0.0, k, 2.0 * u, 0.0, 1.0, FSR_SQUEEZER).unwrap();
    let st = steady_state_for_rho(&model, u).unwrap().0;
    let chain = DetectionChain::lossless();
    let e0 = extrema_for_state(&model, &st, 1, &chain, 0.0).unwrap();
    let formula = (1.0 - x).powi(2) / (1.0 + x).powi(2);
    let reference = pure_state_reference(k, model.g0 * st.a0 * st.a0);
    let mut worst_product: f64 = (e0.uncertainty_product() - 1.0).abs();
    for w in [0.1, 0.5, 1.0, 3.0] {
        let e = extrema_for_state(&model, &st, 1, &chain, w * k).unwrap();
        worst_product = worst_product.max((e.uncertainty_product() - 1.0).abs());
    }
    let pass = worst_product <= 1e-6 && (e0.s_min - formula).abs() <= 1e-9 && (reference - formula).abs() <= 1e-9;
    Outcome {
        pass,
        detail: format!(
            "max |s_min*s_max - 1| {worst_product:.2e}; s_min(0) {:.12} vs (1-x)^2/(1+x)^2 {formula:.12} vs 2x2 reference {reference:.12}",
            e0.s_min
        ),
    }
}

/// Roots of `t (1 + (d - t)²) = s` by bisection on a dense grid refined
/// with the turning points, so each bracket holds at most one root.
fn brute_force_roots(d: f64, s: f64) -> Vec<f64> {
    let f = |t: f64| t * (1.0 + (d - t) * (d - t)) - s;
    let hi = s * (1.0 + 1e-9) + 1e-12;
    const N: usize = 10_000;
    let mut knots: Vec<f64> = (0..=N).map(|i| hi * i as f64 / N as f64).collect();
    // f'(t) = 3t² - 4dt + 1 + d²
    let disc = 4.0 * d * d - 3.0;
    if disc >= 0.0 {
        for r in [(2.0 * d - disc.sqrt()) / 3.0, (2.0 * d + disc.sqrt()) / 3.0] {
            if r > 0.0 && r < hi {
                knots.push(r);
            }
        }
    }
    knots.sort_by(f64::total_cmp);
    let mut roots = Vec::new();
    for w in knots.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        let (fa, fb) = (f(a), f(b));
        if fa == 0.0 {
            roots.push(a);
            continue;
        }
        if fa.signum() == fb.signum() {
            continue;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if f(m).signum() == fa.signum() {
                a = m;
            } else {
                b = m;
            }
        }
        roots.push(0.5 * (a + b));
    }
    roots
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let base = squeezer().with_g0(1.0);
    let k = base.kappa();
    let hk = 0.5 * k;
    let mut mismatched = 0;
    let mut bistable = 0;
    let mut worst_rel: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    for i in 0..100 {
        let delta = 4.0 * k * i as f64 / 99.0;
        let model = base.with_delta(delta);
        for j in 0..100 {
            // normalized drive s from 0.1 to 10 covers both folds for Δ ≤ 4κ
            let s = 0.1 + 9.9 * j as f64 / 99.0;
            let flux = s * hk.powi(3) / (model.g0 * model.kappa_e);
            let drive = PumpDrive::from_flux(flux, model.omega0).unwrap();
            let roots = solve_steady_state(&model, &drive).unwrap();
            let reference: Vec<f64> = brute_force_roots(delta / hk, model.g0 * model.kappa_e * drive.photon_flux / hk.powi(3))
                .into_iter()
                .map(|t| t * hk / model.g0)
                .collect();
            if reference.len() > 1 {
                bistable += 1;
            }
            if reference.len() != roots.len() {
                mismatched += 1;
                continue;
            }
            let scale = model.kappa_e.sqrt() * drive.a_in;
            for (r, want) in roots.iter().zip(&reference) {
                worst_rel = worst_rel.max((r.rho - want).abs() / want);
                worst_residual = worst_residual.max(steady_state_residual(&model, &drive, r.a0) / scale);
            }
        }
    }
    // g0 → 0: the linear cavity
    let mut worst_linear: f64 = 0.0;
    for g0 in [0.0, 1e-12] {
        for delta in [-2.0 * k, 0.0, 0.7 * k, 3.0 * k] {
            let model = base.with_g0(g0).with_delta(delta);
            let drive = PumpDrive::from_power(0.05, model.omega0).unwrap();
            let roots = solve_steady_state(&model, &drive).unwrap();
            let linear = model.kappa_e * drive.photon_flux / (hk * hk + delta * delta);
            worst_linear = worst_linear.max(if roots.len() == 1 {
                (roots[0].rho - linear).abs() / linear
            } else {
                f64::INFINITY
            });
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = mismatched == 0 && worst_rel <= 1e-8 && worst_residual < 1e-10 && worst_linear <= 1e-10 && secs < 30.0;
    Outcome {
        pass,
        detail: format!(
            "10000 grid points ({bistable} multistable): {mismatched} root-count mismatches, max relative root error {worst_rel:.2e}, max relative residual {worst_residual:.2e}, g0->0 max relative error {worst_linear:.2e}; {secs:.2} s"
        ),
    }
}

fn squeezer_resonance(center_nm: f64) -> SyntheticResonance {
    SyntheticResonance {
        center_nm,
        q_i: Q_I,
        q_c: 1.0 / (1.0 / Q_L - 1.0 / Q_I),
    }
}

/// Single dip over ±10 FWHM, `per_fwhm` samples across the FWHM.
fn fit_single(noise: f64, seed: u64, per_fwhm: usize) -> Option<(f64, f64)> {
    let r = squeezer_resonance(1560.0);
    let fwhm = 1560.0 / Q_L;
    let trace = synthetic_trace(&[r], 1560.0 - 10.0 * fwhm, 1560.0 + 10.0 * fwhm, 20 * per_fwhm + 1, noise, seed).ok()?;
    let windows = detect_resonances(&trace, 0.05, 0.1);
    let window = if windows.len() == 1 {
        windows[0]
    } else {
        // noise can split or hide the dip; fit the whole span around the minimum
        let idx = (trace.len() - 1) / 2;
        ResonanceWindow {
            index: idx,
            center_nm: trace.wavelength_nm[idx],
            min_transmission: trace.transmission[idx],
            prominence: 1.0 - trace.transmission[idx],
            start: 0,
            end: trace.len(),
        }
    };
    let fit = fit_lorentzian(&trace, &window, &FitOptions::default()).ok()?;
    Some((fit.q_i, fit.q_l))
}

fn comb_fsr(fsr: f64, q_i: f64, q_l: f64, count: usize) -> Option<f64> {
    let f_start = SPEED_OF_LIGHT / 1550e-9;
    let q_c = 1.0 / (1.0 / q_l - 1.0 / q_i);
    let res: Vec<SyntheticResonance> = (0..count)
        .map(|k| SyntheticResonance {
            center_nm: SPEED_OF_LIGHT / (f_start - fsr * k as f64) * 1e9,
            q_i,
            q_c,
        })
        .collect();
    let first = res[0].center_nm;
    let last = res[count - 1].center_nm;
    let pad = 0.5 * (last - first) / (count - 1) as f64;
    // ~40 samples per FWHM
    let span = last - first + 2.0 * pad;
    let samples = (span / (1550.0 / q_l) * 40.0) as usize;
    let trace = synthetic_trace(&res, first - pad, last + pad, samples, 0.0, 0).ok()?;
    let windows = detect_resonances(&trace, 0.05, 0.5 * pad);
    let centers: Vec<f64> = windows
        .iter()
        .filter_map(|w| fit_lorentzian(&trace, w, &FitOptions::default()).ok())
        .map(|f| f.center)
        .collect();
    if centers.len() != count {
        return None;
    }
    estimate_fsr(&centers).ok()
}

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let clean = fit_single(0.0, 0, SAMPLES_PER_FWHM);
    let clean_ok = clean.is_some_and(|(qi, ql)| (qi / Q_I - 1.0).abs() <= 1e-6 && (ql / Q_L - 1.0).abs() <= 1e-6);

    let mut worst_qi: f64 = 0.0;
    let mut worst_ql: f64 = 0.0;
    let mut failed = 0;
    for seed in 0..100 {
        match fit_single(0.01, seed, SAMPLES_PER_FWHM) {
            Some((qi, ql)) => {
                worst_qi = worst_qi.max((qi / Q_I - 1.0).abs());
                worst_ql = worst_ql.max((ql / Q_L - 1.0).abs());
            }
            None => failed += 1,
        }
    }
    let noisy_ok = failed == 0 && worst_qi <= 0.02 && worst_ql <= 0.02;

    let squeezer = comb_fsr(FSR_SQUEEZER, Q_I, Q_L, 8);
    let filter = comb_fsr(FSR_FILTER, 2.0e6, 0.5e6, 6);
    let fsr_ok = |got: Option<f64>, want: f64| got.is_some_and(|g| (g / want - 1.0).abs() <= 1e-3);
    let secs = t.elapsed().as_secs_f64();
    let pass = clean_ok && noisy_ok && fsr_ok(squeezer, FSR_SQUEEZER) && fsr_ok(filter, FSR_FILTER) && secs < 60.0;
    let (cqi, cql) = clean.unwrap_or((f64::NAN, f64::NAN));
    Outcome {
        pass,
        detail: format!(
            "noiseless Q_i err {:.1e}, Q_L err {:.1e}; 1% noise over 100 seeds at {SAMPLES_PER_FWHM} samples/FWHM: {failed} failed fits, worst Q_i err {:.2}%, worst Q_L err {:.2}%; FSR squeezer {:.4} GHz, filter {:.3} GHz; {secs:.1} s",
            (cqi / Q_I - 1.0).abs(),
            (cql / Q_L - 1.0).abs(),
            100.0 * worst_qi,
            100.0 * worst_ql,
            squeezer.unwrap_or(f64::NAN) * 1e-9,
            filter.unwrap_or(f64::NAN) * 1e-9
        ),
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn criterion_8() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_squeezesim");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/operating_point.toml");
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("trace.csv");
    let res: Vec<SyntheticResonance> = (0..4).map(|k| squeezer_resonance(1559.0 + 0.48 * k as f64)).collect();
    save_trace(&trace, &synthetic_trace(&res, 1558.8, 1560.7, 100_001, 0.003, 9).unwrap()).unwrap();

    let commands: Vec<Vec<String>> = vec![
        vec!["spectrum".into()],
        vec!["sweep".into()],
        vec!["phase-scan".into()],
        vec!["threshold".into()],
        vec!["validate".into()],
        vec!["fit".into(), trace.display().to_string()],
        vec!["stats".into(), tmp.path().join("fit-a/fits.json").display().to_string()],
    ];
    let mut differing = Vec::new();
    for args in &commands {
        let name = &args[0];
        let mut outputs = Vec::new();
        for run in ["a", "b"] {
            let out = tmp.path().join(format!("{name}-{run}"));
            let status = Command::new(bin)
                .args(args)
                .arg("--config")
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .args(["--seed", "42"])
                .output()
                .unwrap();
            if !status.status.success() {
                differing.push(format!("{name} exited with {:?}", status.status.code()));
            }
            outputs.push(dir_bytes(&out));
        }
        if outputs[0] != outputs[1] || outputs[0].is_empty() {
            differing.push(name.clone());
        }
    }
    Outcome {
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("{} commands rerun with seed 42 gave byte-identical files", commands.len())
        } else {
            format!("not reproducible: {}", differing.join(", "))
        },
    }
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 8] = [
        (1, "closed-form numbers", criterion_1),
        (2, "calibrated power sweep", criterion_2),
        (3, "stochastic oracle equivalence", criterion_3),
        (4, "physicality suite", criterion_4),
        (5, "pure-state limit", criterion_5),
        (6, "steady-state solver", criterion_6),
        (7, "fit round-trip", criterion_7),
        (8, "CLI determinism", criterion_8),
    ];
    let mut all = true;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let o = run();
        all &= o.pass;
        println!("criterion {n} {} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
