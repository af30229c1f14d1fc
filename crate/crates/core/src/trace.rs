//! Swept-wavelength transmission traces: loading, resonance detection,
//! Lorentzian fitting and quality-factor statistics.
//!
//! A bus-coupled ring seen on the through port transmits
//!
//! ```text
//! T(δ) = |1 - κ_e / (iδ + κ/2)|² = (δ² + ((κ_i - κ_e)/2)²) / (δ² + (κ/2)²)
//! ```
//!
//! with `δ = -2πc (λ - λ_c) / λ_c²`. In wavelength this is
//! `((λ-λ_c)² + b²) / ((λ-λ_c)² + g²)`, where `g` is the half width at half
//! maximum and `b/g = √T0`. The depth fixes `|κ_e - κ_i|` but not its sign,
//! so every fit carries both coupling assignments.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SPEED_OF_LIGHT;

/// Upper bound on normalized transmission, allowing for baseline slack.
pub const MAX_TRANSMISSION: f64 = 1.05;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub sweep_rate_nm_per_s: Option<f64>,
    pub input_power_w: Option<f64>,
    /// The file listed wavelengths in descending order.
    pub reversed: bool,
    /// A rolling-quantile baseline was divided out.
    pub detrended: bool,
    pub source: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionTrace {
    /// Strictly ascending (nm).
    pub wavelength_nm: Vec<f64>,
    pub transmission: Vec<f64>,
    pub metadata: TraceMetadata,
}

impl TransmissionTrace {
    /// Builds a trace, reversing descending input.
    pub fn new(mut wavelength_nm: Vec<f64>, mut transmission: Vec<f64>) -> Result<Self> {
        let mut metadata = TraceMetadata::default();
        if wavelength_nm.len() >= 2 && wavelength_nm[0] > wavelength_nm[1] {
            wavelength_nm.reverse();
            transmission.reverse();
            metadata.reversed = true;
        }
        let trace = Self {
            wavelength_nm,
            transmission,
            metadata,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.wavelength_nm.is_empty() {
            return Err(Error::InsufficientData("empty trace".into()));
        }
        if self.wavelength_nm.len() != self.transmission.len() {
            return Err(Error::GridMismatch(format!(
                "{} wavelengths vs {} transmission values",
                self.wavelength_nm.len(),
                self.transmission.len()
            )));
        }
        if let Some(i) = self.wavelength_nm.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::domain(format!("wavelength is not strictly monotone at sample {}", i + 1)));
        }
        if let Some(i) = self
            .transmission
            .iter()
            .position(|t| !(0.0..=MAX_TRANSMISSION).contains(t))
        {
            return Err(Error::domain(format!(
                "transmission {} at sample {i} is outside [0, {MAX_TRANSMISSION}]",
                self.transmission[i]
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.wavelength_nm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelength_nm.is_empty()
    }
}

/// Rolling-quantile baseline removal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetrendOptions {
    /// Full width of the rolling window (nm); about 10× the expected FWHM.
    pub window_nm: f64,
    pub quantile: f64,
}

impl DetrendOptions {
    pub fn for_fwhm(expected_fwhm_nm: f64) -> Self {
        Self {
            window_nm: 10.0 * expected_fwhm_nm,
            quantile: 0.95,
        }
    }
}

/// Divides out a rolling upper-quantile baseline. The quantile is sampled
/// every few points and interpolated in between.
pub fn detrend(wavelength_nm: &[f64], values: &[f64], opts: &DetrendOptions) -> Result<Vec<f64>> {
    if !(opts.window_nm > 0.0 && (0.0..=1.0).contains(&opts.quantile)) {
        return Err(Error::domain("detrend window must be positive and quantile in [0, 1]"));
    }
    let n = values.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let half = 0.5 * opts.window_nm;
    let quantile_at = |i: usize| {
        let lo = wavelength_nm.partition_point(|&w| w < wavelength_nm[i] - half);
        let hi = wavelength_nm.partition_point(|&w| w <= wavelength_nm[i] + half);
        let mut win = values[lo..hi].to_vec();
        let k = ((win.len() - 1) as f64 * opts.quantile).round() as usize;
        *win.select_nth_unstable_by(k, f64::total_cmp).1
    };
    let span = wavelength_nm.partition_point(|&w| w <= wavelength_nm[0] + half).max(1);
    let stride = (span / 8).max(1);
    let mut knots: Vec<usize> = (0..n).step_by(stride).collect();
    if *knots.last().unwrap() != n - 1 {
        knots.push(n - 1);
    }
    let base: Vec<f64> = knots.iter().map(|&i| quantile_at(i)).collect();
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for (i, v) in values.iter().enumerate() {
        while seg + 1 < knots.len() - 1 && knots[seg + 1] <= i {
            seg += 1;
        }
        let b = if knots.len() == 1 {
            base[0]
        } else {
            let (i0, i1) = (knots[seg], knots[seg + 1]);
            let f = (i - i0) as f64 / (i1 - i0) as f64;
            base[seg] + f * (base[seg + 1] - base[seg])
        };
        if !(b > 0.0) {
            return Err(Error::domain(format!("baseline is not positive near sample {i}")));
        }
        out.push(v / b);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadOptions {
    /// `None` keeps the values as stored.
    pub detrend: Option<DetrendOptions>,
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a `wavelength_nm,transmission` CSV. Lines starting with `#` are
/// comments; `# sweep_rate_nm_per_s=<v>` and `# input_power_w=<v>` fill in
/// the metadata.
pub fn load_trace(path: &Path, opts: &LoadOptions) -> Result<TransmissionTrace> {
    let text = std::fs::read_to_string(path)?;
    let mut metadata = TraceMetadata {
        source: Some(path.to_path_buf()),
        ..Default::default()
    };
    let mut wl = Vec::new();
    let mut tr = Vec::new();
    let mut header_seen = false;
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx as u64 + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.trim().split_once('=') {
                let parse = |v: &str| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| parse_error(path, line_no, format!("bad metadata value: {e}")))
                };
                match key.trim() {
                    "sweep_rate_nm_per_s" => metadata.sweep_rate_nm_per_s = Some(parse(value)?),
                    "input_power_w" => metadata.input_power_w = Some(parse(value)?),
                    _ => {}
                }
            }
            continue;
        }
        if !header_seen {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols != ["wavelength_nm", "transmission"] {
                return Err(parse_error(
                    path,
                    line_no,
                    format!("expected header `wavelength_nm,transmission`, found `{line}`"),
                ));
            }
            header_seen = true;
            continue;
        }
        let mut fields = line.split(',');
        let (a, b) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(parse_error(path, line_no, "expected exactly two comma-separated fields")),
        };
        let num = |s: &str, what: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(path, line_no, format!("invalid {what} `{}`", s.trim())))
        };
        let w = num(a, "wavelength")?;
        let t = num(b, "transmission")?;
        if let Some(&prev) = wl.last() {
            let ascending = wl.len() < 2 || wl[1] > wl[0];
            let ok = if wl.len() < 2 { w != prev } else if ascending { w > prev } else { w < prev };
            if !ok {
                return Err(parse_error(path, line_no, "wavelength is not strictly monotone"));
            }
        }
        wl.push(w);
        tr.push(t);
    }
    if !header_seen {
        return Err(parse_error(path, last_line.max(1), "missing header `wavelength_nm,transmission`"));
    }
    if wl.is_empty() {
        return Err(parse_error(path, last_line, "no data rows"));
    }
    if wl.len() >= 2 && wl[0] > wl[1] {
        wl.reverse();
        tr.reverse();
        metadata.reversed = true;
    }
    if let Some(d) = &opts.detrend {
        tr = detrend(&wl, &tr, d)?;
        metadata.detrended = true;
    }
    let trace = TransmissionTrace {
        wavelength_nm: wl,
        transmission: tr,
        metadata,
    };
    trace.validate()?;
    Ok(trace)
}

/// Writes the trace in the load format. Values use shortest round-trip
/// formatting, so a reload reproduces them exactly.
pub fn save_trace(path: &Path, trace: &TransmissionTrace) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(v) = trace.metadata.sweep_rate_nm_per_s {
        writeln!(out, "# sweep_rate_nm_per_s={v}")?;
    }
    if let Some(v) = trace.metadata.input_power_w {
        writeln!(out, "# input_power_w={v}")?;
    }
    writeln!(out, "wavelength_nm,transmission")?;
    for (w, t) in trace.wavelength_nm.iter().zip(&trace.transmission) {
        writeln!(out, "{w:?},{t:?}")?;
    }
    out.flush()?;
    Ok(())
}

/// One resonance as seen on the through port.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticResonance {
    pub center_nm: f64,
    pub q_i: f64,
    pub q_c: f64,
}

impl SyntheticResonance {
    pub fn transmission(&self, wavelength_nm: f64) -> f64 {
        let omega0 = 2.0 * std::f64::consts::PI * SPEED_OF_LIGHT / (self.center_nm * 1e-9);
        let ki = omega0 / self.q_i;
        let ke = omega0 / self.q_c;
        let delta = -omega0 * (wavelength_nm - self.center_nm) / self.center_nm;
        let num = delta * delta + 0.25 * (ki - ke) * (ki - ke);
        let den = delta * delta + 0.25 * (ki + ke) * (ki + ke);
        num / den
    }
}

/// Uniformly sampled trace of cascaded resonances, with optional additive
/// Gaussian noise (absolute, in transmission units).
pub fn synthetic_trace(
    resonances: &[SyntheticResonance],
    start_nm: f64,
    stop_nm: f64,
    samples: usize,
    noise: f64,
    seed: u64,
) -> Result<TransmissionTrace> {
    if samples < 2 || !(stop_nm > start_nm) {
        return Err(Error::domain("need at least two samples over an increasing span"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::domain(e.to_string()))?;
    let step = (stop_nm - start_nm) / (samples - 1) as f64;
    let wl: Vec<f64> = (0..samples).map(|i| start_nm + step * i as f64).collect();
    let tr = wl
        .iter()
        .map(|&w| {
            let clean: f64 = resonances.iter().map(|r| r.transmission(w)).product();
            let noisy = if noise > 0.0 { clean + dist.sample(&mut rng) } else { clean };
            noisy.clamp(0.0, MAX_TRANSMISSION)
        })
        .collect();
    TransmissionTrace::new(wl, tr)
}

/// Candidate dip found by [`detect_resonances`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceWindow {
    /// Sample index of the minimum.
    pub index: usize,
    pub center_nm: f64,
    pub min_transmission: f64,
    pub prominence: f64,
    /// Half-open sample range to fit.
    pub start: usize,
    pub end: usize,
}

/// Local minima whose topographic prominence reaches `min_prominence`,
/// at least `min_spacing_nm` apart (more prominent dips win), in
/// ascending wavelength. Each window spans ±5 estimated FWHM, clipped at
/// the midpoints to neighbouring dips.
pub fn detect_resonances(trace: &TransmissionTrace, min_prominence: f64, min_spacing_nm: f64) -> Vec<ResonanceWindow> {
    let t = &trace.transmission;
    let n = t.len();
    let mut candidates = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if t[i] < t[i - 1] {
            // walk a flat bottom
            let mut j = i;
            while j + 1 < n && t[j + 1] == t[i] {
                j += 1;
            }
            if j + 1 < n && t[j + 1] > t[i] {
                let idx = (i + j) / 2;
                let left = t[..i].iter().rev().take_while(|&&v| v >= t[i]).fold(t[i], |m, &v| m.max(v));
                let right = t[j + 1..].iter().take_while(|&&v| v >= t[i]).fold(t[i], |m, &v| m.max(v));
                let prominence = left.min(right) - t[i];
                if prominence >= min_prominence && prominence > 0.0 {
                    candidates.push((idx, prominence));
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(usize, f64)> = Vec::new();
    for c in candidates {
        let w = trace.wavelength_nm[c.0];
        if kept
            .iter()
            .all(|k| (trace.wavelength_nm[k.0] - w).abs() >= min_spacing_nm)
        {
            kept.push(c);
        }
    }
    kept.sort_by_key(|k| k.0);

    let wl = &trace.wavelength_nm;
    (0..kept.len())
        .map(|k| {
            let (idx, prominence) = kept[k];
            let level = t[idx] + 0.5 * prominence;
            let mut a = idx;
            while a > 0 && t[a] < level {
                a -= 1;
            }
            let mut b = idx;
            while b + 1 < n && t[b] < level {
                b += 1;
            }
            let fwhm = (wl[b] - wl[a]).max(wl[(idx + 1).min(n - 1)] - wl[idx.saturating_sub(1)]);
            let mut lo_nm = wl[idx] - 5.0 * fwhm;
            let mut hi_nm = wl[idx] + 5.0 * fwhm;
            if k > 0 {
                lo_nm = lo_nm.max(0.5 * (wl[kept[k - 1].0] + wl[idx]));
            }
            if k + 1 < kept.len() {
                hi_nm = hi_nm.min(0.5 * (wl[kept[k + 1].0] + wl[idx]));
            }
            ResonanceWindow {
                index: idx,
                center_nm: wl[idx],
                min_transmission: t[idx],
                prominence,
                start: wl.partition_point(|&w| w < lo_nm),
                end: wl.partition_point(|&w| w <= hi_nm),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingRegime {
    Overcoupled,
    Undercoupled,
    Ambiguous,
}

/// How to resolve the `κ_e ↔ κ_i` degeneracy of a through-port fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingPrior {
    #[default]
    Overcoupled,
    Undercoupled,
    /// Report the overcoupled assignment but flag the regime as ambiguous.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub prior: CouplingPrior,
    pub max_iterations: usize,
    /// Fits ending with an RMS residual above this are rejected.
    pub max_rms: f64,
    /// `√T0` below this counts as critical coupling.
    pub critical_tolerance: f64,
    pub min_samples_in_fwhm: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            prior: CouplingPrior::Overcoupled,
            max_iterations: 200,
            max_rms: 0.05,
            critical_tolerance: 1e-3,
            min_samples_in_fwhm: 15,
        }
    }
}

/// The other coupling assignment consistent with the same dip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingAssignment {
    pub q_i: f64,
    pub q_c: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceFit {
    pub center: f64,
    /// Full width at half maximum (pm).
    pub linewidth_fwhm: f64,
    /// On-resonance transmission `T0`.
    pub extinction: f64,
    pub q_l: f64,
    pub q_i: f64,
    pub q_c: f64,
    pub eta: f64,
    pub regime: CouplingRegime,
    pub alternate: CouplingAssignment,
    pub fit_rms: f64,
    pub samples_in_fwhm: usize,
    pub iterations: usize,
}

impl ResonanceFit {
    /// Through-port transmission of the fitted dip.
    pub fn model(&self, wavelength_nm: f64) -> f64 {
        let x = (wavelength_nm - self.center) * 1e3;
        let g = 0.5 * self.linewidth_fwhm;
        let b2 = self.extinction * g * g;
        (x * x + b2) / (x * x + g * g)
    }
}

fn lorentz_dip(p: &[f64; 3], x: f64) -> (f64, [f64; 3]) {
    let (x0, g, b) = (p[0], p[1], p[2]);
    let d = x - x0;
    let num = d * d + b * b;
    let den = d * d + g * g;
    let t = num / den;
    let dd = 2.0 * d * (num - den) / (den * den); // ∂T/∂x0 = -∂T/∂d
    (t, [dd, -2.0 * g * num / (den * den), 2.0 * b / den])
}

/// Levenberg-Marquardt fit of the through-port dip over `window`.
pub fn fit_lorentzian(trace: &TransmissionTrace, window: &ResonanceWindow, opts: &FitOptions) -> Result<ResonanceFit> {
    let range = window.start..window.end.min(trace.len());
    if range.len() < 4 {
        return Err(Error::InsufficientData("window holds fewer than 4 samples".into()));
    }
    let wl = &trace.wavelength_nm[range.clone()];
    let y = &trace.transmission[range];
    let origin = wl[wl.len() / 2];
    let xs: Vec<f64> = wl.iter().map(|w| (w - origin) * 1e3).collect();

    // initial guess from the sampled minimum and its half-depth width
    let imin = (0..y.len()).min_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
    let t0 = y[imin].clamp(0.0, 1.0);
    let level = 0.5 * (1.0 + t0);
    let mut a = imin;
    while a > 0 && y[a] < level {
        a -= 1;
    }
    let mut b = imin;
    while b + 1 < y.len() && y[b] < level {
        b += 1;
    }
    let g0 = (0.5 * (xs[b] - xs[a])).max(1e-6);
    let mut p = [xs[imin], g0, g0 * t0.sqrt()];

    let sse = |p: &[f64; 3]| -> f64 { xs.iter().zip(y).map(|(&x, &v)| (lorentz_dip(p, x).0 - v).powi(2)).sum() };
    let mut cost = sse(&p);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut jtj = nalgebra::Matrix3::<f64>::zeros();
        let mut jtr = nalgebra::Vector3::<f64>::zeros();
        for (&x, &v) in xs.iter().zip(y) {
            let (t, grad) = lorentz_dip(&p, x);
            let j = nalgebra::Vector3::from(grad);
            jtj += j * j.transpose();
            jtr += j * (t - v);
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut damped = jtj;
            for k in 0..3 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let trial = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
            let trial_cost = sse(&trial);
            if trial_cost.is_finite() && trial_cost <= cost {
                let small = step.iter().zip(&p).all(|(s, v)| s.abs() <= 1e-13 * (v.abs() + 1e-9));
                let flat = cost - trial_cost <= 1e-15 * cost.max(1e-300);
                p = trial;
                cost = trial_cost;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                converged = small || flat;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || converged {
            converged = true;
            break;
        }
    }
    let fit_rms = (cost / xs.len() as f64).sqrt();
    if !converged || !(fit_rms <= opts.max_rms) {
        return Err(Error::FitNonConvergence {
            iterations,
            rms: fit_rms,
            reason: if converged {
                "residual above the accepted RMS".into()
            } else {
                "iteration limit reached".into()
            },
        });
    }
    let g = p[1].abs();
    let bb = p[2].abs();
    if bb > g {
        return Err(Error::FitNonConvergence {
            iterations,
            rms: fit_rms,
            reason: "fitted feature is a peak, not a dip".into(),
        });
    }
    let samples_in_fwhm = xs.iter().filter(|&&x| (x - p[0]).abs() <= g).count();
    if samples_in_fwhm < opts.min_samples_in_fwhm {
        return Err(Error::InsufficientData(format!(
            "{samples_in_fwhm} samples across the FWHM, need {}",
            opts.min_samples_in_fwhm
        )));
    }

    let center = origin + p[0] * 1e-3;
    // rates relative to ω0: κ/ω0 = 2g/λ_c, |κ_e - κ_i|/ω0 = 2b/λ_c
    let lam_pm = center * 1e3;
    let k = 2.0 * g / lam_pm;
    let a_diff = 2.0 * bb / lam_pm;
    let (k_big, k_small) = (0.5 * (k + a_diff), 0.5 * (k - a_diff));
    // overcoupled: κ_e is the larger rate
    let over = CouplingAssignment {
        q_i: 1.0 / k_small,
        q_c: 1.0 / k_big,
        eta: k_big / k,
    };
    let under = CouplingAssignment {
        q_i: 1.0 / k_big,
        q_c: 1.0 / k_small,
        eta: k_small / k,
    };
    let critical = bb / g < opts.critical_tolerance;
    let (chosen, alternate, regime) = match (critical, opts.prior) {
        (true, _) | (false, CouplingPrior::None) => (over, under, CouplingRegime::Ambiguous),
        (false, CouplingPrior::Overcoupled) => (over, under, CouplingRegime::Overcoupled),
        (false, CouplingPrior::Undercoupled) => (under, over, CouplingRegime::Undercoupled),
    };
    Ok(ResonanceFit {
        center,
        linewidth_fwhm: 2.0 * g,
        extinction: (bb / g).powi(2),
        q_l: 1.0 / k,
        q_i: chosen.q_i,
        q_c: chosen.q_c,
        eta: chosen.eta,
        regime,
        alternate,
        fit_rms,
        samples_in_fwhm,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Median of the samples in the most populated bin.
    pub mode: f64,
    pub min: f64,
    pub max: f64,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Self> {
        if values.is_empty() || bins == 0 {
            return Err(Error::InsufficientData("histogram needs values and at least one bin".into()));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = match range {
            Some((lo, hi)) if hi > lo => (lo, hi),
            Some(_) => return Err(Error::domain("histogram range must be increasing")),
            None if max > min => (min, max),
            None => {
                let pad = 0.5 * min.abs().max(1.0) * 1e-6;
                (min - pad, max + pad)
            }
        };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let bin_of = |v: f64| -> Option<usize> {
            if v < lo || v > hi {
                None
            } else {
                Some((((v - lo) / width) as usize).min(bins - 1))
            }
        };
        let mut counts = vec![0; bins];
        for &v in values {
            if let Some(b) = bin_of(v) {
                counts[b] += 1;
            }
        }
        let best = (0..bins).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        let mut members: Vec<f64> = values.iter().copied().filter(|&v| bin_of(v) == Some(best)).collect();
        members.sort_by(f64::total_cmp);
        let mode = if members.is_empty() {
            0.5 * (edges[best] + edges[best + 1])
        } else if members.len() % 2 == 1 {
            members[members.len() / 2]
        } else {
            0.5 * (members[members.len() / 2 - 1] + members[members.len() / 2])
        };
        Ok(Self {
            edges,
            counts,
            mode,
            min,
            max,
        })
    }

    /// Index of the bin holding `v`, if in range.
    pub fn bin_of(&self, v: f64) -> Option<usize> {
        let n = self.counts.len();
        (v >= self.edges[0] && v <= self.edges[n]).then(|| self.edges[1..n].partition_point(|&e| e <= v))
    }

    pub fn modal_bin(&self) -> usize {
        (0..self.counts.len())
            .max_by(|&a, &b| self.counts[a].cmp(&self.counts[b]).then(b.cmp(&a)))
            .unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QStatistics {
    pub count: usize,
    pub q_i: Histogram,
    pub q_l: Histogram,
    pub eta: Histogram,
}

pub fn q_statistics(fits: &[ResonanceFit], bins: usize) -> Result<QStatistics> {
    if fits.is_empty() {
        return Err(Error::InsufficientData("no fits to summarize".into()));
    }
    let q_i: Vec<f64> = fits.iter().map(|f| f.q_i).collect();
    let q_l: Vec<f64> = fits.iter().map(|f| f.q_l).collect();
    let eta: Vec<f64> = fits.iter().map(|f| f.eta).collect();
    Ok(QStatistics {
        count: fits.len(),
        q_i: Histogram::new(&q_i, bins, None)?,
        q_l: Histogram::new(&q_l, bins, None)?,
        eta: Histogram::new(&eta, bins, None)?,
    })
}

/// Free spectral range (Hz) as the median of adjacent-resonance
/// frequency spacings.
pub fn estimate_fsr(centers_nm: &[f64]) -> Result<f64> {
    if centers_nm.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 resonance centers, got {}",
            centers_nm.len()
        )));
    }
    if centers_nm.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(Error::domain("resonance centers must be positive"));
    }
    let mut freqs: Vec<f64> = centers_nm.iter().map(|c| SPEED_OF_LIGHT / (c * 1e-9)).collect();
    freqs.sort_by(f64::total_cmp);
    let mut gaps: Vec<f64> = freqs.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    Ok(if n % 2 == 1 {
        gaps[n / 2]
    } else {
        0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn squeezer_resonance(center: f64) -> SyntheticResonance {
        // 1/Q_c = 1/Q_L - 1/Q_i
        let q_c = 1.0 / (1.0 / 0.83e6 - 1.0 / 10.1e6);
        SyntheticResonance {
            center_nm: center,
            q_i: 10.1e6,
            q_c,
        }
    }

    /// ±8 FWHM around `center` with `per_fwhm` samples across the FWHM.
    fn single_dip(r: &SyntheticResonance, per_fwhm: usize, noise: f64, seed: u64) -> TransmissionTrace {
        let q_l = 1.0 / (1.0 / r.q_i + 1.0 / r.q_c);
        let fwhm = r.center_nm / q_l;
        let n = 16 * per_fwhm + 1;
        synthetic_trace(&[*r], r.center_nm - 8.0 * fwhm, r.center_nm + 8.0 * fwhm, n, noise, seed).unwrap()
    }

    fn fit_single(trace: &TransmissionTrace, opts: &FitOptions) -> Result<ResonanceFit> {
        let w = detect_resonances(trace, 0.05, 0.1);
        assert_eq!(w.len(), 1, "{w:?}");
        fit_lorentzian(trace, &w[0], opts)
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut tr = single_dip(&squeezer_resonance(1560.0), 20, 0.003, 1);
        tr.metadata.sweep_rate_nm_per_s = Some(10.0);
        save_trace(&path, &tr).unwrap();
        let back = load_trace(&path, &LoadOptions::default()).unwrap();
        assert_eq!(back.wavelength_nm, tr.wavelength_nm);
        assert_eq!(back.transmission, tr.transmission);
        assert_eq!(back.metadata.sweep_rate_nm_per_s, Some(10.0));
        assert!(!back.metadata.reversed);
    }

    #[test]
    fn descending_file_is_reversed_and_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "wavelength_nm,transmission\n1560.2,0.9\n1560.1,0.5\n1560.0,0.95\n").unwrap();
        let tr = load_trace(&path, &LoadOptions::default()).unwrap();
        assert_eq!(tr.wavelength_nm, vec![1560.0, 1560.1, 1560.2]);
        assert_eq!(tr.transmission, vec![0.95, 0.5, 0.9]);
        assert!(tr.metadata.reversed);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("", 1),
            ("wavelength_nm,transmission\n", 1),
            ("lambda,t\n1,2\n", 1),
            ("wavelength_nm,transmission\n1560.0,0.9\n1560.1,abc\n", 3),
            ("wavelength_nm,transmission\n1560.0,0.9\n1560.1\n", 3),
            ("# note\nwavelength_nm,transmission\n1560.0,0.9\n1560.1,0.8\n1560.05,0.7\n", 5),
        ];
        for (i, (body, line)) in cases.iter().enumerate() {
            let path = dir.path().join(format!("{i}.csv"));
            std::fs::write(&path, body).unwrap();
            match load_trace(&path, &LoadOptions::default()) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, *line as u64, "case {i}"),
                other => panic!("case {i}: {other:?}"),
            }
        }
    }

    #[test]
    fn out_of_range_transmission_is_rejected() {
        assert!(TransmissionTrace::new(vec![1.0, 2.0], vec![0.5, 1.2]).is_err());
        assert!(TransmissionTrace::new(vec![1.0, 2.0], vec![0.5]).is_err());
        assert!(TransmissionTrace::new(vec![1.0, 1.0], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn detrend_removes_slow_baseline() {
        let r = squeezer_resonance(1560.0);
        let clean = single_dip(&r, 20, 0.0, 0);
        let tilted: Vec<f64> = clean
            .wavelength_nm
            .iter()
            .zip(&clean.transmission)
            .map(|(w, t)| t * (0.6 + 0.1 * (w - 1560.0) / 0.2))
            .collect();
        let fwhm = 1560.0 / 0.83e6;
        let flat = detrend(&clean.wavelength_nm, &tilted, &DetrendOptions::for_fwhm(fwhm)).unwrap();
        // far from the dip the baseline comes back to ~1
        let n = flat.len();
        for i in [0, n / 10, n - 1 - n / 10, n - 1] {
            assert!((flat[i] - 1.0).abs() < 0.02, "{i}: {}", flat[i]);
        }
        let imin = (0..flat.len()).min_by(|&a, &b| flat[a].total_cmp(&flat[b])).unwrap();
        assert!((flat[imin] - clean.transmission[imin]).abs() < 0.02);
    }

    #[test]
    fn detection_cases() {
        let flat = TransmissionTrace::new((0..500).map(|i| 1560.0 + i as f64 * 1e-3).collect(), vec![1.0; 500]).unwrap();
        assert!(detect_resonances(&flat, 0.01, 0.1).is_empty());

        let centers = [1559.5, 1560.0, 1560.5];
        let res: Vec<_> = centers.iter().map(|&c| squeezer_resonance(c)).collect();
        let step = 2e-4;
        let tr = synthetic_trace(&res, 1559.0, 1561.0, (2.0 / step) as usize + 1, 0.0, 0).unwrap();
        let found = detect_resonances(&tr, 0.1, 0.2);
        assert_eq!(found.len(), 3);
        for (w, c) in found.iter().zip(centers) {
            assert!((w.center_nm - c).abs() <= step * 1.01, "{} vs {c}", w.center_nm);
        }
        let deepest = found.iter().map(|w| w.prominence).fold(0.0, f64::max);
        assert!(detect_resonances(&tr, deepest + 1e-3, 0.2).is_empty());
    }

    #[test]
    fn noiseless_fit_recovers_quality_factors() {
        let r = squeezer_resonance(1560.0);
        let fit = fit_single(&single_dip(&r, 30, 0.0, 0), &FitOptions::default()).unwrap();
        assert_relative_eq!(fit.q_i, 10.1e6, max_relative = 1e-6);
        assert_relative_eq!(fit.q_l, 0.83e6, max_relative = 1e-6);
        assert_relative_eq!(fit.eta, 0.9178, epsilon = 5e-5);
        assert_eq!(fit.regime, CouplingRegime::Overcoupled);
        assert_relative_eq!(1.0 / fit.q_l, 1.0 / fit.q_i + 1.0 / fit.q_c, max_relative = 1e-12);
        let t0 = ((fit.q_c - fit.q_i) / (fit.q_c + fit.q_i)).powi(2);
        assert_relative_eq!(fit.extinction, t0, max_relative = 1e-9);
        // swapping the prior swaps the assignment
        let under = fit_single(
            &single_dip(&r, 30, 0.0, 0),
            &FitOptions {
                prior: CouplingPrior::Undercoupled,
                ..Default::default()
            },
        )
        .unwrap();
        assert_relative_eq!(under.q_i, fit.alternate.q_i, max_relative = 1e-12);
        assert_eq!(under.regime, CouplingRegime::Undercoupled);
    }

    #[test]
    fn critical_coupling_is_ambiguous() {
        let r = SyntheticResonance {
            center_nm: 1560.0,
            q_i: 2e6,
            q_c: 2e6,
        };
        let fit = fit_single(&single_dip(&r, 30, 0.0, 0), &FitOptions::default()).unwrap();
        assert!(fit.extinction < 1e-10);
        assert_eq!(fit.regime, CouplingRegime::Ambiguous);
        assert_relative_eq!(fit.q_l, 1e6, max_relative = 1e-6);
    }

    #[test]
    fn sparse_sampling_is_rejected() {
        let r = squeezer_resonance(1560.0);
        match fit_single(&single_dip(&r, 8, 0.0, 0), &FitOptions::default()) {
            Err(Error::InsufficientData(_)) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fit_model_reproduces_data() {
        let r = squeezer_resonance(1560.0);
        let tr = single_dip(&r, 30, 0.01, 3);
        let w = detect_resonances(&tr, 0.1, 0.1);
        let fit = fit_lorentzian(&tr, &w[0], &FitOptions::default()).unwrap();
        let rms = (w[0].start..w[0].end)
            .map(|i| (fit.model(tr.wavelength_nm[i]) - tr.transmission[i]).powi(2))
            .sum::<f64>()
            / (w[0].end - w[0].start) as f64;
        assert!(rms.sqrt() <= fit.fit_rms * (1.0 + 1e-9));
    }

    #[test]
    fn histogram_single_value_and_modes() {
        let h = Histogram::new(&[9.2e6], 10, None).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.mode, 9.2e6);
        let h = Histogram::new(&[1.0, 2.0, 2.1, 2.2, 3.0], 4, Some((0.0, 4.0))).unwrap();
        assert_eq!(h.counts, vec![0, 1, 3, 1]);
        assert_eq!(h.modal_bin(), 2);
        assert_eq!(h.bin_of(2.05), Some(2));
        assert_eq!(h.bin_of(5.0), None);
    }

    #[test]
    fn fsr_cases() {
        let comb = |fsr: f64, n: usize| -> Vec<f64> {
            let f0 = SPEED_OF_LIGHT / 1560e-9;
            (0..n).map(|k| SPEED_OF_LIGHT / (f0 + fsr * (k as f64 - (n / 2) as f64)) * 1e9).collect()
        };
        let c = comb(59.3e9, 21);
        assert_relative_eq!(estimate_fsr(&c).unwrap(), 59.3e9, max_relative = 1e-6);
        let mut with_outlier = c.clone();
        with_outlier.push(0.5 * (c[3] + c[4]));
        assert_relative_eq!(estimate_fsr(&with_outlier).unwrap(), 59.3e9, max_relative = 1e-6);
        assert_relative_eq!(estimate_fsr(&comb(603e9, 8)).unwrap(), 603e9, max_relative = 1e-6);
        assert!(estimate_fsr(&c[..2]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn forward_then_fit_round_trip(
            q_i in 1e6f64..2e7,
            ratio in 0.05f64..0.7,
            center in 1550.0f64..1580.0,
        ) {
            // overcoupled: Q_c = ratio · Q_i
            let r = SyntheticResonance { center_nm: center, q_i, q_c: ratio * q_i };
            let tr = single_dip(&r, 30, 0.0, 0);
            let w = detect_resonances(&tr, 0.01, 0.1);
            prop_assert_eq!(w.len(), 1);
            let fit = fit_lorentzian(&tr, &w[0], &FitOptions::default()).unwrap();
            prop_assert!((fit.q_i / q_i - 1.0).abs() < 1e-6);
            prop_assert!((fit.q_c / (ratio * q_i) - 1.0).abs() < 1e-6);
            prop_assert!((1.0 / fit.q_l - 1.0 / fit.q_i - 1.0 / fit.q_c).abs() * fit.q_l < 1e-12);
        }
    }
}
