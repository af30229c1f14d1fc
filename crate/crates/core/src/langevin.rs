//! Time-domain Langevin integrator for one side-mode pair, used as an
//! independent check on the frequency-domain spectra.
//!
//! The linearized dynamics are Gaussian, so the symmetrized (Wigner) noise
//! representation is exact: each vacuum input becomes a classical complex
//! white noise with `½` per quadrature per unit bandwidth, i.e. a real
//! white noise of unit intensity on every vacuum-normalized quadrature.
//!
//! Time is integrated in units of `τ = κt`. Over a step of length `h` the
//! state `x`, its integral `J` and the external-noise increment `W_e` form a
//! 12-dimensional linear SDE whose exact transition (mean map and noise
//! covariance) comes from one matrix exponential (Van Loan). The detector
//! sees the step-averaged output `√(κ_e/κ) J/h - W_e/h`, so the sampled
//! homodyne signal is an exact integrate-and-dump record of the continuous
//! output, with no Euler error. `dt` only sets the sampling rate.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix4, SMatrix, SVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DetectionChain, HomodyneObservable, ResonatorModel};
use crate::spectra::SqueezingSpectrum;
use crate::steady::{PairDrift, SteadyState};

/// Magic bytes opening a raw series dump.
pub const RAW_MAGIC: &[u8; 8] = b"SQZRAW01";

/// Channels in a raw dump, in storage order.
pub const RAW_CHANNELS: [&str; 6] = ["re_a_l", "im_a_l", "re_a_-l", "im_a_-l", "homodyne_0", "homodyne_pi2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangevinSettings {
    /// Sampling step (s). Must resolve the cavity: `dt ≤ 0.05·2π/κ`.
    pub dt: f64,
    /// Number of Welch segments to average.
    pub segments: usize,
    /// Samples per Welch segment (even). Sets the frequency resolution.
    pub segment_length: usize,
    /// Analysis frequencies (rad/s); each is snapped to its nearest bin.
    pub probe_omegas: Vec<f64>,
    /// LO phases at which the PSD is reported.
    pub thetas: Vec<f64>,
    /// Keep the sampled amplitudes and homodyne signal in memory.
    pub record_series: bool,
    /// Stream the series to this file in the raw binary format.
    pub raw_dump: Option<PathBuf>,
}

impl LangevinSettings {
    /// Settings with `dt = 0.01·2π/κ` and bin spacing `resolution·κ`.
    pub fn for_model(
        model: &ResonatorModel,
        resolution: f64,
        segments: usize,
        probe_omegas: Vec<f64>,
        thetas: Vec<f64>,
    ) -> Self {
        let dtau = 0.02 * PI;
        // bin spacing in τ units is 2π/(M dτ)
        let m = (2.0 * PI / (resolution * dtau)).ceil() as usize;
        Self {
            dt: dtau / model.kappa(),
            segments,
            segment_length: m + m % 2,
            probe_omegas,
            thetas,
            record_series: false,
            raw_dump: None,
        }
    }

    /// Total number of samples the run produces.
    pub fn samples(&self) -> usize {
        (self.segments + 1) * self.segment_length / 2
    }

    pub fn duration(&self) -> f64 {
        self.samples() as f64 * self.dt
    }

    pub fn bin_omega(&self, bin: usize) -> f64 {
        2.0 * PI * bin as f64 / (self.segment_length as f64 * self.dt)
    }

    fn probe_bins(&self) -> Result<Vec<usize>> {
        self.probe_omegas
            .iter()
            .map(|&w| {
                let b = (w.abs() * self.segment_length as f64 * self.dt / (2.0 * PI)).round() as usize;
                if b == 0 || b >= self.segment_length / 2 {
                    Err(Error::domain(format!(
                        "probe frequency {w:.4e} rad/s falls outside the resolvable bins"
                    )))
                } else {
                    Ok(b)
                }
            })
            .collect()
    }
}

/// Spectral estimate on a (frequency, LO phase) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    /// Bin frequencies actually used (rad/s).
    pub omega: Vec<f64>,
    pub theta: Vec<f64>,
    /// `psd[i][j]` at `omega[i]`, `theta[j]`, shot noise = 1.
    pub psd: Vec<Vec<f64>>,
    /// One-sigma statistical uncertainty of `psd`.
    pub sigma: Vec<Vec<f64>>,
    pub segments: usize,
}

impl PsdEstimate {
    pub fn psd_db(&self, i: usize, j: usize) -> f64 {
        10.0 * self.psd[i][j].log10()
    }

    pub fn sigma_db(&self, i: usize, j: usize) -> f64 {
        10.0 / std::f64::consts::LN_10 * self.sigma[i][j] / self.psd[i][j]
    }
}

/// Sample statistics of the θ = 0 homodyne record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMoments {
    pub count: usize,
    pub mean: f64,
    /// Standard error of `mean` from batch means (robust to correlation).
    pub mean_standard_error: f64,
    pub variance: f64,
    pub excess_kurtosis: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Series {
    /// Intracavity `(a_l, a_{-l})` per sample, vacuum-normalized.
    pub amplitudes: Vec<[Complex64; 2]>,
    /// Homodyne signal at θ = 0 and θ = π/2.
    pub homodyne: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangevinRun {
    pub seed: u64,
    pub dt: f64,
    pub duration: f64,
    pub series: Option<Series>,
    pub psd_estimate: PsdEstimate,
    pub moments: SampleMoments,
}

/// Stationary covariance `P` of `dx = A x dτ + B dW`: `A P + P Aᵀ + B Bᵀ = 0`.
fn stationary_covariance(a: &Matrix4<f64>, q: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    // vec(A P + P Aᵀ) = (I ⊗ A + A ⊗ I) vec(P)
    let mut lhs = DMatrix::<f64>::zeros(16, 16);
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                // (I ⊗ A): P[k, j] contributes A[i, k] to entry (i, j)
                lhs[(i + 4 * j, k + 4 * j)] += a[(i, k)];
                // (A ⊗ I): P[i, k] contributes A[j, k]
                lhs[(i + 4 * j, i + 4 * k)] += a[(j, k)];
            }
        }
    }
    let rhs = DVector::from_iterator(16, (0..16).map(|n| -q[(n % 4, n / 4)]));
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Divergence("pair dynamics have no stationary state".into()))?;
    let p = Matrix4::from_fn(|i, j| sol[i + 4 * j]);
    Ok((p + p.transpose()) * 0.5)
}

/// Symmetric PSD square root, clipping round-off negatives.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Exact one-step transition for the augmented state `(x, J, W_e)`.
struct Propagator {
    /// Mean of the augmented state after one step given `x` (12×4).
    mean_map: SMatrix<f64, 12, 4>,
    /// `noise_root * ξ` has the one-step noise covariance.
    noise_root: SMatrix<f64, 12, 12>,
}

impl Propagator {
    fn new(a: &Matrix4<f64>, escape: f64, h: f64) -> Self {
        let n = 12;
        let mut aa = DMatrix::<f64>::zeros(n, n);
        for i in 0..4 {
            for j in 0..4 {
                aa[(i, j)] = a[(i, j)];
            }
            aa[(4 + i, i)] = 1.0;
        }
        // B B̂ᵀ with x driven by √(κ_e/κ) dW_e + √(κ_i/κ) dW_i and W_e tracked
        let mut bb = DMatrix::<f64>::zeros(n, n);
        let se = escape.sqrt();
        for i in 0..4 {
            bb[(i, i)] = 1.0;
            bb[(i, 8 + i)] = se;
            bb[(8 + i, i)] = se;
            bb[(8 + i, 8 + i)] = 1.0;
        }
        let mut big = DMatrix::<f64>::zeros(2 * n, 2 * n);
        big.view_mut((0, 0), (n, n)).copy_from(&(-&aa * h));
        big.view_mut((0, n), (n, n)).copy_from(&(&bb * h));
        big.view_mut((n, n), (n, n)).copy_from(&(aa.transpose() * h));
        let e = big.exp();
        let phi = e.view((n, n), (n, n)).transpose();
        let q = &phi * e.view((0, n), (n, n));
        let root = sqrt_psd((&q + q.transpose()) * 0.5);
        Self {
            mean_map: SMatrix::<f64, 12, 4>::from_fn(|i, j| phi[(i, j)]),
            noise_root: SMatrix::<f64, 12, 12>::from_fn(|i, j| root[(i, j)]),
        }
    }
}

/// Streaming Welch estimator at a handful of bins, for two projections
/// `h_u`, `h_v` and their cross spectrum.
struct ProbeWelch {
    m: usize,
    hop: usize,
    /// Per bin: `w[k] e^{-i ν k dτ}` for k in 0..m.
    kernels: Vec<Vec<Complex64>>,
    /// Open segments: (start sample, per-bin accumulators for u and v).
    open: Vec<(usize, Vec<(Complex64, Complex64)>)>,
    thetas: Vec<(f64, f64)>,
    scale: f64,
    sum: Vec<Vec<f64>>,
    sum_sq: Vec<Vec<f64>>,
    done: usize,
    overlap_factor: f64,
}

impl ProbeWelch {
    fn new(m: usize, dtau: f64, bins: &[usize], thetas: &[f64]) -> Self {
        let window: Vec<f64> = (0..m).map(|k| hann(k, m)).collect();
        let w2: f64 = window.iter().map(|w| w * w).sum();
        let hop = m / 2;
        let kernels = bins
            .iter()
            .map(|&b| {
                (0..m)
                    .map(|k| {
                        let phase = -2.0 * PI * ((b * k) % m) as f64 / m as f64;
                        Complex64::from_polar(window[k], phase)
                    })
                    .collect()
            })
            .collect();
        Self {
            m,
            hop,
            kernels,
            open: Vec::new(),
            thetas: thetas.iter().map(|t| t.sin_cos()).collect(),
            scale: dtau / w2,
            sum: vec![vec![0.0; thetas.len()]; bins.len()],
            sum_sq: vec![vec![0.0; thetas.len()]; bins.len()],
            done: 0,
            overlap_factor: overlap_variance_factor(&window, hop),
        }
    }

    fn push(&mut self, n: usize, hu: f64, hv: f64) {
        if n % self.hop == 0 {
            self.open
                .push((n, vec![(Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)); self.kernels.len()]));
        }
        for (start, acc) in &mut self.open {
            let k = n - *start;
            for (b, kernel) in self.kernels.iter().enumerate() {
                let z = kernel[k];
                acc[b].0 += z * hu;
                acc[b].1 += z * hv;
            }
        }
        if let Some(pos) = self.open.iter().position(|(s, _)| n + 1 - s == self.m) {
            let (_, acc) = self.open.remove(pos);
            for (b, (xu, xv)) in acc.into_iter().enumerate() {
                let puu = xu.norm_sqr();
                let pvv = xv.norm_sqr();
                let puv = (xu * xv.conj()).re;
                for (j, &(s, c)) in self.thetas.iter().enumerate() {
                    let p = self.scale * (c * c * puu + s * s * pvv + 2.0 * s * c * puv);
                    self.sum[b][j] += p;
                    self.sum_sq[b][j] += p * p;
                }
            }
            self.done += 1;
        }
    }

    fn finish(self, omegas: Vec<f64>, thetas: Vec<f64>) -> PsdEstimate {
        let k = self.done.max(1) as f64;
        let mut psd = Vec::new();
        let mut sigma = Vec::new();
        for (s, s2) in self.sum.iter().zip(&self.sum_sq) {
            let mean: Vec<f64> = s.iter().map(|v| v / k).collect();
            let sd: Vec<f64> = s2
                .iter()
                .zip(&mean)
                .map(|(v, m)| ((v / k - m * m).max(0.0) * k / (k - 1.0).max(1.0)).sqrt())
                .collect();
            sigma.push(sd.iter().map(|d| d * (self.overlap_factor / k).sqrt()).collect());
            psd.push(mean);
        }
        PsdEstimate {
            omega: omegas,
            theta: thetas,
            psd,
            sigma,
            segments: self.done,
        }
    }
}

fn hann(k: usize, m: usize) -> f64 {
    0.5 - 0.5 * (2.0 * PI * k as f64 / m as f64).cos()
}

/// Variance inflation of a Welch average from correlated overlapping
/// segments, for a white-ish process.
fn overlap_variance_factor(window: &[f64], hop: usize) -> f64 {
    let w2: f64 = window.iter().map(|w| w * w).sum();
    let mut factor = 1.0;
    let mut lag = hop;
    while lag > 0 && lag < window.len() {
        let c: f64 = window.iter().zip(&window[lag..]).map(|(a, b)| a * b).sum::<f64>() / w2;
        factor += 2.0 * c * c;
        lag += hop;
    }
    factor
}

struct RawWriter {
    out: BufWriter<File>,
    count: u64,
}

impl RawWriter {
    /// Header: magic, u32 channel count, u32 zero, u64 sample count,
    /// f64 dt (s), u64 seed; then little-endian f64 samples interleaved
    /// by channel.
    fn create(path: &Path, dt: f64, seed: u64) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(RAW_MAGIC)?;
        out.write_all(&(RAW_CHANNELS.len() as u32).to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?;
        out.write_all(&dt.to_le_bytes())?;
        out.write_all(&seed.to_le_bytes())?;
        Ok(Self { out, count: 0 })
    }

    fn push(&mut self, values: &[f64; 6]) -> Result<()> {
        for v in values {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.count += 1;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.seek(SeekFrom::Start(16))?;
        self.out.write_all(&self.count.to_le_bytes())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Header and samples of a raw dump.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDump {
    pub dt: f64,
    pub seed: u64,
    pub channels: usize,
    pub samples: Vec<f64>,
}

pub fn read_raw_dump(path: &Path) -> Result<RawDump> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: msg.to_string(),
    };
    if bytes.len() < 40 || &bytes[..8] != RAW_MAGIC {
        return Err(bad("not a raw series dump"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let channels = u32_at(8) as usize;
    let count = u64_at(16) as usize;
    let dt = f64::from_bits(u64_at(24));
    let seed = u64_at(32);
    let body = &bytes[40..];
    if body.len() != count * channels * 8 {
        return Err(bad("sample count does not match file size"));
    }
    let samples = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawDump {
        dt,
        seed,
        channels,
        samples,
    })
}

/// Integrates the pair and estimates the homodyne PSD at the probe bins.
pub fn simulate_pair(
    model: &ResonatorModel,
    steady: &SteadyState,
    l: i32,
    chain: &DetectionChain,
    settings: &LangevinSettings,
    seed: u64,
) -> Result<LangevinRun> {
    chain.validate()?;
    let kappa = model.kappa();
    if !(settings.dt > 0.0 && settings.dt <= 0.05 * 2.0 * PI / kappa) {
        return Err(Error::domain(format!(
            "dt = {:.3e} s does not resolve the cavity (limit {:.3e} s)",
            settings.dt,
            0.05 * 2.0 * PI / kappa
        )));
    }
    if settings.segment_length < 4 || settings.segment_length % 2 != 0 {
        return Err(Error::domain("segment_length must be an even number >= 4"));
    }
    if settings.segments < 2 {
        return Err(Error::domain("at least 2 Welch segments are needed"));
    }
    if settings.thetas.is_empty() {
        return Err(Error::domain("no LO phases requested"));
    }
    if chain.lo.observable != HomodyneObservable::RotatedSum {
        return Err(Error::domain("the stochastic oracle models the rotated-sum observable"));
    }
    let bins = settings.probe_bins()?;
    let drift = PairDrift::new(model, steady, l);
    if !drift.is_stable() {
        return Err(Error::Divergence(format!(
            "pair is at or above threshold (eigenvalue {})",
            drift.dominant_eigenvalue()
        )));
    }

    let dtau = settings.dt * kappa;
    let a = drift.quadrature_drift() / kappa;
    let escape = model.kappa_e / kappa;
    let prop = Propagator::new(&a, escape, dtau);
    let p_stat = stationary_covariance(&a, &Matrix4::identity())?;
    let p_root = Matrix4::from_fn(|i, j| sqrt_psd(DMatrix::from_fn(4, 4, |r, c| p_stat[(r, c)]))[(i, j)]);
    let eta = chain.total();
    let (ge, gl) = (eta.sqrt(), (1.0 - eta).sqrt());
    let (u, v) = {
        let (s, c) = chain.lo.relative_phase.sin_cos();
        ([1.0, 0.0, c, -s], [0.0, -1.0, -s, -c])
    };
    let inv_root2 = std::f64::consts::FRAC_1_SQRT_2;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let mut x = p_root * SVector::<f64, 4>::from_fn(|_, _| normal());
    let omegas: Vec<f64> = bins.iter().map(|&b| settings.bin_omega(b)).collect();
    let mut welch = ProbeWelch::new(settings.segment_length, dtau, &bins, &settings.thetas);
    let n_samples = settings.samples();
    let mut series = settings.record_series.then(|| Series {
        amplitudes: Vec::with_capacity(n_samples),
        homodyne: Vec::with_capacity(n_samples),
    });
    let mut raw = match &settings.raw_dump {
        Some(p) => Some(RawWriter::create(p, settings.dt, seed)?),
        None => None,
    };

    let batch = welch.hop;
    let mut batch_sum = 0.0;
    let mut batch_means = Vec::with_capacity(n_samples / batch + 1);
    let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
    let (se, inv_h) = (escape.sqrt(), 1.0 / dtau);
    let loss_scale = gl * inv_h.sqrt();

    for n in 0..n_samples {
        let xi = SVector::<f64, 12>::from_fn(|_, _| normal());
        let z = prop.mean_map * x + prop.noise_root * xi;
        let mut y = [0.0; 4];
        for (k, yk) in y.iter_mut().enumerate() {
            let out = se * z[4 + k] * inv_h - z[8 + k] * inv_h;
            *yk = ge * out + loss_scale * normal();
        }
        x = z.fixed_rows::<4>(0).into_owned();
        let hu = inv_root2 * (0..4).map(|k| u[k] * y[k]).sum::<f64>();
        let hv = inv_root2 * (0..4).map(|k| v[k] * y[k]).sum::<f64>();
        welch.push(n, hu, hv);

        batch_sum += hu;
        if (n + 1) % batch == 0 {
            batch_means.push(batch_sum / batch as f64);
            batch_sum = 0.0;
        }
        let h2 = hu * hu;
        s1 += hu;
        s2 += h2;
        s3 += h2 * hu;
        s4 += h2 * h2;

        if n % 4096 == 0 && !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite state at sample {n}")));
        }
        if series.is_some() || raw.is_some() {
            let amps = [Complex64::new(0.5 * x[0], 0.5 * x[1]), Complex64::new(0.5 * x[2], 0.5 * x[3])];
            if let Some(s) = series.as_mut() {
                s.amplitudes.push(amps);
                s.homodyne.push([hu, hv]);
            }
            if let Some(w) = raw.as_mut() {
                w.push(&[amps[0].re, amps[0].im, amps[1].re, amps[1].im, hu, hv])?;
            }
        }
    }
    if let Some(w) = raw {
        w.finish()?;
    }

    let nf = n_samples as f64;
    let mean = s1 / nf;
    let m2 = s2 / nf - mean * mean;
    let m4 = s4 / nf - 4.0 * mean * s3 / nf + 6.0 * mean * mean * s2 / nf - 3.0 * mean.powi(4);
    let nb = batch_means.len() as f64;
    let bm = batch_means.iter().sum::<f64>() / nb;
    let bvar = batch_means.iter().map(|b| (b - bm) * (b - bm)).sum::<f64>() / (nb - 1.0).max(1.0);
    let moments = SampleMoments {
        count: n_samples,
        mean,
        mean_standard_error: (bvar / nb).sqrt(),
        variance: m2,
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
    };

    Ok(LangevinRun {
        seed,
        dt: settings.dt,
        duration: settings.duration(),
        series,
        psd_estimate: welch.finish(omegas, settings.thetas.clone()),
        moments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

/// One-sided grid of a Welch estimate (bins 0..=M/2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchPsd {
    pub omega: Vec<f64>,
    pub psd: Vec<f64>,
    pub sigma: Vec<f64>,
    pub segments: usize,
}

/// Averaged windowed periodogram, scaled as `dt |Σ w x e^{-iωt}|² / Σ w²`
/// so a white process of unit two-sided density gives 1. `overlap` is the
/// fractional segment overlap in [0, 1).
pub fn welch_psd(
    series: &[f64],
    dt: f64,
    segment_length: usize,
    overlap: f64,
    window: Window,
) -> Result<WelchPsd> {
    if segment_length < 2 {
        return Err(Error::domain("segment_length must be at least 2"));
    }
    if !(0.0..1.0).contains(&overlap) || !(dt > 0.0) {
        return Err(Error::domain("overlap must lie in [0, 1) and dt must be positive"));
    }
    if series.len() < 4 * segment_length {
        return Err(Error::InsufficientData(format!(
            "{} samples for segments of {segment_length}; need at least 4 segments' worth",
            series.len()
        )));
    }
    let m = segment_length;
    let w: Vec<f64> = match window {
        Window::Hann => (0..m).map(|k| hann(k, m)).collect(),
        Window::Rectangular => vec![1.0; m],
    };
    let w2: f64 = w.iter().map(|v| v * v).sum();
    let hop = ((m as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(m);
    let half = m / 2 + 1;
    let mut sum = vec![0.0; half];
    let mut sum_sq = vec![0.0; half];
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    let mut k = 0usize;
    let mut start = 0;
    while start + m <= series.len() {
        for (b, (x, wv)) in buf.iter_mut().zip(series[start..start + m].iter().zip(&w)) {
            *b = Complex64::new(x * wv, 0.0);
        }
        fft.process(&mut buf);
        for i in 0..half {
            let p = dt * buf[i].norm_sqr() / w2;
            sum[i] += p;
            sum_sq[i] += p * p;
        }
        k += 1;
        start += hop;
    }
    let kf = k as f64;
    let factor = overlap_variance_factor(&w, hop);
    let psd: Vec<f64> = sum.iter().map(|s| s / kf).collect();
    let sigma = sum_sq
        .iter()
        .zip(&psd)
        .map(|(s2, p)| ((s2 / kf - p * p).max(0.0) * kf / (kf - 1.0) * factor / kf).sqrt())
        .collect();
    Ok(WelchPsd {
        omega: (0..half).map(|i| 2.0 * PI * i as f64 / (m as f64 * dt)).collect(),
        psd,
        sigma,
        segments: k,
    })
}

/// Stationary Gaussian series with two-sided PSD `psd(ω)` (same scaling as
/// [`welch_psd`]), synthesized by spectral shaping of white noise.
pub fn synthesize_series(psd: impl Fn(f64) -> f64, n: usize, dt: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (i, z) in buf.iter_mut().enumerate() {
        let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        let omega = 2.0 * PI * k / (n as f64 * dt);
        *z *= (psd(omega) / dt).sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|z| z.re / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinComparison {
    pub omega: f64,
    pub theta: f64,
    pub analytic_db: f64,
    pub estimate_db: f64,
    pub sigma_db: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub bins: Vec<BinComparison>,
    pub n_sigma: f64,
    pub fraction_within: f64,
    pub max_abs_diff_db: f64,
    pub pass: bool,
}

/// Compares an analytic spectrum with a stochastic estimate bin by bin.
/// Passes when at least 95% of bins lie within `n_sigma`.
pub fn cross_validate(analytic: &SqueezingSpectrum, estimate: &PsdEstimate, n_sigma: f64) -> Result<CrossValidation> {
    let same = |a: &[f64], b: &[f64]| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-12))
    };
    if !same(&analytic.omega_grid, &estimate.omega) || !same(&analytic.theta_grid, &estimate.theta) {
        return Err(Error::GridMismatch("analytic and stochastic grids differ".into()));
    }
    let mut bins = Vec::new();
    for (i, &omega) in estimate.omega.iter().enumerate() {
        for (j, &theta) in estimate.theta.iter().enumerate() {
            let analytic_db = analytic.variance_db[i][j];
            let estimate_db = estimate.psd_db(i, j);
            let sigma_db = estimate.sigma_db(i, j);
            bins.push(BinComparison {
                omega,
                theta,
                analytic_db,
                estimate_db,
                sigma_db,
                z: (estimate_db - analytic_db) / sigma_db,
            });
        }
    }
    let within = bins.iter().filter(|b| b.z.abs() <= n_sigma).count();
    let fraction_within = within as f64 / bins.len().max(1) as f64;
    let max_abs_diff_db = bins
        .iter()
        .map(|b| (b.estimate_db - b.analytic_db).abs())
        .fold(0.0, f64::max);
    Ok(CrossValidation {
        bins,
        n_sigma,
        fraction_within,
        max_abs_diff_db,
        pass: fraction_within >= 0.95,
    })
}
