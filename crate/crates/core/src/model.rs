//! Physical parameter types and the closed-form conversions shared by the
//! rest of the crate.
//!
//! Everything is SI internally: angular frequencies and linewidths in rad/s,
//! powers in W, photon fluxes in photons/s. Decibels only appear at the
//! boundary (reporting and config).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced Planck constant (J·s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Angular frequency (rad/s) of light with the given vacuum wavelength (m).
pub fn omega_from_wavelength(wavelength_m: f64) -> f64 {
    2.0 * std::f64::consts::PI * SPEED_OF_LIGHT / wavelength_m
}

/// Vacuum wavelength (m) for an angular frequency (rad/s).
pub fn wavelength_from_omega(omega: f64) -> f64 {
    2.0 * std::f64::consts::PI * SPEED_OF_LIGHT / omega
}

/// Linewidth `omega0 / q` (rad/s).
pub fn kappa_from_q(omega0: f64, q: f64) -> Result<f64> {
    if !(omega0 > 0.0) || !(q > 0.0) {
        return Err(Error::domain(format!(
            "kappa_from_q requires omega0 > 0 and q > 0 (got {omega0}, {q})"
        )));
    }
    Ok(omega0 / q)
}

/// Quality factor `omega0 / kappa`.
pub fn q_from_kappa(omega0: f64, kappa: f64) -> Result<f64> {
    if !(omega0 > 0.0) || !(kappa > 0.0) {
        return Err(Error::domain(format!(
            "q_from_kappa requires omega0 > 0 and kappa > 0 (got {omega0}, {kappa})"
        )));
    }
    Ok(omega0 / kappa)
}

/// Escape efficiency `1 - Q_L / Q_i`, the fraction of intracavity photons
/// leaving through the bus waveguide.
pub fn escape_efficiency(q_i: f64, q_l: f64) -> Result<f64> {
    if !(q_l > 0.0) || !(q_i > 0.0) {
        return Err(Error::domain(format!(
            "quality factors must be positive (Q_i = {q_i}, Q_L = {q_l})"
        )));
    }
    if q_l > q_i {
        return Err(Error::domain(format!(
            "loaded Q ({q_l}) cannot exceed intrinsic Q ({q_i})"
        )));
    }
    Ok(1.0 - q_l / q_i)
}

/// Upper bound on extractable squeezing for escape efficiency `eta`, in dB
/// (positive number = dB below shot noise).
pub fn max_onchip_squeezing_db(eta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::domain(format!(
            "escape efficiency must lie in [0, 1) (got {eta})"
        )));
    }
    Ok(-10.0 * (1.0 - eta).log10())
}

/// Pump photon flux `power / (hbar * omega0)`.
pub fn photon_flux(power: f64, omega0: f64) -> Result<f64> {
    if !(power >= 0.0) {
        return Err(Error::domain(format!("power must be non-negative (got {power})")));
    }
    if !(omega0 > 0.0) {
        return Err(Error::domain(format!("omega0 must be positive (got {omega0})")));
    }
    Ok(power / (HBAR * omega0))
}

/// Inverse of [`photon_flux`].
pub fn power_from_flux(flux: f64, omega0: f64) -> Result<f64> {
    if !(flux >= 0.0) || !(omega0 > 0.0) {
        return Err(Error::domain(format!(
            "power_from_flux requires flux >= 0 and omega0 > 0 (got {flux}, {omega0})"
        )));
    }
    Ok(flux * HBAR * omega0)
}

/// Which closed form to use for the per-photon Kerr shift.
///
/// `WithoutSpeedOfLight` is `hbar * omega0^2 * n2 / (n0^2 * V_eff)`, which has units of
/// 1/m. `WithSpeedOfLight` multiplies by `c` and yields rad/s, the form
/// usually quoted in the microcomb literature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum G0Convention {
    #[default]
    WithoutSpeedOfLight,
    WithSpeedOfLight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Nonlinear index (m²/W).
    pub n2: f64,
    /// Linear refractive index.
    pub n0: f64,
    /// Effective mode volume (m³).
    pub v_eff: f64,
}

impl MaterialParams {
    pub fn new(n2: f64, n0: f64, v_eff: f64) -> Result<Self> {
        let m = Self { n2, n0, v_eff };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if !(self.n2 > 0.0 && self.n0 > 0.0 && self.v_eff > 0.0) {
            return Err(Error::domain(format!(
                "material parameters must be strictly positive ({self:?})"
            )));
        }
        Ok(())
    }
}

pub fn g0_from_material(
    omega0: f64,
    material: &MaterialParams,
    convention: G0Convention,
) -> Result<f64> {
    material.validate()?;
    if !(omega0 > 0.0) {
        return Err(Error::domain(format!("omega0 must be positive (got {omega0})")));
    }
    let bare = HBAR * omega0 * omega0 * material.n2 / (material.n0 * material.n0 * material.v_eff);
    Ok(match convention {
        G0Convention::WithoutSpeedOfLight => bare,
        G0Convention::WithSpeedOfLight => bare * SPEED_OF_LIGHT,
    })
}

/// One cavity mode family driven near mode `l = 0`.
///
/// `kappa = kappa_i + kappa_e` is derived, never stored separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonatorModel {
    /// Pump angular frequency (rad/s).
    pub omega0: f64,
    /// Intrinsic energy decay rate (rad/s).
    pub kappa_i: f64,
    /// External (bus) coupling rate (rad/s).
    pub kappa_e: f64,
    /// Pump detuning, resonance minus laser (rad/s).
    pub delta: f64,
    /// Second-order dispersion (rad/s per mode index²).
    pub d2: f64,
    /// Per-photon Kerr frequency shift (rad/s).
    pub g0: f64,
    /// Free spectral range (Hz).
    pub fsr: f64,
}

impl ResonatorModel {
    pub fn new(
        omega0: f64,
        kappa_i: f64,
        kappa_e: f64,
        delta: f64,
        d2: f64,
        g0: f64,
        fsr: f64,
    ) -> Result<Self> {
        let m = Self {
            omega0,
            kappa_i,
            kappa_e,
            delta,
            d2,
            g0,
            fsr,
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds linewidths from intrinsic and loaded quality factors, using the
    /// pump frequency for both conversions.
    pub fn from_quality_factors(wavelength_m: f64, q_i: f64, q_l: f64, fsr: f64) -> Result<Self> {
        if !(wavelength_m > 0.0) {
            return Err(Error::domain(format!("wavelength must be positive (got {wavelength_m})")));
        }
        escape_efficiency(q_i, q_l)?;
        let omega0 = omega_from_wavelength(wavelength_m);
        let kappa = kappa_from_q(omega0, q_l)?;
        let kappa_i = kappa_from_q(omega0, q_i)?;
        Self::new(omega0, kappa_i, kappa - kappa_i, 0.0, 0.0, 0.0, fsr)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.omega0, self.kappa_i, self.kappa_e, self.delta, self.d2, self.g0, self.fsr,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain(format!("non-finite resonator parameter in {self:?}")));
        }
        if self.kappa_i < 0.0 || self.kappa_e < 0.0 || self.kappa() <= 0.0 {
            return Err(Error::domain(format!(
                "linewidths must satisfy kappa_i >= 0, kappa_e >= 0, kappa > 0 (got {}, {})",
                self.kappa_i, self.kappa_e
            )));
        }
        if self.g0 < 0.0 {
            return Err(Error::domain(format!("g0 must be non-negative (got {})", self.g0)));
        }
        if !(self.fsr > 0.0) || !(self.omega0 > 0.0) {
            return Err(Error::domain("fsr and omega0 must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn kappa(&self) -> f64 {
        self.kappa_i + self.kappa_e
    }

    /// `kappa_e / kappa`, identical to `1 - Q_L / Q_i`.
    pub fn escape_efficiency(&self) -> f64 {
        self.kappa_e / self.kappa()
    }

    pub fn q_loaded(&self) -> f64 {
        self.omega0 / self.kappa()
    }

    pub fn q_intrinsic(&self) -> f64 {
        self.omega0 / self.kappa_i
    }

    pub fn q_coupling(&self) -> f64 {
        self.omega0 / self.kappa_e
    }

    /// Cold-cavity detuning of mode `l` including dispersion, before any Kerr shift.
    pub fn mode_detuning(&self, l: i32) -> f64 {
        let l = f64::from(l);
        self.delta + 0.5 * self.d2 * l * l
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_g0(mut self, g0: f64) -> Self {
        self.g0 = g0;
        self
    }

    pub fn with_d2(mut self, d2: f64) -> Self {
        self.d2 = d2;
        self
    }
}

/// Classical pump drive in the bus waveguide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpDrive {
    /// On-chip optical power (W).
    pub power_on_chip: f64,
    /// `|A_in|^2` (photons/s).
    pub photon_flux: f64,
    /// Real, non-negative drive amplitude (sqrt(photons/s)).
    pub a_in: f64,
}

impl PumpDrive {
    pub fn from_power(power: f64, omega0: f64) -> Result<Self> {
        let flux = photon_flux(power, omega0)?;
        Ok(Self {
            power_on_chip: power,
            photon_flux: flux,
            a_in: flux.sqrt(),
        })
    }

    pub fn from_flux(flux: f64, omega0: f64) -> Result<Self> {
        let power = power_from_flux(flux, omega0)?;
        Ok(Self {
            power_on_chip: power,
            photon_flux: flux,
            a_in: flux.sqrt(),
        })
    }
}

/// Homodyne observable built from the two rotated single-mode quadratures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HomodyneObservable {
    /// `q_l(theta) + q_{-l}(theta + relative_phase)`, normalized to vacuum.
    #[default]
    RotatedSum,
    /// `[q_l(θ) + q_{-l}(θ)] cos θ + [p_l(θ) + p_{-l}(θ)] sin θ`. The
    /// trigonometric weights undo the rotation, so this is always the
    /// unrotated `q_l + q_{-l}` and carries no θ dependence.
    WeightedRotated,
}

/// Local-oscillator settings of the balanced homodyne detector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalOscillator {
    /// Extra LO phase applied to the `-l` tooth (rad).
    #[serde(default)]
    pub relative_phase: f64,
    #[serde(default)]
    pub observable: HomodyneObservable,
}

/// Multiplicative loss budget between the resonator and the photodiodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionChain {
    /// Escape efficiency of the source cavity. Informational: the spectra
    /// take it from the resonator linewidths.
    pub eta_escape: f64,
    pub eta_couple: f64,
    pub eta_prop: f64,
    pub visibility: f64,
    pub eta_pd: f64,
    #[serde(default)]
    pub lo: LocalOscillator,
}

impl DetectionChain {
    pub fn new(
        eta_escape: f64,
        eta_couple: f64,
        eta_prop: f64,
        visibility: f64,
        eta_pd: f64,
    ) -> Result<Self> {
        let chain = Self {
            eta_escape,
            eta_couple,
            eta_prop,
            visibility,
            eta_pd,
            lo: LocalOscillator::default(),
        };
        chain.validate()?;
        Ok(chain)
    }

    /// A chain whose whole post-cavity efficiency is lumped into one factor.
    pub fn lumped(eta_escape: f64, eta_total: f64) -> Result<Self> {
        Self::new(eta_escape, eta_total, 1.0, 1.0, 1.0)
    }

    pub fn lossless() -> Self {
        Self {
            eta_escape: 1.0,
            eta_couple: 1.0,
            eta_prop: 1.0,
            visibility: 1.0,
            eta_pd: 1.0,
            lo: LocalOscillator::default(),
        }
    }

    pub fn with_lo(mut self, lo: LocalOscillator) -> Self {
        self.lo = lo;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let factors = [
            ("eta_escape", self.eta_escape),
            ("eta_couple", self.eta_couple),
            ("eta_prop", self.eta_prop),
            ("visibility", self.visibility),
            ("eta_pd", self.eta_pd),
        ];
        for (name, v) in factors {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!("{name} must lie in [0, 1] (got {v})")));
            }
        }
        Ok(())
    }

    /// Post-cavity efficiency. Visibility enters squared (mode-overlap
    /// power efficiency of the homodyne interference).
    pub fn total(&self) -> f64 {
        self.eta_couple * self.eta_prop * self.visibility * self.visibility * self.eta_pd
    }
}

/// Validating wrapper around [`DetectionChain::total`].
pub fn detection_chain_total(chain: &DetectionChain) -> Result<f64> {
    chain.validate()?;
    Ok(chain.total())
}
