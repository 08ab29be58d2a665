//! Probe formation and scan geometry.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fft::{fft_freqs, Fft2};
use crate::tensor::{Field, Real};

/// Fixed electron-optical parameters of the focused probe.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsConfig {
    /// Acceleration voltage in volts.
    pub voltage: f64,
    /// Semi-convergence angle in radians.
    pub semi_convergence: f64,
    /// Defocus in angstroms; positive is overfocus and adds
    /// +pi*lambda*df*k^2 to the aberration phase.
    pub defocus: f64,
    /// Spherical aberration in angstroms.
    pub spherical_aberration: f64,
}

impl OpticsConfig {
    /// 300 kV, 21.4 mrad, 200 A overfocus, 500 nm spherical aberration.
    pub fn reference() -> Self {
        OpticsConfig {
            voltage: 300e3,
            semi_convergence: 21.4e-3,
            defocus: 200.0,
            spherical_aberration: 5000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.voltage <= 0.0 {
            return Err(CoreError::InvalidArgument("voltage must be positive".into()));
        }
        if self.semi_convergence <= 0.0 || self.semi_convergence >= 0.1 {
            return Err(CoreError::InvalidArgument(
                "semi-convergence must lie in (0, 0.1) rad".into(),
            ));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        electron_wavelength(self.voltage)
    }

    /// Aperture cutoff in reciprocal angstroms.
    pub fn aperture_cutoff(&self) -> f64 {
        self.semi_convergence / self.wavelength()
    }
}

/// Relativistic electron wavelength in angstroms for a voltage in volts.
pub fn electron_wavelength(voltage: f64) -> f64 {
    12.2639 / (voltage * (1.0 + 0.97845e-6 * voltage)).sqrt()
}

/// Complex probe wavefunction on the lateral grid.
#[derive(Debug, Clone)]
pub struct ProbeField<T> {
    pub field: Field<T>,
    /// Lateral pixel pitch in angstroms.
    pub pitch: f64,
    /// Total intensity (electrons per exposure) the probe was scaled to.
    pub norm: f64,
}

impl<T: Real> ProbeField<T> {
    pub fn intensity_sum(&self) -> f64 {
        self.field.intensity_sum()
    }
}

/// Build a probe from aperture and aberration phase, scaled so the total
/// intensity equals `norm`.
pub fn make_probe<T: Real>(
    optics: &OpticsConfig,
    h: usize,
    w: usize,
    pitch: f64,
    norm: f64,
) -> Result<ProbeField<T>> {
    optics.validate()?;
    if norm <= 0.0 || !norm.is_finite() {
        return Err(CoreError::InvalidArgument("probe norm must be positive".into()));
    }
    let lambda = optics.wavelength();
    let k_max = optics.aperture_cutoff();
    let nyquist = 1.0 / (2.0 * pitch);
    if k_max >= nyquist {
        return Err(CoreError::InvalidArgument(format!(
            "aperture cutoff {k_max:.4} exceeds grid Nyquist {nyquist:.4}"
        )));
    }
    let ky = fft_freqs(h, pitch);
    let kx = fft_freqs(w, pitch);
    let mut f = Field::<T>::zeros(h, w);
    for (r, &fy) in ky.iter().enumerate() {
        for (c, &fx) in kx.iter().enumerate() {
            let k2 = fy * fy + fx * fx;
            if k2.sqrt() <= k_max {
                let chi = std::f64::consts::PI * lambda * optics.defocus * k2
                    + 0.5 * std::f64::consts::PI
                        * optics.spherical_aberration
                        * lambda.powi(3)
                        * k2
                        * k2;
                *f.at_mut(r, c) = Complex::new(T::of(chi.cos()), T::of(-chi.sin()));
            }
        }
    }
    let fft = Fft2::new(h, w);
    fft.inverse(&mut f);
    let total = f.intensity_sum();
    if total <= 0.0 {
        return Err(CoreError::InvalidArgument("aperture contains no passband samples".into()));
    }
    let scale = T::of((norm / total).sqrt());
    for v in &mut f.data {
        *v = *v * scale;
    }
    Ok(ProbeField { field: f, pitch, norm })
}

/// Regular scan grid of probe positions in angstroms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGrid {
    pub n_y: usize,
    pub n_x: usize,
    /// Scan step in angstroms.
    pub step: f64,
    /// Offset of the first position in angstroms.
    #[serde(default)]
    pub origin: (f64, f64),
}

impl ScanGrid {
    pub fn new(n_y: usize, n_x: usize, step: f64) -> Result<Self> {
        if n_y == 0 || n_x == 0 {
            return Err(CoreError::InvalidArgument("scan grid must be at least 1x1".into()));
        }
        if step <= 0.0 {
            return Err(CoreError::InvalidArgument("scan step must be positive".into()));
        }
        Ok(ScanGrid { n_y, n_x, step, origin: (0.0, 0.0) })
    }

    pub fn len(&self) -> usize {
        self.n_y * self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position in angstroms for the flattened row-major scan index.
    pub fn position(&self, idx: usize) -> (f64, f64) {
        let iy = idx / self.n_x;
        let ix = idx % self.n_x;
        (self.origin.0 + iy as f64 * self.step, self.origin.1 + ix as f64 * self.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // first-principles oracle: h / sqrt(2 m0 e U (1 + e U / (2 m0 c^2)))
    fn wavelength_oracle(voltage: f64) -> f64 {
        let h = 6.62607015e-34;
        let m0 = 9.1093837015e-31;
        let e = 1.602176634e-19;
        let c = 299792458.0;
        let p2 = 2.0 * m0 * e * voltage * (1.0 + e * voltage / (2.0 * m0 * c * c));
        h / p2.sqrt() * 1e10
    }

    #[test]
    fn wavelength_matches_first_principles() {
        for &u in &[100e3, 200e3, 300e3] {
            let got = electron_wavelength(u);
            let want = wavelength_oracle(u);
            assert!((got - want).abs() / want < 1e-4, "U={u}: {got} vs {want}");
        }
        assert!((electron_wavelength(300e3) - 0.0197).abs() < 1e-4);
        assert!((electron_wavelength(100e3) - 0.0370).abs() < 1e-4);
    }

    #[test]
    fn wavelength_monotone_decreasing() {
        let mut prev = electron_wavelength(10e3);
        for i in 1..50 {
            let u = 10e3 + i as f64 * 20e3;
            let l = electron_wavelength(u);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn reference_aperture_cutoff() {
        let o = OpticsConfig::reference();
        // semi_convergence / lambda with the wavelength oracle
        let want = 0.0214 / electron_wavelength(300e3);
        assert!((o.aperture_cutoff() - want).abs() < 1e-12);
        assert!((o.aperture_cutoff() - 1.087).abs() < 5e-3);
    }

    #[test]
    fn probe_norm_and_band_limit() {
        let o = OpticsConfig { defocus: 50.0, spherical_aberration: 0.0, ..OpticsConfig::reference() };
        let p = make_probe::<f64>(&o, 32, 32, 0.2, 7.5).unwrap();
        assert!((p.intensity_sum() - 7.5).abs() / 7.5 < 1e-10);

        // Fourier support exactly inside the aperture
        let fft = Fft2::new(32, 32);
        let mut f = p.field.clone();
        fft.forward(&mut f);
        let ky = fft_freqs(32, 0.2);
        let kx = fft_freqs(32, 0.2);
        let k_max = o.aperture_cutoff();
        for r in 0..32 {
            for c in 0..32 {
                let k = (ky[r] * ky[r] + kx[c] * kx[c]).sqrt();
                if k > k_max {
                    assert!(f.at(r, c).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_aberration_probe_has_flat_disk_spectrum() {
        let o = OpticsConfig {
            defocus: 0.0,
            spherical_aberration: 0.0,
            ..OpticsConfig::reference()
        };
        let p = make_probe::<f64>(&o, 32, 32, 0.2, 1.0).unwrap();
        let fft = Fft2::new(32, 32);
        let mut f = p.field.clone();
        fft.forward(&mut f);
        let mags: Vec<f64> = f.data.iter().map(|c| c.norm()).filter(|&m| m > 1e-9).collect();
        let m0 = mags[0];
        for m in &mags {
            assert!((m - m0).abs() < 1e-9 * m0.max(1.0));
        }
    }

    #[test]
    fn aperture_beyond_nyquist_rejected() {
        let o = OpticsConfig { semi_convergence: 0.06, ..OpticsConfig::reference() };
        // cutoff = 0.06 / 0.0197 = 3.05 > nyquist 2.5 at pitch 0.2
        assert!(make_probe::<f64>(&o, 32, 32, 0.2, 1.0).is_err());
    }
}
