//! Free-space propagation of complex fields over signed distances using the
//! band-limited angular spectrum method.
//!
//! The transfer function is exp(i 2 pi d sqrt(1/lambda^2 - fx^2 - fy^2)) on
//! the propagating band and zero for evanescent frequencies. Kernels built
//! with [`PropagationKernel::new`] additionally clamp to the alias-free band
//! for the given grid and distance, which is what wide-support physical
//! fields need at long distances. [`PropagationKernel::without_band_limit`]
//! keeps every propagating frequency: that is the exact operator for the
//! periodic grid and the one the simulator and the reconstruction engine
//! share, so sensor-subpixel object frequencies survive the round trip.
//! Kernels for -d are the complex conjugates of kernels for +d, so
//! propagation is exactly invertible on the surviving band.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;
use crate::field::ComplexField;

/// Precomputed angular-spectrum transfer function for one grid and distance.
#[derive(Debug, Clone)]
pub struct PropagationKernel {
    transfer: Array2<Complex64>,
    pub distance_um: f64,
    pub pitch_um: f64,
    pub wavelength_um: f64,
    /// True when the anti-aliasing band limit removed propagating content.
    pub band_limited: bool,
}

impl PropagationKernel {
    /// Kernel with the automatic anti-alias band limit.
    pub fn new(
        height: usize,
        width: usize,
        pitch_um: f64,
        wavelength_um: f64,
        distance_um: f64,
    ) -> Result<Self> {
        Self::build(height, width, pitch_um, wavelength_um, distance_um, true)
    }

    /// Kernel keeping all propagating frequencies (evanescent cutoff only).
    pub fn without_band_limit(
        height: usize,
        width: usize,
        pitch_um: f64,
        wavelength_um: f64,
        distance_um: f64,
    ) -> Result<Self> {
        Self::build(height, width, pitch_um, wavelength_um, distance_um, false)
    }

    fn build(
        height: usize,
        width: usize,
        pitch_um: f64,
        wavelength_um: f64,
        distance_um: f64,
        clamp: bool,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("grid dimensions must be >= 1".into()));
        }
        if !(pitch_um > 0.0 && pitch_um.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pitch must be positive, got {pitch_um}"
            )));
        }
        if !(wavelength_um > 0.0 && wavelength_um.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "wavelength must be positive, got {wavelength_um}"
            )));
        }
        if !distance_um.is_finite() {
            return Err(Error::InvalidArgument("distance must be finite".into()));
        }

        if distance_um == 0.0 {
            // Identity kernel; kept exact including evanescent content.
            return Ok(Self {
                transfer: Array2::from_elem((height, width), Complex64::new(1.0, 0.0)),
                distance_um,
                pitch_um,
                wavelength_um,
                band_limited: false,
            });
        }

        let fx = fft::freq_physical(width, pitch_um);
        let fy = fft::freq_physical(height, pitch_um);
        let inv_wl2 = 1.0 / (wavelength_um * wavelength_um);

        // Local-frequency band limit against transfer-function aliasing at
        // long distances (limit shrinks as |d| grows).
        let dfx = 1.0 / (width as f64 * pitch_um);
        let dfy = 1.0 / (height as f64 * pitch_um);
        let (f_lim_x, f_lim_y) = if clamp {
            (
                1.0 / (wavelength_um * ((2.0 * dfx * distance_um).powi(2) + 1.0).sqrt()),
                1.0 / (wavelength_um * ((2.0 * dfy * distance_um).powi(2) + 1.0).sqrt()),
            )
        } else {
            (f64::INFINITY, f64::INFINITY)
        };

        let mut band_limited = false;
        let mut transfer = Array2::zeros((height, width));
        for (v, mut row) in transfer.rows_mut().into_iter().enumerate() {
            for (u, t) in row.iter_mut().enumerate() {
                let f2 = fx[u] * fx[u] + fy[v] * fy[v];
                let kz2 = inv_wl2 - f2;
                if kz2 <= 0.0 {
                    // evanescent: suppressed entirely
                    *t = Complex64::new(0.0, 0.0);
                } else if fx[u].abs() > f_lim_x || fy[v].abs() > f_lim_y {
                    band_limited = true;
                    *t = Complex64::new(0.0, 0.0);
                } else {
                    let phase = 2.0 * PI * distance_um * kz2.sqrt();
                    *t = Complex64::from_polar(1.0, phase);
                }
            }
        }

        Ok(Self {
            transfer,
            distance_um,
            pitch_um,
            wavelength_um,
            band_limited,
        })
    }

    /// Build a kernel matching a field's grid.
    pub fn for_field(field: &ComplexField, distance_um: f64) -> Result<Self> {
        Self::new(
            field.height(),
            field.width(),
            field.pitch_um,
            field.wavelength_um,
            distance_um,
        )
    }

    /// The kernel for the opposite distance (elementwise complex conjugate).
    pub fn conjugated(&self) -> Self {
        Self {
            transfer: self.transfer.mapv(|t| t.conj()),
            distance_um: -self.distance_um,
            pitch_um: self.pitch_um,
            wavelength_um: self.wavelength_um,
            band_limited: self.band_limited,
        }
    }

    pub fn transfer(&self) -> &Array2<Complex64> {
        &self.transfer
    }

    /// Apply the kernel to a field on the matching grid.
    pub fn apply(&self, field: &ComplexField) -> Result<ComplexField> {
        if field.data.dim() != self.transfer.dim() {
            return Err(Error::DimensionMismatch(format!(
                "kernel {}x{} vs field {}x{}",
                self.transfer.nrows(),
                self.transfer.ncols(),
                field.height(),
                field.width()
            )));
        }
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        if rel(field.pitch_um, self.pitch_um) > 1e-9
            || rel(field.wavelength_um, self.wavelength_um) > 1e-9
        {
            return Err(Error::InvalidArgument(
                "kernel pitch/wavelength do not match the field".into(),
            ));
        }
        if self.distance_um == 0.0 {
            return Ok(field.clone());
        }
        let mut spec = fft::fft2(&field.data);
        spec *= &self.transfer;
        ComplexField::new(fft::ifft2(&spec), field.pitch_um, field.wavelength_um)
    }
}

/// Propagate a field over a signed distance in micrometers.
pub fn propagate(field: &ComplexField, distance_um: f64) -> Result<ComplexField> {
    PropagationKernel::for_field(field, distance_um)?.apply(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const WL: f64 = 0.532;
    const PITCH: f64 = 1.67 / 3.0;

    fn rms_diff(a: &ComplexField, b: &ComplexField) -> f64 {
        let n = (a.height() * a.width()) as f64;
        (a.data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            / n)
            .sqrt()
    }

    /// Random field whose spectrum is confined to |f| <= f_max (cycles/um).
    fn band_limited_field(n: usize, f_max: f64, seed: u64) -> ComplexField {
        let mut rng = StdRng::seed_from_u64(seed);
        let fx = fft::freq_physical(n, PITCH);
        let mut spec = Array2::zeros((n, n));
        for v in 0..n {
            for u in 0..n {
                if (fx[u] * fx[u] + fx[v] * fx[v]).sqrt() <= f_max {
                    spec[[v, u]] =
                        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                }
            }
        }
        ComplexField::new(fft::ifft2(&spec), PITCH, WL).unwrap()
    }

    #[test]
    fn zero_distance_is_identity() {
        let f = band_limited_field(32, 0.5, 1);
        let p = propagate(&f, 0.0).unwrap();
        assert_eq!(f.data, p.data);
    }

    #[test]
    fn plane_wave_keeps_amplitude() {
        let f = ComplexField::ones(32, 32, PITCH, WL).unwrap();
        let p = propagate(&f, 250.0).unwrap();
        for z in p.data.iter() {
            assert!((z.norm() - 1.0).abs() < 1e-10);
        }
        // global phase should match exp(i 2 pi d / wl)
        let expected = 2.0 * PI * 250.0 / WL;
        let got = p.data[[0, 0]].arg();
        let wrapped = (got - expected).rem_euclid(2.0 * PI);
        assert!(wrapped.min(2.0 * PI - wrapped) < 1e-8);
    }

    #[test]
    fn gaussian_beam_width_matches_analytic() {
        // Analytic oracle: w(z) = w0 sqrt(1 + (z/zR)^2), zR = pi w0^2 / wl.
        let n = 256;
        let w0 = 8.0 * PITCH;
        let z = 100.0;
        let z_r = PI * w0 * w0 / WL;
        let expected = w0 * (1.0 + (z / z_r).powi(2)).sqrt();

        let c = (n / 2) as f64;
        let data = Array2::from_shape_fn((n, n), |(y, x)| {
            let r2 = ((x as f64 - c) * PITCH).powi(2) + ((y as f64 - c) * PITCH).powi(2);
            Complex64::new((-r2 / (w0 * w0)).exp(), 0.0)
        });
        let f = ComplexField::new(data, PITCH, WL).unwrap();
        let p = propagate(&f, z).unwrap();

        // Width from the intensity second moment: w = 2 sqrt(<x^2>).
        let intensity = p.intensity();
        let mut m0 = 0.0;
        let mut m2 = 0.0;
        for ((y, x), i) in intensity.data.indexed_iter() {
            let dx = (x as f64 - c) * PITCH;
            let dy = (y as f64 - c) * PITCH;
            m0 += i;
            m2 += 0.5 * (dx * dx + dy * dy) * i;
        }
        let measured = 2.0 * (m2 / m0).sqrt();
        assert!(
            (measured - expected).abs() / expected < 0.01,
            "measured {measured} vs analytic {expected}"
        );
    }

    #[test]
    fn kernel_conjugate_symmetry() {
        let k_fwd = PropagationKernel::new(24, 24, PITCH, WL, 400.0).unwrap();
        let k_bwd = PropagationKernel::new(24, 24, PITCH, WL, -400.0).unwrap();
        for (a, b) in k_fwd.transfer().iter().zip(k_bwd.transfer().iter()) {
            assert!((a.conj() - b).norm() < 1e-15);
        }
        let conj = k_fwd.conjugated();
        assert_eq!(conj.transfer(), k_bwd.transfer());
    }

    #[test]
    fn kernel_magnitude_bounded_and_evanescent_cut() {
        let k = PropagationKernel::new(32, 32, 0.3, WL, 50.0).unwrap();
        let fx = fft::freq_physical(32, 0.3);
        for (v, row) in k.transfer().rows().into_iter().enumerate() {
            for (u, t) in row.iter().enumerate() {
                assert!(t.norm() <= 1.0 + 1e-12);
                let f2 = fx[u] * fx[u] + fx[v] * fx[v];
                if f2 >= 1.0 / (WL * WL) {
                    assert_eq!(t.norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn cached_kernel_matches_direct() {
        let f = band_limited_field(32, 0.4, 2);
        let k = PropagationKernel::for_field(&f, 300.0).unwrap();
        let via_kernel = k.apply(&f).unwrap();
        let direct = propagate(&f, 300.0).unwrap();
        assert_eq!(via_kernel.data, direct.data);
    }

    #[test]
    fn round_trip_on_band_limited_field() {
        // 64^2 grid at d = 500 um clamps at ~0.067 cycles/um; stay inside.
        let f = band_limited_field(64, 0.05, 3);
        for d in [100.0, 500.0] {
            let back = propagate(&propagate(&f, d).unwrap(), -d).unwrap();
            let rel = rms_diff(&f, &back) / (f.energy() / (64.0 * 64.0)).sqrt();
            assert!(rel < 1e-8, "round trip rel RMS {rel} at d={d}");
        }
    }

    #[test]
    fn unclamped_round_trip_is_exact_at_full_band() {
        // The exact periodic operator inverts everything except evanescent
        // content, so even a full-band field survives the round trip.
        let f = band_limited_field(64, 0.88, 7);
        for d in [100.0, 1000.0] {
            let fwd = PropagationKernel::without_band_limit(64, 64, PITCH, WL, d).unwrap();
            let back = fwd.conjugated().apply(&fwd.apply(&f).unwrap()).unwrap();
            let rel = rms_diff(&f, &back) / (f.energy() / (64.0 * 64.0)).sqrt();
            assert!(rel < 1e-10, "round trip rel RMS {rel} at d={d}");
            assert!(!fwd.band_limited);
        }
    }

    #[test]
    fn linearity() {
        let f = band_limited_field(32, 0.3, 4);
        let g = band_limited_field(32, 0.3, 5);
        let a = Complex64::new(0.7, -0.2);
        let b = Complex64::new(-0.3, 0.9);
        let combined = ComplexField::new(
            f.data.mapv(|z| z * a) + g.data.mapv(|z| z * b),
            PITCH,
            WL,
        )
        .unwrap();
        let lhs = propagate(&combined, 200.0).unwrap();
        let pf = propagate(&f, 200.0).unwrap();
        let pg = propagate(&g, 200.0).unwrap();
        let rhs = ComplexField::new(
            pf.data.mapv(|z| z * a) + pg.data.mapv(|z| z * b),
            PITCH,
            WL,
        )
        .unwrap();
        assert!(rms_diff(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn composition() {
        // Field band-limited below the clamp of the total distance.
        let f = band_limited_field(64, 0.06, 6);
        let once = propagate(&f, 450.0).unwrap();
        let twice = propagate(&propagate(&f, 200.0).unwrap(), 250.0).unwrap();
        let scale = (f.energy() / (64.0 * 64.0)).sqrt();
        assert!(rms_diff(&once, &twice) / scale < 1e-8);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(PropagationKernel::new(8, 8, 0.0, WL, 10.0).is_err());
        assert!(PropagationKernel::new(8, 8, PITCH, -1.0, 10.0).is_err());
        assert!(PropagationKernel::new(8, 8, PITCH, WL, f64::NAN).is_err());
    }
}
