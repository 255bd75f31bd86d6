//! Blind recovery of the diffuser trajectory from the raw frames.
//!
//! Each frame is registered against frame 0 by windowed, high-pass-filtered
//! normalized cross-correlation, with the peak refined to a fraction of a
//! pixel by localized Fourier up-sampling around the coarse maximum.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::field::{Geometry, Measurement, RealImage};

/// Recovered translational shift of the diffuser for one frame, in
/// high-resolution reconstruction pixels (fractional).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPose {
    #[serde(rename = "frame")]
    pub frame_index: usize,
    pub x_px: f64,
    pub y_px: f64,
    pub confidence: f64,
}

impl ScanPose {
    pub fn new(frame_index: usize, x_px: f64, y_px: f64, confidence: f64) -> Self {
        Self {
            frame_index,
            x_px,
            y_px,
            confidence,
        }
    }
}

/// Result of a single pairwise shift estimate, in the pixels of the images
/// that were correlated.
#[derive(Debug, Clone, Copy)]
pub struct ShiftEstimate {
    pub dx_px: f64,
    pub dy_px: f64,
    /// Normalized correlation peak value, clamped to [0, 1].
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationConfig {
    /// Sub-pixel refinement factor; the estimate is quantized to
    /// 1/subpixel_factor of a sensor pixel.
    pub subpixel_factor: usize,
    /// Frames whose correlation confidence falls below this are flagged.
    pub min_confidence: f64,
    /// Largest accepted |shift| in high-resolution pixels.
    pub max_shift_px: f64,
    /// Fraction of the Nyquist radius removed by the high-pass filter.
    pub highpass_cut: f64,
    /// Frequencies above this fraction of the Nyquist radius are removed
    /// before correlation; content near Nyquist aliases under sub-pixel
    /// shifts and biases the peak. 1.0 disables the low-pass.
    pub lowpass_cut: f64,
    /// Tukey window taper fraction applied before correlation.
    pub edge_taper: f64,
    /// Exponent on the window-overlap envelope used to flatten the
    /// correlation surface: 1 divides by the full overlap, 0 disables.
    pub envelope_gamma: f64,
    /// Number of template refinement passes after the anchored first pass:
    /// each pass re-registers every frame against the aligned mean of all
    /// frames under the previous estimates.
    pub template_passes: usize,
    /// Register frame j against frame j-1 and accumulate, instead of
    /// anchoring every frame to frame 0.
    pub chained: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            subpixel_factor: 20,
            min_confidence: 0.2,
            max_shift_px: 50.0,
            highpass_cut: 0.05,
            lowpass_cut: 0.85,
            edge_taper: 0.25,
            envelope_gamma: 1.0,
            template_passes: 2,
            chained: false,
        }
    }
}

fn tukey(n: usize, taper: f64) -> Vec<f64> {
    if taper <= 0.0 || n < 2 {
        return vec![1.0; n];
    }
    let alpha = taper.min(1.0);
    let edge = alpha * (n as f64 - 1.0) / 2.0;
    (0..n)
        .map(|i| {
            let x = i as f64;
            let m = n as f64 - 1.0;
            if x < edge {
                0.5 * (1.0 + (PI * (x / edge - 1.0)).cos())
            } else if x > m - edge {
                0.5 * (1.0 + (PI * ((x - m + edge) / edge)).cos())
            } else {
                1.0
            }
        })
        .collect()
}

/// Mean-removed, windowed, high-pass-filtered spectrum of one frame, plus
/// its energy (for correlation normalization).
fn prepared_spectrum(
    img: &Array2<f64>,
    cfg: &RegistrationConfig,
) -> Result<(Array2<Complex64>, f64)> {
    let (h, w) = img.dim();
    let mean = img.sum() / (h * w) as f64;
    let wy = tukey(h, cfg.edge_taper);
    let wx = tukey(w, cfg.edge_taper);
    let data = Array2::from_shape_fn((h, w), |(y, x)| {
        Complex64::new((img[[y, x]] - mean) * wy[y] * wx[x], 0.0)
    });
    let mut spec = fft::fft2(&data);

    // Band-pass: drop low frequencies so static content does not pull the
    // peak toward zero shift (DC always goes), and drop near-Nyquist
    // content that aliases under sub-pixel displacements.
    let kx = fft::freq_index(w);
    let ky = fft::freq_index(h);
    for (v, mut row) in spec.rows_mut().into_iter().enumerate() {
        let ny = 2.0 * ky[v].abs() / h as f64;
        for (u, s) in row.iter_mut().enumerate() {
            let nx = 2.0 * kx[u].abs() / w as f64;
            let r = (nx * nx + ny * ny).sqrt();
            if r < cfg.highpass_cut || r > cfg.lowpass_cut {
                *s = Complex64::new(0.0, 0.0);
            }
        }
    }

    let energy: f64 = spec.iter().map(|s| s.norm_sqr()).sum::<f64>() / (h * w) as f64;
    if energy <= 0.0 {
        return Err(Error::DegenerateInput(
            "image has no variance after preprocessing".into(),
        ));
    }
    Ok((spec, energy))
}

/// Power spectrum of the 2D analysis window; its inverse transform is the
/// window overlap at every lag, used to flatten the correlation envelope.
fn window_power_spectrum(h: usize, w: usize, taper: f64) -> Array2<Complex64> {
    let wy = tukey(h, taper);
    let wx = tukey(w, taper);
    let win = Array2::from_shape_fn((h, w), |(y, x)| Complex64::new(wy[y] * wx[x], 0.0));
    fft::fft2(&win).mapv(|s| Complex64::new(s.norm_sqr(), 0.0))
}

fn wrap_signed(idx: usize, n: usize) -> f64 {
    if idx > n / 2 {
        idx as f64 - n as f64
    } else {
        idx as f64
    }
}

/// Evaluate the envelope-flattened cross-correlation on a local grid around
/// `(cy, cx)` with spacing 1/kappa pixels, by direct Fourier summation of
/// the cross spectrum and the window power spectrum.
#[allow(clippy::too_many_arguments)]
fn upsampled_peak(
    cross: &Array2<Complex64>,
    envelope: &Array2<Complex64>,
    envelope_floor: f64,
    envelope_full: f64,
    envelope_gamma: f64,
    cy: f64,
    cx: f64,
    halfwidth_px: f64,
    kappa: usize,
) -> (f64, f64) {
    let (h, w) = cross.dim();
    let steps = (halfwidth_px * kappa as f64).ceil() as i64;
    let offsets: Vec<f64> = (-steps..=steps).map(|s| s as f64 / kappa as f64).collect();
    let ky = fft::freq_index(h);
    let kx = fft::freq_index(w);

    // row factors e^{2 pi i ky (cy+oy)/h}, column factors e^{2 pi i kx (cx+ox)/w}
    let ey: Vec<Vec<Complex64>> = offsets
        .iter()
        .map(|oy| {
            ky.iter()
                .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k * (cy + oy) / h as f64))
                .collect()
        })
        .collect();
    let ex: Vec<Vec<Complex64>> = offsets
        .iter()
        .map(|ox| {
            kx.iter()
                .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k * (cx + ox) / w as f64))
                .collect()
        })
        .collect();

    // partial sums over columns first, for both spectra
    let scale = 1.0 / (h * w) as f64;
    let m = offsets.len();
    let mut partial_c = vec![Complex64::new(0.0, 0.0); h * m];
    let mut partial_e = vec![Complex64::new(0.0, 0.0); h * m];
    for v in 0..h {
        for (j, exj) in ex.iter().enumerate() {
            let mut acc_c = Complex64::new(0.0, 0.0);
            let mut acc_e = Complex64::new(0.0, 0.0);
            for u in 0..w {
                acc_c += cross[[v, u]] * exj[u];
                acc_e += envelope[[v, u]] * exj[u];
            }
            partial_c[v * m + j] = acc_c;
            partial_e[v * m + j] = acc_e;
        }
    }

    let mut best = f64::NEG_INFINITY;
    let mut best_oy = 0.0;
    let mut best_ox = 0.0;
    for (i, eyi) in ey.iter().enumerate() {
        for j in 0..m {
            let mut acc_c = Complex64::new(0.0, 0.0);
            let mut acc_e = Complex64::new(0.0, 0.0);
            for v in 0..h {
                acc_c += partial_c[v * m + j] * eyi[v];
                acc_e += partial_e[v * m + j] * eyi[v];
            }
            let overlap = (acc_e.re * scale).max(envelope_floor);
            let value = acc_c.re * scale / (overlap / envelope_full).powf(envelope_gamma);
            if value > best {
                best = value;
                best_oy = offsets[i];
                best_ox = offsets[j];
            }
        }
    }
    (cy + best_oy, cx + best_ox)
}

fn estimate_shift_prepared(
    ref_spec: &(Array2<Complex64>, f64),
    mov_spec: &(Array2<Complex64>, f64),
    envelope: &Array2<Complex64>,
    envelope_gamma: f64,
    subpixel_factor: usize,
    max_shift_px: Option<f64>,
) -> Result<ShiftEstimate> {
    let (h, w) = ref_spec.0.dim();
    let cross = &mov_spec.0 * &ref_spec.0.mapv(|s| s.conj());
    let corr = fft::ifft2(&cross);
    let norm = (ref_spec.1 * mov_spec.1).sqrt();

    // Window overlap per lag; dividing by it removes the envelope tilt that
    // otherwise drags the peak toward zero shift.
    let overlap = fft::ifft2(envelope);
    let overlap_full = overlap[[0, 0]].re;
    let overlap_floor = 0.05 * overlap_full;

    let mut best = f64::NEG_INFINITY;
    let mut best_raw = 0.0;
    let mut peak = (0usize, 0usize);
    for ((y, x), c) in corr.indexed_iter() {
        if let Some(limit) = max_shift_px {
            if wrap_signed(x, w).abs() > limit || wrap_signed(y, h).abs() > limit {
                continue;
            }
        }
        let flat = (overlap[[y, x]].re.max(overlap_floor) / overlap_full).powf(envelope_gamma);
        let value = c.re / flat;
        if value > best {
            best = value;
            best_raw = c.re;
            peak = (y, x);
        }
    }
    if !best.is_finite() {
        return Err(Error::DegenerateInput(
            "no correlation peak inside the allowed shift range".into(),
        ));
    }
    let overlap_at_peak = overlap[[peak.0, peak.1]].re.max(overlap_floor);
    let confidence = (best_raw * overlap_full / (overlap_at_peak * norm)).clamp(0.0, 1.0);
    let _ = best;
    let coarse_y = wrap_signed(peak.0, h);
    let coarse_x = wrap_signed(peak.1, w);

    let (dy, dx) = if subpixel_factor > 1 {
        upsampled_peak(
            &cross,
            envelope,
            overlap_floor,
            overlap_full,
            envelope_gamma,
            coarse_y,
            coarse_x,
            1.5,
            subpixel_factor,
        )
    } else {
        (coarse_y, coarse_x)
    };

    Ok(ShiftEstimate {
        dx_px: dx,
        dy_px: dy,
        confidence,
    })
}

/// Estimate the displacement of `moving` relative to `reference`: the
/// returned (dx, dy) is the shift that maps reference content onto moving
/// content, refined to 1/subpixel_factor of a pixel.
pub fn estimate_shift(
    reference: &RealImage,
    moving: &RealImage,
    subpixel_factor: usize,
) -> Result<ShiftEstimate> {
    if subpixel_factor < 1 {
        return Err(Error::InvalidArgument(
            "subpixel factor must be >= 1".into(),
        ));
    }
    if reference.data.dim() != moving.data.dim() {
        return Err(Error::DimensionMismatch(
            "images to register differ in size".into(),
        ));
    }
    let cfg = RegistrationConfig {
        subpixel_factor,
        ..RegistrationConfig::default()
    };
    let r = prepared_spectrum(&reference.data, &cfg)?;
    let m = prepared_spectrum(&moving.data, &cfg)?;
    let envelope = window_power_spectrum(
        reference.data.nrows(),
        reference.data.ncols(),
        cfg.edge_taper,
    );
    estimate_shift_prepared(&r, &m, &envelope, cfg.envelope_gamma, subpixel_factor, None)
}

/// Recover the diffuser trajectory from the raw frames: every frame is
/// registered to frame 0 (or chained to its predecessor) and the estimated
/// sensor-pixel displacement is converted to high-resolution pixels.
///
/// Frame 0 gets the pose (0, 0) by convention. Low-confidence frames are
/// reported with their confidence and left for the caller to drop or reject.
pub fn estimate_trajectory(
    frames: &[Measurement],
    geometry: &Geometry,
    cfg: &RegistrationConfig,
) -> Result<Vec<ScanPose>> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(
            "trajectory estimation needs at least 2 frames".into(),
        ));
    }
    if cfg.subpixel_factor < 1 {
        return Err(Error::InvalidArgument(
            "subpixel factor must be >= 1".into(),
        ));
    }
    let dim = frames[0].image.data.dim();
    if frames.iter().any(|f| f.image.data.dim() != dim) {
        return Err(Error::DimensionMismatch(
            "frames differ in size".into(),
        ));
    }
    let m = geometry.upsample_m as f64;
    let max_sensor_shift = cfg.max_shift_px / m;

    // Static content (the object under the speckle) biases the correlation
    // toward zero shift; subtracting the temporal mean frame removes it
    // while the moving speckle survives. When the residual carries no
    // energy (e.g. identical frames) fall back to the raw frames.
    let dim = frames[0].image.data.dim();
    let mut mean = Array2::<f64>::zeros(dim);
    for f in frames {
        mean += &f.image.data;
    }
    mean.mapv_inplace(|v| v / frames.len() as f64);
    let frame_var: f64 = {
        let grand = mean.sum() / mean.len() as f64;
        frames
            .iter()
            .flat_map(|f| f.image.data.iter())
            .map(|v| (v - grand) * (v - grand))
            .sum()
    };
    let residual_var: f64 = frames
        .iter()
        .flat_map(|f| (&f.image.data - &mean).into_iter())
        .map(|v| v * v)
        .sum();
    let subtract_mean = residual_var > 1e-12 * frame_var.max(f64::MIN_POSITIVE);
    let residual = |f: &Measurement| {
        if subtract_mean {
            &f.image.data - &mean
        } else {
            f.image.data.clone()
        }
    };

    let envelope = window_power_spectrum(dim.0, dim.1, cfg.edge_taper);
    if cfg.chained {
        let mut poses = Vec::with_capacity(frames.len());
        poses.push(ScanPose::new(frames[0].frame_index, 0.0, 0.0, 1.0));
        let mut prev = prepared_spectrum(&residual(&frames[0]), cfg)?;
        let (mut acc_x, mut acc_y) = (0.0, 0.0);
        for f in &frames[1..] {
            let cur = prepared_spectrum(&residual(f), cfg)?;
            let est = estimate_shift_prepared(
                &prev,
                &cur,
                &envelope,
                cfg.envelope_gamma,
                cfg.subpixel_factor,
                Some(max_sensor_shift),
            )?;
            acc_x += -m * est.dx_px;
            acc_y += -m * est.dy_px;
            poses.push(ScanPose::new(f.frame_index, acc_x, acc_y, est.confidence));
            prev = cur;
        }
        return Ok(poses);
    }

    // Pass 1: anchor every frame to frame 0.
    let spectra: Vec<(Array2<Complex64>, f64)> = frames
        .par_iter()
        .map(|f| prepared_spectrum(&residual(f), cfg))
        .collect::<Result<_>>()?;
    let coarse: Vec<ShiftEstimate> = spectra[1..]
        .par_iter()
        .map(|cur| {
            estimate_shift_prepared(
                &spectra[0],
                cur,
                &envelope,
                cfg.envelope_gamma,
                cfg.subpixel_factor,
                Some(max_sensor_shift),
            )
        })
        .collect::<Result<_>>()?;

    // Template passes: decompose the stack into a static component and a
    // translating speckle template under the current shift estimates, then
    // re-register every frame against the clean template. Subtracting the
    // plain temporal mean instead would leave a blurred copy of the moving
    // speckle in every residual, planting negative correlation lobes at all
    // trajectory positions and dragging extreme frames outward.
    let (h, w) = dim;
    let ky = fft::freq_index(h);
    let kx = fft::freq_index(w);
    let mut shifts: Vec<(f64, f64)> = std::iter::once((0.0, 0.0))
        .chain(coarse.iter().map(|e| (e.dx_px, e.dy_px)))
        .collect();
    let mut confidences: Vec<f64> = std::iter::once(1.0)
        .chain(coarse.iter().map(|e| e.confidence))
        .collect();

    let raw_spectra: Vec<Array2<Complex64>> = frames
        .par_iter()
        .map(|f| fft::fft2(&f.image.data.mapv(|v| Complex64::new(v, 0.0))))
        .collect();
    let shift_phase = |dx: f64, dy: f64, v: usize, u: usize| {
        Complex64::from_polar(
            1.0,
            -2.0 * PI * (kx[u] * dx / w as f64 + ky[v] * dy / h as f64),
        )
    };

    for _ in 0..cfg.template_passes.max(1) {
        // moving estimate: aligned mean of (I_j - static), static starts as
        // the temporal mean and is re-estimated once the moving part is out
        let mut static_spec: Array2<Complex64> = Array2::zeros(dim);
        for spec in &raw_spectra {
            static_spec += spec;
        }
        static_spec.mapv_inplace(|s| s / frames.len() as f64);
        let mut moving_spec: Array2<Complex64> = Array2::zeros(dim);
        for _ in 0..2 {
            moving_spec.fill(Complex64::new(0.0, 0.0));
            for (spec, (dx, dy)) in raw_spectra.iter().zip(&shifts) {
                for (v, mut row) in moving_spec.rows_mut().into_iter().enumerate() {
                    for (u, t) in row.iter_mut().enumerate() {
                        // align back: shift by (-dx, -dy)
                        *t += (spec[[v, u]] - static_spec[[v, u]])
                            * shift_phase(-dx, -dy, v, u);
                    }
                }
            }
            moving_spec.mapv_inplace(|s| s / frames.len() as f64);
            // static re-estimate: mean of (I_j - moving placed at shift j)
            let mut refreshed: Array2<Complex64> = Array2::zeros(dim);
            for (spec, (dx, dy)) in raw_spectra.iter().zip(&shifts) {
                for (v, mut row) in refreshed.rows_mut().into_iter().enumerate() {
                    for (u, t) in row.iter_mut().enumerate() {
                        *t += spec[[v, u]] - moving_spec[[v, u]] * shift_phase(*dx, *dy, v, u);
                    }
                }
            }
            refreshed.mapv_inplace(|s| s / frames.len() as f64);
            static_spec = refreshed;
        }

        let static_image = fft::ifft2(&static_spec).mapv(|z| z.re);
        let template_image = fft::ifft2(&moving_spec).mapv(|z| z.re);
        // nothing moves (e.g. identical frames): keep the anchored estimates
        let moving_energy: f64 = template_image.iter().map(|v| v * v).sum();
        if moving_energy <= 1e-12 * frame_var.max(f64::MIN_POSITIVE) {
            break;
        }
        let template_spec = prepared_spectrum(&template_image, cfg)?;

        let refined: Vec<ShiftEstimate> = frames
            .par_iter()
            .map(|f| {
                let cleaned = &f.image.data - &static_image;
                let cur = prepared_spectrum(&cleaned, cfg)?;
                estimate_shift_prepared(
                    &template_spec,
                    &cur,
                    &envelope,
                    cfg.envelope_gamma,
                    cfg.subpixel_factor,
                    Some(max_sensor_shift),
                )
            })
            .collect::<Result<_>>()?;
        shifts = refined.iter().map(|e| (e.dx_px, e.dy_px)).collect();
        confidences = refined.iter().map(|e| e.confidence).collect();
    }

    let origin = shifts[0];
    let mut poses = vec![ScanPose::new(frames[0].frame_index, 0.0, 0.0, 1.0)];
    for ((f, (dx, dy)), conf) in frames[1..]
        .iter()
        .zip(&shifts[1..])
        .zip(&confidences[1..])
    {
        poses.push(ScanPose::new(
            f.frame_index,
            -m * (dx - origin.0),
            -m * (dy - origin.1),
            *conf,
        ));
    }
    Ok(poses)
}

/// Indices of poses whose confidence falls below `min_confidence`.
pub fn low_confidence_frames(poses: &[ScanPose], min_confidence: f64) -> Vec<usize> {
    poses
        .iter()
        .filter(|p| p.confidence < min_confidence)
        .map(|p| p.frame_index)
        .collect()
}
