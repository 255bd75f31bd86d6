//! Quality metrics for comparing reconstructions against ground truth.
//!
//! The object/diffuser factorization is only determined up to one global
//! complex scale, so every comparison first removes the least-squares scale
//! between candidate and reference.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::registration::ScanPose;

/// Wrap an angle difference into (-pi, pi].
pub fn wrap_phase(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut y = x.rem_euclid(two_pi);
    if y > std::f64::consts::PI {
        y -= two_pi;
    }
    y
}

/// The complex scale c minimizing ||c * candidate - reference||^2.
pub fn global_scale(reference: &ComplexField, candidate: &ComplexField) -> Result<Complex64> {
    if reference.data.dim() != candidate.data.dim() {
        return Err(Error::DimensionMismatch(
            "fields to compare differ in size".into(),
        ));
    }
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = 0.0;
    for (r, c) in reference.data.iter().zip(candidate.data.iter()) {
        num += c.conj() * r;
        den += c.norm_sqr();
    }
    if den == 0.0 {
        return Err(Error::DegenerateInput("candidate field is zero".into()));
    }
    Ok(num / den)
}

/// Apply the least-squares global scale to the candidate.
pub fn align_global_scale(
    reference: &ComplexField,
    candidate: &ComplexField,
) -> Result<ComplexField> {
    let c = global_scale(reference, candidate)?;
    ComplexField::new(
        candidate.data.mapv(|z| z * c),
        candidate.pitch_um,
        candidate.wavelength_um,
    )
}

/// RMS of the wrapped phase difference between the scale-aligned candidate
/// and the reference, over the optional mask (everywhere if none).
pub fn aligned_phase_rmse(
    reference: &ComplexField,
    candidate: &ComplexField,
    mask: Option<&Array2<bool>>,
) -> Result<f64> {
    let aligned = align_global_scale(reference, candidate)?;
    if let Some(m) = mask {
        if m.dim() != reference.data.dim() {
            return Err(Error::DimensionMismatch(
                "mask does not match the fields".into(),
            ));
        }
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (idx, r) in reference.data.indexed_iter() {
        if let Some(m) = mask {
            if !m[idx] {
                continue;
            }
        }
        let d = wrap_phase(aligned.data[idx].arg() - r.arg());
        acc += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::DegenerateInput("empty comparison mask".into()));
    }
    Ok((acc / n as f64).sqrt())
}

/// RMS of |candidate| - |reference| after scale alignment, over the mask.
pub fn aligned_amplitude_rmse(
    reference: &ComplexField,
    candidate: &ComplexField,
    mask: Option<&Array2<bool>>,
) -> Result<f64> {
    let aligned = align_global_scale(reference, candidate)?;
    let mut acc = 0.0;
    let mut n = 0usize;
    for (idx, r) in reference.data.indexed_iter() {
        if let Some(m) = mask {
            if !m[idx] {
                continue;
            }
        }
        let d = aligned.data[idx].norm() - r.norm();
        acc += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::DegenerateInput("empty comparison mask".into()));
    }
    Ok((acc / n as f64).sqrt())
}

/// Michelson contrast (max - min) / (max + min) of a 1D profile.
pub fn michelson_contrast(profile: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in profile {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi + lo == 0.0 {
        return 0.0;
    }
    (hi - lo) / (hi + lo)
}

/// Per-frame Euclidean pose errors between two trajectories.
pub fn pose_errors(truth: &[ScanPose], estimate: &[ScanPose]) -> Result<Vec<f64>> {
    if truth.len() != estimate.len() {
        return Err(Error::InvalidArgument(
            "trajectories differ in length".into(),
        ));
    }
    Ok(truth
        .iter()
        .zip(estimate.iter())
        .map(|(t, e)| ((t.x_px - e.x_px).powi(2) + (t.y_px - e.y_px).powi(2)).sqrt())
        .collect())
}

/// A boolean mask selecting the interior of a grid, excluding a border.
pub fn interior_mask(height: usize, width: usize, border: usize) -> Array2<bool> {
    Array2::from_shape_fn((height, width), |(y, x)| {
        y >= border && x >= border && y < height - border && x < width - border
    })
}
