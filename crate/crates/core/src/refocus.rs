//! Digital propagation of a recovered wavefront to arbitrary axial planes,
//! with a sharpness-metric scan for automatic focus finding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::propagation::propagate;

/// Amplitude sharpness metrics for the focus scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FocusMetric {
    /// var(|f|) / mean(|f|)^2
    #[default]
    NormalizedVariance,
    /// sqrt(std(|f|) / mean(|f|))
    Tamura,
}

/// Result of an axial sharpness scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FocusScan {
    pub z_values_um: Vec<f64>,
    pub metric_values: Vec<f64>,
    pub best_z_um: f64,
    pub metric_kind: FocusMetric,
}

impl FocusScan {
    /// Indices of strict interior local maxima of the metric curve.
    pub fn local_maxima(&self) -> Vec<usize> {
        let v = &self.metric_values;
        (1..v.len().saturating_sub(1))
            .filter(|&i| v[i] > v[i - 1] && v[i] > v[i + 1])
            .collect()
    }
}

/// Propagate the field by a signed axial distance.
pub fn refocus(object: &ComplexField, z_um: f64) -> Result<ComplexField> {
    propagate(object, z_um)
}

fn sharpness(field: &ComplexField, metric: FocusMetric) -> Result<f64> {
    let amp = field.amplitude();
    let n = (amp.height() * amp.width()) as f64;
    let mean = amp.sum() / n;
    if !(mean > 0.0) {
        return Err(Error::NumericFailure(
            "zero-amplitude field has no focus metric".into(),
        ));
    }
    let var = amp.data.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let value = match metric {
        FocusMetric::NormalizedVariance => var / (mean * mean),
        FocusMetric::Tamura => (var.sqrt() / mean).sqrt(),
    };
    if !value.is_finite() {
        return Err(Error::NumericFailure("focus metric is non-finite".into()));
    }
    Ok(value)
}

/// Evaluate the sharpness metric on |refocus(object, z)| over a uniform
/// z grid and report the argmax.
pub fn autofocus(
    object: &ComplexField,
    z_min_um: f64,
    z_max_um: f64,
    n_steps: usize,
    metric: FocusMetric,
) -> Result<FocusScan> {
    if !(z_min_um < z_max_um) {
        return Err(Error::InvalidArgument("need z_min < z_max".into()));
    }
    if n_steps < 3 {
        return Err(Error::InvalidArgument("need at least 3 scan steps".into()));
    }
    let step = (z_max_um - z_min_um) / (n_steps - 1) as f64;
    let z_values_um: Vec<f64> = (0..n_steps).map(|i| z_min_um + i as f64 * step).collect();
    let metric_values: Vec<f64> = z_values_um
        .par_iter()
        .map(|&z| sharpness(&refocus(object, z)?, metric))
        .collect::<Result<_>>()?;
    let best = metric_values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty scan");
    Ok(FocusScan {
        best_z_um: z_values_um[best.0],
        z_values_um,
        metric_values,
        metric_kind: metric,
    })
}
