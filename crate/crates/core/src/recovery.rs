//! Joint object/diffuser phase retrieval.
//!
//! The engine alternates over the measured frames: shift the current
//! diffuser estimate to the frame's pose, form the exit wave at the diffuser
//! plane, propagate to the sensor, replace the modeled intensity so every
//! M-by-M block sums to the measured sensor pixel, propagate back, and apply
//! regularized (rPIE-style) updates to both the object-at-diffuser field and
//! the diffuser. The object itself is obtained by back-propagating over d1.

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField, Geometry, Measurement, RealImage};
use crate::propagation::PropagationKernel;
use crate::registration::ScanPose;

/// Order in which frames are visited within one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "order", rename_all = "snake_case")]
pub enum FrameOrder {
    #[default]
    Acquisition,
    Shuffled {
        seed: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryParams {
    /// Number of outer iterations over the full frame set.
    pub n_iterations: usize,
    /// Object-update regularization weight in [0, 1].
    pub alpha_obj: f64,
    /// Diffuser-update regularization weight in [0, 1].
    pub alpha_pt: f64,
    /// Per-frame relaxation of the object update in (0, 1]. The diffuser
    /// modulates the full field, so an unrelaxed update would let every
    /// frame overwrite the previous frames' corrections.
    pub beta_obj: f64,
    /// Per-frame relaxation of the diffuser update in (0, 1].
    pub beta_pt: f64,
    /// During the first `averaged_diffuser_iterations` iterations the
    /// shift-backed diffuser increments are accumulated over the whole
    /// sweep and applied once as their mean, instead of after every frame.
    /// Frame-by-frame updates out of an all-one initialization let the
    /// diffuser absorb static object structure written at inconsistent
    /// positions; the batch average keeps only the shift-consistent
    /// component and gives later sequential sweeps a sound starting point.
    pub averaged_diffuser_iterations: usize,
    /// Extrapolation applied to both fields at the end of an iteration:
    /// state += momentum * (state - state at the start of the iteration).
    /// Engages once the update mode has been stable for one full iteration
    /// and accelerates the slowly converging joint modes of the blind
    /// split; zero disables.
    pub momentum: f64,
    /// Relative denominator guard for the magnitude projection.
    pub denom_epsilon: f64,
    pub frame_order: FrameOrder,
    /// Keep refining the diffuser estimate (disable to reuse a known one).
    pub update_diffuser: bool,
    /// Largest accepted |pose| component in high-resolution pixels.
    pub max_pose_px: f64,
}

impl Default for RecoveryParams {
    fn default() -> Self {
        Self {
            n_iterations: 3,
            alpha_obj: 0.1,
            alpha_pt: 0.2,
            beta_obj: 0.7,
            beta_pt: 0.8,
            averaged_diffuser_iterations: 1,
            momentum: 0.9,
            denom_epsilon: 1e-12,
            frame_order: FrameOrder::Acquisition,
            update_diffuser: true,
            max_pose_px: 50.0,
        }
    }
}

impl RecoveryParams {
    fn validate(&self) -> Result<()> {
        if self.n_iterations < 1 {
            return Err(Error::InvalidArgument("need at least one iteration".into()));
        }
        for (name, a) in [("alpha_obj", self.alpha_obj), ("alpha_pt", self.alpha_pt)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1], got {a}"
                )));
            }
        }
        for (name, b) in [("beta_obj", self.beta_obj), ("beta_pt", self.beta_pt)] {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in (0, 1], got {b}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.denom_epsilon >= 0.0) {
            return Err(Error::InvalidArgument(
                "denom_epsilon must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Mutable state of one reconstruction.
#[derive(Debug, Clone)]
pub struct RecoveryState {
    /// Object wavefront propagated to the diffuser plane.
    pub object_at_diffuser: ComplexField,
    pub diffuser: ComplexField,
    /// Normalized data misfit after each completed outer iteration.
    pub error_history: Vec<f64>,
    /// Blocks encountered with measured signal but zero model energy.
    pub zero_block_events: usize,
}

/// Initial state: object amplitude is the square root of the mean frame,
/// nearest-neighbor up-sampled by M with zero phase; the diffuser starts as
/// an all-one matrix.
pub fn initialize(measurements: &[Measurement], geometry: &Geometry) -> Result<RecoveryState> {
    if measurements.is_empty() {
        return Err(Error::InvalidArgument("no measurements".into()));
    }
    let images: Vec<&RealImage> = measurements.iter().map(|m| &m.image).collect();
    let mean = RealImage::mean_of(&images)?;
    let amp_lo = RealImage::new(mean.data.mapv(f64::sqrt), mean.pitch_um)?;
    let amp_hi = amp_lo.upsample_nn(geometry.upsample_m)?;
    let object = ComplexField::new(
        amp_hi.data.mapv(|a| Complex64::new(a, 0.0)),
        geometry.recon_pitch_um(),
        geometry.wavelength_um,
    )?;
    let object_at_diffuser = PropagationKernel::without_band_limit(
        object.height(),
        object.width(),
        object.pitch_um,
        object.wavelength_um,
        geometry.d1_um,
    )?
    .apply(&object)?;
    let diffuser = ComplexField::ones(
        object.height(),
        object.width(),
        object.pitch_um,
        object.wavelength_um,
    )?;
    Ok(RecoveryState {
        object_at_diffuser,
        diffuser,
        error_history: Vec::new(),
        zero_block_events: 0,
    })
}

/// Result of the up-sampled magnitude projection.
#[derive(Debug, Clone)]
pub struct ProjectionOutcome {
    pub field: ComplexField,
    /// Blocks where the measurement is positive but the model carries no
    /// energy; those blocks stay zero (their phase is unrecoverable).
    pub zero_blocks: usize,
}

/// Rescale `psi` so that every m-by-m block of |psi'|^2 sums to the
/// corresponding measured pixel, preserving the phase and the intra-block
/// intensity distribution.
pub fn magnitude_project_upsampled(
    psi: &ComplexField,
    measured: &RealImage,
    m: usize,
    denom_epsilon: f64,
) -> Result<ProjectionOutcome> {
    if m < 1 {
        return Err(Error::InvalidArgument("m must be >= 1".into()));
    }
    if psi.height() != m * measured.height() || psi.width() != m * measured.width() {
        return Err(Error::DimensionMismatch(format!(
            "psi {}x{} vs {}x measurement {}x{}",
            psi.height(),
            psi.width(),
            m,
            measured.height(),
            measured.width()
        )));
    }
    let model = psi.intensity().bin_intensity(m)?;
    let eps = denom_epsilon * model.max().max(0.0);
    let mut zero_blocks = 0usize;
    let mut ratio = Array2::zeros(model.data.dim());
    for ((p, q), r) in ratio.indexed_iter_mut() {
        let b = model.data[[p, q]];
        let i = measured.data[[p, q]];
        if b <= eps || b == 0.0 {
            if i > 0.0 {
                zero_blocks += 1;
            }
            *r = 0.0;
        } else {
            *r = (i / (b + eps)).sqrt();
        }
    }
    let ratio_hi = RealImage { data: ratio, pitch_um: model.pitch_um }.upsample_nn(m)?;
    let data = Array2::from_shape_fn(psi.data.dim(), |(y, x)| {
        psi.data[[y, x]] * ratio_hi.data[[y, x]]
    });
    Ok(ProjectionOutcome {
        field: ComplexField::new(data, psi.pitch_um, psi.wavelength_um)?,
        zero_blocks,
    })
}

/// Shared rPIE-style update: `base + conj(probe) * (after - before) / denom`
/// with `denom = (1 - alpha)|probe|^2 + alpha max|probe|^2`.
fn rpie_step(
    base: &ComplexField,
    probe: &ComplexField,
    before: &ComplexField,
    after: &ComplexField,
    alpha: f64,
) -> Result<ComplexField> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let dim = base.data.dim();
    if probe.data.dim() != dim || before.data.dim() != dim || after.data.dim() != dim {
        return Err(Error::DimensionMismatch(
            "update fields live on different grids".into(),
        ));
    }
    let mut max_sq = 0.0f64;
    let mut min_sq = f64::INFINITY;
    for z in probe.data.iter() {
        let n = z.norm_sqr();
        if n > max_sq {
            max_sq = n;
        }
        if n < min_sq {
            min_sq = n;
        }
    }
    if max_sq == 0.0 {
        return Err(Error::DegenerateInput(
            "update denominator vanishes: probe field is identically zero".into(),
        ));
    }
    if alpha == 0.0 && min_sq == 0.0 {
        return Err(Error::DegenerateInput(
            "alpha = 0 with a zero somewhere in the probe field".into(),
        ));
    }
    let data = Array2::from_shape_fn(dim, |idx| {
        let p = probe.data[idx];
        let denom = (1.0 - alpha) * p.norm_sqr() + alpha * max_sq;
        base.data[idx] + p.conj() * (after.data[idx] - before.data[idx]) / denom
    });
    ComplexField::new(data, base.pitch_um, base.wavelength_um)
}

/// Update the object-at-diffuser field from the exit-wave residual.
pub fn rpie_update_object(
    object_at_diffuser: &ComplexField,
    diffuser_shifted: &ComplexField,
    before: &ComplexField,
    after: &ComplexField,
    alpha_obj: f64,
) -> Result<ComplexField> {
    rpie_step(object_at_diffuser, diffuser_shifted, before, after, alpha_obj)
}

/// Update the shifted diffuser from the exit-wave residual; exactly the
/// object update with the two fields' roles exchanged.
pub fn rpie_update_diffuser(
    diffuser_shifted: &ComplexField,
    object_at_diffuser: &ComplexField,
    before: &ComplexField,
    after: &ComplexField,
    alpha_pt: f64,
) -> Result<ComplexField> {
    rpie_step(diffuser_shifted, object_at_diffuser, before, after, alpha_pt)
}

/// base + beta * (target - base), elementwise.
fn relax(base: &ComplexField, target: &ComplexField, beta: f64) -> Result<ComplexField> {
    if beta == 1.0 {
        return Ok(target.clone());
    }
    let data = Array2::from_shape_fn(base.data.dim(), |idx| {
        base.data[idx] + (target.data[idx] - base.data[idx]) * beta
    });
    ComplexField::new(data, base.pitch_um, base.wavelength_um)
}

/// One reconstruction run: owns kernels, state, and the frame bookkeeping.
pub struct Reconstruction<'a> {
    measurements: &'a [Measurement],
    poses: &'a [ScanPose],
    geometry: Geometry,
    params: RecoveryParams,
    kernel_to_sensor: PropagationKernel,
    kernel_from_sensor: PropagationKernel,
    state: RecoveryState,
    iterations_done: usize,
}

impl<'a> Reconstruction<'a> {
    /// Start from the standard initialization.
    pub fn new(
        measurements: &'a [Measurement],
        poses: &'a [ScanPose],
        geometry: &Geometry,
        params: RecoveryParams,
    ) -> Result<Self> {
        let state = initialize(measurements, geometry)?;
        Self::with_state(measurements, poses, geometry, params, state)
    }

    /// Start from an explicit state (e.g. a known diffuser, or ground truth
    /// in self-consistency tests).
    pub fn with_state(
        measurements: &'a [Measurement],
        poses: &'a [ScanPose],
        geometry: &Geometry,
        params: RecoveryParams,
        state: RecoveryState,
    ) -> Result<Self> {
        params.validate()?;
        if measurements.is_empty() {
            return Err(Error::InvalidArgument("no measurements".into()));
        }
        if measurements.len() != poses.len() {
            return Err(Error::InvalidArgument(format!(
                "{} measurements vs {} poses",
                measurements.len(),
                poses.len()
            )));
        }
        for (m, p) in measurements.iter().zip(poses.iter()) {
            if m.frame_index != p.frame_index {
                return Err(Error::InvalidArgument(format!(
                    "measurement frame {} paired with pose frame {}",
                    m.frame_index, p.frame_index
                )));
            }
            if p.x_px.abs() > params.max_pose_px || p.y_px.abs() > params.max_pose_px {
                return Err(Error::InvalidArgument(format!(
                    "pose of frame {} exceeds max_pose_px = {}",
                    p.frame_index, params.max_pose_px
                )));
            }
        }
        let m = geometry.upsample_m;
        let dim = measurements[0].image.data.dim();
        if measurements.iter().any(|f| f.image.data.dim() != dim) {
            return Err(Error::DimensionMismatch("frames differ in size".into()));
        }
        let hi_dim = (dim.0 * m, dim.1 * m);
        if state.object_at_diffuser.data.dim() != hi_dim
            || state.diffuser.data.dim() != hi_dim
        {
            return Err(Error::DimensionMismatch(format!(
                "state grid does not match {}x{} (frames x M)",
                hi_dim.0, hi_dim.1
            )));
        }
        let kernel_to_sensor = PropagationKernel::without_band_limit(
            hi_dim.0,
            hi_dim.1,
            geometry.recon_pitch_um(),
            geometry.wavelength_um,
            geometry.d2_um,
        )?;
        let kernel_from_sensor = kernel_to_sensor.conjugated();
        Ok(Self {
            measurements,
            poses,
            geometry: *geometry,
            params,
            kernel_to_sensor,
            kernel_from_sensor,
            state,
            iterations_done: 0,
        })
    }

    pub fn state(&self) -> &RecoveryState {
        &self.state
    }

    fn frame_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.measurements.len()).collect();
        if let FrameOrder::Shuffled { seed } = self.params.frame_order {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_add(self.iterations_done as u64));
            order.shuffle(&mut rng);
        }
        order
    }

    /// One outer iteration over all frames; returns the data misfit of the
    /// state after the iteration (also appended to the error history).
    pub fn iterate(&mut self) -> Result<f64> {
        let m = self.geometry.upsample_m;
        let eps = self.params.denom_epsilon;
        let averaged = self.params.update_diffuser
            && self.iterations_done < self.params.averaged_diffuser_iterations;
        let beta_obj = self.params.beta_obj;
        let beta_pt = self.params.beta_pt;
        // The first sweep's displacement is the init transient (and the
        // first sequential sweep after an averaged stage is another mode
        // switch); extrapolate only once the update mode has been stable
        // for one full iteration.
        let momentum_from = self.params.averaged_diffuser_iterations + 1;
        let momentum_base = if self.params.momentum > 0.0 && self.iterations_done >= momentum_from
        {
            Some((
                self.state.object_at_diffuser.data.clone(),
                self.state.diffuser.data.clone(),
            ))
        } else {
            None
        };
        let mut diffuser_delta: Option<Array2<Complex64>> = None;
        for j in self.frame_order() {
            let pose = &self.poses[j];
            let diffuser_shifted = self
                .state
                .diffuser
                .subpixel_shift(-pose.x_px, -pose.y_px)?;
            let exit_before = self.state.object_at_diffuser.modulate(&diffuser_shifted)?;
            let at_sensor = self.kernel_to_sensor.apply(&exit_before)?;
            let projected =
                magnitude_project_upsampled(&at_sensor, &self.measurements[j].image, m, eps)?;
            self.state.zero_block_events += projected.zero_blocks;
            let exit_after = self.kernel_from_sensor.apply(&projected.field)?;

            let object_full = rpie_update_object(
                &self.state.object_at_diffuser,
                &diffuser_shifted,
                &exit_before,
                &exit_after,
                self.params.alpha_obj,
            )?;
            let object_new = relax(&self.state.object_at_diffuser, &object_full, beta_obj)?;
            if self.params.update_diffuser {
                let diffuser_full = rpie_update_diffuser(
                    &diffuser_shifted,
                    &self.state.object_at_diffuser,
                    &exit_before,
                    &exit_after,
                    self.params.alpha_pt,
                )?;
                if averaged {
                    let increment = ComplexField::new(
                        &diffuser_full.data - &diffuser_shifted.data,
                        diffuser_full.pitch_um,
                        diffuser_full.wavelength_um,
                    )?
                    .subpixel_shift(pose.x_px, pose.y_px)?;
                    match &mut diffuser_delta {
                        Some(acc) => *acc += &increment.data,
                        None => diffuser_delta = Some(increment.data),
                    }
                } else {
                    let diffuser_new = relax(&diffuser_shifted, &diffuser_full, beta_pt)?;
                    self.state.diffuser = diffuser_new.subpixel_shift(pose.x_px, pose.y_px)?;
                }
            }
            self.state.object_at_diffuser = object_new;

            if !self.state.object_at_diffuser.is_finite() || !self.state.diffuser.is_finite() {
                return Err(Error::NumericFailureAt {
                    iteration: self.iterations_done + 1,
                    frame: pose.frame_index,
                });
            }
        }
        if let Some(acc) = diffuser_delta {
            let scale = beta_pt / self.measurements.len() as f64;
            let data = &self.state.diffuser.data + &acc.mapv(|v| v * scale);
            self.state.diffuser = ComplexField::new(
                data,
                self.state.diffuser.pitch_um,
                self.state.diffuser.wavelength_um,
            )?;
            if !self.state.diffuser.is_finite() {
                return Err(Error::NumericFailureAt {
                    iteration: self.iterations_done + 1,
                    frame: self.measurements.len() - 1,
                });
            }
        }
        if let Some((base_o, base_d)) = momentum_base {
            let mu = self.params.momentum;
            let o = &self.state.object_at_diffuser.data
                + &(&self.state.object_at_diffuser.data - &base_o).mapv(|v| v * mu);
            let d = &self.state.diffuser.data
                + &(&self.state.diffuser.data - &base_d).mapv(|v| v * mu);
            self.state.object_at_diffuser = ComplexField::new(
                o,
                self.state.object_at_diffuser.pitch_um,
                self.state.object_at_diffuser.wavelength_um,
            )?;
            self.state.diffuser = ComplexField::new(
                d,
                self.state.diffuser.pitch_um,
                self.state.diffuser.wavelength_um,
            )?;
        }
        self.iterations_done += 1;
        let err = self.data_error()?;
        self.state.error_history.push(err);
        Ok(err)
    }

    /// Run the configured number of iterations.
    pub fn run(&mut self) -> Result<()> {
        for _ in 0..self.params.n_iterations {
            self.iterate()?;
        }
        Ok(())
    }

    /// Normalized data misfit of the current state:
    /// sum_j |bin(|psi_j|^2) - I_j|_1 / sum_j |I_j|_1.
    pub fn data_error(&self) -> Result<f64> {
        data_error(
            &self.state,
            self.measurements,
            self.poses,
            &self.geometry,
        )
    }

    /// Back-propagate the object-at-diffuser field to the object plane.
    pub fn object(&self) -> Result<ComplexField> {
        let od = &self.state.object_at_diffuser;
        PropagationKernel::without_band_limit(
            od.height(),
            od.width(),
            od.pitch_um,
            od.wavelength_um,
            -self.geometry.d1_um,
        )?
        .apply(od)
    }

    pub fn into_state(self) -> RecoveryState {
        self.state
    }
}

/// Normalized data misfit of an arbitrary state against the measurements.
pub fn data_error(
    state: &RecoveryState,
    measurements: &[Measurement],
    poses: &[ScanPose],
    geometry: &Geometry,
) -> Result<f64> {
    if measurements.len() != poses.len() {
        return Err(Error::InvalidArgument(
            "measurement/pose count mismatch".into(),
        ));
    }
    let m = geometry.upsample_m;
    let kernel = PropagationKernel::without_band_limit(
        state.object_at_diffuser.height(),
        state.object_at_diffuser.width(),
        geometry.recon_pitch_um(),
        geometry.wavelength_um,
        geometry.d2_um,
    )?;
    let (num, den) = measurements
        .par_iter()
        .zip(poses.par_iter())
        .map(|(meas, pose)| -> Result<(f64, f64)> {
            let shifted = state.diffuser.subpixel_shift(-pose.x_px, -pose.y_px)?;
            let exit = state.object_at_diffuser.modulate(&shifted)?;
            let at_sensor = kernel.apply(&exit)?;
            let model = at_sensor.intensity().bin_intensity(m)?;
            let mut n = 0.0;
            let mut d = 0.0;
            for (mv, iv) in model.data.iter().zip(meas.image.data.iter()) {
                n += (mv - iv).abs();
                d += iv.abs();
            }
            Ok((n, d))
        })
        .try_reduce(|| (0.0, 0.0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))?;
    if den == 0.0 {
        return Err(Error::DegenerateInput(
            "all measurements are zero".into(),
        ));
    }
    Ok(num / den)
}

/// Outputs of a complete reconstruction.
#[derive(Debug, Clone)]
pub struct ReconstructionOutput {
    /// Recovered complex exit wavefront at the object plane.
    pub object: ComplexField,
    /// Recovered diffuser profile.
    pub diffuser: ComplexField,
    pub state: RecoveryState,
}

/// Convenience wrapper: initialize, iterate N times, back-propagate.
pub fn run_reconstruction(
    measurements: &[Measurement],
    poses: &[ScanPose],
    geometry: &Geometry,
    params: RecoveryParams,
) -> Result<ReconstructionOutput> {
    let mut recon = Reconstruction::new(measurements, poses, geometry, params)?;
    recon.run()?;
    let object = recon.object()?;
    let state = recon.into_state();
    Ok(ReconstructionOutput {
        object,
        diffuser: state.diffuser.clone(),
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::RealImage;
    use ndarray::array;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const WL: f64 = 0.532;

    fn random_psi(h: usize, w: usize, seed: u64) -> ComplexField {
        let mut rng = StdRng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((h, w), |_| {
            Complex64::from_polar(
                rng.random_range(0.3..1.0),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            )
        });
        ComplexField::new(data, 0.5, WL).unwrap()
    }

    #[test]
    fn initialize_uniform_frame() {
        let g = Geometry::new(WL, 1.0, 0.0, 100.0, 1).unwrap();
        let image = RealImage::new(Array2::from_elem((4, 4), 4.0), 1.0).unwrap();
        let state = initialize(
            &[Measurement {
                frame_index: 0,
                image,
            }],
            &g,
        )
        .unwrap();
        for z in state.object_at_diffuser.data.iter() {
            assert!((z - Complex64::new(2.0, 0.0)).norm() < 1e-12);
        }
        for z in state.diffuser.data.iter() {
            assert_eq!(*z, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn initialize_averages_measurements() {
        let g = Geometry::new(WL, 1.0, 0.0, 100.0, 1).unwrap();
        let frames = vec![
            Measurement {
                frame_index: 0,
                image: RealImage::new(array![[1.0]], 1.0).unwrap(),
            },
            Measurement {
                frame_index: 1,
                image: RealImage::new(array![[3.0]], 1.0).unwrap(),
            },
        ];
        let state = initialize(&frames, &g).unwrap();
        assert!((state.object_at_diffuser.data[[0, 0]].re - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn initialize_rejects_empty() {
        let g = Geometry::new(WL, 1.0, 0.0, 100.0, 1).unwrap();
        assert!(initialize(&[], &g).is_err());
    }

    #[test]
    fn projection_fixed_point() {
        let psi = random_psi(6, 6, 1);
        let consistent = psi.intensity().bin_intensity(3).unwrap();
        let out = magnitude_project_upsampled(&psi, &consistent, 3, 1e-12).unwrap();
        let n = 36.0;
        let rms = (psi
            .data
            .iter()
            .zip(out.field.data.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            / n)
            .sqrt();
        assert!(rms < 1e-10);
        assert_eq!(out.zero_blocks, 0);
    }

    #[test]
    fn projection_m1_is_magnitude_replacement() {
        let psi = random_psi(5, 4, 2);
        let mut rng = StdRng::seed_from_u64(3);
        let target = RealImage::new(
            Array2::from_shape_fn((5, 4), |_| rng.random_range(0.1..2.0)),
            0.5,
        )
        .unwrap();
        let out = magnitude_project_upsampled(&psi, &target, 1, 1e-12).unwrap();
        for ((y, x), z) in out.field.data.indexed_iter() {
            let expected_amp = target.data[[y, x]].sqrt();
            assert!((z.norm() - expected_amp).abs() < 1e-9);
            // phase preserved
            let d = (z.arg() - psi.data[[y, x]].arg()).abs();
            assert!(d < 1e-12 || (d - 2.0 * std::f64::consts::PI).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_enforces_block_sums() {
        let psi = random_psi(6, 6, 4);
        let mut rng = StdRng::seed_from_u64(5);
        let target = RealImage::new(
            Array2::from_shape_fn((2, 2), |_| rng.random_range(0.05..1.0)),
            1.5,
        )
        .unwrap();
        let out = magnitude_project_upsampled(&psi, &target, 3, 1e-12).unwrap();
        let binned = out.field.intensity().bin_intensity(3).unwrap();
        for (a, b) in binned.data.iter().zip(target.data.iter()) {
            assert!((a - b).abs() / b < 1e-9);
        }
    }

    #[test]
    fn projection_flags_zero_blocks() {
        let psi = ComplexField::zeros(4, 4, 0.5, WL).unwrap();
        let target = RealImage::new(Array2::from_elem((2, 2), 1.0), 1.0).unwrap();
        let out = magnitude_project_upsampled(&psi, &target, 2, 1e-12).unwrap();
        assert_eq!(out.zero_blocks, 4);
        assert!(out.field.data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn projection_rejects_dimension_mismatch() {
        let psi = random_psi(6, 6, 6);
        let target = RealImage::zeros(3, 3, 1.0).unwrap();
        assert!(magnitude_project_upsampled(&psi, &target, 3, 1e-12).is_err());
    }

    fn scalar_field(v: Complex64) -> ComplexField {
        ComplexField::new(Array2::from_elem((1, 1), v), 1.0, WL).unwrap()
    }

    #[test]
    fn object_update_scalar_case() {
        // base 1, probe 1, before 1, after 2, alpha 0.5 -> 2
        let out = rpie_update_object(
            &scalar_field(Complex64::new(1.0, 0.0)),
            &scalar_field(Complex64::new(1.0, 0.0)),
            &scalar_field(Complex64::new(1.0, 0.0)),
            &scalar_field(Complex64::new(2.0, 0.0)),
            0.5,
        )
        .unwrap();
        assert!((out.data[[0, 0]] - Complex64::new(2.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn update_with_zero_residual_is_identity() {
        let base = random_psi(4, 4, 7);
        let probe = random_psi(4, 4, 8);
        let phi = random_psi(4, 4, 9);
        let out = rpie_update_object(&base, &probe, &phi, &phi, 0.1).unwrap();
        for (a, b) in out.data.iter().zip(base.data.iter()) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn alpha_zero_with_unit_probe_is_plain_gradient() {
        let base = random_psi(4, 4, 10);
        let probe = ComplexField::ones(4, 4, 0.5, WL).unwrap();
        let before = random_psi(4, 4, 11);
        let after = random_psi(4, 4, 12);
        let out = rpie_update_object(&base, &probe, &before, &after, 0.0).unwrap();
        for (idx, z) in out.data.indexed_iter() {
            let expected = base.data[idx] + (after.data[idx] - before.data[idx]);
            assert!((z - expected).norm() < 1e-13);
        }
    }

    #[test]
    fn object_and_diffuser_updates_are_symmetric() {
        // Swapping the two fields and the alphas maps one update onto the
        // other; checked on random small fields.
        let a = random_psi(5, 5, 13);
        let b = random_psi(5, 5, 14);
        let before = random_psi(5, 5, 15);
        let after = random_psi(5, 5, 16);
        let via_object = rpie_update_object(&a, &b, &before, &after, 0.3).unwrap();
        let via_diffuser = rpie_update_diffuser(&a, &b, &before, &after, 0.3).unwrap();
        for (x, y) in via_object.data.iter().zip(via_diffuser.data.iter()) {
            assert!((x - y).norm() < 1e-14);
        }
    }

    #[test]
    fn zero_probe_is_degenerate() {
        let base = random_psi(3, 3, 17);
        let zero = ComplexField::zeros(3, 3, 0.5, WL).unwrap();
        assert!(matches!(
            rpie_update_object(&base, &zero, &base, &base, 0.1),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn alpha_zero_with_partial_zero_probe_is_degenerate() {
        let base = random_psi(2, 2, 18);
        let mut probe = random_psi(2, 2, 19);
        probe.data[[0, 0]] = Complex64::new(0.0, 0.0);
        assert!(rpie_update_object(&base, &probe, &base, &base, 0.0).is_err());
    }

    #[test]
    fn degenerate_single_frame_recovers_sqrt_intensity() {
        // all-one diffuser, d1 = d2 = 0, M = 1, single frame: the recovered
        // amplitude is sqrt(I) after one iteration.
        let g = Geometry::new(WL, 1.0, 0.0, 0.0, 1).unwrap();
        let mut rng = StdRng::seed_from_u64(20);
        let image = RealImage::new(
            Array2::from_shape_fn((8, 8), |_| rng.random_range(0.2..2.0)),
            1.0,
        )
        .unwrap();
        let meas = vec![Measurement {
            frame_index: 0,
            image: image.clone(),
        }];
        let poses = vec![ScanPose::new(0, 0.0, 0.0, 1.0)];
        let params = RecoveryParams {
            n_iterations: 1,
            ..RecoveryParams::default()
        };
        let out = run_reconstruction(&meas, &poses, &g, params).unwrap();
        for ((y, x), z) in out.object.data.indexed_iter() {
            assert!((z.norm() - image.data[[y, x]].sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn data_error_is_one_for_zero_object() {
        let g = Geometry::new(WL, 1.0, 0.0, 0.0, 1).unwrap();
        let image = RealImage::new(Array2::from_elem((4, 4), 1.5), 1.0).unwrap();
        let meas = vec![Measurement {
            frame_index: 0,
            image,
        }];
        let poses = vec![ScanPose::new(0, 0.0, 0.0, 1.0)];
        let state = RecoveryState {
            object_at_diffuser: ComplexField::zeros(4, 4, 1.0, WL).unwrap(),
            diffuser: ComplexField::ones(4, 4, 1.0, WL).unwrap(),
            error_history: Vec::new(),
            zero_block_events: 0,
        };
        let e = data_error(&state, &meas, &poses, &g).unwrap();
        assert_eq!(e, 1.0);
    }

    #[test]
    fn mismatched_poses_rejected() {
        let g = Geometry::new(WL, 1.0, 0.0, 0.0, 1).unwrap();
        let image = RealImage::new(Array2::from_elem((4, 4), 1.0), 1.0).unwrap();
        let meas = vec![Measurement {
            frame_index: 0,
            image,
        }];
        let poses = vec![ScanPose::new(3, 0.0, 0.0, 1.0)];
        assert!(Reconstruction::new(&meas, &poses, &g, RecoveryParams::default()).is_err());
    }

    #[test]
    fn oversized_pose_rejected() {
        let g = Geometry::new(WL, 1.0, 0.0, 0.0, 1).unwrap();
        let image = RealImage::new(Array2::from_elem((4, 4), 1.0), 1.0).unwrap();
        let meas = vec![Measurement {
            frame_index: 0,
            image,
        }];
        let poses = vec![ScanPose::new(0, 120.0, 0.0, 1.0)];
        assert!(Reconstruction::new(&meas, &poses, &g, RecoveryParams::default()).is_err());
    }
}
