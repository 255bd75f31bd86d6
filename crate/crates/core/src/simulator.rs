//! Ground-truth objects, bead diffusers, scan trajectories, and synthetic
//! measurement datasets generated through the exact forward model:
//! propagate the object to the diffuser, modulate by the shifted diffuser,
//! propagate to the sensor, take the intensity, and bin M-by-M blocks into
//! sensor pixels.

use std::f64::consts::PI;
use std::path::PathBuf;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField, Geometry, Measurement, RealImage};
use crate::propagation::{propagate, PropagationKernel};
use crate::registration::ScanPose;

/// Bead-coated diffuser model: randomly placed smooth phase bumps with a
/// correlated amplitude dip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffuserSpec {
    pub bead_diameter_um: f64,
    pub bead_density_per_um2: f64,
    /// Peak phase delay contributed by a single bead, in radians.
    pub max_phase_rad: f64,
    /// Lower bound of the amplitude transmittance, in [0, 1].
    pub amplitude_floor: f64,
    pub rng_seed: u64,
}

impl Default for DiffuserSpec {
    fn default() -> Self {
        Self {
            bead_diameter_um: 1.0,
            bead_density_per_um2: 0.35,
            max_phase_rad: 1.5,
            amplitude_floor: 0.85,
            rng_seed: 0,
        }
    }
}

/// Synthetic test objects standing in for physical targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectSpec {
    /// Binary amplitude grating: lines of width `linewidth_um`, period twice
    /// the linewidth, varying along x.
    LinePairs { linewidth_um: f64 },
    /// Unit-amplitude field with `n_disks` phase disks of uniform phase.
    PhaseDisks {
        disk_phase_rad: f64,
        disk_radius_um: f64,
        #[serde(default = "one")]
        n_disks: usize,
    },
    /// Binary amplitude spoke target.
    SiemensStar { n_spokes: usize, radius_um: f64 },
    /// Exit wave of two axially separated amplitude-feature layers; the
    /// second layer sits `layer_separation_um` upstream of the exit plane.
    TwoLayer {
        layer_separation_um: f64,
        feature_radius_um: f64,
        amplitude_dip: f64,
    },
    /// Load a previously saved complex field.
    FromFile { path: PathBuf },
}

fn one() -> usize {
    1
}

/// Optional measurement noise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum NoiseModel {
    #[default]
    None,
    Poisson {
        photons_per_unit: f64,
    },
    Gaussian {
        sigma: f64,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub model: NoiseModel,
    #[serde(default)]
    pub rng_seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    fn validate(&self) -> Result<()> {
        match self.model {
            NoiseModel::None => Ok(()),
            NoiseModel::Poisson { photons_per_unit } => {
                if photons_per_unit > 0.0 && photons_per_unit.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(
                        "photons_per_unit must be positive".into(),
                    ))
                }
            }
            NoiseModel::Gaussian { sigma } => {
                if sigma >= 0.0 && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument("sigma must be non-negative".into()))
                }
            }
        }
    }
}

/// Scan patterns for the diffuser trajectory.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryPattern {
    Raster,
    RandomWalk,
}

/// Per-frame RNG stream so parallel synthesis matches sequential synthesis.
fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generate a deterministic diffuser field: `n = density * area` beads are
/// dropped uniformly at random; each contributes a raised-cosine phase bump.
/// The amplitude dips from 1 toward `amplitude_floor` where bumps pile up.
///
/// The bump support is scaled so the autocorrelation width of the phase map
/// comes out close to the bead diameter.
pub fn make_diffuser(
    spec: &DiffuserSpec,
    height: usize,
    width: usize,
    pitch_um: f64,
    wavelength_um: f64,
) -> Result<ComplexField> {
    if !(spec.bead_diameter_um > 0.0) {
        return Err(Error::InvalidArgument("bead diameter must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.amplitude_floor) {
        return Err(Error::InvalidArgument(
            "amplitude floor must be in [0, 1]".into(),
        ));
    }
    if !(spec.max_phase_rad >= 0.0) {
        return Err(Error::InvalidArgument(
            "max phase must be non-negative".into(),
        ));
    }
    if spec.bead_density_per_um2 == 0.0 {
        return ComplexField::ones(height, width, pitch_um, wavelength_um);
    }
    if (height as f64) * pitch_um < spec.bead_diameter_um
        || (width as f64) * pitch_um < spec.bead_diameter_um
    {
        return Err(Error::InvalidArgument(
            "grid smaller than a single bead".into(),
        ));
    }
    let area_um2 = (height as f64) * (width as f64) * pitch_um * pitch_um;
    let n_beads = (spec.bead_density_per_um2 * area_um2).round() as usize;
    if n_beads == 0 {
        return Err(Error::InvalidArgument(
            "bead density yields fewer than one expected bead".into(),
        ));
    }

    // cos^2 bump of support radius rho; FWHM = rho; autocorrelation FWHM of
    // the resulting map is ~1.29 FWHM, so rho = diameter / 1.29.
    let rho_um = spec.bead_diameter_um / 1.29;
    let rho_px = rho_um / pitch_um;
    let reach = rho_px.ceil() as i64;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut phase = Array2::<f64>::zeros((height, width));
    for _ in 0..n_beads {
        let cx: f64 = rng.random_range(0.0..width as f64);
        let cy: f64 = rng.random_range(0.0..height as f64);
        let x0 = cx.floor() as i64;
        let y0 = cy.floor() as i64;
        for dy in -reach..=reach + 1 {
            for dx in -reach..=reach + 1 {
                let px = x0 + dx;
                let py = y0 + dy;
                let r = ((px as f64 - cx).powi(2) + (py as f64 - cy).powi(2)).sqrt();
                if r < rho_px {
                    let bump = spec.max_phase_rad * (PI * r / (2.0 * rho_px)).cos().powi(2);
                    let ux = px.rem_euclid(width as i64) as usize;
                    let uy = py.rem_euclid(height as i64) as usize;
                    phase[[uy, ux]] += bump;
                }
            }
        }
    }

    let dip = 1.0 - spec.amplitude_floor;
    let data = phase.mapv(|p| {
        let s = if spec.max_phase_rad > 0.0 {
            (p / spec.max_phase_rad).min(1.0)
        } else {
            0.0
        };
        Complex64::from_polar(1.0 - dip * s, p)
    });
    ComplexField::new(data, pitch_um, wavelength_um)
}

fn disk_centers(n: usize, height: usize, width: usize) -> Vec<(f64, f64)> {
    let cy = height as f64 / 2.0;
    let cx = width as f64 / 2.0;
    if n <= 1 {
        return vec![(cy, cx)];
    }
    let ring = height.min(width) as f64 / 3.0;
    (0..n)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / n as f64;
            (cy + ring * theta.sin(), cx + ring * theta.cos())
        })
        .collect()
}

/// Deterministic synthetic object per the requested kind.
pub fn make_test_object(
    spec: &ObjectSpec,
    height: usize,
    width: usize,
    pitch_um: f64,
    wavelength_um: f64,
) -> Result<ComplexField> {
    match spec {
        ObjectSpec::LinePairs { linewidth_um } => {
            if !(*linewidth_um > 0.0) {
                return Err(Error::InvalidArgument("linewidth must be positive".into()));
            }
            let lw_px = linewidth_um / pitch_um;
            let data = Array2::from_shape_fn((height, width), |(_, x)| {
                let on = ((x as f64 / lw_px).floor() as i64).rem_euclid(2) == 0;
                Complex64::new(if on { 1.0 } else { 0.0 }, 0.0)
            });
            ComplexField::new(data, pitch_um, wavelength_um)
        }
        ObjectSpec::PhaseDisks {
            disk_phase_rad,
            disk_radius_um,
            n_disks,
        } => {
            if disk_phase_rad.abs() > PI {
                return Err(Error::InvalidArgument(
                    "disk phase must lie in (-pi, pi]".into(),
                ));
            }
            if !(*disk_radius_um > 0.0) {
                return Err(Error::InvalidArgument("disk radius must be positive".into()));
            }
            let r_px = disk_radius_um / pitch_um;
            let centers = disk_centers(*n_disks, height, width);
            let data = Array2::from_shape_fn((height, width), |(y, x)| {
                let inside = centers.iter().any(|(cy, cx)| {
                    (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) < r_px * r_px
                });
                if inside {
                    Complex64::from_polar(1.0, *disk_phase_rad)
                } else {
                    Complex64::new(1.0, 0.0)
                }
            });
            ComplexField::new(data, pitch_um, wavelength_um)
        }
        ObjectSpec::SiemensStar { n_spokes, radius_um } => {
            if *n_spokes < 2 {
                return Err(Error::InvalidArgument("need at least 2 spokes".into()));
            }
            let r_px = radius_um / pitch_um;
            let cy = height as f64 / 2.0;
            let cx = width as f64 / 2.0;
            let data = Array2::from_shape_fn((height, width), |(y, x)| {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let inside = dx * dx + dy * dy < r_px * r_px;
                let theta = dy.atan2(dx).rem_euclid(2.0 * PI);
                let spoke = (theta * *n_spokes as f64 / (2.0 * PI)).floor() as i64 % 2 == 0;
                let amp = if inside && spoke { 0.0 } else { 1.0 };
                Complex64::new(amp, 0.0)
            });
            ComplexField::new(data, pitch_um, wavelength_um)
        }
        ObjectSpec::TwoLayer {
            layer_separation_um,
            feature_radius_um,
            amplitude_dip,
        } => {
            if !(*layer_separation_um > 0.0) {
                return Err(Error::InvalidArgument(
                    "layer separation must be positive".into(),
                ));
            }
            if !(0.0..=1.0).contains(amplitude_dip) {
                return Err(Error::InvalidArgument(
                    "amplitude dip must be in [0, 1]".into(),
                ));
            }
            let r_px = feature_radius_um / pitch_um;
            let h = height as f64;
            let w = width as f64;
            // Disjoint feature sets: near layer on the left half, far layer
            // on the right half, so each stays identifiable when refocused.
            let near: Vec<(f64, f64)> = vec![
                (0.30 * h, 0.25 * w),
                (0.55 * h, 0.30 * w),
                (0.75 * h, 0.22 * w),
            ];
            let far: Vec<(f64, f64)> = vec![
                (0.28 * h, 0.72 * w),
                (0.52 * h, 0.78 * w),
                (0.72 * h, 0.70 * w),
            ];
            let layer = |centers: &[(f64, f64)]| -> Result<ComplexField> {
                let data = Array2::from_shape_fn((height, width), |(y, x)| {
                    let inside = centers.iter().any(|(cy, cx)| {
                        (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) < r_px * r_px
                    });
                    Complex64::new(if inside { 1.0 - amplitude_dip } else { 1.0 }, 0.0)
                });
                ComplexField::new(data, pitch_um, wavelength_um)
            };
            let near_layer = layer(&near)?;
            let far_layer = layer(&far)?;
            // Light crosses the far layer first, travels the separation,
            // then crosses the near layer at the exit plane.
            let propagated_far = propagate(&far_layer, *layer_separation_um)?;
            near_layer.modulate(&propagated_far)
        }
        ObjectSpec::FromFile { path } => {
            let f = ComplexField::read_cfld(path)?;
            if f.height() != height || f.width() != width {
                return Err(Error::DimensionMismatch(format!(
                    "object file is {}x{}, expected {}x{}",
                    f.height(),
                    f.width(),
                    height,
                    width
                )));
            }
            Ok(f)
        }
    }
}

/// Deterministic scan trajectory in high-resolution pixels.
///
/// Raster visits a square grid row by row; random walk takes steps of
/// magnitude in [0.7, 1.3] x `step_um` in uniformly random directions.
/// Frame 0 is always at (0, 0).
pub fn generate_trajectory(
    n_frames: usize,
    step_um: f64,
    pattern: TrajectoryPattern,
    seed: u64,
    recon_pitch_um: f64,
) -> Result<Vec<ScanPose>> {
    if n_frames < 1 {
        return Err(Error::InvalidArgument("need at least one frame".into()));
    }
    if !(step_um >= 0.0 && step_um.is_finite()) {
        return Err(Error::InvalidArgument("step must be non-negative".into()));
    }
    if !(recon_pitch_um > 0.0) {
        return Err(Error::InvalidArgument("pitch must be positive".into()));
    }
    let to_px = 1.0 / recon_pitch_um;
    match pattern {
        TrajectoryPattern::Raster => {
            let side = (n_frames as f64).sqrt().ceil() as usize;
            Ok((0..n_frames)
                .map(|i| {
                    let row = i / side;
                    let col = i % side;
                    ScanPose::new(
                        i,
                        col as f64 * step_um * to_px,
                        row as f64 * step_um * to_px,
                        1.0,
                    )
                })
                .collect())
        }
        TrajectoryPattern::RandomWalk => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut poses = Vec::with_capacity(n_frames);
            let (mut x, mut y) = (0.0, 0.0);
            poses.push(ScanPose::new(0, 0.0, 0.0, 1.0));
            for i in 1..n_frames {
                let theta: f64 = rng.random_range(0.0..2.0 * PI);
                let mag: f64 = step_um * rng.random_range(0.7..1.3);
                x += mag * theta.cos() * to_px;
                y += mag * theta.sin() * to_px;
                poses.push(ScanPose::new(i, x, y, 1.0));
            }
            Ok(poses)
        }
    }
}

fn apply_noise(image: RealImage, noise: &NoiseSpec, frame: usize) -> Result<RealImage> {
    match noise.model {
        NoiseModel::None => Ok(image),
        NoiseModel::Poisson { photons_per_unit } => {
            let mut rng = frame_rng(noise.rng_seed, frame);
            let data = image.data.mapv(|v| {
                let lambda = v * photons_per_unit;
                if lambda <= 0.0 {
                    0.0
                } else {
                    Poisson::new(lambda).expect("lambda > 0").sample(&mut rng)
                        / photons_per_unit
                }
            });
            RealImage::new(data, image.pitch_um)
        }
        NoiseModel::Gaussian { sigma } => {
            if sigma == 0.0 {
                return Ok(image);
            }
            let mut rng = frame_rng(noise.rng_seed, frame);
            let normal = Normal::new(0.0, sigma).expect("sigma >= 0");
            let data = image
                .data
                .mapv(|v| (v + normal.sample(&mut rng)).max(0.0));
            RealImage::new(data, image.pitch_um)
        }
    }
}

/// Synthesize one measurement frame per pose through the forward model.
///
/// Shifting the diffuser to pose (+x, +y) in the lab maps to a field shift
/// of (-x, -y) in object coordinates; this convention is shared with the
/// trajectory estimator and the reconstruction engine.
pub fn simulate_dataset(
    object: &ComplexField,
    diffuser: &ComplexField,
    geometry: &Geometry,
    poses: &[ScanPose],
    noise: &NoiseSpec,
) -> Result<Vec<Measurement>> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("pose list is empty".into()));
    }
    noise.validate()?;
    if object.data.dim() != diffuser.data.dim() {
        return Err(Error::DimensionMismatch(
            "object and diffuser grids differ".into(),
        ));
    }
    let m = geometry.upsample_m;
    if object.height() % m != 0 || object.width() % m != 0 {
        return Err(Error::DimensionMismatch(format!(
            "grid {}x{} not divisible by M={}",
            object.height(),
            object.width(),
            m
        )));
    }
    let rel = (object.pitch_um - geometry.recon_pitch_um()).abs() / geometry.recon_pitch_um();
    if rel > 1e-9 {
        return Err(Error::InvalidArgument(
            "object pitch does not match the reconstruction pitch of the geometry".into(),
        ));
    }

    // The synthetic forward model is the exact operator of the periodic
    // grid, the same one the reconstruction engine inverts.
    let kernel_d1 = PropagationKernel::without_band_limit(
        object.height(),
        object.width(),
        object.pitch_um,
        object.wavelength_um,
        geometry.d1_um,
    )?;
    let object_at_diffuser = kernel_d1.apply(object)?;
    let kernel_d2 = PropagationKernel::without_band_limit(
        object.height(),
        object.width(),
        object.pitch_um,
        object.wavelength_um,
        geometry.d2_um,
    )?;

    poses
        .par_iter()
        .map(|pose| {
            let shifted = diffuser.subpixel_shift(-pose.x_px, -pose.y_px)?;
            let modulated = object_at_diffuser.modulate(&shifted)?;
            let at_sensor = kernel_d2.apply(&modulated)?;
            let binned = at_sensor.intensity().bin_intensity(m)?;
            let image = apply_noise(binned, noise, pose.frame_index)?;
            Ok(Measurement {
                frame_index: pose.frame_index,
                image,
            })
        })
        .collect()
}

/// Grid size of the high-resolution simulation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSize {
    pub height: usize,
    pub width: usize,
}

/// Geometry as written in configs and manifests (wavelength in nm).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub wavelength_nm: f64,
    pub sensor_pitch_um: f64,
    pub d1_um: f64,
    pub d2_um: f64,
    pub upsample_m: usize,
}

impl GeometryConfig {
    pub fn to_geometry(&self) -> Result<Geometry> {
        Geometry::new(
            self.wavelength_nm * 1e-3,
            self.sensor_pitch_um,
            self.d1_um,
            self.d2_um,
            self.upsample_m,
        )
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub pattern: TrajectoryPattern,
    pub n_frames: usize,
    pub step_um: f64,
    #[serde(default)]
    pub seed: u64,
}

/// One simulation run as described by a config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub grid: GridSize,
    pub geometry: GeometryConfig,
    pub object: ObjectSpec,
    pub diffuser: DiffuserSpec,
    pub trajectory: TrajectoryConfig,
    #[serde(default)]
    pub noise: NoiseSpec,
}

/// Everything produced by one simulation run, ground truth included.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub geometry: Geometry,
    pub object: ComplexField,
    pub diffuser: ComplexField,
    pub poses: Vec<ScanPose>,
    pub measurements: Vec<Measurement>,
}

pub fn run_simulation(cfg: &SimulationConfig) -> Result<SimulationOutput> {
    let geometry = cfg.geometry.to_geometry()?;
    let pitch = geometry.recon_pitch_um();
    let object = make_test_object(
        &cfg.object,
        cfg.grid.height,
        cfg.grid.width,
        pitch,
        geometry.wavelength_um,
    )?;
    let diffuser = make_diffuser(
        &cfg.diffuser,
        cfg.grid.height,
        cfg.grid.width,
        pitch,
        geometry.wavelength_um,
    )?;
    let poses = generate_trajectory(
        cfg.trajectory.n_frames,
        cfg.trajectory.step_um,
        cfg.trajectory.pattern,
        cfg.trajectory.seed,
        pitch,
    )?;
    let measurements = simulate_dataset(&object, &diffuser, &geometry, &poses, &cfg.noise)?;
    Ok(SimulationOutput {
        geometry,
        object,
        diffuser,
        poses,
        measurements,
    })
}
