//! The on-disk dataset format and the other file interfaces: a versioned
//! manifest plus 16-bit grayscale PNG frames, CFLD complex fields, poses and
//! metric JSON files, and PNG previews for amplitude, phase, and labels.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField, Geometry, Measurement, RealImage};
use crate::refocus::FocusScan;
use crate::registration::ScanPose;
use crate::segmentation::LabelMap;
use crate::simulator::NoiseSpec;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Optional pointers to ground-truth files stored with a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct GroundTruthRefs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_cfld: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffuser_cfld: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses_json: Option<String>,
}

/// manifest.json schema (version 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub wavelength_nm: f64,
    pub sensor_pitch_um: f64,
    pub d1_um: f64,
    pub d2_um: f64,
    pub upsample_m: usize,
    pub n_frames: usize,
    /// Frame file names relative to the dataset directory, in scan order.
    pub frames: Vec<String>,
    /// PNG counts per intensity unit: intensity = pixel_value / scale.
    pub intensity_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthRefs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(
            self.wavelength_nm * 1e-3,
            self.sensor_pitch_um,
            self.d1_um,
            self.d2_um,
            self.upsample_m,
        )
    }
}

/// Ground-truth data to store alongside a synthetic dataset.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthData<'a> {
    pub object: Option<&'a ComplexField>,
    pub diffuser: Option<&'a ComplexField>,
    pub poses: Option<&'a [ScanPose]>,
}

fn write_gray16<P: AsRef<Path>>(path: P, data: &Array2<u16>) -> Result<()> {
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        data.ncols() as u32,
        data.nrows() as u32,
    );
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header()?;
    let mut bytes = Vec::with_capacity(data.len() * 2);
    for &v in data.iter() {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    writer.write_image_data(&bytes)?;
    Ok(())
}

fn write_gray8<P: AsRef<Path>>(path: P, data: &Array2<u8>) -> Result<()> {
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        data.ncols() as u32,
        data.nrows() as u32,
    );
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    let bytes: Vec<u8> = data.iter().copied().collect();
    writer.write_image_data(&bytes)?;
    Ok(())
}

fn write_rgb8<P: AsRef<Path>>(path: P, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(rgb)?;
    Ok(())
}

/// Decode a grayscale PNG into raw counts. 16-bit frames are the native
/// format; 8-bit frames are tolerated for externally captured data.
fn read_gray_counts<P: AsRef<Path>>(path: P) -> Result<Array2<f64>> {
    let decoder = png::Decoder::new(BufReader::new(File::open(&path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Dataset(format!(
            "{}: expected a grayscale frame, got {:?}",
            path.as_ref().display(),
            info.color_type
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.bit_depth {
        png::BitDepth::Sixteen => {
            let mut out = Array2::zeros((h, w));
            for (i, px) in buf[..h * w * 2].chunks_exact(2).enumerate() {
                out[[i / w, i % w]] = u16::from_be_bytes([px[0], px[1]]) as f64;
            }
            out
        }
        png::BitDepth::Eight => {
            let mut out = Array2::zeros((h, w));
            for (i, &px) in buf[..h * w].iter().enumerate() {
                out[[i / w, i % w]] = px as f64;
            }
            out
        }
        other => {
            return Err(Error::Dataset(format!(
                "{}: unsupported bit depth {other:?}",
                path.as_ref().display()
            )))
        }
    };
    Ok(data)
}

/// Write a dataset directory: manifest.json, one 16-bit grayscale PNG per
/// frame, and optional ground-truth files. Quantization to 16 bits uses a
/// single scale across the whole dataset, recorded in the manifest.
pub fn save_dataset<P: AsRef<Path>>(
    dir: P,
    geometry: &Geometry,
    measurements: &[Measurement],
    ground_truth: Option<GroundTruthData>,
    noise: Option<&NoiseSpec>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    if measurements.is_empty() {
        return Err(Error::InvalidArgument("no frames to save".into()));
    }
    fs::create_dir_all(dir)?;

    let max = measurements
        .iter()
        .map(|m| m.image.max())
        .fold(0.0f64, f64::max);
    let intensity_scale = if max > 0.0 { 65535.0 / max } else { 1.0 };

    let mut frames = Vec::with_capacity(measurements.len());
    for m in measurements {
        let name = format!("frame_{:04}.png", m.frame_index);
        let quantized = m
            .image
            .data
            .mapv(|v| (v * intensity_scale).round().clamp(0.0, 65535.0) as u16);
        write_gray16(dir.join(&name), &quantized)?;
        frames.push(name);
    }

    let ground_truth_refs = match ground_truth {
        Some(gt) if gt.object.is_some() || gt.diffuser.is_some() || gt.poses.is_some() => {
            let gt_dir = dir.join("ground_truth");
            fs::create_dir_all(&gt_dir)?;
            let mut refs = GroundTruthRefs::default();
            if let Some(object) = gt.object {
                object.write_cfld(gt_dir.join("object.cfld"))?;
                refs.object_cfld = Some("ground_truth/object.cfld".into());
            }
            if let Some(diffuser) = gt.diffuser {
                diffuser.write_cfld(gt_dir.join("diffuser.cfld"))?;
                refs.diffuser_cfld = Some("ground_truth/diffuser.cfld".into());
            }
            if let Some(poses) = gt.poses {
                save_poses(gt_dir.join("poses.json"), poses)?;
                refs.poses_json = Some("ground_truth/poses.json".into());
            }
            Some(refs)
        }
        _ => None,
    };

    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        wavelength_nm: geometry.wavelength_um * 1e3,
        sensor_pitch_um: geometry.sensor_pitch_um,
        d1_um: geometry.d1_um,
        d2_um: geometry.d2_um,
        upsample_m: geometry.upsample_m,
        n_frames: measurements.len(),
        frames,
        intensity_scale,
        ground_truth: ground_truth_refs,
        noise: noise.copied(),
        provenance: None,
    };
    let file = File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)?;
    Ok(manifest)
}

/// Load a dataset directory: parse the manifest, decode every frame, and
/// center-crop to dimensions divisible by M if needed (with a warning).
pub fn load_dataset<P: AsRef<Path>>(dir: P) -> Result<(DatasetManifest, Vec<Measurement>)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let file = File::open(&manifest_path).map_err(|e| {
        Error::Dataset(format!("{}: {e}", manifest_path.display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(file))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    if manifest.n_frames != manifest.frames.len() {
        return Err(Error::Dataset(format!(
            "manifest lists n_frames = {} but {} frame files",
            manifest.n_frames,
            manifest.frames.len()
        )));
    }
    if manifest.frames.is_empty() {
        return Err(Error::Dataset("dataset has no frames".into()));
    }
    let geometry = manifest.geometry()?;
    let m = geometry.upsample_m;
    let sensor_pitch = geometry.sensor_pitch_um;

    let mut measurements = Vec::with_capacity(manifest.frames.len());
    let mut dims: Option<(usize, usize)> = None;
    for (index, name) in manifest.frames.iter().enumerate() {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::Dataset(format!("missing frame {}", path.display())));
        }
        let mut counts = read_gray_counts(&path)?;
        match dims {
            None => dims = Some(counts.dim()),
            Some(d) if d != counts.dim() => {
                return Err(Error::Dataset(format!(
                    "frame {name} is {:?}, expected {:?}",
                    counts.dim(),
                    d
                )))
            }
            _ => {}
        }
        let (h, w) = counts.dim();
        let (ch, cw) = (h - h % m, w - w % m);
        if (ch, cw) != (h, w) {
            if index == 0 {
                eprintln!(
                    "warning: cropping {h}x{w} frames to {ch}x{cw} for M = {m} divisibility"
                );
            }
            let oy = (h - ch) / 2;
            let ox = (w - cw) / 2;
            counts = counts
                .slice(ndarray::s![oy..oy + ch, ox..ox + cw])
                .to_owned();
        }
        let data = counts.mapv(|v| v / manifest.intensity_scale);
        measurements.push(Measurement {
            frame_index: index,
            image: RealImage::new(data, sensor_pitch)?,
        });
    }
    Ok((manifest, measurements))
}

/// Resolve a ground-truth reference relative to the dataset directory.
pub fn ground_truth_path(dir: &Path, reference: &str) -> PathBuf {
    dir.join(reference)
}

pub fn save_poses<P: AsRef<Path>>(path: P, poses: &[ScanPose]) -> Result<()> {
    let file = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), poses)?;
    Ok(())
}

pub fn load_poses<P: AsRef<Path>>(path: P) -> Result<Vec<ScanPose>> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorHistory {
    pub error_history: Vec<f64>,
}

pub fn save_error_history<P: AsRef<Path>>(path: P, history: &[f64]) -> Result<()> {
    let file = File::create(path)?;
    serde_json::to_writer_pretty(
        BufWriter::new(file),
        &ErrorHistory {
            error_history: history.to_vec(),
        },
    )?;
    Ok(())
}

pub fn load_error_history<P: AsRef<Path>>(path: P) -> Result<Vec<f64>> {
    let file = File::open(path)?;
    let h: ErrorHistory = serde_json::from_reader(BufReader::new(file))?;
    Ok(h.error_history)
}

pub fn save_focus_scan<P: AsRef<Path>>(path: P, scan: &FocusScan) -> Result<()> {
    let file = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), scan)?;
    Ok(())
}

/// Min-max scale recorded next to every amplitude preview.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreviewScale {
    pub min: f64,
    pub max: f64,
}

/// 8-bit grayscale amplitude preview, min-max normalized; the scale goes to
/// `<path>.scale.json`.
pub fn write_amplitude_preview<P: AsRef<Path>>(path: P, field: &ComplexField) -> Result<()> {
    let amp = field.amplitude();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in amp.data.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes = amp
        .data
        .mapv(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8);
    write_gray8(&path, &bytes)?;
    let scale_path = path.as_ref().with_extension("scale.json");
    let file = File::create(scale_path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), &PreviewScale { min: lo, max: hi })?;
    Ok(())
}

/// Phase preview with a cyclic colormap: hue runs once around the color
/// wheel as the phase runs over (-pi, pi], so wrapped values stay adjacent.
pub fn write_phase_preview<P: AsRef<Path>>(path: P, field: &ComplexField) -> Result<()> {
    let (h, w) = field.data.dim();
    let mut rgb = Vec::with_capacity(h * w * 3);
    for z in field.data.iter() {
        let theta = z.arg();
        for k in 0..3 {
            let offset = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
            let v = 0.5 + 0.5 * (theta + offset).cos();
            rgb.push((v * 255.0).round() as u8);
        }
    }
    write_rgb8(path, &rgb, w, h)
}

/// 16-bit label image; fails if the label count exceeds the PNG range.
pub fn write_label_png<P: AsRef<Path>>(path: P, labels: &LabelMap) -> Result<()> {
    if labels.n_cells > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "{} labels exceed the 16-bit PNG range",
            labels.n_cells
        )));
    }
    let data = labels.labels.mapv(|l| l as u16);
    write_gray16(path, &data)
}

/// Metrics aggregated by the report stage. Fields stay empty when the
/// matching ground truth is unavailable.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_rmse_rad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude_rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_rmse_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_max_error_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_data_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_history: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_count_error_frac: Option<f64>,
}

pub fn save_report<P: AsRef<Path>>(path: P, report: &RunReport) -> Result<()> {
    let file = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), report)?;
    Ok(())
}

/// Simple line plot of the per-iteration data error, drawn directly into an
/// RGB PNG (white background, black axes, blue polyline).
pub fn write_error_history_plot<P: AsRef<Path>>(path: P, history: &[f64]) -> Result<()> {
    let (w, h) = (480usize, 320usize);
    let margin = 40usize;
    let mut rgb = vec![255u8; w * h * 3];
    let mut put = |x: usize, y: usize, color: [u8; 3]| {
        if x < w && y < h {
            let i = (y * w + x) * 3;
            rgb[i..i + 3].copy_from_slice(&color);
        }
    };
    for x in margin..w - margin {
        put(x, h - margin, [0, 0, 0]);
    }
    for y in margin..h - margin {
        put(margin, y, [0, 0, 0]);
    }
    if !history.is_empty() {
        let max = history.iter().cloned().fold(f64::MIN, f64::max).max(1e-300);
        let plot_w = (w - 2 * margin) as f64;
        let plot_h = (h - 2 * margin) as f64;
        let denom = (history.len().max(2) - 1) as f64;
        let point = |i: usize| -> (f64, f64) {
            let x = margin as f64 + plot_w * i as f64 / denom;
            let y = (h - margin) as f64 - plot_h * (history[i] / max);
            (x, y)
        };
        for i in 0..history.len().saturating_sub(1) {
            let (x0, y0) = point(i);
            let (x1, y1) = point(i + 1);
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                put(
                    (x0 + t * (x1 - x0)).round() as usize,
                    (y0 + t * (y1 - y0)).round() as usize,
                    [30, 60, 200],
                );
            }
        }
        for i in 0..history.len() {
            let (x, y) = point(i);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    put(
                        (x as i64 + dx).max(0) as usize,
                        (y as i64 + dy).max(0) as usize,
                        [200, 30, 30],
                    );
                }
            }
        }
    }
    write_rgb8(path, &rgb, w, h)
}
