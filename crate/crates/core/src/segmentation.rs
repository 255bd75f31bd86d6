//! Automatic cell segmentation on quantitative phase maps.
//!
//! Four stages: histogram-based binarization, seed extraction from local
//! maxima of the smoothed phase, marker-controlled watershed on the negated
//! phase, and a refinement pass that re-segments regions much larger than
//! the average cell after a per-region contrast stretch.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the foreground threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ThresholdMethod {
    /// Otsu's between-class-variance maximization on a 256-bin histogram.
    Otsu,
    /// A fixed phase threshold in radians.
    Fixed { value_rad: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentationParams {
    pub threshold_method: ThresholdMethod,
    /// Seeds closer than this (in pixels) are merged into the stronger one.
    pub min_seed_separation_px: f64,
    /// Gaussian smoothing applied before maxima detection.
    pub smoothing_sigma_px: f64,
    /// Regions at least this many times the mean area get re-segmented.
    pub oversize_factor: f64,
    pub max_refine_rounds: usize,
    /// Gain of the per-region percentile stretch used during refinement.
    pub contrast_gain: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            threshold_method: ThresholdMethod::Otsu,
            min_seed_separation_px: 3.0,
            smoothing_sigma_px: 1.0,
            oversize_factor: 2.0,
            max_refine_rounds: 3,
            contrast_gain: 2.0,
        }
    }
}

impl SegmentationParams {
    fn validate(&self) -> Result<()> {
        if !(self.oversize_factor > 1.0) {
            return Err(Error::InvalidArgument(
                "oversize factor must exceed 1".into(),
            ));
        }
        if !(self.min_seed_separation_px >= 1.0) {
            return Err(Error::InvalidArgument(
                "min seed separation must be >= 1 px".into(),
            ));
        }
        if !(self.smoothing_sigma_px >= 0.0) {
            return Err(Error::InvalidArgument(
                "smoothing sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Area and centroid of one labeled region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionStats {
    pub label: u32,
    pub area_px: usize,
    /// (y, x) centroid in pixels.
    pub centroid: (f64, f64),
}

/// Integer-labeled segmentation: 0 is background, labels run 1..=n_cells.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub labels: Array2<u32>,
    pub n_cells: usize,
    pub pitch_um: f64,
    pub regions: Vec<RegionStats>,
}

impl LabelMap {
    fn from_labels(labels: Array2<u32>, pitch_um: f64) -> Self {
        let n_cells = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut areas = vec![0usize; n_cells + 1];
        let mut cy = vec![0.0f64; n_cells + 1];
        let mut cx = vec![0.0f64; n_cells + 1];
        for ((y, x), &l) in labels.indexed_iter() {
            let l = l as usize;
            areas[l] += 1;
            cy[l] += y as f64;
            cx[l] += x as f64;
        }
        let regions = (1..=n_cells)
            .map(|l| RegionStats {
                label: l as u32,
                area_px: areas[l],
                centroid: (
                    cy[l] / areas[l].max(1) as f64,
                    cx[l] / areas[l].max(1) as f64,
                ),
            })
            .collect();
        Self {
            labels,
            n_cells,
            pitch_um,
            regions,
        }
    }
}

/// Aggregate statistics of a label map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub n_cells: usize,
    pub total_foreground_px: usize,
    pub mean_area_px: f64,
    /// (bin upper edge in px, count) pairs over region areas.
    pub area_histogram: Vec<(f64, usize)>,
    pub density_per_mm2: f64,
}

fn gaussian_smooth(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return map.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let (h, w) = map.dim();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;

    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sx = clamp(x as i64 + i as i64 - radius, w);
                acc += map[[y, sx]] * k;
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sy = clamp(y as i64 + i as i64 - radius, h);
                acc += tmp[[sy, x]] * k;
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Otsu threshold over a 256-bin histogram of the map.
fn otsu_threshold(map: &Array2<f64>) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi - lo > 1e-12) {
        return Err(Error::DegenerateInput(
            "constant image: no threshold exists".into(),
        ));
    }
    const BINS: usize = 256;
    let scale = BINS as f64 / (hi - lo);
    let mut hist = [0usize; BINS];
    for &v in map.iter() {
        let b = (((v - lo) * scale) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = map.len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum::<f64>()
        / total;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best_var = -1.0;
    let mut best_bin = 0;
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64 / total;
        sum0 += i as f64 * c as f64 / total;
        if w0 <= 0.0 || w0 >= 1.0 {
            continue;
        }
        let w1 = 1.0 - w0;
        let mu0 = sum0 / w0;
        let mu1 = (total_mean - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best_var {
            best_var = between;
            best_bin = i;
        }
    }
    Ok(lo + (best_bin as f64 + 0.5) / scale)
}

/// Foreground mask: pixels whose phase exceeds the threshold inferred from
/// the histogram (or given explicitly).
pub fn binarize_phase(
    phase: &Array2<f64>,
    params: &SegmentationParams,
) -> Result<Array2<bool>> {
    if phase.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("phase map has non-finite values".into()));
    }
    let threshold = match params.threshold_method {
        ThresholdMethod::Otsu => otsu_threshold(phase)?,
        ThresholdMethod::Fixed { value_rad } => value_rad,
    };
    Ok(phase.mapv(|v| v > threshold))
}

const NEIGHBORS8: [(i64, i64); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

const NEIGHBORS4: [(i64, i64); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

/// Seed points: one per local maximum of the smoothed phase inside the
/// mask. Equal-valued plateaus yield a single seed at the plateau pixel
/// nearest its centroid; maxima closer than the configured separation are
/// merged into the stronger one.
pub fn extract_seeds(
    phase: &Array2<f64>,
    mask: &Array2<bool>,
    params: &SegmentationParams,
) -> Result<Vec<(usize, usize)>> {
    params.validate()?;
    if phase.dim() != mask.dim() {
        return Err(Error::DimensionMismatch(
            "phase and mask differ in size".into(),
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Ok(Vec::new());
    }
    let smoothed = gaussian_smooth(phase, params.smoothing_sigma_px);
    let (h, w) = smoothed.dim();
    let mut visited = Array2::from_elem((h, w), false);
    let mut candidates: Vec<(f64, (usize, usize))> = Vec::new();

    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || visited[[y, x]] {
                continue;
            }
            // flood the equal-valued plateau containing (y, x)
            let value = smoothed[[y, x]];
            let mut plateau = vec![(y, x)];
            let mut stack = vec![(y, x)];
            visited[[y, x]] = true;
            let mut is_max = true;
            while let Some((py, px)) = stack.pop() {
                for (dy, dx) in NEIGHBORS8 {
                    let ny = py as i64 + dy;
                    let nx = px as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if !mask[[ny, nx]] {
                        continue;
                    }
                    let nv = smoothed[[ny, nx]];
                    if nv > value {
                        is_max = false;
                    } else if nv == value && !visited[[ny, nx]] {
                        visited[[ny, nx]] = true;
                        plateau.push((ny, nx));
                        stack.push((ny, nx));
                    }
                }
            }
            if is_max {
                let cy =
                    plateau.iter().map(|p| p.0 as f64).sum::<f64>() / plateau.len() as f64;
                let cx =
                    plateau.iter().map(|p| p.1 as f64).sum::<f64>() / plateau.len() as f64;
                let seed = plateau
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.0 as f64 - cy).powi(2) + (a.1 as f64 - cx).powi(2);
                        let db = (b.0 as f64 - cy).powi(2) + (b.1 as f64 - cx).powi(2);
                        da.total_cmp(&db).then(a.cmp(b))
                    })
                    .copied()
                    .expect("plateau is non-empty");
                candidates.push((value, seed));
            }
        }
    }

    // merge maxima closer than the separation, keeping the stronger
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let min_sep_sq = params.min_seed_separation_px * params.min_seed_separation_px;
    let mut seeds: Vec<(usize, usize)> = Vec::new();
    for (_, (y, x)) in candidates {
        let far_enough = seeds.iter().all(|&(sy, sx)| {
            let d2 = (sy as f64 - y as f64).powi(2) + (sx as f64 - x as f64).powi(2);
            d2 >= min_sep_sq
        });
        if far_enough {
            seeds.push((y, x));
        }
    }
    Ok(seeds)
}

#[derive(PartialEq)]
struct FloodEntry {
    altitude: f64,
    seq: u64,
    y: usize,
    x: usize,
    label: u32,
}

impl Eq for FloodEntry {}

impl PartialOrd for FloodEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FloodEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.altitude
            .total_cmp(&other.altitude)
            .then(self.seq.cmp(&other.seq))
    }
}

/// Marker-controlled watershed of the negated phase restricted to the mask:
/// each masked pixel joins the basin of the seed that reaches it first when
/// flooding from high phase downwards. Regions are grown 4-connected.
///
/// Masked pixels in components containing no seed stay background.
pub fn watershed_segment(
    phase: &Array2<f64>,
    seeds: &[(usize, usize)],
    mask: &Array2<bool>,
    pitch_um: f64,
) -> Result<LabelMap> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    if phase.dim() != mask.dim() {
        return Err(Error::DimensionMismatch(
            "phase and mask differ in size".into(),
        ));
    }
    let (h, w) = phase.dim();
    for &(y, x) in seeds {
        if y >= h || x >= w || !mask[[y, x]] {
            return Err(Error::InvalidArgument(format!(
                "seed ({y}, {x}) lies outside the mask"
            )));
        }
    }

    let mut labels = Array2::<u32>::zeros((h, w));
    let mut heap: BinaryHeap<Reverse<FloodEntry>> = BinaryHeap::new();
    let mut seq = 0u64;
    for (i, &(y, x)) in seeds.iter().enumerate() {
        heap.push(Reverse(FloodEntry {
            altitude: -phase[[y, x]],
            seq,
            y,
            x,
            label: (i + 1) as u32,
        }));
        seq += 1;
    }
    while let Some(Reverse(entry)) = heap.pop() {
        if labels[[entry.y, entry.x]] != 0 {
            continue;
        }
        labels[[entry.y, entry.x]] = entry.label;
        for (dy, dx) in NEIGHBORS4 {
            let ny = entry.y as i64 + dy;
            let nx = entry.x as i64 + dx;
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                heap.push(Reverse(FloodEntry {
                    altitude: -phase[[ny, nx]],
                    seq,
                    y: ny,
                    x: nx,
                    label: entry.label,
                }));
                seq += 1;
            }
        }
    }
    let mut map = LabelMap::from_labels(labels, pitch_um);
    // labels 1..=seed count even if some basin got no pixels beyond its seed
    map.n_cells = seeds.len();
    Ok(map)
}

/// Re-segment regions at least `oversize_factor` times the mean area:
/// stretch the phase contrast inside the region, re-extract seeds, and
/// re-run the watershed there. Repeats until stable or the round limit.
pub fn refine_oversized(
    labels: &LabelMap,
    phase: &Array2<f64>,
    params: &SegmentationParams,
) -> Result<LabelMap> {
    params.validate()?;
    if labels.labels.dim() != phase.dim() {
        return Err(Error::DimensionMismatch(
            "labels and phase differ in size".into(),
        ));
    }
    let mut current = labels.clone();
    for _ in 0..params.max_refine_rounds {
        if current.n_cells == 0 {
            break;
        }
        let mean_area = current
            .regions
            .iter()
            .map(|r| r.area_px as f64)
            .sum::<f64>()
            / current.n_cells as f64;
        let oversized: Vec<u32> = current
            .regions
            .iter()
            .filter(|r| r.area_px as f64 >= params.oversize_factor * mean_area)
            .map(|r| r.label)
            .collect();
        if oversized.is_empty() {
            break;
        }
        let mut changed = false;
        let mut next_label = current.n_cells as u32;
        let mut new_labels = current.labels.clone();
        for target in oversized {
            let region_mask = current.labels.mapv(|l| l == target);
            let stretched = stretch_region(phase, &region_mask, params.contrast_gain);
            let seeds = extract_seeds(&stretched, &region_mask, params)?;
            if seeds.len() < 2 {
                continue;
            }
            let sub = watershed_segment(&stretched, &seeds, &region_mask, labels.pitch_um)?;
            for ((y, x), &l) in sub.labels.indexed_iter() {
                if l != 0 {
                    new_labels[[y, x]] = next_label + l;
                }
            }
            next_label += seeds.len() as u32;
            changed = true;
        }
        if !changed {
            break;
        }
        current = LabelMap::from_labels(compact_labels(&new_labels), labels.pitch_um);
    }
    Ok(current)
}

/// Per-region percentile stretch: map [p1, p99] linearly through the gain
/// and clamp. Pixels outside the mask keep their original value.
fn stretch_region(phase: &Array2<f64>, mask: &Array2<bool>, gain: f64) -> Array2<f64> {
    let mut values: Vec<f64> = phase
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if values.len() < 2 {
        return phase.clone();
    }
    values.sort_by(f64::total_cmp);
    let pick = |frac: f64| values[((values.len() - 1) as f64 * frac).round() as usize];
    let p1 = pick(0.01);
    let p99 = pick(0.99);
    if !(p99 - p1 > 0.0) {
        return phase.clone();
    }
    let mut out = phase.clone();
    for (v, &m) in out.iter_mut().zip(mask.iter()) {
        if m {
            *v = ((*v - p1) / (p99 - p1) * gain).clamp(0.0, 1.0);
        }
    }
    out
}

/// Renumber labels contiguously 1..=n in order of first appearance of the
/// sorted original ids.
fn compact_labels(labels: &Array2<u32>) -> Array2<u32> {
    let mut present: Vec<u32> = labels.iter().copied().filter(|&l| l != 0).collect();
    present.sort_unstable();
    present.dedup();
    let max = present.last().copied().unwrap_or(0) as usize;
    let mut remap = vec![0u32; max + 1];
    for (i, &l) in present.iter().enumerate() {
        remap[l as usize] = (i + 1) as u32;
    }
    labels.mapv(|l| remap[l as usize])
}

/// Deterministic statistics: count, areas, and density per square mm
/// derived from the pitch metadata.
pub fn count_and_report(labels: &LabelMap) -> SegmentationReport {
    let total_foreground_px = labels.regions.iter().map(|r| r.area_px).sum();
    let mean_area_px = if labels.n_cells > 0 {
        total_foreground_px as f64 / labels.n_cells as f64
    } else {
        0.0
    };
    let areas: Vec<f64> = labels.regions.iter().map(|r| r.area_px as f64).collect();
    let area_histogram = if areas.is_empty() {
        Vec::new()
    } else {
        let max = areas.iter().cloned().fold(f64::MIN, f64::max);
        let min = areas.iter().cloned().fold(f64::MAX, f64::min);
        let bins = 16usize;
        let width = ((max - min) / bins as f64).max(1.0);
        let mut hist = vec![0usize; bins];
        for &a in &areas {
            let b = (((a - min) / width) as usize).min(bins - 1);
            hist[b] += 1;
        }
        hist.into_iter()
            .enumerate()
            .map(|(i, c)| (min + (i + 1) as f64 * width, c))
            .collect()
    };
    let (h, w) = labels.labels.dim();
    let area_mm2 = (h as f64 * labels.pitch_um) * (w as f64 * labels.pitch_um) * 1e-6;
    SegmentationReport {
        n_cells: labels.n_cells,
        total_foreground_px,
        mean_area_px,
        area_histogram,
        density_per_mm2: labels.n_cells as f64 / area_mm2,
    }
}

/// The full four-stage pipeline on one phase map.
pub fn segment_phase(
    phase: &Array2<f64>,
    pitch_um: f64,
    params: &SegmentationParams,
) -> Result<(LabelMap, SegmentationReport)> {
    params.validate()?;
    let mask = binarize_phase(phase, params)?;
    let seeds = extract_seeds(phase, &mask, params)?;
    if seeds.is_empty() {
        let labels = LabelMap::from_labels(Array2::zeros(phase.dim()), pitch_um);
        let report = count_and_report(&labels);
        return Ok((labels, report));
    }
    let smoothed = gaussian_smooth(phase, params.smoothing_sigma_px);
    let initial = watershed_segment(&smoothed, &seeds, &mask, pitch_um)?;
    let refined = refine_oversized(&initial, phase, params)?;
    let report = count_and_report(&refined);
    Ok((refined, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_blob(map: &mut Array2<f64>, cy: f64, cx: f64, sigma: f64, amp: f64) {
        for ((y, x), v) in map.indexed_iter_mut() {
            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            *v += amp * (-r2 / (2.0 * sigma * sigma)).exp();
        }
    }

    fn default_params() -> SegmentationParams {
        SegmentationParams::default()
    }

    #[test]
    fn all_zero_phase_with_fixed_threshold_is_background() {
        let phase = Array2::zeros((16, 16));
        let params = SegmentationParams {
            threshold_method: ThresholdMethod::Fixed { value_rad: 0.5 },
            ..default_params()
        };
        let mask = binarize_phase(&phase, &params).unwrap();
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn constant_image_has_no_otsu_threshold() {
        let phase = Array2::from_elem((8, 8), 1.0);
        assert!(matches!(
            binarize_phase(&phase, &default_params()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn bimodal_threshold_recovers_blobs() {
        let mut phase = Array2::zeros((32, 32));
        for y in 10..20 {
            for x in 12..22 {
                phase[[y, x]] = 1.0;
            }
        }
        let mask = binarize_phase(&phase, &default_params()).unwrap();
        for ((y, x), &m) in mask.indexed_iter() {
            let expected = (10..20).contains(&y) && (12..22).contains(&x);
            assert_eq!(m, expected, "at ({y}, {x})");
        }
    }

    #[test]
    fn threshold_invariant_to_global_offset() {
        let mut phase = Array2::zeros((24, 24));
        gaussian_blob(&mut phase, 12.0, 12.0, 3.0, 1.0);
        let mask_a = binarize_phase(&phase, &default_params()).unwrap();
        let shifted = phase.mapv(|v| v + 5.0);
        let mask_b = binarize_phase(&shifted, &default_params()).unwrap();
        assert_eq!(mask_a, mask_b);
    }

    #[test]
    fn single_blob_single_seed_at_peak() {
        let mut phase = Array2::zeros((32, 32));
        gaussian_blob(&mut phase, 15.0, 17.0, 3.0, 1.0);
        let mask = binarize_phase(&phase, &default_params()).unwrap();
        let seeds = extract_seeds(&phase, &mask, &default_params()).unwrap();
        assert_eq!(seeds.len(), 1);
        let (y, x) = seeds[0];
        assert!((y as f64 - 15.0).abs() <= 1.0 && (x as f64 - 17.0).abs() <= 1.0);
    }

    #[test]
    fn two_separated_blobs_two_seeds() {
        let mut phase = Array2::zeros((48, 48));
        gaussian_blob(&mut phase, 14.0, 14.0, 3.0, 1.0);
        gaussian_blob(&mut phase, 34.0, 34.0, 3.0, 1.0);
        let mask = binarize_phase(&phase, &default_params()).unwrap();
        let seeds = extract_seeds(&phase, &mask, &default_params()).unwrap();
        assert_eq!(seeds.len(), 2);
    }

    #[test]
    fn plateau_gives_single_centroid_seed() {
        let mut phase = Array2::zeros((20, 20));
        for y in 8..13 {
            for x in 8..13 {
                phase[[y, x]] = 1.0;
            }
        }
        let params = SegmentationParams {
            threshold_method: ThresholdMethod::Fixed { value_rad: 0.5 },
            smoothing_sigma_px: 0.0,
            ..default_params()
        };
        let mask = binarize_phase(&phase, &params).unwrap();
        let seeds = extract_seeds(&phase, &mask, &params).unwrap();
        assert_eq!(seeds.len(), 1);
        assert_eq!(seeds[0], (10, 10));
    }

    #[test]
    fn empty_mask_gives_no_seeds() {
        let phase = Array2::zeros((8, 8));
        let mask = Array2::from_elem((8, 8), false);
        let seeds = extract_seeds(&phase, &mask, &default_params()).unwrap();
        assert!(seeds.is_empty());
    }

    #[test]
    fn one_seed_claims_whole_mask() {
        let mut phase = Array2::zeros((24, 24));
        gaussian_blob(&mut phase, 12.0, 12.0, 3.0, 1.0);
        let mask = binarize_phase(&phase, &default_params()).unwrap();
        let seeds = extract_seeds(&phase, &mask, &default_params()).unwrap();
        let map = watershed_segment(&phase, &seeds, &mask, 0.5).unwrap();
        assert_eq!(map.n_cells, 1);
        for (&l, &m) in map.labels.iter().zip(mask.iter()) {
            assert_eq!(l != 0, m);
        }
    }

    #[test]
    fn touching_blobs_split_near_midline() {
        let mut phase = Array2::zeros((40, 60));
        gaussian_blob(&mut phase, 20.0, 22.0, 4.0, 1.0);
        gaussian_blob(&mut phase, 20.0, 38.0, 4.0, 1.0);
        let params = SegmentationParams {
            threshold_method: ThresholdMethod::Fixed { value_rad: 0.05 },
            ..default_params()
        };
        let mask = binarize_phase(&phase, &params).unwrap();
        let seeds = extract_seeds(&phase, &mask, &params).unwrap();
        assert_eq!(seeds.len(), 2);
        let map = watershed_segment(&phase, &seeds, &mask, 0.5).unwrap();
        // boundary between the two labels should sit near x = 30
        for ((_, x), &l) in map.labels.indexed_iter() {
            if l == 0 {
                continue;
            }
            let left_label = map.labels[[20, 22]];
            if (x as f64) < 28.0 {
                assert_eq!(l, left_label, "left side mislabeled at x={x}");
            } else if (x as f64) > 32.0 {
                assert_ne!(l, left_label, "right side mislabeled at x={x}");
            }
        }
    }

    #[test]
    fn disjoint_blobs_match_connected_components() {
        let mut phase = Array2::zeros((60, 60));
        let centers = [(12.0, 12.0), (12.0, 45.0), (45.0, 12.0), (45.0, 45.0)];
        for &(cy, cx) in &centers {
            gaussian_blob(&mut phase, cy, cx, 3.0, 1.0);
        }
        let params = SegmentationParams {
            threshold_method: ThresholdMethod::Fixed { value_rad: 0.2 },
            ..default_params()
        };
        let mask = binarize_phase(&phase, &params).unwrap();
        let seeds = extract_seeds(&phase, &mask, &params).unwrap();
        assert_eq!(seeds.len(), 4);
        let map = watershed_segment(&phase, &seeds, &mask, 0.5).unwrap();
        assert_eq!(map.n_cells, 4);
        // each labeled region is exactly one connected blob
        for region in &map.regions {
            let (cy, cx) = region.centroid;
            assert!(centers
                .iter()
                .any(|&(ty, tx)| (cy - ty).abs() < 2.0 && (cx - tx).abs() < 2.0));
        }
    }

    #[test]
    fn seed_outside_mask_rejected() {
        let phase = Array2::zeros((8, 8));
        let mask = Array2::from_elem((8, 8), false);
        assert!(watershed_segment(&phase, &[(2, 2)], &mask, 0.5).is_err());
    }

    #[test]
    fn refinement_is_noop_when_sizes_are_uniform() {
        let mut phase = Array2::zeros((48, 48));
        gaussian_blob(&mut phase, 14.0, 14.0, 3.0, 1.0);
        gaussian_blob(&mut phase, 34.0, 34.0, 3.0, 1.0);
        let params = default_params();
        let mask = binarize_phase(&phase, &params).unwrap();
        let seeds = extract_seeds(&phase, &mask, &params).unwrap();
        let map = watershed_segment(&phase, &seeds, &mask, 0.5).unwrap();
        let refined = refine_oversized(&map, &phase, &params).unwrap();
        assert_eq!(refined.labels, map.labels);
    }

    #[test]
    fn merged_pair_is_split_by_refinement() {
        // Three small blobs plus one under-seeded pair of larger blobs whose
        // joint region clearly exceeds twice the mean area.
        let mut phase = Array2::zeros((80, 80));
        gaussian_blob(&mut phase, 12.0, 12.0, 2.5, 1.0);
        gaussian_blob(&mut phase, 12.0, 66.0, 2.5, 1.0);
        gaussian_blob(&mut phase, 66.0, 12.0, 2.5, 1.0);
        // merged pair: two sigma = 4 blobs 12 px apart
        gaussian_blob(&mut phase, 52.0, 46.0, 4.0, 1.0);
        gaussian_blob(&mut phase, 52.0, 58.0, 4.0, 1.0);
        let params = SegmentationParams {
            threshold_method: ThresholdMethod::Fixed { value_rad: 0.15 },
            ..default_params()
        };
        let mask = binarize_phase(&phase, &params).unwrap();
        // force the merged pair to start as one region: seed only at one peak
        let seeds = vec![(12, 12), (12, 66), (66, 12), (52, 46)];
        let map = watershed_segment(&phase, &seeds, &mask, 0.5).unwrap();
        assert_eq!(map.n_cells, 4);
        let refined = refine_oversized(&map, &phase, &params).unwrap();
        assert_eq!(refined.n_cells, 5, "merged pair should split");
        // idempotent once converged
        let again = refine_oversized(&refined, &phase, &params).unwrap();
        assert_eq!(again.n_cells, refined.n_cells);
        assert_eq!(again.labels, refined.labels);
    }

    #[test]
    fn report_counts_and_density() {
        let mut labels = Array2::<u32>::zeros((10, 10));
        // two 2x2 squares
        for (y, x) in [(1usize, 1usize), (1, 2), (2, 1), (2, 2)] {
            labels[[y, x]] = 1;
        }
        for (y, x) in [(6usize, 6usize), (6, 7), (7, 6), (7, 7)] {
            labels[[y, x]] = 2;
        }
        let map = LabelMap::from_labels(labels, 100.0);
        let report = count_and_report(&map);
        assert_eq!(report.n_cells, 2);
        assert_eq!(report.total_foreground_px, 8);
        assert!((report.mean_area_px - 4.0).abs() < 1e-12);
        // image is 1 mm x 1 mm
        assert!((report.density_per_mm2 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn empty_labels_report_zero_cells() {
        let map = LabelMap::from_labels(Array2::zeros((4, 4)), 1.0);
        let report = count_and_report(&map);
        assert_eq!(report.n_cells, 0);
    }

    #[test]
    fn labels_partition_foreground() {
        let mut phase = Array2::zeros((40, 40));
        gaussian_blob(&mut phase, 12.0, 12.0, 3.0, 1.2);
        gaussian_blob(&mut phase, 28.0, 28.0, 3.0, 1.0);
        let (map, report) = segment_phase(&phase, 0.5, &default_params()).unwrap();
        assert_eq!(map.n_cells, 2);
        assert_eq!(
            report.total_foreground_px,
            map.labels.iter().filter(|&&l| l != 0).count()
        );
    }
}
