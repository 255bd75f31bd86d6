//! Core grid containers: complex fields, intensity images, and the
//! acquisition geometry, plus the grid arithmetic (sub-pixel shift,
//! intensity binning, nearest-neighbor up-sampling) used everywhere else.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;

/// Magic bytes of the CFLD complex-field binary format.
pub const CFLD_MAGIC: [u8; 4] = *b"CFLD";
/// Current CFLD format version.
pub const CFLD_VERSION: u32 = 1;

/// A complex optical field sampled on a uniform grid.
///
/// Rows index y, columns index x. Values are dimensionless amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub data: Array2<Complex64>,
    /// Sampling pitch in micrometers.
    pub pitch_um: f64,
    /// Illumination wavelength in micrometers.
    pub wavelength_um: f64,
}

/// A non-negative real-valued image (intensity in arbitrary units).
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub data: Array2<f64>,
    pub pitch_um: f64,
}

/// One captured low-resolution intensity frame plus its index in the scan.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub frame_index: usize,
    pub image: RealImage,
}

/// Acquisition geometry: wavelength, sensor sampling, propagation distances,
/// and the reconstruction up-sampling factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub wavelength_um: f64,
    pub sensor_pitch_um: f64,
    /// Object-to-diffuser distance in micrometers (may be zero).
    pub d1_um: f64,
    /// Diffuser-to-sensor distance in micrometers (zero collapses the
    /// forward model to plain binned intensity, useful for degenerate tests).
    pub d2_um: f64,
    /// Reconstruction grid refinement factor relative to the sensor grid.
    pub upsample_m: usize,
}

impl Geometry {
    pub fn new(
        wavelength_um: f64,
        sensor_pitch_um: f64,
        d1_um: f64,
        d2_um: f64,
        upsample_m: usize,
    ) -> Result<Self> {
        if !(wavelength_um > 0.0 && wavelength_um.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "wavelength must be positive, got {wavelength_um}"
            )));
        }
        if !(sensor_pitch_um > 0.0 && sensor_pitch_um.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sensor pitch must be positive, got {sensor_pitch_um}"
            )));
        }
        if !(d1_um >= 0.0 && d1_um.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "d1 must be non-negative, got {d1_um}"
            )));
        }
        if !(d2_um >= 0.0 && d2_um.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "d2 must be non-negative, got {d2_um}"
            )));
        }
        if upsample_m < 1 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        Ok(Self {
            wavelength_um,
            sensor_pitch_um,
            d1_um,
            d2_um,
            upsample_m,
        })
    }

    /// Pitch of the reconstruction grid: sensor pitch divided by M.
    pub fn recon_pitch_um(&self) -> f64 {
        self.sensor_pitch_um / self.upsample_m as f64
    }
}

fn validate_grid(height: usize, width: usize, pitch_um: f64) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("grid dimensions must be >= 1".into()));
    }
    if !(pitch_um > 0.0 && pitch_um.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "pitch must be positive, got {pitch_um}"
        )));
    }
    Ok(())
}

impl ComplexField {
    pub fn new(data: Array2<Complex64>, pitch_um: f64, wavelength_um: f64) -> Result<Self> {
        validate_grid(data.nrows(), data.ncols(), pitch_um)?;
        if !(wavelength_um > 0.0 && wavelength_um.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "wavelength must be positive, got {wavelength_um}"
            )));
        }
        let field = Self {
            data,
            pitch_um,
            wavelength_um,
        };
        if !field.is_finite() {
            return Err(Error::NumericFailure(
                "complex field contains non-finite values".into(),
            ));
        }
        Ok(field)
    }

    /// All-ones field (free space / empty modulator).
    pub fn ones(height: usize, width: usize, pitch_um: f64, wavelength_um: f64) -> Result<Self> {
        Self::new(
            Array2::from_elem((height, width), Complex64::new(1.0, 0.0)),
            pitch_um,
            wavelength_um,
        )
    }

    pub fn zeros(height: usize, width: usize, pitch_um: f64, wavelength_um: f64) -> Result<Self> {
        Self::new(
            Array2::zeros((height, width)),
            pitch_um,
            wavelength_um,
        )
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Total energy: sum of |z|^2 over the grid.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Pointwise product with another field on the same grid.
    pub fn modulate(&self, other: &ComplexField) -> Result<ComplexField> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.height(),
                self.width(),
                other.height(),
                other.width()
            )));
        }
        Ok(ComplexField {
            data: &self.data * &other.data,
            pitch_um: self.pitch_um,
            wavelength_um: self.wavelength_um,
        })
    }

    pub fn amplitude(&self) -> RealImage {
        RealImage {
            data: self.data.mapv(|z| z.norm()),
            pitch_um: self.pitch_um,
        }
    }

    pub fn intensity(&self) -> RealImage {
        RealImage {
            data: self.data.mapv(|z| z.norm_sqr()),
            pitch_um: self.pitch_um,
        }
    }

    /// Phase map in (-pi, pi].
    pub fn phase(&self) -> Array2<f64> {
        self.data.mapv(|z| z.arg())
    }

    /// Translate the field by a possibly fractional number of pixels with
    /// periodic boundaries, via the Fourier shift theorem. Positive `dx_px`
    /// moves content toward +x (higher column index).
    ///
    /// Integer shifts reproduce a circular roll; all shifts preserve energy.
    pub fn subpixel_shift(&self, dx_px: f64, dy_px: f64) -> Result<ComplexField> {
        if !dx_px.is_finite() || !dy_px.is_finite() {
            return Err(Error::InvalidArgument(
                "shift amounts must be finite".into(),
            ));
        }
        if dx_px == 0.0 && dy_px == 0.0 {
            return Ok(self.clone());
        }
        let (h, w) = self.data.dim();
        let mut spec = fft::fft2(&self.data);
        let kx = fft::freq_index(w);
        let ky = fft::freq_index(h);
        for (v, mut row) in spec.rows_mut().into_iter().enumerate() {
            let py = ky[v] * dy_px / h as f64;
            for (u, val) in row.iter_mut().enumerate() {
                let phase = -2.0 * PI * (kx[u] * dx_px / w as f64 + py);
                *val *= Complex64::from_polar(1.0, phase);
            }
        }
        ComplexField::new(fft::ifft2(&spec), self.pitch_um, self.wavelength_um)
    }

    /// Write in the CFLD binary format: 16-byte header (magic "CFLD",
    /// u32 height, u32 width, u32 format version, little-endian), then
    /// f64 pitch_um, f64 wavelength_um, then row-major (re, im) f64 pairs.
    pub fn write_cfld<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&CFLD_MAGIC)?;
        out.write_all(&(self.height() as u32).to_le_bytes())?;
        out.write_all(&(self.width() as u32).to_le_bytes())?;
        out.write_all(&CFLD_VERSION.to_le_bytes())?;
        out.write_all(&self.pitch_um.to_le_bytes())?;
        out.write_all(&self.wavelength_um.to_le_bytes())?;
        for z in self.data.iter() {
            out.write_all(&z.re.to_le_bytes())?;
            out.write_all(&z.im.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_cfld<P: AsRef<Path>>(path: P) -> Result<ComplexField> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut header = [0u8; 16];
        reader.read_exact(&mut header)?;
        if header[0..4] != CFLD_MAGIC {
            return Err(Error::Dataset("bad CFLD magic".into()));
        }
        let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let version = u32::from_le_bytes(header[12..16].try_into().unwrap());
        if version != CFLD_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported CFLD version {version}"
            )));
        }
        let mut f64buf = [0u8; 8];
        reader.read_exact(&mut f64buf)?;
        let pitch_um = f64::from_le_bytes(f64buf);
        reader.read_exact(&mut f64buf)?;
        let wavelength_um = f64::from_le_bytes(f64buf);
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Error::Dataset("CFLD dimensions overflow".into()))?;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            reader.read_exact(&mut f64buf)?;
            let re = f64::from_le_bytes(f64buf);
            reader.read_exact(&mut f64buf)?;
            let im = f64::from_le_bytes(f64buf);
            values.push(Complex64::new(re, im));
        }
        let data = Array2::from_shape_vec((height, width), values)
            .map_err(|e| Error::Dataset(format!("CFLD shape error: {e}")))?;
        ComplexField::new(data, pitch_um, wavelength_um)
    }
}

impl RealImage {
    pub fn new(data: Array2<f64>, pitch_um: f64) -> Result<Self> {
        validate_grid(data.nrows(), data.ncols(), pitch_um)?;
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "intensity values must be finite and non-negative".into(),
            ));
        }
        Ok(Self { data, pitch_um })
    }

    pub fn zeros(height: usize, width: usize, pitch_um: f64) -> Result<Self> {
        validate_grid(height, width, pitch_um)?;
        Ok(Self {
            data: Array2::zeros((height, width)),
            pitch_um,
        })
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn sum(&self) -> f64 {
        self.data.sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sum every m-by-m block into one output pixel. The output pitch is
    /// m times the input pitch. Dimensions must be divisible by m.
    pub fn bin_intensity(&self, m: usize) -> Result<RealImage> {
        if m == 0 {
            return Err(Error::InvalidArgument("bin factor must be >= 1".into()));
        }
        if m == 1 {
            return Ok(self.clone());
        }
        let (h, w) = self.data.dim();
        if h % m != 0 || w % m != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{h}x{w} image not divisible by bin factor {m}"
            )));
        }
        let (oh, ow) = (h / m, w / m);
        let mut out = Array2::zeros((oh, ow));
        for p in 0..oh {
            for q in 0..ow {
                let mut acc = 0.0;
                for i in 0..m {
                    for j in 0..m {
                        acc += self.data[[p * m + i, q * m + j]];
                    }
                }
                out[[p, q]] = acc;
            }
        }
        Ok(RealImage {
            data: out,
            pitch_um: self.pitch_um * m as f64,
        })
    }

    /// Replicate every pixel into an m-by-m block. The output pitch is the
    /// input pitch divided by m.
    pub fn upsample_nn(&self, m: usize) -> Result<RealImage> {
        if m == 0 {
            return Err(Error::InvalidArgument(
                "upsample factor must be >= 1".into(),
            ));
        }
        if m == 1 {
            return Ok(self.clone());
        }
        let (h, w) = self.data.dim();
        let mut out = Array2::zeros((h * m, w * m));
        for p in 0..h {
            for q in 0..w {
                let v = self.data[[p, q]];
                for i in 0..m {
                    for j in 0..m {
                        out[[p * m + i, q * m + j]] = v;
                    }
                }
            }
        }
        Ok(RealImage {
            data: out,
            pitch_um: self.pitch_um / m as f64,
        })
    }

    /// Per-pixel mean of a stack of equally sized images.
    pub fn mean_of(images: &[&RealImage]) -> Result<RealImage> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image list".into()))?;
        let dim = first.data.dim();
        let mut acc = Array2::<f64>::zeros(dim);
        for img in images {
            if img.data.dim() != dim {
                return Err(Error::DimensionMismatch(
                    "images in stack differ in size".into(),
                ));
            }
            acc += &img.data;
        }
        acc.mapv_inplace(|v| v / images.len() as f64);
        RealImage::new(acc, first.pitch_um)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_field(h: usize, w: usize, seed: u64) -> ComplexField {
        let mut rng = StdRng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((h, w), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        ComplexField::new(data, 0.5, 0.532).unwrap()
    }

    /// Independent oracle: circular roll by integer offsets.
    fn roll(f: &ComplexField, dx: i64, dy: i64) -> ComplexField {
        let (h, w) = f.data.dim();
        let mut out = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let ty = (y as i64 + dy).rem_euclid(h as i64) as usize;
                let tx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                out[[ty, tx]] = f.data[[y, x]];
            }
        }
        ComplexField::new(out, f.pitch_um, f.wavelength_um).unwrap()
    }

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

    #[test]
    fn zero_shift_is_identity() {
        let f = random_field(8, 6, 1);
        let shifted = f.subpixel_shift(0.0, 0.0).unwrap();
        assert_eq!(f.data, shifted.data);
    }

    #[test]
    fn integer_shift_matches_roll_oracle() {
        let f = random_field(16, 12, 2);
        let shifted = f.subpixel_shift(3.0, -2.0).unwrap();
        let rolled = roll(&f, 3, -2);
        assert!(rms_diff(&shifted, &rolled) < 1e-12);
    }

    #[test]
    fn fractional_shift_inverts() {
        let f = random_field(16, 16, 3);
        let back = f
            .subpixel_shift(0.5, 0.25)
            .unwrap()
            .subpixel_shift(-0.5, -0.25)
            .unwrap();
        assert!(rms_diff(&f, &back) < 1e-9);
    }

    #[test]
    fn shift_rejects_non_finite() {
        let f = random_field(4, 4, 4);
        assert!(f.subpixel_shift(f64::NAN, 0.0).is_err());
        assert!(f.subpixel_shift(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn bin_identity_and_small_case() {
        let img = RealImage::new(array![[1.0, 2.0], [3.0, 4.0]], 1.0).unwrap();
        assert_eq!(img.bin_intensity(1).unwrap().data, img.data);
        let binned = img.bin_intensity(2).unwrap();
        assert_eq!(binned.data, array![[10.0]]);
        assert!((binned.pitch_um - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bin_matches_block_sum_oracle() {
        let mut rng = StdRng::seed_from_u64(5);
        let data = Array2::from_shape_fn((6, 6), |_| rng.random_range(0.0..10.0));
        let img = RealImage::new(data.clone(), 1.0).unwrap();
        let binned = img.bin_intensity(3).unwrap();
        for p in 0..2 {
            for q in 0..2 {
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        acc += data[[3 * p + i, 3 * q + j]];
                    }
                }
                assert!((binned.data[[p, q]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bin_rejects_non_divisible() {
        let img = RealImage::zeros(5, 6, 1.0).unwrap();
        assert!(img.bin_intensity(2).is_err());
    }

    #[test]
    fn upsample_replicates() {
        let img = RealImage::new(array![[5.0]], 3.0).unwrap();
        let up = img.upsample_nn(3).unwrap();
        assert_eq!(up.data, Array2::from_elem((3, 3), 5.0));
        assert!((up.pitch_um - 1.0).abs() < 1e-15);
        assert_eq!(img.upsample_nn(1).unwrap().data, img.data);
    }

    #[test]
    fn geometry_recon_pitch() {
        let g = Geometry::new(0.532, 1.67, 300.0, 700.0, 3).unwrap();
        assert!((g.recon_pitch_um() - 1.67 / 3.0).abs() < 1e-15);
        assert!(Geometry::new(0.532, 1.67, -1.0, 700.0, 3).is_err());
        assert!(Geometry::new(0.532, 1.67, 0.0, -5.0, 3).is_err());
        assert!(Geometry::new(0.532, 1.67, 0.0, 700.0, 0).is_err());
    }

    #[test]
    fn cfld_round_trip() {
        let f = random_field(7, 9, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.cfld");
        f.write_cfld(&path).unwrap();
        let back = ComplexField::read_cfld(&path).unwrap();
        assert_eq!(f.data, back.data);
        assert_eq!(f.pitch_um, back.pitch_um);
        assert_eq!(f.wavelength_um, back.wavelength_um);
    }

    #[test]
    fn cfld_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.cfld");
        std::fs::write(&path, b"NOPE0000000000000000000000000000").unwrap();
        assert!(ComplexField::read_cfld(&path).is_err());
    }

    #[test]
    fn real_image_rejects_negative() {
        assert!(RealImage::new(array![[1.0, -0.1]], 1.0).is_err());
        assert!(RealImage::new(array![[f64::NAN]], 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Spectral shifts are unitary: energy is preserved for any shift.
        #[test]
        fn shift_preserves_energy(dx in -8.0f64..8.0, dy in -8.0f64..8.0, seed in 0u64..1000) {
            let f = random_field(12, 10, seed);
            let shifted = f.subpixel_shift(dx, dy).unwrap();
            let rel = (shifted.energy() - f.energy()).abs() / f.energy();
            prop_assert!(rel < 1e-10);
        }

        /// bin(upsample(x, m), m) == m^2 * x exactly.
        #[test]
        fn bin_of_upsample_is_scalar(m in 1usize..5, seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let data = Array2::from_shape_fn((4, 5), |_| rng.random_range(0.0..3.0));
            let img = RealImage::new(data.clone(), 1.0).unwrap();
            let round = img.upsample_nn(m).unwrap().bin_intensity(m).unwrap();
            let scale = (m * m) as f64;
            for (a, b) in round.data.iter().zip(data.iter()) {
                prop_assert!((a - b * scale).abs() <= 1e-12 * scale * b.abs().max(1.0));
            }
        }
    }
}
