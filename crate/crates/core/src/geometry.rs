//! Geometric transform kernels on 8-bit images and the pretext label
//! spaces built from them.
//!
//! Quarter-turn rotations and translations move pixels without touching
//! their values. Shear, scale and arbitrary-angle rotation use bilinear
//! resampling through an inverse coordinate map; taps whose source point
//! falls outside the image are filled (zero unless stated otherwise).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CIFAR_HEIGHT: usize = 32;
pub const CIFAR_WIDTH: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;

/// Pixel-interleaved (H x W x C) 8-bit image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{}x{})", self.height, self.width, self.channels)
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "expected {} bytes for a {height}x{width}x{channels} image, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0; height * width * channels],
        }
    }

    /// 32x32x3 image from CIFAR's channel-planar record layout
    /// (1024 R, 1024 G, 1024 B, each row-major).
    pub fn from_planar(planar: &[u8], height: usize, width: usize, channels: usize) -> Result<Self> {
        let plane = height * width;
        if planar.len() != plane * channels {
            return Err(Error::invalid("planar buffer has the wrong length"));
        }
        let mut data = vec![0; planar.len()];
        for ch in 0..channels {
            for p in 0..plane {
                data[p * channels + ch] = planar[ch * plane + p];
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn to_planar(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = vec![0; self.data.len()];
        for p in 0..plane {
            for ch in 0..self.channels {
                out[ch * plane + p] = self.data[p * self.channels + ch];
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: u8) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    fn blank_like(&self) -> Self {
        Self::zeros(self.height, self.width, self.channels)
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.blank_like();
        for r in 0..self.height {
            for c in 0..self.width {
                let dst = (r * self.width + c) * self.channels;
                out.data[dst..dst + self.channels].copy_from_slice(self.pixel(r, self.width - 1 - c));
            }
        }
        out
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> Self {
        let row_len = self.width * self.channels;
        let mut out = self.blank_like();
        for r in 0..self.height {
            let src = (self.height - 1 - r) * row_len;
            out.data[r * row_len..(r + 1) * row_len].copy_from_slice(&self.data[src..src + row_len]);
        }
        out
    }

    /// Swap rows and columns.
    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.width, self.height, self.channels);
        for r in 0..self.height {
            for c in 0..self.width {
                let dst = (c * self.height + r) * self.channels;
                out.data[dst..dst + self.channels].copy_from_slice(self.pixel(r, c));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Kernels

/// Rotation by `turns` quarter turns: output `(r, c)` takes input
/// `(c, H-1-r)` for one turn. Built only from transposes and flips.
pub fn rotate_quarter(img: &Image, turns: u8) -> Result<Image> {
    if turns > 3 {
        return Err(Error::invalid(format!("quarter turns must be in 0..=3, got {turns}")));
    }
    if turns % 2 == 1 && img.height != img.width {
        return Err(Error::invalid("odd quarter turns need a square image to keep its shape"));
    }
    Ok(match turns {
        0 => img.clone(),
        1 => img.transpose().flip_vertical(),
        2 => img.flip_vertical().flip_horizontal(),
        _ => img.flip_vertical().transpose(),
    })
}

const WEIGHT_BITS: u32 = 16;
const WEIGHT_ONE: i64 = 1 << WEIGHT_BITS;
const SUPPORT_EPS: f64 = 1e-9;

/// Bilinear sample of every channel at fractional `(row, col)` into `out`.
/// Returns false when the point lies outside the pixel-centre grid.
///
/// Weights are quantized to 16 bits so that mirrored sampling positions
/// produce identical integers.
fn sample_bilinear(img: &Image, row: f64, col: f64, out: &mut [u8]) -> bool {
    let max_r = (img.height - 1) as f64;
    let max_c = (img.width - 1) as f64;
    if !(row >= -SUPPORT_EPS && row <= max_r + SUPPORT_EPS && col >= -SUPPORT_EPS && col <= max_c + SUPPORT_EPS) {
        return false;
    }
    let row = row.clamp(0.0, max_r);
    let col = col.clamp(0.0, max_c);
    let r0 = row.floor() as usize;
    let c0 = col.floor() as usize;
    let r1 = (r0 + 1).min(img.height - 1);
    let c1 = (c0 + 1).min(img.width - 1);
    let tr = ((row - r0 as f64) * WEIGHT_ONE as f64).round() as i64;
    let tc = ((col - c0 as f64) * WEIGHT_ONE as f64).round() as i64;
    for (ch, o) in out.iter_mut().enumerate() {
        let p00 = img.get(r0, c0, ch) as i64;
        let p01 = img.get(r0, c1, ch) as i64;
        let p10 = img.get(r1, c0, ch) as i64;
        let p11 = img.get(r1, c1, ch) as i64;
        let top = p00 * (WEIGHT_ONE - tc) + p01 * tc;
        let bottom = p10 * (WEIGHT_ONE - tc) + p11 * tc;
        let v = top * (WEIGHT_ONE - tr) + bottom * tr;
        let half = 1i64 << (2 * WEIGHT_BITS - 1);
        *o = ((v + half) >> (2 * WEIGHT_BITS)).clamp(0, 255) as u8;
    }
    true
}

/// Resamples through an inverse map from output `(r, c)` to a source point.
fn warp(img: &Image, fill: u8, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let mut out = img.blank_like();
    let mut px = vec![0u8; img.channels];
    for r in 0..img.height {
        for c in 0..img.width {
            let (sr, sc) = inverse(r as f64, c as f64);
            let dst = (r * img.width + c) * img.channels;
            if sample_bilinear(img, sr, sc, &mut px) {
                out.data[dst..dst + img.channels].copy_from_slice(&px);
            } else {
                out.data[dst..dst + img.channels].fill(fill);
            }
        }
    }
    out
}

/// Rotation by `degrees` about the image centre, bilinear resampling,
/// with the same orientation as [`rotate_quarter`] for positive angles.
pub fn rotate_degrees(img: &Image, degrees: f64, fill: u8) -> Result<Image> {
    if !(-180.0..=180.0).contains(&degrees) {
        return Err(Error::invalid(format!("rotation angle must be in [-180, 180], got {degrees}")));
    }
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    Ok(warp(img, fill, |r, c| {
        let (dr, dc) = (r - cy, c - cx);
        (cy + cos * dr + sin * dc, cx - sin * dr + cos * dc)
    }))
}

/// Horizontal shear about the centre row: source column is
/// `c - factor * (r - H/2)`.
pub fn shear(img: &Image, factor: f64) -> Result<Image> {
    if !(factor.abs() <= 1.0) {
        return Err(Error::invalid(format!("shear factor must satisfy |f| <= 1, got {factor}")));
    }
    let mid = img.height as f64 / 2.0;
    Ok(warp(img, 0, |r, c| (r, c - factor * (r - mid))))
}

/// Isotropic scaling about the centre on a fixed canvas.
pub fn scale_about_center(img: &Image, factor: f64) -> Result<Image> {
    if !(factor > 0.0 && factor <= 4.0) {
        return Err(Error::invalid(format!("scale factor must be in (0, 4], got {factor}")));
    }
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    Ok(warp(img, 0, |r, c| (cy + (r - cy) / factor, cx + (c - cx) / factor)))
}

/// Integer shift by `dx` columns and `dy` rows; vacated pixels are 0.
pub fn translate(img: &Image, dx: i32, dy: i32) -> Result<Image> {
    if dx.unsigned_abs() as usize >= img.width || dy.unsigned_abs() as usize >= img.height {
        return Err(Error::invalid(format!(
            "translation ({dx}, {dy}) must be smaller than the {}x{} image",
            img.height, img.width
        )));
    }
    let mut out = img.blank_like();
    let ch = img.channels;
    for r in 0..img.height {
        let sr = r as i64 - dy as i64;
        if sr < 0 || sr >= img.height as i64 {
            continue;
        }
        let c_lo = dx.max(0) as usize;
        let c_hi = (img.width as i64 + dx.min(0) as i64) as usize;
        let s_lo = (c_lo as i64 - dx as i64) as usize;
        let src = (sr as usize * img.width + s_lo) * ch;
        let dst = (r * img.width + c_lo) * ch;
        let n = (c_hi - c_lo) * ch;
        out.data[dst..dst + n].copy_from_slice(&img.data[src..src + n]);
    }
    Ok(out)
}

/// Multiplies every channel by `factor`, clipping to [0, 255].
pub fn scale_brightness(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = (*v as f64 * factor).round().clamp(0.0, 255.0) as u8;
    }
    out
}

// ---------------------------------------------------------------------------
// Transform specifications and label spaces

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    Identity,
    RotateQuarter { turns: u8 },
    RotateDegrees { degrees: f64 },
    Shear { factor: f64 },
    Scale { factor: f64 },
    Translate { dx: i32, dy: i32 },
}

impl TransformSpec {
    /// Range check against a `height x width` canvas.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let ok = match *self {
            TransformSpec::Identity => true,
            TransformSpec::RotateQuarter { turns } => turns <= 3,
            TransformSpec::RotateDegrees { degrees } => (-180.0..=180.0).contains(&degrees),
            TransformSpec::Shear { factor } => factor.abs() <= 1.0,
            TransformSpec::Scale { factor } => factor > 0.0 && factor <= 4.0,
            TransformSpec::Translate { dx, dy } => {
                (dx.unsigned_abs() as usize) < width && (dy.unsigned_abs() as usize) < height
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("transform {self} is out of range")))
        }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        match *self {
            TransformSpec::Identity => Ok(img.clone()),
            TransformSpec::RotateQuarter { turns } => rotate_quarter(img, turns),
            TransformSpec::RotateDegrees { degrees } => rotate_degrees(img, degrees, 0),
            TransformSpec::Shear { factor } => shear(img, factor),
            TransformSpec::Scale { factor } => scale_about_center(img, factor),
            TransformSpec::Translate { dx, dy } => translate(img, dx, dy),
        }
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TransformSpec::Identity => write!(f, "identity"),
            TransformSpec::RotateQuarter { turns } => write!(f, "rotate {}°", 90 * turns as u32),
            TransformSpec::RotateDegrees { degrees } => write!(f, "rotate {degrees}°"),
            TransformSpec::Shear { factor } => write!(f, "shear {factor:+}"),
            TransformSpec::Scale { factor } => write!(f, "scale {factor}"),
            TransformSpec::Translate { dx, dy } => write!(f, "translate ({dx:+}, {dy:+})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetName {
    Rot2,
    Rot4,
    Rot8,
    Affine5,
    Affine10,
    Custom,
}

impl SetName {
    pub const CANONICAL: [SetName; 5] = [
        SetName::Rot2,
        SetName::Rot4,
        SetName::Rot8,
        SetName::Affine5,
        SetName::Affine10,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SetName::Rot2 => "rot2",
            SetName::Rot4 => "rot4",
            SetName::Rot8 => "rot8",
            SetName::Affine5 => "affine5",
            SetName::Affine10 => "affine10",
            SetName::Custom => "custom",
        }
    }

    /// Number of classes for the canonical sets.
    pub fn expected_k(self) -> Option<usize> {
        match self {
            SetName::Rot2 => Some(2),
            SetName::Rot4 => Some(4),
            SetName::Rot8 => Some(8),
            SetName::Affine5 => Some(5),
            SetName::Affine10 => Some(10),
            SetName::Custom => None,
        }
    }

    pub fn is_rotation(self) -> bool {
        matches!(self, SetName::Rot2 | SetName::Rot4 | SetName::Rot8)
    }

    /// Column label used in result tables.
    pub fn label(self) -> String {
        match self {
            SetName::Rot2 | SetName::Rot4 | SetName::Rot8 => {
                format!("Rotation - {}", self.expected_k().unwrap())
            }
            SetName::Affine5 | SetName::Affine10 => {
                format!("Transform - {}", self.expected_k().unwrap())
            }
            SetName::Custom => "Custom".to_string(),
        }
    }
}

impl fmt::Display for SetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rot2" => Ok(SetName::Rot2),
            "rot4" => Ok(SetName::Rot4),
            "rot8" => Ok(SetName::Rot8),
            "affine5" => Ok(SetName::Affine5),
            "affine10" => Ok(SetName::Affine10),
            other => Err(Error::invalid(format!(
                "unknown transform set '{other}' (expected rot2, rot4, rot8, affine5 or affine10)"
            ))),
        }
    }
}

/// Ordered transform list; the index of a member is its pretext label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    name: SetName,
    members: Vec<TransformSpec>,
}

/// Pixel shift used by the translation members of the affine sets.
pub const PRETEXT_SHIFT: i32 = 8;

impl TransformSet {
    pub fn canonical(name: SetName) -> Result<Self> {
        use TransformSpec::*;
        let members = match name {
            SetName::Rot2 => vec![RotateQuarter { turns: 0 }, RotateQuarter { turns: 2 }],
            SetName::Rot4 => (0..4).map(|turns| RotateQuarter { turns }).collect(),
            SetName::Rot8 => vec![
                RotateQuarter { turns: 0 },
                RotateDegrees { degrees: 45.0 },
                RotateQuarter { turns: 1 },
                RotateDegrees { degrees: 135.0 },
                RotateQuarter { turns: 2 },
                RotateDegrees { degrees: -135.0 },
                RotateQuarter { turns: 3 },
                RotateDegrees { degrees: -45.0 },
            ],
            SetName::Affine5 => vec![
                Identity,
                RotateQuarter { turns: 2 },
                Shear { factor: 0.3 },
                Scale { factor: 0.7 },
                Translate { dx: PRETEXT_SHIFT, dy: 0 },
            ],
            SetName::Affine10 => vec![
                Identity,
                RotateQuarter { turns: 1 },
                RotateQuarter { turns: 2 },
                RotateQuarter { turns: 3 },
                Shear { factor: 0.3 },
                Shear { factor: -0.3 },
                Scale { factor: 0.7 },
                Scale { factor: 1.3 },
                Translate { dx: PRETEXT_SHIFT, dy: 0 },
                Translate { dx: -PRETEXT_SHIFT, dy: 0 },
            ],
            SetName::Custom => {
                return Err(Error::invalid("custom sets are built with TransformSet::custom"))
            }
        };
        Ok(Self { name, members })
    }

    /// User-defined label space for 32x32 images; members must be
    /// distinct and in range, and there must be at least two.
    pub fn custom(members: Vec<TransformSpec>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid("a transform set needs at least two members"));
        }
        for (i, m) in members.iter().enumerate() {
            m.validate(CIFAR_HEIGHT, CIFAR_WIDTH)?;
            if members[..i].contains(m) {
                return Err(Error::invalid(format!("duplicate transform {m} in set")));
            }
        }
        Ok(Self {
            name: SetName::Custom,
            members,
        })
    }

    pub fn name(&self) -> SetName {
        self.name
    }

    pub fn members(&self) -> &[TransformSpec] {
        &self.members
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    /// `members[label]` applied to `img`.
    pub fn apply(&self, img: &Image, label: usize) -> Result<Image> {
        let spec = self.members.get(label).ok_or_else(|| {
            Error::invalid(format!("label {label} out of range for {} with K={}", self.name, self.k()))
        })?;
        spec.apply(img)
    }
}

/// Canonical label space by name.
pub fn make_transform_set(name: SetName) -> Result<TransformSet> {
    TransformSet::canonical(name)
}

pub fn apply_transform(img: &Image, set: &TransformSet, label: usize) -> Result<Image> {
    set.apply(img, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..32 * 32 * 3).map(|_| rng.random()).collect();
        Image::new(32, 32, 3, data).unwrap()
    }

    /// Smooth, non-symmetric test pattern.
    fn gradient_image() -> Image {
        let mut img = Image::zeros(32, 32, 3);
        for r in 0..32 {
            for c in 0..32 {
                img.set(r, c, 0, (r * 8) as u8);
                img.set(r, c, 1, (c * 8) as u8);
                img.set(r, c, 2, (255 - (r + c) * 4) as u8);
            }
        }
        img
    }

    #[test]
    fn quarter_rotation_coordinate_map() {
        let x = random_image(1);
        assert_eq!(rotate_quarter(&x, 0).unwrap(), x);
        let y = rotate_quarter(&x, 1).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                for ch in 0..3 {
                    assert_eq!(y.get(r, c, ch), x.get(c, 31 - r, ch));
                }
            }
        }
        let twice = rotate_quarter(&rotate_quarter(&x, 2).unwrap(), 2).unwrap();
        assert_eq!(twice, x);
    }

    #[test]
    fn quarter_rotation_rejects_bad_turns() {
        assert!(matches!(rotate_quarter(&random_image(0), 4), Err(Error::InvalidArgument(_))));
        let wide = Image::zeros(2, 3, 1);
        assert!(rotate_quarter(&wide, 1).is_err());
        assert_eq!(rotate_quarter(&wide, 2).unwrap().shape(), (2, 3, 1));
    }

    #[test]
    fn degree_rotation_matches_quarter_kernel_at_90() {
        let x = random_image(2);
        let exact = rotate_quarter(&x, 1).unwrap();
        let approx = rotate_degrees(&x, 90.0, 0).unwrap();
        for (a, b) in exact.data().iter().zip(approx.data()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
        assert_eq!(rotate_degrees(&x, 0.0, 7).unwrap(), x);
    }

    #[test]
    fn degree_rotation_fills_corners_at_45() {
        let x = Image::new(32, 32, 3, vec![200; 32 * 32 * 3]).unwrap();
        let y = rotate_degrees(&x, 45.0, 0).unwrap();
        for (r, c) in [(0, 0), (0, 31), (31, 0), (31, 31)] {
            for ch in 0..3 {
                assert_eq!(y.get(r, c, ch), 0);
            }
        }
        assert_eq!(y.get(16, 16, 0), 200);
        assert!(rotate_degrees(&x, 181.0, 0).is_err());
    }

    #[test]
    fn shear_identity_and_center_row() {
        let x = random_image(3);
        assert_eq!(shear(&x, 0.0).unwrap(), x);
        let y = shear(&x, 0.3).unwrap();
        for c in 0..32 {
            for ch in 0..3 {
                assert_eq!(y.get(16, c, ch), x.get(16, c, ch));
            }
        }
        assert!(shear(&x, 1.5).is_err());
    }

    #[test]
    fn shear_mirror_symmetry() {
        for seed in 0..5 {
            let x = random_image(seed);
            let direct = shear(&x, 0.3).unwrap();
            let mirrored = shear(&x.flip_horizontal(), -0.3).unwrap().flip_horizontal();
            assert_eq!(direct, mirrored);
        }
    }

    #[test]
    fn scale_down_support_is_centered() {
        let x = Image::new(32, 32, 3, vec![255; 32 * 32 * 3]).unwrap();
        let y = scale_about_center(&x, 0.7).unwrap();
        // ceil(0.7 * 32) + 1 = 23 wide band starting at row/col 4
        for r in 0..32 {
            for c in 0..32 {
                if !(4..27).contains(&r) || !(4..27).contains(&c) {
                    assert_eq!(y.get(r, c, 0), 0, "({r}, {c})");
                }
            }
        }
        assert_eq!(y.get(16, 16, 0), 255);
        assert_eq!(scale_about_center(&x, 1.0).unwrap(), x);
        assert!(scale_about_center(&x, 0.0).is_err());
        assert!(scale_about_center(&x, -1.0).is_err());
    }

    #[test]
    fn scale_round_trip_center_crop() {
        let x = gradient_image();
        let y = scale_about_center(&scale_about_center(&x, 1.3).unwrap(), 1.0 / 1.3).unwrap();
        for r in 8..24 {
            for c in 8..24 {
                for ch in 0..3 {
                    let d = (x.get(r, c, ch) as i32 - y.get(r, c, ch) as i32).abs();
                    assert!(d <= 3, "({r},{c},{ch}) differs by {d}");
                }
            }
        }
    }

    #[test]
    fn translate_shift_and_back() {
        let x = random_image(4);
        assert_eq!(translate(&x, 0, 0).unwrap(), x);
        let y = translate(&x, 8, 0).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                for ch in 0..3 {
                    let expect = if c < 8 { 0 } else { x.get(r, c - 8, ch) };
                    assert_eq!(y.get(r, c, ch), expect);
                }
            }
        }
        let back = translate(&y, -8, 0).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                for ch in 0..3 {
                    let expect = if c >= 24 { 0 } else { x.get(r, c, ch) };
                    assert_eq!(back.get(r, c, ch), expect);
                }
            }
        }
        let v = translate(&x, 0, -3).unwrap();
        assert_eq!(v.get(0, 5, 1), x.get(3, 5, 1));
        assert_eq!(v.get(31, 5, 1), 0);
        assert!(translate(&x, 32, 0).is_err());
        assert!(translate(&x, 0, -32).is_err());
    }

    #[test]
    fn canonical_sets() {
        for name in SetName::CANONICAL {
            let set = make_transform_set(name).unwrap();
            assert_eq!(Some(set.k()), name.expected_k());
            for (i, m) in set.members().iter().enumerate() {
                assert!(!set.members()[..i].contains(m));
                m.validate(32, 32).unwrap();
            }
        }
        let rot2 = make_transform_set(SetName::Rot2).unwrap();
        assert_eq!(
            rot2.members(),
            &[TransformSpec::RotateQuarter { turns: 0 }, TransformSpec::RotateQuarter { turns: 2 }]
        );
        assert!("rot3".parse::<SetName>().is_err());
        assert_eq!("Affine10".parse::<SetName>().unwrap(), SetName::Affine10);
    }

    #[test]
    fn apply_transform_by_label() {
        let x = random_image(5);
        let rot2 = make_transform_set(SetName::Rot2).unwrap();
        let rot4 = make_transform_set(SetName::Rot4).unwrap();
        assert_eq!(apply_transform(&x, &rot2, 0).unwrap(), x);
        assert_eq!(apply_transform(&x, &rot4, 2).unwrap(), rotate_quarter(&x, 2).unwrap());
        assert!(matches!(apply_transform(&x, &rot4, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn custom_sets_validate_members() {
        use TransformSpec::*;
        assert!(TransformSet::custom(vec![Identity]).is_err());
        assert!(TransformSet::custom(vec![Identity, Identity]).is_err());
        assert!(TransformSet::custom(vec![Identity, Shear { factor: 2.0 }]).is_err());
        let s = TransformSet::custom(vec![Identity, Translate { dx: 0, dy: 4 }]).unwrap();
        assert_eq!(s.name(), SetName::Custom);
        assert_eq!(s.k(), 2);
    }

    #[test]
    fn planar_round_trip() {
        let x = random_image(6);
        let planar = x.to_planar();
        assert_eq!(planar[0], x.get(0, 0, 0));
        assert_eq!(planar[1024], x.get(0, 0, 1));
        assert_eq!(planar[2048 + 33], x.get(1, 1, 2));
        assert_eq!(Image::from_planar(&planar, 32, 32, 3).unwrap(), x);
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        proptest::collection::vec(any::<u8>(), 32 * 32 * 3)
            .prop_map(|d| Image::new(32, 32, 3, d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn quarter_rotation_group_law(x in arb_image(), k1 in 0u8..4, k2 in 0u8..4) {
            let lhs = rotate_quarter(&rotate_quarter(&x, k1).unwrap(), k2).unwrap();
            let rhs = rotate_quarter(&x, (k1 + k2) % 4).unwrap();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn quarter_rotation_preserves_pixel_multiset(x in arb_image(), k in 0u8..4) {
            let y = rotate_quarter(&x, k).unwrap();
            let mut a: Vec<&[u8]> = x.data().chunks(3).collect();
            let mut b: Vec<&[u8]> = y.data().chunks(3).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn every_kernel_preserves_shape_and_is_deterministic(
            x in arb_image(),
            deg in -180.0f64..180.0,
            f in -1.0f64..1.0,
            s in 0.1f64..4.0,
            dx in -31i32..32,
            dy in -31i32..32,
        ) {
            let outs = [
                rotate_degrees(&x, deg, 0).unwrap(),
                shear(&x, f).unwrap(),
                scale_about_center(&x, s).unwrap(),
                translate(&x, dx, dy).unwrap(),
            ];
            let again = [
                rotate_degrees(&x, deg, 0).unwrap(),
                shear(&x, f).unwrap(),
                scale_about_center(&x, s).unwrap(),
                translate(&x, dx, dy).unwrap(),
            ];
            for (a, b) in outs.iter().zip(&again) {
                prop_assert_eq!(a.shape(), x.shape());
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn translation_keeps_overlap_exact(x in arb_image(), dx in -31i32..32, dy in -31i32..32) {
            let y = translate(&x, dx, dy).unwrap();
            for r in 0..32i32 {
                for c in 0..32i32 {
                    let (sr, sc) = (r - dy, c - dx);
                    for ch in 0..3 {
                        let expect = if (0..32).contains(&sr) && (0..32).contains(&sc) {
                            x.get(sr as usize, sc as usize, ch)
                        } else {
                            0
                        };
                        prop_assert_eq!(y.get(r as usize, c as usize, ch), expect);
                    }
                }
            }
        }
    }
}
