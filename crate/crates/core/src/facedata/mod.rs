//! Raster, mask and facial-region types, dataset ingestion and the
//! procedural face generator.

mod io;
mod synth;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer as RawImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub use io::{load_dataset, save_dataset, split_dataset, LoadReport, SampleError};
pub(crate) use io::{encode_png, image_ids};
pub use synth::{synth_faces, SYNTH_RESOLUTIONS};

/// Value domain of an [`ImageBuffer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Integers in `[0, 255]`, as stored by image codecs.
    Byte255,
    /// Reals in `[-1, 1]`, as consumed by the networks.
    SignedUnit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Hq,
    Lq,
    Rf,
    Mixed,
}

/// `H×W×3` raster, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer<T> {
    height: usize,
    width: usize,
    domain: Domain,
    role: Role,
    data: Vec<T>,
}

impl<T: Scalar> ImageBuffer<T> {
    /// Validates length and the domain's value range.
    pub fn new(height: usize, width: usize, domain: Domain, role: Role, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}×{width}×3 image",
                data.len()
            )));
        }
        let ok = match domain {
            Domain::Byte255 => data
                .iter()
                .all(|v| *v >= T::zero() && *v <= T::lit(255.0) && v.fract() == T::zero()),
            Domain::SignedUnit => data.iter().all(|v| *v >= -T::one() && *v <= T::one()),
        };
        if !ok {
            return Err(Error::domain(
                format!("{domain:?} values"),
                "out-of-range or non-integral samples",
            ));
        }
        Ok(ImageBuffer {
            height,
            width,
            domain,
            role,
            data,
        })
    }

    pub fn from_rgb8(img: &RgbImage, role: Role) -> Self {
        let data = img.as_raw().iter().map(|&b| T::lit(b as f64)).collect();
        ImageBuffer {
            height: img.height() as usize,
            width: img.width() as usize,
            domain: Domain::Byte255,
            role,
            data,
        }
    }

    pub fn to_rgb8(&self) -> Result<RgbImage> {
        self.expect_domain(Domain::Byte255)?;
        let raw = self.data.iter().map(|v| v.f64() as u8).collect();
        Ok(RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("matching length"))
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn same_shape(&self, other: &ImageBuffer<T>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn expect_domain(&self, want: Domain) -> Result<()> {
        if self.domain != want {
            return Err(Error::domain(format!("{want:?}"), format!("{:?}", self.domain)));
        }
        Ok(())
    }

    /// Affine map `b ↦ 2b/255 − 1`.
    pub fn to_signed_unit(&self) -> Result<Self> {
        self.expect_domain(Domain::Byte255)?;
        let k = T::lit(2.0 / 255.0);
        Ok(ImageBuffer {
            domain: Domain::SignedUnit,
            data: self.data.iter().map(|&b| b * k - T::one()).collect(),
            ..*self
        })
    }

    /// Inverse of [`to_signed_unit`](Self::to_signed_unit), rounding half
    /// away from zero and clamping to `[0, 255]`.
    pub fn from_signed_unit(&self) -> Result<Self> {
        self.expect_domain(Domain::SignedUnit)?;
        let half = T::lit(127.5);
        Ok(ImageBuffer {
            domain: Domain::Byte255,
            data: self
                .data
                .iter()
                .map(|&v| ((v + T::one()) * half).round().max(T::zero()).min(T::lit(255.0)))
                .collect(),
            ..*self
        })
    }

    /// Stacks signed-unit images into an `N×3×H×W` tensor.
    pub fn batch_tensor(images: &[&ImageBuffer<T>]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Parameter("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            img.expect_domain(Domain::SignedUnit)?;
            if img.height != h || img.width != w {
                return Err(Error::Shape("images in a batch differ in size".into()));
            }
            for c in 0..3 {
                data.extend(img.data.iter().skip(c).step_by(3).copied());
            }
        }
        Tensor::from_vec([images.len(), 3, h, w], data)
    }

    /// Inverse of [`batch_tensor`](Self::batch_tensor) for one item; values
    /// are clamped into `[-1, 1]`.
    pub fn from_tensor_item(t: &Tensor<T>, n: usize, role: Role) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let item = t.item(n);
        let mut data = vec![T::zero(); h * w * 3];
        for ch in 0..3 {
            for p in 0..h * w {
                data[p * 3 + ch] = item[ch * h * w + p].max(-T::one()).min(T::one());
            }
        }
        Ok(ImageBuffer {
            height: h,
            width: w,
            domain: Domain::SignedUnit,
            role,
            data,
        })
    }

    /// Unchecked construction for values produced by trusted arithmetic.
    pub(crate) fn from_parts(height: usize, width: usize, domain: Domain, role: Role, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        ImageBuffer {
            height,
            width,
            domain,
            role,
            data,
        }
    }

    /// Bicubic resize (Catmull-Rom, area-widened when shrinking). Byte
    /// images come back rounded to integers; everything is clamped to the
    /// domain range.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let (lo, span) = match self.domain {
            Domain::Byte255 => (0.0, 255.0),
            Domain::SignedUnit => (-1.0, 2.0),
        };
        let normalized: Vec<f32> = self.data.iter().map(|v| ((v.f64() - lo) / span) as f32).collect();
        let out = resize_unit_rgb(self.width, self.height, normalized, width, height);
        let data = out
            .into_iter()
            .map(|v| {
                let v = lo + v as f64 * span;
                T::lit(if self.domain == Domain::Byte255 { v.round() } else { v })
            })
            .collect();
        ImageBuffer {
            height,
            width,
            data,
            ..*self
        }
    }
}

/// Resizes interleaved RGB values in `[0,1]` (row-major) with Catmull-Rom.
pub(crate) fn resize_unit_rgb(w: usize, h: usize, data: Vec<f32>, nw: usize, nh: usize) -> Vec<f32> {
    let img: RawImage<Rgb<f32>, Vec<f32>> = RawImage::from_raw(w as u32, h as u32, data).expect("rgb length");
    imageops::resize(&img, nw as u32, nh as u32, FilterType::CatmullRom).into_raw()
}

/// Binary `H×W` map (values 0/1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}×{width} mask", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Parameter("mask values must be 0 or 1".into()));
        }
        Ok(MaskMap { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MaskMap {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        MaskMap {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    /// Builds a mask from a predicate over pixel coordinates `(y, x)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        MaskMap { height, width, data }
    }

    /// Thresholds an 8-bit map at half intensity.
    pub fn from_gray8(img: &GrayImage) -> Self {
        MaskMap {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| (v >= 128) as u8).collect(),
        }
    }

    /// 0 → 0, 1 → 255.
    pub fn to_gray8(&self) -> GrayImage {
        let raw = self.data.iter().map(|&v| v * 255).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("matching length")
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / self.data.len().max(1) as f64
    }

    pub fn complement(&self) -> Self {
        MaskMap {
            data: self.data.iter().map(|&v| 1 - v).collect(),
            ..*self
        }
    }

    pub fn and(&self, other: &MaskMap) -> Result<Self> {
        self.check_shape(other.height, other.width)?;
        Ok(MaskMap {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect(),
            ..*self
        })
    }

    pub fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::Shape(format!(
                "mask {}×{} vs {height}×{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Bilinear resize followed by a 0.5 threshold; the result stays binary.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let src: RawImage<Luma<f32>, Vec<f32>> = RawImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("mask length");
        let out = imageops::resize(&src, width as u32, height as u32, FilterType::Triangle);
        MaskMap {
            height,
            width,
            data: out.into_raw().into_iter().map(|v| (v >= 0.5) as u8).collect(),
        }
    }
}

/// `H×W` map of per-pixel scores in `[0,1]`: discriminator outputs and
/// their supervision targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> ScoreMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}×{width} map", data.len())));
        }
        if !data.iter().all(|v| *v >= T::zero() && *v <= T::one()) {
            return Err(Error::Parameter("score values must lie in [0,1]".into()));
        }
        Ok(ScoreMap { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_mask(mask: &MaskMap) -> Self {
        ScoreMap {
            height: mask.height,
            width: mask.width,
            data: mask.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect(),
        }
    }

    /// Map `n` of an `N×1×H×W` tensor.
    pub fn from_tensor_item(t: &Tensor<T>, n: usize) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::Shape(format!("score tensor has {} channels", t.channels())));
        }
        let [_, _, h, w] = t.shape();
        Self::new(h, w, t.item(n).to_vec())
    }

    /// Stacks maps into an `N×1×H×W` tensor.
    pub fn batch_tensor(maps: &[&ScoreMap<T>]) -> Result<Tensor<T>> {
        let Some(first) = maps.first() else {
            return Err(Error::Parameter("empty map batch".into()));
        };
        let mut data = Vec::with_capacity(maps.len() * first.data.len());
        for m in maps {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::Shape("score maps differ in size".into()));
            }
            data.extend_from_slice(&m.data);
        }
        Tensor::from_vec([maps.len(), 1, first.height, first.width], data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v == T::zero() || *v == T::one())
    }

    /// Arithmetic mean in double precision; `None` for an empty map.
    pub fn mean(&self) -> Option<f64> {
        if self.data.is_empty() {
            return None;
        }
        Some(self.data.iter().map(|v| v.f64()).sum::<f64>() / self.data.len() as f64)
    }

    /// Mean over pixels where `mask` is set.
    pub fn masked_mean(&self, mask: &MaskMap) -> Result<Option<f64>> {
        mask.check_shape(self.height, self.width)?;
        let (mut sum, mut n) = (0.0, 0usize);
        for (v, &m) in self.data.iter().zip(&mask.data) {
            if m == 1 {
                sum += v.f64();
                n += 1;
            }
        }
        Ok((n > 0).then(|| sum / n as f64))
    }

    /// 8-bit rendering, `round(255·s)`.
    pub fn to_gray8(&self) -> GrayImage {
        let raw = self.data.iter().map(|v| (255.0 * v.f64()).round() as u8).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("matching length")
    }
}

/// Axis-aligned box in normalized `[0,1]` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl NormBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = NormBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.x0)
            && (0.0..=1.0).contains(&self.y0)
            && (0.0..=1.0).contains(&self.x1)
            && (0.0..=1.0).contains(&self.y1)
            && self.x0 < self.x1
            && self.y0 < self.y1;
        if !ok {
            return Err(Error::Parameter(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// Whether pixel `(y, x)` of an `h×w` grid has its center inside.
    #[inline]
    pub fn covers_pixel(&self, y: usize, x: usize, h: usize, w: usize) -> bool {
        let u = (x as f64 + 0.5) / w as f64;
        let v = (y as f64 + 0.5) / h as f64;
        u >= self.x0 && u < self.x1 && v >= self.y0 && v < self.y1
    }
}

impl Serialize for NormBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x0, self.y0, self.x1, self.y1].serialize(s)
    }
}

impl<'de> Deserialize<'de> for NormBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x0, y0, x1, y1] = <[f64; 4]>::deserialize(d)?;
        NormBox::new(x0, y0, x1, y1).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::LeftEye, Region::RightEye, Region::Nose, Region::Mouth];
}

/// Eye, nose and mouth boxes. `left_eye` is the subject's left eye, which
/// appears on the right of a frontal image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionBoxSet {
    pub left_eye: NormBox,
    pub right_eye: NormBox,
    pub nose: NormBox,
    pub mouth: NormBox,
}

impl RegionBoxSet {
    pub fn get(&self, r: Region) -> &NormBox {
        match r {
            Region::LeftEye => &self.left_eye,
            Region::RightEye => &self.right_eye,
            Region::Nose => &self.nose,
            Region::Mouth => &self.mouth,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Region, &NormBox)> {
        Region::ALL.into_iter().map(move |r| (r, self.get(r)))
    }

    pub fn validate(&self) -> Result<()> {
        self.iter().try_for_each(|(_, b)| b.validate())
    }

    /// Boxes from the common 68-point landmark layout (pixel coordinates):
    /// the bounding box of each component's points, dilated by 10% of its
    /// size per side and clipped to the frame.
    pub fn from_landmarks68(points: &[(f64, f64)], width: usize, height: usize) -> Result<Self> {
        if points.len() != 68 {
            return Err(Error::Parameter(format!("expected 68 landmarks, got {}", points.len())));
        }
        let bbox = |range: std::ops::Range<usize>| -> Result<NormBox> {
            let pts = &points[range];
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for &(x, y) in pts {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            let (dx, dy) = (0.1 * (x1 - x0), 0.1 * (y1 - y0));
            let clip = |v: f64| v.clamp(0.0, 1.0);
            NormBox::new(
                clip((x0 - dx) / width as f64),
                clip((y0 - dy) / height as f64),
                clip((x1 + dx) / width as f64),
                clip((y1 + dy) / height as f64),
            )
        };
        Ok(RegionBoxSet {
            right_eye: bbox(36..42)?,
            left_eye: bbox(42..48)?,
            nose: bbox(27..36)?,
            mouth: bbox(48..68)?,
        })
    }
}

/// One training face: HQ image, region boxes and face mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample<T> {
    pub id: String,
    pub image: ImageBuffer<T>,
    pub regions: RegionBoxSet,
    pub face_mask: MaskMap,
}

impl<T: Scalar> FaceSample<T> {
    pub fn validate(&self) -> Result<()> {
        self.image.expect_domain(Domain::Byte255)?;
        self.face_mask.check_shape(self.image.height(), self.image.width())?;
        self.regions.validate()?;
        let frac = self.face_mask.area_fraction();
        if !(frac > 0.0 && frac < 1.0) {
            return Err(Error::Parameter(format!(
                "{}: face mask area fraction {frac} outside (0,1)",
                self.id
            )));
        }
        let (h, w) = (self.image.height(), self.image.width());
        for (r, b) in self.regions.iter() {
            let hit = (0..h).any(|y| (0..w).any(|x| b.covers_pixel(y, x, h, w) && self.face_mask.get(y, x)));
            if !hit {
                return Err(Error::Parameter(format!("{}: {r:?} box misses the face mask", self.id)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_unit_endpoints_and_midpoint() {
        let img = ImageBuffer::<f64>::new(1, 1, Domain::Byte255, Role::Hq, vec![0.0, 255.0, 128.0]).unwrap();
        let s = img.to_signed_unit().unwrap();
        assert_eq!(s.data()[0], -1.0);
        assert_eq!(s.data()[1], 1.0);
        assert!((s.data()[2] - (2.0 * 128.0 / 255.0 - 1.0)).abs() < 1e-15);
        assert!((s.data()[2] - 0.003_921_568_627_450_98).abs() < 1e-15);
    }

    #[test]
    fn signed_unit_roundtrip_is_identity_on_all_bytes() {
        let data: Vec<f32> = (0..=255u32).flat_map(|b| [b as f32; 3]).collect();
        let img = ImageBuffer::new(16, 16, Domain::Byte255, Role::Hq, data).unwrap();
        let back = img.to_signed_unit().unwrap().from_signed_unit().unwrap();
        assert_eq!(back, img);
        let s = img.to_signed_unit().unwrap();
        assert!(s.data().windows(6).step_by(3).all(|w| w[0] < w[3]), "strictly monotone");
    }

    #[test]
    fn conversions_reject_the_wrong_domain() {
        let img = ImageBuffer::<f32>::new(1, 1, Domain::SignedUnit, Role::Hq, vec![0.0; 3]).unwrap();
        assert!(matches!(img.to_signed_unit(), Err(Error::Domain { .. })));
        let b = ImageBuffer::<f32>::new(1, 1, Domain::Byte255, Role::Hq, vec![0.0; 3]).unwrap();
        assert!(matches!(b.from_signed_unit(), Err(Error::Domain { .. })));
    }

    #[test]
    fn constructor_checks_domain_range() {
        assert!(ImageBuffer::<f32>::new(1, 1, Domain::Byte255, Role::Hq, vec![0.5, 0.0, 0.0]).is_err());
        assert!(ImageBuffer::<f32>::new(1, 1, Domain::SignedUnit, Role::Hq, vec![1.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn batch_tensor_roundtrip() {
        let data: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32 / 20.0 - 0.4).collect();
        let img = ImageBuffer::new(2, 3, Domain::SignedUnit, Role::Lq, data).unwrap();
        let t = ImageBuffer::batch_tensor(&[&img, &img]).unwrap();
        assert_eq!(t.shape(), [2, 3, 2, 3]);
        assert_eq!(t.data()[1], img.get(0, 1, 0));
        assert_eq!(t.data()[6], img.get(0, 0, 1));
        let back = ImageBuffer::from_tensor_item(&t, 1, Role::Lq).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn landmarks_become_dilated_boxes() {
        let mut pts: Vec<(f64, f64)> = (0..68).map(|i| (40.0 + (i % 5) as f64 * 4.0, 50.0 + (i % 3) as f64 * 5.0)).collect();
        for (i, p) in pts.iter_mut().enumerate().take(42).skip(36) {
            *p = (20.0 + (i - 36) as f64 * 2.0, 30.0 + (i % 2) as f64 * 10.0);
        }
        let boxes = RegionBoxSet::from_landmarks68(&pts, 100, 100).unwrap();
        // x ∈ [20, 30], y ∈ [30, 40] dilated by 1 px per side
        let b = boxes.right_eye;
        assert!((b.x0 - 0.19).abs() < 1e-12 && (b.x1 - 0.31).abs() < 1e-12);
        assert!((b.y0 - 0.29).abs() < 1e-12 && (b.y1 - 0.41).abs() < 1e-12);
    }

    #[test]
    fn region_json_layout() {
        let b = NormBox::new(0.1, 0.2, 0.3, 0.4).unwrap();
        let set = RegionBoxSet {
            left_eye: b,
            right_eye: b,
            nose: b,
            mouth: b,
        };
        let v: serde_json::Value = serde_json::to_value(set).unwrap();
        assert_eq!(v["nose"], serde_json::json!([0.1, 0.2, 0.3, 0.4]));
        let bad = r#"{"left_eye":[0.5,0,0.4,1],"right_eye":[0,0,1,1],"nose":[0,0,1,1],"mouth":[0,0,1,1]}"#;
        assert!(serde_json::from_str::<RegionBoxSet>(bad).is_err());
        let missing = r#"{"right_eye":[0,0,1,1],"nose":[0,0,1,1],"mouth":[0,0,1,1]}"#;
        assert!(serde_json::from_str::<RegionBoxSet>(missing).is_err());
    }

    #[test]
    fn mask_resize_stays_binary_at_all_resolutions() {
        let m = MaskMap::from_fn(64, 64, |y, x| (y as f64 - 30.0).powi(2) + (x as f64 - 34.0).powi(2) < 400.0);
        for side in [32, 64, 128, 256] {
            let r = m.resize(side, side);
            assert!(r.data().iter().all(|&v| v <= 1));
            assert!((r.area_fraction() - m.area_fraction()).abs() < 0.05);
        }
    }
}
