//! Blind-restoration corruption: blur, downscale, additive Gaussian noise,
//! JPEG, then resize back to the source resolution.

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facedata::{resize_unit_rgb, Domain, ImageBuffer, Role};
use crate::scalar::Scalar;

/// Codec used for the JPEG stage; recorded in manifests.
pub const JPEG_CODEC: &str = "image-rs/jpeg (baseline)";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    Gaussian { size: usize, sigma: f64 },
    Motion { length: usize, angle_deg: f64 },
}

/// Normalized square blur kernel (row-major weights).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub spec: KernelSpec,
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn identity() -> Self {
        Kernel {
            spec: KernelSpec::Motion {
                length: 1,
                angle_deg: 0.0,
            },
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn build(spec: KernelSpec) -> Result<Self> {
        match spec {
            KernelSpec::Gaussian { size, sigma } => gaussian_kernel(size, sigma),
            KernelSpec::Motion { length, angle_deg } => motion_kernel(length, angle_deg),
        }
    }

    fn normalized(spec: KernelSpec, size: usize, mut weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Kernel { spec, size, weights }
    }
}

/// Isotropic Gaussian sampled at integer offsets, normalized to sum 1.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Kernel> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::Parameter(format!("kernel size must be odd and positive, got {size}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let c = (size / 2) as f64;
    let mut w = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            w.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    Ok(Kernel::normalized(KernelSpec::Gaussian { size, sigma }, size, w))
}

/// Anti-aliased line of `length` pixels through the kernel center at
/// `angle_deg` (0° horizontal, counter-clockwise, y pointing down the rows),
/// rasterized by splatting dense sub-samples bilinearly.
pub fn motion_kernel(length: usize, angle_deg: f64) -> Result<Kernel> {
    if length == 0 {
        return Err(Error::Parameter("motion length must be at least 1".into()));
    }
    let spec = KernelSpec::Motion { length, angle_deg };
    let half = (length as f64 - 1.0) / 2.0;
    let radius = half.ceil() as usize;
    let size = 2 * radius + 1;
    let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
    let rad = angle_deg.to_radians();
    let (dx, dy) = (snap(rad.cos()), snap(-rad.sin()));
    let mut w = vec![0.0; size * size];
    let samples = 16 * length;
    for s in 0..samples {
        let t = if samples == 1 {
            0.0
        } else {
            -half + 2.0 * half * s as f64 / (samples - 1) as f64
        };
        let (px, py) = (radius as f64 + t * dx, radius as f64 + t * dy);
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
            for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
                let weight = wx * wy;
                if weight == 0.0 {
                    continue;
                }
                let (cx, cy) = (x0 as i64 + ox, y0 as i64 + oy);
                if cx >= 0 && cy >= 0 && (cx as usize) < size && (cy as usize) < size {
                    w[cy as usize * size + cx as usize] += weight;
                }
            }
        }
    }
    Ok(Kernel::normalized(spec, size, w))
}

/// Sampling ranges, half-open `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationRanges {
    pub scale: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub jpeg_quality: (u8, u8),
    pub jpeg: bool,
    pub gaussian_sigma: (f64, f64),
    pub motion_length: (usize, usize),
}

impl Default for DegradationRanges {
    fn default() -> Self {
        DegradationRanges {
            scale: (0.4, 0.9),
            noise_sigma: (50.0, 250.0),
            jpeg_quality: (5, 50),
            jpeg: true,
            gaussian_sigma: (0.2, 3.0),
            motion_length: (3, 12),
        }
    }
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.scale.0 > 0.0 && self.scale.0 < self.scale.1 && self.scale.1 <= 1.0) {
            return bad("scale range must satisfy 0 < lo < hi <= 1");
        }
        if !(self.noise_sigma.0 >= 0.0 && self.noise_sigma.0 <= self.noise_sigma.1) {
            return bad("noise range must satisfy 0 <= lo <= hi");
        }
        if !(self.jpeg_quality.0 >= 1 && self.jpeg_quality.0 < self.jpeg_quality.1 && self.jpeg_quality.1 <= 101) {
            return bad("jpeg quality range must lie in [1, 101)");
        }
        if !(self.gaussian_sigma.0 > 0.0 && self.gaussian_sigma.0 < self.gaussian_sigma.1) {
            return bad("gaussian sigma range must satisfy 0 < lo < hi");
        }
        if !(self.motion_length.0 >= 1 && self.motion_length.0 < self.motion_length.1) {
            return bad("motion length range must satisfy 1 <= lo < hi");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub kernel: Kernel,
    pub scale_r: f64,
    pub noise_sigma: f64,
    pub jpeg_q: Option<u8>,
    pub seed: u64,
}

impl DegradationParams {
    /// Parameters under which [`degrade`] is the identity.
    pub fn identity() -> Self {
        DegradationParams {
            kernel: Kernel::identity(),
            scale_r: 1.0,
            noise_sigma: 0.0,
            jpeg_q: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_r > 0.0 && self.scale_r <= 1.0) {
            return Err(Error::Parameter(format!("scale {} outside (0,1]", self.scale_r)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Parameter(format!("noise sigma {} < 0", self.noise_sigma)));
        }
        if let Some(q) = self.jpeg_q {
            if !(1..=100).contains(&q) {
                return Err(Error::Parameter(format!("jpeg quality {q} outside [1,100]")));
            }
        }
        Ok(())
    }
}

/// Draws one parameter tuple: Gaussian or motion blur with equal
/// probability, then scale, noise and quality uniformly from `ranges`.
pub fn sample_params<R: Rng + ?Sized>(rng: &mut R, ranges: &DegradationRanges) -> DegradationParams {
    let kernel = if rng.random_bool(0.5) {
        let sigma = rng.random_range(ranges.gaussian_sigma.0..ranges.gaussian_sigma.1);
        let size = 2 * (3.0 * sigma).ceil() as usize + 1;
        gaussian_kernel(size, sigma)
    } else {
        let length = rng.random_range(ranges.motion_length.0..ranges.motion_length.1);
        let angle = rng.random_range(0.0..180.0);
        motion_kernel(length, angle)
    }
    .expect("ranges produce valid kernels");
    let scale_r = rng.random_range(ranges.scale.0..ranges.scale.1);
    let noise_sigma = if ranges.noise_sigma.0 < ranges.noise_sigma.1 {
        rng.random_range(ranges.noise_sigma.0..ranges.noise_sigma.1)
    } else {
        ranges.noise_sigma.0
    };
    let jpeg_q = ranges
        .jpeg
        .then(|| rng.random_range(ranges.jpeg_quality.0..ranges.jpeg_quality.1).min(100));
    DegradationParams {
        kernel,
        scale_r,
        noise_sigma,
        jpeg_q,
        seed: rng.random(),
    }
}

/// Mirror index without repeating the edge sample.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

fn convolve(src: &[f64], h: usize, w: usize, k: &Kernel) -> Vec<f64> {
    if k.size == 1 {
        return src.iter().map(|v| v * k.weights[0]).collect();
    }
    let r = (k.size / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for ky in 0..k.size {
                let sy = reflect(y as i64 + ky as i64 - r, h);
                for kx in 0..k.size {
                    let wgt = k.at(ky, kx);
                    if wgt == 0.0 {
                        continue;
                    }
                    let sx = reflect(x as i64 + kx as i64 - r, w);
                    let p = (sy * w + sx) * 3;
                    for c in 0..3 {
                        acc[c] += wgt * src[p + c];
                    }
                }
            }
            out[(y * w + x) * 3..][..3].copy_from_slice(&acc);
        }
    }
    out
}

fn resize_255(data: Vec<f64>, w: usize, h: usize, nw: usize, nh: usize) -> Vec<f64> {
    if (w, h) == (nw, nh) {
        return data;
    }
    let unit = data.into_iter().map(|v| (v / 255.0) as f32).collect();
    resize_unit_rgb(w, h, unit, nw, nh)
        .into_iter()
        .map(|v| v as f64 * 255.0)
        .collect()
}

/// `(((img ⊗ k)↓r + n)_JPEG)↑` on a byte image; output has the input shape.
pub fn degrade<T: Scalar>(img: &ImageBuffer<T>, params: &DegradationParams) -> Result<ImageBuffer<T>> {
    img.expect_domain(Domain::Byte255)?;
    params.validate()?;
    let (h, w) = (img.height(), img.width());
    let src: Vec<f64> = img.data().iter().map(|v| v.f64()).collect();

    let blurred = convolve(&src, h, w, &params.kernel);
    let (sh, sw) = (
        ((params.scale_r * h as f64).round() as usize).max(1),
        ((params.scale_r * w as f64).round() as usize).max(1),
    );
    let mut small = resize_255(blurred, w, h, sw, sh);

    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let normal = Normal::new(0.0, params.noise_sigma).expect("finite sigma");
        for v in &mut small {
            *v += normal.sample(&mut rng);
        }
    }
    let mut bytes: Vec<u8> = small.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();

    if let Some(q) = params.jpeg_q {
        let mut buf = Cursor::new(Vec::new());
        JpegEncoder::new_with_quality(&mut buf, q).encode(&bytes, sw as u32, sh as u32, ExtendedColorType::Rgb8)?;
        bytes = image::load_from_memory_with_format(buf.get_ref(), ImageFormat::Jpeg)?
            .to_rgb8()
            .into_raw();
    }

    let restored = resize_255(bytes.into_iter().map(f64::from).collect(), sw, sh, w, h);
    let data = restored
        .into_iter()
        .map(|v| T::lit(v.round().clamp(0.0, 255.0)))
        .collect();
    Ok(ImageBuffer::from_parts(h, w, Domain::Byte255, Role::Lq, data))
}

/// One line of the `degrade` manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub params: DegradationParams,
    pub codec: String,
}

/// Degrades every `<id>.png` in `input` (masks excluded) into `output`
/// under the same name. Image `i` (in sorted id order) draws its parameters
/// from a stream seeded with `seed ⊕ i`. Returns the manifest entries, which
/// are also written to `output/manifest.jsonl`.
pub fn degrade_directory(input: &Path, output: &Path, seed: u64, ranges: &DegradationRanges) -> Result<Vec<ManifestEntry>> {
    ranges.validate()?;
    std::fs::create_dir_all(output)?;
    let ids = crate::facedata::image_ids(input)?;
    let mut manifest = Vec::with_capacity(ids.len());
    let mut lines = String::new();
    for (i, id) in ids.into_iter().enumerate() {
        let rgb = image::open(input.join(format!("{id}.png")))?.to_rgb8();
        let img = ImageBuffer::<f32>::from_rgb8(&rgb, Role::Hq);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
        let params = sample_params(&mut rng, ranges);
        let lq = degrade(&img, &params)?;
        let png = crate::facedata::encode_png(&image::DynamicImage::ImageRgb8(lq.to_rgb8()?))?;
        crate::checkpoint::write_atomic(&output.join(format!("{id}.png")), &png)?;
        let entry = ManifestEntry {
            id,
            params,
            codec: JPEG_CODEC.to_string(),
        };
        lines.push_str(&serde_json::to_string(&entry)?);
        lines.push('\n');
        manifest.push(entry);
    }
    crate::checkpoint::write_atomic(&output.join("manifest.jsonl"), lines.as_bytes())?;
    Ok(manifest)
}
