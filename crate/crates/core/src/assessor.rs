//! Per-pixel score maps, image-level quality scores and map export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::facedata::{encode_png, Domain, ImageBuffer, MaskMap, Role, ScoreMap};
use crate::networks::{DiscriminatorHead, Network};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub id: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapStyle {
    /// 8-bit gray, `round(255·score)`.
    #[default]
    Gray,
    /// Viridis colormap.
    Color,
}

impl std::str::FromStr for MapStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(MapStyle::Gray),
            "color" => Ok(MapStyle::Color),
            other => Err(Error::Parameter(format!("unknown map style `{other}` (gray|color)"))),
        }
    }
}

fn require_per_pixel<T: Scalar>(d: &Network<T>) -> Result<()> {
    match d.head() {
        Some(DiscriminatorHead::PerPixel) => Ok(()),
        Some(DiscriminatorHead::SingleOutput) => Err(Error::UnsupportedHead(
            "score maps need a per-pixel discriminator".into(),
        )),
        None => Err(Error::Config(format!("expected a discriminator, got {:?}", d.kind()))),
    }
}

/// Per-pixel realness of one image (either domain).
pub fn score_map<T: Scalar>(img: &ImageBuffer<T>, discriminator: &Network<T>) -> Result<ScoreMap<T>> {
    Ok(score_maps(std::slice::from_ref(img), discriminator)?.remove(0))
}

/// Batched [`score_map`]; all images must share one size.
pub fn score_maps<T: Scalar>(imgs: &[ImageBuffer<T>], discriminator: &Network<T>) -> Result<Vec<ScoreMap<T>>> {
    require_per_pixel(discriminator)?;
    let signed: Vec<ImageBuffer<T>> = imgs
        .iter()
        .map(|i| match i.domain() {
            Domain::SignedUnit => Ok(i.clone()),
            Domain::Byte255 => i.to_signed_unit(),
        })
        .collect::<Result<_>>()?;
    let x = ImageBuffer::batch_tensor(&signed.iter().collect::<Vec<_>>())?;
    let y = discriminator.infer(&x)?;
    (0..y.batch()).map(|n| ScoreMap::from_tensor_item(&y, n)).collect()
}

/// Mean over every pixel, background included.
pub fn quality_score<T: Scalar>(map: &ScoreMap<T>) -> Result<f64> {
    map.mean()
        .ok_or_else(|| Error::Parameter("cannot score an empty map".into()))
}

// Polynomial fit of the viridis colormap, coefficients c0..c6 per channel.
const VIRIDIS: [[f64; 3]; 7] = [
    [0.277_727_327_223_417_7, 0.005_407_344_544_966_578, 0.334_099_805_335_306_1],
    [0.105_093_043_108_577_4, 1.404_613_529_898_575, 1.384_590_162_594_685],
    [-0.330_861_828_725_556_3, 0.214_847_559_468_213, 0.095_095_163_028_236_59],
    [-4.634_230_498_983_486, -5.799_100_973_351_585, -19.332_440_956_279_87],
    [6.228_269_936_347_081, 14.179_933_366_805_09, 56.690_552_600_681_05],
    [4.776_384_997_670_288, -13.745_145_377_746_01, -65.353_032_633_372_34],
    [-5.435_455_855_934_631, 4.645_852_612_178_535, 26.312_435_249_583_2],
];

pub fn viridis(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let v = VIRIDIS.iter().rev().fold(0.0, |acc, k| acc * t + k[c]);
        *o = (255.0 * v.clamp(0.0, 1.0)).round() as u8;
    }
    out
}

/// Renders `map` to `<dir>/<stem>_<qs>.png` with the quality score to four
/// decimals in the name. Returns the written path.
pub fn export_map<T: Scalar>(map: &ScoreMap<T>, dir: &Path, stem: &str, style: MapStyle) -> Result<PathBuf> {
    let qs = quality_score(map)?;
    let path = dir.join(format!("{stem}_{qs:.4}.png"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let img = match style {
        MapStyle::Gray => image::DynamicImage::ImageLuma8(map.to_gray8()),
        MapStyle::Color => {
            let raw = map.data().iter().flat_map(|v| viridis(v.f64())).collect();
            let rgb = image::RgbImage::from_raw(map.width() as u32, map.height() as u32, raw).expect("matching length");
            image::DynamicImage::ImageRgb8(rgb)
        }
    };
    write_atomic(&path, &encode_png(&img)?)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssessRow {
    pub id: String,
    pub qs: f64,
    /// Mean over the face mask when a `<id>.mask.png` sidecar exists.
    pub face_qs: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssessSummary {
    pub rows: Vec<AssessRow>,
    pub errors: Vec<(String, String)>,
    pub resolution: usize,
}

impl AssessSummary {
    pub fn mean_qs(&self) -> Option<f64> {
        (!self.rows.is_empty()).then(|| self.rows.iter().map(|r| r.qs).sum::<f64>() / self.rows.len() as f64)
    }

    /// Mean of the face-masked scores over rows that have a mask.
    pub fn mean_face_qs(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.face_qs).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `id,qs` CSV with polarity and resolution comments; failures are
    /// listed as trailing comments.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# polarity: higher");
        let _ = writeln!(out, "# resolution: {}", self.resolution);
        out.push_str("id,qs\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.8}", r.id, r.qs);
        }
        for (id, e) in &self.errors {
            let _ = writeln!(out, "# error: {id}: {}", e.replace('\n', " "));
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct AssessOptions {
    /// Export interpretability maps here.
    pub maps: Option<PathBuf>,
    pub style: MapStyle,
}

fn is_image(path: &Path) -> bool {
    let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
    if name.ends_with(".mask.png") {
        return false;
    }
    matches!(
        path.extension().map(|e| e.to_string_lossy().to_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Assesses every image below `dir` at the discriminator's training
/// resolution and writes the CSV atomically. Ids are relative paths
/// without extension, using `/` separators.
pub fn batch_assess<T: Scalar>(
    dir: &Path,
    discriminator: &Network<T>,
    out_csv: &Path,
    opts: &AssessOptions,
) -> Result<AssessSummary> {
    require_per_pixel(discriminator)?;
    let res = discriminator.config().resolution;
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if !entry.file_type().is_file() || !is_image(entry.path()) {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays below root");
        let id = rel
            .with_extension("")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        files.push((id, entry.path().to_path_buf()));
    }
    files.sort();

    let mut summary = AssessSummary {
        resolution: res,
        ..Default::default()
    };
    for (id, path) in files {
        let img = match image::open(&path) {
            Ok(i) => ImageBuffer::<T>::from_rgb8(&i.to_rgb8(), Role::Hq).resize(res, res),
            Err(e) => {
                log::warn!("{id}: {e}");
                summary.errors.push((id, e.to_string()));
                continue;
            }
        };
        let map = score_map(&img, discriminator)?;
        let qs = quality_score(&map)?;
        let mask_path = path.with_extension("mask.png");
        let face_qs = match image::open(&mask_path) {
            Ok(m) => map.masked_mean(&MaskMap::from_gray8(&m.to_luma8()).resize(res, res))?,
            Err(_) => None,
        };
        if let Some(maps) = &opts.maps {
            export_map(&map, maps, &id, opts.style)?;
        }
        summary.rows.push(AssessRow { id, qs, face_qs });
    }
    write_atomic(out_csv, summary.to_csv().as_bytes())?;
    Ok(summary)
}
