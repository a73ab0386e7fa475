use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FaceSample, ImageBuffer, MaskMap, RegionBoxSet, Role};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleError {
    pub id: String,
    pub reason: String,
}

/// Outcome of [`load_dataset`].
#[derive(Debug)]
pub struct LoadReport<T> {
    /// Valid samples in lexicographic id order.
    pub samples: Vec<FaceSample<T>>,
    /// Samples rejected for missing or malformed sidecars.
    pub errors: Vec<SampleError>,
    /// Images that failed to decode and were skipped.
    pub corrupt: usize,
}

/// Writes `<id>.png`, `<id>.regions.json` and `<id>.mask.png` per sample.
pub fn save_dataset<T: Scalar>(root: &Path, samples: &[FaceSample<T>]) -> Result<()> {
    fs::create_dir_all(root)?;
    for s in samples {
        let png = encode_png(&image::DynamicImage::ImageRgb8(s.image.to_rgb8()?))?;
        write_atomic(&root.join(format!("{}.png", s.id)), &png)?;
        let mask = encode_png(&image::DynamicImage::ImageLuma8(s.face_mask.to_gray8()))?;
        write_atomic(&root.join(format!("{}.mask.png", s.id)), &mask)?;
        write_atomic(
            &root.join(format!("{}.regions.json", s.id)),
            &serde_json::to_vec_pretty(&s.regions)?,
        )?;
    }
    Ok(())
}

pub(crate) fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Ids of `<id>.png` files directly under `root` (masks excluded), sorted.
pub(crate) fn image_ids(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".png") {
            if !id.ends_with(".mask") {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads every sample under `root`, resizing images and masks to
/// `resolution` (masks are re-thresholded at 0.5 after resizing).
pub fn load_dataset<T: Scalar>(root: &Path, resolution: usize) -> Result<LoadReport<T>> {
    let mut report = LoadReport {
        samples: Vec::new(),
        errors: Vec::new(),
        corrupt: 0,
    };
    for id in image_ids(root)? {
        let img = match image::open(root.join(format!("{id}.png"))) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping corrupt image {id}: {e}");
                report.corrupt += 1;
                continue;
            }
        };
        match load_sidecars(root, &id) {
            Ok((regions, mask)) => {
                let image = ImageBuffer::from_rgb8(&img, Role::Hq).resize(resolution, resolution);
                let mask = if mask.height() == img.height() as usize && mask.width() == img.width() as usize {
                    mask.resize(resolution, resolution)
                } else {
                    report.errors.push(SampleError {
                        id,
                        reason: "mask size differs from image size".into(),
                    });
                    continue;
                };
                report.samples.push(FaceSample {
                    id,
                    image,
                    regions,
                    face_mask: mask,
                });
            }
            Err(reason) => report.errors.push(SampleError { id, reason }),
        }
    }
    Ok(report)
}

fn load_sidecars(root: &Path, id: &str) -> std::result::Result<(RegionBoxSet, MaskMap), String> {
    let regions_path = root.join(format!("{id}.regions.json"));
    let mask_path = root.join(format!("{id}.mask.png"));
    let regions = fs::read(&regions_path).map_err(|_| format!("missing {id}.regions.json"))?;
    let regions: RegionBoxSet =
        serde_json::from_slice(&regions).map_err(|e| format!("bad {id}.regions.json: {e}"))?;
    if !mask_path.exists() {
        return Err(format!("missing {id}.mask.png"));
    }
    let mask = image::open(&mask_path).map_err(|e| format!("bad {id}.mask.png: {e}"))?;
    Ok((regions, MaskMap::from_gray8(&mask.to_luma8())))
}

/// Seeded shuffle into `(train, validation)`; validation takes
/// `round(val_fraction · n)` samples but never all of them.
pub fn split_dataset<T: Clone>(samples: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0,1)")));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((val_fraction * samples.len() as f64).round() as usize).min(samples.len().saturating_sub(1));
    let val = idx[..n_val].iter().map(|&i| samples[i].clone()).collect();
    let mut train_idx = idx[n_val..].to_vec();
    train_idx.sort_unstable();
    let train = train_idx.into_iter().map(|i| samples[i].clone()).collect();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facedata::synth_faces;

    #[test]
    fn empty_directory_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let rep = load_dataset::<f32>(dir.path(), 64).unwrap();
        assert!(rep.samples.is_empty() && rep.errors.is_empty() && rep.corrupt == 0);
    }

    #[test]
    fn save_then_load_is_pixel_identical() {
        let dir = tempfile::tempdir().unwrap();
        let faces = synth_faces::<f32>(11, 20, 64).unwrap();
        save_dataset(dir.path(), &faces).unwrap();
        let rep = load_dataset::<f32>(dir.path(), 64).unwrap();
        assert!(rep.errors.is_empty());
        assert_eq!(rep.samples.len(), 20);
        for (a, b) in faces.iter().zip(&rep.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image, b.image);
            assert_eq!(a.face_mask, b.face_mask);
            assert_eq!(a.regions, b.regions);
        }
    }

    #[test]
    fn missing_mask_is_reported_per_sample() {
        let dir = tempfile::tempdir().unwrap();
        let faces = synth_faces::<f32>(1, 4, 32).unwrap();
        save_dataset(dir.path(), &faces).unwrap();
        fs::remove_file(dir.path().join(format!("{}.mask.png", faces[2].id))).unwrap();
        fs::write(dir.path().join("zz_corrupt.png"), b"not a png").unwrap();
        let rep = load_dataset::<f32>(dir.path(), 32).unwrap();
        assert_eq!(rep.samples.len(), 3);
        assert_eq!(rep.errors.len(), 1);
        assert_eq!(rep.errors[0].id, faces[2].id);
        assert_eq!(rep.corrupt, 1);
    }

    #[test]
    fn load_resizes_and_keeps_masks_binary() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &synth_faces::<f32>(2, 2, 64).unwrap()).unwrap();
        let rep = load_dataset::<f32>(dir.path(), 32).unwrap();
        for s in &rep.samples {
            assert_eq!((s.image.height(), s.face_mask.width()), (32, 32));
            assert!(s.face_mask.data().iter().all(|&v| v <= 1));
            s.validate().unwrap();
        }
    }

    #[test]
    fn default_split_is_95_5() {
        let items: Vec<usize> = (0..100).collect();
        let (train, val) = split_dataset(&items, 0.05, 3).unwrap();
        assert_eq!((train.len(), val.len()), (95, 5));
        let (train2, val2) = split_dataset(&items, 0.05, 3).unwrap();
        assert_eq!((train, val), (train2, val2));
        let (t, v) = split_dataset(&[1], 0.5, 0).unwrap();
        assert_eq!((t.len(), v.len()), (1, 0));
    }
}
