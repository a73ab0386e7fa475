//! Facial primary region swaps, pixel-level real/fake targets and the
//! CutMix baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facedata::{Domain, ImageBuffer, MaskMap, NormBox, Region, RegionBoxSet, Role, ScoreMap};
use crate::scalar::Scalar;

/// Which regions one swap exchanges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapSpec {
    selected_regions: Vec<Region>,
    pub seed: u64,
}

impl SwapSpec {
    /// Sorted and deduplicated; an empty selection is rejected.
    pub fn new(regions: impl IntoIterator<Item = Region>, seed: u64) -> Result<Self> {
        let mut selected_regions: Vec<Region> = regions.into_iter().collect();
        selected_regions.sort();
        selected_regions.dedup();
        if selected_regions.is_empty() {
            return Err(Error::Parameter("swap selection must name at least one region".into()));
        }
        Ok(SwapSpec { selected_regions, seed })
    }

    /// Uniform over the 15 non-empty subsets.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let bits: u8 = rng.random_range(1..16);
        let selected_regions = Region::ALL
            .into_iter()
            .enumerate()
            .filter(|(i, _)| bits & (1 << i) != 0)
            .map(|(_, r)| r)
            .collect();
        SwapSpec {
            selected_regions,
            seed: rng.random(),
        }
    }

    pub fn regions(&self) -> &[Region] {
        &self.selected_regions
    }
}

/// A training image with its per-pixel target.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedPair<T> {
    pub image: ImageBuffer<T>,
    pub target: ScoreMap<T>,
}

/// Union of the selected boxes on an `height×width` grid (pixel centers).
pub fn region_mask(regions: &RegionBoxSet, spec: &SwapSpec, height: usize, width: usize) -> Result<MaskMap> {
    if spec.selected_regions.is_empty() {
        return Err(Error::Parameter("empty region selection".into()));
    }
    let boxes: Vec<&NormBox> = spec.selected_regions.iter().map(|&r| regions.get(r)).collect();
    Ok(MaskMap::from_fn(height, width, |y, x| {
        boxes.iter().any(|b| b.covers_pixel(y, x, height, width))
    }))
}

fn check_pair<T: Scalar>(hq: &ImageBuffer<T>, other: &ImageBuffer<T>, mask: &MaskMap) -> Result<()> {
    if !hq.same_shape(other) {
        return Err(Error::Shape(format!(
            "{}×{} vs {}×{}",
            hq.height(),
            hq.width(),
            other.height(),
            other.width()
        )));
    }
    if hq.domain() != other.domain() {
        return Err(Error::domain(format!("{:?}", hq.domain()), format!("{:?}", other.domain())));
    }
    mask.check_shape(hq.height(), hq.width())
}

fn select<T: Scalar>(mask: &MaskMap, inside: &ImageBuffer<T>, outside: &ImageBuffer<T>) -> ImageBuffer<T> {
    let data = mask
        .data()
        .iter()
        .enumerate()
        .flat_map(|(p, &m)| {
            let src = if m == 1 { inside } else { outside };
            src.data()[p * 3..p * 3 + 3].iter().copied()
        })
        .collect();
    ImageBuffer::from_parts(inside.height(), inside.width(), inside.domain(), Role::Mixed, data)
}

/// Returns `(M⊙hq + (1−M)⊙other, M⊙other + (1−M)⊙hq)`, both tagged mixed.
///
/// `hq` may itself be a mixed image so that a second swap with the same
/// mask undoes the first.
pub fn fprs_swap<T: Scalar>(
    hq: &ImageBuffer<T>,
    other: &ImageBuffer<T>,
    mask: &MaskMap,
) -> Result<(ImageBuffer<T>, ImageBuffer<T>)> {
    check_pair(hq, other, mask)?;
    if matches!(hq.role(), Role::Lq | Role::Rf) {
        return Err(Error::Parameter(format!("swap source must be HQ, got {:?}", hq.role())));
    }
    if other.role() == Role::Hq {
        return Err(Error::Parameter("swap partner must be LQ or RF".into()));
    }
    Ok((select(mask, hq, other), select(mask, other, hq)))
}

/// Real (1) where the pixel comes from the HQ image and lies on the face.
/// `hq_inside_mask` says whether HQ content sits inside `mask_fprs` (first
/// swap output) or outside it (second output).
pub fn supervision_target<T: Scalar>(mask_fprs: &MaskMap, face_mask: &MaskMap, hq_inside_mask: bool) -> Result<ScoreMap<T>> {
    let hq_area = if hq_inside_mask {
        mask_fprs.clone()
    } else {
        mask_fprs.complement()
    };
    Ok(ScoreMap::from_mask(&hq_area.and(face_mask)?))
}

/// Target for an unmixed image: the face mask for HQ, zeros otherwise.
pub fn pure_target<T: Scalar>(role: Role, face_mask: &MaskMap) -> Result<ScoreMap<T>> {
    match role {
        Role::Hq => Ok(ScoreMap::from_mask(face_mask)),
        Role::Lq | Role::Rf => Ok(ScoreMap::from_mask(&MaskMap::zeros(face_mask.height(), face_mask.width()))),
        Role::Mixed => Err(Error::Parameter("mixed images need a swap mask".into())),
    }
}

/// Both swap outputs of one HQ/partner pair with their targets.
pub fn fprs_pairs<T: Scalar>(
    hq: &ImageBuffer<T>,
    other: &ImageBuffer<T>,
    regions: &RegionBoxSet,
    face_mask: &MaskMap,
    spec: &SwapSpec,
) -> Result<[SupervisedPair<T>; 2]> {
    let mask = region_mask(regions, spec, hq.height(), hq.width())?;
    let (hq_in, hq_out) = fprs_swap(hq, other, &mask)?;
    Ok([
        SupervisedPair {
            image: hq_in,
            target: supervision_target(&mask, face_mask, true)?,
        },
        SupervisedPair {
            image: hq_out,
            target: supervision_target(&mask, face_mask, false)?,
        },
    ])
}

/// Bilinear sample at continuous pixel coordinates (pixel centers at
/// `i + 0.5`), clamped at the border.
fn bilinear<T: Scalar>(img: &ImageBuffer<T>, y: f64, x: f64, c: usize) -> f64 {
    let (h, w) = (img.height(), img.width());
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let p = |yy, xx| img.get(yy, xx, c).f64();
    let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
    let bottom = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// RoIAlign crop: one bilinear sample at the center of each of the
/// `out_size×out_size` bins covering `bx`. Works in the signed-unit domain
/// (byte images are converted first), so sampled values are never rounded.
pub fn crop_region_roialign<T: Scalar>(img: &ImageBuffer<T>, bx: &NormBox, out_size: usize) -> Result<ImageBuffer<T>> {
    bx.validate()?;
    if out_size == 0 {
        return Err(Error::Parameter("crop size must be positive".into()));
    }
    let img = match img.domain() {
        Domain::SignedUnit => img.clone(),
        Domain::Byte255 => img.to_signed_unit()?,
    };
    let (h, w) = (img.height() as f64, img.width() as f64);
    let (y0, x0) = (bx.y0 * h, bx.x0 * w);
    let (bin_h, bin_w) = ((bx.y1 - bx.y0) * h / out_size as f64, (bx.x1 - bx.x0) * w / out_size as f64);
    let mut data = Vec::with_capacity(out_size * out_size * 3);
    for i in 0..out_size {
        let y = y0 + (i as f64 + 0.5) * bin_h;
        for j in 0..out_size {
            let x = x0 + (j as f64 + 0.5) * bin_w;
            for c in 0..3 {
                data.push(T::lit(bilinear(&img, y, x, c)));
            }
        }
    }
    Ok(ImageBuffer::from_parts(out_size, out_size, Domain::SignedUnit, img.role(), data))
}

/// Rectangle covering area ratio `lambda` (side ratio `√λ`) whose top-left
/// corner sits at fraction `(fy, fx)` of the free range.
pub fn cutmix_mask(height: usize, width: usize, lambda: f64, fy: f64, fx: f64) -> MaskMap {
    let side = lambda.clamp(0.0, 1.0).sqrt();
    let ph = (side * height as f64).round() as usize;
    let pw = (side * width as f64).round() as usize;
    let y0 = (fy.clamp(0.0, 1.0) * (height - ph) as f64).floor() as usize;
    let x0 = (fx.clamp(0.0, 1.0) * (width - pw) as f64).floor() as usize;
    MaskMap::from_fn(height, width, |y, x| {
        (y0..y0 + ph).contains(&y) && (x0..x0 + pw).contains(&x)
    })
}

/// Pastes one random rectangle of `other` into `hq`. The returned mask
/// marks the pasted pixels, so the matching target is
/// `supervision_target(mask, face, false)`.
pub fn cutmix_swap<T: Scalar, R: Rng + ?Sized>(
    hq: &ImageBuffer<T>,
    other: &ImageBuffer<T>,
    rng: &mut R,
) -> Result<(ImageBuffer<T>, MaskMap)> {
    let lambda: f64 = rng.random();
    let (fy, fx): (f64, f64) = (rng.random(), rng.random());
    let mask = cutmix_mask(hq.height(), hq.width(), lambda, fy, fx);
    check_pair(hq, other, &mask)?;
    Ok((select(&mask, other, hq), mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facedata::synth_faces;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, role: Role, mut f: impl FnMut(usize, usize, usize) -> f64) -> ImageBuffer<f64> {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageBuffer::new(h, w, Domain::SignedUnit, role, data).unwrap()
    }

    fn boxes() -> RegionBoxSet {
        RegionBoxSet {
            left_eye: NormBox::new(0.5, 0.0, 0.75, 0.25).unwrap(),
            right_eye: NormBox::new(0.0, 0.0, 0.25, 0.25).unwrap(),
            nose: NormBox::new(0.25, 0.25, 0.75, 0.5).unwrap(),
            mouth: NormBox::new(0.25, 0.75, 0.75, 1.0).unwrap(),
        }
    }

    #[test]
    fn empty_selection_is_rejected() {
        assert!(matches!(SwapSpec::new([], 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn disjoint_union_area() {
        let spec = SwapSpec::new(Region::ALL, 0).unwrap();
        let m = region_mask(&boxes(), &spec, 16, 16).unwrap();
        assert_eq!(m.area(), 16 + 16 + 32 + 32);
    }

    #[test]
    fn overlapping_union_is_idempotent() {
        let mut b = boxes();
        b.left_eye = b.right_eye;
        let both = SwapSpec::new([Region::LeftEye, Region::RightEye], 0).unwrap();
        let one = SwapSpec::new([Region::RightEye], 0).unwrap();
        assert_eq!(region_mask(&b, &both, 16, 16).unwrap(), region_mask(&b, &one, 16, 16).unwrap());
    }

    #[test]
    fn nose_mask_matches_direct_rasterization() {
        let s = synth_faces::<f32>(4, 1, 64).unwrap().remove(0);
        let spec = SwapSpec::new([Region::Nose], 1).unwrap();
        let m = region_mask(&s.regions, &spec, 64, 64).unwrap();
        let n = s.regions.nose;
        for y in 0..64 {
            for x in 0..64 {
                let (u, v) = ((x as f64 + 0.5) / 64.0, (y as f64 + 0.5) / 64.0);
                let inside = u >= n.x0 && u < n.x1 && v >= n.y0 && v < n.y1;
                assert_eq!(m.get(y, x), inside, "({y},{x})");
            }
        }
    }

    #[test]
    fn trivial_masks() {
        let hq = img(4, 4, Role::Hq, |y, x, c| (y + x + c) as f64 / 10.0);
        let lq = img(4, 4, Role::Lq, |y, x, _| -(y as f64 * x as f64) / 20.0);
        let (a, b) = fprs_swap(&hq, &lq, &MaskMap::zeros(4, 4)).unwrap();
        assert_eq!((a.data(), b.data()), (lq.data(), hq.data()));
        let (a, b) = fprs_swap(&hq, &lq, &MaskMap::ones(4, 4)).unwrap();
        assert_eq!((a.data(), b.data()), (hq.data(), lq.data()));
        assert_eq!((a.role(), b.role()), (Role::Mixed, Role::Mixed));
    }

    #[test]
    fn swap_rejects_mismatches() {
        let hq = img(4, 4, Role::Hq, |_, _, _| 0.0);
        let lq = img(4, 2, Role::Lq, |_, _, _| 0.0);
        assert!(matches!(fprs_swap(&hq, &lq, &MaskMap::zeros(4, 4)), Err(Error::Shape(_))));
        let lq = img(4, 4, Role::Lq, |_, _, _| 0.0);
        assert!(fprs_swap(&hq, &lq, &MaskMap::zeros(2, 2)).is_err());
        assert!(fprs_swap(&lq, &hq, &MaskMap::zeros(4, 4)).is_err());
    }

    #[test]
    fn pure_targets() {
        let face = MaskMap::from_fn(6, 6, |y, x| y > 1 && x < 4);
        let t: ScoreMap<f32> = pure_target(Role::Hq, &face).unwrap();
        assert_eq!(t, ScoreMap::from_mask(&face));
        let t: ScoreMap<f32> = pure_target(Role::Lq, &face).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
        let t: ScoreMap<f32> = supervision_target(&MaskMap::ones(6, 6), &face, true).unwrap();
        assert_eq!(t, ScoreMap::from_mask(&face));
    }

    #[test]
    fn roialign_aligned_box_copies_pixels() {
        let im = img(8, 8, Role::Hq, |y, x, c| (y * 8 + x) as f64 / 64.0 - c as f64 * 0.1);
        let bx = NormBox::new(0.25, 0.5, 0.75, 1.0).unwrap();
        let p = crop_region_roialign(&im, &bx, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..3 {
                    assert_eq!(p.get(i, j, c), im.get(4 + i, 2 + j, c));
                }
            }
        }
    }

    #[test]
    fn roialign_constant_and_ramp() {
        let k = img(8, 8, Role::Hq, |_, _, _| 0.3);
        let p = crop_region_roialign(&k, &NormBox::new(0.13, 0.07, 0.61, 0.9).unwrap(), 5).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

        // ramp value = 0.1·x at pixel center x+0.5; box shifted half a pixel
        // right, 4 bins of one pixel each: sample points at x = 2.0..5.0
        let ramp = img(8, 8, Role::Hq, |_, x, _| 0.1 * x as f64);
        let bx = NormBox::new(1.5 / 8.0, 0.0, 5.5 / 8.0, 1.0).unwrap();
        let p = crop_region_roialign(&ramp, &bx, 4).unwrap();
        for j in 0..4 {
            // sample at x = 2 + j lies between pixels 1+j and 2+j with weight 0.5
            let want = 0.5 * (0.1 * (1 + j) as f64) + 0.5 * (0.1 * (2 + j) as f64);
            for i in 0..4 {
                assert!((p.get(i, j, 0) - want).abs() < 1e-12, "{} vs {want}", p.get(i, j, 0));
            }
        }
    }

    #[test]
    fn roialign_rejects_degenerate_box() {
        let im = img(4, 4, Role::Hq, |_, _, _| 0.0);
        let bad = NormBox {
            x0: 0.5,
            y0: 0.2,
            x1: 0.5,
            y1: 0.6,
        };
        assert!(matches!(crop_region_roialign(&im, &bad, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn cutmix_extremes_and_determinism() {
        let hq = img(8, 8, Role::Hq, |y, _, _| y as f64 / 10.0);
        let lq = img(8, 8, Role::Lq, |_, x, _| -(x as f64) / 10.0);
        assert_eq!(cutmix_mask(8, 8, 0.0, 0.3, 0.9).area(), 0);
        assert_eq!(cutmix_mask(8, 8, 1.0, 0.3, 0.9).area(), 64);
        let a = cutmix_swap(&hq, &lq, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = cutmix_swap(&hq, &lq, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for y in 0..8 {
            for x in 0..8 {
                let src = if a.1.get(y, x) { &lq } else { &hq };
                assert_eq!(a.0.get(y, x, 0), src.get(y, x, 0));
            }
        }
    }

    #[test]
    fn random_specs_cover_all_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            let s = SwapSpec::random(&mut rng);
            assert!(!s.regions().is_empty());
            seen.insert(s.regions().to_vec());
        }
        assert_eq!(seen.len(), 15);
    }

    proptest! {
        #[test]
        fn swap_is_complementary_and_involutive(
            seed in any::<u64>(),
            bits in proptest::collection::vec(0u8..2, 36),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hq = img(6, 6, Role::Hq, |_, _, _| rng.random_range(-1.0..1.0));
            let lq = img(6, 6, Role::Rf, |_, _, _| rng.random_range(-1.0..1.0));
            let mask = MaskMap::new(6, 6, bits).unwrap();
            let (a, b) = fprs_swap(&hq, &lq, &mask).unwrap();
            for i in 0..hq.data().len() {
                prop_assert_eq!(a.data()[i] + b.data()[i], hq.data()[i] + lq.data()[i]);
            }
            let (a2, b2) = fprs_swap(&a, &b, &mask).unwrap();
            prop_assert_eq!(a2.data(), hq.data());
            prop_assert_eq!(b2.data(), lq.data());
        }

        #[test]
        fn targets_are_binary_and_under_the_face(
            seed in any::<u64>(),
            inside in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = synth_faces::<f32>(seed % 1000, 1, 32).unwrap().remove(0);
            let spec = SwapSpec::random(&mut rng);
            let m = region_mask(&s.regions, &spec, 32, 32).unwrap();
            let all = region_mask(&s.regions, &SwapSpec::new(Region::ALL, 0).unwrap(), 32, 32).unwrap();
            prop_assert_eq!(m.and(&all).unwrap(), m.clone());
            let t: ScoreMap<f32> = supervision_target(&m, &s.face_mask, inside).unwrap();
            prop_assert!(t.is_binary());
            for (v, &f) in t.data().iter().zip(s.face_mask.data()) {
                prop_assert!(*v <= f as f32);
            }
        }
    }
}
