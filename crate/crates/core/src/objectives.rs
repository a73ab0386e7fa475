//! Least-squares adversarial, pixel and perceptual losses.
//!
//! Every loss returns its value together with the gradient with respect to
//! its network-output arguments, ready to seed [`Graph::backward`].
//! Reductions accumulate in `f64` in row-major order.
//!
//! [`Graph::backward`]: crate::nn::Graph::backward

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{DiscriminatorHead, Network};
use crate::nn::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_pix: f64,
    pub lambda_vgg_style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pix: 50.0,
            lambda_vgg_style: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pix >= 0.0 && self.lambda_vgg_style >= 0.0) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// How the pixel term reads `‖RF − HQ‖₂`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelNorm {
    /// Mean squared error per element.
    #[default]
    Mse,
    /// Per-image Euclidean norm, averaged over the batch.
    L2,
}

/// Scalar loss and its gradient with respect to one input.
#[derive(Clone, Debug)]
pub struct Loss<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn nonempty<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.is_empty() {
        return Err(Error::Parameter(format!("empty {what} batch")));
    }
    Ok(())
}

/// `mean((d − target)²)` and its gradient.
fn squared_error<T: Scalar>(d: &Tensor<T>, target: impl Fn(usize) -> f64) -> Loss<T> {
    let n = d.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(d.len());
    for (i, v) in d.data().iter().enumerate() {
        let e = v.f64() - target(i);
        sum += e * e;
        grad.push(T::lit(2.0 * e / n));
    }
    Loss {
        value: sum / n,
        grad: Tensor::from_vec(d.shape(), grad).expect("same shape"),
    }
}

/// Generator side: `mean((d − 1)²)` over batch and pixels.
pub fn adv_g_loss<T: Scalar>(d_map: &Tensor<T>) -> Result<Loss<T>> {
    nonempty(d_map, "discriminator output")?;
    Ok(squared_error(d_map, |_| 1.0))
}

/// Pixel loss with the default (MSE) reading.
pub fn pixel_loss<T: Scalar>(rf: &Tensor<T>, hq: &Tensor<T>) -> Result<Loss<T>> {
    pixel_loss_with(rf, hq, PixelNorm::Mse)
}

pub fn pixel_loss_with<T: Scalar>(rf: &Tensor<T>, hq: &Tensor<T>, norm: PixelNorm) -> Result<Loss<T>> {
    check_same(rf, hq)?;
    nonempty(rf, "image")?;
    match norm {
        PixelNorm::Mse => Ok(squared_error(rf, |i| hq.data()[i].f64())),
        PixelNorm::L2 => {
            let n = rf.batch() as f64;
            let mut value = 0.0;
            let mut grad = Vec::with_capacity(rf.len());
            for b in 0..rf.batch() {
                let diff: Vec<f64> = rf.item(b).iter().zip(hq.item(b)).map(|(a, h)| a.f64() - h.f64()).collect();
                let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
                value += norm / n;
                let scale = if norm > 0.0 { 1.0 / (n * norm) } else { 0.0 };
                grad.extend(diff.iter().map(|d| T::lit(d * scale)));
            }
            Ok(Loss {
                value,
                grad: Tensor::from_vec(rf.shape(), grad)?,
            })
        }
    }
}

/// `Σ_stages mean|f(rf) − f(hq)|` from precomputed stage outputs, with the
/// gradient for each `rf` stage (sign convention `sign(0) = 0`).
pub fn perceptual_from_features<T: Scalar>(rf: &[Tensor<T>], hq: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
    if rf.len() != hq.len() || rf.is_empty() {
        return Err(Error::Shape(format!("{} vs {} feature stages", rf.len(), hq.len())));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(rf.len());
    for (a, b) in rf.iter().zip(hq) {
        check_same(a, b)?;
        nonempty(a, "feature")?;
        let n = a.len() as f64;
        let mut sum = 0.0;
        let mut g = Vec::with_capacity(a.len());
        for (x, y) in a.data().iter().zip(b.data()) {
            let d = x.f64() - y.f64();
            sum += d.abs();
            g.push(T::lit(if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }));
        }
        total += sum / n;
        grads.push(Tensor::from_vec(a.shape(), g)?);
    }
    Ok((total, grads))
}

/// Perceptual loss value through a frozen feature extractor.
pub fn perceptual_loss<T: Scalar>(rf: &Tensor<T>, hq: &Tensor<T>, feat: &Network<T>) -> Result<f64> {
    check_same(rf, hq)?;
    Ok(perceptual_from_features(&feat.infer_features(rf)?, &feat.infer_features(hq)?)?.0)
}

/// Discriminator loss and gradients for both pools.
#[derive(Clone, Debug)]
pub struct DLoss<T> {
    pub value: f64,
    pub real: f64,
    pub fake: f64,
    pub grad_real: Tensor<T>,
    pub grad_fake: Tensor<T>,
}

/// `mean((d_real − target)²) + mean(d_fake²)`; targets must be binary.
pub fn adv_d_loss<T: Scalar>(d_real: &Tensor<T>, real_target: &Tensor<T>, d_fake: &Tensor<T>) -> Result<DLoss<T>> {
    check_same(d_real, real_target)?;
    nonempty(d_real, "real")?;
    nonempty(d_fake, "fake")?;
    if d_real.channels() != d_fake.channels() || d_real.spatial() != d_fake.spatial() {
        return Err(Error::Shape(format!("real {:?} vs fake {:?}", d_real.shape(), d_fake.shape())));
    }
    if !real_target.data().iter().all(|v| *v == T::zero() || *v == T::one()) {
        return Err(Error::Parameter("real target must be binary".into()));
    }
    let real = squared_error(d_real, |i| real_target.data()[i].f64());
    let fake = squared_error(d_fake, |_| 0.0);
    Ok(DLoss {
        value: real.value + fake.value,
        real: real.value,
        fake: fake.value,
        grad_real: real.grad,
        grad_fake: fake.grad,
    })
}

/// `adv + λ_pix·pix + λ_vgg·perc`.
pub fn total_g_loss(adv: f64, pix: f64, perc: f64, w: &LossWeights) -> f64 {
    adv + w.lambda_pix * pix + w.lambda_vgg_style * perc
}

/// Realness penalty `mean((D(images) − 1)²)` for use as a training term
/// in other restoration pipelines. Needs a per-pixel discriminator.
pub fn ifqa_realness_loss<T: Scalar>(images: &Tensor<T>, discriminator: &Network<T>) -> Result<f64> {
    match discriminator.head() {
        Some(DiscriminatorHead::PerPixel) => {}
        Some(DiscriminatorHead::SingleOutput) => {
            return Err(Error::UnsupportedHead("realness loss needs a per-pixel discriminator".into()))
        }
        None => {
            return Err(Error::Config(format!(
                "expected a discriminator, got {:?}",
                discriminator.kind()
            )))
        }
    }
    Ok(adv_g_loss(&discriminator.infer(images)?)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{build_discriminator, NetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full(v: f64) -> Tensor<f64> {
        Tensor::full([2, 1, 4, 4], v)
    }

    fn rand_t(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn adversarial_generator_values() {
        assert_eq!(adv_g_loss(&full(1.0)).unwrap().value, 0.0);
        assert_eq!(adv_g_loss(&full(0.0)).unwrap().value, 1.0);
        assert_eq!(adv_g_loss(&full(0.5)).unwrap().value, 0.25);
        assert!(adv_g_loss(&Tensor::<f64>::zeros([0, 1, 4, 4])).is_err());
    }

    #[test]
    fn pixel_values() {
        let hq = rand_t(1, [2, 3, 4, 4]);
        assert_eq!(pixel_loss(&hq, &hq).unwrap().value, 0.0);
        let shifted = hq.map(|v| v + 0.25);
        assert!((pixel_loss(&shifted, &hq).unwrap().value - 0.0625).abs() < 1e-12);
        let rf = rand_t(2, [2, 3, 4, 4]);
        let mut brute = 0.0;
        for i in 0..rf.len() {
            brute += (rf.data()[i] - hq.data()[i]).powi(2);
        }
        assert!((pixel_loss(&rf, &hq).unwrap().value - brute / rf.len() as f64).abs() < 1e-12);
        assert!(matches!(pixel_loss(&rf, &rand_t(3, [2, 3, 4, 2])), Err(Error::Shape(_))));
    }

    #[test]
    fn unsquared_pixel_norm() {
        let hq = Tensor::<f64>::zeros([1, 1, 1, 2]);
        let rf = Tensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        let l = pixel_loss_with(&rf, &hq, PixelNorm::L2).unwrap();
        assert_eq!(l.value, 5.0);
        assert!((l.grad.data()[0] - 0.6).abs() < 1e-15 && (l.grad.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn perceptual_symmetry_and_identity_extractor() {
        let a = rand_t(4, [2, 3, 8, 8]);
        let b = rand_t(5, [2, 3, 8, 8]);
        let ab = perceptual_from_features(&[a.clone()], &[b.clone()]).unwrap().0;
        let ba = perceptual_from_features(&[b.clone()], &[a.clone()]).unwrap().0;
        assert_eq!(ab, ba);
        let mae = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!((ab - mae).abs() < 1e-12);
        assert_eq!(perceptual_from_features(&[a.clone()], &[a.clone()]).unwrap().0, 0.0);
    }

    #[test]
    fn discriminator_values() {
        let mut target = Tensor::<f64>::zeros([1, 1, 4, 4]);
        for v in &mut target.data_mut()[..4] {
            *v = 1.0;
        }
        let zero = Tensor::zeros([1, 1, 4, 4]);
        assert_eq!(adv_d_loss(&target, &target, &zero).unwrap().value, 0.0);
        // all-ones output with a quarter-face target pays only off the face
        let ones = Tensor::full([1, 1, 4, 4], 1.0);
        assert!((adv_d_loss(&ones, &target, &zero).unwrap().value - 0.75).abs() < 1e-12);
        let half = Tensor::full([1, 1, 4, 4], 0.5);
        assert_eq!(adv_d_loss(&target, &target, &half).unwrap().value, 0.25);
        let bad = Tensor::full([1, 1, 4, 4], 0.3);
        assert!(matches!(adv_d_loss(&ones, &bad, &zero), Err(Error::Parameter(_))));
    }

    #[test]
    fn total_weights() {
        let w = LossWeights::default();
        assert_eq!(total_g_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert_eq!(total_g_loss(1.0, 1.0, 1.0, &w), 56.0);
        let off = LossWeights {
            lambda_pix: 0.0,
            lambda_vgg_style: 0.0,
        };
        assert_eq!(total_g_loss(0.7, 3.0, 9.0, &off), 0.7);
    }

    #[test]
    fn realness_requires_per_pixel_head() {
        let mut cfg = NetConfig::tiny();
        let x = Tensor::<f32>::zeros([1, 3, 8, 8]);
        let d = build_discriminator::<f32>(&cfg, 0).unwrap();
        let v = ifqa_realness_loss(&x, &d).unwrap();
        let direct = adv_g_loss(&d.infer(&x).unwrap()).unwrap().value;
        assert_eq!(v, direct);
        cfg.discriminator_head = DiscriminatorHead::SingleOutput;
        let d = build_discriminator::<f32>(&cfg, 0).unwrap();
        assert!(matches!(ifqa_realness_loss(&x, &d), Err(Error::UnsupportedHead(_))));
    }

    #[test]
    fn analytic_loss_gradients_match_differences() {
        let d = rand_t(6, [2, 1, 4, 4]).map(|v| 0.5 + 0.4 * v);
        let t = rand_t(7, [2, 1, 4, 4]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let f = rand_t(8, [2, 1, 4, 4]).map(|v| 0.5 + 0.4 * v);
        let l = adv_d_loss(&d, &t, &f).unwrap();
        let h = 1e-6;
        for i in 0..d.len() {
            let mut p = d.clone();
            p.data_mut()[i] += h;
            let mut m = d.clone();
            m.data_mut()[i] -= h;
            let num = (adv_d_loss(&p, &t, &f).unwrap().value - adv_d_loss(&m, &t, &f).unwrap().value) / (2.0 * h);
            assert!((num - l.grad_real.data()[i]).abs() < 1e-8);
        }
    }
}
