//! Alternating least-squares adversarial training of the generator and the
//! per-pixel discriminator.
//!
//! Every source of randomness in step `s` is drawn from a stream seeded by
//! `(seed, s)`, and batch order comes from per-epoch permutations seeded by
//! `(seed, epoch)`. A checkpoint therefore only needs parameters, optimizer
//! moments and the step counter to resume bit-identically.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_version, read_json, write_json_atomic, TensorRecord, FORMAT_VERSION};
use crate::degradation::{degrade, sample_params, DegradationRanges};
use crate::error::{Error, Result};
use crate::facedata::{encode_png, FaceSample, ImageBuffer, MaskMap, Role, ScoreMap};
use crate::fprs::{cutmix_swap, fprs_pairs, pure_target, supervision_target, SwapSpec};
use crate::networks::{
    build_discriminator, build_feature_extractor, build_generator, NetConfig, Network, NetworkRecord,
};
use crate::nn::{Graph, Tensor};
use crate::objectives::{
    adv_d_loss, adv_g_loss, perceptual_from_features, pixel_loss_with, total_g_loss, LossWeights, PixelNorm,
};
use crate::scalar::Scalar;
use crate::seed::mix;

const EPOCH_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const G_INIT: u64 = 1;
const D_INIT: u64 = 2;
const F_INIT: u64 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    Cutmix,
    #[default]
    Fprs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub weights: LossWeights,
    pub pixel_norm: PixelNorm,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub fprs_probability: f64,
    pub augmentation: Augmentation,
    pub use_face_mask: bool,
    pub seed: u64,
    pub degradation: DegradationRanges,
    /// Periodic checkpoint interval in steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Optional network archive with feature-extractor weights.
    pub feature_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::toy(),
            weights: LossWeights::default(),
            pixel_norm: PixelNorm::Mse,
            steps: 2000,
            batch_size: 8,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            fprs_probability: 0.5,
            augmentation: Augmentation::Fprs,
            use_face_mask: true,
            seed: 0,
            degradation: DegradationRanges::default(),
            checkpoint_every: 500,
            feature_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        self.degradation.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad(format!("learning rates must be > 0 (lr_g={}, lr_d={})", self.lr_g, self.lr_d));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must lie in [0,1)".into());
        }
        if !(0.0..=1.0).contains(&self.fprs_probability) {
            return bad(format!("fprs_probability {} outside [0,1]", self.fprs_probability));
        }
        Ok(())
    }

    /// Reads a flat TOML document. Every key names a leaf field of the
    /// config (`resolution`, `lr_g`, `noise_sigma`, ...); keys not given
    /// keep their defaults and unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut value = serde_json::to_value(TrainConfig::default())?;
        for (key, v) in table {
            let v = serde_json::to_value(v).map_err(|e| Error::Config(format!("{key}: {e}")))?;
            if !set_leaf(&mut value, &key, v) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }
}

/// Replaces the first field named `key` at any nesting depth.
fn set_leaf(node: &mut serde_json::Value, key: &str, v: serde_json::Value) -> bool {
    let serde_json::Value::Object(map) = node else {
        return false;
    };
    if let Some(slot) = map.get_mut(key) {
        *slot = v;
        return true;
    }
    for child in map.values_mut() {
        if child.is_object() && set_leaf(child, key, v.clone()) {
            return true;
        }
    }
    false
}

/// Per-step losses and mean discriminator outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_d: f64,
    pub loss_d_real: f64,
    pub loss_d_fake: f64,
    pub loss_g: f64,
    pub loss_adv: f64,
    pub loss_pix: f64,
    pub loss_perc: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    pub mixed_images: usize,
}

/// First and second moment estimates for one network.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Network<T>) -> Self {
        let zeros = || net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64, b1: f64, b2: f64) {
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, g), (m, v)) in it {
                let g = g.f64();
                let mn = b1 * m.f64() + (1.0 - b1) * g;
                let vn = b2 * v.f64() + (1.0 - b2) * g * g;
                *m = T::lit(mn);
                *v = T::lit(vn);
                let step = lr * (mn / c1) / ((vn / c2).sqrt() + 1e-8);
                *p = T::lit(p.f64() - step);
            }
        }
    }

    fn to_record(&self) -> AdamRecord {
        AdamRecord {
            t: self.t,
            m: self.m.iter().map(TensorRecord::from_tensor).collect(),
            v: self.v.iter().map(TensorRecord::from_tensor).collect(),
        }
    }

    fn from_record(rec: &AdamRecord, net: &Network<T>) -> Result<Self> {
        let load = |ts: &[TensorRecord]| -> Result<Vec<Tensor<T>>> {
            if ts.len() != net.params().len() {
                return Err(Error::Load {
                    path: PathBuf::new(),
                    reason: format!("{} optimizer moments for {} parameters", ts.len(), net.params().len()),
                });
            }
            ts.iter()
                .zip(net.params())
                .map(|(r, p)| {
                    let t = r.to_tensor()?;
                    if t.shape() != p.shape() {
                        return Err(Error::Shape(format!("moment {:?} vs parameter {:?}", t.shape(), p.shape())));
                    }
                    Ok(t)
                })
                .collect()
        };
        Ok(Adam {
            m: load(&rec.m)?,
            v: load(&rec.v)?,
            t: rec.t,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamRecord {
    t: u64,
    m: Vec<TensorRecord>,
    v: Vec<TensorRecord>,
}

/// Everything a training run owns.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub generator: Network<T>,
    pub discriminator: Network<T>,
    pub features: Network<T>,
    pub adam_g: Adam<T>,
    pub adam_d: Adam<T>,
    pub step: u64,
    pub history: Vec<StepMetrics>,
}

/// On-disk form of a [`TrainState`] (history lives in the metrics file).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub format_version: String,
    pub config: TrainConfig,
    pub step: u64,
    pub generator: NetworkRecord,
    pub discriminator: NetworkRecord,
    pub features: NetworkRecord,
    adam_g: AdamRecord,
    adam_d: AdamRecord,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = build_generator(&config.net, mix(config.seed, G_INIT))?;
        let discriminator = build_discriminator(&config.net, mix(config.seed, D_INIT))?;
        let features = build_feature_extractor(&config.net, mix(config.seed, F_INIT), config.feature_weights.as_deref())?;
        Ok(TrainState {
            adam_g: Adam::new(&generator),
            adam_d: Adam::new(&discriminator),
            config,
            generator,
            discriminator,
            features,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self) -> TrainCheckpoint {
        TrainCheckpoint {
            format_version: FORMAT_VERSION.to_string(),
            config: self.config.clone(),
            step: self.step,
            generator: self.generator.to_record(),
            discriminator: self.discriminator.to_record(),
            features: self.features.to_record(),
            adam_g: self.adam_g.to_record(),
            adam_d: self.adam_d.to_record(),
        }
    }

    pub fn from_checkpoint(ck: &TrainCheckpoint) -> Result<Self> {
        ck.config.validate()?;
        let generator = Network::from_record(&ck.generator)?;
        let discriminator = Network::from_record(&ck.discriminator)?;
        let features = Network::from_record(&ck.features)?;
        Ok(TrainState {
            adam_g: Adam::from_record(&ck.adam_g, &generator)?,
            adam_d: Adam::from_record(&ck.adam_d, &discriminator)?,
            config: ck.config.clone(),
            generator,
            discriminator,
            features,
            step: ck.step,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        Self::from_checkpoint(&ck)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<TrainCheckpoint> {
    let ck: TrainCheckpoint = read_json(path)?;
    check_version(path, &ck.format_version)?;
    Ok(ck)
}

/// Loads the discriminator from a training checkpoint or a standalone
/// network archive.
pub fn load_discriminator<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let value: serde_json::Value = read_json(path)?;
    let version = value.get("format_version").and_then(|v| v.as_str()).unwrap_or("");
    check_version(path, version)?;
    let rec = if let Some(d) = value.get("discriminator") {
        d.clone()
    } else if let Some(n) = value.get("network") {
        n.clone()
    } else {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: "no discriminator in archive".into(),
        });
    };
    let rec: NetworkRecord = serde_json::from_value(rec)?;
    let net = Network::from_record(&rec)?;
    if net.head().is_none() {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!("archive holds a {:?}, not a discriminator", net.kind()),
        });
    }
    Ok(net)
}

/// Inputs of one discriminator update.
#[derive(Clone, Debug)]
pub struct DBatch<T> {
    /// HQ images followed by mixed images, signed-unit.
    pub real: Tensor<T>,
    pub real_target: Tensor<T>,
    /// LQ images followed by the detached generator outputs.
    pub fake: Tensor<T>,
    pub mixed: Vec<(ImageBuffer<T>, ScoreMap<T>)>,
}

/// Degraded batch plus everything derived from it for one step.
#[derive(Clone, Debug)]
pub struct PreparedBatch<T> {
    pub ids: Vec<String>,
    pub hq: Tensor<T>,
    pub lq: Tensor<T>,
    pub d: DBatch<T>,
}

/// Sample indices of step `step` for a dataset of `n` items.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|k| {
            let pos = step * batch as u64 + k;
            let epoch = pos / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed ^ EPOCH_SALT, epoch)));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("just set").1[(pos % n as u64) as usize]
        })
        .collect()
}

fn signed<T: Scalar>(img: &ImageBuffer<T>) -> Result<ImageBuffer<T>> {
    img.to_signed_unit()
}

/// Degrades the batch, runs the generator and assembles the D pools.
pub fn prepare_batch<T: Scalar>(state: &TrainState<T>, samples: &[&FaceSample<T>], step: u64) -> Result<PreparedBatch<T>> {
    let cfg = &state.config;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, step));
    let params: Vec<_> = samples.iter().map(|_| sample_params(&mut rng, &cfg.degradation)).collect();
    let lq_imgs: Vec<ImageBuffer<T>> = samples
        .par_iter()
        .zip(&params)
        .map(|(s, p)| degrade(&s.image, p).and_then(|lq| signed(&lq)))
        .collect::<Result<_>>()?;
    let hq_imgs: Vec<ImageBuffer<T>> = samples.iter().map(|s| signed(&s.image)).collect::<Result<_>>()?;
    let hq = ImageBuffer::batch_tensor(&hq_imgs.iter().collect::<Vec<_>>())?;
    let lq = ImageBuffer::batch_tensor(&lq_imgs.iter().collect::<Vec<_>>())?;
    let rf = state.generator.infer(&lq)?;

    let (h, w) = (cfg.net.resolution, cfg.net.resolution);
    let masks: Vec<MaskMap> = samples
        .iter()
        .map(|s| if cfg.use_face_mask { s.face_mask.clone() } else { MaskMap::ones(h, w) })
        .collect();

    let mut mixed = Vec::new();
    if cfg.augmentation != Augmentation::None {
        for (i, s) in samples.iter().enumerate() {
            if !rng.random_bool(cfg.fprs_probability) {
                continue;
            }
            let partner = if rng.random_bool(0.5) {
                lq_imgs[i].clone()
            } else {
                ImageBuffer::from_tensor_item(&rf, i, Role::Rf)?
            };
            match cfg.augmentation {
                Augmentation::Fprs => {
                    let spec = SwapSpec::random(&mut rng);
                    for pair in fprs_pairs(&hq_imgs[i], &partner, &s.regions, &masks[i], &spec)? {
                        mixed.push((pair.image, pair.target));
                    }
                }
                Augmentation::Cutmix => {
                    let (img, mask) = cutmix_swap(&hq_imgs[i], &partner, &mut rng)?;
                    mixed.push((img, supervision_target(&mask, &masks[i], false)?));
                }
                Augmentation::None => unreachable!(),
            }
        }
    }

    let mut targets: Vec<ScoreMap<T>> = masks.iter().map(|m| pure_target(Role::Hq, m)).collect::<Result<_>>()?;
    let mut real_imgs: Vec<&ImageBuffer<T>> = hq_imgs.iter().collect();
    for (img, t) in &mixed {
        real_imgs.push(img);
        targets.push(t.clone());
    }
    let real = ImageBuffer::batch_tensor(&real_imgs)?;
    let real_target = ScoreMap::batch_tensor(&targets.iter().collect::<Vec<_>>())?;
    let fake = Tensor::cat_batch(&[&lq, &rf])?;
    Ok(PreparedBatch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        hq,
        lq,
        d: DBatch {
            real,
            real_target,
            fake,
            mixed,
        },
    })
}

/// Discriminator loss on a prepared batch and its parameter gradients.
pub fn d_loss_and_grads<T: Scalar>(d: &Network<T>, batch: &DBatch<T>) -> Result<(crate::objectives::DLoss<T>, Vec<Tensor<T>>, f64, f64)> {
    let n_real = batch.real.batch();
    let input = Tensor::cat_batch(&[&batch.real, &batch.fake])?;
    d.check_input(input.shape())?;
    let mut g = Graph::new();
    let bound = d.bind(&mut g, true);
    let x = g.input(input);
    let out_id = d.forward(&mut g, &bound, x);
    let out = g.value(out_id);
    let d_real = out.slice_batch(0, n_real);
    let d_fake = out.slice_batch(n_real, out.batch());
    let target = if d_real.shape() == batch.real_target.shape() {
        batch.real_target.clone()
    } else {
        // single-output head: one label per image, real when any target pixel is
        let per = batch.real_target.item_len();
        let labels = (0..n_real)
            .map(|i| {
                let any = batch.real_target.data()[i * per..(i + 1) * per].iter().any(|v| *v == T::one());
                if any { T::one() } else { T::zero() }
            })
            .collect();
        Tensor::from_vec(d_real.shape(), labels)?
    };
    let loss = adv_d_loss(&d_real, &target, &d_fake)?;
    let (real_mean, fake_mean) = (d_real.mean(), d_fake.mean());
    let seed = Tensor::cat_batch(&[&loss.grad_real, &loss.grad_fake])?;
    g.backward(vec![(out_id, seed)]);
    let grads = bound.grads(&g);
    Ok((loss, grads, real_mean, fake_mean))
}

/// Generator objective components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GLossParts {
    pub total: f64,
    pub adv: f64,
    pub pix: f64,
    pub perc: f64,
}

/// Total generator loss on `(lq, hq)` with D and the feature extractor
/// frozen, and the generator's parameter gradients.
pub fn g_loss_and_grads<T: Scalar>(
    generator: &Network<T>,
    discriminator: &Network<T>,
    features: &Network<T>,
    lq: &Tensor<T>,
    hq: &Tensor<T>,
    weights: &LossWeights,
    pixel_norm: PixelNorm,
) -> Result<(GLossParts, Vec<Tensor<T>>)> {
    generator.check_input(lq.shape())?;
    let hq_feats = features.infer_features(hq)?;
    let mut g = Graph::new();
    let gb = generator.bind(&mut g, true);
    let db = discriminator.bind(&mut g, false);
    let fb = features.bind(&mut g, false);
    let x = g.input(lq.clone());
    let rf = generator.forward(&mut g, &gb, x);
    let d_out = discriminator.forward(&mut g, &db, rf);
    let feat_ids = features.forward_features(&mut g, &fb, rf);

    let adv = adv_g_loss(g.value(d_out))?;
    let pix = pixel_loss_with(g.value(rf), hq, pixel_norm)?;
    let rf_feats: Vec<Tensor<T>> = feat_ids.iter().map(|&id| g.value(id).clone()).collect();
    let (perc, perc_grads) = perceptual_from_features(&rf_feats, &hq_feats)?;

    let mut seeds = vec![(d_out, adv.grad)];
    let mut pix_grad = pix.grad;
    pix_grad.scale(T::lit(weights.lambda_pix));
    seeds.push((rf, pix_grad));
    for (id, mut grad) in feat_ids.into_iter().zip(perc_grads) {
        grad.scale(T::lit(weights.lambda_vgg_style));
        seeds.push((id, grad));
    }
    g.backward(seeds);
    let parts = GLossParts {
        total: total_g_loss(adv.value, pix.value, perc, weights),
        adv: adv.value,
        pix: pix.value,
        perc,
    };
    Ok((parts, gb.grads(&g)))
}

fn non_finite(step: u64, what: &str, ids: &[String]) -> Error {
    Error::NonFinite {
        step,
        what: what.to_string(),
        ids: ids.to_vec(),
    }
}

/// One D update followed by one G update on `samples`.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, samples: &[&FaceSample<T>]) -> Result<StepMetrics> {
    let step = state.step;
    let batch = prepare_batch(state, samples, step)?;
    let cfg = state.config.clone();

    let (dl, d_grads, d_real_mean, d_fake_mean) = d_loss_and_grads(&state.discriminator, &batch.d)?;
    if !dl.value.is_finite() || d_grads.iter().any(|g| !g.all_finite()) {
        return Err(non_finite(step, "discriminator", &batch.ids));
    }
    state
        .adam_d
        .update(state.discriminator.params_mut(), &d_grads, cfg.lr_d, cfg.beta1, cfg.beta2);

    let (gl, g_grads) = g_loss_and_grads(
        &state.generator,
        &state.discriminator,
        &state.features,
        &batch.lq,
        &batch.hq,
        &cfg.weights,
        cfg.pixel_norm,
    )?;
    if !gl.total.is_finite() || g_grads.iter().any(|g| !g.all_finite()) {
        return Err(non_finite(step, "generator", &batch.ids));
    }
    state
        .adam_g
        .update(state.generator.params_mut(), &g_grads, cfg.lr_g, cfg.beta1, cfg.beta2);

    state.step += 1;
    let m = StepMetrics {
        step: state.step,
        loss_d: dl.value,
        loss_d_real: dl.real,
        loss_d_fake: dl.fake,
        loss_g: gl.total,
        loss_adv: gl.adv,
        loss_pix: gl.pix,
        loss_perc: gl.perc,
        d_real_mean,
        d_fake_mean,
        mixed_images: batch.d.mixed.len(),
    };
    state.history.push(m.clone());
    Ok(m)
}

/// Knobs of [`fit`] that are not part of the model configuration.
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Continue from this training checkpoint.
    pub resume: Option<PathBuf>,
    /// Checked between steps; when set, a checkpoint is written and the
    /// run returns early.
    pub stop: Option<&'a AtomicBool>,
    /// Write the first mixed images and their targets here as PNG pairs.
    pub dump_fprs: Option<PathBuf>,
    /// Called after every step.
    pub on_step: Option<&'a (dyn Fn(&StepMetrics) + Sync)>,
}

#[derive(Debug)]
pub struct FitOutcome<T> {
    pub checkpoint: PathBuf,
    pub state: TrainState<T>,
    pub stopped_early: bool,
}

const DUMP_LIMIT: usize = 16;

fn dump_mixed<T: Scalar>(dir: &Path, step: u64, mixed: &[(ImageBuffer<T>, ScoreMap<T>)], written: &mut usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (k, (img, target)) in mixed.iter().enumerate() {
        if *written >= DUMP_LIMIT {
            break;
        }
        let rgb = img.from_signed_unit()?.to_rgb8()?;
        let stem = format!("step{step:06}_{k}");
        crate::checkpoint::write_atomic(
            &dir.join(format!("{stem}_image.png")),
            &encode_png(&image::DynamicImage::ImageRgb8(rgb))?,
        )?;
        crate::checkpoint::write_atomic(
            &dir.join(format!("{stem}_target.png")),
            &encode_png(&image::DynamicImage::ImageLuma8(target.to_gray8()))?,
        )?;
        *written += 1;
    }
    Ok(())
}

fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt_{step:06}.json"))
}

/// Keeps metric lines up to `step` so a resumed run appends cleanly.
fn truncate_metrics(path: &Path, step: u64) -> Result<Vec<StepMetrics>> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    let kept: Vec<StepMetrics> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<StepMetrics>, _>>()?
        .into_iter()
        .filter(|m| m.step <= step)
        .collect();
    let mut out = String::new();
    for m in &kept {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    crate::checkpoint::write_atomic(path, out.as_bytes())?;
    Ok(kept)
}

/// Trains for `config.steps` steps (counted from zero, so a resumed run
/// finishes the remainder), writing `metrics.jsonl`, periodic
/// `ckpt_NNNNNN.json` files and `final.json` under `out`.
pub fn fit<T: Scalar>(
    config: &TrainConfig,
    samples: &[FaceSample<T>],
    out: &Path,
    opts: FitOptions<'_>,
) -> Result<FitOutcome<T>> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let res = config.net.resolution;
    if let Some(s) = samples.iter().find(|s| s.image.height() != res || s.image.width() != res) {
        return Err(Error::Config(format!(
            "sample {} is {}×{}, network expects {res}×{res}",
            s.id,
            s.image.height(),
            s.image.width()
        )));
    }
    std::fs::create_dir_all(out)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut state = match &opts.resume {
        Some(path) => {
            let mut st = TrainState::<T>::load(path)?;
            if st.config.net != config.net || st.config.seed != config.seed {
                return Err(Error::Config("resume checkpoint was trained with a different model or seed".into()));
            }
            st.config = config.clone();
            st.history = truncate_metrics(&metrics_path, st.step)?;
            st
        }
        None => {
            crate::checkpoint::write_atomic(&metrics_path, b"")?;
            TrainState::new(config.clone())?
        }
    };
    let mut metrics = OpenOptions::new().append(true).create(true).open(&metrics_path)?;
    let mut dumped = 0usize;
    while state.step < config.steps {
        if opts.stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            let path = checkpoint_path(out, state.step);
            state.save(&path)?;
            log::info!("stopped at step {}, checkpoint {}", state.step, path.display());
            return Ok(FitOutcome {
                checkpoint: path,
                state,
                stopped_early: true,
            });
        }
        let idx = batch_indices(config.seed, state.step, config.batch_size, samples.len());
        let batch: Vec<&FaceSample<T>> = idx.iter().map(|&i| &samples[i]).collect();
        let step = state.step;
        let m = train_step(&mut state, &batch)?;
        writeln!(metrics, "{}", serde_json::to_string(&m)?)?;
        metrics.flush()?;
        if let Some(dir) = &opts.dump_fprs {
            if dumped < DUMP_LIMIT {
                let prepared = prepare_batch(&state, &batch, step)?;
                dump_mixed(dir, step, &prepared.d.mixed, &mut dumped)?;
            }
        }
        if let Some(cb) = opts.on_step {
            cb(&m);
        }
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 && state.step < config.steps {
            state.save(&checkpoint_path(out, state.step))?;
        }
    }
    let path = out.join("final.json");
    state.save(&path)?;
    Ok(FitOutcome {
        checkpoint: path,
        state,
        stopped_early: false,
    })
}
