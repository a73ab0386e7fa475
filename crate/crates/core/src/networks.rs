//! Restoration generator, per-pixel discriminator and frozen feature
//! extractor.
//!
//! All three are built from a [`NetConfig`]. [`NetConfig::reference`]
//! is the full 256×256 layout (five down / six up residual
//! blocks for the generator, a VGG-19 encoder split into four blocks for the
//! discriminator); [`NetConfig::toy`] keeps the same topology at 64×64 with
//! narrow widths so training fits on a CPU.
//!
//! Every convolution is 3×3, stride 1, padding 1, except the 1×1 projection
//! shortcuts of residual blocks whose channel count changes.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorRecord;
use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorHead {
    /// U-Net decoder emitting an `H×W` probability map.
    PerPixel,
    /// Global average pooling and one sigmoid scalar per image.
    SingleOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Square input side in pixels.
    pub resolution: usize,
    /// Generator width at the first encoder level; doubles per level.
    pub base_width: usize,
    /// Generator down-sampling residual blocks.
    pub depth_down: usize,
    /// Generator up residual blocks; the last `depth_up - depth_down` keep
    /// full resolution and the final one emits RGB.
    pub depth_up: usize,
    /// Width of the first VGG stage inside the discriminator encoder.
    pub disc_width: usize,
    /// Discriminator encoder blocks (four in the VGG-19 split).
    pub disc_depth: usize,
    pub discriminator_head: DiscriminatorHead,
    /// Encoder-decoder skip connections (generator and discriminator).
    pub skip_connections: bool,
    pub generator_norm: NormKind,
    /// Width of the first feature-extractor stage.
    pub feature_width: usize,
    pub feature_stages: usize,
    pub leaky_slope: f64,
}

impl NetConfig {
    pub fn reference() -> Self {
        NetConfig {
            resolution: 256,
            base_width: 64,
            depth_down: 5,
            depth_up: 6,
            disc_width: 64,
            disc_depth: 4,
            discriminator_head: DiscriminatorHead::PerPixel,
            skip_connections: true,
            generator_norm: NormKind::Instance,
            feature_width: 64,
            feature_stages: 5,
            leaky_slope: 0.2,
        }
    }

    /// Reference topology at 64×64 with narrow widths.
    pub fn toy() -> Self {
        NetConfig {
            resolution: 64,
            base_width: 8,
            depth_down: 3,
            depth_up: 4,
            disc_width: 4,
            disc_depth: 4,
            feature_width: 4,
            ..Self::reference()
        }
    }

    /// Smallest useful configuration (8×8); used for gradient checks.
    pub fn tiny() -> Self {
        NetConfig {
            resolution: 8,
            base_width: 2,
            depth_down: 2,
            depth_up: 3,
            disc_width: 2,
            disc_depth: 2,
            feature_width: 2,
            feature_stages: 3,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_width == 0 || self.disc_width == 0 || self.feature_width == 0 {
            return bad("widths must be positive".into());
        }
        if self.depth_down == 0 || self.disc_depth == 0 || self.feature_stages == 0 {
            return bad("depths must be positive".into());
        }
        if self.depth_up <= self.depth_down {
            return bad(format!(
                "depth_up ({}) must exceed depth_down ({})",
                self.depth_up, self.depth_down
            ));
        }
        for (what, depth) in [
            ("depth_down", self.depth_down),
            ("disc_depth", self.disc_depth),
            ("feature_stages", self.feature_stages),
        ] {
            if self.resolution == 0 || self.resolution % (1 << depth) != 0 {
                return bad(format!(
                    "resolution {} is not divisible by 2^{what} = {}",
                    self.resolution,
                    1usize << depth
                ));
            }
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope {} outside [0,1)", self.leaky_slope));
        }
        Ok(())
    }

    fn generator_widths(&self) -> Vec<usize> {
        (0..self.depth_down).map(|i| self.base_width << i).collect()
    }

    /// Output width of each discriminator encoder block.
    fn disc_widths(&self) -> Vec<usize> {
        (0..self.disc_depth)
            .map(|k| (self.disc_width << (k + 1)).min(8 * self.disc_width))
            .collect()
    }

    /// Per-convolution widths of each discriminator encoder block: the first
    /// block covers two VGG stages (two convs each), later blocks one stage
    /// of four convs.
    fn disc_conv_widths(&self) -> Vec<Vec<usize>> {
        let w = self.disc_width;
        self.disc_widths()
            .into_iter()
            .enumerate()
            .map(|(k, out)| if k == 0 { vec![w, w, out, out] } else { vec![out; 4] })
            .collect()
    }

    fn feature_conv_widths(&self) -> Vec<Vec<usize>> {
        (0..self.feature_stages)
            .map(|s| {
                let width = (self.feature_width << s).min(8 * self.feature_width);
                vec![width; if s < 2 { 2 } else { 4 }]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Generator,
    Discriminator,
    FeatureExtractor,
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    norm1: Option<Norm>,
    conv2: Conv,
    norm2: Option<Norm>,
    shortcut: Option<Conv>,
    /// Upsample the input (then concatenate the skip) before the block.
    upsample: bool,
    /// Average-pool the block output.
    downsample: bool,
    /// Leaky ReLU on the block output; off for the final block.
    activate: bool,
    out_channels: usize,
}

#[derive(Clone, Debug)]
enum Arch {
    Generator {
        enc: Vec<ResBlock>,
        dec: Vec<ResBlock>,
    },
    Discriminator {
        enc: Vec<Vec<Conv>>,
        head: Head,
    },
    Features {
        stages: Vec<Vec<Conv>>,
    },
}

#[derive(Clone, Debug)]
enum Head {
    PerPixel { dec: Vec<ResBlock> },
    Single { fc: Conv },
}

/// Parameters bound into one [`Graph`].
pub struct Bound(Vec<NodeId>);

impl Bound {
    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    /// Gradients of every parameter after a backward pass (zeros where none
    /// flowed).
    pub fn grads<T: Scalar>(&self, g: &Graph<'_, T>) -> Vec<Tensor<T>> {
        self.0
            .iter()
            .map(|&id| {
                g.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    kind: NetworkKind,
    config: NetConfig,
    init_seed: u64,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    arch: Arch,
}

struct Builder<'r, T> {
    rng: &'r mut ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Builder<'_, T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    /// He-normal weights, zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let data = (0..cout * cin * k * k)
            .map(|_| T::lit(normal.sample(self.rng)))
            .collect();
        let w = self.push(
            format!("{name}.weight"),
            Tensor::from_vec([cout, cin, k, k], data).expect("conv shape"),
        );
        let b = self.push(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]));
        Conv { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full([1, c, 1, 1], T::one()));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros([1, c, 1, 1]));
        Norm { gamma, beta }
    }

    #[allow(clippy::too_many_arguments)]
    fn res_block(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        norm: NormKind,
        upsample: bool,
        downsample: bool,
        last: bool,
    ) -> ResBlock {
        let with_norm = norm == NormKind::Instance;
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3);
        let norm1 = with_norm.then(|| self.norm(&format!("{name}.norm1"), cout));
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3);
        let norm2 = (with_norm && !last).then(|| self.norm(&format!("{name}.norm2"), cout));
        let shortcut = (cin != cout).then(|| self.conv(&format!("{name}.shortcut"), cin, cout, 1));
        ResBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
            upsample,
            downsample,
            activate: !last,
            out_channels: cout,
        }
    }
}

impl<T: Scalar> Network<T> {
    fn build(kind: NetworkKind, cfg: &NetConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut b = Builder {
            rng: &mut rng,
            names: Vec::new(),
            params: Vec::new(),
        };
        let arch = match kind {
            NetworkKind::Generator => {
                let widths = cfg.generator_widths();
                let d = cfg.depth_down;
                let mut enc = Vec::with_capacity(d);
                let mut prev = 3;
                for (i, &w) in widths.iter().enumerate() {
                    let name = format!("enc{}", i + 1);
                    enc.push(b.res_block(&name, prev, w, cfg.generator_norm, false, true, false));
                    prev = w;
                }
                let mut dec = Vec::with_capacity(cfg.depth_up);
                for j in 0..d {
                    let out = if j + 1 < d { widths[d - 2 - j] } else { cfg.base_width };
                    let skip = if cfg.skip_connections && j + 1 < d { widths[d - 2 - j] } else { 0 };
                    let name = format!("dec{}", j + 1);
                    dec.push(b.res_block(&name, prev + skip, out, cfg.generator_norm, true, false, false));
                    prev = out;
                }
                for j in d..cfg.depth_up {
                    let last = j + 1 == cfg.depth_up;
                    let out = if last { 3 } else { cfg.base_width };
                    let name = format!("dec{}", j + 1);
                    dec.push(b.res_block(&name, prev, out, cfg.generator_norm, false, false, last));
                    prev = out;
                }
                Arch::Generator { enc, dec }
            }
            NetworkKind::Discriminator => {
                let conv_widths = cfg.disc_conv_widths();
                let widths = cfg.disc_widths();
                let mut enc = Vec::new();
                let mut prev = 3;
                for (k, block) in conv_widths.iter().enumerate() {
                    let mut convs = Vec::new();
                    for (c, &w) in block.iter().enumerate() {
                        convs.push(b.conv(&format!("enc{}.conv{}", k + 1, c + 1), prev, w, 3));
                        prev = w;
                    }
                    enc.push(convs);
                }
                let head = match cfg.discriminator_head {
                    DiscriminatorHead::SingleOutput => Head::Single {
                        fc: b.conv("head.fc", prev, 1, 1),
                    },
                    DiscriminatorHead::PerPixel => {
                        let d = cfg.disc_depth;
                        let mut dec = Vec::new();
                        for j in 0..d {
                            let out = if j + 1 < d { widths[d - 2 - j] } else { cfg.disc_width };
                            let skip = if cfg.skip_connections && j + 1 < d { widths[d - 2 - j] } else { 0 };
                            let name = format!("dec{}", j + 1);
                            dec.push(b.res_block(&name, prev + skip, out, NormKind::None, true, false, false));
                            prev = out;
                        }
                        let name = format!("dec{}", d + 1);
                        dec.push(b.res_block(&name, prev, 1, NormKind::None, false, false, true));
                        Head::PerPixel { dec }
                    }
                };
                Arch::Discriminator { enc, head }
            }
            NetworkKind::FeatureExtractor => {
                let mut stages = Vec::new();
                let mut prev = 3;
                for (s, block) in cfg.feature_conv_widths().iter().enumerate() {
                    let mut convs = Vec::new();
                    for (c, &w) in block.iter().enumerate() {
                        convs.push(b.conv(&format!("stage{}.conv{}", s + 1, c + 1), prev, w, 3));
                        prev = w;
                    }
                    stages.push(convs);
                }
                Arch::Features { stages }
            }
        };
        let Builder { names, params, .. } = b;
        Ok(Network {
            kind,
            config: cfg.clone(),
            init_seed,
            names,
            params,
            arch,
        })
    }

    pub fn kind(&self) -> NetworkKind {
        self.kind
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn head(&self) -> Option<DiscriminatorHead> {
        match &self.arch {
            Arch::Discriminator { head: Head::PerPixel { .. }, .. } => Some(DiscriminatorHead::PerPixel),
            Arch::Discriminator { head: Head::Single { .. }, .. } => Some(DiscriminatorHead::SingleOutput),
            _ => None,
        }
    }

    /// Number of 2× reductions the input must survive.
    fn downsamplings(&self) -> usize {
        match self.kind {
            NetworkKind::Generator => self.config.depth_down,
            NetworkKind::Discriminator => self.config.disc_depth,
            NetworkKind::FeatureExtractor => self.config.feature_stages,
        }
    }

    /// Checks an `N×3×H×W` input against the architecture.
    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [n, c, h, w] = shape;
        let unit = 1usize << self.downsamplings();
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::Shape(format!(
                "{:?} input {h}×{w} must be a positive multiple of {unit}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>, trainable: bool) -> Bound {
        Bound(self.params.iter().map(|p| g.param(p, trainable)).collect())
    }

    fn conv(&self, g: &mut Graph<'_, T>, b: &Bound, c: &Conv, x: NodeId) -> NodeId {
        g.conv2d(x, b.0[c.w], Some(b.0[c.b]))
    }

    fn block(&self, g: &mut Graph<'_, T>, b: &Bound, blk: &ResBlock, x: NodeId) -> NodeId {
        let slope = T::lit(self.config.leaky_slope);
        let mut h = self.conv(g, b, &blk.conv1, x);
        if let Some(n) = &blk.norm1 {
            h = g.instance_norm(h, b.0[n.gamma], b.0[n.beta]);
        }
        h = g.leaky_relu(h, slope);
        h = self.conv(g, b, &blk.conv2, h);
        if let Some(n) = &blk.norm2 {
            h = g.instance_norm(h, b.0[n.gamma], b.0[n.beta]);
        }
        let s = match &blk.shortcut {
            Some(c) => self.conv(g, b, c, x),
            None => x,
        };
        let mut y = g.add(h, s);
        if blk.downsample {
            y = g.avg_pool2(y);
        }
        if blk.activate {
            y = g.leaky_relu(y, slope);
        }
        y
    }

    /// Runs a U-Net style decoder over encoder features `feats`
    /// (`feats[i]` at `1/2^(i+1)` resolution).
    fn decode(&self, g: &mut Graph<'_, T>, b: &Bound, dec: &[ResBlock], feats: &[NodeId]) -> NodeId {
        let d = feats.len();
        let mut h = *feats.last().expect("non-empty encoder");
        for (j, blk) in dec.iter().enumerate() {
            let mut u = h;
            if blk.upsample {
                u = g.upsample2(u);
                if self.config.skip_connections && j + 1 < d {
                    u = g.concat(u, feats[d - 2 - j]);
                }
            }
            h = self.block(g, b, blk, u);
        }
        h
    }

    /// Single-output forward for the generator (`N×3×H×W` in `[-1,1]`) and
    /// the discriminator (`N×1×H×W` or `N×1×1×1` in `(0,1)`).
    pub fn forward(&self, g: &mut Graph<'_, T>, b: &Bound, x: NodeId) -> NodeId {
        match &self.arch {
            Arch::Generator { enc, dec } => {
                let mut feats = Vec::with_capacity(enc.len());
                let mut h = x;
                for blk in enc {
                    h = self.block(g, b, blk, h);
                    feats.push(h);
                }
                let out = self.decode(g, b, dec, &feats);
                g.tanh(out)
            }
            Arch::Discriminator { enc, head } => {
                let slope = T::lit(self.config.leaky_slope);
                let mut feats = Vec::with_capacity(enc.len());
                let mut h = x;
                for convs in enc {
                    for c in convs {
                        h = self.conv(g, b, c, h);
                        h = g.leaky_relu(h, slope);
                    }
                    h = g.max_pool2(h);
                    feats.push(h);
                }
                let logits = match head {
                    Head::PerPixel { dec } => self.decode(g, b, dec, &feats),
                    Head::Single { fc } => {
                        let pooled = g.global_avg_pool(h);
                        self.conv(g, b, fc, pooled)
                    }
                };
                g.sigmoid(logits)
            }
            Arch::Features { .. } => {
                let feats = self.forward_features(g, b, x);
                *feats.last().expect("at least one stage")
            }
        }
    }

    /// Pooled output of every feature stage, coarsest last.
    pub fn forward_features(&self, g: &mut Graph<'_, T>, b: &Bound, x: NodeId) -> Vec<NodeId> {
        let Arch::Features { stages } = &self.arch else {
            panic!("forward_features on a {:?}", self.kind);
        };
        let mut h = x;
        let mut out = Vec::with_capacity(stages.len());
        for convs in stages {
            for c in convs {
                h = self.conv(g, b, c, h);
                h = g.leaky_relu(h, T::zero());
            }
            h = g.max_pool2(h);
            out.push(h);
        }
        out
    }

    /// Gradient-free forward pass.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xi = g.input(x.clone());
        let y = self.forward(&mut g, &b, xi);
        Ok(g.value(y).clone())
    }

    pub fn infer_features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if self.kind != NetworkKind::FeatureExtractor {
            return Err(Error::Config(format!("{:?} has no feature stages", self.kind)));
        }
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xi = g.input(x.clone());
        let ids = self.forward_features(&mut g, &b, xi);
        Ok(ids.into_iter().map(|id| g.value(id).clone()).collect())
    }

    /// Symbolic `(block name, H, W, C)` trace for a square input of side
    /// `resolution`, without evaluating anything.
    pub fn block_shapes(&self) -> Vec<(String, [usize; 3])> {
        let r = self.config.resolution;
        let mut out = Vec::new();
        match &self.arch {
            Arch::Generator { enc, dec } => {
                let mut side = r;
                for (i, blk) in enc.iter().enumerate() {
                    side /= 2;
                    out.push((format!("enc{}", i + 1), [side, side, blk.out_channels]));
                }
                for (j, blk) in dec.iter().enumerate() {
                    if blk.upsample {
                        side *= 2;
                    }
                    out.push((format!("dec{}", j + 1), [side, side, blk.out_channels]));
                }
            }
            Arch::Discriminator { enc, head } => {
                let mut side = r;
                for (k, convs) in enc.iter().enumerate() {
                    side /= 2;
                    let c = self.params[convs.last().unwrap().b].channels();
                    out.push((format!("enc{}", k + 1), [side, side, c]));
                }
                match head {
                    Head::PerPixel { dec } => {
                        for (j, blk) in dec.iter().enumerate() {
                            if blk.upsample {
                                side *= 2;
                            }
                            out.push((format!("dec{}", j + 1), [side, side, blk.out_channels]));
                        }
                    }
                    Head::Single { .. } => out.push(("head".into(), [1, 1, 1])),
                }
            }
            Arch::Features { stages } => {
                let mut side = r;
                for (s, convs) in stages.iter().enumerate() {
                    side /= 2;
                    let c = self.params[convs.last().unwrap().b].channels();
                    out.push((format!("stage{}", s + 1), [side, side, c]));
                }
            }
        }
        out
    }

    pub fn to_record(&self) -> NetworkRecord {
        NetworkRecord {
            kind: self.kind,
            config: self.config.clone(),
            init_seed: self.init_seed,
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, p)| (n.clone(), TensorRecord::from_tensor(p)))
                .collect(),
        }
    }

    /// Rebuilds the architecture from the record's config and seed, then
    /// replaces every parameter by name.
    pub fn from_record(rec: &NetworkRecord) -> Result<Self> {
        let mut net = Self::build(rec.kind, &rec.config, rec.init_seed)?;
        net.load_params(&rec.params)?;
        Ok(net)
    }

    /// Overwrites parameters from a name-keyed map; every name must be
    /// present with a matching shape.
    pub fn load_params(&mut self, params: &BTreeMap<String, TensorRecord>) -> Result<()> {
        if params.len() != self.names.len() {
            return Err(Error::Load {
                path: Default::default(),
                reason: format!("{} tensors supplied, {} expected", params.len(), self.names.len()),
            });
        }
        for (name, slot) in self.names.iter().zip(self.params.iter_mut()) {
            let rec = params.get(name).ok_or_else(|| Error::Load {
                path: Default::default(),
                reason: format!("missing tensor `{name}`"),
            })?;
            let t: Tensor<T> = rec.to_tensor()?;
            if t.shape() != slot.shape() {
                return Err(Error::Load {
                    path: Default::default(),
                    reason: format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                });
            }
            *slot = t;
        }
        Ok(())
    }
}

/// Serialized network: kind, config, init seed and named tensors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub kind: NetworkKind,
    pub config: NetConfig,
    pub init_seed: u64,
    pub params: BTreeMap<String, TensorRecord>,
}

pub fn build_generator<T: Scalar>(cfg: &NetConfig, init_seed: u64) -> Result<Network<T>> {
    Network::build(NetworkKind::Generator, cfg, init_seed)
}

pub fn build_discriminator<T: Scalar>(cfg: &NetConfig, init_seed: u64) -> Result<Network<T>> {
    Network::build(NetworkKind::Discriminator, cfg, init_seed)
}

/// Frozen feature pyramid. With `weights`, tensors are loaded from a
/// network archive (shapes must match); otherwise the random He
/// initialization drawn from `init_seed` is kept.
pub fn build_feature_extractor<T: Scalar>(
    cfg: &NetConfig,
    init_seed: u64,
    weights: Option<&std::path::Path>,
) -> Result<Network<T>> {
    let mut net = Network::build(NetworkKind::FeatureExtractor, cfg, init_seed)?;
    if let Some(path) = weights {
        let archive = crate::checkpoint::read_network_archive(path)?;
        net.load_params(&archive.network.params).map_err(|e| match e {
            Error::Load { reason, .. } => Error::Load {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })?;
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(n: usize, side: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec([n, 3, side, side], data).unwrap()
    }

    #[test]
    fn reference_generator_ladder_matches_published_table() {
        let g = build_generator::<f32>(&NetConfig::reference(), 0).unwrap();
        let shapes: Vec<[usize; 3]> = g.block_shapes().into_iter().map(|(_, s)| s).collect();
        assert_eq!(
            shapes,
            vec![
                [128, 128, 64],
                [64, 64, 128],
                [32, 32, 256],
                [16, 16, 512],
                [8, 8, 1024],
                [16, 16, 512],
                [32, 32, 256],
                [64, 64, 128],
                [128, 128, 64],
                [256, 256, 64],
                [256, 256, 3],
            ]
        );
    }

    #[test]
    fn reference_discriminator_ladder_matches_published_table() {
        let d = build_discriminator::<f32>(&NetConfig::reference(), 0).unwrap();
        let shapes: Vec<[usize; 3]> = d.block_shapes().into_iter().map(|(_, s)| s).collect();
        assert_eq!(
            shapes,
            vec![
                [128, 128, 128],
                [64, 64, 256],
                [32, 32, 512],
                [16, 16, 512],
                [32, 32, 512],
                [64, 64, 256],
                [128, 128, 128],
                [256, 256, 64],
                [256, 256, 1],
            ]
        );
    }

    #[test]
    fn reference_feature_extractor_has_five_halving_stages() {
        let f = build_feature_extractor::<f32>(&NetConfig::reference(), 0, None).unwrap();
        let shapes = f.block_shapes();
        assert_eq!(shapes.len(), 5);
        let sides: Vec<usize> = shapes.iter().map(|(_, s)| s[0]).collect();
        assert_eq!(sides, vec![128, 64, 32, 16, 8]);
    }

    /// Hand inventory of the toy generator (64, width 16, 3 down / 4 up).
    #[test]
    fn toy_generator_parameter_count_matches_inventory() {
        let cfg = NetConfig {
            base_width: 16,
            ..NetConfig::toy()
        };
        let g = build_generator::<f32>(&cfg, 1).unwrap();
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let norm = |c: usize| 2 * c;
        // block(cin, cout, norm2?) = conv1 + norm1 + conv2 + [norm2] + [1×1 shortcut]
        let block = |cin: usize, cout: usize, norm2: bool| {
            conv(cin, cout, 3)
                + norm(cout)
                + conv(cout, cout, 3)
                + if norm2 { norm(cout) } else { 0 }
                + if cin != cout { conv(cin, cout, 1) } else { 0 }
        };
        let expected = block(3, 16, true)
            + block(16, 32, true)
            + block(32, 64, true)
            // decoder: upsampled input concatenated with the matching encoder level
            + block(64 + 32, 32, true)
            + block(32 + 16, 16, true)
            + block(16, 16, true)
            + block(16, 3, false);
        assert_eq!(g.param_count(), expected);
        let out = g.infer(&random_input(1, 64, 5)).unwrap();
        assert_eq!(out.shape(), [1, 3, 64, 64]);
    }

    #[test]
    fn generator_output_in_tanh_range() {
        let g = build_generator::<f32>(&NetConfig::toy(), 2).unwrap();
        let x = random_input(2, 64, 3).map(|v| v * 50.0);
        let y = g.infer(&x).unwrap();
        assert_eq!(y.shape(), [2, 3, 64, 64]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn discriminator_is_fully_convolutional() {
        let d = build_discriminator::<f32>(&NetConfig::toy(), 3).unwrap();
        for side in [16, 32, 64, 128] {
            let y = d.infer(&random_input(1, side, side as u64)).unwrap();
            assert_eq!(y.shape(), [1, 1, side, side]);
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(matches!(d.infer(&random_input(1, 24, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn single_output_head_gives_one_probability() {
        let cfg = NetConfig {
            discriminator_head: DiscriminatorHead::SingleOutput,
            ..NetConfig::toy()
        };
        let d = build_discriminator::<f32>(&cfg, 4).unwrap();
        let y = d.infer(&random_input(2, 64, 1)).unwrap();
        assert_eq!(y.shape(), [2, 1, 1, 1]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn feature_extractor_is_deterministic_and_halves_per_stage() {
        let f = build_feature_extractor::<f32>(&NetConfig::toy(), 5, None).unwrap();
        let x = random_input(1, 64, 9);
        let a = f.infer_features(&x).unwrap();
        let b = f.infer_features(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let sides: Vec<usize> = a.iter().map(|t| t.spatial().0).collect();
        assert_eq!(sides, vec![32, 16, 8, 4, 2]);
    }

    #[test]
    fn builders_are_deterministic_in_seed() {
        let a = build_discriminator::<f32>(&NetConfig::toy(), 11).unwrap();
        let b = build_discriminator::<f32>(&NetConfig::toy(), 11).unwrap();
        let c = build_discriminator::<f32>(&NetConfig::toy(), 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn indivisible_resolution_is_a_config_error() {
        let cfg = NetConfig {
            resolution: 60,
            ..NetConfig::toy()
        };
        assert!(matches!(build_generator::<f32>(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn record_roundtrip_preserves_forward_bits() {
        let d = build_discriminator::<f32>(&NetConfig::toy(), 21).unwrap();
        let back = Network::<f32>::from_record(&d.to_record()).unwrap();
        let x = random_input(1, 64, 4);
        assert_eq!(d.infer(&x).unwrap(), back.infer(&x).unwrap());
    }

    #[test]
    fn feature_weights_shape_mismatch_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.json");
        let other = NetConfig {
            feature_width: 8,
            ..NetConfig::toy()
        };
        let f = build_feature_extractor::<f32>(&other, 0, None).unwrap();
        crate::checkpoint::write_network_archive(&path, &f).unwrap();
        let err = build_feature_extractor::<f32>(&NetConfig::toy(), 0, Some(&path)).unwrap_err();
        assert!(matches!(err, Error::Load { .. }), "{err}");
        let ok = build_feature_extractor::<f32>(&other, 99, Some(&path)).unwrap();
        assert_eq!(ok.params(), f.params());
    }
}
