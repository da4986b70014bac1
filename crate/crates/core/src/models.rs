//! Correction networks: UNet and ResNet baselines, their multi-channel
//! variants (priors stacked onto the input channels) and dual-branch variants
//! (priors encoded by a separate branch whose latent is fused with the main
//! latent).
//!
//! In dual-branch models the auxiliary branch only contributes through the
//! fused latent. Skip connections into the UNet expansion path always come
//! from the main branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Parameter-name prefix for the auxiliary (prior) branch.
pub const AUX_PREFIX: &str = "aux.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Unet,
    Resnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    Baseline,
    Multichannel,
    Dualbranch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Add,
    ConcatConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub injection: Injection,
    /// Number of prior channels (ignored for the baseline).
    pub n_prior: usize,
    pub fusion: FusionMode,
    /// UNet pooling levels.
    pub depth: usize,
    pub base_features: usize,
    /// ResNet residual blocks.
    pub res_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Unet,
            injection: Injection::Baseline,
            n_prior: 0,
            fusion: FusionMode::Add,
            depth: 4,
            base_features: 64,
            res_blocks: 9,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU-scale experiments.
    pub fn desk(arch: Arch, injection: Injection, n_prior: usize) -> Self {
        ModelConfig {
            arch,
            injection,
            n_prior,
            fusion: FusionMode::Add,
            depth: 3,
            base_features: 16,
            res_blocks: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.injection != Injection::Baseline && self.n_prior == 0 {
            return Err(Error::Config(format!(
                "{:?} injection needs at least one prior channel",
                self.injection
            )));
        }
        if self.base_features == 0 {
            return Err(Error::Config("base_features must be positive".into()));
        }
        match self.arch {
            Arch::Unet if self.depth == 0 || self.depth > 8 => Err(Error::Config(format!(
                "UNet depth must be in 1..=8, got {}",
                self.depth
            ))),
            Arch::Resnet if self.res_blocks == 0 => {
                Err(Error::Config("ResNet needs at least one residual block".into()))
            }
            _ => Ok(()),
        }
    }

    /// Priors actually consumed by the network.
    pub fn effective_priors(&self) -> usize {
        match self.injection {
            Injection::Baseline => 0,
            _ => self.n_prior,
        }
    }

    /// Input channels of the first main-branch layer.
    pub fn input_channels(&self) -> usize {
        match self.injection {
            Injection::Multichannel => 1 + self.n_prior,
            _ => 1,
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self.arch {
            Arch::Unet => 1 << self.depth,
            Arch::Resnet => 4,
        }
    }

    /// Channel count of the latent where dual-branch fusion happens.
    pub fn latent_channels(&self) -> usize {
        match self.arch {
            Arch::Unet => self.base_features << self.depth,
            Arch::Resnet => 2 * self.base_features,
        }
    }
}

/// Latent fusion descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentFusion {
    pub mode: FusionMode,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    fan_in: usize,
    is_bias: bool,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    spec: ConvSpec,
}

#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    first: Conv,
    second: Conv,
}

#[derive(Debug, Clone)]
struct UnetEncoder {
    levels: Vec<DoubleConv>,
    bottleneck: DoubleConv,
}

#[derive(Debug, Clone)]
struct UnetDecoder {
    ups: Vec<Conv>,
    blocks: Vec<DoubleConv>,
    out: Conv,
}

#[derive(Debug, Clone, Copy)]
struct ResDown {
    first: Conv,
    second: Conv,
}

#[derive(Debug, Clone)]
struct ResBody {
    blocks: Vec<DoubleConv>,
    up1: Conv,
    up2: Conv,
    out: Conv,
}

#[derive(Debug, Clone)]
enum Layout {
    Unet {
        main: UnetEncoder,
        aux: Option<UnetEncoder>,
        dec: UnetDecoder,
    },
    Resnet {
        main: ResDown,
        aux: Option<ResDown>,
        body: ResBody,
    },
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = cin * k * k;
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: [cout, cin, k, k],
            fan_in,
            is_bias: false,
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: [1, cout, 1, 1],
            fan_in,
            is_bias: true,
        });
        Conv {
            w: self.specs.len() - 2,
            b: self.specs.len() - 1,
            spec: ConvSpec { stride, pad: k / 2 },
        }
    }

    fn double(&mut self, name: &str, cin: usize, cout: usize) -> DoubleConv {
        DoubleConv {
            first: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1),
            second: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1),
        }
    }

    fn unet_encoder(&mut self, prefix: &str, cin: usize, f: usize, depth: usize) -> UnetEncoder {
        let mut levels = Vec::with_capacity(depth);
        let mut c = cin;
        for i in 0..depth {
            levels.push(self.double(&format!("{prefix}enc.{i}"), c, f << i));
            c = f << i;
        }
        let bottleneck = self.double(&format!("{prefix}bottleneck"), c, f << depth);
        UnetEncoder { levels, bottleneck }
    }

    fn res_down(&mut self, prefix: &str, cin: usize, f: usize) -> ResDown {
        ResDown {
            first: self.conv(&format!("{prefix}down.0"), cin, f, 3, 2),
            second: self.conv(&format!("{prefix}down.1"), f, 2 * f, 3, 2),
        }
    }
}

/// Architecture (parameter layout and wiring) independent of scalar type.
#[derive(Debug, Clone)]
struct Network {
    cfg: ModelConfig,
    specs: Vec<ParamSpec>,
    layout: Layout,
    fusion: Option<Conv>,
}

impl Network {
    fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { specs: Vec::new() };
        let f = cfg.base_features;
        let dual = cfg.injection == Injection::Dualbranch;
        let latent = cfg.latent_channels();
        let (layout, fusion) = match cfg.arch {
            Arch::Unet => {
                let main = b.unet_encoder("", cfg.input_channels(), f, cfg.depth);
                let aux = dual.then(|| b.unet_encoder(AUX_PREFIX, cfg.n_prior, f, cfg.depth));
                let fusion =
                    (dual && cfg.fusion == FusionMode::ConcatConv).then(|| b.conv("fusion", 2 * latent, latent, 1, 1));
                let mut ups = Vec::with_capacity(cfg.depth);
                let mut blocks = Vec::with_capacity(cfg.depth);
                for i in 0..cfg.depth {
                    ups.push(b.conv(&format!("dec.{i}.up"), f << (i + 1), f << i, 3, 1));
                    blocks.push(b.double(&format!("dec.{i}"), 2 * (f << i), f << i));
                }
                let out = b.conv("out", f, 1, 1, 1);
                (
                    Layout::Unet {
                        main,
                        aux,
                        dec: UnetDecoder { ups, blocks, out },
                    },
                    fusion,
                )
            }
            Arch::Resnet => {
                let main = b.res_down("", cfg.input_channels(), f);
                let aux = dual.then(|| b.res_down(AUX_PREFIX, cfg.n_prior, f));
                let fusion =
                    (dual && cfg.fusion == FusionMode::ConcatConv).then(|| b.conv("fusion", 2 * latent, latent, 1, 1));
                let blocks = (0..cfg.res_blocks)
                    .map(|i| b.double(&format!("res.{i}"), 2 * f, 2 * f))
                    .collect();
                let up1 = b.conv("up.0", 2 * f, f, 3, 1);
                let up2 = b.conv("up.1", f, f, 3, 1);
                let out = b.conv("out", f, 1, 3, 1);
                (
                    Layout::Resnet {
                        main,
                        aux,
                        body: ResBody { blocks, up1, up2, out },
                    },
                    fusion,
                )
            }
        };
        Ok(Network {
            cfg,
            specs: b.specs,
            layout,
            fusion,
        })
    }

    fn init<T: Real>(&self, seed: u64) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.specs
            .iter()
            .map(|s| {
                if s.is_bias {
                    Tensor::zeros(s.shape)
                } else {
                    // He-uniform
                    let bound = (6.0 / s.fan_in as f64).sqrt();
                    Tensor::from_fn(s.shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                }
            })
            .collect()
    }

    fn check_inputs(&self, x: [usize; 4], priors: Option<[usize; 4]>) -> Result<()> {
        let [b, c, h, w] = x;
        if c != 1 {
            return Err(Error::Shape(format!("corrupted input must have 1 channel, got {c}")));
        }
        let m = self.cfg.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} must be a positive multiple of {m}"
            )));
        }
        let need = self.cfg.effective_priors();
        match (need, priors) {
            (0, _) => Ok(()),
            (_, None) => Err(Error::Shape(format!("model needs {need} prior channels, none given"))),
            (_, Some(p)) if p != [b, need, h, w] => Err(Error::Shape(format!(
                "priors {p:?} do not match expected {:?}",
                [b, need, h, w]
            ))),
            _ => Ok(()),
        }
    }

    fn conv<T: Real>(g: &mut Graph<T>, p: &[Var], c: Conv, x: Var) -> Result<Var> {
        g.conv2d(x, p[c.w], Some(p[c.b]), c.spec)
    }

    fn conv_relu<T: Real>(g: &mut Graph<T>, p: &[Var], c: Conv, x: Var) -> Result<Var> {
        let y = Self::conv(g, p, c, x)?;
        Ok(g.relu(y))
    }

    fn double<T: Real>(g: &mut Graph<T>, p: &[Var], d: DoubleConv, x: Var) -> Result<Var> {
        let h = Self::conv_relu(g, p, d.first, x)?;
        Self::conv_relu(g, p, d.second, h)
    }

    fn unet_encode<T: Real>(g: &mut Graph<T>, p: &[Var], enc: &UnetEncoder, x: Var) -> Result<(Vec<Var>, Var)> {
        let mut skips = Vec::with_capacity(enc.levels.len());
        let mut h = x;
        for level in &enc.levels {
            let s = Self::double(g, p, *level, h)?;
            skips.push(s);
            h = g.max_pool2(s)?;
        }
        let latent = Self::double(g, p, enc.bottleneck, h)?;
        Ok((skips, latent))
    }

    fn res_encode<T: Real>(g: &mut Graph<T>, p: &[Var], d: &ResDown, x: Var) -> Result<Var> {
        let h = Self::conv_relu(g, p, d.first, x)?;
        Self::conv_relu(g, p, d.second, h)
    }

    fn fuse<T: Real>(&self, g: &mut Graph<T>, p: &[Var], main: Var, aux: Var) -> Result<Var> {
        match self.fusion {
            None => g.add(main, aux),
            Some(conv) => {
                let c = g.concat(&[main, aux])?;
                Self::conv(g, p, conv, c)
            }
        }
    }

    /// Builds the forward pass on `g` with parameters bound to `p`.
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], corrupted: Var, priors: Option<Var>) -> Result<Var> {
        self.check_inputs(g.shape(corrupted), priors.map(|v| g.shape(v)))?;
        let main_in = match self.cfg.injection {
            Injection::Multichannel => {
                let priors = priors.expect("checked above");
                g.concat(&[corrupted, priors])?
            }
            _ => corrupted,
        };
        match &self.layout {
            Layout::Unet { main, aux, dec } => {
                let (skips, mut h) = Self::unet_encode(g, p, main, main_in)?;
                if let Some(aux) = aux {
                    let (_, aux_latent) = Self::unet_encode(g, p, aux, priors.expect("checked above"))?;
                    h = self.fuse(g, p, h, aux_latent)?;
                }
                for i in (0..dec.blocks.len()).rev() {
                    let u = g.upsample2(h);
                    let u = Self::conv_relu(g, p, dec.ups[i], u)?;
                    let c = g.concat(&[u, skips[i]])?;
                    h = Self::double(g, p, dec.blocks[i], c)?;
                }
                Self::conv(g, p, dec.out, h)
            }
            Layout::Resnet { main, aux, body } => {
                let mut h = Self::res_encode(g, p, main, main_in)?;
                if let Some(aux) = aux {
                    let a = Self::res_encode(g, p, aux, priors.expect("checked above"))?;
                    h = self.fuse(g, p, h, a)?;
                }
                for block in &body.blocks {
                    let r = Self::conv_relu(g, p, block.first, h)?;
                    let r = Self::conv(g, p, block.second, r)?;
                    h = g.add(h, r)?;
                }
                let u = g.upsample2(h);
                let u = Self::conv_relu(g, p, body.up1, u)?;
                let u = g.upsample2(u);
                let u = Self::conv_relu(g, p, body.up2, u)?;
                Self::conv(g, p, body.out, u)
            }
        }
    }
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model<T> {
    net: Network,
    params: Vec<Tensor<T>>,
}

/// Builds a model with seed-controlled fan-in-scaled uniform initialization.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let net = Network::new(*cfg)?;
    let params = net.init(seed);
    Ok(Model { net, params })
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.net.specs
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.net.specs.iter().map(|s| s.name.as_str())
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.net.specs.iter().position(|s| s.name == name)
    }

    pub fn is_aux_param(&self, index: usize) -> bool {
        self.net.specs[index].name.starts_with(AUX_PREFIX)
    }

    /// Replaces all parameters; shapes must match the architecture.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() || params.iter().zip(&self.net.specs).any(|(p, s)| p.shape() != s.shape) {
            return Err(Error::Shape("parameter set does not match architecture".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Input channels of the first main-branch convolution.
    pub fn first_layer_in_channels(&self) -> usize {
        self.net.specs[0].shape[1]
    }

    /// Binds parameters into `g` as trainable leaves, in spec order.
    pub fn bind_trainable(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|t| g.param(t.clone())).collect()
    }

    fn bind_constant(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|t| g.input(t.clone())).collect()
    }

    /// Records the forward pass on `g`; `params` must come from [`Model::bind_trainable`].
    pub fn forward_graph(&self, g: &mut Graph<T>, params: &[Var], corrupted: Var, priors: Option<Var>) -> Result<Var> {
        self.net.forward(g, params, corrupted, priors)
    }

    /// Inference: corrupted `(B,1,H,W)` and priors `(B,n_prior,H,W)` to `(B,1,H,W)`.
    pub fn forward(&self, corrupted: &Tensor<T>, priors: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind_constant(&mut g);
        let x = g.input(corrupted.clone());
        let pr = match (self.net.cfg.effective_priors(), priors) {
            (0, _) => None,
            (_, Some(t)) => Some(g.input(t.clone())),
            (_, None) => None,
        };
        let y = self.net.forward(&mut g, &p, x, pr)?;
        Ok(g.value(y).clone())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Combines main and auxiliary latents: elementwise sum, or channel
/// concatenation followed by a 1×1 convolution (`weight` is `(C, 2C, 1, 1)`,
/// `bias` is `(1, C, 1, 1)`).
pub fn fuse_latent<T: Real>(
    main: &Tensor<T>,
    aux: &Tensor<T>,
    fusion: &LatentFusion,
    conv: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<Tensor<T>> {
    if main.shape() != aux.shape() {
        return Err(Error::Shape(format!(
            "latents differ: {:?} vs {:?}",
            main.shape(),
            aux.shape()
        )));
    }
    if main.shape()[1] != fusion.channels {
        return Err(Error::Shape(format!(
            "latent has {} channels, fusion expects {}",
            main.shape()[1],
            fusion.channels
        )));
    }
    let mut g = Graph::new();
    let m = g.input(main.clone());
    let a = g.input(aux.clone());
    let out = match fusion.mode {
        FusionMode::Add => g.add(m, a)?,
        FusionMode::ConcatConv => {
            let (w, b) = conv.ok_or_else(|| Error::Config("concat_conv fusion needs a 1x1 weight and bias".into()))?;
            let c = fusion.channels;
            if w.shape() != [c, 2 * c, 1, 1] {
                return Err(Error::Shape(format!("fusion weight {:?}", w.shape())));
            }
            let w = g.input(w.clone());
            let b = g.input(b.clone());
            let cat = g.concat(&[m, a])?;
            g.conv2d(cat, w, Some(b), ConvSpec { stride: 1, pad: 0 })?
        }
    };
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_input(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f32>())
    }

    #[test]
    fn first_layer_channels() {
        let m: Model<f32> = build_model(&ModelConfig::desk(Arch::Unet, Injection::Baseline, 0), 0).unwrap();
        assert_eq!(m.first_layer_in_channels(), 1);
        let m: Model<f32> = build_model(&ModelConfig::desk(Arch::Unet, Injection::Multichannel, 10), 0).unwrap();
        assert_eq!(m.first_layer_in_channels(), 11);
        let m: Model<f32> = build_model(&ModelConfig::desk(Arch::Resnet, Injection::Multichannel, 2), 0).unwrap();
        assert_eq!(m.first_layer_in_channels(), 3);
    }

    #[test]
    fn invalid_configs() {
        let bad = ModelConfig::desk(Arch::Unet, Injection::Multichannel, 0);
        assert!(matches!(build_model::<f32>(&bad, 0), Err(Error::Config(_))));
        let bad = ModelConfig::desk(Arch::Resnet, Injection::Dualbranch, 0);
        assert!(build_model::<f32>(&bad, 0).is_err());
        let bad = ModelConfig {
            depth: 0,
            ..ModelConfig::desk(Arch::Unet, Injection::Baseline, 0)
        };
        assert!(build_model::<f32>(&bad, 0).is_err());
    }

    #[test]
    fn output_shapes() {
        let base: Model<f32> = build_model(&ModelConfig::desk(Arch::Unet, Injection::Baseline, 0), 1).unwrap();
        let x = rand_input([2, 1, 32, 32], 0);
        assert_eq!(base.forward(&x, None).unwrap().shape(), [2, 1, 32, 32]);

        let mut cfg = ModelConfig::desk(Arch::Unet, Injection::Dualbranch, 2);
        cfg.base_features = 4;
        let dual: Model<f32> = build_model(&cfg, 1).unwrap();
        let p = rand_input([2, 2, 32, 32], 1);
        assert_eq!(dual.forward(&x, Some(&p)).unwrap().shape(), [2, 1, 32, 32]);
        assert!(dual.forward(&x, None).is_err());

        let odd = rand_input([1, 1, 30, 32], 2);
        assert!(matches!(base.forward(&odd, None), Err(Error::Shape(_))));
    }

    #[test]
    fn add_fusion_identities() {
        let f = LatentFusion {
            mode: FusionMode::Add,
            channels: 3,
        };
        let main = rand_input([2, 3, 4, 4], 5);
        let zero = Tensor::zeros([2, 3, 4, 4]);
        assert_eq!(fuse_latent(&main, &zero, &f, None).unwrap(), main);
        let twice = fuse_latent(&main, &main, &f, None).unwrap();
        assert_eq!(twice, main.map(|v| 2.0 * v));
        let other = rand_input([2, 3, 4, 2], 6);
        assert!(fuse_latent(&main, &other, &f, None).is_err());
    }

    #[test]
    fn concat_conv_block_identity() {
        let c = 3;
        let f = LatentFusion {
            mode: FusionMode::ConcatConv,
            channels: c,
        };
        let main = rand_input([2, c, 4, 4], 7);
        let aux = rand_input([2, c, 4, 4], 8);
        let w = Tensor::from_fn([c, 2 * c, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
        let b = Tensor::zeros([1, c, 1, 1]);
        let out = fuse_latent(&main, &aux, &f, Some((&w, &b))).unwrap();
        for (x, y) in out.data().iter().zip(main.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn same_config_same_count_and_params() {
        let cfg = ModelConfig::desk(Arch::Resnet, Injection::Dualbranch, 2);
        let a: Model<f32> = build_model(&cfg, 3).unwrap();
        let b: Model<f32> = build_model(&cfg, 3).unwrap();
        assert_eq!(a.count_parameters(), b.count_parameters());
        assert_eq!(a.params(), b.params());
        let c: Model<f32> = build_model(&cfg, 4).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn baseline_ignores_priors() {
        let m: Model<f32> = build_model(&ModelConfig::desk(Arch::Resnet, Injection::Baseline, 0), 2).unwrap();
        let x = rand_input([1, 1, 16, 16], 0);
        let p1 = rand_input([1, 2, 16, 16], 1);
        let p2 = rand_input([1, 2, 16, 16], 2);
        assert_eq!(m.forward(&x, Some(&p1)).unwrap(), m.forward(&x, Some(&p2)).unwrap());
    }
}
