//! ViT-style networks: source encoder, parity encoder, relay processor and
//! destination decoder, each an embedding, a stack of attention layers, an
//! optional link-adaptation (LA) module and an output head.
//!
//! Token matrices for a batch are stacked image by image: a batch of `N`
//! images with `p²` tokens each is an `(N·p²)×d` matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Component, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{config_err, shape_err, Result};
use crate::signal::ImageBatch;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Patch grid parameter; the token count is `p²`.
    pub p: usize,
    pub c: usize,
    pub c_star: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_e: usize,
    pub n_r: usize,
    pub n_d: usize,
    pub la_enabled: bool,
    /// Image shape `(C, H, W)` after padding.
    pub image: (usize, usize, usize),
}

impl CodecConfig {
    /// Configuration for `channels×h×w` images at bandwidth ratio `rho`.
    #[allow(clippy::too_many_arguments)]
    pub fn for_image(
        image: (usize, usize, usize),
        p: usize,
        rho: f64,
        c: usize,
        heads: usize,
        depths: (usize, usize, usize),
        la_enabled: bool,
    ) -> Result<Self> {
        let m = image.0 * image.1 * image.2;
        let two_k = 2.0 * rho * m as f64;
        let c_star = two_k / (p * p) as f64;
        if (c_star - c_star.round()).abs() > 1e-9 || c_star < 1.0 {
            return config_err("rho", format!("2·rho·M/p² = {c_star} is not a positive integer"));
        }
        let cfg = Self {
            p,
            c,
            c_star: c_star.round() as usize,
            heads,
            mlp_ratio: 4,
            n_e: depths.0,
            n_r: depths.1,
            n_d: depths.2,
            la_enabled,
            image,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Paper-scale CIFAR-10 configuration.
    pub fn cifar() -> Self {
        Self::for_image((3, 32, 32), 8, 0.25, 256, 8, (6, 4, 8), false).expect("static config is valid")
    }

    /// Desk-scale configuration for 3×8×8 images.
    pub fn toy() -> Self {
        Self::for_image((3, 8, 8), 4, 0.25, 32, 4, (2, 2, 2), false).expect("static config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let (ch, h, w) = self.image;
        if self.p == 0 || h % self.p != 0 || w % self.p != 0 {
            return config_err("p", format!("image {h}×{w} is not divisible into a {0}×{0} grid", self.p));
        }
        if ch == 0 {
            return config_err("image", "channel count must be positive");
        }
        if self.c == 0 || self.heads == 0 || self.c % self.heads != 0 {
            return config_err("heads", format!("width {} is not divisible by {} heads", self.c, self.heads));
        }
        if self.c_star == 0 || self.c_star % 2 != 0 {
            return config_err("c_star", format!("c_star must be a positive even number, got {}", self.c_star));
        }
        if self.n_e == 0 || self.n_r == 0 || self.n_d == 0 {
            return config_err("depth", "every node needs at least one transformer layer");
        }
        if self.mlp_ratio == 0 {
            return config_err("mlp_ratio", "must be positive");
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.p * self.p
    }

    pub fn pixels(&self) -> usize {
        self.image.0 * self.image.1 * self.image.2
    }

    /// Values per token, `N_t = M/p²`.
    pub fn token_len(&self) -> usize {
        self.pixels() / self.tokens()
    }

    /// Complex channel uses per image.
    pub fn k(&self) -> usize {
        self.c_star * self.tokens() / 2
    }

    pub fn rho(&self) -> f64 {
        self.k() as f64 / self.pixels() as f64
    }
}

/// Splits each image into `p²` non-overlapping patches, flattened
/// channel-major; output is `(N·p²)×N_t`.
pub fn image_to_sequence(batch: &ImageBatch, p: usize) -> Result<Tensor> {
    if p == 0 || batch.h % p != 0 || batch.w % p != 0 {
        return shape_err(format!("image {}×{} is not divisible into a {p}×{p} grid", batch.h, batch.w));
    }
    let (ph, pw) = (batch.h / p, batch.w / p);
    let nt = batch.c * ph * pw;
    let mut out = Vec::with_capacity(batch.pixels.len());
    for i in 0..batch.n {
        let img = batch.image(i);
        for gy in 0..p {
            for gx in 0..p {
                for ch in 0..batch.c {
                    for y in 0..ph {
                        let row = (ch * batch.h + gy * ph + y) * batch.w + gx * pw;
                        out.extend_from_slice(&img[row..row + pw]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(batch.n * p * p, nt, out))
}

/// Inverse of [`image_to_sequence`].
pub fn sequence_to_image(tokens: &Tensor, p: usize, shape: (usize, usize, usize)) -> Result<ImageBatch> {
    let (c, h, w) = shape;
    let t = p * p;
    if p == 0 || h % p != 0 || w % p != 0 || tokens.rows() % t != 0 || tokens.cols() * t != c * h * w {
        return shape_err(format!("{}×{} tokens do not form {c}×{h}×{w} images with p={p}", tokens.rows(), tokens.cols()));
    }
    let n = tokens.rows() / t;
    let (ph, pw) = (h / p, w / p);
    let mut pixels = vec![0.0; n * c * h * w];
    for i in 0..n {
        let img = &mut pixels[i * c * h * w..(i + 1) * c * h * w];
        for gy in 0..p {
            for gx in 0..p {
                let tok = tokens.row(i * t + gy * p + gx);
                let mut off = 0;
                for ch in 0..c {
                    for y in 0..ph {
                        let row = (ch * h + gy * ph + y) * w + gx * pw;
                        img[row..row + pw].copy_from_slice(&tok[off..off + pw]);
                        off += pw;
                    }
                }
            }
        }
    }
    ImageBatch::new(n, c, h, w, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub qkv: Linear,
    pub proj: Linear,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaModule {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Head {
    /// Single projection.
    Linear(Linear),
    /// Projection, GELU, projection, sigmoid (pixel output).
    Pixels(Linear, Linear),
}

/// One node's network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    pub component: Component,
    pub embed: Linear,
    pub embed_gelu: bool,
    pub pos: ParamId,
    pub layers: Vec<Layer>,
    pub la: Option<LaModule>,
    pub head: Head,
    pub in_width: usize,
    pub out_width: usize,
    /// Linear path from a skip input straight to the output (relay networks).
    #[serde(default)]
    pub bypass: Option<Bypass>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bypass {
    pub lin: Linear,
    pub width: usize,
}

struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    component: Component,
    prefix: String,
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(format!("{}.{name}", self.prefix), self.component, value)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::uniform(fan_in, fan_out, bound, self.rng);
        Linear { w: self.param(&format!("{name}.w"), w), b: self.param(&format!("{name}.b"), Tensor::zeros(1, fan_out)) }
    }
}

impl Stack {
    #[allow(clippy::too_many_arguments)]
    fn build<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        component: Component,
        prefix: &str,
        cfg: &CodecConfig,
        in_width: usize,
        embed_gelu: bool,
        depth: usize,
        out_width: usize,
        pixel_head: bool,
    ) -> Stack {
        let mut it = Init { store, component, prefix: prefix.to_string(), rng };
        let c = cfg.c;
        let t = cfg.tokens();
        let embed = it.linear("embed", in_width, c, 1.0);
        let pos = Tensor::randn(t, c, 0.02, it.rng);
        let pos = it.param("pos", pos);
        let hidden = c * cfg.mlp_ratio;
        let layers = (0..depth)
            .map(|l| {
                let n = format!("layer{l}");
                Layer {
                    qkv: it.linear(&format!("{n}.qkv"), c, 3 * c, 1.0),
                    proj: it.linear(&format!("{n}.proj"), c, c, 0.5),
                    ln_gain: it.param(&format!("{n}.ln.gain"), Tensor::filled(1, c, 1.0)),
                    ln_bias: it.param(&format!("{n}.ln.bias"), Tensor::zeros(1, c)),
                    fc1: it.linear(&format!("{n}.fc1"), c, hidden, 1.0),
                    fc2: it.linear(&format!("{n}.fc2"), hidden, c, 0.5),
                }
            })
            .collect();
        let la = cfg.la_enabled.then(|| {
            let l1 = it.linear("la.l1", t + 4, t, 1.0);
            let l2 = it.linear("la.l2", t, t, 0.1);
            it.store.get_mut(l2.b).data_mut().fill(1.0);
            LaModule { l1, l2 }
        });
        let head = if pixel_head {
            Head::Pixels(it.linear("head.fc1", c, c, 1.0), it.linear("head.fc2", c, out_width, 1.0))
        } else {
            Head::Linear(it.linear("head", c, out_width, 1.0))
        };
        Stack { component, embed, embed_gelu, pos, layers, la, head, in_width, out_width, bypass: None }
    }

    /// Adds an identity-initialized bypass from a `width`-wide skip input.
    fn with_bypass(mut self, store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        let mut w = Tensor::zeros(width, self.out_width);
        for i in 0..width.min(self.out_width) {
            w.data_mut()[i * self.out_width + i] = 1.0;
        }
        let lin = Linear {
            w: store.add(format!("{prefix}.bypass.w"), self.component, w),
            b: store.add(format!("{prefix}.bypass.b"), self.component, Tensor::zeros(1, self.out_width)),
        };
        self.bypass = Some(Bypass { lin, width });
        self
    }

    /// Runs the network on `(N·p²)×in_width` tokens; `u` is `N×4` side information.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], cfg: &CodecConfig, x: Var, u: Option<Var>) -> Result<Var> {
        self.forward_with_skip(g, vars, cfg, x, None, u)
    }

    /// [`Stack::forward`] plus the bypass applied to `skip`.
    pub fn forward_with_skip(
        &self,
        g: &mut Graph,
        vars: &[Var],
        cfg: &CodecConfig,
        x: Var,
        skip: Option<Var>,
        u: Option<Var>,
    ) -> Result<Var> {
        let (rows, cols) = g.shape(x);
        let t = cfg.tokens();
        if cols != self.in_width || rows % t != 0 {
            return shape_err(format!(
                "{} network expects (N·{t})×{} input, got {rows}×{cols}",
                self.component.name(),
                self.in_width
            ));
        }
        let p = |id: ParamId| vars[id.0];
        let mut h = linear(g, vars, self.embed, x);
        if self.embed_gelu {
            h = g.gelu(h);
        }
        h = g.add_tiled(h, p(self.pos));
        for layer in &self.layers {
            h = transformer_layer(g, vars, cfg, layer, h);
        }
        if let Some(la) = &self.la {
            let Some(u) = u else {
                return shape_err("LA module needs side information".to_string());
            };
            h = la_modulate(g, vars, t, la, h, u)?;
        }
        let out = match self.head {
            Head::Linear(l) => linear(g, vars, l, h),
            Head::Pixels(l1, l2) => {
                let a = linear(g, vars, l1, h);
                let a = g.gelu(a);
                let a = linear(g, vars, l2, a);
                g.sigmoid(a)
            }
        };
        match (self.bypass, skip) {
            (None, _) => Ok(out),
            (Some(b), Some(s)) => {
                if g.shape(s) != (rows, b.width) {
                    return shape_err(format!("bypass expects {rows}×{} skip input, got {:?}", b.width, g.shape(s)));
                }
                let y = linear(g, vars, b.lin, s);
                Ok(g.add(out, y))
            }
            (Some(_), None) => shape_err(format!("{} network needs a skip input", self.component.name())),
        }
    }
}

pub fn linear(g: &mut Graph, vars: &[Var], l: Linear, x: Var) -> Var {
    let y = g.matmul(x, vars[l.w.0]);
    g.add_row_bias(y, vars[l.b.0])
}

/// `S₁ = S + MSA(S)`, `S₂ = S₁ + MLP(LN(S₁))`.
pub fn transformer_layer(g: &mut Graph, vars: &[Var], cfg: &CodecConfig, layer: &Layer, s: Var) -> Var {
    let qkv = linear(g, vars, layer.qkv, s);
    let att = g.attention(qkv, cfg.tokens(), cfg.heads);
    let att = linear(g, vars, layer.proj, att);
    let s1 = g.add(s, att);
    let n = g.layer_norm(s1, vars[layer.ln_gain.0], vars[layer.ln_bias.0]);
    let m = linear(g, vars, layer.fc1, n);
    let m = g.gelu(m);
    let m = linear(g, vars, layer.fc2, m);
    g.add(s1, m)
}

/// Scale applied to dB side information before the LA network.
pub const SIDE_INFO_SCALE: f64 = 0.1;

/// Token re-weighting `m ⊗ S̃` with `m = MLP([row-means(S̃), u])`.
pub fn la_modulate(g: &mut Graph, vars: &[Var], tokens: usize, la: &LaModule, s: Var, u: Var) -> Result<Var> {
    let (rows, _) = g.shape(s);
    let n = rows / tokens;
    if g.shape(u) != (n, 4) {
        return shape_err(format!("side information must be {n}×4, got {:?}", g.shape(u)));
    }
    let means = g.row_mean(s);
    let means = g.reshape(means, n, tokens);
    let us = g.scale(u, SIDE_INFO_SCALE);
    let inp = g.concat_cols(&[means, us]);
    let h = linear(g, vars, la.l1, inp);
    let h = g.gelu(h);
    let m = linear(g, vars, la.l2, h);
    let m = g.reshape(m, rows, 1);
    Ok(g.mul_col(s, m))
}

/// All networks of a protocol together with their parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cfg: CodecConfig,
    pub params: ParamStore,
    pub source: Stack,
    pub parity: Option<Stack>,
    pub relay: Option<Stack>,
    pub decoder: Stack,
}

/// Which networks a model needs and the relay's input/output widths per token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub relay: Option<(usize, usize)>,
    /// Parity encoder input/output widths (systematic variant).
    pub parity: Option<(usize, usize)>,
    /// Source encoder output width when it differs from `c*`.
    #[serde(default)]
    pub source_out: Option<usize>,
    /// Width of the relay bypass input.
    #[serde(default)]
    pub relay_skip: Option<usize>,
}

impl Model {
    /// Builds every network. The source encoder and decoder are created
    /// first from `seed`, so models that differ only in their relay share
    /// identical source/decoder initializations.
    pub fn new(cfg: &CodecConfig, shape: ModelShape, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let source =
            Stack::build(&mut params, &mut rng, Component::Source, "source", cfg, cfg.token_len(), true, cfg.n_e, shape.source_out.unwrap_or(cfg.c_star), false);
        let decoder =
            Stack::build(&mut params, &mut rng, Component::Decoder, "decoder", cfg, cfg.c_star, false, cfg.n_d, cfg.token_len(), true);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7e1a);
        let relay = shape.relay.map(|(i, o)| {
            let s = Stack::build(&mut params, &mut rng, Component::Relay, "relay", cfg, i, false, cfg.n_r, o, false);
            match shape.relay_skip {
                Some(w) => s.with_bypass(&mut params, "relay", w),
                None => s,
            }
        });
        let parity = shape
            .parity
            .map(|(i, o)| Stack::build(&mut params, &mut rng, Component::Parity, "parity", cfg, i, false, cfg.n_e, o, false));
        Ok(Self { cfg: cfg.clone(), params, source, parity, relay, decoder })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        if trainable {
            self.params.bind(g)
        } else {
            self.params.bind_frozen(g)
        }
    }

    /// Image batch to `(N·p²)×c*` encoder output (before power normalization).
    pub fn source_encode(&self, g: &mut Graph, vars: &[Var], images: &ImageBatch, u: Option<Var>) -> Result<Var> {
        let (c, h, w) = self.cfg.image;
        if (images.c, images.h, images.w) != (c, h, w) {
            return shape_err(format!(
                "model expects {c}×{h}×{w} images, got {}×{}×{}",
                images.c, images.h, images.w
            ));
        }
        let seq = image_to_sequence(images, self.cfg.p)?;
        let x = g.constant(seq);
        self.source.forward(g, vars, &self.cfg, x, u)
    }

    /// Relay network on `input`; `skip` feeds the bypass when the relay has one.
    pub fn relay_process(&self, g: &mut Graph, vars: &[Var], input: Var, skip: Option<Var>, u: Option<Var>) -> Result<Var> {
        let Some(relay) = &self.relay else {
            return shape_err("model has no relay network".to_string());
        };
        relay.forward_with_skip(g, vars, &self.cfg, input, skip, u)
    }

    pub fn parity_encode(&self, g: &mut Graph, vars: &[Var], input: Var, u: Option<Var>) -> Result<Var> {
        let Some(parity) = &self.parity else {
            return shape_err("model has no parity encoder".to_string());
        };
        parity.forward(g, vars, &self.cfg, input, u)
    }

    /// `(N·p²)×c*` received tokens to `(N·p²)×N_t` pixel tokens in `[0, 1]`.
    pub fn destination_decode(&self, g: &mut Graph, vars: &[Var], y: Var, u: Option<Var>) -> Result<Var> {
        self.decoder.forward(g, vars, &self.cfg, y, u)
    }

    pub fn tokens_to_images(&self, tokens: &Tensor) -> Result<ImageBatch> {
        sequence_to_image(tokens, self.cfg.p, self.cfg.image)
    }

    /// Overwrites the LA output layer so every weight is exactly one.
    pub fn set_la_identity(&mut self) {
        for stack in [Some(&self.source), self.parity.as_ref(), self.relay.as_ref(), Some(&self.decoder)].into_iter().flatten() {
            if let Some(la) = stack.la {
                self.params.get_mut(la.l2.w).data_mut().fill(0.0);
                self.params.get_mut(la.l2.b).data_mut().fill(1.0);
            }
        }
    }
}
