//! Toy text-conditional noise-prediction network.
//!
//! Pixels are flattened into a sequence of `C`-dim patches projected to
//! `d_model`. Each block runs self-attention over pixels, cross-attention over
//! prompt tokens and an MLP, all pre-normalised with residual connections. A
//! sinusoidal timestep embedding is added to every pixel token.
//!
//! Every attention map is computed as `softmax(Q K^T / sqrt(d_head))` and,
//! when an [`AttentionHook`] is supplied, replaced by the hook's output before
//! it is applied to `V`. This is where mask constraints plug in.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};
use crate::tokens::TokenizedPrompt;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub token_budget: usize,
    pub vocab_size: usize,
    pub t_train: usize,
    pub mlp_ratio: usize,
    /// Runs the middle block on a 2x average-pooled pixel grid.
    pub pool_middle: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            d_model: 64,
            n_layers: 4,
            n_heads: 2,
            token_budget: 8,
            vocab_size: crate::bench::scene::default_vocabulary().len(),
            t_train: 1000,
            mlp_ratio: 4,
            pool_middle: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.image_size.is_power_of_two() || self.image_size < 2 {
            return bad(format!("image_size {} must be a power of two", self.image_size));
        }
        if self.channels == 0 || self.n_layers == 0 || self.token_budget == 0 || self.mlp_ratio == 0 {
            return bad("channels, n_layers, token_budget and mlp_ratio must be positive".into());
        }
        if self.vocab_size < 3 {
            return bad(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.t_train == 0 {
            return bad("t_train must be positive".into());
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        1 + 2 * self.token_budget
    }

    pub fn n_pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn pooled_layer(&self) -> Option<usize> {
        self.pool_middle.then_some(self.n_layers / 2)
    }

    pub fn layer_resolution(&self, layer: usize) -> (usize, usize) {
        let s = if self.pooled_layer() == Some(layer) {
            self.image_size / 2
        } else {
            self.image_size
        };
        (s, s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttn,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionSite {
    pub layer: usize,
    pub kind: AttentionKind,
    pub resolution: (usize, usize),
}

impl AttentionSite {
    pub fn n_pixels(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }
}

/// Replaces a post-softmax attention map `[heads, pixels, columns]`.
///
/// Implementations must return a tensor of the same shape with entries in
/// `[0, 1]`.
pub trait AttentionHook<S: Scalar = f32>: Sync {
    fn transform(&self, site: &AttentionSite, maps: &Tensor<S>) -> Result<Tensor<S>>;
}

/// Returns every map unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityHook;

impl<S: Scalar> AttentionHook<S> for IdentityHook {
    fn transform(&self, _site: &AttentionSite, maps: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(maps.clone())
    }
}

impl<S: Scalar, F> AttentionHook<S> for F
where
    F: Fn(&AttentionSite, &Tensor<S>) -> Result<Tensor<S>> + Sync,
{
    fn transform(&self, site: &AttentionSite, maps: &Tensor<S>) -> Result<Tensor<S>> {
        self(site, maps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<S: Scalar = f32> {
    config: DenoiserConfig,
    params: IndexMap<String, Tensor<S>>,
}

/// Parameters bound to tape variables for one forward pass.
struct Bound<'a, S: Scalar> {
    names: &'a IndexMap<String, Tensor<S>>,
    vars: Vec<Var>,
}

impl<S: Scalar> Bound<'_, S> {
    fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .get_index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }
}

fn param_shapes(c: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.d_model;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("patch_in.w".into(), vec![c.channels, d]),
        ("patch_in.b".into(), vec![d]),
        ("pos_pixel".into(), vec![c.n_pixels(), d]),
        ("time.w1".into(), vec![d, d]),
        ("time.b1".into(), vec![d]),
        ("time.w2".into(), vec![d, d]),
        ("time.b2".into(), vec![d]),
        ("tok_embed".into(), vec![c.vocab_size, d]),
        ("pos_token".into(), vec![c.n_tokens(), d]),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        for ln in ["ln1", "ln2", "ln3"] {
            v.push((p(&format!("{ln}.g")), vec![d]));
            v.push((p(&format!("{ln}.b")), vec![d]));
        }
        for att in ["self", "cross"] {
            for w in ["wq", "wk", "wv", "wo"] {
                v.push((p(&format!("{att}.{w}")), vec![d, d]));
            }
            v.push((p(&format!("{att}.bo")), vec![d]));
        }
        v.push((p("mlp.w1"), vec![d, c.mlp_ratio * d]));
        v.push((p("mlp.b1"), vec![c.mlp_ratio * d]));
        v.push((p("mlp.w2"), vec![c.mlp_ratio * d, d]));
        v.push((p("mlp.b2"), vec![d]));
    }
    v.push(("ln_out.g".into(), vec![d]));
    v.push(("ln_out.b".into(), vec![d]));
    v.push(("out.w".into(), vec![d, c.channels]));
    v.push(("out.b".into(), vec![c.channels]));
    v
}

/// Sinusoidal embedding of a timestep, `[1, dim]`.
pub fn timestep_embedding<S: Scalar>(t: usize, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut out = vec![S::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = S::of(arg.sin());
        out[half + i] = S::of(arg.cos());
    }
    Tensor::new(&[1, dim], out).expect("dim > 0")
}

/// `[(s/2)^2, s^2]` averaging matrix for 2x2 pooling of a row-major grid.
fn pool_matrix<S: Scalar>(s: usize) -> Tensor<S> {
    let h = s / 2;
    let mut m = vec![S::zero(); h * h * s * s];
    for r in 0..s {
        for c in 0..s {
            let dst = (r / 2) * h + c / 2;
            m[dst * s * s + r * s + c] = S::of(0.25);
        }
    }
    Tensor::new(&[h * h, s * s], m).expect("nonempty")
}

/// `[s^2, (s/2)^2]` nearest-neighbour upsampling matrix.
fn upsample_matrix<S: Scalar>(s: usize) -> Tensor<S> {
    let h = s / 2;
    let mut m = vec![S::zero(); s * s * h * h];
    for r in 0..s {
        for c in 0..s {
            m[(r * s + c) * h * h + (r / 2) * h + c / 2] = S::one();
        }
    }
    Tensor::new(&[s * s, h * h], m).expect("nonempty")
}

impl<S: Scalar> Denoiser<S> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(seed, 0x1417);
        let mut params = IndexMap::new();
        for (name, shape) in param_shapes(&config) {
            let value = if name.ends_with(".g") {
                Tensor::ones(&shape)
            } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with(".bo") {
                Tensor::zeros(&shape)
            } else if name == "tok_embed" || name.starts_with("pos_") {
                rng.normal_tensor(&shape, 0.1)
            } else if name.ends_with(".wo") || name.ends_with("mlp.w2") || name == "out.w" {
                // residual branches start small so the initial network is
                // close to the identity path
                rng.normal_tensor(&shape, 0.2 / (shape[0] as f64).sqrt())
            } else {
                rng.normal_tensor(&shape, 1.0 / (shape[0] as f64).sqrt())
            };
            params.insert(name, value);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: IndexMap<String, Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        let params = expected
            .iter()
            .map(|(n, _)| (n.clone(), params[n.as_str()].clone()))
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<S>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<S>> {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Denoiser<T> {
        Denoiser {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// All attention sites in the order they are visited by a forward pass.
    pub fn sites(&self) -> Vec<AttentionSite> {
        (0..self.config.n_layers)
            .flat_map(|layer| {
                let resolution = self.config.layer_resolution(layer);
                [AttentionKind::SelfAttn, AttentionKind::Cross].map(|kind| AttentionSite {
                    layer,
                    kind,
                    resolution,
                })
            })
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.params.values().map(|p| tape.param(p.clone())).collect()
    }

    /// Predicts the noise in `z_t` at timestep `t`.
    pub fn forward_eps(
        &self,
        z_t: &Tensor<S>,
        t: usize,
        tokens: &TokenizedPrompt,
        hook: Option<&dyn AttentionHook<S>>,
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape);
        let z = tape.constant(z_t.clone());
        let out = self.forward_on_tape(&mut tape, &vars, z, t, tokens, hook)?;
        Ok(tape.value(out).clone())
    }

    /// Records the forward pass on `tape` using parameters bound by [`bind`](Self::bind).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        z: Var,
        t: usize,
        tokens: &TokenizedPrompt,
        hook: Option<&dyn AttentionHook<S>>,
    ) -> Result<Var> {
        let c = &self.config;
        let (ch, s) = (c.channels, c.image_size);
        if tape.value(z).shape() != [ch, s, s] {
            return Err(Error::dim(
                "forward_eps",
                format!(
                    "latent {:?} does not match [{ch}, {s}, {s}]",
                    tape.value(z).shape()
                ),
            ));
        }
        if t == 0 || t > c.t_train {
            return Err(Error::Parameter(format!(
                "timestep {t} outside [1, {}]",
                c.t_train
            )));
        }
        if tokens.len() != c.n_tokens() || tokens.budget != c.token_budget {
            return Err(Error::dim(
                "forward_eps",
                format!(
                    "prompt has {} tokens, model expects {}",
                    tokens.len(),
                    c.n_tokens()
                ),
            ));
        }
        if tokens.ids.iter().any(|&id| id >= c.vocab_size) {
            return Err(Error::Vocabulary("token id beyond model vocabulary".into()));
        }
        if !tape.value(z).is_finite() {
            return Err(Error::NonFinite("forward_eps input".into()));
        }
        let p = Bound {
            names: &self.params,
            vars: vars.to_vec(),
        };
        let hw = c.n_pixels();

        // pixel tokens [hw, d]
        let flat = tape.reshape(z, &[ch, hw])?;
        let pix = tape.permute(flat, &[1, 0])?;
        let mut x = tape.matmul(pix, p.get("patch_in.w"))?;
        x = tape.add_bias(x, p.get("patch_in.b"))?;
        x = tape.add(x, p.get("pos_pixel"))?;

        let temb = tape.constant(timestep_embedding(t, c.d_model));
        let mut te = tape.matmul(temb, p.get("time.w1"))?;
        te = tape.add_bias(te, p.get("time.b1"))?;
        te = tape.silu(te)?;
        te = tape.matmul(te, p.get("time.w2"))?;
        te = tape.add_bias(te, p.get("time.b2"))?;
        let te = tape.reshape(te, &[c.d_model])?;
        x = tape.add_bias(x, te)?;

        let emb = tape.embedding(p.get("tok_embed"), &tokens.ids)?;
        let ctx = tape.add(emb, p.get("pos_token"))?;

        for layer in 0..c.n_layers {
            if c.pooled_layer() == Some(layer) {
                let pool = tape.constant(pool_matrix(s));
                let up = tape.constant(upsample_matrix(s));
                let pooled = tape.matmul(pool, x)?;
                let y = self.block(tape, &p, layer, pooled, ctx, hook)?;
                let delta = tape.sub(y, pooled)?;
                let delta = tape.matmul(up, delta)?;
                x = tape.add(x, delta)?;
            } else {
                x = self.block(tape, &p, layer, x, ctx, hook)?;
            }
        }

        let h = tape.layer_norm(x, p.get("ln_out.g"), p.get("ln_out.b"))?;
        let mut out = tape.matmul(h, p.get("out.w"))?;
        out = tape.add_bias(out, p.get("out.b"))?;
        let out = tape.permute(out, &[1, 0])?;
        tape.reshape(out, &[ch, s, s])
    }

    fn block(
        &self,
        tape: &mut Tape<S>,
        p: &Bound<S>,
        layer: usize,
        x: Var,
        ctx: Var,
        hook: Option<&dyn AttentionHook<S>>,
    ) -> Result<Var> {
        let name = |s: &str| format!("blocks.{layer}.{s}");
        let resolution = self.config.layer_resolution(layer);

        let h = tape.layer_norm(x, p.get(&name("ln1.g")), p.get(&name("ln1.b")))?;
        let site = AttentionSite {
            layer,
            kind: AttentionKind::SelfAttn,
            resolution,
        };
        let a = self.attention(tape, p, layer, "self", h, h, site, hook)?;
        let x = tape.add(x, a)?;

        let h = tape.layer_norm(x, p.get(&name("ln2.g")), p.get(&name("ln2.b")))?;
        let site = AttentionSite {
            layer,
            kind: AttentionKind::Cross,
            resolution,
        };
        let a = self.attention(tape, p, layer, "cross", h, ctx, site, hook)?;
        let x = tape.add(x, a)?;

        let h = tape.layer_norm(x, p.get(&name("ln3.g")), p.get(&name("ln3.b")))?;
        let mut m = tape.matmul(h, p.get(&name("mlp.w1")))?;
        m = tape.add_bias(m, p.get(&name("mlp.b1")))?;
        m = tape.silu(m)?;
        m = tape.matmul(m, p.get(&name("mlp.w2")))?;
        m = tape.add_bias(m, p.get(&name("mlp.b2")))?;
        tape.add(x, m)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<S>,
        p: &Bound<S>,
        layer: usize,
        kind: &str,
        query_in: Var,
        kv_in: Var,
        site: AttentionSite,
        hook: Option<&dyn AttentionHook<S>>,
    ) -> Result<Var> {
        let c = &self.config;
        let (heads, dh) = (c.n_heads, c.d_head());
        let name = |s: &str| format!("blocks.{layer}.{kind}.{s}");
        let n = tape.value(query_in).shape()[0];
        let m = tape.value(kv_in).shape()[0];

        let split = |tape: &mut Tape<S>, v: Var, rows: usize| -> Result<Var> {
            let v = tape.reshape(v, &[rows, heads, dh])?;
            tape.permute(v, &[1, 0, 2])
        };
        let q = tape.matmul(query_in, p.get(&name("wq")))?;
        let q = split(tape, q, n)?;
        let k = tape.matmul(kv_in, p.get(&name("wk")))?;
        let k = split(tape, k, m)?;
        let v = tape.matmul(kv_in, p.get(&name("wv")))?;
        let v = split(tape, v, m)?;

        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, S::of(1.0 / (dh as f64).sqrt()))?;
        let mut maps = tape.softmax(scores)?;
        if let Some(hook) = hook {
            let replaced = hook.transform(&site, tape.value(maps))?;
            maps = tape.substitute(maps, replaced)?;
        }
        let o = tape.matmul(maps, v)?;
        let o = tape.permute(o, &[1, 0, 2])?;
        let o = tape.reshape(o, &[n, c.d_model])?;
        let o = tape.matmul(o, p.get(&name("wo")))?;
        tape.add_bias(o, p.get(&name("bo")))
    }
}
