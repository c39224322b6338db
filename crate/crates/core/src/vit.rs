//! Vision transformer student: patch projection with mask-token substitution,
//! class token, learnable absolute positions, pre-norm blocks with layer scale
//! and stochastic depth, and a linear prediction head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mask::MaskSet;
use crate::tensor::{Gradients, Real, Tape, Tensor};

/// Standard deviation of the truncated-normal initialiser.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    /// Square input side, in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub heads: usize,
    pub layer_scale_init: f64,
    /// Peak stochastic-depth rate, reached by the last block.
    pub drop_path_rate: f64,
    /// Output width of the prediction head.
    pub target_dim: usize,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            layers: 4,
            hidden: 64,
            ffn_hidden: 256,
            heads: 4,
            layer_scale_init: 0.1,
            drop_path_rate: 0.1,
            target_dim: 64,
            ln_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::IndivisibleDims {
                height: self.image_size,
                width: self.image_size,
                patch: self.patch_size,
            });
        }
        if self.image_size == 0 || self.channels == 0 || self.hidden == 0 || self.ffn_hidden == 0 {
            return bad("zero-sized model dimension".into());
        }
        if self.target_dim == 0 {
            return bad("target_dim must be positive".into());
        }
        if self.ln_eps <= 0.0 {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let side = self.image_size / self.patch_size;
        (side, side)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Stochastic-depth rate of block `layer`, ramped linearly from 0.
    pub fn drop_path_at(&self, layer: usize) -> f64 {
        if self.layers <= 1 {
            0.0
        } else {
            self.drop_path_rate * layer as f64 / (self.layers - 1) as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams<T> {
    pub norm1_weight: Tensor<T>,
    pub norm1_bias: Tensor<T>,
    pub q_weight: Tensor<T>,
    pub q_bias: Tensor<T>,
    pub k_weight: Tensor<T>,
    pub k_bias: Tensor<T>,
    pub v_weight: Tensor<T>,
    pub v_bias: Tensor<T>,
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
    pub gamma_1: Tensor<T>,
    pub norm2_weight: Tensor<T>,
    pub norm2_bias: Tensor<T>,
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
    pub gamma_2: Tensor<T>,
}

impl<T: Real> BlockParams<T> {
    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let fields: Vec<(&str, &mut Tensor<T>)> = vec![
            ("norm1.weight", &mut self.norm1_weight),
            ("norm1.bias", &mut self.norm1_bias),
            ("attn.q.weight", &mut self.q_weight),
            ("attn.q.bias", &mut self.q_bias),
            ("attn.k.weight", &mut self.k_weight),
            ("attn.k.bias", &mut self.k_bias),
            ("attn.v.weight", &mut self.v_weight),
            ("attn.v.bias", &mut self.v_bias),
            ("attn.proj.weight", &mut self.proj_weight),
            ("attn.proj.bias", &mut self.proj_bias),
            ("gamma_1", &mut self.gamma_1),
            ("norm2.weight", &mut self.norm2_weight),
            ("norm2.bias", &mut self.norm2_bias),
            ("mlp.fc1.weight", &mut self.fc1_weight),
            ("mlp.fc1.bias", &mut self.fc1_bias),
            ("mlp.fc2.weight", &mut self.fc2_weight),
            ("mlp.fc2.bias", &mut self.fc2_bias),
            ("gamma_2", &mut self.gamma_2),
        ];
        fields
            .into_iter()
            .map(|(name, t)| (format!("{prefix}.{name}"), t))
            .collect()
    }
}

/// All learnable tensors of the student (or of a student-shaped teacher).
#[derive(Clone, Debug)]
pub struct ViTParams<T> {
    /// `[P*P*C, hidden]`
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    /// Shared embedding substituted at masked positions.
    pub mask_token: Tensor<T>,
    pub cls_token: Tensor<T>,
    /// `[N + 1, hidden]`, row 0 belongs to the class token.
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// `[hidden, target_dim]`
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

impl<T: Real> ViTParams<T> {
    /// Named tensors in a fixed order shared by checkpoints and optimisers.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_weight),
            ("patch_embed.bias".into(), &mut self.patch_bias),
            ("mask_token".into(), &mut self.mask_token),
            ("cls_token".into(), &mut self.cls_token),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.extend(block.named_mut(&format!("blocks.{i}")));
        }
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut copy = self.clone();
        copy.named_mut().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Copy with every tensor replaced by `f(name, tensor)`.
    pub fn try_map(&self, mut f: impl FnMut(&str, &Tensor<T>) -> Result<Tensor<T>>) -> Result<Self> {
        let mut out = self.clone();
        for (name, t) in out.named_mut() {
            let mapped = f(&name, t)?;
            if mapped.shape() != t.shape() {
                return Err(Error::shape("param map", t.shape(), mapped.shape()));
            }
            *t = mapped;
        }
        Ok(out)
    }

    pub fn map(&self, mut f: impl FnMut(&str, &Tensor<T>) -> Tensor<T>) -> Self {
        self.try_map(|n, t| Ok(f(n, t))).expect("map preserves shapes")
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn attach(&self, tape: &mut Tape<T>) -> Self {
        self.map(|_, t| tape.leaf(t))
    }

    /// Gradients for a copy produced by [`ViTParams::attach`]; untouched
    /// tensors get zeros.
    pub fn gradients(&self, grads: &Gradients<T>) -> Self {
        self.map(|_, t| grads.get_or_zeros(t))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ViTParams<U> {
        let block = |b: &BlockParams<T>| BlockParams {
            norm1_weight: b.norm1_weight.cast(),
            norm1_bias: b.norm1_bias.cast(),
            q_weight: b.q_weight.cast(),
            q_bias: b.q_bias.cast(),
            k_weight: b.k_weight.cast(),
            k_bias: b.k_bias.cast(),
            v_weight: b.v_weight.cast(),
            v_bias: b.v_bias.cast(),
            proj_weight: b.proj_weight.cast(),
            proj_bias: b.proj_bias.cast(),
            gamma_1: b.gamma_1.cast(),
            norm2_weight: b.norm2_weight.cast(),
            norm2_bias: b.norm2_bias.cast(),
            fc1_weight: b.fc1_weight.cast(),
            fc1_bias: b.fc1_bias.cast(),
            fc2_weight: b.fc2_weight.cast(),
            fc2_bias: b.fc2_bias.cast(),
            gamma_2: b.gamma_2.cast(),
        };
        ViTParams {
            patch_weight: self.patch_weight.cast(),
            patch_bias: self.patch_bias.cast(),
            mask_token: self.mask_token.cast(),
            cls_token: self.cls_token.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self.blocks.iter().map(block).collect(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
        }
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn check_shapes(&self, config: &ViTConfig) -> Result<()> {
        let reference = init_params::<T, _>(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected = reference.named();
        let actual = self.named();
        if expected.len() != actual.len() {
            return Err(Error::InvalidConfig(format!(
                "parameter count {} does not match config ({})",
                actual.len(),
                expected.len()
            )));
        }
        for ((name, e), (_, a)) in expected.iter().zip(&actual) {
            if e.shape() != a.shape() {
                return Err(Error::InvalidConfig(format!(
                    "{name}: shape {:?}, config expects {:?}",
                    a.shape(),
                    e.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Whether decoupled weight decay applies: weight matrices only, never
/// biases, norm gains, layer-scale gains, tokens or position embeddings.
pub fn decays(name: &str, t: &Tensor<impl Real>) -> bool {
    t.ndim() == 2 && name != "pos_embed"
}

fn trunc_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::c(z * INIT_STD);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Truncated normal (std 0.02, cut at 2 sigma) for projections and embeddings,
/// zero biases, unit norm gains, and layer-scale gains at `layer_scale_init`.
pub fn init_params<T: Real, R: Rng + ?Sized>(config: &ViTConfig, rng: &mut R) -> Result<ViTParams<T>> {
    config.validate()?;
    let h = config.hidden;
    let f = config.ffn_hidden;
    let zeros = |n: usize| Tensor::<T>::zeros(&[n]);
    let ones = |n: usize| Tensor::<T>::ones(&[n]);
    let patch_weight = trunc_normal(&[config.patch_dim(), h], rng);
    let mask_token = trunc_normal(&[h], rng);
    let cls_token = trunc_normal(&[h], rng);
    let pos_embed = trunc_normal(&[config.num_patches() + 1, h], rng);
    let mut blocks = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        blocks.push(BlockParams {
            norm1_weight: ones(h),
            norm1_bias: zeros(h),
            q_weight: trunc_normal(&[h, h], rng),
            q_bias: zeros(h),
            k_weight: trunc_normal(&[h, h], rng),
            k_bias: zeros(h),
            v_weight: trunc_normal(&[h, h], rng),
            v_bias: zeros(h),
            proj_weight: trunc_normal(&[h, h], rng),
            proj_bias: zeros(h),
            gamma_1: Tensor::full(&[h], T::c(config.layer_scale_init)),
            norm2_weight: ones(h),
            norm2_bias: zeros(h),
            fc1_weight: trunc_normal(&[h, f], rng),
            fc1_bias: zeros(f),
            fc2_weight: trunc_normal(&[f, h], rng),
            fc2_bias: zeros(h),
            gamma_2: Tensor::full(&[h], T::c(config.layer_scale_init)),
        });
    }
    Ok(ViTParams {
        patch_weight,
        patch_bias: zeros(h),
        mask_token,
        cls_token,
        pos_embed,
        blocks,
        head_weight: trunc_normal(&[h, config.target_dim], rng),
        head_bias: zeros(config.target_dim),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `x[.., in] W[in, out] + b[out]`
pub fn linear<T: Real>(tape: &mut Tape<T>, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let y = tape.matmul(x, w)?;
    tape.add(&y, b)
}

/// Projects `[B, N, P*P*C]` patches, swaps in the mask token at masked
/// positions, prepends the class token and adds positions: `[B, N+1, hidden]`.
///
/// Masked rows are `1 * e_M + 0 * e_i`, so their values never depend on the
/// masked pixels. `masks = None` leaves every position visible.
pub fn embed_and_mask<T: Real>(
    tape: &mut Tape<T>,
    patches: &Tensor<T>,
    masks: Option<&[MaskSet]>,
    params: &ViTParams<T>,
) -> Result<Tensor<T>> {
    let &[b, n, _] = patches.shape() else {
        return Err(Error::shape("embed_and_mask", patches.shape(), &[0, 0, 0]));
    };
    let h = params.mask_token.len();
    if params.pos_embed.shape() != [n + 1, h] {
        return Err(Error::shape("embed_and_mask", &[n + 1, h], params.pos_embed.shape()));
    }
    let projected = linear(tape, patches, &params.patch_weight, &params.patch_bias)?;
    let embedded = match masks {
        None => projected,
        Some(masks) => {
            if masks.len() != b || masks.iter().any(|m| m.n_total() != n) {
                return Err(Error::shape("embed_and_mask mask", &[b, n], &[masks.len()]));
            }
            let mut delta = Vec::with_capacity(b * n * h);
            for m in masks {
                for masked in m.indicator() {
                    let v = if masked { T::one() } else { T::zero() };
                    delta.extend(std::iter::repeat_n(v, h));
                }
            }
            let keep: Vec<T> = delta.iter().map(|&d| T::one() - d).collect();
            let delta = Tensor::new(&[b, n, h], delta)?;
            let keep = Tensor::new(&[b, n, h], keep)?;
            let from_token = tape.mul(&delta, &params.mask_token)?;
            let from_patch = tape.mul(&keep, &projected)?;
            tape.add(&from_token, &from_patch)?
        }
    };
    let cls = tape.reshape(&params.cls_token, &[1, 1, h])?;
    let cls = tape.broadcast_to(&cls, &[b, 1, h])?;
    let seq = tape.concat(&[&cls, &embedded], 1)?;
    tape.add(&seq, &params.pos_embed)
}

/// Residual-branch stochastic depth: in training each sample's branch is
/// zeroed with probability `rate` and otherwise scaled by `1 / (1 - rate)`.
pub fn drop_path<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if mode == Mode::Eval || rate <= 0.0 || x.ndim() == 0 {
        return Ok(x.clone());
    }
    let batch = x.shape()[0];
    let per_sample = x.len() / batch.max(1);
    let keep_scale = T::c(1.0 / (1.0 - rate));
    let mut factors = Vec::with_capacity(x.len());
    for _ in 0..batch {
        let keep = rng.random::<f64>() >= rate;
        let f = if keep { keep_scale } else { T::zero() };
        factors.extend(std::iter::repeat_n(f, per_sample));
    }
    let factors = Tensor::new(x.shape(), factors)?;
    tape.mul(x, &factors)
}

fn attention<T: Real>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    p: &BlockParams<T>,
    config: &ViTConfig,
) -> Result<Tensor<T>> {
    let &[b, t, h] = x.shape() else {
        return Err(Error::shape("attention", x.shape(), &[0, 0, 0]));
    };
    let (heads, dh) = (config.heads, config.head_dim());
    let q = linear(tape, x, &p.q_weight, &p.q_bias)?;
    let k = linear(tape, x, &p.k_weight, &p.k_bias)?;
    let v = linear(tape, x, &p.v_weight, &p.v_bias)?;
    let split = |tape: &mut Tape<T>, y: &Tensor<T>, perm: &[usize], shape: &[usize]| -> Result<Tensor<T>> {
        let y = tape.reshape(y, &[b, t, heads, dh])?;
        let y = tape.permute(&y, perm)?;
        tape.reshape(&y, shape)
    };
    let q = split(tape, &q, &[0, 2, 1, 3], &[b * heads, t, dh])?;
    let k_t = split(tape, &k, &[0, 2, 3, 1], &[b * heads, dh, t])?;
    let v = split(tape, &v, &[0, 2, 1, 3], &[b * heads, t, dh])?;
    let scores = tape.bmm(&q, &k_t)?;
    let scores = tape.scale(&scores, T::c(1.0 / (dh as f64).sqrt()))?;
    let weights = tape.softmax(&scores, 2)?;
    let ctx = tape.bmm(&weights, &v)?;
    let ctx = tape.reshape(&ctx, &[b, heads, t, dh])?;
    let ctx = tape.permute(&ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(&ctx, &[b, t, h])?;
    linear(tape, &ctx, &p.proj_weight, &p.proj_bias)
}

fn block_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    p: &BlockParams<T>,
    config: &ViTConfig,
    drop_rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let eps = T::c(config.ln_eps);
    let last = x.ndim() - 1;

    let normed = tape.layer_norm(x, last, eps, Some((&p.norm1_weight, &p.norm1_bias)))?;
    let attn = attention(tape, &normed, p, config)?;
    let attn = tape.mul(&attn, &p.gamma_1)?;
    let attn = drop_path(tape, &attn, drop_rate, mode, rng)?;
    let x = tape.add(x, &attn)?;

    let normed = tape.layer_norm(&x, last, eps, Some((&p.norm2_weight, &p.norm2_bias)))?;
    let hidden = linear(tape, &normed, &p.fc1_weight, &p.fc1_bias)?;
    let hidden = tape.gelu(&hidden)?;
    let mlp = linear(tape, &hidden, &p.fc2_weight, &p.fc2_bias)?;
    let mlp = tape.mul(&mlp, &p.gamma_2)?;
    let mlp = drop_path(tape, &mlp, drop_rate, mode, rng)?;
    tape.add(&x, &mlp)
}

/// Runs the block stack and returns the input followed by every block's
/// output (`layers + 1` tensors).
pub fn vit_forward_layers<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    embedded: &Tensor<T>,
    params: &ViTParams<T>,
    config: &ViTConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Tensor<T>>> {
    if embedded.ndim() != 3 || embedded.shape()[2] != config.hidden {
        return Err(Error::shape("vit_forward", embedded.shape(), &[0, 0, config.hidden]));
    }
    let mut outputs = Vec::with_capacity(params.blocks.len() + 1);
    outputs.push(embedded.clone());
    for (l, block) in params.blocks.iter().enumerate() {
        let x = outputs.last().expect("non-empty");
        let next = block_forward(tape, x, block, config, config.drop_path_at(l), mode, rng)?;
        outputs.push(next);
    }
    Ok(outputs)
}

/// Transformer features `[B, N+1, hidden]` for an embedded sequence.
pub fn vit_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    embedded: &Tensor<T>,
    params: &ViTParams<T>,
    config: &ViTConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut layers = vit_forward_layers(tape, embedded, params, config, mode, rng)?;
    Ok(layers.pop().expect("input is always present"))
}

/// Linear prediction head applied to every row: `[.., hidden] -> [.., D]`.
pub fn mim_head<T: Real>(tape: &mut Tape<T>, features: &Tensor<T>, params: &ViTParams<T>) -> Result<Tensor<T>> {
    linear(tape, features, &params.head_weight, &params.head_bias)
}

/// Full student pass: embed with masking, blocks, head.
pub fn student_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    patches: &Tensor<T>,
    masks: Option<&[MaskSet]>,
    params: &ViTParams<T>,
    config: &ViTConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let embedded = embed_and_mask(tape, patches, masks, params)?;
    let features = vit_forward(tape, &embedded, params, config, mode, rng)?;
    mim_head(tape, &features, params)
}
