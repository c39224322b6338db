//! Optimiser, schedule, clipping and the masked-distillation training loop.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{Augment, Dataset, EpochSampler};
use crate::error::{Error, Result};
use crate::mask::{MaskSet, MaskStrategy};
use crate::objective::{kd_objective_batch, mim_objective_batch, LossKind, NormKind};
use crate::patch::{patchify, stack_patches};
use crate::teacher::{TargetFeatures, Teacher, TeacherSpec};
use crate::tensor::{Real, Tape, Tensor};
use crate::vit::{decays, embed_and_mask, init_params, mim_head, student_forward, vit_forward, Mode, ViTConfig, ViTParams};

/// Linear warmup from 0 to `peak`, then cosine decay to `min_lr` at
/// `total_steps`.
pub fn cosine_lr(step: usize, warmup_steps: usize, total_steps: usize, peak: f64, min_lr: f64) -> f64 {
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return peak;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    min_lr + 0.5 * (peak - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// One AdamW update of a flat parameter slice in place. `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    hyper: &AdamHyper,
    decay: bool,
) -> Result<()> {
    if grad.len() != theta.len() || m.len() != theta.len() || v.len() != theta.len() {
        return Err(Error::shape("adamw", &[theta.len()], &[grad.len(), m.len(), v.len()]));
    }
    let step = step.max(1) as i32;
    let (b1, b2) = (T::c(hyper.beta1), T::c(hyper.beta2));
    let one = T::one();
    let c1 = T::c(1.0 - hyper.beta1.powi(step));
    let c2 = T::c(1.0 - hyper.beta2.powi(step));
    let lr_t = T::c(lr);
    let eps = T::c(hyper.eps);
    let wd = if decay { T::c(lr * hyper.weight_decay) } else { T::zero() };
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] = theta[i] - lr_t * m_hat / (v_hat.sqrt() + eps) - wd * theta[i];
    }
    Ok(())
}

/// First and second moments mirroring the parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: ViTParams<T>,
    pub v: ViTParams<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ViTParams<T>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// AdamW over every tensor; decay follows [`decays`]. Advances `state.step`.
pub fn adamw_step<T: Real>(
    params: &mut ViTParams<T>,
    grads: &ViTParams<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    state.step += 1;
    let grads = grads.named();
    let mut ms = state.m.named_mut();
    let mut vs = state.v.named_mut();
    let mut ps = params.named_mut();
    if grads.len() != ps.len() || ms.len() != ps.len() || vs.len() != ps.len() {
        return Err(Error::shape("adamw_step", &[ps.len()], &[grads.len()]));
    }
    for (((name, p), (_, g)), ((_, m), (_, v))) in ps.iter_mut().zip(&grads).zip(ms.iter_mut().zip(vs.iter_mut())) {
        if g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        let decay = decays(name, p);
        let (mut theta, mut mm, mut vv) = (p.to_vec(), m.to_vec(), v.to_vec());
        adamw_update(&mut theta, g.data(), &mut mm, &mut vv, state.step, lr, hyper, decay)?;
        **p = Tensor::new(p.shape(), theta)?;
        **m = Tensor::new(m.shape(), mm)?;
        **v = Tensor::new(v.shape(), vv)?;
    }
    Ok(())
}

/// Global L2 norm over all gradients, accumulated in `f64`.
pub fn global_norm<T: Real>(grads: &[&Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so the global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [&mut Tensor<T>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::RangeViolation {
            key: "grad_clip".into(),
            value: max_norm.to_string(),
            expected: "> 0".into(),
        });
    }
    let total = global_norm(&grads.iter().map(|g| &**g).collect::<Vec<_>>());
    if total > max_norm {
        let scale = T::c(max_norm / total);
        for g in grads.iter_mut() {
            **g = g.map(|x| x * scale);
        }
    }
    Ok(total)
}

/// SHA-256 over names, shapes and little-endian values, as lowercase hex.
pub fn params_digest<T: Real>(params: &ViTParams<T>) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in params.named() {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        buf.clear();
        t.data().iter().for_each(|x| x.write_le(&mut buf));
        hasher.update(&buf);
    }
    hasher.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Total optimiser steps; `None` derives them from `epochs`.
    pub steps: Option<usize>,
    pub epochs: usize,
    /// Warmup length in steps; `None` derives it from `warmup_epochs`.
    pub warmup_steps: Option<usize>,
    pub warmup_epochs: usize,
    /// Capped at the dataset size.
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
    pub teacher: TeacherSpec,
    pub norm: NormKind,
    pub loss: LossKind,
    pub seed: u64,
    pub kd_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: None,
            epochs: 300,
            warmup_steps: None,
            warmup_epochs: 10,
            batch_size: 2048,
            peak_lr: 1.5e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            grad_clip_norm: 3.0,
            mask_ratio: 0.4,
            mask_strategy: MaskStrategy::default(),
            teacher: TeacherSpec::default(),
            norm: NormKind::default(),
            loss: LossKind::default(),
            seed: 0,
            kd_mode: false,
        }
    }
}

/// Resolved step budget for a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, value: f64, expected: &str| {
            Err(Error::RangeViolation {
                key: key.into(),
                value: value.to_string(),
                expected: expected.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return range("mask_ratio", self.mask_ratio, "[0, 1]");
        }
        if !(self.peak_lr > 0.0) {
            return range("peak_lr", self.peak_lr, "> 0");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return range("min_lr", self.min_lr, "[0, peak_lr]");
        }
        if !(self.weight_decay >= 0.0) {
            return range("weight_decay", self.weight_decay, ">= 0");
        }
        for (key, b) in [("adam_beta1", self.adam_betas.0), ("adam_beta2", self.adam_betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return range(key, b, "[0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return range("adam_eps", self.adam_eps, "> 0");
        }
        if !(self.grad_clip_norm > 0.0) {
            return range("grad_clip", self.grad_clip_norm, "> 0");
        }
        if self.batch_size == 0 {
            return range("batch_size", 0.0, ">= 1");
        }
        if let (Some(total), Some(warm)) = (self.steps, self.warmup_steps) {
            if warm > total {
                return range("warmup_steps", warm as f64, "<= steps");
            }
        }
        if self.kd_mode && self.mask_ratio != 0.0 {
            return Err(Error::InvalidConfig("kd_mode requires mask_ratio = 0".into()));
        }
        if let MaskStrategy::Blockwise(shape) = &self.mask_strategy {
            shape.validate()?;
        }
        self.teacher.validate()?;
        self.norm.validate()?;
        self.loss.validate()
    }

    /// Turns on the distillation baseline, which implies an unmasked student.
    pub fn with_kd_mode(mut self) -> Self {
        self.kd_mode = true;
        self.mask_ratio = 0.0;
        self
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self, dataset_len: usize) -> Schedule {
        let batch_size = self.batch_size.min(dataset_len).max(1);
        let per_epoch = dataset_len.div_ceil(batch_size).max(1);
        let total_steps = self.steps.unwrap_or(self.epochs * per_epoch);
        let warmup_steps = self.warmup_steps.unwrap_or(self.warmup_epochs * per_epoch).min(total_steps);
        Schedule {
            total_steps,
            warmup_steps,
            batch_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Per-step trace of a run plus the digest of the final parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub entries: Vec<StepEntry>,
    pub params_digest: String,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.step, e.lr, e.loss);
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }
}

/// Everything one training step produced.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Head outputs `[B, N+1, D]` of the forward pass.
    pub outputs: Tensor<T>,
    pub targets: Vec<TargetFeatures<T>>,
    /// Masks applied to the student; `None` in distillation mode.
    pub masks: Option<Vec<MaskSet>>,
}

/// Named random streams, each derived from the run seed.
#[derive(Clone, Debug)]
struct Streams {
    mask: ChaCha8Rng,
    drop: ChaCha8Rng,
    augment: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_DROP: u64 = 4;
const STREAM_AUGMENT: u64 = 5;
const STREAM_TEACHER: u64 = 6;

/// Student initialisation for a run seed.
pub fn init_student<T: Real>(model: &ViTConfig, seed: u64) -> Result<ViTParams<T>> {
    init_params(model, &mut stream(seed, STREAM_INIT))
}

/// Randomly initialised frozen teacher for a run seed.
pub fn init_random_teacher<T: Real>(model: &ViTConfig, seed: u64) -> Result<ViTParams<T>> {
    init_params(model, &mut stream(seed, STREAM_TEACHER))
}

/// Teacher state for `spec`: `frozen` uses the given parameters (a random
/// teacher is drawn from the seed when none are given), `ema` copies the
/// student.
pub fn build_teacher<T: Real>(
    spec: &TeacherSpec,
    frozen: Option<(ViTParams<T>, ViTConfig)>,
    student: &ViTParams<T>,
    model: &ViTConfig,
    seed: u64,
) -> Result<Teacher<T>> {
    spec.validate()?;
    match spec {
        TeacherSpec::Pixel { per_patch_ln } => Ok(Teacher::Pixel {
            per_patch_ln: *per_patch_ln,
        }),
        TeacherSpec::Frozen { target_layers, .. } => {
            let (params, config) = match frozen {
                Some(pc) => pc,
                None => (init_random_teacher(model, seed)?, model.clone()),
            };
            Teacher::frozen(params, config, *target_layers, model)
        }
        TeacherSpec::Ema {
            momentum,
            target_layers,
        } => Teacher::ema(student, model, *momentum, *target_layers),
    }
}

/// A training run: student, teacher, optimiser state and random streams.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: ViTConfig,
    pub config: TrainConfig,
    pub params: ViTParams<T>,
    pub teacher: Teacher<T>,
    pub opt: OptimizerState<T>,
    pub schedule: Schedule,
    pub augment: Augment,
    pub record: RunRecord,
    /// Size of every mask drawn so far, in draw order.
    pub mask_counts: Vec<usize>,
    streams: Streams,
    sampler: Option<EpochSampler>,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        model: ViTConfig,
        config: TrainConfig,
        params: ViTParams<T>,
        teacher: Teacher<T>,
        schedule: Schedule,
    ) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        params.check_shapes(&model)?;
        if teacher.output_dim(&model) != model.target_dim {
            return Err(Error::InvalidConfig(format!(
                "head width {} does not match teacher output width {}",
                model.target_dim,
                teacher.output_dim(&model)
            )));
        }
        let seed = config.seed;
        Ok(Self {
            opt: OptimizerState::new(&params),
            streams: Streams {
                mask: stream(seed, STREAM_MASK),
                drop: stream(seed, STREAM_DROP),
                augment: stream(seed, STREAM_AUGMENT),
            },
            model,
            config,
            params,
            teacher,
            schedule,
            augment: Augment::None,
            record: RunRecord::default(),
            mask_counts: Vec::new(),
            sampler: None,
        })
    }

    /// Fresh run seeded entirely from `config.seed`.
    pub fn from_seed(model: ViTConfig, config: TrainConfig, frozen: Option<(ViTParams<T>, ViTConfig)>, dataset_len: usize) -> Result<Self> {
        let params = init_student(&model, config.seed)?;
        let teacher = build_teacher(&config.teacher, frozen, &params, &model, config.seed)?;
        let schedule = config.schedule(dataset_len);
        Self::new(model, config, params, teacher, schedule)
    }

    /// Replaces the mask stream; the other streams keep following the run seed.
    pub fn reseed_masks(&mut self, seed: u64) {
        self.streams.mask = stream(seed, STREAM_MASK);
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let c = &self.config;
        cosine_lr(step, self.schedule.warmup_steps, self.schedule.total_steps, c.peak_lr, c.min_lr)
    }

    /// One optimisation step on a batch of full images.
    pub fn step(&mut self, batch: &[Tensor<T>]) -> Result<StepOutput<T>> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let step = self.opt.step as usize + 1;
        let lr = self.lr_at(step);

        let views = batch
            .iter()
            .map(|im| self.augment.apply(im, &mut self.streams.augment))
            .collect::<Result<Vec<_>>>()?;
        let seqs = views
            .iter()
            .map(|im| patchify(im, self.model.patch_size))
            .collect::<Result<Vec<_>>>()?;
        if seqs[0].grid != self.model.grid() {
            return Err(Error::GridMismatch {
                teacher: seqs[0].grid,
                student: self.model.grid(),
            });
        }
        let patches = stack_patches(&seqs)?;

        let masks = if self.config.kd_mode {
            None
        } else {
            let grid = self.model.grid();
            let strategy = self.config.mask_strategy;
            Some(
                (0..batch.len())
                    .map(|_| strategy.sample(grid, self.config.mask_ratio, &mut self.streams.mask))
                    .collect::<Result<Vec<_>>>()?,
            )
        };

        if let Some(m) = &masks {
            self.mask_counts.extend(m.iter().map(MaskSet::len));
        }
        // The teacher only ever sees the full view.
        let targets = self.teacher.targets(&seqs)?;

        let mut tape = Tape::new();
        let leaves = self.params.attach(&mut tape);
        let outputs = student_forward(
            &mut tape,
            &patches,
            masks.as_deref(),
            &leaves,
            &self.model,
            Mode::Train,
            &mut self.streams.drop,
        )?;
        let loss = match &masks {
            None => kd_objective_batch(&mut tape, &outputs, &targets, self.config.norm, self.config.loss)?,
            Some(m) => mim_objective_batch(&mut tape, &outputs, &targets, m, self.config.norm, self.config.loss)?,
        };
        let loss_value = loss.item().expect("scalar loss").as_f64();
        let grads = tape.backward(&loss)?;
        let mut grads = leaves.gradients(&grads);
        let grad_norm = {
            let mut slots: Vec<&mut Tensor<T>> = grads.named_mut().into_iter().map(|(_, t)| t).collect();
            clip_grad_norm(&mut slots, self.config.grad_clip_norm)?
        };
        adamw_step(&mut self.params, &grads, &mut self.opt, lr, &self.config.adam())?;
        self.teacher.after_step(&self.params)?;

        self.record.entries.push(StepEntry {
            step,
            lr,
            loss: loss_value,
        });
        Ok(StepOutput {
            step,
            lr,
            loss: loss_value,
            grad_norm,
            outputs: outputs.detach(),
            targets,
            masks,
        })
    }

    /// Runs `steps` steps drawing shuffled batches from `dataset`.
    pub fn run(&mut self, dataset: &Dataset<T>, steps: usize) -> Result<&RunRecord> {
        if dataset.is_empty() {
            return Err(Error::InvalidConfig("empty dataset".into()));
        }
        let seed = self.config.seed;
        let mut sampler = self
            .sampler
            .take()
            .unwrap_or_else(|| EpochSampler::new(dataset.len(), stream(seed, STREAM_DATA)));
        let batch_size = self.schedule.batch_size;
        let result = (0..steps).try_for_each(|_| {
            let idx = sampler.next_batch(batch_size);
            let batch: Vec<Tensor<T>> = idx.iter().map(|&i| dataset.images[i].clone()).collect();
            let out = self.step(&batch)?;
            log::debug!("step {} lr {:.3e} loss {:.6}", out.step, out.lr, out.loss);
            Ok::<_, Error>(())
        });
        self.sampler = Some(sampler);
        result?;
        self.record.params_digest = params_digest(&self.params);
        Ok(&self.record)
    }

    /// Runs the full scheduled budget.
    pub fn run_to_end(&mut self, dataset: &Dataset<T>) -> Result<&RunRecord> {
        let remaining = self.schedule.total_steps.saturating_sub(self.opt.step as usize);
        self.run(dataset, remaining)
    }
}

/// Settings for supervised pretraining of a toy classifier teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamHyper,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            peak_lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 20,
            adam: AdamHyper::default(),
            grad_clip_norm: 3.0,
            seed: 0,
        }
    }
}

/// Class logits from the head applied to the class-token row: `[B, classes]`.
pub fn classifier_logits<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    patches: &Tensor<T>,
    params: &ViTParams<T>,
    model: &ViTConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let embedded = embed_and_mask(tape, patches, None, params)?;
    let features = vit_forward(tape, &embedded, params, model, mode, rng)?;
    let cls = tape.index_select(&features, 1, &[0])?;
    let b = patches.shape()[0];
    let cls = tape.reshape(&cls, &[b, model.hidden])?;
    mim_head(tape, &cls, params)
}

fn batch_patches<T: Real>(images: &[Tensor<T>], patch_size: usize) -> Result<Tensor<T>> {
    let seqs = images
        .iter()
        .map(|im| patchify(im, patch_size))
        .collect::<Result<Vec<_>>>()?;
    stack_patches(&seqs)
}

/// Predicted classes in eval mode.
pub fn classify<T: Real>(params: &ViTParams<T>, model: &ViTConfig, images: &[Tensor<T>]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(images.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in images.chunks(64) {
        let patches = batch_patches(chunk, model.patch_size)?;
        let logits = classifier_logits(&mut Tape::no_grad(), &patches, params, model, Mode::Eval, &mut rng)?;
        let classes = model.target_dim;
        for r in 0..chunk.len() {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            let best = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            preds.push(best.0);
        }
    }
    Ok(preds)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Output of [`pretrain_teacher_toy`].
#[derive(Clone, Debug)]
pub struct ClassifierRun<T> {
    pub params: ViTParams<T>,
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains a small ViT classifier (class-token head, cross-entropy) to serve
/// as a frozen teacher. `model.target_dim` must equal the class count.
pub fn pretrain_teacher_toy<T: Real>(
    dataset: &Dataset<T>,
    model: &ViTConfig,
    config: &ClassifierConfig,
) -> Result<ClassifierRun<T>> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    if model.target_dim != dataset.num_classes {
        return Err(Error::InvalidConfig(format!(
            "classifier head width {} does not match {} classes",
            model.target_dim, dataset.num_classes
        )));
    }
    let mut params = init_params::<T, _>(model, &mut stream(config.seed, STREAM_INIT))?;
    let mut opt = OptimizerState::new(&params);
    let mut drop_rng = stream(config.seed, STREAM_DROP);
    let mut sampler = EpochSampler::new(dataset.len(), stream(config.seed, STREAM_DATA));
    let batch_size = config.batch_size.min(dataset.len()).max(1);
    let classes = dataset.num_classes;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let idx = sampler.next_batch(batch_size);
        let images: Vec<Tensor<T>> = idx.iter().map(|&i| dataset.images[i].clone()).collect();
        let patches = batch_patches(&images, model.patch_size)?;
        let mut tape = Tape::new();
        let leaves = params.attach(&mut tape);
        let logits = classifier_logits(&mut tape, &patches, &leaves, model, Mode::Train, &mut drop_rng)?;
        let logp = tape.log_softmax(&logits, 1)?;
        let flat = tape.reshape(&logp, &[idx.len() * classes])?;
        let picks: Vec<usize> = idx.iter().enumerate().map(|(r, &i)| r * classes + dataset.labels[i]).collect();
        let picked = tape.index_select(&flat, 0, &picks)?;
        let nll = tape.mean(&picked, None)?;
        let loss = tape.scale(&nll, -T::one())?;
        losses.push(loss.item().expect("scalar").as_f64());
        let grads = tape.backward(&loss)?;
        let mut grads = leaves.gradients(&grads);
        {
            let mut slots: Vec<&mut Tensor<T>> = grads.named_mut().into_iter().map(|(_, t)| t).collect();
            clip_grad_norm(&mut slots, config.grad_clip_norm)?;
        }
        let lr = cosine_lr(step, config.warmup_steps, config.steps, config.peak_lr, config.min_lr);
        adamw_step(&mut params, &grads, &mut opt, lr, &config.adam)?;
    }
    let preds = classify(&params, model, &dataset.images)?;
    Ok(ClassifierRun {
        train_accuracy: accuracy(&preds, &dataset.labels),
        params,
        losses,
    })
}
