//! Evaluation: masked-prediction cosine, linear probing of frozen features
//! and the mask strategy by ratio sweep.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::{masked_count, BlockShape, MaskStrategy};
use crate::objective::{masked_cosine, NormKind};
use crate::patch::{patchify, stack_patches, PatchSequence};
use crate::teacher::Teacher;
use crate::tensor::{Real, Tape, Tensor};
use crate::train::{build_teacher, init_student, TrainConfig, Trainer};
use crate::vit::{embed_and_mask, student_forward, vit_forward, Mode, ViTConfig, ViTParams};

const CHUNK: usize = 64;

fn patch_chunk<T: Real>(images: &[Tensor<T>], patch_size: usize) -> Result<(Vec<PatchSequence<T>>, Tensor<T>)> {
    let seqs = images
        .iter()
        .map(|im| patchify(im, patch_size))
        .collect::<Result<Vec<_>>>()?;
    let stacked = stack_patches(&seqs)?;
    Ok((seqs, stacked))
}

/// Mean cosine between head outputs and normalised teacher targets at the
/// masked positions of every image, in eval mode.
#[allow(clippy::too_many_arguments)]
pub fn masked_cosine_metric<T: Real, R: Rng + ?Sized>(
    params: &ViTParams<T>,
    model: &ViTConfig,
    teacher: &Teacher<T>,
    images: &[Tensor<T>],
    mask_ratio: f64,
    strategy: MaskStrategy,
    norm: NormKind,
    rng: &mut R,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in images.chunks(CHUNK) {
        let (seqs, patches) = patch_chunk(chunk, model.patch_size)?;
        let masks = (0..chunk.len())
            .map(|_| strategy.sample(model.grid(), mask_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let targets = teacher.targets(&seqs)?;
        let outputs = student_forward(
            &mut Tape::no_grad(),
            &patches,
            Some(&masks),
            params,
            model,
            Mode::Eval,
            &mut eval_rng,
        )?;
        let n: usize = masks.iter().map(|m| m.len()).sum();
        total += masked_cosine(&outputs, &targets, &masks, norm)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Which student features feed the probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FeatureSource {
    Cls,
    #[default]
    MeanPatches,
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSource::Cls => "cls",
            FeatureSource::MeanPatches => "mean_patches",
        })
    }
}

impl FromStr for FeatureSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cls" => Ok(FeatureSource::Cls),
            "mean" | "mean_patches" => Ok(FeatureSource::MeanPatches),
            other => Err(format!("unknown feature source `{other}` (cls|mean_patches)")),
        }
    }
}

/// Final-block features of unmasked images in eval mode, one vector each.
pub fn extract_features<T: Real>(
    params: &ViTParams<T>,
    model: &ViTConfig,
    images: &[Tensor<T>],
    source: FeatureSource,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = model.hidden;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let (_, patches) = patch_chunk(chunk, model.patch_size)?;
        let mut tape = Tape::no_grad();
        let embedded = embed_and_mask(&mut tape, &patches, None, params)?;
        let features = vit_forward(&mut tape, &embedded, params, model, Mode::Eval, &mut rng)?;
        let n1 = features.shape()[1];
        for b in 0..chunk.len() {
            let rows = &features.data()[b * n1 * h..(b + 1) * n1 * h];
            let v = match source {
                FeatureSource::Cls => rows[..h].iter().map(|x| x.as_f64()).collect(),
                FeatureSource::MeanPatches => {
                    let mut acc = vec![0.0; h];
                    for row in rows[h..].chunks(h) {
                        acc.iter_mut().zip(row).for_each(|(a, x)| *a += x.as_f64());
                    }
                    acc.iter().map(|a| a / (n1 - 1) as f64).collect()
                }
            };
            out.push(v);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// L2 penalty on the weights.
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the largest gradient entry falls below this.
    pub tol: f64,
    pub feature_source: FeatureSource,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iters: 3000,
            tol: 1e-6,
            feature_source: FeatureSource::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// `NaN` for classes absent from the evaluated set.
    pub per_class_accuracy: Vec<f64>,
    pub feature_source: FeatureSource,
}

/// Multinomial logistic regression on standardised features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[dim + 1][classes]`, last row is the bias.
    weights: Vec<Vec<f64>>,
    num_classes: usize,
    pub iterations: usize,
    pub feature_source: FeatureSource,
}

fn check_rows(features: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::shape("probe", &[features.len()], &[labels.len()]));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::shape("probe features", &[dim], &[bad.len()]));
    }
    Ok(dim)
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

impl LinearProbe {
    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = f
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        x.push(1.0);
        x
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.num_classes];
        for (xi, w) in x.iter().zip(&self.weights) {
            z.iter_mut().zip(w).for_each(|(zc, wc)| *zc += xi * wc);
        }
        z
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let z = self.logits(&self.standardize(features));
        z.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0
    }

    pub fn evaluate(&self, features: &[Vec<f64>], labels: &[usize]) -> Result<ProbeResult> {
        check_rows(features, labels)?;
        let mut hits = vec![0usize; self.num_classes];
        let mut totals = vec![0usize; self.num_classes];
        for (f, &l) in features.iter().zip(labels) {
            if l >= self.num_classes {
                return Err(Error::IndexOutOfRange {
                    index: l,
                    extent: self.num_classes,
                });
            }
            totals[l] += 1;
            if self.predict(f) == l {
                hits[l] += 1;
            }
        }
        Ok(ProbeResult {
            accuracy: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
            per_class_accuracy: hits
                .iter()
                .zip(&totals)
                .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
                .collect(),
            feature_source: self.feature_source,
        })
    }
}

/// Fits a probe by full-batch gradient descent from zero weights; the step
/// size comes from a bound on the loss curvature.
pub fn fit_probe(features: &[Vec<f64>], labels: &[usize], config: &ProbeConfig) -> Result<LinearProbe> {
    let dim = check_rows(features, labels)?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    if classes < 2 {
        return Err(Error::DegenerateLabels(classes));
    }
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateLabels(empty));
    }
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut probe = LinearProbe {
        mean,
        scale,
        weights: vec![vec![0.0; classes]; dim + 1],
        num_classes: classes,
        iterations: 0,
        feature_source: config.feature_source,
    };
    let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();

    // Largest eigenvalue of X^T X / n by power iteration.
    let mut v = vec![1.0 / ((dim + 1) as f64).sqrt(); dim + 1];
    let mut lambda = 1.0;
    for _ in 0..50 {
        let mut w = vec![0.0; dim + 1];
        for x in &xs {
            let dot: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
            w.iter_mut().zip(x).for_each(|(wi, xi)| *wi += dot * xi / n);
        }
        lambda = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if lambda == 0.0 {
            break;
        }
        v = w.iter().map(|a| a / lambda).collect();
    }
    let lr = 1.0 / (0.5 * lambda + config.l2);

    for it in 0..config.max_iters {
        let mut grad = vec![vec![0.0; classes]; dim + 1];
        for (x, &y) in xs.iter().zip(labels) {
            let mut p = probe.logits(x);
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for (g, xi) in grad.iter_mut().zip(x) {
                g.iter_mut().zip(&p).for_each(|(gc, pc)| *gc += xi * pc / n);
            }
        }
        let mut worst: f64 = 0.0;
        for (j, (g, w)) in grad.iter_mut().zip(&probe.weights).enumerate() {
            for (gc, wc) in g.iter_mut().zip(w) {
                if j < dim {
                    *gc += config.l2 * wc;
                }
                worst = worst.max(gc.abs());
            }
        }
        probe.iterations = it + 1;
        if worst < config.tol {
            break;
        }
        for (w, g) in probe.weights.iter_mut().zip(&grad) {
            w.iter_mut().zip(g).for_each(|(wc, gc)| *wc -= lr * gc);
        }
    }
    Ok(probe)
}

/// Fits on `features` and reports accuracy on the same rows.
pub fn linear_probe(features: &[Vec<f64>], labels: &[usize], config: &ProbeConfig) -> Result<ProbeResult> {
    fit_probe(features, labels, config)?.evaluate(features, labels)
}

/// Probe fit on one split and scored on another.
pub fn probe_accuracy(
    train: (&[Vec<f64>], &[usize]),
    held_out: (&[Vec<f64>], &[usize]),
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    fit_probe(train.0, train.1, config)?.evaluate(held_out.0, held_out.1)
}

/// Grid of short training runs over mask strategies, ratios and seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub strategies: Vec<MaskStrategy>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps_per_cell: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            strategies: vec![MaskStrategy::Blockwise(BlockShape::default()), MaskStrategy::Random],
            ratios: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            seeds: vec![0, 1, 2],
            steps_per_cell: 100,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.ratios.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig("sweep needs strategies, ratios and seeds".into()));
        }
        if let Some(&r) = self.ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::RangeViolation {
                key: "ratios".into(),
                value: r.to_string(),
                expected: "(0, 1]".into(),
            });
        }
        if self.steps_per_cell == 0 {
            return Err(Error::InvalidConfig("steps_per_cell must be positive".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.strategies.len() * self.ratios.len() * self.seeds.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub masked_cosine: f64,
    pub probe_accuracy: f64,
    /// Size of every mask the cell drew during training.
    pub mask_counts: Vec<usize>,
    /// Digest of the shared initial parameters.
    pub init_digest: String,
}

pub const SWEEP_HEADER: &str = "strategy,ratio,seed,final_loss,masked_cosine,probe_accuracy";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.strategy, r.ratio, r.seed, r.final_loss, r.masked_cosine, r.probe_accuracy
        );
    }
    out
}

/// One short run per `(strategy, ratio, seed)` cell, rows in that order.
///
/// Every cell starts from the parameters and teacher implied by
/// `base.seed` and reads the same batch sequence; the cell seed drives only
/// the masks (training and evaluation). The probe is fit on `train` and
/// scored on `held_out`.
pub fn mask_sweep<T: Real>(
    spec: &SweepSpec,
    base: &TrainConfig,
    model: &ViTConfig,
    frozen: Option<(ViTParams<T>, ViTConfig)>,
    train: &Dataset<T>,
    held_out: &Dataset<T>,
    probe: &ProbeConfig,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let init = init_student::<T>(model, base.seed)?;
    let init_digest = crate::train::params_digest(&init);
    let teacher = build_teacher(&base.teacher, frozen, &init, model, base.seed)?;
    let n = model.num_patches();
    let mut rows = Vec::with_capacity(spec.num_cells());
    for &strategy in &spec.strategies {
        for &ratio in &spec.ratios {
            for &seed in &spec.seeds {
                let config = TrainConfig {
                    steps: Some(spec.steps_per_cell),
                    mask_ratio: ratio,
                    mask_strategy: strategy,
                    kd_mode: false,
                    ..base.clone()
                };
                let schedule = config.schedule(train.len());
                let mut trainer = Trainer::new(model.clone(), config, init.clone(), teacher.clone(), schedule)?;
                trainer.reseed_masks(seed);
                trainer.run(train, spec.steps_per_cell)?;
                let final_loss = trainer.record.final_loss().unwrap_or(f64::NAN);

                let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
                let masked_cosine = masked_cosine_metric(
                    &trainer.params,
                    model,
                    &trainer.teacher,
                    &held_out.images,
                    ratio,
                    strategy,
                    base.norm,
                    &mut eval_rng,
                )?;
                let f_train = extract_features(&trainer.params, model, &train.images, probe.feature_source)?;
                let f_held = extract_features(&trainer.params, model, &held_out.images, probe.feature_source)?;
                let probe_accuracy =
                    probe_accuracy((&f_train, &train.labels), (&f_held, &held_out.labels), probe)?.accuracy;

                let expected = masked_count(n, ratio);
                let exact = trainer.mask_counts.iter().all(|&c| c == expected);
                log::info!(
                    "{strategy} ratio {ratio} seed {seed}: loss {final_loss:.5} cosine {masked_cosine:.4} \
                     probe {probe_accuracy:.3}, {} masks of {expected} patches (exact: {exact})",
                    trainer.mask_counts.len()
                );
                rows.push(SweepRow {
                    strategy,
                    ratio,
                    seed,
                    final_loss,
                    masked_cosine,
                    probe_accuracy,
                    mask_counts: std::mem::take(&mut trainer.mask_counts),
                    init_digest: init_digest.clone(),
                });
            }
        }
    }
    Ok(rows)
}
