//! Target normalisation, per-position losses and the masked objective.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::MaskSet;
use crate::teacher::TargetFeatures;
use crate::tensor::{Real, Tape, Tensor};

/// Epsilon of the cosine loss denominator.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormKind {
    Identity,
    /// Per-row standardisation over the feature axis, no affine.
    LayerNorm { eps: f64 },
    /// Each row divided by `(||row|| + eps)`.
    L2 { eps: f64 },
    /// Per-dimension standardisation over the rows of one target matrix.
    BatchNorm { eps: f64 },
}

impl Default for NormKind {
    fn default() -> Self {
        NormKind::LayerNorm { eps: 1e-6 }
    }
}

impl NormKind {
    pub fn name(&self) -> &'static str {
        match self {
            NormKind::Identity => "identity",
            NormKind::LayerNorm { .. } => "ln",
            NormKind::L2 { .. } => "l2",
            NormKind::BatchNorm { .. } => "bn",
        }
    }

    pub fn eps(&self) -> Option<f64> {
        match *self {
            NormKind::Identity => None,
            NormKind::LayerNorm { eps } | NormKind::L2 { eps } | NormKind::BatchNorm { eps } => Some(eps),
        }
    }

    /// Same variant with a different epsilon; identity is unchanged.
    pub fn with_eps(self, eps: f64) -> Self {
        match self {
            NormKind::Identity => NormKind::Identity,
            NormKind::LayerNorm { .. } => NormKind::LayerNorm { eps },
            NormKind::L2 { .. } => NormKind::L2 { eps },
            NormKind::BatchNorm { .. } => NormKind::BatchNorm { eps },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.eps() {
            Some(eps) if !(eps > 0.0) => Err(Error::RangeViolation {
                key: "norm_eps".into(),
                value: eps.to_string(),
                expected: "> 0".into(),
            }),
            _ => Ok(()),
        }
    }

    /// Normalises a `[rows, D]` matrix.
    pub fn apply<T: Real>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        if t.ndim() != 2 {
            return Err(Error::shape("normalize", t.shape(), &[0, 0]));
        }
        let mut tape = Tape::no_grad();
        match *self {
            NormKind::Identity => Ok(t.clone()),
            NormKind::LayerNorm { eps } => tape.layer_norm(t, 1, T::c(eps), None),
            NormKind::BatchNorm { eps } => tape.layer_norm(t, 0, T::c(eps), None),
            NormKind::L2 { eps } => {
                let cols = t.shape()[1];
                let eps = T::c(eps);
                let mut out = t.to_vec();
                for row in out.chunks_mut(cols.max(1)) {
                    let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
                    let denom = norm + eps;
                    row.iter_mut().for_each(|x| *x = *x / denom);
                }
                Tensor::new(t.shape(), out)
            }
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = String;

    /// Parses the variant name; epsilon takes its default.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let eps = 1e-6;
        match s {
            "identity" | "none" => Ok(NormKind::Identity),
            "ln" | "layer_norm" => Ok(NormKind::LayerNorm { eps }),
            "l2" => Ok(NormKind::L2 { eps }),
            "bn" | "batch_norm" => Ok(NormKind::BatchNorm { eps }),
            other => Err(format!("unknown norm `{other}` (identity|ln|l2|bn)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Mse,
    L1,
    SmoothL1 { beta: f64 },
    Cosine,
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::SmoothL1 { beta: 1.0 }
    }
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::L1 => "l1",
            LossKind::SmoothL1 { .. } => "smooth_l1",
            LossKind::Cosine => "cosine",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::SmoothL1 { beta } if !(beta > 0.0) => Err(Error::RangeViolation {
                key: "smooth_l1_beta".into(),
                value: beta.to_string(),
                expected: "> 0".into(),
            }),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mse" | "l2" => Ok(LossKind::Mse),
            "l1" => Ok(LossKind::L1),
            "smooth_l1" => Ok(LossKind::default()),
            "cosine" => Ok(LossKind::Cosine),
            other => Err(format!("unknown loss `{other}` (mse|l1|smooth_l1|cosine)")),
        }
    }
}

pub fn normalize_targets<T: Real>(t: &TargetFeatures<T>, kind: NormKind) -> Result<TargetFeatures<T>> {
    Ok(TargetFeatures {
        t: kind.apply(&t.t)?,
        source: t.source,
    })
}

/// Normalised targets for a whole batch. Row-wise norms act on each image
/// alone; batch normalisation pools its per-dimension statistics over every
/// row of every image in the batch.
pub fn normalize_batch<T: Real>(targets: &[TargetFeatures<T>], kind: NormKind) -> Result<Vec<Tensor<T>>> {
    if !matches!(kind, NormKind::BatchNorm { .. }) || targets.len() < 2 {
        return targets.iter().map(|t| kind.apply(&t.t)).collect();
    }
    let d = targets[0].dim();
    let mut rows = Vec::new();
    for t in targets {
        if t.dim() != d {
            return Err(Error::shape("normalize_batch", &[t.num_patches(), d], t.t.shape()));
        }
        rows.extend_from_slice(t.t.data());
    }
    let pooled = kind.apply(&Tensor::new(&[rows.len() / d.max(1), d], rows)?)?;
    let mut start = 0;
    targets
        .iter()
        .map(|t| {
            let len = t.t.len();
            let part = Tensor::new(t.t.shape(), pooled.data()[start..start + len].to_vec());
            start += len;
            part
        })
        .collect()
}

/// Loss between two plain vectors.
pub fn pairwise_loss<T: Real>(o: &[T], t: &[T], kind: LossKind) -> Result<T> {
    if o.len() != t.len() {
        return Err(Error::shape("pairwise_loss", &[o.len()], &[t.len()]));
    }
    if o.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let n = T::c(o.len() as f64);
    let residuals = o.iter().zip(t).map(|(&a, &b)| a - b);
    let value = match kind {
        LossKind::Mse => residuals.map(|r| r * r).sum::<T>() / n,
        LossKind::L1 => residuals.map(|r| r.abs()).sum::<T>() / n,
        LossKind::SmoothL1 { beta } => {
            let beta = T::c(beta);
            let half = T::c(0.5);
            residuals
                .map(|r| {
                    let a = r.abs();
                    if a < beta {
                        half * r * r / beta
                    } else {
                        a - half * beta
                    }
                })
                .sum::<T>()
                / n
        }
        LossKind::Cosine => T::one() - cosine_similarity(o, t),
    };
    Ok(value)
}

/// `<o, t> / (||o|| ||t|| + 1e-8)`
pub fn cosine_similarity<T: Real>(o: &[T], t: &[T]) -> T {
    let dot = o.iter().zip(t).map(|(&a, &b)| a * b).sum::<T>();
    let no = o.iter().map(|&a| a * a).sum::<T>().sqrt();
    let nt = t.iter().map(|&b| b * b).sum::<T>().sqrt();
    dot / (no * nt + T::c(COSINE_EPS))
}

/// Per-row losses of `o[R, D]` against constant targets `t[R, D]`: `[R]`.
pub fn row_losses<T: Real>(tape: &mut Tape<T>, o: &Tensor<T>, t: &Tensor<T>, kind: LossKind) -> Result<Tensor<T>> {
    if o.ndim() != 2 || o.shape() != t.shape() {
        return Err(Error::shape("row_losses", o.shape(), t.shape()));
    }
    let t = t.detach();
    match kind {
        LossKind::Mse => {
            let r = tape.sub(o, &t)?;
            let sq = tape.square(&r)?;
            tape.mean(&sq, Some(1))
        }
        LossKind::L1 => {
            let r = tape.sub(o, &t)?;
            let a = tape.abs(&r)?;
            tape.mean(&a, Some(1))
        }
        LossKind::SmoothL1 { beta } => {
            let r = tape.sub(o, &t)?;
            let s = tape.smooth_l1(&r, T::c(beta))?;
            tape.mean(&s, Some(1))
        }
        LossKind::Cosine => {
            let rows = o.shape()[0];
            let prod = tape.mul(o, &t)?;
            let dot = tape.sum(&prod, Some(1))?;
            let sq = tape.square(o)?;
            let sq = tape.sum(&sq, Some(1))?;
            let norm_o = tape.sqrt(&sq)?;
            let norm_t: Vec<T> = (0..rows).map(|r| t.row(r).iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
            let norm_t = Tensor::new(&[rows], norm_t)?;
            let denom = tape.mul(&norm_o, &norm_t)?;
            let denom = tape.add_scalar(&denom, T::c(COSINE_EPS))?;
            let cos = tape.div(&dot, &denom)?;
            let neg = tape.scale(&cos, -T::one())?;
            tape.add_scalar(&neg, T::one())
        }
    }
}

/// Shared core of the masked and all-patch objectives over a batch.
///
/// `outputs` is `[B, N+1, D]` with the class row first; `positions[b]` lists
/// the patch indices of image `b` that enter the loss. Targets are
/// normalised, then the loss is averaged over each image's positions and the
/// per-image values are averaged over the batch.
fn positions_objective<T: Real>(
    tape: &mut Tape<T>,
    outputs: &Tensor<T>,
    targets: &[TargetFeatures<T>],
    positions: &[&[usize]],
    norm: NormKind,
    loss: LossKind,
) -> Result<Tensor<T>> {
    let &[b, n1, d] = outputs.shape() else {
        return Err(Error::shape("objective", outputs.shape(), &[0, 0, 0]));
    };
    if targets.len() != b || positions.len() != b {
        return Err(Error::shape("objective batch", &[b], &[targets.len(), positions.len()]));
    }
    let n = n1.saturating_sub(1);
    if let Some(t) = targets.iter().find(|t| t.t.shape() != [n, d]) {
        return Err(Error::shape("objective targets", &[n, d], t.t.shape()));
    }
    let normalized = normalize_batch(targets, norm)?;
    let mut rows = Vec::new();
    let mut target_rows = Vec::new();
    for (img, (normed, pos)) in normalized.iter().zip(positions).enumerate() {
        if pos.is_empty() {
            return Err(Error::EmptyMask);
        }
        for &i in pos.iter() {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, extent: n });
            }
            rows.push(img * n1 + 1 + i);
            target_rows.extend_from_slice(normed.row(i));
        }
    }
    let flat = tape.reshape(outputs, &[b * n1, d])?;
    let selected = tape.index_select(&flat, 0, &rows)?;
    let target = Tensor::new(&[rows.len(), d], target_rows)?;
    let per_row = row_losses(tape, &selected, &target, loss)?;

    let mut per_image = Vec::with_capacity(b);
    let mut start = 0;
    for pos in positions {
        let idx: Vec<usize> = (start..start + pos.len()).collect();
        start += pos.len();
        let mine = tape.index_select(&per_row, 0, &idx)?;
        let mean = tape.mean(&mine, None)?;
        per_image.push(tape.reshape(&mean, &[1])?);
    }
    let parts: Vec<&Tensor<T>> = per_image.iter().collect();
    let stacked = tape.concat(&parts, 0)?;
    tape.mean(&stacked, None)
}

/// Mean over masked positions of the per-position loss, averaged over the
/// batch. Rows outside each mask (and the class row) take no part.
pub fn mim_objective_batch<T: Real>(
    tape: &mut Tape<T>,
    outputs: &Tensor<T>,
    targets: &[TargetFeatures<T>],
    masks: &[MaskSet],
    norm: NormKind,
    loss: LossKind,
) -> Result<Tensor<T>> {
    let positions: Vec<&[usize]> = masks.iter().map(MaskSet::indices).collect();
    positions_objective(tape, outputs, targets, &positions, norm, loss)
}

/// All-patch objective of the distillation baseline over a batch.
pub fn kd_objective_batch<T: Real>(
    tape: &mut Tape<T>,
    outputs: &Tensor<T>,
    targets: &[TargetFeatures<T>],
    norm: NormKind,
    loss: LossKind,
) -> Result<Tensor<T>> {
    let n = outputs.shape().get(1).map_or(0, |n1| n1.saturating_sub(1));
    let all: Vec<usize> = (0..n).collect();
    let positions = vec![all.as_slice(); targets.len()];
    positions_objective(tape, outputs, targets, &positions, norm, loss)
}

fn as_batch<T: Real>(tape: &mut Tape<T>, outputs: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n1, d] = outputs.shape() else {
        return Err(Error::shape("objective", outputs.shape(), &[0, 0]));
    };
    tape.reshape(outputs, &[1, n1, d])
}

/// Single-image masked objective on `O[N+1, D]`.
pub fn mim_objective<T: Real>(
    tape: &mut Tape<T>,
    outputs: &Tensor<T>,
    targets: &TargetFeatures<T>,
    mask: &MaskSet,
    norm: NormKind,
    loss: LossKind,
) -> Result<Tensor<T>> {
    let batch = as_batch(tape, outputs)?;
    mim_objective_batch(tape, &batch, std::slice::from_ref(targets), std::slice::from_ref(mask), norm, loss)
}

/// Single-image all-patch objective on `O[N+1, D]`.
pub fn kd_objective<T: Real>(
    tape: &mut Tape<T>,
    outputs: &Tensor<T>,
    targets: &TargetFeatures<T>,
    norm: NormKind,
    loss: LossKind,
) -> Result<Tensor<T>> {
    let batch = as_batch(tape, outputs)?;
    kd_objective_batch(tape, &batch, std::slice::from_ref(targets), norm, loss)
}

/// Mean cosine between head outputs and normalised targets over the masked
/// positions of every image; `outputs` is `[B, N+1, D]`.
pub fn masked_cosine<T: Real>(
    outputs: &Tensor<T>,
    targets: &[TargetFeatures<T>],
    masks: &[MaskSet],
    norm: NormKind,
) -> Result<f64> {
    let &[b, n1, d] = outputs.shape() else {
        return Err(Error::shape("masked_cosine", outputs.shape(), &[0, 0, 0]));
    };
    if targets.len() != b || masks.len() != b {
        return Err(Error::shape("masked_cosine batch", &[b], &[targets.len(), masks.len()]));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (img, (normed, m)) in normalize_batch(targets, norm)?.iter().zip(masks).enumerate() {
        for &i in m.indices() {
            let start = (img * n1 + 1 + i) * d;
            let o = &outputs.data()[start..start + d];
            total += cosine_similarity(o, normed.row(i)).as_f64();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / count as f64)
}
