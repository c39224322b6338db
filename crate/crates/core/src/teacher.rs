//! Target producers. Every teacher reads the full, uncorrupted image; the
//! mask is not an argument to any function here.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patch::{patchify, stack_patches, PatchSequence};
use crate::tensor::{Real, Tape, Tensor};
use crate::vit::{embed_and_mask, vit_forward_layers, Mode, ViTConfig, ViTParams};

/// Which block outputs form the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TargetLayers {
    #[default]
    Last,
    /// Elementwise mean of the last `k` block outputs.
    MeanLastK(usize),
}

impl fmt::Display for TargetLayers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetLayers::Last => f.write_str("last"),
            TargetLayers::MeanLastK(k) => write!(f, "mean_last_{k}"),
        }
    }
}

impl FromStr for TargetLayers {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "last" {
            return Ok(TargetLayers::Last);
        }
        s.strip_prefix("mean_last_")
            .and_then(|k| k.parse().ok())
            .filter(|&k: &usize| k > 0)
            .map(TargetLayers::MeanLastK)
            .ok_or_else(|| format!("bad target layers `{s}` (last|mean_last_<k>)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherKind {
    Pixel,
    Frozen,
    Ema,
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeacherKind::Pixel => "pixel",
            TeacherKind::Frozen => "frozen",
            TeacherKind::Ema => "ema",
        })
    }
}

impl FromStr for TeacherKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pixel" => Ok(TeacherKind::Pixel),
            "frozen" => Ok(TeacherKind::Frozen),
            "ema" => Ok(TeacherKind::Ema),
            other => Err(format!("unknown teacher `{other}` (pixel|frozen|ema)")),
        }
    }
}

/// Teacher selection; each variant carries exactly its own settings.
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherSpec {
    Pixel { per_patch_ln: bool },
    Frozen { checkpoint: Option<PathBuf>, target_layers: TargetLayers },
    Ema { momentum: f64, target_layers: TargetLayers },
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec::Frozen {
            checkpoint: None,
            target_layers: TargetLayers::Last,
        }
    }
}

impl TeacherSpec {
    pub fn kind(&self) -> TeacherKind {
        match self {
            TeacherSpec::Pixel { .. } => TeacherKind::Pixel,
            TeacherSpec::Frozen { .. } => TeacherKind::Frozen,
            TeacherSpec::Ema { .. } => TeacherKind::Ema,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TeacherSpec::Ema { momentum, .. } if !(*momentum > 0.0 && *momentum < 1.0) => {
                Err(Error::RangeViolation {
                    key: "ema_momentum".into(),
                    value: momentum.to_string(),
                    expected: "(0, 1)".into(),
                })
            }
            TeacherSpec::Ema { target_layers: TargetLayers::MeanLastK(0), .. }
            | TeacherSpec::Frozen { target_layers: TargetLayers::MeanLastK(0), .. } => {
                Err(Error::InvalidConfig("mean_last_k needs k >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Per-patch teacher outputs for one image: `[N, D]`, class row excluded.
#[derive(Clone, Debug)]
pub struct TargetFeatures<T> {
    pub t: Tensor<T>,
    pub source: TeacherKind,
}

impl<T: Real> TargetFeatures<T> {
    pub fn num_patches(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.source == other.source && self.t.bit_eq(&other.t)
    }
}

/// Flattened pixels of each patch, optionally standardised per patch
/// (affine-free layer norm).
pub fn pixel_teacher<T: Real>(patches: &PatchSequence<T>, per_patch_ln: bool) -> Result<TargetFeatures<T>> {
    let t = if per_patch_ln {
        Tape::no_grad().layer_norm(&patches.patches, 1, T::c(1e-6), None)?
    } else {
        patches.patches.clone()
    };
    Ok(TargetFeatures {
        t,
        source: TeacherKind::Pixel,
    })
}

/// Patch features of a student-shaped transformer over a batch `[B, N, K]`
/// of unmasked patches; returns one `[N, hidden]` matrix per image.
pub fn transformer_targets<T: Real>(
    patches: &Tensor<T>,
    params: &ViTParams<T>,
    config: &ViTConfig,
    layers: TargetLayers,
    source: TeacherKind,
) -> Result<Vec<TargetFeatures<T>>> {
    let mut tape = Tape::no_grad();
    // Eval mode draws nothing from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let embedded = embed_and_mask(&mut tape, patches, None, params)?;
    let outputs = vit_forward_layers(&mut tape, &embedded, params, config, Mode::Eval, &mut rng)?;
    let features = match layers {
        TargetLayers::Last => outputs.last().expect("input always present").clone(),
        TargetLayers::MeanLastK(k) => {
            if k == 0 || k > outputs.len() {
                return Err(Error::InvalidConfig(format!(
                    "mean_last_{k} needs at most {} layer outputs",
                    outputs.len()
                )));
            }
            let mut acc = outputs[outputs.len() - k].clone();
            for out in &outputs[outputs.len() - k + 1..] {
                acc = tape.add(&acc, out)?;
            }
            tape.scale(&acc, T::one() / T::c(k as f64))?
        }
    };
    let &[b, n1, h] = features.shape() else { unreachable!("3-D forward output") };
    let patch_rows: Vec<usize> = (1..n1).collect();
    let features = tape.index_select(&features, 1, &patch_rows)?;
    (0..b)
        .map(|i| {
            let rows = features.data()[i * (n1 - 1) * h..(i + 1) * (n1 - 1) * h].to_vec();
            Ok(TargetFeatures {
                t: Tensor::new(&[n1 - 1, h], rows)?,
                source,
            })
        })
        .collect()
}

/// Features of a frozen transformer teacher for a single full image.
pub fn frozen_teacher<T: Real>(
    image: &Tensor<T>,
    params: &ViTParams<T>,
    config: &ViTConfig,
    layers: TargetLayers,
) -> Result<TargetFeatures<T>> {
    let seq = patchify(image, config.patch_size)?;
    let batch = stack_patches(std::slice::from_ref(&seq))?;
    let mut out = transformer_targets(&batch, params, config, layers, TeacherKind::Frozen)?;
    Ok(out.remove(0))
}

/// `teacher <- m * teacher + (1 - m) * student` for every tensor.
pub fn ema_update<T: Real>(teacher: &mut ViTParams<T>, student: &ViTParams<T>, momentum: f64) -> Result<()> {
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(Error::RangeViolation {
            key: "ema_momentum".into(),
            value: momentum.to_string(),
            expected: "(0, 1)".into(),
        });
    }
    let student = student.named();
    let mut slots = teacher.named_mut();
    if slots.len() != student.len() {
        return Err(Error::shape("ema_update", &[slots.len()], &[student.len()]));
    }
    let m = T::c(momentum);
    let one_minus = T::c(1.0 - momentum);
    for ((_, t), (_, s)) in slots.iter_mut().zip(&student) {
        if t.shape() != s.shape() {
            return Err(Error::shape("ema_update", t.shape(), s.shape()));
        }
        let data = t.data().iter().zip(s.data()).map(|(&a, &b)| m * a + one_minus * b).collect();
        **t = Tensor::new(s.shape(), data)?;
    }
    Ok(())
}

/// Teacher state held by a training run.
#[derive(Clone, Debug)]
pub enum Teacher<T> {
    Pixel {
        per_patch_ln: bool,
    },
    Frozen {
        params: ViTParams<T>,
        config: ViTConfig,
        layers: TargetLayers,
    },
    Ema {
        params: ViTParams<T>,
        config: ViTConfig,
        layers: TargetLayers,
        momentum: f64,
    },
}

impl<T: Real> Teacher<T> {
    /// Frozen teacher whose patch grid must equal the student's.
    pub fn frozen(
        params: ViTParams<T>,
        config: ViTConfig,
        layers: TargetLayers,
        student: &ViTConfig,
    ) -> Result<Self> {
        check_grid(&config, student)?;
        params.check_shapes(&config)?;
        Ok(Teacher::Frozen { params, config, layers })
    }

    /// EMA teacher initialised as an exact copy of the student.
    pub fn ema(student: &ViTParams<T>, config: &ViTConfig, momentum: f64, layers: TargetLayers) -> Result<Self> {
        TeacherSpec::Ema { momentum, target_layers: layers }.validate()?;
        Ok(Teacher::Ema {
            params: student.clone(),
            config: config.clone(),
            layers,
            momentum,
        })
    }

    pub fn kind(&self) -> TeacherKind {
        match self {
            Teacher::Pixel { .. } => TeacherKind::Pixel,
            Teacher::Frozen { .. } => TeacherKind::Frozen,
            Teacher::Ema { .. } => TeacherKind::Ema,
        }
    }

    /// Width `D` of the produced targets for a student with `student` config.
    pub fn output_dim(&self, student: &ViTConfig) -> usize {
        match self {
            Teacher::Pixel { .. } => student.patch_dim(),
            Teacher::Frozen { config, .. } | Teacher::Ema { config, .. } => config.hidden,
        }
    }

    pub fn params(&self) -> Option<&ViTParams<T>> {
        match self {
            Teacher::Pixel { .. } => None,
            Teacher::Frozen { params, .. } | Teacher::Ema { params, .. } => Some(params),
        }
    }

    /// Targets for a batch of full images given as patch sequences.
    pub fn targets(&self, patches: &[PatchSequence<T>]) -> Result<Vec<TargetFeatures<T>>> {
        match self {
            Teacher::Pixel { per_patch_ln } => patches.iter().map(|p| pixel_teacher(p, *per_patch_ln)).collect(),
            Teacher::Frozen { params, config, layers } => {
                let batch = stack_patches(patches)?;
                transformer_targets(&batch, params, config, *layers, TeacherKind::Frozen)
            }
            Teacher::Ema { params, config, layers, .. } => {
                let batch = stack_patches(patches)?;
                transformer_targets(&batch, params, config, *layers, TeacherKind::Ema)
            }
        }
    }

    /// Hook run after each optimiser step; only the EMA teacher moves.
    pub fn after_step(&mut self, student: &ViTParams<T>) -> Result<()> {
        if let Teacher::Ema { params, momentum, .. } = self {
            ema_update(params, student, *momentum)?;
        }
        Ok(())
    }
}

pub(crate) fn check_grid(teacher: &ViTConfig, student: &ViTConfig) -> Result<()> {
    let same_input = teacher.image_size == student.image_size && teacher.channels == student.channels;
    if teacher.grid() != student.grid() || !same_input {
        return Err(Error::GridMismatch {
            teacher: teacher.grid(),
            student: student.grid(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::init_params;

    fn tiny(layers: usize) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            layers,
            hidden: 8,
            ffn_hidden: 16,
            heads: 2,
            target_dim: 8,
            ..ViTConfig::default()
        }
    }

    fn image(seed: u64) -> Tensor<f64> {
        let data = (0..64).map(|i| ((i as f64 + seed as f64) * 0.37).sin()).collect();
        Tensor::new(&[8, 8, 1], data).unwrap()
    }

    #[test]
    fn pixel_teacher_identity_and_ln() {
        let seq = patchify(&image(0), 4).unwrap();
        let raw = pixel_teacher(&seq, false).unwrap();
        assert!(raw.t.bit_eq(&seq.patches));

        let flat = Tensor::full(&[4, 4, 1], 0.5);
        let seq = patchify(&flat, 4).unwrap();
        let normed = pixel_teacher(&seq, true).unwrap();
        assert!(normed.t.data().iter().all(|&x| x == 0.0));

        let toy = PatchSequence {
            patches: Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap(),
            grid: (1, 1),
            patch_size: 1,
            source_dims: (1, 1, 3),
        };
        let t = pixel_teacher(&toy, true).unwrap();
        let expected: [f64; 3] = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in t.t.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_layer_teacher_returns_embedding() {
        let config = tiny(0);
        let params: ViTParams<f64> = init_params(&config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = image(3);
        let t = frozen_teacher(&img, &params, &config, TargetLayers::Last).unwrap();
        let seq = patchify(&img, 4).unwrap();
        let mut tape = Tape::no_grad();
        let emb = embed_and_mask(&mut tape, &stack_patches(&[seq]).unwrap(), None, &params).unwrap();
        let rows: Vec<f64> = emb.data()[8..].to_vec();
        assert_eq!(t.t.data(), &rows[..]);
    }

    #[test]
    fn mean_last_one_is_last() {
        let config = tiny(2);
        let params: ViTParams<f64> = init_params(&config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = image(5);
        let last = frozen_teacher(&img, &params, &config, TargetLayers::Last).unwrap();
        let mean1 = frozen_teacher(&img, &params, &config, TargetLayers::MeanLastK(1)).unwrap();
        assert!(last.t.bit_eq(&mean1.t));
        assert!(frozen_teacher(&img, &params, &config, TargetLayers::MeanLastK(4)).is_err());
    }

    #[test]
    fn ema_arithmetic() {
        let config = tiny(1);
        let student: ViTParams<f64> = init_params(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut teacher = student.map(|_, t| Tensor::ones(t.shape()));
        let zeros = student.zeros_like();
        ema_update(&mut teacher, &zeros, 0.99).unwrap();
        assert!(teacher.named().iter().all(|(_, t)| t.data().iter().all(|&x| (x - 0.99).abs() < 1e-15)));

        let mut same = student.clone();
        ema_update(&mut same, &student, 0.9).unwrap();
        for ((_, a), (_, b)) in same.named().iter().zip(&student.named()) {
            assert!(a.max_abs_diff(b) <= 1e-15);
        }
        assert!(ema_update(&mut same, &student, 1.0).is_err());
    }

    #[test]
    fn grid_mismatch_detected() {
        let student = tiny(1);
        let teacher_cfg = ViTConfig { patch_size: 2, ..tiny(1) };
        let params: ViTParams<f64> = init_params(&teacher_cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            Teacher::frozen(params, teacher_cfg, TargetLayers::Last, &student),
            Err(Error::GridMismatch { .. })
        ));
    }

    #[test]
    fn target_layer_parsing() {
        assert_eq!("last".parse::<TargetLayers>().unwrap(), TargetLayers::Last);
        assert_eq!("mean_last_3".parse::<TargetLayers>().unwrap(), TargetLayers::MeanLastK(3));
        assert!("mean_last_0".parse::<TargetLayers>().is_err());
        assert_eq!(TargetLayers::MeanLastK(2).to_string(), "mean_last_2");
    }
}
