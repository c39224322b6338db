//! Flat `key = value` experiment configuration with `#` comments.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Augment, CropJitter, DataSource, DatasetSpec, ImageFormat, SyntheticSpec};
use crate::error::{Error, Result};
use crate::mask::{BlockShape, MaskStrategy};
use crate::objective::{LossKind, NormKind};
use crate::teacher::{TargetLayers, TeacherKind, TeacherSpec};
use crate::train::TrainConfig;
use crate::vit::ViTConfig;

/// Head width: fixed, or derived from the teacher at build time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TargetDim {
    #[default]
    Auto,
    Fixed(usize),
}

/// Everything a config file describes.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `model.target_dim` is meaningful only when `target_dim` is fixed.
    pub model: ViTConfig,
    pub target_dim: TargetDim,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ViTConfig::default();
        let data = DatasetSpec {
            source: DataSource::Synthetic(SyntheticSpec {
                image_size: model.image_size,
                ..SyntheticSpec::default()
            }),
            augment: Augment::None,
        };
        Self {
            model,
            target_dim: TargetDim::Auto,
            train: TrainConfig::default(),
            data,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        if self.target_dim == TargetDim::Auto {
            model.target_dim = model.target_dim.max(1);
        }
        model.validate()?;
        self.train.validate()?;
        if let Augment::CropJitter(cj) = &self.data.augment {
            if !(cj.min_scale > 0.0 && cj.min_scale <= 1.0) {
                return Err(range("crop_min_scale", cj.min_scale, "(0, 1]"));
            }
            if !(0.0..1.0).contains(&cj.color_jitter) {
                return Err(range("color_jitter", cj.color_jitter, "[0, 1)"));
            }
        }
        if let DataSource::Synthetic(s) = &self.data.source {
            if s.num_classes == 0 || s.images_per_class == 0 {
                return Err(Error::InvalidConfig("synthetic dataset needs classes and images".into()));
            }
            if !(s.noise_std >= 0.0 && s.noise_std.is_finite()) {
                return Err(range("data_noise", s.noise_std, "[0, inf)"));
            }
            if !(0.0..0.5).contains(&s.center_jitter) {
                return Err(range("data_jitter", s.center_jitter, "[0, 0.5)"));
            }
        }
        Ok(())
    }

    /// Student config with the head width resolved; `teacher_hidden` is the
    /// hidden size of a loaded frozen teacher, if any.
    pub fn resolved_model(&self, teacher_hidden: Option<usize>) -> ViTConfig {
        let target_dim = match self.target_dim {
            TargetDim::Fixed(d) => d,
            TargetDim::Auto => match &self.train.teacher {
                TeacherSpec::Pixel { .. } => self.model.patch_dim(),
                TeacherSpec::Ema { .. } => self.model.hidden,
                TeacherSpec::Frozen { .. } => teacher_hidden.unwrap_or(self.model.hidden),
            },
        };
        ViTConfig {
            target_dim,
            ..self.model.clone()
        }
    }
}

fn range(key: &str, value: impl ToString, expected: &str) -> Error {
    Error::RangeViolation {
        key: key.into(),
        value: value.to_string(),
        expected: expected.into(),
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

pub fn save_config(path: &Path, config: &ExperimentConfig) -> Result<()> {
    std::fs::write(path, config_to_string(config))?;
    Ok(())
}

struct Entry {
    line: usize,
    value: String,
    used: bool,
}

struct Entries(HashMap<String, Entry>);

impl Entries {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.0.get_mut(key).map(|e| {
            e.used = true;
            (e.line, e.value.clone())
        })
    }

    fn parse<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: ToString,
    {
        match self.take(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse().map(Some).map_err(|e: V::Err| Error::Parse {
                line,
                message: format!("{key}: {}", e.to_string()),
            }),
        }
    }

    fn set<V: FromStr>(&mut self, key: &str, slot: &mut V) -> Result<()>
    where
        V::Err: ToString,
    {
        if let Some(v) = self.parse(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// `auto` or a value.
    fn auto<V: FromStr>(&mut self, key: &str) -> Result<Option<Option<V>>>
    where
        V::Err: ToString,
    {
        match self.take(key) {
            None => Ok(None),
            Some((_, raw)) if raw == "auto" => Ok(Some(None)),
            Some((line, raw)) => raw.parse().map(|v| Some(Some(v))).map_err(|e: V::Err| Error::Parse {
                line,
                message: format!("{key}: {}", e.to_string()),
            }),
        }
    }

    /// Rejects a key that does not apply to the selected variant.
    fn forbid(&mut self, key: &str, context: &str) -> Result<()> {
        match self.0.get(key) {
            Some(e) => Err(Error::Parse {
                line: e.line,
                message: format!("`{key}` does not apply to {context}"),
            }),
            None => Ok(()),
        }
    }
}

fn split_lines(text: &str) -> Result<Entries> {
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Parse {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty key".into(),
            });
        }
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::UnknownKey { line, key: key.into() });
        }
        if let Some(prev) = map.get::<str>(key) {
            let prev: &Entry = prev;
            return Err(Error::Parse {
                line,
                message: format!("`{key}` already set on line {}", prev.line),
            });
        }
        map.insert(
            key.to_string(),
            Entry {
                line,
                value: value.to_string(),
                used: false,
            },
        );
    }
    Ok(Entries(map))
}

const KNOWN_KEYS: &[&str] = &[
    "image_size",
    "channels",
    "patch_size",
    "layers",
    "hidden",
    "ffn_hidden",
    "heads",
    "layer_scale",
    "drop_path",
    "target_dim",
    "ln_eps",
    "steps",
    "epochs",
    "warmup_steps",
    "warmup_epochs",
    "batch_size",
    "peak_lr",
    "min_lr",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "grad_clip",
    "mask_ratio",
    "mask_strategy",
    "block_min_area",
    "block_max_area",
    "block_min_aspect",
    "teacher",
    "teacher_checkpoint",
    "target_layers",
    "ema_momentum",
    "per_patch_ln",
    "norm",
    "norm_eps",
    "loss",
    "smooth_l1_beta",
    "seed",
    "kd_mode",
    "dataset",
    "num_classes",
    "images_per_class",
    "data_seed",
    "data_noise",
    "data_jitter",
    "data_path",
    "image_format",
    "augment",
    "crop_min_scale",
    "color_jitter",
];

/// Parses config text; omitted keys keep their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut e = split_lines(text)?;
    let mut cfg = ExperimentConfig::default();

    let m = &mut cfg.model;
    e.set("image_size", &mut m.image_size)?;
    e.set("channels", &mut m.channels)?;
    e.set("patch_size", &mut m.patch_size)?;
    e.set("layers", &mut m.layers)?;
    e.set("hidden", &mut m.hidden)?;
    e.set("ffn_hidden", &mut m.ffn_hidden)?;
    e.set("heads", &mut m.heads)?;
    e.set("layer_scale", &mut m.layer_scale_init)?;
    e.set("drop_path", &mut m.drop_path_rate)?;
    e.set("ln_eps", &mut m.ln_eps)?;
    if let Some(d) = e.auto::<usize>("target_dim")? {
        cfg.target_dim = d.map_or(TargetDim::Auto, TargetDim::Fixed);
        if let Some(d) = d {
            m.target_dim = d;
        }
    }

    let t = &mut cfg.train;
    if let Some(s) = e.auto("steps")? {
        t.steps = s;
    }
    e.set("epochs", &mut t.epochs)?;
    if let Some(s) = e.auto("warmup_steps")? {
        t.warmup_steps = s;
    }
    e.set("warmup_epochs", &mut t.warmup_epochs)?;
    e.set("batch_size", &mut t.batch_size)?;
    e.set("peak_lr", &mut t.peak_lr)?;
    e.set("min_lr", &mut t.min_lr)?;
    e.set("weight_decay", &mut t.weight_decay)?;
    e.set("adam_beta1", &mut t.adam_betas.0)?;
    e.set("adam_beta2", &mut t.adam_betas.1)?;
    e.set("adam_eps", &mut t.adam_eps)?;
    e.set("grad_clip", &mut t.grad_clip_norm)?;
    e.set("seed", &mut t.seed)?;
    e.set("kd_mode", &mut t.kd_mode)?;
    match e.parse::<f64>("mask_ratio")? {
        Some(r) => t.mask_ratio = r,
        None if t.kd_mode => t.mask_ratio = 0.0,
        None => {}
    }

    e.set("mask_strategy", &mut t.mask_strategy)?;
    match &mut t.mask_strategy {
        MaskStrategy::Blockwise(shape) => {
            e.set("block_min_area", &mut shape.min_area)?;
            e.set("block_max_area", &mut shape.max_area)?;
            e.set("block_min_aspect", &mut shape.min_aspect)?;
        }
        MaskStrategy::Random => {
            for key in ["block_min_area", "block_max_area", "block_min_aspect"] {
                e.forbid(key, "random masking")?;
            }
        }
    }

    let kind: TeacherKind = e.parse("teacher")?.unwrap_or(t.teacher.kind());
    let context = format!("teacher = {kind}");
    t.teacher = match kind {
        TeacherKind::Pixel => {
            for key in ["teacher_checkpoint", "target_layers", "ema_momentum"] {
                e.forbid(key, &context)?;
            }
            TeacherSpec::Pixel {
                per_patch_ln: e.parse("per_patch_ln")?.unwrap_or(false),
            }
        }
        TeacherKind::Frozen => {
            for key in ["per_patch_ln", "ema_momentum"] {
                e.forbid(key, &context)?;
            }
            TeacherSpec::Frozen {
                checkpoint: e.take("teacher_checkpoint").map(|(_, p)| PathBuf::from(p)),
                target_layers: e.parse("target_layers")?.unwrap_or_default(),
            }
        }
        TeacherKind::Ema => {
            for key in ["per_patch_ln", "teacher_checkpoint"] {
                e.forbid(key, &context)?;
            }
            TeacherSpec::Ema {
                momentum: e.parse("ema_momentum")?.unwrap_or(0.999),
                target_layers: e.parse::<TargetLayers>("target_layers")?.unwrap_or_default(),
            }
        }
    };

    e.set("norm", &mut t.norm)?;
    match e.parse::<f64>("norm_eps")? {
        Some(_) if t.norm == NormKind::Identity => e.forbid("norm_eps", "norm = identity")?,
        Some(eps) => t.norm = t.norm.with_eps(eps),
        None => {}
    }
    e.set("loss", &mut t.loss)?;
    match (e.parse::<f64>("smooth_l1_beta")?, &mut t.loss) {
        (Some(b), LossKind::SmoothL1 { beta }) => *beta = b,
        (Some(_), other) => {
            let context = format!("loss = {other}");
            e.forbid("smooth_l1_beta", &context)?;
        }
        (None, _) => {}
    }

    let dataset: String = e.parse("dataset")?.unwrap_or_else(|| "synthetic".into());
    cfg.data.source = match dataset.as_str() {
        "synthetic" => {
            for key in ["data_path", "image_format"] {
                e.forbid(key, "dataset = synthetic")?;
            }
            let mut s = SyntheticSpec {
                image_size: cfg.model.image_size,
                ..SyntheticSpec::default()
            };
            e.set("num_classes", &mut s.num_classes)?;
            e.set("images_per_class", &mut s.images_per_class)?;
            e.set("data_seed", &mut s.seed)?;
            e.set("data_noise", &mut s.noise_std)?;
            e.set("data_jitter", &mut s.center_jitter)?;
            DataSource::Synthetic(s)
        }
        "folder" => {
            for key in ["num_classes", "images_per_class", "data_seed", "data_noise", "data_jitter"] {
                e.forbid(key, "dataset = folder")?;
            }
            let path = e.take("data_path").map(|(_, p)| PathBuf::from(p)).ok_or_else(|| {
                Error::InvalidConfig("dataset = folder needs data_path".into())
            })?;
            DataSource::Folder {
                path,
                format: e.parse("image_format")?.unwrap_or_default(),
            }
        }
        other => {
            let line = e.0.get("dataset").map_or(0, |en| en.line);
            return Err(Error::Parse {
                line,
                message: format!("unknown dataset `{other}` (synthetic|folder)"),
            });
        }
    };

    let augment: String = e.parse("augment")?.unwrap_or_else(|| "none".into());
    cfg.data.augment = match augment.as_str() {
        "none" => {
            for key in ["crop_min_scale", "color_jitter"] {
                e.forbid(key, "augment = none")?;
            }
            Augment::None
        }
        "crop_jitter" => {
            let mut cj = CropJitter::default();
            e.set("crop_min_scale", &mut cj.min_scale)?;
            e.set("color_jitter", &mut cj.color_jitter)?;
            Augment::CropJitter(cj)
        }
        other => {
            let line = e.0.get("augment").map_or(0, |en| en.line);
            return Err(Error::Parse {
                line,
                message: format!("unknown augment `{other}` (none|crop_jitter)"),
            });
        }
    };

    debug_assert!(e.0.values().all(|en| en.used), "every known key is consumed");
    cfg.validate()?;
    Ok(cfg)
}

/// Writes every applicable key, so that parsing the text reproduces `config`.
pub fn config_to_string(config: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: &dyn std::fmt::Display| {
        let _ = writeln!(out, "{k} = {v}");
    };
    let m = &config.model;
    kv("image_size", &m.image_size);
    kv("channels", &m.channels);
    kv("patch_size", &m.patch_size);
    kv("layers", &m.layers);
    kv("hidden", &m.hidden);
    kv("ffn_hidden", &m.ffn_hidden);
    kv("heads", &m.heads);
    kv("layer_scale", &m.layer_scale_init);
    kv("drop_path", &m.drop_path_rate);
    kv("ln_eps", &m.ln_eps);
    match config.target_dim {
        TargetDim::Auto => kv("target_dim", &"auto"),
        TargetDim::Fixed(d) => kv("target_dim", &d),
    }

    let t = &config.train;
    let auto = |v: Option<usize>| v.map_or("auto".to_string(), |n| n.to_string());
    kv("steps", &auto(t.steps));
    kv("epochs", &t.epochs);
    kv("warmup_steps", &auto(t.warmup_steps));
    kv("warmup_epochs", &t.warmup_epochs);
    kv("batch_size", &t.batch_size);
    kv("peak_lr", &t.peak_lr);
    kv("min_lr", &t.min_lr);
    kv("weight_decay", &t.weight_decay);
    kv("adam_beta1", &t.adam_betas.0);
    kv("adam_beta2", &t.adam_betas.1);
    kv("adam_eps", &t.adam_eps);
    kv("grad_clip", &t.grad_clip_norm);
    kv("mask_ratio", &t.mask_ratio);
    kv("mask_strategy", &t.mask_strategy);
    if let MaskStrategy::Blockwise(BlockShape {
        min_area,
        max_area,
        min_aspect,
    }) = t.mask_strategy
    {
        kv("block_min_area", &min_area);
        kv("block_max_area", &max_area);
        kv("block_min_aspect", &min_aspect);
    }
    kv("teacher", &t.teacher.kind());
    match &t.teacher {
        TeacherSpec::Pixel { per_patch_ln } => kv("per_patch_ln", per_patch_ln),
        TeacherSpec::Frozen {
            checkpoint,
            target_layers,
        } => {
            if let Some(p) = checkpoint {
                kv("teacher_checkpoint", &p.display());
            }
            kv("target_layers", target_layers);
        }
        TeacherSpec::Ema {
            momentum,
            target_layers,
        } => {
            kv("ema_momentum", momentum);
            kv("target_layers", target_layers);
        }
    }
    kv("norm", &t.norm);
    if let Some(eps) = t.norm.eps() {
        kv("norm_eps", &eps);
    }
    kv("loss", &t.loss);
    if let LossKind::SmoothL1 { beta } = t.loss {
        kv("smooth_l1_beta", &beta);
    }
    kv("seed", &t.seed);
    kv("kd_mode", &t.kd_mode);

    match &config.data.source {
        DataSource::Synthetic(s) => {
            kv("dataset", &"synthetic");
            kv("num_classes", &s.num_classes);
            kv("images_per_class", &s.images_per_class);
            kv("data_seed", &s.seed);
            kv("data_noise", &s.noise_std);
            kv("data_jitter", &s.center_jitter);
        }
        DataSource::Folder { path, format } => {
            kv("dataset", &"folder");
            kv("data_path", &path.display());
            kv("image_format", &ImageFormat::to_string(format));
        }
    }
    kv("augment", &config.data.augment.name());
    if let Augment::CropJitter(cj) = &config.data.augment {
        kv("crop_min_scale", &cj.min_scale);
        kv("color_jitter", &cj.color_jitter);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train.mask_ratio, 0.4);
        assert_eq!(cfg.train.peak_lr, 1.5e-3);
        assert_eq!(cfg.train.weight_decay, 0.05);
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = parse_config("# header\n  mask_ratio = 0.5 # trailing\n\nseed=7\n").unwrap();
        assert_eq!(cfg.train.mask_ratio, 0.5);
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn errors_carry_lines() {
        assert!(matches!(parse_config("mask_ratio=1.5"), Err(Error::RangeViolation { .. })));
        assert!(matches!(parse_config("seed=1\nmask_raito=0.3"), Err(Error::UnknownKey { line: 2, .. })));
        assert!(matches!(parse_config("\nlayers=two"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_config("no equals sign"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_config("seed=1\nseed=2"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn kind_specific_keys() {
        assert!(parse_config("teacher=pixel\nema_momentum=0.9").is_err());
        assert!(parse_config("teacher=ema\nema_momentum=0.9").is_ok());
        assert!(parse_config("teacher=ema\nema_momentum=1.0").is_err());
        assert!(parse_config("loss=mse\nsmooth_l1_beta=2").is_err());
        assert!(parse_config("mask_strategy=random\nblock_min_area=4").is_err());
    }

    #[test]
    fn kd_mode_implies_unmasked() {
        let cfg = parse_config("kd_mode=true").unwrap();
        assert_eq!(cfg.train.mask_ratio, 0.0);
        assert!(parse_config("kd_mode=true\nmask_ratio=0.4").is_err());
    }

    #[test]
    fn full_round_trip() {
        let text = "layers=2\nhidden=32\nheads=2\nffn_hidden=64\ntarget_dim=48\nsteps=120\nwarmup_steps=12\n\
                    batch_size=8\npeak_lr=0.002\nmask_ratio=0.55\nteacher=ema\nema_momentum=0.99\n\
                    target_layers=mean_last_2\nnorm=l2\nnorm_eps=1e-7\nloss=smooth_l1\nsmooth_l1_beta=0.5\n\
                    seed=11\naugment=crop_jitter\ncolor_jitter=0.2\nnum_classes=3\n";
        let cfg = parse_config(text).unwrap();
        let again = parse_config(&config_to_string(&cfg)).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.train.norm, NormKind::L2 { eps: 1e-7 });
        assert_eq!(again.target_dim, TargetDim::Fixed(48));
    }

    #[test]
    fn auto_target_dim() {
        let cfg = parse_config("teacher=pixel").unwrap();
        assert_eq!(cfg.resolved_model(None).target_dim, 8 * 8 * 3);
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.resolved_model(Some(32)).target_dim, 32);
    }
}
