//! Configuration files, checkpoints, images and CSV outputs.

mod checkpoint;
mod config;
mod image;

pub use checkpoint::{
    load_checkpoint, load_teacher, save_checkpoint, Checkpoint, StoredOptimizer, StoredTensor, FORMAT_VERSION, MAGIC,
};
pub use config::{config_to_string, load_config, parse_config, save_config, ExperimentConfig, TargetDim};
pub use image::{decode_ppm, encode_ppm, load_image_folder, read_ppm, write_ppm};

use std::path::Path;

use crate::error::Result;
use crate::teacher::TeacherSpec;
use crate::tensor::Real;
use crate::train::Trainer;

/// Writes a text file through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Student trainer described by `config`, loading the frozen teacher
/// checkpoint when one is named.
pub fn trainer_from_config<T: Real>(config: &ExperimentConfig, dataset_len: usize) -> Result<Trainer<T>> {
    config.validate()?;
    let frozen = match &config.train.teacher {
        TeacherSpec::Frozen {
            checkpoint: Some(path), ..
        } => Some(load_teacher::<T>(path, &config.model)?),
        _ => None,
    };
    let model = config.resolved_model(frozen.as_ref().map(|(_, c)| c.hidden));
    let mut trainer = Trainer::from_seed(model, config.train.clone(), frozen, dataset_len)?;
    trainer.augment = config.data.augment.clone();
    Ok(trainer)
}
