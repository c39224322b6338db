//! Binary PPM (P6) images and class-per-directory folders of them.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Dataset, ImageFormat};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::CorruptHeader {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Splits off the next whitespace-delimited header token, skipping `#`
/// comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

/// Decodes a P6 file into `[H, W, 3]` with values scaled to `[0, 1]`.
pub fn decode_ppm<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| corrupt(path, "empty file"))?;
    if magic != b"P6" {
        let format = String::from_utf8_lossy(magic).into_owned();
        if magic.len() == 2 && magic[0] == b'P' {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                format,
            });
        }
        return Err(corrupt(path, format!("bad magic `{format}`")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| corrupt(path, format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(path, format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(corrupt(path, "zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(corrupt(path, format!("maxval {maxval} outside 1..=65535")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(corrupt(path, "missing raster"));
    }
    pos += 1;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let count = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < count * sample_bytes {
        return Err(corrupt(path, format!("raster has {} bytes, need {}", raster.len(), count * sample_bytes)));
    }
    let scale = 1.0 / maxval as f64;
    let data = (0..count)
        .map(|i| {
            let v = if sample_bytes == 1 {
                raster[i] as usize
            } else {
                (raster[2 * i] as usize) << 8 | raster[2 * i + 1] as usize
            };
            T::c((v.min(maxval)) as f64 * scale)
        })
        .collect();
    Tensor::new(&[height, width, 3], data)
}

pub fn read_ppm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    decode_ppm(&fs::read(path)?, path)
}

/// Encodes `[H, W, 3]` (or single-channel, replicated) values in `[0, 1]` as
/// 8-bit P6.
pub fn encode_ppm<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::shape("encode_ppm", image.shape(), &[0, 0, 3]));
    };
    if c != 1 && c != 3 {
        return Err(Error::shape("encode_ppm", image.shape(), &[h, w, 3]));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in image.data().chunks(c) {
        for k in 0..3 {
            let v = px[if c == 1 { 0 } else { k }].as_f64();
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.retain(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')));
    entries.sort();
    Ok(entries)
}

fn read_class_dir<T: Real>(files: &[PathBuf], format: ImageFormat) -> Result<Vec<Tensor<T>>> {
    files
        .iter()
        .filter(|p| p.is_file())
        .map(|p| {
            let ext = p.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
            match (format, ext.as_deref()) {
                (ImageFormat::Ppm, Some("ppm")) => read_ppm(p),
                (_, ext) => Err(Error::UnsupportedFormat {
                    path: p.clone(),
                    format: ext.unwrap_or("").to_string(),
                }),
            }
        })
        .collect()
}

/// Loads a directory whose subdirectories are classes, labelled in
/// lexicographic order. A directory without subdirectories is one class.
pub fn load_image_folder<T: Real>(path: &Path, format: ImageFormat) -> Result<Dataset<T>> {
    let entries = sorted_entries(path)?;
    let class_dirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    if class_dirs.is_empty() {
        images = read_class_dir(&entries, format)?;
        labels = vec![0; images.len()];
        return Dataset::new(images, labels, 1);
    }
    for (label, dir) in class_dirs.iter().enumerate() {
        let found = read_class_dir(&sorted_entries(dir)?, format)?;
        labels.extend(std::iter::repeat_n(label, found.len()));
        images.extend(found);
    }
    Dataset::new(images, labels, class_dirs.len())
}
