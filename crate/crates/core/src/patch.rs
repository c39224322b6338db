//! Non-overlapping square patches of an `H x W x C` image.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// The patches of one image in row-major grid order.
///
/// Each patch is flattened as `(row within patch, column within patch,
/// channel)`, giving vectors of length `P * P * C`.
#[derive(Clone, Debug)]
pub struct PatchSequence<T> {
    /// `[N, P*P*C]`
    pub patches: Tensor<T>,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
    pub patch_size: usize,
    /// `(H, W, C)` of the source image.
    pub source_dims: (usize, usize, usize),
}

impl<T: Real> PatchSequence<T> {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.source_dims.2
    }

    pub fn patch(&self, i: usize) -> &[T] {
        self.patches.row(i)
    }

    /// Reassembles the source image; exact inverse of [`patchify`].
    pub fn unpatchify(&self) -> Tensor<T> {
        let (h, w, c) = self.source_dims;
        let p = self.patch_size;
        let mut out = vec![T::zero(); h * w * c];
        for gr in 0..self.grid.0 {
            for gc in 0..self.grid.1 {
                let patch = self.patch(gr * self.grid.1 + gc);
                for py in 0..p {
                    let dst = ((gr * p + py) * w + gc * p) * c;
                    out[dst..dst + p * c].copy_from_slice(&patch[py * p * c..(py + 1) * p * c]);
                }
            }
        }
        Tensor::new(&[h, w, c], out).expect("dims are consistent")
    }
}

pub fn patchify<T: Real>(image: &Tensor<T>, patch_size: usize) -> Result<PatchSequence<T>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::shape("patchify", image.shape(), &[0, 0, 0]));
    };
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::IndivisibleDims {
            height: h,
            width: w,
            patch: patch_size,
        });
    }
    let p = patch_size;
    let (rows, cols) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gr in 0..rows {
        for gc in 0..cols {
            for py in 0..p {
                let start = ((gr * p + py) * w + gc * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Ok(PatchSequence {
        patches: Tensor::new(&[rows * cols, p * p * c], out)?,
        grid: (rows, cols),
        patch_size,
        source_dims: (h, w, c),
    })
}

/// Stacks per-image patch matrices into one `[B, N, P*P*C]` tensor.
pub fn stack_patches<T: Real>(seqs: &[PatchSequence<T>]) -> Result<Tensor<T>> {
    let first = seqs.first().ok_or(Error::InvalidConfig("empty batch".into()))?;
    let (n, d) = (first.len(), first.patch_dim());
    let mut data = Vec::with_capacity(seqs.len() * n * d);
    for s in seqs {
        if s.patches.shape() != first.patches.shape() {
            return Err(Error::shape("stack_patches", first.patches.shape(), s.patches.shape()));
        }
        data.extend_from_slice(s.patches.data());
    }
    Tensor::new(&[seqs.len(), n, d], data)
}
