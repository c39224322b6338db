//! Masked-position sets and the random / block-wise generators.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Number of masked patches for a ratio: `floor(ratio * n)`.
///
/// A 1e-9 guard keeps products like `0.29 * 100` from flooring one short.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..=1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::RangeViolation {
            key: "mask_ratio".into(),
            value: ratio.to_string(),
            expected: "[0, 1]".into(),
        })
    }
}

/// Sorted, unique masked patch indices for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    indices: Vec<usize>,
    n_total: usize,
    requested_ratio: f64,
}

impl MaskSet {
    pub fn new(mut indices: Vec<usize>, n_total: usize, requested_ratio: f64) -> Result<Self> {
        check_ratio(requested_ratio)?;
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_total) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                extent: n_total,
            });
        }
        Ok(Self {
            indices,
            n_total,
            requested_ratio,
        })
    }

    pub fn empty(n_total: usize) -> Self {
        Self {
            indices: Vec::new(),
            n_total,
            requested_ratio: 0.0,
        }
    }

    pub fn full(n_total: usize) -> Self {
        Self {
            indices: (0..n_total).collect(),
            n_total,
            requested_ratio: 1.0,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn requested_ratio(&self) -> f64 {
        self.requested_ratio
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// `delta(i in M)` for every position.
    pub fn indicator(&self) -> Vec<bool> {
        let mut out = vec![false; self.n_total];
        for &i in &self.indices {
            out[i] = true;
        }
        out
    }
}

/// Uniform sample of exactly `floor(ratio * n)` positions without replacement.
pub fn random_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskSet> {
    check_ratio(ratio)?;
    let k = masked_count(n, ratio);
    MaskSet::new(index::sample(rng, n, k).into_vec(), n, ratio)
}

/// Shape distribution of the rectangles used by [`blockwise_mask`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockShape {
    pub min_area: usize,
    pub max_area: usize,
    /// Aspect ratios are log-uniform in `[min_aspect, 1 / min_aspect]`.
    pub min_aspect: f64,
}

impl Default for BlockShape {
    fn default() -> Self {
        Self {
            min_area: 16,
            max_area: 48,
            min_aspect: 0.3,
        }
    }
}

impl BlockShape {
    pub fn validate(&self) -> Result<()> {
        if self.min_area == 0 || self.max_area < self.min_area {
            return Err(Error::InvalidConfig(format!(
                "block area range [{}, {}] is empty",
                self.min_area, self.max_area
            )));
        }
        if !(self.min_aspect > 0.0 && self.min_aspect <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "block min aspect {} must be in (0, 1]",
                self.min_aspect
            )));
        }
        Ok(())
    }
}

/// Block-wise masking on a `(rows, cols)` grid.
///
/// Rectangles with uniform area and log-uniform aspect ratio (clipped to the
/// grid) are unioned into the mask until it holds at least `floor(ratio * N)`
/// positions; random members are then unmasked until the count is exact.
pub fn blockwise_mask<R: Rng + ?Sized>(
    grid: (usize, usize),
    ratio: f64,
    shape: &BlockShape,
    rng: &mut R,
) -> Result<MaskSet> {
    check_ratio(ratio)?;
    shape.validate()?;
    let (rows, cols) = grid;
    let n = rows * cols;
    let target = masked_count(n, ratio);
    if target == 0 {
        return Ok(MaskSet {
            requested_ratio: ratio,
            ..MaskSet::empty(n)
        });
    }
    if target == n {
        return Ok(MaskSet {
            requested_ratio: ratio,
            ..MaskSet::full(n)
        });
    }

    let log_aspect = shape.min_aspect.ln();
    let mut covered = vec![false; n];
    let mut count = 0;
    while count < target {
        let area = rng.random_range(shape.min_area as f64..=shape.max_area as f64);
        let aspect = rng.random_range(log_aspect..=-log_aspect).exp();
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, rows);
        let w = ((area / aspect).sqrt().round() as usize).clamp(1, cols);
        let top = rng.random_range(0..=rows - h);
        let left = rng.random_range(0..=cols - w);
        for r in top..top + h {
            for c in left..left + w {
                let i = r * cols + c;
                if !covered[i] {
                    covered[i] = true;
                    count += 1;
                }
            }
        }
    }

    let members: Vec<usize> = (0..n).filter(|&i| covered[i]).collect();
    for drop in index::sample(rng, members.len(), count - target) {
        covered[members[drop]] = false;
    }
    MaskSet::new((0..n).filter(|&i| covered[i]).collect(), n, ratio)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskStrategy {
    Blockwise(BlockShape),
    Random,
}

impl Default for MaskStrategy {
    fn default() -> Self {
        MaskStrategy::Blockwise(BlockShape::default())
    }
}

impl MaskStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            MaskStrategy::Blockwise(_) => "blockwise",
            MaskStrategy::Random => "random",
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, grid: (usize, usize), ratio: f64, rng: &mut R) -> Result<MaskSet> {
        match self {
            MaskStrategy::Blockwise(shape) => blockwise_mask(grid, ratio, shape, rng),
            MaskStrategy::Random => random_mask(grid.0 * grid.1, ratio, rng),
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "blockwise" | "block" => Ok(MaskStrategy::default()),
            "random" => Ok(MaskStrategy::Random),
            other => Err(format!("unknown mask strategy `{other}` (blockwise|random)")),
        }
    }
}

/// Summary of a mask's spatial structure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskStats {
    pub realized_ratio: f64,
    /// Number of 4-connected components of masked positions.
    pub components: usize,
    pub mean_component_size: f64,
    pub largest_component: usize,
}

pub fn mask_statistics(mask: &MaskSet, grid: (usize, usize)) -> MaskStats {
    let (rows, cols) = grid;
    let n = rows * cols;
    let masked = mask.indicator();
    let mut seen = vec![false; n];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n.min(masked.len()) {
        if !masked[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = (i / cols, i % cols);
            let mut visit = |j: usize| {
                if masked[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - cols);
            }
            if r + 1 < rows {
                visit(i + cols);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < cols {
                visit(i + 1);
            }
        }
        sizes.push(size);
    }
    let components = sizes.len();
    MaskStats {
        realized_ratio: if n == 0 { 0.0 } else { mask.len() as f64 / n as f64 },
        components,
        mean_component_size: if components == 0 {
            0.0
        } else {
            mask.len() as f64 / components as f64
        },
        largest_component: sizes.into_iter().max().unwrap_or(0),
    }
}
