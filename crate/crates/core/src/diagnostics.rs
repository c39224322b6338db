//! Finite-difference gradient checks for every tape operation and for the
//! full masked distillation loss of a toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mask::{random_mask, MaskSet};
use crate::objective::{mim_objective_batch, LossKind, NormKind};
use crate::patch::{patchify, stack_patches};
use crate::teacher::transformer_targets;
use crate::teacher::{TargetFeatures, TargetLayers, TeacherKind};
use crate::tensor::{grad_check_many, GradCheckReport, Tape, Tensor};
use crate::vit::{init_params, student_forward, Mode, ViTConfig, ViTParams};

/// Central-difference step used by the suite.
pub const STEP: f64 = 1e-5;
/// Relative-error bound for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the end-to-end loss.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.report.passed
    }
}

struct Inputs(ChaCha8Rng);

impl Inputs {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.random_range(lo..hi)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn signed(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.uniform(shape, -2.0, 2.0)
    }

    /// Values with magnitude in `[lo, hi]` and random sign.
    fn away_from_zero(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v = self.0.random_range(lo..hi);
                if self.0.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape, data).expect("shape matches data")
    }
}

/// `sum(out * w)` for a fixed random `w`, so every output coordinate
/// contributes a distinct weight.
fn project(tape: &mut Tape<f64>, out: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut g = Inputs(ChaCha8Rng::seed_from_u64(seed));
    let w = g.signed(out.shape());
    let prod = tape.mul(out, &w)?;
    tape.sum(&prod, None)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>>;

fn op_cases() -> Vec<(&'static str, OpFn, Vec<Tensor<f64>>)> {
    let mut g = Inputs(ChaCha8Rng::seed_from_u64(11));
    let mut cases: Vec<(&'static str, OpFn, Vec<Tensor<f64>>)> = Vec::new();
    let mut push = |name, f: OpFn, inputs| cases.push((name, f, inputs));

    push("add", Box::new(|t, x| t.add(&x[0], &x[1])), vec![g.signed(&[3, 4]), g.signed(&[3, 4])]);
    push(
        "add_broadcast",
        Box::new(|t, x| t.add(&x[0], &x[1])),
        vec![g.signed(&[2, 3, 4]), g.signed(&[4])],
    );
    push(
        "sub_broadcast",
        Box::new(|t, x| t.sub(&x[0], &x[1])),
        vec![g.signed(&[2, 3, 4]), g.signed(&[3, 4])],
    );
    push(
        "mul_broadcast",
        Box::new(|t, x| t.mul(&x[0], &x[1])),
        vec![g.signed(&[2, 3, 4]), g.signed(&[4])],
    );
    push(
        "div",
        Box::new(|t, x| t.div(&x[0], &x[1])),
        vec![g.signed(&[3, 4]), g.away_from_zero(&[3, 4], 0.5, 2.0)],
    );
    push("scale", Box::new(|t, x| t.scale(&x[0], 0.7)), vec![g.signed(&[5])]);
    push("add_scalar", Box::new(|t, x| t.add_scalar(&x[0], -1.3)), vec![g.signed(&[5])]);
    push("gelu", Box::new(|t, x| t.gelu(&x[0])), vec![g.signed(&[3, 5])]);
    push("abs", Box::new(|t, x| t.abs(&x[0])), vec![g.away_from_zero(&[3, 5], 0.1, 2.0)]);
    push("sqrt", Box::new(|t, x| t.sqrt(&x[0])), vec![g.uniform(&[3, 5], 0.2, 3.0)]);
    push("square", Box::new(|t, x| t.square(&x[0])), vec![g.signed(&[3, 5])]);
    // Residuals kept clear of the quadratic/linear switch at |r| = 1.
    let mut smooth = g.away_from_zero(&[12], 0.05, 0.9).to_vec();
    smooth.extend(g.away_from_zero(&[12], 1.1, 3.0).to_vec());
    let smooth = Tensor::new(&[24], smooth).expect("sizes agree");
    push("smooth_l1", Box::new(|t, x| t.smooth_l1(&x[0], 1.0)), vec![smooth]);
    push(
        "matmul",
        Box::new(|t, x| t.matmul(&x[0], &x[1])),
        vec![g.signed(&[3, 4]), g.signed(&[4, 5])],
    );
    push(
        "matmul_batched_lhs",
        Box::new(|t, x| t.matmul(&x[0], &x[1])),
        vec![g.signed(&[2, 3, 4]), g.signed(&[4, 5])],
    );
    push(
        "bmm",
        Box::new(|t, x| t.bmm(&x[0], &x[1])),
        vec![g.signed(&[2, 3, 4]), g.signed(&[2, 4, 3])],
    );
    push("softmax", Box::new(|t, x| t.softmax(&x[0], 1)), vec![g.signed(&[3, 5])]);
    push("softmax_axis0", Box::new(|t, x| t.softmax(&x[0], 0)), vec![g.signed(&[4, 3])]);
    push("log_softmax", Box::new(|t, x| t.log_softmax(&x[0], 1)), vec![g.signed(&[3, 5])]);
    push(
        "layer_norm",
        Box::new(|t, x| t.layer_norm(&x[0], 1, 1e-6, None)),
        vec![g.signed(&[3, 6])],
    );
    push(
        "layer_norm_axis0",
        Box::new(|t, x| t.layer_norm(&x[0], 0, 1e-6, None)),
        vec![g.signed(&[5, 3])],
    );
    push(
        "layer_norm_affine",
        Box::new(|t, x| t.layer_norm(&x[0], 2, 1e-6, Some((&x[1], &x[2])))),
        vec![g.signed(&[2, 3, 6]), g.signed(&[6]), g.signed(&[6])],
    );
    push("sum_all", Box::new(|t, x| t.sum(&x[0], None)), vec![g.signed(&[3, 4])]);
    push("sum_axis", Box::new(|t, x| t.sum(&x[0], Some(1))), vec![g.signed(&[2, 3, 4])]);
    push("mean_axis", Box::new(|t, x| t.mean(&x[0], Some(2))), vec![g.signed(&[2, 3, 4])]);
    push("reshape", Box::new(|t, x| t.reshape(&x[0], &[4, 3])), vec![g.signed(&[2, 6])]);
    push(
        "permute",
        Box::new(|t, x| t.permute(&x[0], &[2, 0, 1])),
        vec![g.signed(&[2, 3, 4])],
    );
    push(
        "concat",
        Box::new(|t, x| t.concat(&[&x[0], &x[1]], 1)),
        vec![g.signed(&[2, 3]), g.signed(&[2, 2])],
    );
    push(
        "index_select_repeats",
        Box::new(|t, x| t.index_select(&x[0], 0, &[2, 0, 2, 3])),
        vec![g.signed(&[4, 3])],
    );
    push(
        "broadcast_to",
        Box::new(|t, x| t.broadcast_to(&x[0], &[2, 3, 4])),
        vec![g.signed(&[3, 4])],
    );
    cases
}

/// One case per tape operation, each reduced to a scalar through a fixed
/// random projection.
pub fn op_grad_checks() -> Result<Vec<GradCheckCase>> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, f, inputs))| {
            let seed = 100 + i as u64;
            let report = grad_check_many(
                |tape, xs| {
                    let out = f(tape, xs)?;
                    project(tape, &out, seed)
                },
                &inputs,
                STEP,
                OP_TOLERANCE,
            )?;
            Ok(GradCheckCase {
                name: name.to_string(),
                tolerance: OP_TOLERANCE,
                report,
            })
        })
        .collect()
}

/// Two-layer, width-8 model used by the end-to-end check.
pub fn toy_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        layers: 2,
        hidden: 8,
        ffn_hidden: 16,
        heads: 2,
        layer_scale_init: 0.5,
        drop_path_rate: 0.2,
        target_dim: 8,
        ln_eps: 1e-6,
    }
}

fn rebuild(template: &ViTParams<f64>, leaves: &[Tensor<f64>]) -> ViTParams<f64> {
    let mut it = leaves.iter();
    template.map(|_, _| it.next().expect("one leaf per tensor").clone())
}

/// Checks the masked distillation loss of a toy student against a frozen
/// random teacher, differentiating with respect to every student parameter.
/// Drop path is active; its rng is reseeded inside every evaluation.
pub fn end_to_end_grad_check(norm: NormKind, loss: LossKind) -> Result<GradCheckCase> {
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params: ViTParams<f64> = init_params(&config, &mut rng)?;
    let teacher: ViTParams<f64> = init_params(&config, &mut rng)?;
    let images: Vec<Tensor<f64>> = (0..2)
        .map(|_| {
            let data = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            Tensor::new(&[8, 8, 1], data)
        })
        .collect::<Result<_>>()?;
    let seqs = images
        .iter()
        .map(|im| patchify(im, config.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let patches = stack_patches(&seqs)?;
    let targets: Vec<TargetFeatures<f64>> =
        transformer_targets(&patches, &teacher, &config, TargetLayers::Last, TeacherKind::Frozen)?;
    let masks: Vec<MaskSet> = (0..2)
        .map(|_| random_mask(config.num_patches(), 0.5, &mut rng))
        .collect::<Result<_>>()?;

    let report = grad_check_many(
        |tape, leaves| {
            let student = rebuild(&params, leaves);
            let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
            let out = student_forward(tape, &patches, Some(&masks), &student, &config, Mode::Train, &mut drop_rng)?;
            mim_objective_batch(tape, &out, &targets, &masks, norm, loss)
        },
        &params.tensors(),
        STEP,
        END_TO_END_TOLERANCE,
    )?;
    Ok(GradCheckCase {
        name: format!("end_to_end_{}_{}", loss.name(), norm.name()),
        tolerance: END_TO_END_TOLERANCE,
        report,
    })
}

/// The full suite: every operation plus end-to-end losses.
pub fn grad_check_suite() -> Result<Vec<GradCheckCase>> {
    let mut cases = op_grad_checks()?;
    for (norm, loss) in [
        (NormKind::default(), LossKind::default()),
        (NormKind::L2 { eps: 1e-6 }, LossKind::Mse),
        (NormKind::Identity, LossKind::Cosine),
    ] {
        cases.push(end_to_end_grad_check(norm, loss)?);
    }
    Ok(cases)
}
