//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; the process exits non-zero
//! if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mimkit::data::{synthetic_dataset, Dataset, SyntheticSpec};
use mimkit::diagnostics::grad_check_suite;
use mimkit::eval::{extract_features, mask_sweep, masked_cosine_metric, probe_accuracy, ProbeConfig, SweepSpec};
use mimkit::io::{load_checkpoint, save_checkpoint, Checkpoint, ExperimentConfig};
use mimkit::mask::{mask_statistics, masked_count, MaskSet, MaskStrategy};
use mimkit::objective::{mim_objective_batch, LossKind, NormKind};
use mimkit::patch::{patchify, stack_patches, PatchSequence};
use mimkit::teacher::{ema_update, TargetFeatures, TargetLayers, Teacher, TeacherSpec};
use mimkit::train::{
    adamw_step, adamw_update, cosine_lr, init_random_teacher, init_student, params_digest, pretrain_teacher_toy,
    AdamHyper, ClassifierConfig, OptimizerState, TrainConfig, Trainer,
};
use mimkit::vit::{decays, student_forward, Mode, ViTConfig, ViTParams};
use mimkit::{Result, Tape, Tensor};

type Outcome = Result<(bool, String)>;

const NORMS: [NormKind; 4] = [
    NormKind::Identity,
    NormKind::LayerNorm { eps: 1e-6 },
    NormKind::L2 { eps: 1e-6 },
    NormKind::BatchNorm { eps: 1e-6 },
];
const LOSSES: [LossKind; 4] = [LossKind::Mse, LossKind::L1, LossKind::SmoothL1 { beta: 1.0 }, LossKind::Cosine];

fn small_model() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        layers: 2,
        hidden: 16,
        ffn_hidden: 32,
        heads: 2,
        target_dim: 16,
        ..ViTConfig::default()
    }
}

fn dataset(classes: usize, per_class: usize, image_size: usize) -> Result<Dataset<f32>> {
    synthetic_dataset(&SyntheticSpec {
        num_classes: classes,
        images_per_class: per_class,
        image_size,
        ..SyntheticSpec::default()
    })
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let cases = grad_check_suite()?;
    let secs = t.elapsed().as_secs_f64();
    let failing: Vec<_> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.clone()).collect();
    let worst_op = cases
        .iter()
        .filter(|c| !c.name.starts_with("end_to_end"))
        .map(|c| c.report.max_rel_err)
        .fold(0.0, f64::max);
    let worst_e2e = cases
        .iter()
        .filter(|c| c.name.starts_with("end_to_end"))
        .map(|c| c.report.max_rel_err)
        .fold(0.0, f64::max);
    Ok((
        failing.is_empty() && secs < 60.0,
        format!(
            "{} cases, worst op rel err {worst_op:.2e}, worst end-to-end {worst_e2e:.2e}, {secs:.1}s, failing {failing:?}",
            cases.len()
        ),
    ))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches")
}

struct LocalityCase {
    model: ViTConfig,
    params: ViTParams<f64>,
    teacher: Teacher<f64>,
    seqs: Vec<PatchSequence<f64>>,
    patches: Tensor<f64>,
    masks: Vec<MaskSet>,
    norm: NormKind,
    loss: LossKind,
}

impl LocalityCase {
    fn draw(rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = [8, 16][rng.random_range(0..2)];
        let model = ViTConfig {
            image_size: [8, 12][rng.random_range(0..2)],
            channels: rng.random_range(1..=3),
            patch_size: 4,
            layers: rng.random_range(1..=2),
            hidden,
            ffn_hidden: 2 * hidden,
            heads: [1, 2][rng.random_range(0..2)],
            target_dim: hidden,
            ..ViTConfig::default()
        };
        let params = init_student(&model, rng.random())?;
        let teacher = Teacher::frozen(init_random_teacher(&model, rng.random())?, model.clone(), TargetLayers::Last, &model)?;
        let batch = rng.random_range(1..=3);
        let images: Vec<_> = (0..batch)
            .map(|_| random_tensor(&[model.image_size, model.image_size, model.channels], rng))
            .collect();
        let seqs = images.iter().map(|im| patchify(im, 4)).collect::<Result<Vec<_>>>()?;
        let strategy = [MaskStrategy::default(), MaskStrategy::Random][rng.random_range(0..2)];
        // At least one masked and one unmasked position on 2x2 and 3x3 grids.
        let ratio = rng.random_range(0.25..0.9);
        let masks = (0..batch)
            .map(|_| strategy.sample(model.grid(), ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patches: stack_patches(&seqs)?,
            seqs,
            masks,
            norm: NORMS[rng.random_range(0..4)],
            loss: LOSSES[rng.random_range(0..4)],
            model,
            params,
            teacher,
        })
    }

    fn rows(&self) -> usize {
        self.model.num_patches() + 1
    }

    /// Loss bits and parameter gradients, with `delta` added to the head
    /// outputs and `targets` replacing the teacher's.
    fn evaluate(&self, delta: Option<&Tensor<f64>>, targets: &[TargetFeatures<f64>]) -> Result<(u64, ViTParams<f64>)> {
        let mut tape = Tape::new();
        let leaves = self.params.attach(&mut tape);
        let mut drop = ChaCha8Rng::seed_from_u64(17);
        let mut out = student_forward(&mut tape, &self.patches, Some(&self.masks), &leaves, &self.model, Mode::Train, &mut drop)?;
        if let Some(d) = delta {
            out = tape.add(&out, d)?;
        }
        let loss = mim_objective_batch(&mut tape, &out, targets, &self.masks, self.norm, self.loss)?;
        let bits = loss.item().expect("scalar").to_bits();
        let grads = tape.backward(&loss)?;
        Ok((bits, leaves.gradients(&grads)))
    }

    /// Random values on every unmasked row (and the class row) of each image.
    fn unmasked_noise(&self, width: usize, with_cls: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let rows = if with_cls { self.rows() } else { self.rows() - 1 };
        let offset = usize::from(with_cls);
        self.masks
            .iter()
            .map(|m| {
                (0..rows * width)
                    .map(|k| {
                        let row = k / width;
                        let masked = row >= offset && m.contains(row - offset);
                        if masked {
                            0.0
                        } else {
                            rng.sample::<f64, _>(StandardNormal) * 3.0
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

fn masked_locality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut output_cases = 0;
    let mut target_cases = 0;
    let mut violations = Vec::new();
    for case_id in 0..100 {
        let case = LocalityCase::draw(&mut rng)?;
        let targets = case.teacher.targets(&case.seqs)?;
        let (base_bits, base_grads) = case.evaluate(None, &targets)?;
        let same = |bits: u64, grads: &ViTParams<f64>| {
            bits == base_bits && params_digest(grads) == params_digest(&base_grads)
        };

        let d = case.model.target_dim;
        let noise: Vec<f64> = case.unmasked_noise(d, true, &mut rng).concat();
        let delta = Tensor::new(&[case.masks.len(), case.rows(), d], noise)?;
        let (bits, grads) = case.evaluate(Some(&delta), &targets)?;
        output_cases += 1;
        if !same(bits, &grads) {
            violations.push(format!("outputs case {case_id} ({:?}, {:?})", case.norm, case.loss));
        }

        // Batch normalisation pools statistics over every row of the batch,
        // so only row-wise normalisers are local in the targets.
        if !matches!(case.norm, NormKind::BatchNorm { .. }) {
            let noise = case.unmasked_noise(d, false, &mut rng);
            let perturbed = targets
                .iter()
                .zip(&noise)
                .map(|(t, z)| {
                    let data = t.t.data().iter().zip(z).map(|(a, b)| a + b).collect();
                    Ok(TargetFeatures {
                        t: Tensor::new(t.t.shape(), data)?,
                        source: t.source,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (bits, grads) = case.evaluate(None, &perturbed)?;
            target_cases += 1;
            if !same(bits, &grads) {
                violations.push(format!("targets case {case_id} ({:?}, {:?})", case.norm, case.loss));
            }
        }
    }
    Ok((
        violations.is_empty(),
        format!("{output_cases} output perturbations, {target_cases} target perturbations (row-wise norms), violations {violations:?}"),
    ))
}

fn mask_blindness() -> Outcome {
    let data = dataset(2, 4, 16)?;
    let mut compared = 0;
    let mut ok = true;
    let specs = [
        TeacherSpec::default(),
        TeacherSpec::Ema { momentum: 0.999, target_layers: TargetLayers::MeanLastK(2) },
        TeacherSpec::Pixel { per_patch_ln: true },
    ];
    for spec in specs {
        let model = match spec {
            TeacherSpec::Pixel { .. } => ViTConfig { target_dim: 48, ..small_model() },
            _ => small_model(),
        };
        let config = TrainConfig {
            steps: Some(1),
            batch_size: 8,
            teacher: spec.clone(),
            ..TrainConfig::default()
        };
        let mut outputs = Vec::new();
        for (strategy, mask_seed) in [(MaskStrategy::default(), 1), (MaskStrategy::Random, 2), (MaskStrategy::Random, 3)] {
            let mut t = Trainer::<f32>::from_seed(model.clone(), TrainConfig { mask_strategy: strategy, ..config.clone() }, None, data.len())?;
            t.reseed_masks(mask_seed);
            outputs.push(t.step(&data.images)?);
        }
        for pair in outputs.windows(2) {
            let masks_differ = pair[0].masks != pair[1].masks;
            let identical = pair[0].targets.iter().zip(&pair[1].targets).all(|(a, b)| a.bit_eq(b));
            ok &= masks_differ && identical;
            compared += pair[0].targets.len();
        }
    }
    Ok((ok, format!("{compared} image target pairs bit-identical across differing masks (frozen, ema, pixel)")))
}

fn kd_degeneracy() -> Outcome {
    let data = dataset(2, 4, 16)?;
    let config = TrainConfig {
        steps: Some(100),
        warmup_steps: Some(5),
        batch_size: 4,
        ..TrainConfig::default()
    }
    .with_kd_mode();
    let mut t = Trainer::<f32>::from_seed(small_model(), config, None, data.len())?;
    let n = t.model.num_patches();
    let mut equal = 0;
    for k in 0..100 {
        let batch: Vec<_> = (0..4).map(|i| data.images[(4 * k + i) % data.len()].clone()).collect();
        let out = t.step(&batch)?;
        let full = vec![MaskSet::full(n); batch.len()];
        let mut tape = Tape::no_grad();
        let reference = mim_objective_batch(&mut tape, &out.outputs, &out.targets, &full, t.config.norm, t.config.loss)?;
        if out.masks.is_none() && reference.item().map(f64::from) == Some(out.loss) {
            equal += 1;
        }
    }
    Ok((equal == 100, format!("{equal}/100 steps with kd loss == full-mask objective exactly")))
}

/// One-sided sign test: P(X >= wins) for X ~ Binomial(trials, 1/2).
fn sign_test_p(wins: usize, trials: usize) -> f64 {
    let mut coeff = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=trials {
        if k > 0 {
            coeff = coeff * (trials - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            tail += coeff;
        }
    }
    tail / 2f64.powi(trials as i32)
}

fn exact_masking() -> Outcome {
    let mut count_errors = 0;
    let mut cells = 0;
    let mut failing = Vec::new();
    for grid in [(8, 8), (14, 14)] {
        let n = grid.0 * grid.1;
        for tenth in 1..=9 {
            let ratio = tenth as f64 / 10.0;
            let expected = (ratio * n as f64).floor() as usize;
            let (mut wins, mut losses) = (0, 0);
            for seed in 0..100 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let block = MaskStrategy::default().sample(grid, ratio, &mut rng)?;
                let random = MaskStrategy::Random.sample(grid, ratio, &mut rng)?;
                count_errors += usize::from(block.len() != expected) + usize::from(random.len() != expected);
                let b = mask_statistics(&block, grid).mean_component_size;
                let r = mask_statistics(&random, grid).mean_component_size;
                if b > r {
                    wins += 1;
                } else if b < r {
                    losses += 1;
                }
            }
            cells += 1;
            let p = sign_test_p(wins, wins + losses);
            if p >= 0.01 {
                failing.push(format!("{}x{} ratio {ratio}: {wins} wins, {losses} losses, {} ties, p {p:.3}", grid.0, grid.1, 100 - wins - losses));
            }
        }
    }
    Ok((
        count_errors == 0 && failing.is_empty(),
        format!("count errors {count_errors} over 3600 masks; sign test p < 0.01 in {}/{cells} cells; failing {failing:?}", cells - failing.len()),
    ))
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64)
}

/// Worst `|mean|` and `|var - 1|` of the normalised rows whose source row has
/// variance at least `MIN_ROW_VAR`; below that the epsilon inside the square
/// root, not the arithmetic, sets the output variance.
fn row_moments(input: &[f64], output: &[f64], dim: usize) -> (f64, f64) {
    input.chunks(dim).zip(output.chunks(dim)).fold((0.0f64, 0.0f64), |(wm, wv), (src, row)| {
        if mean_var(src).1 < MIN_ROW_VAR {
            return (wm, wv);
        }
        let (mean, var) = mean_var(row);
        (wm.max(mean.abs()), wv.max((var - 1.0).abs()))
    })
}

const MIN_ROW_VAR: f64 = 1e-2;

fn widen(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

fn layer_norm_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let norm = NormKind::default();
    let (mut wide_mean, mut wide_var) = (0.0f64, 0.0f64);
    let (mut narrow_mean, mut narrow_var) = (0.0f64, 0.0f64);
    let mut constant_ok = true;
    for case in 0..200 {
        let rows = rng.random_range(1..20);
        let dim = rng.random_range(2..128);
        let draw = |rng: &mut ChaCha8Rng, scale: f64, shift: f64| -> Vec<f64> {
            (0..rows * dim).map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let scale = 10f64.powf(rng.random_range(-1.0..3.0));
        let shift = rng.random_range(-50.0..50.0);
        let values = draw(&mut rng, scale, shift);
        let out = norm.apply(&Tensor::new(&[rows, dim], values.clone())?)?;
        let (m, v) = row_moments(&values, out.data(), dim);
        (wide_mean, wide_var) = (wide_mean.max(m), wide_var.max(v));

        // Single precision at feature-like magnitudes.
        let scale = 10f64.powf(rng.random_range(-1.0..1.0));
        let shift = rng.random_range(-2.0..2.0);
        let values = Tensor::new(&[rows, dim], draw(&mut rng, scale, shift).iter().map(|&v| v as f32).collect())?;
        let out = norm.apply(&values)?;
        let (m, v) = row_moments(&widen(&values), &widen(&out), dim);
        (narrow_mean, narrow_var) = (narrow_mean.max(m), narrow_var.max(v));

        let c = shift * 25.0 + case as f64 / 7.0;
        constant_ok &= norm.apply(&Tensor::full(&[rows, dim], c))?.data().iter().all(|&v| v == 0.0);
        constant_ok &= norm.apply(&Tensor::full(&[rows, dim], c as f32))?.data().iter().all(|&v| v == 0.0);
    }

    // Real teacher targets as produced during training.
    let data = dataset(2, 4, 32)?;
    let model = ViTConfig::default();
    let teacher = Teacher::frozen(init_random_teacher::<f32>(&model, 3)?, model.clone(), TargetLayers::Last, &model)?;
    let seqs = data.images.iter().map(|im| patchify(im, model.patch_size)).collect::<Result<Vec<_>>>()?;
    let (mut target_mean, mut target_var) = (0.0f64, 0.0f64);
    for t in teacher.targets(&seqs)? {
        let out = norm.apply(&t.t)?;
        let (m, v) = row_moments(&widen(&t.t), &widen(&out), model.hidden);
        (target_mean, target_var) = (target_mean.max(m), target_var.max(v));
    }

    let worst_mean = wide_mean.max(narrow_mean).max(target_mean);
    let worst_var = wide_var.max(narrow_var).max(target_var);
    Ok((
        worst_mean < 1e-6 && worst_var < 1e-3 && constant_ok,
        format!(
            "rows with variance >= {MIN_ROW_VAR}, worst |mean| / |var-1|: f64 {wide_mean:.1e} / {wide_var:.1e}, f32 {narrow_mean:.1e} / {narrow_var:.1e}, teacher targets {target_mean:.1e} / {target_var:.1e}; constant rows zero: {constant_ok}"
        ),
    ))
}

fn convergence() -> Outcome {
    let data = dataset(4, 8, 32)?;
    let model = ViTConfig::default();
    let config = TrainConfig {
        steps: Some(500),
        warmup_steps: Some(25),
        batch_size: 32,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let mut trainer = Trainer::<f32>::from_seed(model.clone(), config.clone(), None, data.len())?;
    trainer.run_to_end(&data)?;
    let cosine = masked_cosine_metric(
        &trainer.params,
        &model,
        &trainer.teacher,
        &data.images,
        config.mask_ratio,
        config.mask_strategy,
        config.norm,
        &mut ChaCha8Rng::seed_from_u64(1),
    )?;
    let secs = t.elapsed().as_secs_f64();

    let mut halved = Vec::new();
    let mut failed = Vec::new();
    for loss in [LossKind::Mse, LossKind::Cosine, LossKind::SmoothL1 { beta: 1.0 }] {
        for norm in NORMS {
            let cfg = TrainConfig {
                steps: Some(200),
                warmup_steps: Some(10),
                batch_size: 32,
                norm,
                loss,
                ..TrainConfig::default()
            };
            let mut tr = Trainer::<f32>::from_seed(model.clone(), cfg, None, data.len())?;
            let record = tr.run_to_end(&data)?;
            let initial = record.entries[0].loss;
            match record.entries.iter().find(|e| e.loss <= 0.5 * initial) {
                Some(e) => halved.push(format!("{}/{}@{}", loss.name(), norm.name(), e.step)),
                None => failed.push(format!("{}/{} final {:.3} of initial", loss.name(), norm.name(), record.final_loss().unwrap_or(f64::NAN) / initial)),
            }
        }
    }
    Ok((
        cosine >= 0.95 && secs < 300.0 && failed.is_empty(),
        format!(
            "masked cosine {cosine:.4} after 500 steps in {secs:.1}s; grid halved at steps {halved:?}; not halved {failed:?}"
        ),
    ))
}

fn distillation_vs_probe() -> Outcome {
    let data = synthetic_dataset::<f32>(&SyntheticSpec::default())?;
    let (train, held) = data.split(0.25, 0);
    let probe = ProbeConfig::default();
    let probe_of = |params: &ViTParams<f32>, model: &ViTConfig| -> Result<f64> {
        let a = extract_features(params, model, &train.images, probe.feature_source)?;
        let b = extract_features(params, model, &held.images, probe.feature_source)?;
        Ok(probe_accuracy((&a, &train.labels), (&b, &held.labels), &probe)?.accuracy)
    };
    let teacher_model = ViTConfig {
        target_dim: train.num_classes,
        ..ViTConfig::default()
    };
    let teacher = pretrain_teacher_toy(&train, &teacher_model, &ClassifierConfig::default())?;
    let a_t = probe_of(&teacher.params, &teacher_model)?;

    let model = ViTConfig::default();
    let config = TrainConfig {
        steps: Some(2000),
        warmup_steps: Some(100),
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut student = Trainer::<f32>::from_seed(model.clone(), config, Some((teacher.params, teacher_model)), train.len())?;
    let before = probe_of(&student.params, &model)?;
    student.run_to_end(&train)?;
    let after = probe_of(&student.params, &model)?;
    Ok((
        after >= a_t - 0.05,
        format!("teacher probe a_T {a_t:.4}, student probe {before:.4} at init -> {after:.4} after 2000 steps (threshold {:.4})", a_t - 0.05),
    ))
}

fn ema_correctness() -> Outcome {
    let model = small_model();
    let student = init_student::<f64>(&model, 1)?;
    let mut teacher = init_random_teacher::<f64>(&model, 2)?;
    let distance = |t: &ViTParams<f64>| -> f64 {
        t.named()
            .iter()
            .zip(student.named())
            .flat_map(|((_, a), (_, b))| a.to_vec().into_iter().zip(b.to_vec()).map(|(x, y)| (x - y).powi(2)).collect::<Vec<_>>())
            .sum::<f64>()
            .sqrt()
    };
    let d0 = distance(&teacher);
    let (m, k) = (0.99f64, 100);
    for _ in 0..k {
        ema_update(&mut teacher, &student, m)?;
    }
    let expected = m.powi(k) * d0;
    let rel = (distance(&teacher) - expected).abs() / expected;
    Ok((rel < 1e-6, format!("distance {d0:.4} -> {:.6e}, expected {expected:.6e}, rel err {rel:.2e}", distance(&teacher))))
}

fn schedule_and_optimizer() -> Outcome {
    let (warmup, total, peak, min) = (10, 110, 1.5e-3, 1e-5);
    let at_warmup = cosine_lr(warmup, warmup, total, peak, min);
    let at_end = cosine_lr(total, warmup, total, peak, min);
    let mid = cosine_lr(60, warmup, total, peak, min);
    let schedule_ok = (at_warmup - 1.5e-3).abs() < 1e-12 && (at_end - 1e-5).abs() < 1e-12 && (mid - 7.55e-4).abs() < 1e-12;

    // Hand recurrences for a constant gradient g = 1: both bias-corrected
    // moments are exactly 1, so each step moves by lr / (1 + eps) plus the
    // decoupled decay lr * wd * theta.
    let (lr, eps) = (0.1, 1e-8);
    let mut worst: f64 = 0.0;
    for wd in [0.0, 0.05] {
        let hyper = AdamHyper { weight_decay: wd, ..AdamHyper::default() };
        let (mut th, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        let mut hand = 1.0f64;
        for step in 1..=5 {
            adamw_update(&mut th, &[1.0], &mut m, &mut v, step, lr, &hyper, true)?;
            hand = hand - lr / (1.0 + eps) - lr * wd * hand;
            worst = worst.max((th[0] - hand).abs());
        }
    }
    let first_no_wd = 1.0 - lr / (1.0 + eps);
    let first_wd = first_no_wd - 0.005;
    let (mut th, mut m, mut v) = ([0.7f64], [0.0], [0.0]);
    adamw_update(&mut th, &[0.0], &mut m, &mut v, 1, lr, &AdamHyper { weight_decay: 0.0, ..AdamHyper::default() }, true)?;
    let unchanged = th[0] == 0.7;

    // The same recurrences through the full parameter-set update: weights
    // decay, biases and norm gains do not.
    let model = small_model();
    let mut params = init_student::<f64>(&model, 0)?.map(|_, t| Tensor::ones(t.shape()));
    let grads = params.map(|_, t| Tensor::ones(t.shape()));
    let mut state = OptimizerState::new(&params);
    let hyper = AdamHyper::default();
    let (mut decayed, mut plain) = (1.0f64, 1.0f64);
    for _ in 0..5 {
        adamw_step(&mut params, &grads, &mut state, lr, &hyper)?;
        decayed = decayed - lr / (1.0 + eps) - lr * hyper.weight_decay * decayed;
        plain -= lr / (1.0 + eps);
    }
    for (name, t) in params.named() {
        let expected = if decays(&name, &t) { decayed } else { plain };
        worst = worst.max(t.data().iter().map(|&x| (x - expected).abs()).fold(0.0, f64::max));
    }
    let decay_split = params.named().iter().any(|(_, t)| (t.data()[0] - decayed).abs() < 1e-9)
        && params.named().iter().any(|(_, t)| (t.data()[0] - plain).abs() < 1e-9);
    Ok((
        schedule_ok && worst < 1e-9 && unchanged && decay_split,
        format!(
            "lr at warmup {at_warmup:e}, at end {at_end:e}, mid {mid:e}; adamw worst deviation {worst:.2e} (first steps {first_no_wd:.10} / {first_wd:.10}), zero grad unchanged {unchanged}"
        ),
    ))
}

fn determinism_and_serialization() -> Outcome {
    let data = dataset(2, 8, 16)?;
    let config = TrainConfig {
        steps: Some(20),
        warmup_steps: Some(2),
        batch_size: 8,
        seed: 99,
        ..TrainConfig::default()
    };
    let run = || -> Result<(String, String, Trainer<f32>)> {
        let mut t = Trainer::<f32>::from_seed(small_model(), config.clone(), None, data.len())?;
        let record = t.run_to_end(&data)?;
        let csv = record.to_csv();
        let digest = params_digest(&t.params);
        Ok((csv, digest, t))
    };
    let (csv_a, digest_a, trainer) = run()?;
    let (csv_b, digest_b, _) = run()?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("run.mimd");
    let ck = Checkpoint::new(&trainer.params, Some(&trainer.opt), &ExperimentConfig::default(), &trainer.model, 99, 20)?;
    save_checkpoint(&path, &ck)?;
    let loaded = load_checkpoint(&path)?;
    let params_back = loaded.params::<f32>()?;
    let opt_back = loaded.optimizer_state::<f32>()?.expect("optimizer stored");
    let round_trip = loaded == ck
        && params_digest(&params_back) == digest_a
        && params_digest(&opt_back.m) == params_digest(&trainer.opt.m)
        && params_digest(&opt_back.v) == params_digest(&trainer.opt.v)
        && loaded.to_bytes() == ck.to_bytes();
    Ok((
        csv_a.as_bytes() == csv_b.as_bytes() && digest_a == digest_b && round_trip,
        format!("csv identical {}, digests identical {}, checkpoint round trip bit-exact {round_trip}", csv_a == csv_b, digest_a == digest_b),
    ))
}

fn sweep_protocol() -> Outcome {
    let data = synthetic_dataset::<f32>(&SyntheticSpec::default())?;
    let (train, held) = data.split(0.25, 0);
    let model = ViTConfig::default();
    let base = TrainConfig {
        batch_size: 16,
        warmup_steps: Some(10),
        ..TrainConfig::default()
    };
    let spec = SweepSpec::default();
    let probe = ProbeConfig::default();
    let t = Instant::now();
    let rows = mask_sweep(&spec, &base, &model, None, &train, &held, &probe)?;
    let secs = t.elapsed().as_secs_f64();
    let csv = mimkit::eval::sweep_csv(&rows);

    let n = model.num_patches();
    let counts_exact = rows
        .iter()
        .all(|r| !r.mask_counts.is_empty() && r.mask_counts.iter().all(|&c| c == masked_count(n, r.ratio)));
    let subset = SweepSpec {
        strategies: vec![MaskStrategy::Random],
        ratios: vec![0.5],
        seeds: vec![2],
        ..spec.clone()
    };
    let again = mask_sweep(&subset, &base, &model, None, &train, &held, &probe)?;
    let original = rows
        .iter()
        .find(|r| r.strategy == MaskStrategy::Random && r.ratio == 0.5 && r.seed == 2);
    let replayed = original.is_some_and(|o| mimkit::eval::sweep_csv(std::slice::from_ref(o)) == mimkit::eval::sweep_csv(&again));
    let data_rows = csv.lines().count() - 1;
    Ok((
        data_rows == 42 && counts_exact && replayed && secs < 1800.0,
        format!("{data_rows} rows in {secs:.1}s, realized counts exact {counts_exact}, cell replay identical {replayed}"),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient fidelity", gradient_fidelity),
        ("masked locality", masked_locality),
        ("teacher mask blindness", mask_blindness),
        ("distillation-mode degeneracy", kd_degeneracy),
        ("exact masking", exact_masking),
        ("layer-norm target contract", layer_norm_contract),
        ("convergence", convergence),
        ("distillation vs probe baseline", distillation_vs_probe),
        ("ema correctness", ema_correctness),
        ("schedule and optimizer spot values", schedule_and_optimizer),
        ("determinism and serialization", determinism_and_serialization),
        ("sweep protocol", sweep_protocol),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let (passed, detail) = match check() {
            Ok(result) => result,
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!passed);
        println!("{} criterion {id} ({name}): {detail}", if passed { "PASS" } else { "FAIL" });
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
