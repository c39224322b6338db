use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mimkit::data::{synthetic_dataset, Dataset, SyntheticSpec};
use mimkit::eval::{
    extract_features, linear_probe, mask_sweep, masked_cosine_metric, probe_accuracy, sweep_csv, FeatureSource,
    ProbeConfig, SweepSpec,
};
use mimkit::mask::{masked_count, MaskStrategy};
use mimkit::objective::NormKind;
use mimkit::teacher::{TargetLayers, Teacher};
use mimkit::train::{build_teacher, init_student, params_digest, TrainConfig};
use mimkit::vit::ViTConfig;
use mimkit::Tensor;

fn small() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        channels: 3,
        patch_size: 4,
        layers: 2,
        hidden: 32,
        ffn_hidden: 64,
        heads: 2,
        target_dim: 32,
        ..ViTConfig::default()
    }
}

fn data(classes: usize, per_class: usize) -> Dataset<f32> {
    synthetic_dataset(&SyntheticSpec {
        num_classes: classes,
        images_per_class: per_class,
        image_size: 16,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn gaussian_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

#[test]
fn untrained_student_is_uncorrelated_with_random_teacher() {
    let model = ViTConfig::default();
    let d = synthetic_dataset::<f32>(&SyntheticSpec::default()).unwrap();
    let student = init_student::<f32>(&model, 0).unwrap();
    let teacher = build_teacher(&TrainConfig::default().teacher, None, &student, &model, 0).unwrap();
    let value = masked_cosine_metric(
        &student,
        &model,
        &teacher,
        &d.images,
        0.4,
        MaskStrategy::default(),
        NormKind::default(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    assert!(value.abs() < 0.1, "cosine {value}");
}

#[test]
fn hand_set_head_reproduces_targets() {
    // With a zero patch projection and the mask token equal to its bias,
    // masked and full inputs coincide; an identity head then copies the
    // teacher's own features.
    let model = ViTConfig {
        drop_path_rate: 0.0,
        ..small()
    };
    let mut p = init_student::<f64>(&model, 3).unwrap();
    let h = model.hidden;
    p.patch_weight = Tensor::zeros(p.patch_weight.shape());
    p.mask_token = p.patch_bias.clone();
    p.head_weight = Tensor::new(&[h, h], (0..h * h).map(|i| if i / h == i % h { 1.0 } else { 0.0 }).collect()).unwrap();
    p.head_bias = Tensor::zeros(&[h]);
    let teacher = Teacher::frozen(p.clone(), model.clone(), TargetLayers::Last, &model).unwrap();
    let images = data(2, 2).cast::<f64>().images;
    let value = masked_cosine_metric(
        &p,
        &model,
        &teacher,
        &images,
        0.5,
        MaskStrategy::Random,
        NormKind::Identity,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    // The cosine epsilon is not negligible against small residual rows.
    assert!((value - 1.0).abs() < 1e-5, "cosine {value}");
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train = gaussian_rows(800, 8, &mut rng);
    let held = gaussian_rows(400, 8, &mut rng);
    let mut labels: Vec<usize> = (0..1200).map(|i| i % 4).collect();
    labels.shuffle(&mut rng);
    let r = probe_accuracy((&train, &labels[..800]), (&held, &labels[800..]), &ProbeConfig::default()).unwrap();
    assert!((r.accuracy - 0.25).abs() < 0.1, "accuracy {}", r.accuracy);
}

#[test]
fn duplicating_samples_keeps_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let centres = gaussian_rows(3, 5, &mut rng);
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            rows.push(centres[c].iter().map(|m| m + 1.5 * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>());
            labels.push(c);
        }
        (rows, labels)
    };
    let (train, train_labels) = make(60, &mut rng);
    let (held, held_labels) = make(90, &mut rng);
    let doubled: Vec<_> = train.iter().chain(&train).cloned().collect();
    let doubled_labels: Vec<_> = train_labels.iter().chain(&train_labels).copied().collect();
    let cfg = ProbeConfig::default();
    let a = probe_accuracy((&train, &train_labels), (&held, &held_labels), &cfg).unwrap();
    let b = probe_accuracy((&doubled, &doubled_labels), (&held, &held_labels), &cfg).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert!(a.accuracy > 0.5);
}

#[test]
fn pixels_are_separable_above_chance() {
    let d = data(4, 12);
    let (train, held) = d.split(0.25, 0);
    let pixels = |ds: &Dataset<f32>| -> Vec<Vec<f64>> {
        ds.images.iter().map(|im| im.data().iter().map(|&v| v as f64).collect()).collect()
    };
    let r = probe_accuracy((&pixels(&train), &train.labels), (&pixels(&held), &held.labels), &ProbeConfig::default())
        .unwrap();
    assert!(r.accuracy > 0.25);
    assert!(r.per_class_accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn probing_leaves_the_student_untouched() {
    let model = small();
    let params = init_student::<f32>(&model, 0).unwrap();
    let before = params_digest(&params);
    let d = data(2, 6);
    for source in [FeatureSource::Cls, FeatureSource::MeanPatches] {
        let f = extract_features(&params, &model, &d.images, source).unwrap();
        assert_eq!(f.len(), 12);
        assert!(f.iter().all(|v| v.len() == model.hidden));
        let r = linear_probe(&f, &d.labels, &ProbeConfig { feature_source: source, ..ProbeConfig::default() }).unwrap();
        assert_eq!(r.feature_source, source);
    }
    assert_eq!(params_digest(&params), before);
}

#[test]
fn small_sweep_is_exact_and_replays() {
    let model = small();
    let d = data(2, 6);
    let (train, held) = d.split(0.25, 0);
    let spec = SweepSpec {
        ratios: vec![0.4],
        steps_per_cell: 3,
        ..SweepSpec::default()
    };
    let base = TrainConfig {
        batch_size: 4,
        warmup_steps: Some(1),
        ..TrainConfig::default()
    };
    let run = || mask_sweep(&spec, &base, &model, None, &train, &held, &ProbeConfig::default()).unwrap();
    let rows = run();
    assert_eq!(rows.len(), 6);
    let expected = masked_count(model.num_patches(), 0.4);
    for r in &rows {
        assert_eq!(r.mask_counts.len(), 12);
        assert!(r.mask_counts.iter().all(|&c| c == expected));
        assert_eq!(r.init_digest, rows[0].init_digest);
        assert!((-1.0..=1.0).contains(&r.masked_cosine));
        assert!((0.0..=1.0).contains(&r.probe_accuracy));
    }
    assert_eq!(sweep_csv(&rows), sweep_csv(&run()));
    assert_eq!(sweep_csv(&rows).lines().count(), 7);
}
