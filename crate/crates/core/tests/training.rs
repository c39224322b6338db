use mimkit::data::{synthetic_dataset, Dataset, SyntheticSpec};
use mimkit::io::{load_teacher, save_checkpoint, Checkpoint, ExperimentConfig};
use mimkit::objective::NormKind;
use mimkit::patch::patchify;
use mimkit::teacher::{TargetLayers, Teacher};
use mimkit::train::{
    accuracy, classify, init_student, pretrain_teacher_toy, ClassifierConfig, TrainConfig, Trainer,
};
use mimkit::vit::ViTConfig;
use mimkit::Tensor;

fn small() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        channels: 3,
        patch_size: 4,
        layers: 2,
        hidden: 16,
        ffn_hidden: 32,
        heads: 2,
        target_dim: 16,
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

#[test]
fn distillation_from_an_identical_teacher_starts_at_zero() {
    let model = ViTConfig {
        drop_path_rate: 0.0,
        ..small()
    };
    let mut params = init_student::<f64>(&model, 0).unwrap();
    let h = model.hidden;
    let eye: Vec<f64> = (0..h * h).map(|i| if i / h == i % h { 1.0 } else { 0.0 }).collect();
    params.head_weight = Tensor::new(&[h, h], eye).unwrap();
    params.head_bias = Tensor::zeros(&[h]);
    let teacher = Teacher::frozen(params.clone(), model.clone(), TargetLayers::Last, &model).unwrap();
    let config = TrainConfig {
        steps: Some(1),
        batch_size: 4,
        norm: NormKind::Identity,
        ..TrainConfig::default()
    }
    .with_kd_mode();
    let schedule = config.schedule(4);
    let mut trainer = Trainer::new(model, config, params, teacher, schedule).unwrap();
    let images = data(2, 2).cast::<f64>().images;
    let out = trainer.step(&images).unwrap();
    assert!(out.masks.is_none());
    assert_eq!(out.loss, 0.0);
    assert_eq!(out.grad_norm, 0.0);
}

#[test]
fn fixed_seed_runs_replay_exactly() {
    let d = data(2, 4);
    let config = TrainConfig {
        steps: Some(6),
        warmup_steps: Some(2),
        batch_size: 4,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let mut t = Trainer::<f32>::from_seed(small(), config.clone(), None, d.len()).unwrap();
        t.run_to_end(&d).unwrap().clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.params_digest, b.params_digest);
    assert_eq!(a.entries.len(), 6);
    assert!(a.to_csv().starts_with("step,lr,loss\n1,"));

    let other = {
        let mut t = Trainer::<f32>::from_seed(small(), TrainConfig { seed: 12, ..config.clone() }, None, d.len()).unwrap();
        t.run_to_end(&d).unwrap().clone()
    };
    assert_ne!(a.params_digest, other.params_digest);
}

#[test]
fn mask_counts_are_recorded_per_image() {
    let d = data(2, 4);
    let config = TrainConfig {
        steps: Some(3),
        batch_size: 4,
        mask_ratio: 0.3,
        ..TrainConfig::default()
    };
    let mut t = Trainer::<f32>::from_seed(small(), config, None, d.len()).unwrap();
    t.run(&d, 3).unwrap();
    assert_eq!(t.mask_counts, vec![4; 12]);
}

#[test]
fn toy_classifier_separates_two_classes() {
    let d = data(2, 16);
    let model = ViTConfig { target_dim: 2, ..small() };
    let run = pretrain_teacher_toy(&d, &model, &ClassifierConfig { steps: 150, ..ClassifierConfig::default() }).unwrap();
    assert!(run.train_accuracy >= 0.99, "train accuracy {}", run.train_accuracy);
    assert!(run.losses.last().unwrap() < run.losses.first().unwrap());
}

#[test]
fn reloaded_teacher_gives_identical_targets_and_stays_frozen() {
    let d = data(2, 8);
    let teacher_model = ViTConfig { target_dim: 2, ..small() };
    let run = pretrain_teacher_toy(&d, &teacher_model, &ClassifierConfig { steps: 60, ..ClassifierConfig::default() })
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.mimd");
    let ck = Checkpoint::new(&run.params, None, &ExperimentConfig::default(), &teacher_model, 0, 60).unwrap();
    save_checkpoint(&path, &ck).unwrap();

    let (params, cfg) = load_teacher::<f32>(&path, &small()).unwrap();
    let before = Teacher::frozen(run.params.clone(), teacher_model.clone(), TargetLayers::Last, &small()).unwrap();
    let after = Teacher::frozen(params.clone(), cfg.clone(), TargetLayers::Last, &small()).unwrap();
    let seqs: Vec<_> = d.images.iter().map(|im| patchify(im, 4).unwrap()).collect();
    for (a, b) in before.targets(&seqs).unwrap().iter().zip(after.targets(&seqs).unwrap()) {
        assert!(a.bit_eq(&b));
    }

    let acc_before = accuracy(&classify(&params, &cfg, &d.images).unwrap(), &d.labels);
    let config = TrainConfig {
        steps: Some(5),
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::from_seed(small(), config, Some((params, cfg.clone())), d.len()).unwrap();
    trainer.run_to_end(&d).unwrap();
    let frozen = trainer.teacher.params().unwrap();
    assert_eq!(accuracy(&classify(frozen, &cfg, &d.images).unwrap(), &d.labels), acc_before);
}
