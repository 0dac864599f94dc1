use radiogan::data::{generate_synthetic_corpus, Corpus, SyntheticCorpusConfig};
use radiogan::model::{Discriminators, ModelConfig};
use radiogan::rng::stream;
use radiogan::training::*;
use radiogan::Error;
use radiogan_tensor::Tensor;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        gene_dim: 8,
        code_dim: 8,
        noise_dim: 4,
        mapping_hidden: 8,
        image_size: 32,
        channels: vec![4, 8],
        head_channels: 4,
        disc_channels: vec![4, 8],
        ..ModelConfig::default()
    }
}

fn tiny_corpus(n_subjects: usize) -> Corpus {
    generate_synthetic_corpus(&SyntheticCorpusConfig {
        n_subjects,
        gene_dim: 8,
        image_size: 32,
        slices_per_subject: 2,
        backgrounds_per_subject: 2,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_cfg() -> TrainingConfig {
    TrainingConfig { batch_size: 4, steps: 6, checkpoint_every: 3, seed: 9, ..Default::default() }
}

fn zero_heads(d: &mut Discriminators<f32>) {
    let names: Vec<String> = d
        .params
        .iter()
        .map(|(_, n, _)| n.to_string())
        .filter(|n| Discriminators::<f32>::HEADS.iter().any(|h| n.starts_with(h)))
        .collect();
    for n in names {
        let shape = d.params.by_name(&n).unwrap().shape().to_vec();
        d.params.assign(&n, Tensor::zeros(&shape)).unwrap();
    }
}

fn params_equal(a: &TrainState, b: &TrainState) -> bool {
    a.generator.params == b.generator.params
        && a.generator.buffers == b.generator.buffers
        && a.discriminators.params == b.discriminators.params
        && a.discriminators.buffers == b.discriminators.buffers
        && a.opt_generator == b.opt_generator
        && a.opt_discriminator == b.opt_discriminator
}

#[test]
fn zero_discriminators_give_generator_loss_three() {
    let corpus = tiny_corpus(3);
    let cfg = TrainingConfig { lambda: 0.0, ..tiny_cfg() };
    let mut state = TrainState::new(tiny_model(), &cfg).unwrap();
    zero_heads(&mut state.discriminators);
    let batch = batch_for_step(&corpus, &cfg, 4, 0).unwrap();
    let (l_g, _) = generator_objective(&state, &cfg, &batch).unwrap();
    assert_eq!(l_g, 3.0);
}

#[test]
fn replayed_step_is_bit_identical() {
    let corpus = tiny_corpus(3);
    let cfg = tiny_cfg();
    let start = TrainState::new(tiny_model(), &cfg).unwrap();
    let batch = batch_for_step(&corpus, &cfg, 4, 0).unwrap();
    let (mut a, mut b) = (start.clone(), start);
    let ma = train_step(&mut a, &cfg, &batch).unwrap();
    let mb = train_step(&mut b, &cfg, &batch).unwrap();
    assert_eq!(ma, mb);
    assert!(params_equal(&a, &b));
    assert_eq!(a.step, 1);
}

#[test]
fn checkpoint_roundtrip_then_step_matches() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(3);
    let cfg = tiny_cfg();
    let mut state = TrainState::new(tiny_model(), &cfg).unwrap();
    train_step(&mut state, &cfg, &batch_for_step(&corpus, &cfg, 4, 0).unwrap()).unwrap();
    let path = dir.path().join("ck.safetensors");
    save_checkpoint(&path, &state, &cfg, None).unwrap();
    let (mut loaded, info) = load_checkpoint(&path).unwrap();
    assert_eq!(info.step, 1);
    assert_eq!(info.training, cfg);
    assert!(params_equal(&state, &loaded));
    let batch = batch_for_step(&corpus, &cfg, 4, 1).unwrap();
    let m1 = train_step(&mut state, &cfg, &batch).unwrap();
    let m2 = train_step(&mut loaded, &cfg, &batch).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn architecture_mismatch_is_hard_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let mut state = TrainState::new(tiny_model(), &cfg).unwrap();
    state.generator.config.channels = vec![4, 16];
    let path = dir.path().join("bad.safetensors");
    save_checkpoint(&path, &state, &cfg, None).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("architecture mismatch")), "{err}");

    let good = dir.path().join("good.safetensors");
    save_checkpoint(&good, &TrainState::new(tiny_model(), &cfg).unwrap(), &cfg, None).unwrap();
    assert!(matches!(load_generator(&good, Some(9)), Err(Error::Dimension { .. })));
    assert!(load_generator(&good, Some(8)).is_ok());
}

#[test]
fn zero_steps_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(3);
    let cfg = TrainingConfig { steps: 0, ..tiny_cfg() };
    let r = fit(&cfg, &corpus, Start::Fresh(tiny_model()), dir.path(), None).unwrap();
    assert_eq!(r.steps_run, 0);
    assert!(read_metrics(&r.metrics).unwrap().is_empty());
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.iter().filter(|f| f.to_string_lossy().ends_with(".safetensors")).count(), 1);
    assert_eq!(read_checkpoint_info(&r.final_checkpoint).unwrap().step, 0);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let corpus = tiny_corpus(3);
    let cfg = tiny_cfg();
    let full = tempfile::tempdir().unwrap();
    let r = fit(&cfg, &corpus, Start::Fresh(tiny_model()), full.path(), None).unwrap();
    let rows = read_metrics(&r.metrics).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);

    let resumed = tempfile::tempdir().unwrap();
    let ck = full.path().join("checkpoint_000003.safetensors");
    let r2 = fit(&cfg, &corpus, Start::Resume(&ck), resumed.path(), None).unwrap();
    assert_eq!(r2.steps_run, 3);
    let tail = read_metrics(&r2.metrics).unwrap();
    let a: Vec<_> = rows[3..].iter().map(MetricRow::losses).collect();
    let b: Vec<_> = tail.iter().map(MetricRow::losses).collect();
    assert_eq!(a, b);

    // resuming inside the original directory rewrites the log without gaps
    fit(&cfg, &corpus, Start::Resume(&ck), full.path(), None).unwrap();
    let again = read_metrics(&full.path().join(METRICS_FILE)).unwrap();
    assert_eq!(again.iter().map(MetricRow::losses).collect::<Vec<_>>(), rows.iter().map(MetricRow::losses).collect::<Vec<_>>());
}

#[test]
fn resume_with_other_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(3);
    let cfg = TrainingConfig { steps: 1, ..tiny_cfg() };
    let r = fit(&cfg, &corpus, Start::Fresh(tiny_model()), dir.path(), None).unwrap();
    let other = TrainingConfig { seed: cfg.seed + 1, ..cfg };
    assert!(matches!(fit(&other, &corpus, Start::Resume(&r.final_checkpoint), dir.path(), None), Err(Error::Config(_))));
}

#[test]
fn generator_update_reduces_masked_l1() {
    let corpus = tiny_corpus(3);
    let cfg = TrainingConfig { lambda: 1000.0, lr_generator: 1e-5, ..tiny_cfg() };
    let mut state = TrainState::new(tiny_model(), &cfg).unwrap();
    let batch = batch_for_step(&corpus, &cfg, 4, 0).unwrap();
    let (_, before) = generator_update(&mut state, &cfg, &batch).unwrap();
    let (_, after) = generator_objective(&state, &cfg, &batch).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn non_finite_loss_names_term() {
    let corpus = tiny_corpus(3);
    let cfg = tiny_cfg();
    let mut state = TrainState::new(tiny_model(), &cfg).unwrap();
    let shape = state.discriminators.params.by_name("d_i.head.bias").unwrap().shape().to_vec();
    state.discriminators.params.assign("d_i.head.bias", Tensor::full(&shape, f32::NAN)).unwrap();
    let err = train_step(&mut state, &cfg, &batch_for_step(&corpus, &cfg, 4, 0).unwrap()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { ref term } if term == "L_D_I"), "{err}");
}

#[test]
fn mismatch_subjects_are_uniform() {
    let corpus = tiny_corpus(5);
    let mut rng = stream(1, 0, 0);
    let n = corpus.n_subjects();
    let mut counts = vec![vec![0usize; n]; n];
    let mut per_anchor = vec![0usize; n];
    let idx = sample_batch(&corpus, 10_000, 1, &mut rng).unwrap();
    for (s, g) in idx.samples.iter().zip(&idx.wrong_gene_subjects) {
        let own = corpus.samples[*s].subject;
        assert_ne!(own, *g);
        counts[own][*g] += 1;
        per_anchor[own] += 1;
    }
    for own in 0..n {
        let total = per_anchor[own] as f64;
        let p = 1.0 / (n - 1) as f64;
        let sd = (total * p * (1.0 - p)).sqrt();
        for g in (0..n).filter(|&g| g != own) {
            assert!((counts[own][g] as f64 - total * p).abs() < 5.0 * sd, "anchor {own} -> {g}: {}", counts[own][g]);
        }
    }
}

#[test]
fn first_hundred_default_steps_are_finite() {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusConfig::default()).unwrap();
    let cfg = TrainingConfig::default();
    let mut state = TrainState::new(ModelConfig::default(), &cfg).unwrap();
    for step in 0..100 {
        let m = train_step(&mut state, &cfg, &batch_for_step(&corpus, &cfg, 32, step).unwrap()).unwrap();
        assert!([m.l_d_i, m.l_d_is, m.l_d_isg, m.l_g, m.masked_l1].iter().all(|v| v.is_finite()));
    }
}
