use std::ops::ControlFlow;

use hiproto::corpus::{synth_waveforms, Recordings, ToyShape};
use hiproto::encoder::{EncoderConfig, EncoderParams};
use hiproto::trainer::{
    fit, fit_with, plan_episode, sample_episode, train_step, AdamConfig, BatchConfig, EpisodeSpec, LossSpec,
    OptState, RunConfig,
};
use hiproto::TaxonomyTree;

fn toy(per_class: usize) -> (TaxonomyTree, Recordings) {
    let (tree, items) = synth_waveforms(ToyShape::default(), per_class, 3).unwrap();
    (tree, Recordings::new(items))
}

fn small_spec() -> EpisodeSpec {
    EpisodeSpec {
        ways: 4,
        shots: 2,
        queries: 2,
        ..Default::default()
    }
}

#[test]
fn configuration_frequencies() {
    let (tree, recs) = toy(10);
    let spec = EpisodeSpec {
        ways: 6,
        ..Default::default()
    };
    let mut counts = [0usize; 3];
    let draws = 10_000;
    for s in 0..draws {
        let plan = plan_episode(&recs, &tree, &spec, s).unwrap();
        counts[BatchConfig::ALL.iter().position(|c| *c == plan.config).unwrap()] += 1;
    }
    for (c, target) in counts.iter().zip([0.6, 0.2, 0.2]) {
        let f = *c as f64 / draws as f64;
        assert!((f - target).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn overfits_one_repeated_episode() {
    let (tree, recs) = toy(4);
    let episode = sample_episode(&recs, &tree, &small_spec(), None, 17).unwrap();
    let mut params = EncoderParams::init(&EncoderConfig::test_config(), 1).unwrap();
    let adam = AdamConfig {
        learning_rate: 1e-2,
        ..Default::default()
    };
    let mut opt = OptState::new(&params, adam).unwrap();
    let mut losses = Vec::new();
    for _ in 0..50 {
        let (p, o, m) = train_step(&params, &opt, &episode, &tree, LossSpec::default()).unwrap();
        params = p;
        opt = o;
        losses.push(m.loss);
    }
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.5 * head, "{losses:?}");
}

#[test]
fn zero_learning_rate_keeps_params() {
    let (tree, recs) = toy(4);
    let episode = sample_episode(&recs, &tree, &small_spec(), None, 2).unwrap();
    let cfg = EncoderConfig {
        angular: true,
        ..EncoderConfig::test_config()
    };
    let params = EncoderParams::init(&cfg, 1).unwrap();
    let adam = AdamConfig {
        learning_rate: 0.0,
        ..Default::default()
    };
    let opt = OptState::new(&params, adam).unwrap();
    let (p, o, _) = train_step(&params, &opt, &episode, &tree, LossSpec::Flat).unwrap();
    assert_eq!(p, params);
    assert_eq!(o.step, 1);
}

#[test]
fn one_epoch_is_one_hundred_steps_and_replays() {
    let (tree, recs) = toy(4);
    let spec = EpisodeSpec {
        epochs: 1,
        ..small_spec()
    };
    let mut run = RunConfig::new(11);
    run.augment = None;
    let dir = tempfile::tempdir().unwrap();
    run.out_dir = Some(dir.path().to_path_buf());
    run.checkpoint_every = 1;
    let cfg = EncoderConfig::test_config();
    let (p1, log1) = fit(&recs, &tree, &cfg, &spec, LossSpec::default(), &run).unwrap();
    assert_eq!(log1.steps, 100);
    assert_eq!(log1.epochs.len(), 1);
    let tsv = std::fs::read_to_string(dir.path().join("train_log.tsv")).unwrap();
    assert_eq!(tsv, log1.to_tsv());
    assert!(tsv.starts_with("epoch\tloss\tacc_L1\tacc_L2\tacc_L3\n1\t"));
    assert!(dir.path().join("checkpoint_0001.hpw").exists());

    run.out_dir = None;
    let (p2, log2) = fit(&recs, &tree, &cfg, &spec, LossSpec::default(), &run).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(log1, log2);
}

#[test]
fn resuming_matches_uninterrupted_run() {
    let (tree, recs) = toy(4);
    let spec = EpisodeSpec {
        epochs: 2,
        episodes_per_epoch: 5,
        ..small_spec()
    };
    let mut run = RunConfig::new(4);
    run.augment = None;
    let cfg = EncoderConfig::test_config();
    let (full, _) = fit(&recs, &tree, &cfg, &spec, LossSpec::Flat, &run).unwrap();

    let p = EncoderParams::init(&cfg, hiproto::seed::derive_seed(4, 0)).unwrap();
    let o = OptState::new(&p, run.adam).unwrap();
    let first = EpisodeSpec { epochs: 1, ..spec.clone() };
    let (p, o, _) = fit_with(p, o, &recs, &tree, &first, LossSpec::Flat, &run, |_, _| ControlFlow::Continue(())).unwrap();
    let (resumed, _, _) =
        fit_with(p, o, &recs, &tree, &first, LossSpec::Flat, &run, |_, _| ControlFlow::Continue(())).unwrap();
    assert_eq!(resumed, full);
}
