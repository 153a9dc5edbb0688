use matnet::config::RunConfig;
use matnet::model::{MatNet, ModelConfig};
use matnet::synthdata::{boundary_gt, gen_sequence, ObjectSpec, Sample, SceneSpec};
use matnet::trainer::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_clip() -> Vec<Sample> {
    let spec = SceneSpec {
        height: 16,
        width: 16,
        num_frames: 3,
        object: ObjectSpec {
            size: 4.0,
            ..SceneSpec::default().object
        },
        hem_radius: 2,
        ..SceneSpec::default()
    };
    gen_sequence(&spec).unwrap()
}

fn config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        lr_encoder_bridge: 0.05,
        lr_decoder: 0.05,
        batch_size: 2,
        hem_radius: 2,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn run(cfg: &TrainConfig, path: Option<std::path::PathBuf>) -> (MatNet, Vec<LossRecord>) {
    let mut net = MatNet::new(ModelConfig::micro(), 4).unwrap();
    let options = TrainOptions {
        checkpoint: path,
        config_echo: "seed=4\n".into(),
    };
    let trace = train(&small_clip(), &mut net, cfg, &options, |_| {}).unwrap();
    (net, trace)
}

#[test]
fn trace_has_one_record_per_iteration() {
    let (_, trace) = run(&config(5), None);
    assert_eq!(trace.iter().map(|r| r.iteration).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
    for r in &trace {
        assert!((r.total - (r.ce + r.boundary)).abs() < 1e-12);
        assert!(r.total > 0.0);
    }
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let (_, ta) = run(&config(4), Some(a.clone()));
    let (_, tb) = run(&config(4), Some(b.clone()));
    assert_eq!(ta, tb);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn different_seeds_diverge() {
    let (a, _) = run(&config(3), None);
    let (b, _) = run(
        &TrainConfig {
            seed: 9,
            ..config(3)
        },
        None,
    );
    assert_ne!(a.store.entries()[0].tensor, b.store.entries()[0].tensor);
}

#[test]
fn checkpoint_restores_trained_weights() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let (net, _) = run(&config(3), Some(path.clone()));
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.iteration, 3);
    assert_eq!(ck.config, "seed=4\n");
    let mut fresh = MatNet::new(ModelConfig::micro(), 99).unwrap();
    ck.restore(&mut fresh.store).unwrap();
    for (a, b) in net.store.entries().iter().zip(fresh.store.entries()) {
        assert_eq!(a.tensor, b.tensor, "{}", a.name);
    }
    let s = &small_clip()[0];
    assert_eq!(net.predict(&s.frame, &s.flow_image()).unwrap(), fresh.predict(&s.frame, &s.flow_image()).unwrap());
}

#[test]
fn checkpoint_into_wrong_architecture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    run(&config(1), Some(path.clone()));
    let mut other = MatNet::new(ModelConfig::default(), 0).unwrap();
    assert!(Checkpoint::load(&path).unwrap().restore(&mut other.store).is_err());
}

#[test]
fn loss_falls_on_a_fixed_clip() {
    let cfg = TrainConfig {
        hflip: false,
        max_rotation_deg: 0.0,
        ..config(40)
    };
    let (_, trace) = run(&cfg, None);
    let head: f64 = trace[..5].iter().map(|r| r.total).sum();
    let tail: f64 = trace[35..].iter().map(|r| r.total).sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn trace_csv_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let (_, trace) = run(&config(2), None);
    write_trace(&path, &trace).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "iteration,total,ce,boundary");
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1].split(',').nth(1).unwrap().parse::<f64>().unwrap(), trace[0].total);
}

#[test]
fn invalid_settings_are_rejected() {
    let mut net = MatNet::new(ModelConfig::micro(), 0).unwrap();
    let bad = [
        TrainConfig { lr_decoder: 0.0, ..config(1) },
        TrainConfig { momentum: 1.0, ..config(1) },
        TrainConfig { batch_size: 0, ..config(1) },
        TrainConfig { max_rotation_deg: 200.0, ..config(1) },
    ];
    for cfg in &bad {
        assert!(train(&small_clip(), &mut net, cfg, &TrainOptions::default(), |_| {}).is_err(), "{cfg:?}");
    }
    assert!(train(&[], &mut net, &config(1), &TrainOptions::default(), |_| {}).is_err());
}

#[test]
fn augmentation_keeps_targets_consistent() {
    let s = &small_clip()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let a = augment(s, true, 10.0, 2, &mut rng).unwrap();
        assert_eq!(a.boundary, boundary_gt(&a.mask));
        assert_eq!(a.frame.shape(), s.frame.shape());
        assert_eq!(a.flow.shape(), s.flow.shape());
        assert!(a.hem.weights.data().iter().all(|v| (1.0..=2.0).contains(v)));
        assert!(a.frame.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn horizontal_flip_mirrors_mask_and_negates_dx() {
    let s = &small_clip()[0];
    let (h, w) = (s.height(), s.width());
    let map = SpatialMap {
        flip: true,
        ..SpatialMap::identity(h, w)
    };
    let a = map.warp_sample(s, 2).unwrap();
    for y in 0..h {
        for x in 0..w {
            assert_eq!(a.mask.get(y, x), s.mask.get(y, w - 1 - x));
            let (i, j) = (y * w + x, y * w + w - 1 - x);
            assert!((a.flow.data()[i] + s.flow.data()[j]).abs() < 1e-12);
            assert!((a.flow.data()[h * w + i] - s.flow.data()[h * w + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn run_config_round_trips_through_text() {
    let mut cfg = RunConfig::default();
    cfg.set("seed", "17").unwrap();
    assert_eq!(cfg.train.seed, 17);
    cfg.model = ModelConfig::micro();
    cfg.train.iterations = 33;
    cfg.tolerance = Some(2);
    assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    let clips = cfg.clips();
    assert_eq!(clips.len(), cfg.data.train_clips + cfg.data.eval_clips);
    assert_eq!(clips, RunConfig::parse(&cfg.render()).unwrap().clips());
}
