use fluidlab::datagen::{decode_sequence, generate_sequence, read_pgm, read_sequence, write_pgm, write_sequence, SceneConfig};
use fluidlab::model::ModelConfig;
use fluidlab::training::checkpoint::Checkpoint;
use fluidlab::training::loss::LossWeights;
use fluidlab::training::optim::OptimConfig;
use fluidlab::training::trainer::{TrainConfig, Trainer};
use fluidlab::FluidError;

#[test]
fn sequence_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig { n_frames: 6, seed: 9, ..SceneConfig::default() };
    let frames = generate_sequence(&cfg).unwrap();
    let path = dir.path().join("s.fwsq");
    write_sequence(&frames, (1, cfg.height, cfg.width), &path).unwrap();
    let back = read_sequence(&path).unwrap();
    assert_eq!(back.len(), 6);
    for (a, b) in frames.iter().zip(&back) {
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - f64::from(*y)).abs() < 1e-7);
        }
    }
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(decode_sequence(&bytes), Err(FluidError::Parse { .. })));
}

#[test]
fn pgm_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let frame = generate_sequence(&SceneConfig { n_frames: 1, ..SceneConfig::default() }).unwrap().remove(0);
    let path = dir.path().join("f.pgm");
    write_pgm(&frame, &path).unwrap();
    let back = read_pgm(&path).unwrap();
    assert_eq!(back.shape(), frame.shape());
    for (x, y) in frame.values().iter().zip(back.values()) {
        assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn checkpoint_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig { latent_dim: 8, ..ModelConfig::desk() };
    let train = TrainConfig { steps: 2, batch: 2, window: 2, frame_size: 8, sequence_windows: 2, ..TrainConfig::default() };
    let mut t = Trainer::new(model, OptimConfig::desk(), LossWeights::default(), train).unwrap();
    t.run(|_| {}).unwrap();
    let path = dir.path().join("c.fwck");
    t.checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.params, t.params);
    assert_eq!(ck.state, t.opt);
    assert_eq!(ck.train.as_ref(), Some(&t.train));
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(FluidError::Io(_))));
}
