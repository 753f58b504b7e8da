use hpn_autograd::Tape;
use hpn_core::model::{DecodeMode, ModelConfig};
use hpn_core::trainer::{
    read_metrics, should_refresh, train, Outputs, PolicyRollout, TrainConfig, Trainer, METRICS_HEADER,
};
use hpn_core::tsp::generate_uniform;

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        steps_per_epoch: 3,
        batch_size: 8,
        n_cities: 6,
        model: ModelConfig::tiny(8),
        eval_instances: 32,
        seed: 99,
        ..TrainConfig::smoke()
    }
}

#[test]
fn refresh_follows_the_t_test() {
    let base = [5.0, 6.0, 7.0, 8.0];
    assert_eq!(should_refresh(&base, &base, 0.05).unwrap().0, false);
    let better = [4.0, 5.0, 6.0, 7.0];
    assert!(should_refresh(&better, &base, 0.05).unwrap().0);
    let worse = [6.0, 7.0, 8.0, 9.0];
    assert!(!should_refresh(&worse, &base, 0.9999).unwrap().0);
    let mixed = [4.9, 6.05, 6.8, 7.9];
    let (r, p) = should_refresh(&mixed, &base, 0.9999).unwrap();
    assert!(r && p < 0.5);
    assert!(!should_refresh(&mixed, &base, p).unwrap().0);
}

#[test]
fn same_seed_same_metrics() {
    let (a_model, a) = train(cfg(2)).unwrap();
    let (b_model, b) = train(cfg(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a_model.params().tensors(), b_model.params().tensors());
    assert_eq!(a.len(), 2);
}

#[test]
fn resume_reproduces_the_next_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("run.ckpt");
    let metrics = dir.path().join("metrics.csv");
    let full = train(cfg(3)).unwrap().1;

    let mut first = Trainer::new(cfg(3)).unwrap();
    first.run_epoch().unwrap();
    first.save_checkpoint(&ckpt).unwrap();
    drop(first);

    let mut resumed = Trainer::resume(&ckpt).unwrap();
    assert_eq!(resumed.epoch(), 1);
    let out = Outputs {
        metrics: Some(metrics.clone()),
        checkpoint: Some(ckpt.clone()),
    };
    let rest = resumed.fit(&out).unwrap();
    assert_eq!(rest, full[1..].to_vec());

    let text = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    let rows = read_metrics(&metrics).unwrap();
    assert_eq!(rows.len(), 2);
    for (r, m) in rows.iter().zip(&rest) {
        assert_eq!(r.epoch, m.epoch);
        assert_eq!(r.mean_greedy_len, m.mean_greedy_len);
        assert_eq!(r.lr, m.lr);
    }
    assert_eq!(Trainer::resume(&ckpt).unwrap().epoch(), 3);
}

#[test]
fn learning_rate_decays_per_epoch() {
    let c = TrainConfig {
        lr_decay: 0.5,
        ..cfg(3)
    };
    let m = train(c).unwrap().1;
    let lrs: Vec<f64> = m.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, vec![1e-3, 5e-4, 2.5e-4]);
}

#[test]
fn zero_advantage_steps_leave_parameters_bit_identical() {
    let c = TrainConfig {
        policy_rollout: PolicyRollout::Greedy,
        ..cfg(1)
    };
    let mut t = Trainer::new(c).unwrap();
    let before = t.policy().params().clone();
    for i in 0..3 {
        assert_eq!(t.train_step(i).unwrap().mean_advantage, 0.0);
    }
    for (a, b) in before.tensors().iter().zip(t.policy().params().tensors()) {
        let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.data()), bits(b.data()));
    }
}

#[test]
fn baseline_only_changes_on_refresh() {
    let c = TrainConfig {
        significance: 0.9999,
        ..cfg(3)
    };
    let mut t = Trainer::new(c).unwrap();
    for _ in 0..3 {
        let before = t.baseline().params().clone();
        let m = t.run_epoch().unwrap();
        let same = before.tensors() == t.baseline().params().tensors();
        assert_eq!(same, !m.baseline_refreshed);
        if m.baseline_refreshed {
            assert_eq!(t.baseline().params().tensors(), t.policy().params().tensors());
        }
    }
}

#[test]
fn baseline_rollouts_record_nothing() {
    let t = Trainer::new(cfg(1)).unwrap();
    let inst = &generate_uniform(6, 1, 5)[0];
    let mut tape = Tape::no_grad();
    t.baseline().rollout(&mut tape, inst, DecodeMode::Greedy).unwrap();
    assert_eq!(tape.recorded_ops(), 0);
    let mut rec = Tape::new();
    t.policy().rollout(&mut rec, inst, DecodeMode::Greedy).unwrap();
    assert!(rec.recorded_ops() > 0);
}

#[test]
fn config_round_trips_through_toml() {
    let c = TrainConfig::smoke();
    let text = toml::to_string(&c).unwrap();
    let back: TrainConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, c);
    let bad = text.replace("batch_size = 64", "batch_size = 1");
    let parsed: TrainConfig = toml::from_str(&bad).unwrap();
    assert!(parsed.validate().unwrap_err().to_string().contains("t-test"));
}
