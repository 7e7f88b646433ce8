use fpl_core::backbone::{generate_synthetic_backbone, Backbone, SyntheticSpec};
use fpl_core::experiment::upload_ratio_preset;
use fpl_core::federation::{
    aggregate, local_train, run, select_clients, sgd_batch, ClientUpdate, FederationConfig, Mode, RoundEvent, Shard,
    Weighting, METRICS_COLUMNS,
};
use fpl_core::partition::{partition, stratified_split, PartitionSpec, Regime};
use fpl_core::prompt::{PromptLearner, PromptVectors};
use fpl_core::rng::{derive_seed, tag};
use fpl_core::trainer::{build_trainer, TrainerKind};
use fpl_core::Tensor;
use proptest::prelude::*;

fn synthetic(classes: usize, width: usize, per_class: usize, noise: f32, seed: u64) -> Backbone {
    let spec = SyntheticSpec::new(classes, width, 1, seed, per_class, noise);
    generate_synthetic_backbone(&spec).unwrap().0
}

/// Train rows partitioned over `n` clients and held-out test rows, both as backbone row indices.
fn split(bb: &Backbone, n: usize, regime: Regime, seed: u64) -> (PartitionSpec, Vec<usize>) {
    let labels = bb.images().labels();
    let (train, test) = stratified_split(labels, bb.classes(), 0.5, seed).unwrap();
    let train_labels: Vec<u32> = train.iter().map(|&i| labels[i]).collect();
    let mut spec = partition(&train_labels, bb.classes(), regime, n, None, seed).unwrap();
    for rows in &mut spec.assignment {
        *rows = rows.iter().map(|&i| train[i]).collect();
    }
    (spec, test)
}

fn config(n: usize, rounds: usize, trainer: TrainerKind, mode: Mode) -> FederationConfig {
    let mut cfg = FederationConfig::new(n, rounds, 11);
    cfg.trainer = trainer;
    cfg.mode = mode;
    cfg.lr = 0.3;
    cfg.local_batch = 8;
    cfg.prompt_len = 4;
    cfg.temperature = Some(0.05);
    cfg
}

#[test]
fn one_client_fedsgd_matches_centralized_sgd() {
    let bb = synthetic(5, 16, 12, 0.05, 1);
    let (spec, test) = split(&bb, 1, Regime::Iid, 1);
    let cfg = config(1, 50, TrainerKind::PromptFl, Mode::FedSgd);
    let out = run(&cfg, &bb, &spec, &test).unwrap();

    let learner = PromptLearner::new(&bb, 0.05).unwrap();
    let shard = Shard::from_rows(&bb, &spec.assignment[0]).unwrap();
    let seed = derive_seed(cfg.seed, &[tag("init")]);
    let mut prompt = PromptVectors::init(4, 16, seed).unwrap().into_tensor();
    for t in 1..=50 {
        let idx = sgd_batch(shard.len(), 8, cfg.seed, t, 0);
        let x = shard.features.gather_rows(&idx).unwrap();
        let y: Vec<u32> = idx.iter().map(|&i| shard.labels[i]).collect();
        let (_, g) = learner.loss_and_grad(&PromptVectors::new(prompt.clone()).unwrap(), &x, &y).unwrap();
        prompt.scaled_add(-0.3, &g).unwrap();
    }
    let worst = prompt.data().iter().zip(out.state.theta.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(worst <= 1e-7, "max deviation {worst}");
}

#[test]
fn full_batch_single_epoch_delta_is_a_scaled_gradient() {
    let bb = synthetic(4, 8, 6, 0.05, 2);
    let rows: Vec<usize> = (0..bb.images().len()).collect();
    let shard = Shard::from_rows(&bb, &rows).unwrap();
    let setup = build_trainer(TrainerKind::PromptFl, &bb, 2, 0.5, 3).unwrap();
    let mut cfg = config(1, 1, TrainerKind::PromptFl, Mode::FedAvg);
    cfg.local_batch = shard.len();
    cfg.lr = 0.1;
    let (update, _) = local_train(setup.objective.as_ref(), &shard, &setup.initial, &cfg, 0, 1).unwrap();
    let (_, g) = setup.objective.loss_and_grad(&setup.initial, &shard.features, &shard.labels).unwrap();
    for (d, gi) in update.payload.data().iter().zip(g.data()) {
        assert!((d + 0.1 * gi).abs() <= 1e-6 * (1.0 + gi.abs()), "{d} vs {}", -0.1 * gi);
    }

    cfg.lr = 0.0;
    let (update, _) = local_train(setup.objective.as_ref(), &shard, &setup.initial, &cfg, 0, 1).unwrap();
    assert!(update.payload.data().iter().all(|&v| v == 0.0));
}

#[test]
fn fedsgd_payload_is_the_batch_gradient() {
    let bb = synthetic(4, 8, 6, 0.05, 4);
    let rows: Vec<usize> = (0..bb.images().len()).collect();
    let shard = Shard::from_rows(&bb, &rows).unwrap();
    let setup = build_trainer(TrainerKind::PromptFl, &bb, 3, 0.5, 5).unwrap();
    let cfg = config(4, 1, TrainerKind::PromptFl, Mode::FedSgd);
    let (update, stats) = local_train(setup.objective.as_ref(), &shard, &setup.initial, &cfg, 2, 7).unwrap();
    let idx = sgd_batch(shard.len(), 8, cfg.seed, 7, 2);
    assert_eq!(idx.len(), 8);
    let x = shard.features.gather_rows(&idx).unwrap();
    let y: Vec<u32> = idx.iter().map(|&i| shard.labels[i]).collect();
    let (loss, g) = setup.objective.loss_and_grad(&setup.initial, &x, &y).unwrap();
    assert_eq!(update.payload, g);
    assert_eq!(stats.loss, loss);
    assert_eq!(update.payload.shape(), &[3, 8]);
    assert_eq!(update.payload_bytes, 3 * 8 * 4);
    assert_eq!(update.sample_count, shard.len());
}

#[test]
fn zero_rounds_leave_theta_at_its_initial_value() {
    let bb = synthetic(4, 8, 6, 0.05, 6);
    let (spec, test) = split(&bb, 2, Regime::Iid, 6);
    let cfg = config(2, 0, TrainerKind::PromptFl, Mode::FedAvg);
    let out = run(&cfg, &bb, &spec, &test).unwrap();
    let initial =
        build_trainer(TrainerKind::PromptFl, &bb, 4, 0.05, derive_seed(cfg.seed, &[tag("init")])).unwrap().initial;
    assert!(out.rows.is_empty());
    assert_eq!(out.state.theta, initial);
    assert_eq!(out.state.round, 0);
    let csv = String::from_utf8(out.metrics_csv().unwrap()).unwrap();
    assert_eq!(csv.trim_end(), METRICS_COLUMNS.join(","));
    assert_eq!(out.cost.upload_bytes, 0);
    assert_eq!(out.cost.download_bytes, out.predicted_cost.download_bytes);
}

#[test]
fn runs_are_reproducible() {
    let bb = synthetic(6, 8, 10, 0.05, 7);
    let (spec, test) = split(&bb, 3, Regime::ExtremeNonIid, 7);
    for trainer in [TrainerKind::PromptFl, TrainerKind::Finetune, TrainerKind::Scratch] {
        let mut cfg = config(3, 4, trainer, Mode::FedAvg);
        cfg.clients_per_round = Some(2);
        let a = run(&cfg, &bb, &spec, &test).unwrap();
        let b = run(&cfg, &bb, &spec, &test).unwrap();
        assert_eq!(a.metrics_csv().unwrap(), b.metrics_csv().unwrap());
        assert_eq!(a.events_jsonl().unwrap(), b.events_jsonl().unwrap());
        assert_eq!(a.state.theta, b.state.theta);
        cfg.seed += 1;
        let c = run(&cfg, &bb, &spec, &test).unwrap();
        assert_ne!(a.state.theta, c.state.theta);
    }
}

#[test]
fn client_selection_is_uniform() {
    let (n, m, rounds) = (10usize, 3usize, 10_000usize);
    let mut counts = vec![0usize; n];
    for t in 1..=rounds {
        let s = select_clients(n, m, 42, t).unwrap();
        assert_eq!(s.len(), m);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        for c in s {
            counts[c] += 1;
        }
    }
    let p = m as f64 / n as f64;
    let mean = rounds as f64 * p;
    let sigma = (rounds as f64 * p * (1.0 - p)).sqrt();
    for (c, &k) in counts.iter().enumerate() {
        assert!(
            (k as f64 - mean).abs() <= 3.0 * sigma,
            "client {c} selected {k} times, expected {mean} ± {}",
            3.0 * sigma
        );
    }
    assert!(select_clients(3, 4, 0, 1).is_err());
}

#[test]
fn empty_shards_are_skipped_and_dropouts_logged() {
    let bb = synthetic(4, 8, 8, 0.05, 8);
    let (mut spec, test) = split(&bb, 3, Regime::Iid, 8);
    spec.assignment[1].clear();
    let mut cfg = config(3, 3, TrainerKind::PromptFl, Mode::FedAvg);
    cfg.dropout = 0.3;
    let out = run(&cfg, &bb, &spec, &test).unwrap();
    let skipped = out.events.iter().filter(|e| matches!(e, RoundEvent::Skipped { client: 1, .. })).count();
    let dropped_1 = out.events.iter().filter(|e| matches!(e, RoundEvent::Dropped { client: 1, .. })).count();
    assert_eq!(skipped + dropped_1, 3);
    assert_eq!(out.rows.len(), 3);

    let mut cfg = config(3, 20, TrainerKind::PromptFl, Mode::FedAvg);
    cfg.dropout = 0.5;
    let out = run(&cfg, &bb, &spec, &test).unwrap();
    assert!(out.events.iter().any(|e| matches!(e, RoundEvent::Dropped { .. })));
    for row in &out.rows {
        let participants = (row.bytes_up_round / (4 * 4 * 8)) as usize;
        let once = if row.round == 1 { out.cost.one_time_download_bytes } else { 0 };
        assert_eq!(row.bytes_down_round, row.bytes_up_round + once);
        assert!(participants <= 2);
    }
}

#[test]
fn a_round_without_updates_fails_and_keeps_theta() {
    let bb = synthetic(4, 8, 4, 0.05, 9);
    let (mut spec, test) = split(&bb, 2, Regime::Iid, 9);
    for rows in &mut spec.assignment {
        rows.clear();
    }
    let cfg = config(2, 2, TrainerKind::PromptFl, Mode::FedAvg);
    let out = run(&cfg, &bb, &spec, &test).unwrap();
    let initial =
        build_trainer(TrainerKind::PromptFl, &bb, 4, 0.05, derive_seed(cfg.seed, &[tag("init")])).unwrap().initial;
    assert_eq!(out.state.theta, initial);
    assert_eq!(out.events.iter().filter(|e| matches!(e, RoundEvent::Failed { .. })).count(), 2);
    assert!(out.rows.iter().all(|r| r.train_loss.is_nan() && r.bytes_up_round == 0));
}

#[test]
fn mismatched_partition_is_rejected() {
    let bb = synthetic(4, 8, 4, 0.05, 10);
    let (spec, test) = split(&bb, 2, Regime::Iid, 10);
    let cfg = config(3, 1, TrainerKind::PromptFl, Mode::FedAvg);
    assert!(run(&cfg, &bb, &spec, &test).is_err());
}

#[test]
fn backbone_is_untouched_by_training() {
    let bb = synthetic(4, 8, 8, 0.05, 12);
    let before = bb.checksum();
    let snapshot = bb.clone();
    let (spec, test) = split(&bb, 2, Regime::Iid, 12);
    for trainer in [TrainerKind::PromptFl, TrainerKind::Finetune, TrainerKind::Scratch] {
        for mode in [Mode::FedSgd, Mode::FedAvg] {
            run(&config(2, 3, trainer, mode), &bb, &spec, &test).unwrap();
        }
    }
    assert_eq!(bb.checksum(), before);
    assert_eq!(bb, snapshot);
}

#[test]
fn simulated_bytes_match_the_closed_form() {
    let bb = synthetic(6, 8, 8, 0.05, 13);
    let (spec, test) = split(&bb, 4, Regime::Iid, 13);
    for trainer in [TrainerKind::PromptFl, TrainerKind::Finetune, TrainerKind::Scratch] {
        let mut cfg = config(4, 5, trainer, Mode::FedAvg);
        cfg.clients_per_round = Some(3);
        let out = run(&cfg, &bb, &spec, &test).unwrap();
        assert_eq!(out.rows.last().unwrap().cumulative_bytes, out.predicted_cost.total_bytes());
        assert_eq!(out.cost.download_bytes, out.predicted_cost.download_bytes);
        assert_eq!(out.cost.upload_bytes, out.predicted_cost.upload_bytes);
        assert_eq!(out.cost.train_flops, out.predicted_cost.train_flops);
    }
}

#[test]
fn upload_ratio_equals_parameter_ratio() {
    let (spec, p) = upload_ratio_preset();
    let bb = generate_synthetic_backbone(&spec).unwrap().0;
    let (part, test) = split(&bb, 2, Regime::Iid, 14);
    let mut up = Vec::new();
    for trainer in [TrainerKind::PromptFl, TrainerKind::Finetune] {
        let mut cfg = config(2, 1, trainer, Mode::FedAvg);
        cfg.prompt_len = p;
        up.push(run(&cfg, &bb, &part, &test).unwrap().rows[0].bytes_up_round);
    }
    assert_eq!(up[0], 2 * 4 * 32 * 4);
    assert_eq!(up[1] / up[0], 120);
    assert_eq!(up[1] % up[0], 0);
}

#[test]
fn scratch_learns_noise_free_data() {
    let bb = synthetic(5, 16, 20, 0.0, 15);
    let (spec, test) = split(&bb, 2, Regime::Iid, 15);
    let mut cfg = config(2, 60, TrainerKind::Scratch, Mode::FedAvg);
    cfg.temperature = Some(0.2);
    cfg.lr = 0.1;
    let out = run(&cfg, &bb, &spec, &test).unwrap();
    let best = out.rows.iter().map(|r| r.test_accuracy).fold(0.0, f64::max);
    assert!(best >= 0.9, "best accuracy {best}");
}

#[test]
fn uniform_weighting_ignores_sample_counts() {
    let u = |id, v: f32, n| ClientUpdate {
        client_id: id,
        payload: Tensor::vector(&[v]).unwrap(),
        sample_count: n,
        payload_bytes: 4,
    };
    let theta = Tensor::vector(&[0.0]).unwrap();
    let ups = [u(0, 1.0, 1), u(1, 4.0, 99)];
    assert_eq!(aggregate(&ups, &theta, Mode::FedAvg, 1.0, Weighting::Uniform).unwrap().data(), &[2.5]);
    assert_eq!(aggregate(&ups, &theta, Mode::FedAvg, 1.0, Weighting::SampleCount).unwrap().data(), &[3.97]);
}

fn updates_strategy() -> impl Strategy<Value = Vec<(Vec<f32>, usize)>> {
    prop::collection::vec((prop::collection::vec(-10.0f32..10.0, 4), 1usize..100), 1..8)
}

proptest! {
    #[test]
    fn aggregation_is_order_invariant(raw in updates_strategy(), seed in any::<u64>(), sgd in any::<bool>()) {
        let ups: Vec<ClientUpdate> = raw
            .iter()
            .enumerate()
            .map(|(i, (v, n))| ClientUpdate {
                client_id: i,
                payload: Tensor::vector(v).unwrap(),
                sample_count: *n,
                payload_bytes: 16,
            })
            .collect();
        let mut shuffled = ups.clone();
        let mut rng = fpl_core::rng::stream(seed, &[]);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let theta = Tensor::vector(&[0.5, -0.5, 1.0, 0.0]).unwrap();
        let mode = if sgd { Mode::FedSgd } else { Mode::FedAvg };
        for w in [Weighting::SampleCount, Weighting::Uniform] {
            let a = aggregate(&ups, &theta, mode, 0.1, w).unwrap();
            let b = aggregate(&shuffled, &theta, mode, 0.1, w).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }
}
