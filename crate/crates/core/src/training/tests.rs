use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::agent::{build_list_repr, q_value};
use crate::auxtasks::{clat_loss, pat_loss, rat_loss};
use crate::dataset::run_logging_policy;
use crate::fixtures::{
    check_gradient, jitter_params, random_positive, random_record, tiny_model_config,
};
use crate::mdp::rank_weights;
use crate::simulator::{sigmoid, Simulator};

fn tiny(seed: u64, slots: usize, factors: usize) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::new(tiny_model_config(slots, factors), &mut rng).unwrap()
}

fn mdp(slots: usize, factors: usize, gamma: f64) -> MdpConfig {
    MdpConfig {
        slots,
        num_factors: factors,
        gamma,
        ..MdpConfig::default()
    }
}

/// Records plus their positives; negatives are the other records.
struct Fixture {
    records: Vec<TransitionRecord>,
    positives: Vec<(State, Action)>,
    targets: Vec<f64>,
}

impl Fixture {
    fn new(seed: u64, n: usize, slots: usize, factors: usize) -> Self {
        let config = tiny_model_config(slots, factors);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<TransitionRecord> = (0..n)
            .map(|i| random_record(&mut rng, &config, i as u64, i % 2 == 0))
            .collect();
        let positives = records
            .iter()
            .map(|r| random_positive(&mut rng, &config, r))
            .collect();
        let targets = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
        Self {
            records,
            positives,
            targets,
        }
    }

    fn batch(&self, negatives: usize) -> Batch<'_> {
        let n = self.records.len();
        Batch {
            records: self.records.iter().collect(),
            targets: self.targets.clone(),
            positives: self.positives.iter().cloned().map(Some).collect(),
            negatives: (0..n)
                .map(|i| {
                    (1..=negatives)
                        .map(|j| &self.records[(i + j) % n])
                        .collect()
                })
                .collect(),
        }
    }
}

fn weights(dqn: f64, rat: f64, pat: f64, clat: f64) -> LossWeights {
    LossWeights {
        dqn,
        rat,
        pat,
        clat,
        temperature: 1.0,
    }
}

#[test]
fn td_loss_examples() {
    assert_eq!(td_loss(1.0, 0.9, None, 0.0), 1.0);
    assert_eq!(td_loss(0.7, 0.0, Some(5.0), 0.2), (0.7f64 - 0.2).powi(2));
    assert!((td_loss(0.5, 0.9, Some(1.0), 1.2) - 0.04).abs() < 1e-12);
}

#[test]
fn dqn_loss_uses_the_target_network_max() {
    let (online, target) = (tiny(1, 3, 2), tiny(2, 3, 2));
    let fx = Fixture::new(3, 4, 3, 2);
    let m = mdp(3, 2, 0.9);
    for rec in &fx.records {
        let q = q_value(
            &build_list_repr(&rec.state, &rec.action, &online).unwrap(),
            &online,
        );
        let y = match &rec.next_state {
            None => rec.reward,
            Some(next) => {
                let best = m
                    .feasible_actions(next.ads.len(), next.organics.len())
                    .unwrap()
                    .iter()
                    .map(|a| q_value(&build_list_repr(next, a, &target).unwrap(), &target))
                    .fold(f64::NEG_INFINITY, f64::max);
                rec.reward + 0.9 * best
            }
        };
        let got = dqn_loss(rec, &online, &target, &m).unwrap();
        assert!((got - (y - q).powi(2)).abs() < 1e-10);
        let zero = dqn_loss(rec, &online, &target, &mdp(3, 2, 0.0)).unwrap();
        assert!((zero - (rec.reward - q).powi(2)).abs() < 1e-10);
    }
}

#[test]
fn zero_aux_weights_give_the_mean_dqn_loss() {
    let params = tiny(4, 3, 2);
    let fx = Fixture::new(5, 6, 3, 2);
    let m = mdp(3, 2, 0.9);
    let records: Vec<&TransitionRecord> = fx.records.iter().collect();
    let batch = Batch::plain(records, &params, &m).unwrap();
    let terms = combined_loss(
        &params,
        &batch,
        &weights(1.0, 0.0, 0.0, 0.0),
        &rank_weights(2),
    )
    .unwrap();
    let mean: f64 = fx
        .records
        .iter()
        .map(|r| dqn_loss(r, &params, &params, &m).unwrap())
        .sum::<f64>()
        / 6.0;
    assert!((terms.total - mean).abs() < 1e-12);
    assert_eq!(terms.dqn, terms.total);
    assert_eq!((terms.rat, terms.pat, terms.clat), (0.0, 0.0, 0.0));
}

// Per-term values from the probability-space losses, one record at a time.
fn reference_terms(params: &ModelParams, fx: &Fixture, negatives: usize, beta: &[f64]) -> [f64; 4] {
    let n = fx.records.len();
    let k = params.config.slots;
    let m = params.config.num_factors;
    let e = |s: &State, a: &Action| build_list_repr(s, a, params).unwrap();
    let head = |mlp: &crate::agent::Mlp, x: &crate::agent::ListRepr| {
        let x = Array2::from_shape_vec((1, x.len()), x.0.clone()).unwrap();
        mlp.forward(&x).row(0).to_vec()
    };
    let mut out = [0.0; 4];
    for (i, rec) in fx.records.iter().enumerate() {
        let a = e(&rec.state, &rec.action);
        out[0] += (head(&params.q_head, &a)[0] - fx.targets[i]).powi(2);
        let y_logits = head(&params.rat_head, &a);
        let y_hat: Vec<Vec<f64>> = (0..k)
            .map(|s| (0..m).map(|f| sigmoid(y_logits[s * m + f])).collect())
            .collect();
        out[1] += rat_loss(&y_hat, &rec.recon_labels, beta);
        let z_hat: Vec<f64> = head(&params.ctr_head, &a)
            .into_iter()
            .map(sigmoid)
            .collect();
        let p_hat = sigmoid(head(&params.pull_head, &a)[0]);
        out[2] += pat_loss(
            &z_hat,
            &rec.outcome.clicks,
            p_hat,
            u8::from(rec.outcome.pulled_down),
        );
        let (ps, pa) = &fx.positives[i];
        let negs: Vec<Vec<f64>> = (1..=negatives)
            .map(|j| {
                let r = &fx.records[(i + j) % n];
                e(&r.state, &r.action).0
            })
            .collect();
        let neg_refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        out[3] += clat_loss(a.as_slice(), e(ps, pa).as_slice(), &neg_refs, 1.0);
    }
    out.map(|v| v / n as f64)
}

#[test]
fn combined_loss_matches_a_two_record_fixture() {
    let params = tiny(6, 3, 2);
    let fx = Fixture::new(7, 2, 3, 2);
    let beta = rank_weights(2);
    let w = weights(1.0, 0.01, 0.05, 0.05);
    let terms = combined_loss(&params, &fx.batch(1), &w, &beta).unwrap();
    let want = reference_terms(&params, &fx, 1, &beta);
    let got = [terms.dqn, terms.rat, terms.pat, terms.clat];
    for (g, r) in got.iter().zip(&want) {
        assert!((g - r).abs() < 1e-9, "{got:?} vs {want:?}");
    }
    let total = want[0] + 0.01 * want[1] + 0.05 * want[2] + 0.05 * want[3];
    assert!((terms.total - total).abs() < 1e-9);
}

#[test]
fn single_record_batch_is_not_averaged() {
    let params = tiny(8, 3, 2);
    let fx = Fixture::new(9, 1, 3, 2);
    let batch = Batch {
        negatives: vec![vec![&fx.records[0]]],
        ..fx.batch(0)
    };
    let terms = combined_loss(
        &params,
        &batch,
        &weights(1.0, 0.0, 0.0, 0.0),
        &rank_weights(2),
    )
    .unwrap();
    let q = q_value(
        &build_list_repr(&fx.records[0].state, &fx.records[0].action, &params).unwrap(),
        &params,
    );
    assert!((terms.dqn - (q - fx.targets[0]).powi(2)).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let beta = rank_weights(2);
    let cases = [
        weights(1.0, 0.0, 0.0, 0.0),
        weights(0.0, 1.0, 0.0, 0.0),
        weights(0.0, 0.0, 1.0, 0.0),
        weights(0.0, 0.0, 0.0, 1.0),
        weights(1.0, 0.01, 0.05, 0.05),
    ];
    for seed in 0..3 {
        let mut params = tiny(100 + seed, 3, 2);
        jitter_params(&mut params, &mut ChaCha8Rng::seed_from_u64(seed), 0.1);
        let fx = Fixture::new(200 + seed, 3, 3, 2);
        let batch = fx.batch(2);
        for w in &cases {
            let (_, grads) = combined_loss_grad(&params, &batch, w, &beta).unwrap();
            let check = check_gradient(&params, &grads, 1e-4, |p| {
                combined_loss(p, &batch, w, &beta).unwrap().total
            });
            assert!(check.max_rel_error <= 1e-4, "{w:?}: {check:?}");
            assert!(check.kinks * 100 <= check.checked, "{check:?}");
        }
    }
}

#[test]
fn empty_batch_is_an_error() {
    let params = tiny(1, 3, 2);
    let batch = Batch {
        records: Vec::new(),
        targets: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    assert!(matches!(
        combined_loss(
            &params,
            &batch,
            &weights(1.0, 0.0, 0.0, 0.0),
            &rank_weights(2)
        ),
        Err(Error::EmptyDataset)
    ));
}

fn small_setup() -> (Simulator, Vec<TransitionRecord>, TrainConfig) {
    let sim_cfg = crate::simulator::SimConfig {
        num_ads: 60,
        num_organics: 120,
        num_users: 20,
        ..Default::default()
    };
    let sim = Simulator::new(sim_cfg, MdpConfig::default()).unwrap();
    let log = run_logging_policy(&sim, 40, 1).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        hidden: vec![8, 4],
        embedding_dim: 4,
        contrastive_size: 3,
        target_sync: 3,
        epochs: 1,
        seed: 11,
        ..TrainConfig::default()
    };
    (sim, log, cfg)
}

fn model(sim: &Simulator, cfg: &TrainConfig) -> ModelConfig {
    cfg.model_config(&sim.mdp, &sim.config)
}

#[test]
fn target_network_changes_only_at_sync_steps() {
    let (sim, log, cfg) = small_setup();
    let mut t = Trainer::new(&log, &sim.catalog, &sim.mdp, model(&sim, &cfg), &cfg).unwrap();
    assert_eq!(t.target, t.params);
    for _ in 0..7 {
        let before = t.target.clone();
        t.train_step().unwrap();
        if t.step % 3 == 0 {
            assert_eq!(t.target, t.params);
            assert_ne!(t.target, before);
        } else {
            assert_eq!(t.target, before);
        }
    }
    assert_eq!(t.target_version, 2);
}

#[test]
fn training_is_deterministic() {
    let (sim, log, cfg) = small_setup();
    let run = || {
        let mut t = Trainer::new(&log, &sim.catalog, &sim.mdp, model(&sim, &cfg), &cfg).unwrap();
        let terms: Vec<LossTerms> = (0..4).map(|_| t.train_step().unwrap()).collect();
        (t.params, terms)
    };
    assert_eq!(run(), run());
    let other = TrainConfig {
        seed: 12,
        ..cfg.clone()
    };
    let mut t = Trainer::new(&log, &sim.catalog, &sim.mdp, model(&sim, &other), &other).unwrap();
    t.train_step().unwrap();
    assert_ne!(t.params, run().0);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let (sim, log, cfg) = small_setup();
    let m = model(&sim, &cfg);
    let mut straight = Trainer::new(&log, &sim.catalog, &sim.mdp, m.clone(), &cfg).unwrap();
    for _ in 0..8 {
        straight.train_step().unwrap();
    }
    let mut first = Trainer::new(&log, &sim.catalog, &sim.mdp, m, &cfg).unwrap();
    for _ in 0..4 {
        first.train_step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("mid");
    save_checkpoint(&first.checkpoint("h"), &base).unwrap();
    let ckpt = crate::checkpoint::load_checkpoint(&base).unwrap();
    let mut resumed = Trainer::resume(&log, &sim.catalog, &sim.mdp, &cfg, ckpt).unwrap();
    assert_eq!(resumed.step, 4);
    for _ in 0..4 {
        resumed.train_step().unwrap();
    }
    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.target, straight.target);
    assert_eq!(resumed.adam, straight.adam);
}

#[test]
fn train_writes_one_log_row_per_update() {
    let (sim, log, cfg) = small_setup();
    let cfg = TrainConfig { epochs: 2, ..cfg };
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        config_hash: "abc".into(),
        ..TrainOptions::default()
    };
    let out = train(&log, &sim.catalog, &sim.mdp, model(&sim, &cfg), &cfg, opts).unwrap();
    let per_epoch = log.len().div_ceil(16) as u64;
    assert_eq!(out.steps, 2 * per_epoch);
    assert_eq!(out.log.len() as u64, out.steps);
    let text = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len() as u64, out.steps + 1);
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 6);
        assert_eq!(cols[0].parse::<u64>().unwrap(), i as u64 + 1);
        assert!(cols[1..]
            .iter()
            .all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
    for name in ["epoch_001", "epoch_002", "latest"] {
        assert!(dir.path().join(format!("{name}.json")).exists(), "{name}");
    }
}

#[test]
fn max_steps_overrides_epochs() {
    let (sim, log, cfg) = small_setup();
    let cfg = TrainConfig {
        max_steps: Some(5),
        epochs: 9,
        ..cfg
    };
    let out = train(
        &log,
        &sim.catalog,
        &sim.mdp,
        model(&sim, &cfg),
        &cfg,
        TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(out.steps, 5);
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let (sim, log, cfg) = small_setup();
    let cfg = TrainConfig {
        epochs: 6,
        patience: Some(2),
        ..cfg
    };
    let mut calls = 0;
    let mut seen = Vec::new();
    // scores peak at the second epoch, then fall
    let mut validate = |p: &ModelParams| -> Result<f64> {
        calls += 1;
        seen.push(p.clone());
        Ok([1.0, 3.0, 2.0, 1.0, 0.0, 0.0][calls - 1])
    };
    let opts = TrainOptions {
        validator: Some(&mut validate),
        ..TrainOptions::default()
    };
    let out = train(&log, &sim.catalog, &sim.mdp, model(&sim, &cfg), &cfg, opts).unwrap();
    assert!(out.stopped_early);
    assert_eq!(calls, 4);
    assert_eq!(out.params, seen[1]);
}

#[test]
fn non_finite_rewards_abort_training() {
    let (sim, mut log, cfg) = small_setup();
    for r in &mut log {
        r.reward = f64::NAN;
    }
    let mut t = Trainer::new(&log, &sim.catalog, &sim.mdp, model(&sim, &cfg), &cfg).unwrap();
    assert!(matches!(
        t.train_step(),
        Err(Error::NonFiniteLoss { step: 1, .. })
    ));
}

#[test]
fn empty_log_is_rejected() {
    let (sim, _, cfg) = small_setup();
    assert!(matches!(
        Trainer::new(&[], &sim.catalog, &sim.mdp, model(&sim, &cfg), &cfg),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn batches_are_reproducible_per_step() {
    let (sim, log, cfg) = small_setup();
    let mut a = Trainer::new(&log, &sim.catalog, &sim.mdp, model(&sim, &cfg), &cfg).unwrap();
    let mut b = Trainer::new(&log, &sim.catalog, &sim.mdp, model(&sim, &cfg), &cfg).unwrap();
    let ids = |batch: &Batch<'_>| {
        batch
            .records
            .iter()
            .map(|r| *r as *const TransitionRecord)
            .collect::<Vec<_>>()
    };
    let x = a.assemble_batch(3).unwrap();
    b.assemble_batch(0).unwrap();
    let y = b.assemble_batch(3).unwrap();
    assert_eq!(ids(&x), ids(&y));
    let distinct: std::collections::HashSet<_> = ids(&x).into_iter().collect();
    assert_eq!(distinct.len(), 16);
    for (i, negs) in x.negatives.iter().enumerate() {
        assert_eq!(negs.len(), 2);
        assert!(negs.iter().all(|n| n.request_id != x.records[i].request_id));
    }
}

#[test]
fn smoothed_total_compares_the_ends() {
    let rows: Vec<LogRow> = (0..10)
        .map(|i| LogRow {
            step: i + 1,
            terms: LossTerms {
                total: 10.0 - i as f64,
                ..LossTerms::default()
            },
        })
        .collect();
    assert_eq!(smoothed_total(&rows, 2), Some((9.5, 1.5)));
    assert_eq!(smoothed_total(&rows, 11), None);
}

#[test]
fn config_validation_rejects_bad_values() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            alpha1: -0.1,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            contrastive_size: 1,
            ..TrainConfig::default()
        },
        TrainConfig {
            hidden: vec![],
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}
