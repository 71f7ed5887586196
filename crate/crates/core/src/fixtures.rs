//! Random states and tiny model shapes for tests and gradient checks.

use std::sync::Arc;

use rand::Rng;

use crate::agent::{ModelConfig, ModelParams};
use crate::config::RunConfig;
use crate::eval::{PageLog, RequestLog};
use crate::mdp::{
    Action, Context, Item, PageOutcome, Role, SlotSource, State, TransitionRecord, UserProfile,
};

/// Small network shape: `d_e = 4`, hidden `(8, 4)`.
pub fn tiny_model_config(slots: usize, num_factors: usize) -> ModelConfig {
    ModelConfig {
        slots,
        num_factors,
        item_cardinalities: vec![5, 3, 4],
        user_cardinalities: vec![3, 2],
        context_cardinalities: vec![2, 3],
        num_behaviors: 3,
        embedding_dim: 4,
        hidden: vec![8, 4],
    }
}

pub fn random_item(rng: &mut impl Rng, config: &ModelConfig, id: u32, role: Role) -> Item {
    Item {
        id,
        role,
        sparse_features: config
            .item_cardinalities
            .iter()
            .map(|&c| rng.random_range(0..c as u32))
            .collect(),
        key_flags: (0..config.num_factors)
            .map(|_| rng.random_bool(0.5))
            .collect(),
        ad_revenue_value: if role == Role::Ad {
            rng.random_range(0.1..2.0)
        } else {
            0.0
        },
        fee_value: rng.random_range(0.1..2.0),
    }
}

pub fn random_user(rng: &mut impl Rng, config: &ModelConfig, id: u32) -> UserProfile {
    let null = Item::null(config.item_cardinalities.len(), config.num_factors);
    let behaviors = (0..config.num_behaviors)
        .map(|i| {
            // keep at least one real behavior
            if i > 0 && rng.random_bool(0.3) {
                null.clone()
            } else {
                random_item(rng, config, 10_000 + i as u32, Role::Organic)
            }
        })
        .collect();
    UserProfile {
        id,
        sparse_features: config
            .user_cardinalities
            .iter()
            .map(|&c| rng.random_range(0..c as u32))
            .collect(),
        behaviors,
        preference_weights: (0..config.num_factors)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    }
}

pub fn random_context(rng: &mut impl Rng, config: &ModelConfig) -> Context {
    Context {
        sparse_features: config
            .context_cardinalities
            .iter()
            .map(|&c| rng.random_range(0..c as u32))
            .collect(),
    }
}

/// A state with `n_ads` ads and `n_organics` organics; item ids are unique
/// within the state (ads from 0, organics from 1000).
pub fn random_state(
    rng: &mut impl Rng,
    config: &ModelConfig,
    n_ads: usize,
    n_organics: usize,
) -> State {
    let ads = (0..n_ads)
        .map(|i| random_item(rng, config, i as u32, Role::Ad))
        .collect();
    let organics = (0..n_organics)
        .map(|i| random_item(rng, config, 1000 + i as u32, Role::Organic))
        .collect();
    let user_id = rng.random_range(0..100);
    let user = Arc::new(random_user(rng, config, user_id));
    State {
        ads,
        organics,
        user,
        context: random_context(rng, config),
        page_index: 0,
    }
}

/// A transition on a fresh random state with a random feasible action,
/// random behavior labels and matching reconstruction labels.
pub fn random_record(
    rng: &mut impl Rng,
    config: &ModelConfig,
    request_id: u64,
    terminal: bool,
) -> TransitionRecord {
    let k = config.slots;
    let n_ads = rng.random_range(0..=k);
    let state = random_state(rng, config, n_ads, k);
    let mut slots = vec![false; k];
    let shown_ads = rng.random_range(0..=n_ads);
    for s in rand::seq::index::sample(rng, k, shown_ads) {
        slots[s] = true;
    }
    let action = Action::new(slots);
    let recon_labels = state
        .arrange(&action)
        .expect("feasible by construction")
        .iter()
        .map(|item| item.key_flags.iter().map(|&f| u8::from(f)).collect())
        .collect();
    let clicks: Vec<u8> = (0..k).map(|_| u8::from(rng.random_bool(0.3))).collect();
    let pulled_down = !terminal;
    let next_state = (!terminal).then(|| {
        let n = rng.random_range(0..=k);
        let mut next = random_state(rng, config, n, k);
        next.user = state.user.clone();
        next.page_index = 1;
        Arc::new(next)
    });
    let experience = if clicks.contains(&1) { 1 } else { 0 };
    TransitionRecord {
        request_id,
        state: Arc::new(state),
        action,
        reward: rng.random_range(0.0..2.0),
        next_state,
        outcome: PageOutcome {
            scroll_depth: rng.random_range(1..=k),
            clicks,
            placed_order: false,
            ordered_slot: None,
            pulled_down,
            ad_revenue: 0.0,
            fee: 0.0,
            experience,
        },
        recon_labels,
    }
}

/// Positive view of `record`: slots past the scroll depth get fresh random
/// items of the same role.
pub fn random_positive(
    rng: &mut impl Rng,
    config: &ModelConfig,
    record: &TransitionRecord,
) -> (State, Action) {
    let mut state = (*record.state).clone();
    let sources = record
        .action
        .slot_sources(state.ads.len(), state.organics.len())
        .expect("record action is feasible");
    for (slot, src) in sources
        .into_iter()
        .enumerate()
        .skip(record.outcome.scroll_depth)
    {
        let fresh = 50_000 + slot as u32;
        match src {
            SlotSource::Ad(i) => state.ads[i] = random_item(rng, config, fresh, Role::Ad),
            SlotSource::Organic(i) => {
                state.organics[i] = random_item(rng, config, fresh, Role::Organic)
            }
        }
    }
    (state, record.action.clone())
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates sitting on a ReLU kink, where one-sided slopes disagree
    /// and no derivative exists.
    pub kinks: usize,
}

/// Adds uniform noise in `[-scale, scale]` to every coordinate, so zero
/// biases no longer sit exactly on a ReLU kink.
pub fn jitter_params(params: &mut ModelParams, rng: &mut impl Rng, scale: f64) {
    for t in params.tensors_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-scale..=scale));
    }
}

/// Checks every coordinate of `analytic` against a five-point central
/// difference, `(4 D(h) - D(2h)) / 3` with `D(h) = (f(x+h) - f(x-h)) / 2h`.
/// Relative error is `|g - fd| / max(|g|, |fd|, 1e-6)`.
///
/// When `D(h)` and `D(2h)` disagree by more than `1e-8 * max(1, |D(h)|)` a
/// ReLU kink lies within `2h` of the point; the step shrinks tenfold up to
/// twice, and a coordinate that still disagrees is counted as a kink and
/// skipped.
pub fn check_gradient(
    params: &ModelParams,
    analytic: &ModelParams,
    h: f64,
    loss: impl Fn(&ModelParams) -> f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    let mut probe = params.clone();
    let grads = analytic.tensors();
    for t in 0..grads.len() {
        for idx in 0..grads[t].len() {
            let orig = params.tensors()[t].as_slice().expect("standard layout")[idx];
            let mut at = |x: f64| {
                probe.tensors_mut()[t]
                    .as_slice_mut()
                    .expect("standard layout")[idx] = x;
                loss(&probe)
            };
            let mut fd = None;
            for step in [h, h / 10.0, h / 100.0] {
                let d1 = (at(orig + step) - at(orig - step)) / (2.0 * step);
                let d2 = (at(orig + 2.0 * step) - at(orig - 2.0 * step)) / (4.0 * step);
                if (d1 - d2).abs() <= 1e-8 * d1.abs().max(1.0) {
                    fd = Some((4.0 * d1 - d2) / 3.0);
                    break;
                }
            }
            at(orig);
            let Some(fd) = fd else {
                out.kinks += 1;
                continue;
            };
            let g = grads[t].as_slice().expect("standard layout")[idx];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            out.max_rel_error = out.max_rel_error.max(rel);
            out.checked += 1;
        }
    }
    out
}

/// Random interaction logs with arbitrary page counts, outcomes and rewards.
pub fn random_request_logs(
    rng: &mut impl Rng,
    num_requests: usize,
    slots: usize,
) -> Vec<RequestLog> {
    (0..num_requests as u64)
        .map(|request_id| {
            let pages = (0..rng.random_range(1..=4))
                .map(|_| {
                    let action = Action::new((0..slots).map(|_| rng.random_bool(0.3)).collect());
                    let clicks: Vec<u8> =
                        (0..slots).map(|_| u8::from(rng.random_bool(0.2))).collect();
                    let placed_order = rng.random_bool(0.25);
                    let n_clicks = clicks.iter().map(|&c| c as usize).sum();
                    let outcome = PageOutcome {
                        placed_order,
                        ordered_slot: placed_order.then(|| rng.random_range(0..slots)),
                        pulled_down: rng.random_bool(0.5),
                        scroll_depth: rng.random_range(1..=slots),
                        ad_revenue: rng.random_range(0.0..3.0),
                        fee: if placed_order {
                            rng.random_range(0.5..1.5)
                        } else {
                            0.0
                        },
                        experience: PageOutcome::experience_for(placed_order, n_clicks),
                        clicks,
                    };
                    PageLog {
                        action,
                        reward: crate::mdp::compute_reward(&outcome, 0.05),
                        outcome,
                    }
                })
                .collect();
            RequestLog {
                request_id,
                user_id: rng.random_range(0..50),
                pages,
            }
        })
        .collect()
}

/// Settings small enough for a log, train and evaluate cycle in well under a
/// second.
pub fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.sim.num_ads = 60;
    cfg.sim.num_organics = 120;
    cfg.sim.num_users = 20;
    cfg.train.batch_size = 16;
    cfg.train.hidden = vec![8, 4];
    cfg.train.embedding_dim = 4;
    cfg.train.contrastive_size = 3;
    cfg.train.target_sync = 3;
    cfg.train.max_steps = Some(4);
    cfg.eval.num_requests = 20;
    cfg.eval.dataset_requests = 40;
    cfg.eval.validation_requests = 10;
    cfg.eval.seeds = vec![1, 2];
    cfg
}
