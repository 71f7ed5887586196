use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fixtures::{random_state, tiny_model_config};
use crate::mdp::{Action, SlotSource};

fn tiny_params(seed: u64, slots: usize) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::new(tiny_model_config(slots, 2), &mut rng).unwrap()
}

// Straight-line version of MLP1's input, built from the single-item helpers.
fn reference_item_rep(params: &ModelParams, state: &State, item: &Item) -> Vec<f64> {
    let e_item = embed_features(&item.sparse_features, &params.item_embedding).unwrap();
    let behaviors: Vec<Vec<f64>> = state
        .user
        .behaviors
        .iter()
        .map(|b| embed_features(&b.sparse_features, &params.item_embedding).unwrap())
        .collect();
    let mask: Vec<bool> = state.user.behaviors.iter().map(|b| !b.is_null()).collect();
    let att = target_attention(&e_item, &behaviors, &mask, params);
    let mut input = att.output;
    input.extend(&e_item);
    input.extend(embed_features(&state.user.sparse_features, &params.user_embedding).unwrap());
    input
        .extend(embed_features(&state.context.sparse_features, &params.context_embedding).unwrap());
    let x = Array2::from_shape_vec((1, input.len()), input).unwrap();
    params.item_mlp.forward(&x).row(0).to_vec()
}

// Independent interleaving: walk the bits, drawing from two cursors.
fn reference_arrangement(
    bits: &[bool],
    n_ads: usize,
    n_organics: usize,
) -> Option<Vec<(bool, usize)>> {
    let (mut a, mut o) = (0, 0);
    let mut out = Vec::new();
    for &b in bits {
        if b {
            if a == n_ads {
                return None;
            }
            out.push((true, a));
            a += 1;
        } else {
            if o == n_organics {
                return None;
            }
            out.push((false, o));
            o += 1;
        }
    }
    Some(out)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn embedding_concatenates_field_rows() {
    let params = tiny_params(1, 3);
    let table = &params.item_embedding;
    let out = embed_features(&[4, 0, 3], table).unwrap();
    let d = table.dim();
    assert_eq!(out.len(), 3 * d);
    let expect: Vec<f64> = [(0, 4), (1, 0), (2, 3)]
        .iter()
        .flat_map(|&(f, id)| table.table.row(table.offsets[f] + id).to_vec())
        .collect();
    assert_eq!(out, expect);
    assert!(matches!(
        embed_features(&[5, 0, 0], table),
        Err(Error::IdOutOfRange { .. })
    ));
    assert!(embed_features(&[0, 0], table).is_err());
}

#[test]
fn attention_weights_are_a_masked_softmax() {
    let params = tiny_params(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let width = params.config.item_width();
    let mut vec = || -> Vec<f64> { (0..width).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let query = vec();
    let behaviors = vec![vec(), vec(), vec()];
    let mask = [true, false, true];
    let att = target_attention(&query, &behaviors, &mask, &params);

    let q = ndarray::Array1::from(query.clone()).dot(&params.att_query);
    let score = |b: &Vec<f64>| {
        q.dot(&ndarray::Array1::from(b.clone()).dot(&params.att_key)) / (q.len() as f64).sqrt()
    };
    let (s0, s2) = (score(&behaviors[0]), score(&behaviors[2]));
    let w0 = 1.0 / (1.0 + (s2 - s0).exp());
    assert!((att.weights[0] - w0).abs() < 1e-12);
    assert_eq!(att.weights[1], 0.0);
    assert!((att.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let v = |b: &Vec<f64>| ndarray::Array1::from(b.clone()).dot(&params.att_value);
    let expect = v(&behaviors[0]) * w0 + v(&behaviors[2]) * (1.0 - w0);
    assert!(close(&att.output, expect.as_slice().unwrap(), 1e-12));
}

#[test]
fn fully_masked_attention_is_zero() {
    let params = tiny_params(2, 3);
    let width = params.config.item_width();
    let att = target_attention(&vec![0.5; width], &[vec![1.0; width]], &[false], &params);
    assert!(att.output.iter().all(|&x| x == 0.0));
    assert_eq!(att.weights, vec![0.0]);
}

#[test]
fn batched_item_reps_match_single_item_path() {
    let params = tiny_params(4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let state = random_state(&mut rng, &params.config, 2, 3);
        for item in state.ads.iter().chain(&state.organics) {
            let got = item_representation(item, &state.user, &state.context, &params).unwrap();
            let want = reference_item_rep(&params, &state, item);
            assert!(close(&got, &want, 1e-12));
        }
    }
}

#[test]
fn worked_example_list_layout() {
    let params = tiny_params(6, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let state = random_state(&mut rng, &params.config, 3, 7);
    let action = Action::from_bits("0010100001").unwrap();
    let sources = action.slot_sources(3, 7).unwrap();
    use SlotSource::{Ad, Organic};
    assert_eq!(
        sources,
        vec![
            Organic(0),
            Organic(1),
            Ad(0),
            Organic(2),
            Ad(1),
            Organic(3),
            Organic(4),
            Organic(5),
            Organic(6),
            Ad(2)
        ]
    );
    let e_list = build_list_repr(&state, &action, &params).unwrap();
    let rw = params.config.rep_width();
    assert_eq!(e_list.len(), 10 * rw);
    let third = reference_item_rep(&params, &state, &state.ads[0]);
    assert!(close(&e_list.as_slice()[2 * rw..3 * rw], &third, 1e-12));
}

#[test]
fn slot_count_mismatch_is_reported() {
    let params = tiny_params(6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let state = random_state(&mut rng, &params.config, 2, 3);
    let err = build_list_repr(&state, &Action::from_bits("0101").unwrap(), &params).unwrap_err();
    assert!(matches!(
        err,
        Error::SlotCountMismatch {
            expected: 3,
            got: 4
        }
    ));
}

#[test]
fn ties_go_to_the_smallest_action() {
    let mut params = tiny_params(9, 4);
    // a constant Q-head makes every action tie
    for layer in &mut params.q_head.layers {
        layer.w.fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let state = random_state(&mut rng, &params.config, 2, 2);
    let mdp = MdpConfig {
        slots: 4,
        ..MdpConfig::default()
    };
    let feasible = mdp.feasible_actions(2, 2).unwrap();
    let smallest = feasible.iter().min().unwrap();
    assert_eq!(&select_action(&state, &params, &mdp).unwrap(), smallest);
    assert_eq!(smallest.to_string(), "0011");
}

#[test]
fn first_argmax_prefers_earlier_entries() {
    assert_eq!(first_argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
    assert_eq!(first_argmax(&[]), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn list_repr_is_slot_order_concatenation(seed in any::<u64>(), bits in prop::collection::vec(any::<bool>(), 5), n_ads in 0usize..4, n_org in 0usize..6) {
        let params = tiny_params(11, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = random_state(&mut rng, &params.config, n_ads, n_org);
        let action = Action::new(bits.clone());
        match reference_arrangement(&bits, n_ads, n_org) {
            None => prop_assert!(build_list_repr(&state, &action, &params).is_err()),
            Some(layout) => {
                let e_list = build_list_repr(&state, &action, &params).unwrap();
                let want: Vec<f64> = layout
                    .iter()
                    .flat_map(|&(ad, i)| {
                        let item = if ad { &state.ads[i] } else { &state.organics[i] };
                        reference_item_rep(&params, &state, item)
                    })
                    .collect();
                prop_assert!(close(e_list.as_slice(), &want, 1e-12));
            }
        }
    }

    #[test]
    fn fast_scoring_matches_full_forward(seed in any::<u64>()) {
        let params = tiny_params(seed, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let state = random_state(&mut rng, &params.config, 3, 4);
        let mdp = MdpConfig { slots: 4, ..MdpConfig::default() };
        let actions = mdp.feasible_actions(3, 4).unwrap();
        let fast = score_actions(&params, &state, &actions).unwrap();
        for (a, f) in actions.iter().zip(&fast) {
            let q = q_value(&build_list_repr(&state, a, &params).unwrap(), &params);
            prop_assert!((q - f).abs() < 1e-10);
        }
    }

    #[test]
    fn select_action_is_brute_force_argmax(seed in any::<u64>(), slots in 1usize..=4) {
        let params = tiny_params(seed, slots);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let state = random_state(&mut rng, &params.config, 2, 3);
        let mdp = MdpConfig { slots, ..MdpConfig::default() };
        // every bit vector, filtered and sorted independently of the library
        let mut all: Vec<Action> = (0..1u32 << slots)
            .map(|m| Action::new((0..slots).map(|i| m >> (slots - 1 - i) & 1 == 1).collect()))
            .filter(|a| a.num_ads() <= 2 && a.num_organics() <= 3)
            .collect();
        all.sort();
        let mut best: Option<(f64, &Action)> = None;
        for a in &all {
            let q = q_value(&build_list_repr(&state, a, &params).unwrap(), &params);
            if best.is_none_or(|(b, _)| q > b) {
                best = Some((q, a));
            }
        }
        let (best_q, best_a) = best.unwrap();
        prop_assert_eq!(&select_action(&state, &params, &mdp).unwrap(), best_a);
        prop_assert!((max_q(&state, &params, &mdp).unwrap() - best_q).abs() < 1e-10);
    }

    #[test]
    fn swapping_a_later_item_leaves_earlier_slots_alone(seed in any::<u64>()) {
        let params = tiny_params(12, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = random_state(&mut rng, &params.config, 2, 4);
        let action = Action::from_bits("0101").unwrap();
        let mut other = state.clone();
        other.ads[1] = crate::fixtures::random_item(&mut rng, &params.config, 77, crate::mdp::Role::Ad);
        let a = build_list_repr(&state, &action, &params).unwrap();
        let b = build_list_repr(&other, &action, &params).unwrap();
        let rw = params.config.rep_width();
        prop_assert_eq!(&a.as_slice()[..3 * rw], &b.as_slice()[..3 * rw]);
    }
}
