//! The base Q-network: sparse-feature embeddings, target attention over the
//! user's behaviors, a shared per-item MLP, action-conditioned concatenation
//! into a list-wise representation, and the Q head.

mod forward;
mod params;

use ndarray::{Array1, Array2};

pub use forward::{backward, gather_lists, item_reps, score_actions, ListBatch, RepCache};
pub use params::{EmbeddingTable, Linear, Mlp, MlpCache, ModelConfig, ModelParams};

use crate::error::{Error, Result};
use crate::mdp::{Action, Context, Item, MdpConfig, State, UserProfile};

/// Concatenation of the `K` slot representations in display order.
#[derive(Debug, Clone, PartialEq)]
pub struct ListRepr(pub Vec<f64>);

impl ListRepr {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Looks up each id in its field block and flattens the `H x d_e` result.
pub fn embed_features(ids: &[u32], table: &EmbeddingTable) -> Result<Vec<f64>> {
    let mut out = vec![0.0; ids.len() * table.dim()];
    table.lookup_into(ids, &mut out)?;
    Ok(out)
}

/// Output of [`target_attention`].
#[derive(Debug, Clone)]
pub struct Attention {
    pub output: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Single-head scaled dot-product attention of one item embedding over the
/// behavior embeddings. Behaviors with `mask[i] == false` get weight 0.
pub fn target_attention(
    query: &[f64],
    behaviors: &[Vec<f64>],
    mask: &[bool],
    params: &ModelParams,
) -> Attention {
    let q = Array1::from(query.to_vec()).dot(&params.att_query);
    let scale = 1.0 / (q.len() as f64).sqrt();
    let scores: Vec<Option<f64>> = behaviors
        .iter()
        .zip(mask)
        .map(|(b, &m)| {
            m.then(|| {
                let k = Array1::from(b.clone()).dot(&params.att_key);
                q.dot(&k) * scale
            })
        })
        .collect();
    let max = scores
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| s.map_or(0.0, |s| (s - max).exp()))
        .collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps
        .iter()
        .map(|e| if total > 0.0 { e / total } else { 0.0 })
        .collect();
    let mut output = Array1::zeros(params.att_value.ncols());
    for (b, &w) in behaviors.iter().zip(&weights) {
        if w != 0.0 {
            output.scaled_add(w, &Array1::from(b.clone()).dot(&params.att_value));
        }
    }
    Attention {
        output: output.to_vec(),
        weights,
    }
}

/// MLP1 applied to `attention || e_item || e_user || e_context`.
pub fn item_representation(
    item: &Item,
    user: &UserProfile,
    context: &Context,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    let mut batch = ListBatch::new();
    let ctx = batch.add_context(user, context);
    batch.add_row(ctx, item);
    let (reps, _) = item_reps(params, &batch)?;
    Ok(reps.row(0).to_vec())
}

pub fn build_list_repr(state: &State, action: &Action, params: &ModelParams) -> Result<ListRepr> {
    check_slots(params, action)?;
    let mut batch = ListBatch::new();
    batch.push_state_action(state, action)?;
    let (reps, _) = item_reps(params, &batch)?;
    Ok(ListRepr(gather_lists(&reps, &batch).row(0).to_vec()))
}

fn check_slots(params: &ModelParams, action: &Action) -> Result<()> {
    if action.len() != params.config.slots {
        return Err(Error::SlotCountMismatch {
            expected: params.config.slots,
            got: action.len(),
        });
    }
    Ok(())
}

pub fn q_value(e_list: &ListRepr, params: &ModelParams) -> f64 {
    let x = Array2::from_shape_vec((1, e_list.len()), e_list.0.clone()).expect("row vector");
    params.q_head.forward(&x)[[0, 0]]
}

/// Index of the first maximum; earlier entries win ties.
pub(crate) fn first_argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Greedy action over the feasible set; ties go to the lexicographically
/// smallest action vector.
pub fn select_action(state: &State, params: &ModelParams, mdp: &MdpConfig) -> Result<Action> {
    let actions = mdp.feasible_actions(state.ads.len(), state.organics.len())?;
    let scores = score_actions(params, state, &actions)?;
    let best = first_argmax(&scores).ok_or(Error::InfeasibleState {
        slots: mdp.slots,
        n_ads: state.ads.len(),
        n_organics: state.organics.len(),
    })?;
    Ok(actions[best].clone())
}

/// `max_a Q(state, a)` over the feasible set.
pub fn max_q(state: &State, params: &ModelParams, mdp: &MdpConfig) -> Result<f64> {
    let actions = mdp.feasible_actions(state.ads.len(), state.organics.len())?;
    let scores = score_actions(params, state, &actions)?;
    Ok(scores.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests;
