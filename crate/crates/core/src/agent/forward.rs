//! Batched forward and backward passes from raw sparse ids to list-wise
//! representations.
//!
//! A [`ListBatch`] holds three levels of indirection: request contexts (user,
//! behaviors, context features), item rows evaluated inside one context, and
//! lists of `K` rows forming one `e_list`. Rows shared between lists (anchor
//! and positive prefixes, in-batch negatives) are evaluated once.

use ndarray::{s, Array2, ArrayView1};

use super::params::{MlpCache, ModelParams};
use crate::error::{Error, Result};
use crate::mdp::{Action, Context, Item, State, UserProfile};

#[derive(Default)]
pub struct ListBatch<'a> {
    contexts: Vec<(&'a UserProfile, &'a Context)>,
    rows: Vec<(usize, &'a Item)>,
    lists: Vec<Vec<usize>>,
}

impl<'a> ListBatch<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_context(&mut self, user: &'a UserProfile, context: &'a Context) -> usize {
        self.contexts.push((user, context));
        self.contexts.len() - 1
    }

    pub fn add_row(&mut self, context: usize, item: &'a Item) -> usize {
        self.rows.push((context, item));
        self.rows.len() - 1
    }

    pub fn add_list(&mut self, rows: Vec<usize>) -> usize {
        self.lists.push(rows);
        self.lists.len() - 1
    }

    /// Adds a fresh context for `state` and one row per displayed slot.
    /// Returns `(context, list)` indices.
    pub fn push_state_action(
        &mut self,
        state: &'a State,
        action: &Action,
    ) -> Result<(usize, usize)> {
        let ctx = self.add_context(&state.user, &state.context);
        let rows = state
            .arrange(action)?
            .into_iter()
            .map(|item| self.add_row(ctx, item))
            .collect();
        Ok((ctx, self.add_list(rows)))
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_lists(&self) -> usize {
        self.lists.len()
    }

    pub fn list(&self, idx: usize) -> &[usize] {
        &self.lists[idx]
    }
}

/// Intermediate values of [`item_reps`] needed by [`backward`].
pub struct RepCache {
    item_emb: Array2<f64>,
    queries: Array2<f64>,
    user_emb: Array2<f64>,
    ctx_emb: Array2<f64>,
    behaviors: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    mask: Vec<bool>,
    weights: Array2<f64>,
    mlp: MlpCache,
}

fn lookup_rows<'a>(
    table: &super::params::EmbeddingTable,
    ids: impl Iterator<Item = Option<&'a [u32]>>,
    n: usize,
) -> Result<Array2<f64>> {
    let width = table.cardinalities.len() * table.dim();
    let mut out = Array2::zeros((n, width));
    for (i, ids) in ids.enumerate() {
        if let Some(ids) = ids {
            let mut row = out.row_mut(i);
            table.lookup_into(ids, row.as_slice_mut().expect("standard layout"))?;
        }
    }
    Ok(out)
}

/// Masked softmax attention of one query over `keys`; writes the weights into
/// `weights` and returns nothing when every behavior is masked (all weights 0).
fn attend(
    query: ArrayView1<f64>,
    keys: ndarray::ArrayView2<f64>,
    mask: &[bool],
    weights: &mut [f64],
) {
    let scale = 1.0 / (query.len() as f64).sqrt();
    let mut max = f64::NEG_INFINITY;
    for (i, w) in weights.iter_mut().enumerate() {
        if mask[i] {
            *w = query.dot(&keys.row(i)) * scale;
            max = max.max(*w);
        }
    }
    let mut total = 0.0;
    for (i, w) in weights.iter_mut().enumerate() {
        if mask[i] {
            *w = (*w - max).exp();
            total += *w;
        } else {
            *w = 0.0;
        }
    }
    if total > 0.0 {
        for w in weights.iter_mut() {
            *w /= total;
        }
    }
}

/// Per-item representations (MLP1 outputs) for every row of the batch.
pub fn item_reps(params: &ModelParams, batch: &ListBatch<'_>) -> Result<(Array2<f64>, RepCache)> {
    let cfg = &params.config;
    let nb = cfg.num_behaviors;
    let n_ctx = batch.contexts.len();
    let n_rows = batch.rows.len();

    let user_emb = lookup_rows(
        &params.user_embedding,
        batch
            .contexts
            .iter()
            .map(|(u, _)| Some(u.sparse_features.as_slice())),
        n_ctx,
    )?;
    let ctx_emb = lookup_rows(
        &params.context_embedding,
        batch
            .contexts
            .iter()
            .map(|(_, c)| Some(c.sparse_features.as_slice())),
        n_ctx,
    )?;
    let mut mask = Vec::with_capacity(n_ctx * nb);
    for (user, _) in &batch.contexts {
        if user.behaviors.len() != nb {
            return Err(Error::Config(format!(
                "user {} has {} behaviors, model expects {nb}",
                user.id,
                user.behaviors.len()
            )));
        }
        mask.extend(user.behaviors.iter().map(|b| !b.is_null()));
    }
    let behaviors = lookup_rows(
        &params.item_embedding,
        batch
            .contexts
            .iter()
            .flat_map(|(u, _)| u.behaviors.iter())
            .map(|b| (!b.is_null()).then_some(b.sparse_features.as_slice())),
        n_ctx * nb,
    )?;
    let keys = behaviors.dot(&params.att_key);
    let values = behaviors.dot(&params.att_value);

    let item_emb = lookup_rows(
        &params.item_embedding,
        batch
            .rows
            .iter()
            .map(|(_, item)| Some(item.sparse_features.as_slice())),
        n_rows,
    )?;
    let queries = item_emb.dot(&params.att_query);

    let aw = cfg.attention_width();
    let (iw, uw, cw) = (cfg.item_width(), cfg.user_width(), cfg.context_width());
    let mut input = Array2::zeros((n_rows, cfg.item_mlp_input()));
    let mut weights = Array2::zeros((n_rows, nb));
    for (r, &(c, _)) in batch.rows.iter().enumerate() {
        let span = c * nb..(c + 1) * nb;
        let mut w = weights.row_mut(r);
        let w = w.as_slice_mut().expect("standard layout");
        attend(
            queries.row(r),
            keys.slice(s![span.clone(), ..]),
            &mask[span.clone()],
            w,
        );
        let mut row = input.row_mut(r);
        let mut att = row.slice_mut(s![..aw]);
        for (i, &wi) in w.iter().enumerate() {
            if wi != 0.0 {
                att.scaled_add(wi, &values.row(c * nb + i));
            }
        }
        row.slice_mut(s![aw..aw + iw]).assign(&item_emb.row(r));
        row.slice_mut(s![aw + iw..aw + iw + uw])
            .assign(&user_emb.row(c));
        row.slice_mut(s![aw + iw + uw..aw + iw + uw + cw])
            .assign(&ctx_emb.row(c));
    }

    let (reps, mlp) = params.item_mlp.forward_cached(&input);
    Ok((
        reps,
        RepCache {
            item_emb,
            queries,
            user_emb,
            ctx_emb,
            behaviors,
            keys,
            values,
            mask,
            weights,
            mlp,
        },
    ))
}

/// Concatenates row representations into one `e_list` per list.
pub fn gather_lists(reps: &Array2<f64>, batch: &ListBatch<'_>) -> Array2<f64> {
    let rw = reps.ncols();
    let k = batch.lists.first().map_or(0, |l| l.len());
    let mut out = Array2::zeros((batch.lists.len(), k * rw));
    for (li, rows) in batch.lists.iter().enumerate() {
        for (slot, &r) in rows.iter().enumerate() {
            out.slice_mut(s![li, slot * rw..(slot + 1) * rw])
                .assign(&reps.row(r));
        }
    }
    out
}

/// Backpropagates `d_lists` (gradient w.r.t. every `e_list` of the batch) into
/// the embedding, attention and MLP1 parameters.
pub fn backward(
    params: &ModelParams,
    batch: &ListBatch<'_>,
    cache: RepCache,
    d_lists: &Array2<f64>,
    grads: &mut ModelParams,
) {
    let cfg = &params.config;
    let nb = cfg.num_behaviors;
    let rw = cfg.rep_width();
    let mut d_reps = Array2::zeros((batch.rows.len(), rw));
    for (li, rows) in batch.lists.iter().enumerate() {
        for (slot, &r) in rows.iter().enumerate() {
            let mut dst = d_reps.row_mut(r);
            dst += &d_lists.slice(s![li, slot * rw..(slot + 1) * rw]);
        }
    }
    let d_input = params
        .item_mlp
        .backward(&cache.mlp, d_reps, &mut grads.item_mlp);

    let aw = cfg.attention_width();
    let (iw, uw, cw) = (cfg.item_width(), cfg.user_width(), cfg.context_width());
    let scale = 1.0 / (aw as f64).sqrt();
    let mut d_item = d_input.slice(s![.., aw..aw + iw]).to_owned();
    let mut d_user = Array2::<f64>::zeros(cache.user_emb.raw_dim());
    let mut d_ctx = Array2::<f64>::zeros(cache.ctx_emb.raw_dim());
    let mut d_queries = Array2::<f64>::zeros(cache.queries.raw_dim());
    let mut d_keys = Array2::<f64>::zeros(cache.keys.raw_dim());
    let mut d_values = Array2::<f64>::zeros(cache.values.raw_dim());
    let mut dw = vec![0.0; nb];
    for (r, &(c, _)) in batch.rows.iter().enumerate() {
        let row = d_input.row(r);
        let mut du = d_user.row_mut(c);
        du += &row.slice(s![aw + iw..aw + iw + uw]);
        let mut dc = d_ctx.row_mut(c);
        dc += &row.slice(s![aw + iw + uw..aw + iw + uw + cw]);

        let d_att = row.slice(s![..aw]);
        let w = cache.weights.row(r);
        let mut dot = 0.0;
        for i in 0..nb {
            let b = c * nb + i;
            if !cache.mask[b] {
                dw[i] = 0.0;
                continue;
            }
            dw[i] = d_att.dot(&cache.values.row(b));
            dot += w[i] * dw[i];
            let mut dv = d_values.row_mut(b);
            dv.scaled_add(w[i], &d_att);
        }
        let q = cache.queries.row(r);
        let mut dq = d_queries.row_mut(r);
        for i in 0..nb {
            let b = c * nb + i;
            if !cache.mask[b] || w[i] == 0.0 {
                continue;
            }
            let ds = w[i] * (dw[i] - dot) * scale;
            dq.scaled_add(ds, &cache.keys.row(b));
            d_keys.row_mut(b).scaled_add(ds, &q);
        }
    }

    grads.att_query += &cache.item_emb.t().dot(&d_queries);
    d_item += &d_queries.dot(&params.att_query.t());
    grads.att_key += &cache.behaviors.t().dot(&d_keys);
    grads.att_value += &cache.behaviors.t().dot(&d_values);
    let d_behaviors = d_keys.dot(&params.att_key.t()) + d_values.dot(&params.att_value.t());

    for (r, &(_, item)) in batch.rows.iter().enumerate() {
        grads.item_embedding.scatter_add(
            &item.sparse_features,
            d_item.row(r).as_slice().expect("standard layout"),
        );
    }
    for (c, (user, ctx)) in batch.contexts.iter().enumerate() {
        grads.user_embedding.scatter_add(
            &user.sparse_features,
            d_user.row(c).as_slice().expect("standard layout"),
        );
        grads.context_embedding.scatter_add(
            &ctx.sparse_features,
            d_ctx.row(c).as_slice().expect("standard layout"),
        );
        for (i, b) in user.behaviors.iter().enumerate() {
            if !b.is_null() {
                grads.item_embedding.scatter_add(
                    &b.sparse_features,
                    d_behaviors
                        .row(c * nb + i)
                        .as_slice()
                        .expect("standard layout"),
                );
            }
        }
    }
}

/// Q-values of many actions in one state, sharing the per-item work.
///
/// The first Q-head layer is linear in the concatenated slot representations,
/// so its pre-activation for any arrangement is the bias plus one projected
/// block per slot. Those blocks are computed once per (slot, candidate).
pub fn score_actions(params: &ModelParams, state: &State, actions: &[Action]) -> Result<Vec<f64>> {
    if actions.is_empty() {
        return Ok(Vec::new());
    }
    let k = params.config.slots;
    let mut batch = ListBatch::new();
    let ctx = batch.add_context(&state.user, &state.context);
    for item in state.ads.iter().chain(&state.organics) {
        batch.add_row(ctx, item);
    }
    let (reps, _) = item_reps(params, &batch)?;
    let n_ads = state.ads.len();
    let rw = params.config.rep_width();
    let first = &params.q_head.layers[0];
    let blocks: Vec<Array2<f64>> = (0..k)
        .map(|slot| reps.dot(&first.w.slice(s![slot * rw..(slot + 1) * rw, ..])))
        .collect();

    let h = first.w.ncols();
    let mut pre = Array2::zeros((actions.len(), h));
    for (ai, action) in actions.iter().enumerate() {
        if action.len() != k {
            return Err(Error::SlotCountMismatch {
                expected: k,
                got: action.len(),
            });
        }
        let sources = action.slot_sources(n_ads, state.organics.len())?;
        let mut row = pre.row_mut(ai);
        row.assign(&first.b.row(0));
        for (slot, src) in sources.into_iter().enumerate() {
            let r = match src {
                crate::mdp::SlotSource::Ad(i) => i,
                crate::mdp::SlotSource::Organic(i) => n_ads + i,
            };
            row += &blocks[slot].row(r);
        }
    }
    let out = params.q_head.forward_from(1, pre);
    Ok(out.column(0).to_vec())
}
