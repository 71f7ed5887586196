//! Offline Q-learning on logged transitions: the DQN loss plus the weighted
//! reconstruction, prediction and contrastive losses, Adam updates, and a
//! target network hard-synced every `target_sync` updates.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use ndarray::{s, Array2, Zip};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    backward, build_list_repr, gather_lists, item_reps, q_value, score_actions, ListBatch,
    ModelConfig, ModelParams,
};
use crate::auxtasks::{clat_loss_grad, pat_loss_logits, rat_loss_logits};
use crate::checkpoint::{save_checkpoint, Checkpoint, TrainState};
use crate::dataset::{construct_positive, sample_negatives_sparse};
use crate::error::{Error, IoContext, Result};
use crate::mdp::{Action, MdpConfig, State, TransitionRecord};
use crate::simulator::{derive_seed, Catalog, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fixed number of updates; overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub target_sync: usize,
    pub seed: u64,
    /// Contrastive set size `L`: one positive and `L - 1` negatives.
    pub contrastive_size: usize,
    pub temperature: f64,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    /// Epochs without validation improvement before stopping early. Only
    /// used when a validator is supplied.
    pub patience: Option<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.01,
            alpha2: 0.05,
            alpha3: 0.05,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 3,
            max_steps: None,
            target_sync: 500,
            seed: 1,
            contrastive_size: 10,
            temperature: 1.0,
            embedding_dim: 8,
            hidden: vec![128, 64, 32],
            patience: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("train: {msg}")));
        if [self.alpha1, self.alpha2, self.alpha3]
            .iter()
            .any(|a| !a.is_finite() || *a < 0.0)
        {
            return bad("alpha coefficients must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.target_sync == 0 {
            return bad("batch_size and target_sync must be >= 1");
        }
        if self.contrastive_size < 2 {
            return bad("contrastive_size must be >= 2");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.embedding_dim == 0 {
            return bad("hidden sizes and embedding_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_epsilon > 0.0)
        {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            dqn: 1.0,
            rat: self.alpha1,
            pat: self.alpha2,
            clat: self.alpha3,
            temperature: self.temperature,
        }
    }

    /// Network shape for this simulator and MDP.
    pub fn model_config(&self, mdp: &MdpConfig, sim: &SimConfig) -> ModelConfig {
        ModelConfig {
            slots: mdp.slots,
            num_factors: mdp.num_factors,
            item_cardinalities: sim.item_cardinalities(),
            user_cardinalities: sim.user_cardinalities(),
            context_cardinalities: sim.context_cardinalities(),
            num_behaviors: sim.num_behaviors,
            embedding_dim: self.embedding_dim,
            hidden: self.hidden.clone(),
        }
    }
}

/// Coefficients of the four loss terms. Terms with weight 0 are skipped and
/// reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub dqn: f64,
    pub rat: f64,
    pub pat: f64,
    pub clat: f64,
    pub temperature: f64,
}

/// Batch means of each loss term and of the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub dqn: f64,
    pub rat: f64,
    pub pat: f64,
    pub clat: f64,
    pub total: f64,
}

impl LossTerms {
    fn is_finite(&self) -> bool {
        [self.dqn, self.rat, self.pat, self.clat, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `(r + gamma * max_next_q - q)^2`, with `max_next_q = None` for terminal
/// transitions.
pub fn td_loss(reward: f64, gamma: f64, max_next_q: Option<f64>, q: f64) -> f64 {
    let y = reward + max_next_q.map_or(0.0, |m| gamma * m);
    (y - q).powi(2)
}

/// Bootstrapped target of one transition under the target network, maximizing
/// over the next state's feasible actions.
pub fn td_target(record: &TransitionRecord, target: &ModelParams, mdp: &MdpConfig) -> Result<f64> {
    match &record.next_state {
        None => Ok(record.reward),
        Some(next) => {
            let actions = mdp.feasible_actions(next.ads.len(), next.organics.len())?;
            let best = score_actions(target, next, &actions)?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(record.reward + mdp.gamma * best)
        }
    }
}

/// Squared TD error of one logged transition.
pub fn dqn_loss(
    record: &TransitionRecord,
    online: &ModelParams,
    target: &ModelParams,
    mdp: &MdpConfig,
) -> Result<f64> {
    let q = q_value(
        &build_list_repr(&record.state, &record.action, online)?,
        online,
    );
    let y = td_target(record, target, mdp)?;
    Ok((y - q).powi(2))
}

/// A training batch with everything the objective needs precomputed.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub records: Vec<&'a TransitionRecord>,
    /// TD targets, fixed with respect to the online parameters.
    pub targets: Vec<f64>,
    /// Positive view of each record; only read when the contrastive weight is
    /// nonzero.
    pub positives: Vec<Option<(State, Action)>>,
    pub negatives: Vec<Vec<&'a TransitionRecord>>,
}

impl<'a> Batch<'a> {
    /// Batch with targets from `target` and no contrastive material.
    pub fn plain(
        records: Vec<&'a TransitionRecord>,
        target: &ModelParams,
        mdp: &MdpConfig,
    ) -> Result<Self> {
        let targets = records
            .iter()
            .map(|r| td_target(r, target, mdp))
            .collect::<Result<Vec<_>>>()?;
        let n = records.len();
        Ok(Self {
            records,
            targets,
            positives: vec![None; n],
            negatives: vec![Vec::new(); n],
        })
    }
}

/// Mean over the batch of `L_DQN + a1 L_RAT + a2 L_PAT + a3 L_CLAT`.
pub fn combined_loss(
    params: &ModelParams,
    batch: &Batch<'_>,
    weights: &LossWeights,
    beta: &[f64],
) -> Result<LossTerms> {
    objective(params, batch, weights, beta, false).map(|(terms, _)| terms)
}

/// [`combined_loss`] and its gradient with respect to every parameter.
pub fn combined_loss_grad(
    params: &ModelParams,
    batch: &Batch<'_>,
    weights: &LossWeights,
    beta: &[f64],
) -> Result<(LossTerms, ModelParams)> {
    let (terms, grads) = objective(params, batch, weights, beta, true)?;
    Ok((terms, grads.expect("gradient requested")))
}

fn row(a: &Array2<f64>, i: usize) -> &[f64] {
    let start = i * a.ncols();
    &a.as_slice().expect("standard layout")[start..start + a.ncols()]
}

fn objective(
    params: &ModelParams,
    batch: &Batch<'_>,
    w: &LossWeights,
    beta: &[f64],
    want_grad: bool,
) -> Result<(LossTerms, Option<ModelParams>)> {
    let n = batch.records.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let cfg = &params.config;
    let k = cfg.slots;
    if beta.len() != cfg.num_factors {
        return Err(Error::Config(format!(
            "beta has {} weights, model has {} factors",
            beta.len(),
            cfg.num_factors
        )));
    }

    let mut lb = ListBatch::new();
    let mut contexts = Vec::with_capacity(n);
    let mut list_of: HashMap<*const TransitionRecord, usize> = HashMap::with_capacity(n);
    for rec in &batch.records {
        if rec.action.len() != k {
            return Err(Error::SlotCountMismatch {
                expected: k,
                got: rec.action.len(),
            });
        }
        let (ctx, list) = lb.push_state_action(&rec.state, &rec.action)?;
        contexts.push(ctx);
        list_of.insert(*rec as *const _, list);
    }
    let use_clat = w.clat != 0.0;
    let mut pos_lists = Vec::new();
    let mut neg_lists = Vec::new();
    if use_clat {
        for i in 0..n {
            let rec = batch.records[i];
            let (ps, pa) = batch.positives[i].as_ref().ok_or_else(|| {
                Error::Config("contrastive loss needs a positive per record".into())
            })?;
            let anchor_items = rec.state.arrange(&rec.action)?;
            let pos_items = ps.arrange(pa)?;
            let mut rows = Vec::with_capacity(k);
            for (slot, item) in pos_items.into_iter().enumerate() {
                // unchanged prefix slots share the anchor's rows
                let r = if item.id == anchor_items[slot].id {
                    lb.list(i)[slot]
                } else {
                    lb.add_row(contexts[i], item)
                };
                rows.push(r);
            }
            pos_lists.push(lb.add_list(rows));
        }
        for negs in &batch.negatives {
            if negs.is_empty() {
                return Err(Error::InsufficientNegatives {
                    needed: 1,
                    available: 0,
                });
            }
            let mut idx = Vec::with_capacity(negs.len());
            for rec in negs {
                let key = *rec as *const TransitionRecord;
                let li = match list_of.get(&key) {
                    Some(&l) => l,
                    None => {
                        let (_, l) = lb.push_state_action(&rec.state, &rec.action)?;
                        list_of.insert(key, l);
                        l
                    }
                };
                idx.push(li);
            }
            neg_lists.push(idx);
        }
    }

    let (reps, cache) = item_reps(params, &lb)?;
    let e = gather_lists(&reps, &lb);
    let anchors = e.slice(s![..n, ..]).to_owned();
    let scale = 1.0 / n as f64;
    let mut terms = LossTerms::default();
    let mut grads = want_grad.then(|| params.zeros_like());
    let mut d_anchor = Array2::<f64>::zeros(anchors.raw_dim());

    if w.dqn != 0.0 {
        let (q, q_cache) = params.q_head.forward_cached(&anchors);
        let mut d_q = Array2::zeros((n, 1));
        for i in 0..n {
            let diff = q[[i, 0]] - batch.targets[i];
            terms.dqn += diff * diff;
            d_q[[i, 0]] = w.dqn * 2.0 * diff * scale;
        }
        if let Some(g) = grads.as_mut() {
            d_anchor += &params.q_head.backward(&q_cache, d_q, &mut g.q_head);
        }
    }
    if w.rat != 0.0 {
        let (logits, c) = params.rat_head.forward_cached(&anchors);
        let mut d = Array2::zeros(logits.raw_dim());
        for (i, rec) in batch.records.iter().enumerate() {
            let (l, g) = rat_loss_logits(row(&logits, i), &rec.recon_labels, beta);
            terms.rat += l;
            d.row_mut(i).assign(&ndarray::Array1::from(g));
        }
        if let Some(gr) = grads.as_mut() {
            d *= w.rat * scale;
            d_anchor += &params.rat_head.backward(&c, d, &mut gr.rat_head);
        }
    }
    if w.pat != 0.0 {
        let (clicks, cc) = params.ctr_head.forward_cached(&anchors);
        let (pull, pc) = params.pull_head.forward_cached(&anchors);
        let mut dc = Array2::zeros(clicks.raw_dim());
        let mut dp = Array2::zeros(pull.raw_dim());
        for (i, rec) in batch.records.iter().enumerate() {
            let p = u8::from(rec.outcome.pulled_down);
            let (l, g, gp) = pat_loss_logits(row(&clicks, i), &rec.outcome.clicks, pull[[i, 0]], p);
            terms.pat += l;
            dc.row_mut(i).assign(&ndarray::Array1::from(g));
            dp[[i, 0]] = gp;
        }
        if let Some(gr) = grads.as_mut() {
            dc *= w.pat * scale;
            dp *= w.pat * scale;
            d_anchor += &params.ctr_head.backward(&cc, dc, &mut gr.ctr_head);
            d_anchor += &params.pull_head.backward(&pc, dp, &mut gr.pull_head);
        }
    }
    let mut d_lists = want_grad.then(|| Array2::<f64>::zeros(e.raw_dim()));
    if use_clat {
        for i in 0..n {
            let negs: Vec<&[f64]> = neg_lists[i].iter().map(|&l| row(&e, l)).collect();
            let cg = clat_loss_grad(row(&e, i), row(&e, pos_lists[i]), &negs, w.temperature);
            terms.clat += cg.loss;
            if let Some(d) = d_lists.as_mut() {
                let f = w.clat * scale;
                let mut add = |list: usize, g: &[f64]| {
                    let mut r = d.row_mut(list);
                    for (dst, v) in r.iter_mut().zip(g) {
                        *dst += f * v;
                    }
                };
                add(i, &cg.anchor);
                add(pos_lists[i], &cg.positive);
                for (&l, g) in neg_lists[i].iter().zip(&cg.negatives) {
                    add(l, g);
                }
            }
        }
    }

    terms.dqn *= scale;
    terms.rat *= scale;
    terms.pat *= scale;
    terms.clat *= scale;
    terms.total = w.dqn * terms.dqn + w.rat * terms.rat + w.pat * terms.pat + w.clat * terms.clat;

    if let (Some(g), Some(mut d)) = (grads.as_mut(), d_lists) {
        let mut head = d.slice_mut(s![..n, ..]);
        head += &d_anchor;
        backward(params, &lb, cache, &d, g);
    }
    Ok((terms, grads))
}

/// Adam with bias correction; moments have the parameters' shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            epsilon: cfg.adam_epsilon,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.lr;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads.tensors());
        for (((p, m), v), g) in tensors {
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

const INIT_STREAM: u64 = 0x1d;

/// Online/target networks, optimizer state and the TD-target cache over one
/// fixed offline log.
pub struct Trainer<'a> {
    log: &'a [TransitionRecord],
    catalog: &'a Catalog,
    mdp: MdpConfig,
    cfg: TrainConfig,
    beta: Vec<f64>,
    pub params: ModelParams,
    pub target: ModelParams,
    pub adam: Adam,
    /// Completed updates.
    pub step: u64,
    /// Incremented at every target sync.
    pub target_version: u64,
    cache: Vec<Option<(u64, f64)>>,
    actions: HashMap<(usize, usize), Vec<Action>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        log: &'a [TransitionRecord],
        catalog: &'a Catalog,
        mdp: &MdpConfig,
        model: ModelConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_STREAM));
        let params = ModelParams::new(model, &mut rng)?;
        let adam = Adam::new(&params, cfg);
        Self::assemble(log, catalog, mdp, cfg, params.clone(), params, adam, 0, 0)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        log: &'a [TransitionRecord],
        catalog: &'a Catalog,
        mdp: &MdpConfig,
        cfg: &TrainConfig,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        let state = ckpt.train_state.ok_or_else(|| {
            Error::Checkpoint("checkpoint has no optimizer state to resume from".into())
        })?;
        let mut adam = Adam::new(&ckpt.params, cfg);
        adam.m = state.adam_m;
        adam.v = state.adam_v;
        adam.t = state.adam_t;
        Self::assemble(
            log,
            catalog,
            mdp,
            cfg,
            ckpt.params,
            state.target,
            adam,
            ckpt.step,
            state.target_version,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        log: &'a [TransitionRecord],
        catalog: &'a Catalog,
        mdp: &MdpConfig,
        cfg: &TrainConfig,
        params: ModelParams,
        target: ModelParams,
        adam: Adam,
        step: u64,
        target_version: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        mdp.validate()?;
        if log.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if params.config.slots != mdp.slots {
            return Err(Error::SlotCountMismatch {
                expected: mdp.slots,
                got: params.config.slots,
            });
        }
        if params.config.num_factors != mdp.num_factors {
            return Err(Error::Config(format!(
                "model has {} factors, mdp has {}",
                params.config.num_factors, mdp.num_factors
            )));
        }
        Ok(Self {
            log,
            catalog,
            mdp: mdp.clone(),
            cfg: cfg.clone(),
            beta: mdp.beta_weights(),
            params,
            target,
            adam,
            step,
            target_version,
            cache: vec![None; log.len()],
            actions: HashMap::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.log.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg
            .max_steps
            .unwrap_or(self.cfg.epochs * self.steps_per_epoch())
    }

    fn target_value(&mut self, idx: usize) -> Result<f64> {
        if let Some((v, y)) = self.cache[idx] {
            if v == self.target_version {
                return Ok(y);
            }
        }
        let rec = &self.log[idx];
        let y = match &rec.next_state {
            None => rec.reward,
            Some(next) => {
                let key = (next.ads.len(), next.organics.len());
                if !self.actions.contains_key(&key) {
                    self.actions
                        .insert(key, self.mdp.feasible_actions(key.0, key.1)?);
                }
                let best = score_actions(&self.target, next, &self.actions[&key])?
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max);
                rec.reward + self.mdp.gamma * best
            }
        };
        self.cache[idx] = Some((self.target_version, y));
        Ok(y)
    }

    /// Samples the batch for update number `step` (0-based). The draw depends
    /// only on the seed and the step.
    pub fn assemble_batch(&mut self, step: u64) -> Result<Batch<'a>> {
        let log = self.log;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, step));
        let b = self.cfg.batch_size.min(log.len());
        let indices = sample(&mut rng, log.len(), b).into_vec();
        let records: Vec<&'a TransitionRecord> = indices.iter().map(|&i| &log[i]).collect();
        let targets = indices
            .iter()
            .map(|&i| self.target_value(i))
            .collect::<Result<Vec<_>>>()?;

        let mut positives = vec![None; b];
        let mut negatives = vec![Vec::new(); b];
        if self.cfg.alpha3 != 0.0 {
            let need = self.cfg.contrastive_size - 1;
            for i in 0..b {
                positives[i] = Some(construct_positive(records[i], self.catalog, &mut rng)?);
                let rid = records[i].request_id;
                let others: Vec<usize> = (0..b).filter(|&j| records[j].request_id != rid).collect();
                negatives[i] = if others.len() >= need {
                    sample(&mut rng, others.len(), need)
                        .into_iter()
                        .map(|j| records[others[j]])
                        .collect()
                } else {
                    sample_negatives_sparse(log, rid, need, &mut rng)?
                        .into_iter()
                        .map(|j| &log[j])
                        .collect()
                };
            }
        }
        Ok(Batch {
            records,
            targets,
            positives,
            negatives,
        })
    }

    /// One optimizer update, followed by a target sync when due.
    pub fn train_step(&mut self) -> Result<LossTerms> {
        let batch = self.assemble_batch(self.step)?;
        let (terms, grads) =
            combined_loss_grad(&self.params, &batch, &self.cfg.loss_weights(), &self.beta)?;
        if !terms.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step as usize + 1,
                detail: format!("{terms:?}"),
            });
        }
        self.adam.step(&mut self.params, &grads);
        if !self.params.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step as usize + 1,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        self.step += 1;
        if self.step % self.cfg.target_sync as u64 == 0 {
            self.target = self.params.clone();
            self.target_version += 1;
        }
        Ok(terms)
    }

    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            config_hash: config_hash.to_string(),
            step: self.step,
            train_state: Some(TrainState {
                target: self.target.clone(),
                target_version: self.target_version,
                adam_m: self.adam.m.clone(),
                adam_v: self.adam.v.clone(),
                adam_t: self.adam.t,
            }),
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub terms: LossTerms,
}

pub const LOG_HEADER: &str = "step,l_dqn,l_rat,l_pat,l_clat,total";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{},{},{},{},{}",
            self.step, t.dqn, t.rat, t.pat, t.clat, t.total
        )
    }
}

/// Scores a set of parameters on held-out data; higher is better.
pub type Validator<'v> = dyn FnMut(&ModelParams) -> Result<f64> + 'v;

#[derive(Default)]
pub struct TrainOptions<'v> {
    /// Directory for `train_log.csv` and per-epoch checkpoints.
    pub out_dir: Option<PathBuf>,
    pub config_hash: String,
    pub resume: Option<Checkpoint>,
    pub validator: Option<&'v mut Validator<'v>>,
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    pub steps: u64,
    pub stopped_early: bool,
}

/// Runs the full update budget, writing the log and epoch checkpoints when an
/// output directory is given.
pub fn train(
    log: &[TransitionRecord],
    catalog: &Catalog,
    mdp: &MdpConfig,
    model: ModelConfig,
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutput> {
    let mut trainer = match opts.resume {
        Some(ckpt) => {
            crate::checkpoint::check_compatible(&ckpt.params.config, &model)?;
            Trainer::resume(log, catalog, mdp, cfg, ckpt)?
        }
        None => Trainer::new(log, catalog, mdp, model, cfg)?,
    };
    let total = trainer.total_steps() as u64;
    let per_epoch = trainer.steps_per_epoch() as u64;

    let mut writer = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).at(dir)?;
            let path = dir.join("train_log.csv");
            let fresh = trainer.step == 0 || !path.exists();
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .at(&path)?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{LOG_HEADER}").at(&path)?;
            }
            Some((w, path))
        }
        None => None,
    };

    let mut rows = Vec::new();
    let mut validator = opts.validator;
    let mut best: Option<(f64, ModelParams)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    while trainer.step < total {
        let terms = trainer.train_step()?;
        let row = LogRow {
            step: trainer.step,
            terms,
        };
        if let Some((w, path)) = writer.as_mut() {
            writeln!(w, "{}", row.to_csv()).at(path.as_path())?;
        }
        rows.push(row);

        if trainer.step % per_epoch == 0 || trainer.step == total {
            let epoch = trainer.step.div_ceil(per_epoch);
            if let Some((w, path)) = writer.as_mut() {
                w.flush().at(path.as_path())?;
            }
            if let Some(dir) = &opts.out_dir {
                let ckpt = trainer.checkpoint(&opts.config_hash);
                save_checkpoint(&ckpt, &dir.join(format!("epoch_{epoch:03}")))?;
                save_checkpoint(&ckpt, &dir.join("latest"))?;
            }
            if let (Some(v), Some(patience)) = (validator.as_deref_mut(), cfg.patience) {
                let score = v(&trainer.params)?;
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, trainer.params.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    if let Some((w, path)) = writer.as_mut() {
        w.flush().at(path.as_path())?;
    }
    let steps = trainer.step;
    // with a validator the best-scoring epoch wins, even without a stop
    let params = match best {
        Some((_, p)) => p,
        None => trainer.params,
    };
    Ok(TrainOutput {
        params,
        log: rows,
        steps,
        stopped_early,
    })
}

/// Trailing mean of the total loss over the first and last `window` rows.
pub fn smoothed_total(rows: &[LogRow], window: usize) -> Option<(f64, f64)> {
    if rows.len() < window || window == 0 {
        return None;
    }
    let mean = |r: &[LogRow]| r.iter().map(|x| x.terms.total).sum::<f64>() / r.len() as f64;
    Some((mean(&rows[..window]), mean(&rows[rows.len() - window..])))
}

#[cfg(test)]
mod tests;
