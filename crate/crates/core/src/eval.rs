//! Policy rollouts against the simulator, the per-request metrics, and the
//! ablation and sensitivity harnesses built on top of them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::agent::first_argmax;
use crate::agent::{score_actions, ModelParams};
use crate::config::{content_hash, RunConfig};
use crate::dataset::run_logging_policy;
use crate::error::{Error, Result};
use crate::mdp::{Action, MdpConfig, PageOutcome, State, TransitionRecord};
use crate::simulator::{derive_seed, Simulator};
use crate::training::{train, TrainOptions, TrainOutput};

/// Chooses an action for a state. `rng` is a per-request stream that only
/// stochastic policies consume.
pub trait Policy {
    fn act(&mut self, state: &State, mdp: &MdpConfig, rng: &mut dyn RngCore) -> Result<Action>;
}

fn cached_actions<'c>(
    cache: &'c mut HashMap<(usize, usize), Vec<Action>>,
    state: &State,
    mdp: &MdpConfig,
) -> Result<&'c [Action]> {
    let key = (state.ads.len(), state.organics.len());
    if !cache.contains_key(&key) {
        cache.insert(key, mdp.feasible_actions(key.0, key.1)?);
    }
    Ok(&cache[&key])
}

/// Uniform over the feasible actions of each state; the logging policy.
#[derive(Debug, Default)]
pub struct RandomPolicy {
    actions: HashMap<(usize, usize), Vec<Action>>,
}

impl Policy for RandomPolicy {
    fn act(&mut self, state: &State, mdp: &MdpConfig, rng: &mut dyn RngCore) -> Result<Action> {
        let actions = cached_actions(&mut self.actions, state, mdp)?;
        Ok(actions[rng.random_range(0..actions.len())].clone())
    }
}

/// Highest-Q feasible action, ties to the lexicographically smallest.
pub struct GreedyPolicy<'p> {
    params: &'p ModelParams,
    actions: HashMap<(usize, usize), Vec<Action>>,
}

impl<'p> GreedyPolicy<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            params,
            actions: HashMap::new(),
        }
    }
}

impl Policy for GreedyPolicy<'_> {
    fn act(&mut self, state: &State, mdp: &MdpConfig, _rng: &mut dyn RngCore) -> Result<Action> {
        let actions = cached_actions(&mut self.actions, state, mdp)?;
        let scores = score_actions(self.params, state, actions)?;
        let best = first_argmax(&scores).ok_or(Error::InfeasibleState {
            slots: mdp.slots,
            n_ads: state.ads.len(),
            n_organics: state.organics.len(),
        })?;
        Ok(actions[best].clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageLog {
    pub action: Action,
    pub outcome: PageOutcome,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLog {
    pub request_id: u64,
    pub user_id: u32,
    pub pages: Vec<PageLog>,
}

/// Runs each request until the user leaves and keeps every page outcome.
pub fn rollout_policy(
    policy: &mut dyn Policy,
    sim: &Simulator,
    num_requests: usize,
    seed: u64,
) -> Result<Vec<RequestLog>> {
    let mut log: Vec<RequestLog> = Vec::with_capacity(num_requests);
    sim.run_requests(num_requests, seed, policy, |event| {
        if log.last().is_none_or(|r| r.request_id != event.request_id) {
            log.push(RequestLog {
                request_id: event.request_id,
                user_id: event.user_id,
                pages: Vec::new(),
            });
        }
        let page = PageLog {
            action: event.action,
            outcome: event.result.outcome,
            reward: event.result.reward,
        };
        log.last_mut().expect("pushed above").pages.push(page);
        Ok(())
    })?;
    Ok(log)
}

/// Groups a transition log back into requests.
pub fn requests_from_transitions(log: &[TransitionRecord], eta: f64) -> Vec<RequestLog> {
    let mut out: Vec<RequestLog> = Vec::new();
    for rec in log {
        if out.last().is_none_or(|r| r.request_id != rec.request_id) {
            out.push(RequestLog {
                request_id: rec.request_id,
                user_id: rec.state.user.id,
                pages: Vec::new(),
            });
        }
        out.last_mut().expect("pushed above").pages.push(PageLog {
            action: rec.action.clone(),
            outcome: rec.outcome.clone(),
            reward: crate::mdp::compute_reward(&rec.outcome, eta),
        });
    }
    out
}

pub const METRIC_NAMES: [&str; 6] = ["R_ad", "R_fee", "R_cxr", "R_ex", "reward", "ad_exposure"];

/// Per-request averages over one interaction log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r_ad: f64,
    pub r_fee: f64,
    pub r_cxr: f64,
    pub r_ex: f64,
    /// Undiscounted reward per request.
    pub reward: f64,
    /// Mean fraction of slots holding an ad, over pages.
    pub ad_exposure: f64,
    pub n_request: usize,
    pub n_order: usize,
    pub n_pages: usize,
}

impl Metrics {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [f64; 6] {
        [
            self.r_ad,
            self.r_fee,
            self.r_cxr,
            self.r_ex,
            self.reward,
            self.ad_exposure,
        ]
    }
}

pub fn compute_metrics(log: &[RequestLog]) -> Result<Metrics> {
    if log.is_empty() {
        return Err(Error::NoRequests);
    }
    let (mut ad, mut fee, mut ex, mut reward, mut exposure) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut orders, mut pages) = (0usize, 0usize);
    for req in log {
        for page in &req.pages {
            ad += page.outcome.ad_revenue;
            fee += page.outcome.fee;
            ex += f64::from(page.outcome.experience);
            reward += page.reward;
            orders += usize::from(page.outcome.placed_order);
            if !page.action.is_empty() {
                exposure += page.action.num_ads() as f64 / page.action.len() as f64;
            }
            pages += 1;
        }
    }
    let n = log.len() as f64;
    Ok(Metrics {
        r_ad: ad / n,
        r_fee: fee / n,
        r_cxr: orders as f64 / n,
        r_ex: ex / n,
        reward: reward / n,
        ad_exposure: if pages > 0 {
            exposure / pages as f64
        } else {
            0.0
        },
        n_request: log.len(),
        n_order: orders,
        n_pages: pages,
    })
}

/// Metrics for a list of seeds plus their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Metrics>,
}

impl MetricsReport {
    pub fn mean(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        for m in &self.per_seed {
            for (o, v) in out.iter_mut().zip(m.values()) {
                *o += v;
            }
        }
        out.map(|v| v / self.per_seed.len().max(1) as f64)
    }

    pub fn std(&self) -> [f64; 6] {
        let n = self.per_seed.len();
        if n < 2 {
            return [0.0; 6];
        }
        let mean = self.mean();
        let mut out = [0.0; 6];
        for m in &self.per_seed {
            for ((o, v), mu) in out.iter_mut().zip(m.values()).zip(mean) {
                *o += (v - mu).powi(2);
            }
        }
        out.map(|v| (v / (n - 1) as f64).sqrt())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.per_seed.iter().map(|m| m.reward).collect()
    }

    /// Tab-separated per-seed rows followed by mean and std rows.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "label\tseed\t{}\tN_request\tN_order\n",
            METRIC_NAMES.join("\t")
        );
        for (seed, m) in self.seeds.iter().zip(&self.per_seed) {
            let vals: Vec<String> = m.values().iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(
                out,
                "{}\t{seed}\t{}\t{}\t{}",
                self.label,
                vals.join("\t"),
                m.n_request,
                m.n_order
            );
        }
        for (name, vals) in [("mean", self.mean()), ("std", self.std())] {
            let vals: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}\t{name}\t{}\t\t", self.label, vals.join("\t"));
        }
        out
    }
}

/// Rolls `policy` out once per seed. Policies are rebuilt per seed so cached
/// state never leaks between seeds.
pub fn evaluate<P: Policy>(
    label: &str,
    sim: &Simulator,
    num_requests: usize,
    seeds: &[u64],
    mut make_policy: impl FnMut() -> P,
) -> Result<MetricsReport> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut policy = make_policy();
        let log = rollout_policy(&mut policy, sim, num_requests, eval_seed(seed))?;
        per_seed.push(compute_metrics(&log)?);
    }
    Ok(MetricsReport {
        label: label.to_string(),
        seeds: seeds.to_vec(),
        per_seed,
    })
}

const DATA_STREAM: u64 = 0xda7a;
const TRAIN_STREAM: u64 = 0x7a1;
const EVAL_STREAM: u64 = 0xe7a1;
const VALID_STREAM: u64 = 0x7a11d;

/// Seed of the logged dataset for experiment seed `seed`.
pub fn data_seed(seed: u64) -> u64 {
    derive_seed(seed, DATA_STREAM)
}

pub fn train_seed(seed: u64) -> u64 {
    derive_seed(seed, TRAIN_STREAM)
}

/// Seed of the evaluation requests; shared by every policy evaluated under
/// experiment seed `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, EVAL_STREAM)
}

/// Logged datasets keyed by everything that determines their content.
#[derive(Default)]
pub struct DatasetCache {
    entries: HashMap<String, Arc<Vec<TransitionRecord>>>,
}

impl DatasetCache {
    pub fn get(
        &mut self,
        sim: &Simulator,
        requests: usize,
        seed: u64,
    ) -> Result<Arc<Vec<TransitionRecord>>> {
        let key = content_hash(&(&sim.config, &sim.mdp, requests, seed));
        if let Some(d) = self.entries.get(&key) {
            return Ok(d.clone());
        }
        let log = Arc::new(run_logging_policy(sim, requests, data_seed(seed))?);
        self.entries.insert(key, log.clone());
        Ok(log)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Mean greedy reward on a validation stream disjoint from the evaluation
/// requests of the same seed.
pub fn validation_reward(
    params: &ModelParams,
    sim: &Simulator,
    requests: usize,
    seed: u64,
) -> Result<f64> {
    let log = rollout_policy(
        &mut GreedyPolicy::new(params),
        sim,
        requests,
        derive_seed(seed, VALID_STREAM),
    )?;
    Ok(compute_metrics(&log)?.reward)
}

/// Trained parameters and evaluation metrics of one (config, seed) run.
pub struct RunResult {
    pub metrics: Metrics,
    pub train: TrainOutput,
}

/// Logs data, trains and evaluates greedily under one experiment seed.
pub fn run_single(cfg: &RunConfig, seed: u64, cache: &mut DatasetCache) -> Result<RunResult> {
    cfg.validate()?;
    let sim = Simulator::new(cfg.sim.clone(), cfg.mdp.clone())?;
    let data = cache.get(&sim, cfg.eval.dataset_requests, seed)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = train_seed(seed);
    let model = train_cfg.model_config(&cfg.mdp, &cfg.sim);
    let mut validate =
        |p: &ModelParams| validation_reward(p, &sim, cfg.eval.validation_requests, seed);
    let opts = TrainOptions {
        validator: if train_cfg.patience.is_some() {
            Some(&mut validate)
        } else {
            None
        },
        ..TrainOptions::default()
    };
    let out = train(&data, &sim.catalog, &cfg.mdp, model, &train_cfg, opts)?;
    let log = rollout_policy(
        &mut GreedyPolicy::new(&out.params),
        &sim,
        cfg.eval.num_requests,
        eval_seed(seed),
    )?;
    Ok(RunResult {
        metrics: compute_metrics(&log)?,
        train: out,
    })
}

pub const ABLATION_VARIANTS: [&str; 5] = ["full", "w/o RAT", "w/o PAT", "w/o CLAT", "w/o all AT"];

/// Config of an ablation variant: the named coefficients are zeroed.
pub fn ablation_config(base: &RunConfig, variant: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match variant {
        "full" => {}
        "w/o RAT" => cfg.train.alpha1 = 0.0,
        "w/o PAT" => cfg.train.alpha2 = 0.0,
        "w/o CLAT" => cfg.train.alpha3 = 0.0,
        "w/o all AT" => {
            cfg.train.alpha1 = 0.0;
            cfg.train.alpha2 = 0.0;
            cfg.train.alpha3 = 0.0;
        }
        other => return Err(Error::UnknownParameter(other.to_string())),
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparativeReport {
    pub variants: Vec<MetricsReport>,
    /// Uniform-random logging policy on the same evaluation requests.
    pub baseline: Option<MetricsReport>,
}

impl ComparativeReport {
    pub fn variant(&self, label: &str) -> Option<&MetricsReport> {
        self.variants.iter().find(|v| v.label == label)
    }

    /// One row per variant: `mean (±std)` for each metric.
    pub fn summary_table(&self) -> String {
        let mut out = format!("variant\t{}\n", METRIC_NAMES.join("\t"));
        for r in self.variants.iter().chain(&self.baseline) {
            let cells: Vec<String> = r
                .mean()
                .iter()
                .zip(r.std())
                .map(|(m, s)| format!("{m:.4} (±{s:.4})"))
                .collect();
            let _ = writeln!(out, "{}\t{}", r.label, cells.join("\t"));
        }
        out
    }

    pub fn per_seed_table(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.variants.iter().chain(&self.baseline).enumerate() {
            let table = r.to_table();
            out.push_str(if i == 0 {
                &table
            } else {
                table.split_once('\n').map_or("", |(_, rest)| rest)
            });
        }
        out
    }
}

/// Trains and evaluates the full method and its four ablations for every
/// seed, plus the logging policy as a reference.
pub fn run_ablations(
    base: &RunConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &Metrics),
) -> Result<ComparativeReport> {
    if seeds.len() < 2 {
        return Err(Error::Config("ablations need at least two seeds".into()));
    }
    let configs = ABLATION_VARIANTS
        .iter()
        .map(|v| ablation_config(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut per_variant: Vec<Vec<Metrics>> = vec![Vec::new(); configs.len()];
    let mut baseline = Vec::new();
    let sim = Simulator::new(base.sim.clone(), base.mdp.clone())?;
    for &seed in seeds {
        let mut cache = DatasetCache::default();
        for (i, cfg) in configs.iter().enumerate() {
            let r = run_single(cfg, seed, &mut cache)?;
            progress(ABLATION_VARIANTS[i], seed, &r.metrics);
            per_variant[i].push(r.metrics);
        }
        let log = rollout_policy(
            &mut RandomPolicy::default(),
            &sim,
            base.eval.num_requests,
            eval_seed(seed),
        )?;
        let m = compute_metrics(&log)?;
        progress("random", seed, &m);
        baseline.push(m);
    }
    Ok(ComparativeReport {
        variants: ABLATION_VARIANTS
            .iter()
            .zip(per_variant)
            .map(|(label, per_seed)| MetricsReport {
                label: label.to_string(),
                seeds: seeds.to_vec(),
                per_seed,
            })
            .collect(),
        baseline: Some(MetricsReport {
            label: "random".into(),
            seeds: seeds.to_vec(),
            per_seed: baseline,
        }),
    })
}

/// Sweepable hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    Alpha1,
    Alpha2,
    Alpha3,
    /// Number of reconstruction factors `M`.
    Factors,
    /// Contrastive set size `L`.
    ContrastiveSize,
    /// Slots per page `K`.
    Slots,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "alpha1" | "a1" => Self::Alpha1,
            "alpha2" | "a2" => Self::Alpha2,
            "alpha3" | "a3" => Self::Alpha3,
            "m" | "num_factors" | "factors" => Self::Factors,
            "l" | "contrastive_size" => Self::ContrastiveSize,
            "k" | "slots" => Self::Slots,
            _ => return Err(Error::UnknownParameter(name.to_string())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha1 => "alpha1",
            Self::Alpha2 => "alpha2",
            Self::Alpha3 => "alpha3",
            Self::Factors => "M",
            Self::ContrastiveSize => "L",
            Self::Slots => "K",
        }
    }

    fn integer(self) -> bool {
        matches!(self, Self::Factors | Self::ContrastiveSize | Self::Slots)
    }

    /// `base` with this parameter set to `value`.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Config(format!(
                "{} must be a finite non-negative value, got {value}",
                self.name()
            )));
        }
        if self.integer() && value.fract() != 0.0 {
            return Err(Error::Config(format!(
                "{} takes integer values, got {value}",
                self.name()
            )));
        }
        let mut cfg = base.clone();
        match self {
            Self::Alpha1 => cfg.train.alpha1 = value,
            Self::Alpha2 => cfg.train.alpha2 = value,
            Self::Alpha3 => cfg.train.alpha3 = value,
            Self::Factors => {
                cfg.mdp.num_factors = value as usize;
                cfg.mdp.beta.clear();
            }
            Self::ContrastiveSize => cfg.train.contrastive_size = value as usize,
            Self::Slots => cfg.mdp.slots = value as usize,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.value) {
                v.push(r.value);
            }
        }
        v
    }

    /// Seed-averaged metrics per value, in sweep order.
    pub fn means(&self) -> Vec<(f64, [f64; 6])> {
        self.values()
            .into_iter()
            .map(|value| {
                let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.value == value).collect();
                let mut acc = [0.0; 6];
                for r in &rows {
                    for (a, v) in acc.iter_mut().zip(r.metrics.values()) {
                        *a += v;
                    }
                }
                (value, acc.map(|a| a / rows.len() as f64))
            })
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{}\tseed\t{}\tN_request\tN_order\n",
            self.param.name(),
            METRIC_NAMES.join("\t")
        );
        for r in &self.rows {
            let vals: Vec<String> = r
                .metrics
                .values()
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.value,
                r.seed,
                vals.join("\t"),
                r.metrics.n_request,
                r.metrics.n_order
            );
        }
        out
    }
}

/// One training and evaluation per (value, seed).
pub fn run_sweep(
    param: SweepParam,
    values: &[f64],
    base: &RunConfig,
    seeds: &[u64],
    mut progress: impl FnMut(f64, u64, &Metrics),
) -> Result<SweepReport> {
    let configs = values
        .iter()
        .map(|&v| param.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &seed in seeds {
        let mut cache = DatasetCache::default();
        for (cfg, &value) in configs.iter().zip(values) {
            let r = run_single(cfg, seed, &mut cache)?;
            progress(value, seed, &r.metrics);
            rows.push(SweepRow {
                value,
                seed,
                metrics: r.metrics,
            });
        }
    }
    Ok(SweepReport { param, rows })
}

/// Two-parameter grid, each cell averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub row_param: SweepParam,
    pub col_param: SweepParam,
    pub row_values: Vec<f64>,
    pub col_values: Vec<f64>,
    /// `cells[i][j]`: seed-mean metrics at `(row_values[i], col_values[j])`.
    pub cells: Vec<Vec<[f64; 6]>>,
    pub rows: Vec<SweepRow>,
}

/// Relative improvement in percent, averaged with equal weight over the four
/// business metrics.
pub fn average_improvement(cell: &[f64; 6], reference: &[f64; 6]) -> f64 {
    (0..4)
        .map(|i| {
            if reference[i] == 0.0 {
                0.0
            } else {
                (cell[i] - reference[i]) / reference[i].abs() * 100.0
            }
        })
        .sum::<f64>()
        / 4.0
}

impl GridReport {
    fn zero_cell(&self) -> Option<(usize, usize)> {
        let i = self.row_values.iter().position(|&v| v == 0.0)?;
        let j = self.col_values.iter().position(|&v| v == 0.0)?;
        Some((i, j))
    }

    /// Improvement of every cell over the cell where both parameters are 0.
    pub fn improvements(&self) -> Result<Vec<Vec<f64>>> {
        let (i0, j0) = self
            .zero_cell()
            .ok_or_else(|| Error::Config("grid needs 0 among both value lists".into()))?;
        let reference = self.cells[i0][j0];
        Ok(self
            .cells
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| average_improvement(c, &reference))
                    .collect()
            })
            .collect())
    }

    pub fn improvement_table(&self) -> Result<String> {
        let imp = self.improvements()?;
        let mut out = format!("{}\\{}", self.row_param.name(), self.col_param.name());
        for c in &self.col_values {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
        for (r, row) in self.row_values.iter().zip(&imp) {
            let _ = write!(out, "{r}");
            for v in row {
                let _ = write!(out, "\t{v:+.2}%");
            }
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn run_grid(
    row_param: SweepParam,
    row_values: &[f64],
    col_param: SweepParam,
    col_values: &[f64],
    base: &RunConfig,
    seeds: &[u64],
    mut progress: impl FnMut(f64, f64, u64, &Metrics),
) -> Result<GridReport> {
    if row_param == col_param {
        return Err(Error::Config("grid needs two different parameters".into()));
    }
    let mut configs = Vec::new();
    for &rv in row_values {
        let cfg = row_param.apply(base, rv)?;
        for &cv in col_values {
            configs.push((rv, cv, col_param.apply(&cfg, cv)?));
        }
    }
    let mut acc = vec![vec![[0.0; 6]; col_values.len()]; row_values.len()];
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut cache = DatasetCache::default();
        for (n, (rv, cv, cfg)) in configs.iter().enumerate() {
            let r = run_single(cfg, seed, &mut cache)?;
            progress(*rv, *cv, seed, &r.metrics);
            let cell = &mut acc[n / col_values.len()][n % col_values.len()];
            for (a, v) in cell.iter_mut().zip(r.metrics.values()) {
                *a += v / seeds.len() as f64;
            }
            rows.push(SweepRow {
                value: *rv,
                seed,
                metrics: r.metrics,
            });
        }
    }
    Ok(GridReport {
        row_param,
        col_param,
        row_values: row_values.to_vec(),
        col_values: col_values.to_vec(),
        cells: acc,
        rows,
    })
}

/// Bisects `eta` until the trained policy's ad exposure is within `tolerance`
/// of `target`, assuming exposure falls as `eta` grows. Returns the final
/// `eta` and its metrics.
pub fn tune_eta(
    base: &RunConfig,
    target: f64,
    tolerance: f64,
    seed: u64,
    max_iter: usize,
) -> Result<(f64, Metrics)> {
    let (mut lo, mut hi) = (0.0, base.mdp.eta.max(0.05) * 8.0);
    let mut best: Option<(f64, Metrics)> = None;
    for _ in 0..max_iter.max(1) {
        let eta = 0.5 * (lo + hi);
        let mut cfg = base.clone();
        cfg.mdp.eta = eta;
        let m = run_single(&cfg, seed, &mut DatasetCache::default())?.metrics;
        let gap = m.ad_exposure - target;
        if best
            .as_ref()
            .is_none_or(|(_, b)| gap.abs() < (b.ad_exposure - target).abs())
        {
            best = Some((eta, m));
        }
        if gap.abs() <= tolerance {
            break;
        }
        if gap > 0.0 {
            lo = eta;
        } else {
            hi = eta;
        }
    }
    Ok(best.expect("at least one iteration"))
}
