//! Offline log generation with a uniform exploratory policy, auxiliary label
//! extraction, contrastive sample construction, and on-disk persistence.
//!
//! On disk a dataset is two files sharing a base path: `<base>.manifest`, a
//! JSON [`DatasetManifest`], and `<base>.records`, one JSON object per
//! transition in request/page order.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::mdp::{
    Action, Context, Item, PageOutcome, Role, SlotSource, State, TransitionRecord, UserProfile,
};
use crate::simulator::{Catalog, Simulator};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub record_count: usize,
    pub num_requests: usize,
    pub seed: u64,
    pub sim_config_hash: String,
    pub slots: usize,
    pub num_factors: usize,
    pub contrastive_size: usize,
}

impl DatasetManifest {
    pub fn describe(
        log: &[TransitionRecord],
        sim: &Simulator,
        num_requests: usize,
        seed: u64,
        contrastive_size: usize,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            record_count: log.len(),
            num_requests,
            seed,
            sim_config_hash: sim.config.hash(),
            slots: sim.mdp.slots,
            num_factors: sim.mdp.num_factors,
            contrastive_size,
        }
    }
}

/// Rolls `num_requests` requests with the uniform-random policy and records
/// one transition per page.
pub fn run_logging_policy(
    sim: &Simulator,
    num_requests: usize,
    seed: u64,
) -> Result<Vec<TransitionRecord>> {
    let m = sim.mdp.num_factors;
    let mut log = Vec::new();
    sim.run_requests(
        num_requests,
        seed,
        &mut crate::eval::RandomPolicy::default(),
        |event| {
            let recon_labels = extract_reconstruction_labels(&event.state, &event.action, m)?;
            log.push(TransitionRecord {
                request_id: event.request_id,
                state: event.state,
                action: event.action,
                reward: event.result.reward,
                next_state: event.result.next,
                outcome: event.result.outcome,
                recon_labels,
            });
            Ok(())
        },
    )?;
    Ok(log)
}

/// `y[k][m]` = m-th key flag of the item displayed in slot `k`.
pub fn extract_reconstruction_labels(
    state: &State,
    action: &Action,
    num_factors: usize,
) -> Result<Vec<Vec<u8>>> {
    Ok(state
        .arrange(action)?
        .into_iter()
        .map(|item| {
            item.key_flags
                .iter()
                .take(num_factors)
                .map(|&f| u8::from(f))
                .collect()
        })
        .collect())
}

/// Per-slot clicks and the pull-down bit.
pub fn extract_behavior_labels(outcome: &PageOutcome) -> (Vec<u8>, u8) {
    (outcome.clicks.clone(), u8::from(outcome.pulled_down))
}

/// Keeps the first `scroll_depth` displayed items and swaps every later slot
/// for an unseen candidate of the same role. The action is unchanged.
///
/// Replacements come from the page's undisplayed candidates first and from
/// the catalog once those run out.
pub fn construct_positive(
    record: &TransitionRecord,
    catalog: &Catalog,
    rng: &mut impl Rng,
) -> Result<(State, Action)> {
    let state = &record.state;
    let action = &record.action;
    let k = action.len();
    let depth = record.outcome.scroll_depth.clamp(1, k);
    let mut positive = (**state).clone();
    if depth == k {
        return Ok((positive, action.clone()));
    }
    let sources = action.slot_sources(state.ads.len(), state.organics.len())?;
    let mut used: HashSet<u32> = state
        .ads
        .iter()
        .chain(&state.organics)
        .map(|i| i.id)
        .collect();
    let mut spare_ads: Vec<usize> = (action.num_ads()..state.ads.len()).collect();
    let mut spare_organics: Vec<usize> = (action.num_organics()..state.organics.len()).collect();

    for src in &sources[depth..] {
        let (list, idx, spare, role) = match *src {
            SlotSource::Ad(i) => (&mut positive.ads, i, &mut spare_ads, Role::Ad),
            SlotSource::Organic(i) => (
                &mut positive.organics,
                i,
                &mut spare_organics,
                Role::Organic,
            ),
        };
        if !spare.is_empty() {
            let j = spare.swap_remove(rng.random_range(0..spare.len()));
            list.swap(idx, j);
        } else {
            let item = sample_unseen(catalog, role, &used, rng).ok_or(Error::InsufficientPool {
                role: if role == Role::Ad { "ads" } else { "organics" },
                needed: 1,
                available: 0,
            })?;
            used.insert(item.id);
            list[idx] = item;
        }
    }
    Ok((positive, action.clone()))
}

fn sample_unseen(
    catalog: &Catalog,
    role: Role,
    used: &HashSet<u32>,
    rng: &mut impl Rng,
) -> Option<Item> {
    let ids = catalog.ids_for(role);
    if ids.is_empty() {
        return None;
    }
    for _ in 0..64 {
        let id = rng.random_range(ids.clone());
        if !used.contains(&id) {
            return catalog.item(id).cloned();
        }
    }
    let free: Vec<u32> = ids.filter(|id| !used.contains(id)).collect();
    if free.is_empty() {
        return None;
    }
    catalog.item(free[rng.random_range(0..free.len())]).cloned()
}

/// Indices of `count` records drawn uniformly without replacement among those
/// whose request differs from `anchor_request_id`.
pub fn sample_negatives(
    log: &[TransitionRecord],
    anchor_request_id: u64,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let pool: Vec<usize> = (0..log.len())
        .filter(|&i| log[i].request_id != anchor_request_id)
        .collect();
    if pool.len() < count {
        return Err(Error::InsufficientNegatives {
            needed: count,
            available: pool.len(),
        });
    }
    Ok(sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// Faster variant of [`sample_negatives`] for large logs where records of one
/// request are a small fraction; same distribution.
pub(crate) fn sample_negatives_sparse(
    log: &[TransitionRecord],
    anchor_request_id: u64,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if log.len() < 8 * (count + 8) {
        return sample_negatives(log, anchor_request_id, count, rng);
    }
    let mut picked = Vec::with_capacity(count);
    let mut seen = HashSet::with_capacity(count);
    let mut attempts = 0;
    while picked.len() < count {
        attempts += 1;
        if attempts > 64 * (count + 1) {
            return sample_negatives(log, anchor_request_id, count, rng);
        }
        let i = rng.random_range(0..log.len());
        if log[i].request_id != anchor_request_id && seen.insert(i) {
            picked.push(i);
        }
    }
    Ok(picked)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    request_id: u64,
    page_index: usize,
    user: Arc<UserProfile>,
    context: Context,
    ads: Vec<Item>,
    organics: Vec<Item>,
    action: String,
    reward: f64,
    z: Vec<u8>,
    p: u8,
    scroll_depth: usize,
    placed_order: bool,
    ordered_slot: Option<usize>,
    ad_revenue: f64,
    fee: f64,
    experience: u8,
    y: Vec<Vec<u8>>,
    terminal: bool,
}

pub fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("manifest")
}

pub fn records_path(base: &Path) -> PathBuf {
    base.with_extension("records")
}

pub fn save_dataset(
    log: &[TransitionRecord],
    manifest: &DatasetManifest,
    base: &Path,
) -> Result<()> {
    if manifest.record_count != log.len() {
        return Err(Error::Config(format!(
            "manifest lists {} records but log has {}",
            manifest.record_count,
            log.len()
        )));
    }
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let rpath = records_path(base);
    let mut w = BufWriter::new(File::create(&rpath).at(&rpath)?);
    for rec in log {
        let (z, p) = extract_behavior_labels(&rec.outcome);
        let line = RecordLine {
            request_id: rec.request_id,
            page_index: rec.state.page_index,
            user: rec.state.user.clone(),
            context: rec.state.context.clone(),
            ads: rec.state.ads.clone(),
            organics: rec.state.organics.clone(),
            action: rec.action.to_string(),
            reward: rec.reward,
            z,
            p,
            scroll_depth: rec.outcome.scroll_depth,
            placed_order: rec.outcome.placed_order,
            ordered_slot: rec.outcome.ordered_slot,
            ad_revenue: rec.outcome.ad_revenue,
            fee: rec.outcome.fee,
            experience: rec.outcome.experience,
            y: rec.recon_labels.clone(),
            terminal: rec.is_terminal(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").at(&rpath)?;
    }
    w.flush().at(&rpath)?;

    let mpath = manifest_path(base);
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&mpath, text + "\n").at(&mpath)?;
    Ok(())
}

/// Loads a dataset and checks its schema version. Nothing is returned unless
/// every record parses and the count matches the manifest.
pub fn load_dataset(base: &Path) -> Result<(Vec<TransitionRecord>, DatasetManifest)> {
    let mpath = manifest_path(base);
    let text = std::fs::read_to_string(&mpath).at(&mpath)?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            expected: SCHEMA_VERSION,
            found: manifest.schema_version,
        });
    }

    let rpath = records_path(base);
    let body = std::fs::read_to_string(&rpath).at(&rpath)?;
    let corrupt = |reason: String| Error::Corrupt {
        path: rpath.clone(),
        reason,
    };
    if !body.is_empty() && !body.ends_with('\n') {
        return Err(corrupt("last record is truncated".into()));
    }
    let mut users: BTreeMap<u32, Arc<UserProfile>> = BTreeMap::new();
    let mut lines = Vec::with_capacity(manifest.record_count);
    for (n, raw) in body.lines().enumerate() {
        let mut line: RecordLine =
            serde_json::from_str(raw).map_err(|e| corrupt(format!("line {}: {e}", n + 1)))?;
        match users.get(&line.user.id) {
            Some(u) if **u == *line.user => line.user = u.clone(),
            _ => {
                users.insert(line.user.id, line.user.clone());
            }
        }
        lines.push(line);
    }
    if lines.len() != manifest.record_count {
        return Err(corrupt(format!(
            "manifest lists {} records, file has {}",
            manifest.record_count,
            lines.len()
        )));
    }

    let states: Vec<Arc<State>> = lines
        .iter()
        .map(|l| {
            Arc::new(State {
                ads: l.ads.clone(),
                organics: l.organics.clone(),
                user: l.user.clone(),
                context: l.context.clone(),
                page_index: l.page_index,
            })
        })
        .collect();
    let mut log = Vec::with_capacity(lines.len());
    for (i, line) in lines.into_iter().enumerate() {
        let action = Action::from_bits(&line.action)
            .ok_or_else(|| corrupt(format!("line {}: bad action {:?}", i + 1, line.action)))?;
        let next_state = if line.terminal {
            None
        } else {
            let next = states
                .get(i + 1)
                .filter(|_| log_request_matches(&states, i))
                .ok_or_else(|| {
                    corrupt(format!(
                        "line {}: non-terminal record without successor",
                        i + 1
                    ))
                })?;
            Some(next.clone())
        };
        let outcome = PageOutcome {
            clicks: line.z,
            placed_order: line.placed_order,
            ordered_slot: line.ordered_slot,
            pulled_down: line.p == 1,
            scroll_depth: line.scroll_depth,
            ad_revenue: line.ad_revenue,
            fee: line.fee,
            experience: line.experience,
        };
        log.push(TransitionRecord {
            request_id: line.request_id,
            state: states[i].clone(),
            action,
            reward: line.reward,
            next_state,
            outcome,
            recon_labels: line.y,
        });
    }
    for i in 0..log.len().saturating_sub(1) {
        if !log[i].is_terminal() && log[i + 1].request_id != log[i].request_id {
            return Err(corrupt(format!(
                "line {}: successor belongs to another request",
                i + 1
            )));
        }
    }
    Ok((log, manifest))
}

fn log_request_matches(states: &[Arc<State>], i: usize) -> bool {
    states[i + 1].page_index == states[i].page_index + 1
        && Arc::ptr_eq(&states[i + 1].user, &states[i].user)
}

/// [`load_dataset`] plus a check that the log came from `sim_config_hash`.
pub fn load_dataset_checked(
    base: &Path,
    sim_config_hash: &str,
) -> Result<(Vec<TransitionRecord>, DatasetManifest)> {
    let (log, manifest) = load_dataset(base)?;
    if manifest.sim_config_hash != sim_config_hash {
        return Err(Error::ConfigHash {
            expected: sim_config_hash.to_string(),
            found: manifest.sim_config_hash,
        });
    }
    Ok((log, manifest))
}
