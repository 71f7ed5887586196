//! Synthetic feed environment: catalog generation, per-request candidate
//! ranking, and a logistic user-behavior model that produces page outcomes.
//!
//! The behavior model makes every key flag of an item shift the click logit by
//! the user's preference weight for that flag, so the reconstruction labels
//! causally drive clicks, orders and pull-downs.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Policy;
use crate::mdp::{
    compute_reward, Action, Context, Item, MdpConfig, PageOutcome, Role, State, UserProfile,
};

/// Number of user sparse fields (segment, region).
pub const USER_FIELDS: usize = 2;
/// Number of context sparse fields (time slot, location).
pub const CONTEXT_FIELDS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub num_ads: usize,
    pub num_organics: usize,
    pub num_users: usize,
    /// Binary key factors carried by every item, in decreasing importance.
    pub num_key_flags: usize,
    pub num_categories: usize,
    pub quality_tiers: usize,
    /// Cardinality of each flag-carrying item field; must be even.
    pub flag_field_cardinality: usize,
    /// Buckets of the value field: fee buckets for organics, then revenue
    /// buckets for ads, so the field also encodes the role.
    pub value_buckets: usize,
    pub user_segments: usize,
    pub user_regions: usize,
    pub time_slots: usize,
    pub locations: usize,
    /// Dimension of the hidden user/item affinity vectors.
    pub latent_dim: usize,
    /// `N_b`, length of every behavior sequence.
    pub num_behaviors: usize,
    /// `N_ad` candidates offered per page.
    pub page_ads: usize,
    /// `N_oi` candidates offered per page.
    pub page_organics: usize,
    pub request_pool_ads: usize,
    pub request_pool_organics: usize,
    pub click_base_rate: f64,
    pub order_base_rate: f64,
    pub pull_down_base_rate: f64,
    /// Per-slot probability that the user stops scrolling.
    pub scroll_stop_rate: f64,
    /// Click-logit penalty per ad displayed so far on the page.
    pub ad_fatigue: f64,
    /// Pull-down-logit penalty per ad on the page.
    pub pull_down_fatigue: f64,
    /// Log-scale spread of the per-segment multiplier on both fatigue terms
    /// (mean multiplier stays 1).
    pub ad_sensitivity_spread: f64,
    /// Pull-down-logit gain per click on the page.
    pub engagement_gain: f64,
    /// Scale of the per-user preference weights on key flags.
    pub preference_gain: f64,
    pub affinity_gain: f64,
    pub quality_gain: f64,
    /// Order-logit bonus during meal-time context slots.
    pub mealtime_gain: f64,
    pub ranking_noise: f64,
    /// Log-scale spread of ad revenue values (mean value stays 1).
    pub ad_value_spread: f64,
    /// Weight of user relevance in the ad ranking score; the rest of the
    /// score is the log revenue value (bid).
    pub ad_rank_relevance: f64,
    pub max_pages: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_ads: 500,
            num_organics: 1000,
            num_users: 1000,
            num_key_flags: 3,
            num_categories: 16,
            quality_tiers: 5,
            flag_field_cardinality: 4,
            value_buckets: 4,
            user_segments: 8,
            user_regions: 4,
            time_slots: 4,
            locations: 4,
            latent_dim: 4,
            num_behaviors: 10,
            page_ads: 4,
            page_organics: 10,
            request_pool_ads: 40,
            request_pool_organics: 80,
            click_base_rate: 0.08,
            order_base_rate: 0.3,
            pull_down_base_rate: 0.7,
            scroll_stop_rate: 0.15,
            ad_fatigue: 0.6,
            pull_down_fatigue: 0.5,
            ad_sensitivity_spread: 1.5,
            engagement_gain: 0.3,
            preference_gain: 1.0,
            affinity_gain: 0.6,
            quality_gain: 1.0,
            mealtime_gain: 0.5,
            ranking_noise: 0.5,
            ad_value_spread: 0.8,
            ad_rank_relevance: 0.3,
            max_pages: 5,
            seed: 7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, mdp: &MdpConfig) -> Result<()> {
        let rates = [
            ("click_base_rate", self.click_base_rate),
            ("order_base_rate", self.order_base_rate),
            ("pull_down_base_rate", self.pull_down_base_rate),
            ("scroll_stop_rate", self.scroll_stop_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!(
                    "sim.{name} must be in [0,1], got {r}"
                )));
            }
        }
        let cards = [
            ("num_categories", self.num_categories),
            ("quality_tiers", self.quality_tiers),
            ("flag_field_cardinality", self.flag_field_cardinality),
            ("value_buckets", self.value_buckets),
            ("user_segments", self.user_segments),
            ("user_regions", self.user_regions),
            ("time_slots", self.time_slots),
            ("locations", self.locations),
            ("latent_dim", self.latent_dim),
            ("num_behaviors", self.num_behaviors),
            ("max_pages", self.max_pages),
            ("num_users", self.num_users),
        ];
        for (name, c) in cards {
            if c == 0 {
                return Err(Error::Config(format!("sim.{name} must be >= 1")));
            }
        }
        if self.flag_field_cardinality % 2 != 0 {
            return Err(Error::Config(
                "sim.flag_field_cardinality must be even".into(),
            ));
        }
        if mdp.num_factors > self.num_key_flags {
            return Err(Error::Config(format!(
                "mdp.num_factors ({}) exceeds sim.num_key_flags ({})",
                mdp.num_factors, self.num_key_flags
            )));
        }
        if self.page_ads + self.page_organics < mdp.slots {
            return Err(Error::InfeasibleState {
                slots: mdp.slots,
                n_ads: self.page_ads,
                n_organics: self.page_organics,
            });
        }
        Ok(())
    }

    /// Cardinality of each item sparse field: category, quality tier, one
    /// field per key flag, then the value field.
    pub fn item_cardinalities(&self) -> Vec<usize> {
        let mut c = vec![self.num_categories, self.quality_tiers];
        c.extend(std::iter::repeat_n(
            self.flag_field_cardinality,
            self.num_key_flags,
        ));
        c.push(2 * self.value_buckets);
        c
    }

    pub fn user_cardinalities(&self) -> Vec<usize> {
        vec![self.user_segments, self.user_regions]
    }

    pub fn context_cardinalities(&self) -> Vec<usize> {
        vec![self.time_slots, self.locations]
    }

    /// Stable content hash of the configuration.
    pub fn hash(&self) -> String {
        crate::config::content_hash(self)
    }
}

/// Hidden per-item ground truth, never exposed through [`Item`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTruth {
    pub latent: Vec<f64>,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    /// Indexed by item id: ads first, then organics.
    pub items: Vec<Item>,
    pub item_truth: Vec<ItemTruth>,
    /// Indexed by user id.
    pub users: Vec<Arc<UserProfile>>,
    pub user_latent: Vec<Vec<f64>>,
    /// Hidden multiplier on the ad fatigue terms, indexed by user id.
    pub user_ad_sensitivity: Vec<f64>,
    pub num_ads: usize,
}

impl Catalog {
    pub fn item(&self, id: u32) -> Option<&Item> {
        self.items.get(id as usize)
    }

    pub fn user(&self, id: u32) -> Result<&Arc<UserProfile>> {
        self.users.get(id as usize).ok_or(Error::UnknownUser(id))
    }

    pub fn ad_ids(&self) -> std::ops::Range<u32> {
        0..self.num_ads as u32
    }

    pub fn organic_ids(&self) -> std::ops::Range<u32> {
        self.num_ads as u32..self.items.len() as u32
    }

    pub fn ids_for(&self, role: Role) -> std::ops::Range<u32> {
        match role {
            Role::Ad => self.ad_ids(),
            Role::Organic => self.organic_ids(),
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub(crate) fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Deterministically derives an independent stream seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = base
        ^ stream
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_catalog(config: &SimConfig, seed: u64) -> Catalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = config.latent_dim;
    let flags = config.num_key_flags;
    let scale = 1.0 / (dim as f64).sqrt();

    let category_centers: Vec<Vec<f64>> = (0..config.num_categories)
        .map(|_| (0..dim).map(|_| normal(&mut rng) * scale).collect())
        .collect();
    let category_flag_prob: Vec<Vec<f64>> = (0..config.num_categories)
        .map(|_| (0..flags).map(|_| rng.random_range(0.1..0.9)).collect())
        .collect();

    let half = (config.flag_field_cardinality / 2) as u32;
    let tiers = config.quality_tiers;
    let total = config.num_ads + config.num_organics;
    let mut items = Vec::with_capacity(total);
    let mut item_truth = Vec::with_capacity(total);
    for id in 0..total {
        let role = if id < config.num_ads {
            Role::Ad
        } else {
            Role::Organic
        };
        let category = rng.random_range(0..config.num_categories);
        let tier = rng.random_range(0..tiers);
        let key_flags: Vec<bool> = category_flag_prob[category]
            .iter()
            .map(|&p| rng.random_bool(p))
            .collect();
        let mut sparse_features = vec![category as u32, tier as u32];
        for &f in &key_flags {
            sparse_features.push(u32::from(f) * half + rng.random_range(0..half));
        }
        let buckets = config.value_buckets;
        let fee_value = rng.random_range(0.5..1.5);
        let (ad_revenue_value, value_field) = match role {
            Role::Ad => {
                let s = config.ad_value_spread;
                let z = normal(&mut rng);
                // equal-width buckets of the underlying normal over [-1.5, 1.5]
                let b = (((z + 1.5) / 3.0) * buckets as f64)
                    .floor()
                    .clamp(0.0, (buckets - 1) as f64) as usize;
                ((s * z - 0.5 * s * s).exp(), buckets + b)
            }
            Role::Organic => (
                0.0,
                (((fee_value - 0.5) * buckets as f64) as usize).min(buckets - 1),
            ),
        };
        sparse_features.push(value_field as u32);
        let latent = category_centers[category]
            .iter()
            .map(|c| c + 0.3 * scale * normal(&mut rng))
            .collect();
        let quality = if tiers > 1 {
            tier as f64 / (tiers - 1) as f64 - 0.5
        } else {
            0.0
        };
        items.push(Item {
            id: id as u32,
            role,
            sparse_features,
            key_flags,
            ad_revenue_value,
            fee_value,
        });
        item_truth.push(ItemTruth { latent, quality });
    }

    // Factor m matters more than factor m+1 on average.
    let importance: Vec<f64> = (0..flags)
        .map(|m| (flags - m) as f64 / flags as f64)
        .collect();
    let segment_prefs: Vec<Vec<f64>> = (0..config.user_segments)
        .map(|_| {
            importance
                .iter()
                .map(|&w| w * rng.random_range(-0.5..2.0))
                .collect()
        })
        .collect();
    let segment_centers: Vec<Vec<f64>> = (0..config.user_segments)
        .map(|_| (0..dim).map(|_| normal(&mut rng) * scale).collect())
        .collect();

    let mut catalog = Catalog {
        items,
        item_truth,
        users: Vec::with_capacity(config.num_users),
        user_latent: Vec::with_capacity(config.num_users),
        user_ad_sensitivity: Vec::with_capacity(config.num_users),
        num_ads: config.num_ads,
    };
    // separate stream so the sensitivity knob leaves every other draw alone
    let mut sens_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xad5));
    let spread = config.ad_sensitivity_spread;
    let segment_sensitivity: Vec<f64> = (0..config.user_segments)
        .map(|_| (spread * normal(&mut sens_rng) - 0.5 * spread * spread).exp())
        .collect();
    let null = Item::null(config.item_cardinalities().len(), flags);
    for uid in 0..config.num_users {
        let segment = rng.random_range(0..config.user_segments);
        let region = rng.random_range(0..config.user_regions);
        let preference_weights: Vec<f64> = segment_prefs[segment]
            .iter()
            .map(|&p| config.preference_gain * (p + 0.2 * normal(&mut rng)))
            .collect();
        let latent: Vec<f64> = segment_centers[segment]
            .iter()
            .map(|c| c + 0.3 * scale * normal(&mut rng))
            .collect();

        let mut behaviors = Vec::with_capacity(config.num_behaviors);
        if total > 0 {
            let real = rng.random_range(config.num_behaviors.div_ceil(2)..=config.num_behaviors);
            for _ in 0..real {
                // best of a few random draws, biased toward relevant items
                let mut best: Option<(f64, usize)> = None;
                for _ in 0..8 {
                    let idx = rng.random_range(0..total);
                    let score = relevance_parts(
                        config,
                        &catalog,
                        &latent,
                        &preference_weights,
                        idx,
                        &catalog.items[idx].key_flags,
                    ) + normal(&mut rng);
                    if best.is_none_or(|(s, _)| score > s) {
                        best = Some((score, idx));
                    }
                }
                behaviors.push(catalog.items[best.expect("at least one draw").1].clone());
            }
        }
        behaviors.resize(config.num_behaviors, null.clone());

        catalog.users.push(Arc::new(UserProfile {
            id: uid as u32,
            sparse_features: vec![segment as u32, region as u32],
            behaviors,
            preference_weights,
        }));
        catalog.user_latent.push(latent);
        catalog
            .user_ad_sensitivity
            .push(segment_sensitivity[segment] * (0.2 * normal(&mut sens_rng) - 0.02).exp());
    }
    catalog
}

fn relevance_parts(
    config: &SimConfig,
    catalog: &Catalog,
    user_latent: &[f64],
    prefs: &[f64],
    item_idx: usize,
    key_flags: &[bool],
) -> f64 {
    let truth = &catalog.item_truth[item_idx];
    let affinity: f64 = user_latent
        .iter()
        .zip(&truth.latent)
        .map(|(a, b)| a * b)
        .sum();
    let pref: f64 = prefs
        .iter()
        .zip(key_flags)
        .map(|(w, &f)| if f { *w } else { 0.0 })
        .sum();
    config.quality_gain * truth.quality + config.affinity_gain * affinity + pref
}

#[derive(Debug, Clone, Copy)]
struct PoolEntry {
    id: u32,
    score: f64,
}

/// Result of one page interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub outcome: PageOutcome,
    pub reward: f64,
    pub next: Option<Arc<State>>,
}

/// One displayed page produced by [`Simulator::run_requests`].
#[derive(Debug, Clone)]
pub struct PageEvent {
    pub request_id: u64,
    pub user_id: u32,
    pub state: Arc<State>,
    pub action: Action,
    pub result: StepResult,
}

const POLICY_STREAM: u64 = 0x9e37_79b9;

pub struct Simulator {
    pub config: SimConfig,
    pub mdp: MdpConfig,
    pub catalog: Arc<Catalog>,
}

impl Simulator {
    pub fn new(config: SimConfig, mdp: MdpConfig) -> Result<Self> {
        config.validate(&mdp)?;
        mdp.validate()?;
        let catalog = Arc::new(generate_catalog(&config, config.seed));
        Ok(Self {
            config,
            mdp,
            catalog,
        })
    }

    pub fn with_catalog(config: SimConfig, mdp: MdpConfig, catalog: Arc<Catalog>) -> Result<Self> {
        config.validate(&mdp)?;
        mdp.validate()?;
        Ok(Self {
            config,
            mdp,
            catalog,
        })
    }

    pub fn slots(&self) -> usize {
        self.mdp.slots
    }

    /// Ground-truth relevance of an item for a user: quality, latent affinity
    /// and the preference-weighted key flags.
    pub fn relevance(&self, user: &UserProfile, item: &Item) -> f64 {
        let idx = item.id as usize;
        let latent = &self.catalog.user_latent[user.id as usize];
        relevance_parts(
            &self.config,
            &self.catalog,
            latent,
            &user.preference_weights,
            idx,
            &item.key_flags,
        )
    }

    pub fn start_request(&self, user_id: u32, seed: u64) -> Result<Episode<'_>> {
        let user = self.catalog.user(user_id)?.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let context = Context {
            sparse_features: vec![
                rng.random_range(0..self.config.time_slots) as u32,
                rng.random_range(0..self.config.locations) as u32,
            ],
        };
        let mut episode = Episode {
            sim: self,
            user,
            context,
            ad_pool: Vec::new(),
            organic_pool: Vec::new(),
            displayed: HashSet::new(),
            rng,
            state: None,
        };
        for role in [Role::Ad, Role::Organic] {
            let (want, page) = match role {
                Role::Ad => (self.config.request_pool_ads, self.config.page_ads),
                Role::Organic => (self.config.request_pool_organics, self.config.page_organics),
            };
            let available = self.catalog.ids_for(role).len();
            if available < page {
                return Err(Error::InsufficientPool {
                    role: role_name(role),
                    needed: page,
                    available,
                });
            }
            episode.extend_pool(role, want.max(page));
        }
        let state = episode.build_page(0);
        state.check_feasible(self.slots())?;
        episode.state = Some(Arc::new(state));
        Ok(episode)
    }

    /// Drives `num_requests` requests under `policy`, handing every page to
    /// `sink` in request/page order.
    ///
    /// Users and request seeds come from `seed` alone, and each page's behavior
    /// draws from its own stream of the request seed, so two policies run with
    /// the same seed face the same users, candidates and random numbers.
    pub fn run_requests<P, F>(
        &self,
        num_requests: usize,
        seed: u64,
        policy: &mut P,
        mut sink: F,
    ) -> Result<()>
    where
        P: Policy + ?Sized,
        F: FnMut(PageEvent) -> Result<()>,
    {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        for request in 0..num_requests {
            let user_id = master.random_range(0..self.config.num_users) as u32;
            let request_seed: u64 = master.random();
            let mut episode = self.start_request(user_id, request_seed)?;
            let mut policy_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(request_seed, POLICY_STREAM));
            while let Some(state) = episode.state().cloned() {
                let action = policy.act(&state, &self.mdp, &mut policy_rng)?;
                let mut behavior_rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(request_seed, state.page_index as u64));
                let result = episode.step(&action, &mut behavior_rng)?;
                sink(PageEvent {
                    request_id: request as u64,
                    user_id,
                    state,
                    action,
                    result,
                })?;
            }
        }
        Ok(())
    }

    /// Samples the user's response to `action` on `state` without advancing
    /// any request.
    pub fn sample_outcome(
        &self,
        state: &State,
        action: &Action,
        rng: &mut impl Rng,
    ) -> Result<PageOutcome> {
        let k = self.slots();
        if action.len() != k {
            return Err(Error::SlotCountMismatch {
                expected: k,
                got: action.len(),
            });
        }
        let shown = state.arrange(action)?;
        let cfg = &self.config;

        let mut depth = k;
        for slot in 1..k {
            if rng.random::<f64>() < cfg.scroll_stop_rate {
                depth = slot;
                break;
            }
        }

        let base = logit(cfg.click_base_rate);
        let sensitivity = self
            .catalog
            .user_ad_sensitivity
            .get(state.user.id as usize)
            .copied()
            .unwrap_or(1.0);
        let mut clicks = vec![0u8; k];
        let mut ads_so_far = 0usize;
        let mut relevances = Vec::with_capacity(k);
        for (slot, item) in shown.iter().enumerate() {
            if item.role == Role::Ad {
                ads_so_far += 1;
            }
            let rel = self.relevance(&state.user, item);
            relevances.push(rel);
            // one uniform per slot keeps paired runs coupled
            let u: f64 = rng.random();
            if slot < depth {
                let p = sigmoid(base + rel - sensitivity * cfg.ad_fatigue * ads_so_far as f64);
                clicks[slot] = u8::from(u < p);
            }
        }
        let n_clicks: usize = clicks.iter().map(|&c| c as usize).sum();

        let u_order: f64 = rng.random();
        let u_pick: f64 = rng.random();
        let mut ordered_slot = None;
        if n_clicks > 0 {
            let best = (0..k)
                .filter(|&s| clicks[s] == 1)
                .map(|s| relevances[s])
                .fold(f64::NEG_INFINITY, f64::max);
            let meal = if is_mealtime(&state.context) {
                cfg.mealtime_gain
            } else {
                0.0
            };
            let p_order = sigmoid(logit(cfg.order_base_rate) + meal + best);
            if u_order < p_order {
                let total_fee: f64 = (0..k)
                    .filter(|&s| clicks[s] == 1)
                    .map(|s| shown[s].fee_value)
                    .sum();
                let mut acc = 0.0;
                let target = u_pick * total_fee;
                for s in (0..k).filter(|&s| clicks[s] == 1) {
                    acc += shown[s].fee_value;
                    ordered_slot = Some(s);
                    if acc >= target {
                        break;
                    }
                }
            }
        }
        let placed_order = ordered_slot.is_some();

        let u_pull: f64 = rng.random();
        let last_page = state.page_index + 1 >= cfg.max_pages;
        let pulled_down = if placed_order || depth < k || last_page {
            false
        } else {
            let p = sigmoid(
                logit(cfg.pull_down_base_rate)
                    - sensitivity * cfg.pull_down_fatigue * action.num_ads() as f64
                    + cfg.engagement_gain * n_clicks as f64,
            );
            u_pull < p
        };

        let ad_revenue = (0..k)
            .filter(|&s| clicks[s] == 1 && shown[s].role == Role::Ad)
            .map(|s| shown[s].ad_revenue_value)
            .sum();
        let fee = ordered_slot.map_or(0.0, |s| shown[s].fee_value);
        Ok(PageOutcome {
            clicks,
            placed_order,
            ordered_slot,
            pulled_down,
            scroll_depth: depth,
            ad_revenue,
            fee,
            experience: PageOutcome::experience_for(placed_order, n_clicks),
        })
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Ad => "ads",
        Role::Organic => "organics",
    }
}

fn is_mealtime(ctx: &Context) -> bool {
    matches!(ctx.sparse_features.first(), Some(1) | Some(2))
}

/// One request: the ranked candidate pools and what has been shown so far.
pub struct Episode<'a> {
    sim: &'a Simulator,
    user: Arc<UserProfile>,
    context: Context,
    ad_pool: Vec<PoolEntry>,
    organic_pool: Vec<PoolEntry>,
    displayed: HashSet<u32>,
    rng: ChaCha8Rng,
    state: Option<Arc<State>>,
}

impl Episode<'_> {
    /// Current state, or `None` once the request has terminated.
    pub fn state(&self) -> Option<&Arc<State>> {
        self.state.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.state.is_none()
    }

    /// Adds up to `count` fresh items of `role` to the pool, ranked among
    /// themselves and appended after existing entries.
    fn extend_pool(&mut self, role: Role, count: usize) {
        let catalog = &self.sim.catalog;
        let ids = catalog.ids_for(role);
        let in_pool: HashSet<u32> = self.pool(role).iter().map(|e| e.id).collect();
        let excluded = in_pool.len()
            + self
                .displayed
                .iter()
                .filter(|&&id| ids.contains(&id))
                .count();
        let free = ids.len().saturating_sub(excluded);
        let count = count.min(free);
        if count == 0 {
            return;
        }
        let mut fresh = Vec::with_capacity(count);
        if count * 4 >= free {
            let candidates: Vec<u32> = ids
                .filter(|id| !in_pool.contains(id) && !self.displayed.contains(id))
                .collect();
            let picks = sample(&mut self.rng, candidates.len(), count);
            fresh.extend(picks.iter().map(|i| candidates[i]));
        } else {
            let mut seen = HashSet::new();
            while fresh.len() < count {
                let id = self.rng.random_range(ids.clone());
                if !in_pool.contains(&id) && !self.displayed.contains(&id) && seen.insert(id) {
                    fresh.push(id);
                }
            }
        }
        let noise = self.sim.config.ranking_noise;
        let mut entries: Vec<PoolEntry> = fresh
            .into_iter()
            .map(|id| {
                let item = &catalog.items[id as usize];
                let rel = self.sim.relevance(&self.user, item);
                let base = match role {
                    Role::Ad => {
                        item.ad_revenue_value.ln() + self.sim.config.ad_rank_relevance * rel
                    }
                    Role::Organic => rel,
                };
                let score = base + noise * normal(&mut self.rng);
                PoolEntry { id, score }
            })
            .collect();
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
        self.pool_mut(role).extend(entries);
    }

    fn pool(&self, role: Role) -> &Vec<PoolEntry> {
        match role {
            Role::Ad => &self.ad_pool,
            Role::Organic => &self.organic_pool,
        }
    }

    fn pool_mut(&mut self, role: Role) -> &mut Vec<PoolEntry> {
        match role {
            Role::Ad => &mut self.ad_pool,
            Role::Organic => &mut self.organic_pool,
        }
    }

    fn build_page(&mut self, page_index: usize) -> State {
        let cfg = &self.sim.config;
        for (role, need) in [(Role::Ad, cfg.page_ads), (Role::Organic, cfg.page_organics)] {
            let have = self.pool(role).len();
            if have < need {
                self.extend_pool(role, need - have);
            }
        }
        let items = &self.sim.catalog.items;
        let take = |pool: &[PoolEntry], n: usize| -> Vec<Item> {
            pool.iter()
                .take(n)
                .map(|e| items[e.id as usize].clone())
                .collect()
        };
        State {
            ads: take(&self.ad_pool, cfg.page_ads),
            organics: take(&self.organic_pool, cfg.page_organics),
            user: self.user.clone(),
            context: self.context.clone(),
            page_index,
        }
    }

    /// Shows `action` on the current page and samples the user's response.
    pub fn step(&mut self, action: &Action, rng: &mut impl RngCore) -> Result<StepResult> {
        let state = self
            .state
            .clone()
            .ok_or_else(|| Error::Config("step called on a finished request".into()))?;
        let mut outcome = self.sim.sample_outcome(&state, action, rng)?;

        let shown: Vec<u32> = state.arrange(action)?.iter().map(|i| i.id).collect();
        self.displayed.extend(shown.iter().copied());
        self.ad_pool.retain(|e| !shown.contains(&e.id));
        self.organic_pool.retain(|e| !shown.contains(&e.id));

        let mut next = None;
        if outcome.pulled_down {
            let page = self.build_page(state.page_index + 1);
            if page.is_feasible(self.sim.slots()) {
                next = Some(Arc::new(page));
            } else {
                // catalog exhausted: the feed ends here
                outcome.pulled_down = false;
            }
        }
        let reward = compute_reward(&outcome, self.sim.mdp.eta);
        self.state = next.clone();
        Ok(StepResult {
            outcome,
            reward,
            next,
        })
    }
}
