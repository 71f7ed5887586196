//! Domain types of the allocation MDP and the pure functions that define it:
//! which actions are feasible in a state and how a page outcome turns into a
//! scalar reward.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved id used to pad a user's behavior sequence up to `N_b`.
pub const NULL_ITEM_ID: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Ad,
    Organic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: u32,
    pub role: Role,
    pub sparse_features: Vec<u32>,
    /// Binary key factors ordered by importance (fee-free, promotion, brand, ...).
    pub key_flags: Vec<bool>,
    pub ad_revenue_value: f64,
    pub fee_value: f64,
}

impl Item {
    /// Padding entry for behavior sequences. Its features are all zero and it is
    /// masked out of attention.
    pub fn null(num_features: usize, num_flags: usize) -> Self {
        Self {
            id: NULL_ITEM_ID,
            role: Role::Organic,
            sparse_features: vec![0; num_features],
            key_flags: vec![false; num_flags],
            ad_revenue_value: 0.0,
            fee_value: 0.0,
        }
    }

    pub fn is_null(&self) -> bool {
        self.id == NULL_ITEM_ID
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: u32,
    pub sparse_features: Vec<u32>,
    /// Exactly `N_b` entries; missing history is padded with [`Item::null`].
    pub behaviors: Vec<Item>,
    /// Simulator ground truth. Never read by the agent.
    pub preference_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub sparse_features: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub ads: Vec<Item>,
    pub organics: Vec<Item>,
    pub user: Arc<UserProfile>,
    pub context: Context,
    pub page_index: usize,
}

/// Where the item shown in one slot comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotSource {
    Ad(usize),
    Organic(usize),
}

impl State {
    pub fn is_feasible(&self, slots: usize) -> bool {
        self.ads.len() + self.organics.len() >= slots
    }

    pub fn check_feasible(&self, slots: usize) -> Result<()> {
        if self.is_feasible(slots) {
            Ok(())
        } else {
            Err(Error::InfeasibleState {
                slots,
                n_ads: self.ads.len(),
                n_organics: self.organics.len(),
            })
        }
    }

    /// Items in display order under `action`.
    pub fn arrange(&self, action: &Action) -> Result<Vec<&Item>> {
        let sources = action.slot_sources(self.ads.len(), self.organics.len())?;
        Ok(sources
            .into_iter()
            .map(|src| match src {
                SlotSource::Ad(i) => &self.ads[i],
                SlotSource::Organic(i) => &self.organics[i],
            })
            .collect())
    }
}

/// One bit per slot; `true` shows an ad.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action {
    pub slots: Vec<bool>,
}

impl Action {
    pub fn new(slots: Vec<bool>) -> Self {
        Self { slots }
    }

    pub fn no_ads(k: usize) -> Self {
        Self {
            slots: vec![false; k],
        }
    }

    /// Parses a string of `0`/`1` characters.
    pub fn from_bits(bits: &str) -> Option<Self> {
        bits.chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Self::new)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_ads(&self) -> usize {
        self.slots.iter().filter(|&&b| b).count()
    }

    pub fn num_organics(&self) -> usize {
        self.len() - self.num_ads()
    }

    pub fn is_feasible_for(&self, n_ads: usize, n_organics: usize) -> bool {
        self.num_ads() <= n_ads && self.num_organics() <= n_organics
    }

    /// Maps each slot to the next unused entry of the ads or organics list,
    /// preserving the order within each list.
    pub fn slot_sources(&self, n_ads: usize, n_organics: usize) -> Result<Vec<SlotSource>> {
        if !self.is_feasible_for(n_ads, n_organics) {
            return Err(Error::InfeasibleAction {
                action: self.to_string(),
                n_ads,
                n_organics,
            });
        }
        let (mut next_ad, mut next_organic) = (0, 0);
        Ok(self
            .slots
            .iter()
            .map(|&is_ad| {
                if is_ad {
                    next_ad += 1;
                    SlotSource::Ad(next_ad - 1)
                } else {
                    next_organic += 1;
                    SlotSource::Organic(next_organic - 1)
                }
            })
            .collect())
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.slots {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageOutcome {
    pub clicks: Vec<u8>,
    pub placed_order: bool,
    /// Slot (0-based) of the ordered item, if any.
    pub ordered_slot: Option<usize>,
    pub pulled_down: bool,
    /// Deepest slot viewed, 1-based, in `[1, K]`.
    pub scroll_depth: usize,
    pub ad_revenue: f64,
    pub fee: f64,
    pub experience: u8,
}

impl PageOutcome {
    pub fn num_clicks(&self) -> usize {
        self.clicks.iter().map(|&c| c as usize).sum()
    }

    /// Experience score: 2 for an order, 1 for clicks without order, 0 otherwise.
    pub fn experience_for(placed_order: bool, num_clicks: usize) -> u8 {
        if placed_order {
            2
        } else if num_clicks > 0 {
            1
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub request_id: u64,
    pub state: Arc<State>,
    pub action: Action,
    pub reward: f64,
    /// `None` when the request ended on this page.
    pub next_state: Option<Arc<State>>,
    pub outcome: PageOutcome,
    /// `K x M` reconstruction labels.
    pub recon_labels: Vec<Vec<u8>>,
}

impl TransitionRecord {
    pub fn is_terminal(&self) -> bool {
        self.next_state.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdpConfig {
    /// Slots per page.
    pub slots: usize,
    pub gamma: f64,
    /// Weight of the experience score in the reward.
    pub eta: f64,
    /// Number of key factors used as reconstruction labels.
    pub num_factors: usize,
    /// Per-factor reconstruction weights; empty means rank-based defaults.
    pub beta: Vec<f64>,
    pub max_ads_per_page: Option<usize>,
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self {
            slots: 10,
            gamma: 0.9,
            eta: 0.05,
            num_factors: 3,
            beta: Vec::new(),
            max_ads_per_page: None,
        }
    }
}

impl MdpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.slots > 20 {
            return Err(Error::Config(format!(
                "mdp.slots must be in 1..=20, got {}",
                self.slots
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "mdp.gamma must be in [0,1], got {}",
                self.gamma
            )));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Config(format!(
                "mdp.eta must be >= 0, got {}",
                self.eta
            )));
        }
        if self.num_factors == 0 {
            return Err(Error::Config("mdp.num_factors must be >= 1".into()));
        }
        if !self.beta.is_empty() {
            if self.beta.len() != self.num_factors {
                return Err(Error::Config(format!(
                    "mdp.beta has {} weights, expected {}",
                    self.beta.len(),
                    self.num_factors
                )));
            }
            if self.beta.iter().any(|&b| !(b > 0.0)) {
                return Err(Error::Config("mdp.beta weights must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn beta_weights(&self) -> Vec<f64> {
        if self.beta.is_empty() {
            rank_weights(self.num_factors)
        } else {
            self.beta.clone()
        }
    }

    pub fn feasible_actions(&self, n_ads: usize, n_organics: usize) -> Result<Vec<Action>> {
        let mut actions = enumerate_feasible_actions(self.slots, n_ads, n_organics)?;
        if let Some(cap) = self.max_ads_per_page {
            actions.retain(|a| a.num_ads() <= cap);
        }
        Ok(actions)
    }
}

/// `beta_m = (M - m + 1) / sum(1..=M)` for rank `m` (1-based).
pub fn rank_weights(m: usize) -> Vec<f64> {
    let total = (m * (m + 1) / 2) as f64;
    (1..=m).map(|rank| (m - rank + 1) as f64 / total).collect()
}

/// All `x in {0,1}^K` with at most `n_ads` ones and at most `n_organics` zeros,
/// in lexicographic order.
pub fn enumerate_feasible_actions(
    k: usize,
    n_ads: usize,
    n_organics: usize,
) -> Result<Vec<Action>> {
    if k == 0 || n_ads + n_organics < k {
        return Err(Error::InfeasibleState {
            slots: k,
            n_ads,
            n_organics,
        });
    }
    let mut out = Vec::new();
    for code in 0u32..(1u32 << k) {
        let ones = code.count_ones() as usize;
        if ones <= n_ads && k - ones <= n_organics {
            // Slot 1 is the most significant bit so integer order is lexicographic.
            let slots = (0..k).map(|i| code >> (k - 1 - i) & 1 == 1).collect();
            out.push(Action::new(slots));
        }
    }
    Ok(out)
}

/// `r = r_ad + r_fee + eta * r_ex`.
pub fn compute_reward(outcome: &PageOutcome, eta: f64) -> f64 {
    outcome.ad_revenue + outcome.fee + eta * f64::from(outcome.experience)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(ad: f64, fee: f64, ex: u8) -> PageOutcome {
        PageOutcome {
            clicks: vec![0; 10],
            placed_order: ex == 2,
            ordered_slot: None,
            pulled_down: false,
            scroll_depth: 1,
            ad_revenue: ad,
            fee,
            experience: ex,
        }
    }

    fn brute_force(k: usize, n_ads: usize, n_org: usize) -> Vec<Vec<bool>> {
        let mut all: Vec<Vec<bool>> = vec![vec![]];
        for _ in 0..k {
            all = all
                .into_iter()
                .flat_map(|p| {
                    let mut a = p.clone();
                    a.push(false);
                    let mut b = p;
                    b.push(true);
                    [a, b]
                })
                .collect();
        }
        all.retain(|x| {
            let ones = x.iter().filter(|&&b| b).count();
            ones <= n_ads && k - ones <= n_org
        });
        all.sort();
        all
    }

    #[test]
    fn feasible_actions_small_case() {
        let got: Vec<String> = enumerate_feasible_actions(2, 1, 2)
            .unwrap()
            .iter()
            .map(|a| a.to_string())
            .collect();
        assert_eq!(got, ["00", "01", "10"]);
        assert_eq!(brute_force(2, 1, 2).len(), 3);
    }

    #[test]
    fn forced_and_unconstrained() {
        let forced = enumerate_feasible_actions(1, 0, 1).unwrap();
        assert_eq!(forced, vec![Action::new(vec![false])]);
        assert_eq!(enumerate_feasible_actions(10, 10, 10).unwrap().len(), 1024);
    }

    #[test]
    fn infeasible_state_is_rejected() {
        assert!(matches!(
            enumerate_feasible_actions(5, 2, 2),
            Err(Error::InfeasibleState { .. })
        ));
    }

    #[test]
    fn enumeration_matches_brute_force() {
        for k in 1..=7 {
            for n_ads in 0..=k + 1 {
                for n_org in 0..=k + 1 {
                    if n_ads + n_org < k {
                        continue;
                    }
                    let got: Vec<Vec<bool>> = enumerate_feasible_actions(k, n_ads, n_org)
                        .unwrap()
                        .into_iter()
                        .map(|a| a.slots)
                        .collect();
                    assert_eq!(
                        got,
                        brute_force(k, n_ads, n_org),
                        "k={k} ads={n_ads} org={n_org}"
                    );
                }
            }
        }
    }

    #[test]
    fn feasibility_is_monotone() {
        for k in 1..=6 {
            for n_ads in 0..=k {
                for n_org in 0..=k {
                    if n_ads + n_org < k {
                        continue;
                    }
                    let base = enumerate_feasible_actions(k, n_ads, n_org).unwrap();
                    for a in &base {
                        assert!(a.is_feasible_for(n_ads + 1, n_org));
                        assert!(a.is_feasible_for(n_ads, n_org + 1));
                    }
                }
            }
        }
    }

    #[test]
    fn reward_examples() {
        assert!((compute_reward(&outcome(1.0, 0.5, 2), 0.05) - 1.6).abs() < 1e-12);
        assert_eq!(compute_reward(&outcome(0.0, 0.0, 0), 0.05), 0.0);
        assert!((compute_reward(&outcome(0.2, 0.1, 1), 0.05) - 0.35).abs() < 1e-12);
    }

    #[test]
    fn reward_is_linear_in_components() {
        let eta = 0.3;
        let base = compute_reward(&outcome(0.4, 0.7, 1), eta);
        assert!((compute_reward(&outcome(1.4, 0.7, 1), eta) - base - 1.0).abs() < 1e-12);
        assert!((compute_reward(&outcome(0.4, 1.7, 1), eta) - base - 1.0).abs() < 1e-12);
        assert!((compute_reward(&outcome(0.4, 0.7, 2), eta) - base - eta).abs() < 1e-12);
    }

    #[test]
    fn rank_weights_are_normalized_and_descending() {
        let b = rank_weights(3);
        assert_eq!(b, vec![0.5, 2.0 / 6.0, 1.0 / 6.0]);
        assert!((rank_weights(7).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slot_sources_follow_worked_example() {
        let a = Action::from_bits("0010100001").unwrap();
        let src = a.slot_sources(3, 7).unwrap();
        use SlotSource::*;
        assert_eq!(
            src,
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
        assert!(a.slot_sources(2, 7).is_err());
    }

    #[test]
    fn ads_cap_filters_actions() {
        let cfg = MdpConfig {
            slots: 4,
            max_ads_per_page: Some(1),
            ..MdpConfig::default()
        };
        let acts = cfg.feasible_actions(4, 4).unwrap();
        assert_eq!(acts.len(), 5);
    }
}
