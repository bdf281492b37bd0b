//! Synthetic world: topic-structured item embeddings, preference-driven
//! users, and simulated session feedback with known ground truth.
//!
//! Sessions are generated over raw item indices; `tokenize_sessions` joins
//! them with tokenizer output to produce decoder training samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::crqvae::{ItemEmbedding, SemanticID};
use crate::error::{HigrError, Result};
use crate::formats::{CorpusRecord, SampleRecord};
use crate::hsd::{SlateSample, UserContext};

fn d_n_topics() -> usize {
    8
}
fn d_n_items() -> usize {
    200
}
fn d_n_users() -> usize {
    50
}
fn d_d_in() -> usize {
    16
}
fn d_concentration() -> f32 {
    0.9
}
fn d_session_length() -> usize {
    4
}
fn d_slate_size() -> usize {
    5
}
fn d_noise() -> f32 {
    0.05
}

/// World parameters. `seed` has no default: full determinism is part of
/// the contract, so every config must pin it explicitly.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    #[serde(default = "d_n_topics")]
    pub n_topics: usize,
    #[serde(default = "d_n_items")]
    pub n_items: usize,
    #[serde(default = "d_n_users")]
    pub n_users: usize,
    #[serde(default = "d_d_in")]
    pub d_in: usize,
    /// Affinity mass a user places on their preferred topic, in (0, 1].
    #[serde(default = "d_concentration")]
    pub topic_concentration: f32,
    /// Slates simulated per user.
    #[serde(default = "d_session_length")]
    pub session_length: usize,
    #[serde(default = "d_slate_size")]
    pub slate_size: usize,
    /// Embedding jitter std and behavioral noise floor.
    #[serde(default = "d_noise")]
    pub noise: f32,
    pub seed: u64,
}

impl WorldConfig {
    pub fn with_seed(seed: u64) -> Self {
        WorldConfig {
            n_topics: d_n_topics(),
            n_items: d_n_items(),
            n_users: d_n_users(),
            d_in: d_d_in(),
            topic_concentration: d_concentration(),
            session_length: d_session_length(),
            slate_size: d_slate_size(),
            noise: d_noise(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_topics == 0
            || self.n_items == 0
            || self.n_users == 0
            || self.d_in == 0
            || self.session_length == 0
            || self.slate_size == 0
        {
            return Err(HigrError::Config("world: all sizes must be positive".into()));
        }
        if self.n_topics > self.n_items {
            return Err(HigrError::Config(format!(
                "world: n_topics {} exceeds n_items {}",
                self.n_topics, self.n_items
            )));
        }
        if self.slate_size > self.n_items {
            return Err(HigrError::Config(format!(
                "world: slate_size {} exceeds n_items {}",
                self.slate_size, self.n_items
            )));
        }
        if !(self.topic_concentration > 0.0 && self.topic_concentration <= 1.0) {
            return Err(HigrError::Config(
                "world: topic_concentration must be in (0, 1]".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise < 1.0) {
            return Err(HigrError::Config("world: noise must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct WorldItem {
    pub item_id: String,
    pub topic: usize,
    pub embedding: Vec<f32>,
}

/// User with a sparse topic-affinity vector on the simplex.
#[derive(Clone, Debug)]
pub struct SyntheticUser {
    pub user_id: String,
    pub affinities: Vec<f32>,
}

pub struct World {
    pub cfg: WorldConfig,
    pub centroids: Vec<Vec<f32>>,
    pub items: Vec<WorldItem>,
    pub users: Vec<SyntheticUser>,
}

// Disjoint ChaCha stream ranges so per-user generation is independent of
// iteration order.
const STREAM_CENTROIDS: u64 = 0;
const STREAM_ITEMS: u64 = 1;
const STREAM_USER_BASE: u64 = 1 << 20;
const STREAM_SESSION_BASE: u64 = 1 << 40;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn build_user(cfg: &WorldConfig, idx: usize) -> SyntheticUser {
    let mut rng = stream_rng(cfg.seed, STREAM_USER_BASE + idx as u64);
    let mut affinities = vec![0.0f32; cfg.n_topics];
    let preferred = rng.gen_range(0..cfg.n_topics);
    if cfg.n_topics == 1 {
        affinities[0] = 1.0;
    } else {
        let mut secondary = rng.gen_range(0..cfg.n_topics - 1);
        if secondary >= preferred {
            secondary += 1;
        }
        affinities[preferred] = cfg.topic_concentration;
        affinities[secondary] = 1.0 - cfg.topic_concentration;
    }
    SyntheticUser {
        user_id: format!("user{idx}"),
        affinities,
    }
}

/// Deterministic world from `cfg.seed`: unit-sphere topic centroids,
/// items as jittered centroids (round-robin topics), sparse-affinity users.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut crng = stream_rng(cfg.seed, STREAM_CENTROIDS);
    let centroids: Vec<Vec<f32>> = (0..cfg.n_topics)
        .map(|_| unit_vector(cfg.d_in, &mut crng))
        .collect();
    let mut irng = stream_rng(cfg.seed, STREAM_ITEMS);
    let items: Vec<WorldItem> = (0..cfg.n_items)
        .map(|i| {
            let topic = i % cfg.n_topics;
            let embedding: Vec<f32> = centroids[topic]
                .iter()
                .map(|&c| c + cfg.noise * irng.sample::<f32, _>(StandardNormal))
                .collect();
            WorldItem {
                item_id: format!("item{i}"),
                topic,
                embedding,
            }
        })
        .collect();
    let users = (0..cfg.n_users).map(|i| build_user(cfg, i)).collect();
    Ok(World {
        cfg: cfg.clone(),
        centroids,
        items,
        users,
    })
}

impl World {
    pub fn corpus_records(&self) -> Vec<CorpusRecord> {
        self.items
            .iter()
            .map(|it| CorpusRecord {
                item_id: it.item_id.clone(),
                embedding: it.embedding.clone(),
            })
            .collect()
    }

    pub fn item_embeddings(&self) -> Vec<ItemEmbedding> {
        self.items
            .iter()
            .map(|it| ItemEmbedding {
                item_id: it.item_id.clone(),
                x: it.embedding.clone(),
            })
            .collect()
    }

    /// Per-item relevance for a user: their affinity for the item's topic.
    pub fn relevance(&self, user: &SyntheticUser, item_idx: usize) -> f32 {
        user.affinities[self.items[item_idx].topic]
    }
}

/// One simulated session over raw item indices (pre-tokenization).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionRecord {
    pub user: usize,
    pub user_features: Vec<f32>,
    /// Effectively-viewed item indices before this session, oldest first.
    pub history: Vec<usize>,
    pub slate: Vec<usize>,
    pub feedback: Vec<f32>,
    pub effective_view: Vec<bool>,
    /// Cumulative impressed-but-not-viewed pool.
    pub disliked: Vec<usize>,
}

/// Weighted sample of `k` distinct indices; repeated proportional draws
/// with removal, fixed order.
fn weighted_distinct(weights: &[f32], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..weights.len()).collect();
    let mut w: Vec<f32> = weights.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f32 = alive.iter().map(|&i| w[i]).sum();
        let mut draw = rng.gen_range(0.0..total.max(f32::MIN_POSITIVE));
        let mut picked = alive.len() - 1;
        for (pos, &i) in alive.iter().enumerate() {
            if draw < w[i] {
                picked = pos;
                break;
            }
            draw -= w[i];
        }
        let item = alive.swap_remove(picked);
        w[item] = 0.0;
        out.push(item);
    }
    out
}

/// Probability an impression becomes an effective view: the behavioral
/// noise floor plus affinity-scaled headroom.
pub fn effective_view_probability(cfg: &WorldConfig, affinity: f32) -> f64 {
    (cfg.noise + (1.0 - cfg.noise) * affinity) as f64
}

/// Simulate all sessions for one user. Uses a user-specific RNG stream, so
/// results do not depend on which other users are simulated or in what
/// order.
pub fn simulate_user(world: &World, user_idx: usize) -> Vec<SessionRecord> {
    let cfg = &world.cfg;
    let user = &world.users[user_idx];
    let mut rng = stream_rng(cfg.seed, STREAM_SESSION_BASE + user_idx as u64);
    // exposure propensity: affinity-proportional with a noise floor
    let weights: Vec<f32> = (0..cfg.n_items)
        .map(|i| world.relevance(user, i) + cfg.noise.max(1e-3))
        .collect();
    let mut history: Vec<usize> = Vec::new();
    let mut disliked: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(cfg.session_length);
    for _ in 0..cfg.session_length {
        let slate = weighted_distinct(&weights, cfg.slate_size, &mut rng);
        let mut feedback = Vec::with_capacity(slate.len());
        let mut effective = Vec::with_capacity(slate.len());
        for &item in &slate {
            let aff = world.relevance(user, item);
            let viewed = rng.gen_bool(effective_view_probability(cfg, aff));
            let draw: f32 = rng.gen_range(0.0..1.0);
            effective.push(viewed);
            feedback.push(if viewed { aff * draw } else { 0.0 });
        }
        out.push(SessionRecord {
            user: user_idx,
            user_features: user.affinities.clone(),
            history: history.clone(),
            slate: slate.clone(),
            feedback: feedback.clone(),
            effective_view: effective.clone(),
            disliked: disliked.clone(),
        });
        for (&item, &viewed) in slate.iter().zip(&effective) {
            if viewed {
                history.push(item);
            } else if !disliked.contains(&item) {
                disliked.push(item);
            }
        }
    }
    out
}

/// All users' sessions, concatenated in user order.
pub fn simulate_sessions(world: &World) -> Vec<SessionRecord> {
    (0..world.users.len())
        .flat_map(|u| simulate_user(world, u))
        .collect()
}

/// Join raw sessions with tokenizer output (SIDs aligned with the item
/// corpus) into decoder training samples. History is truncated to the most
/// recent `max_history` entries.
pub fn tokenize_sessions(
    sessions: &[SessionRecord],
    sids: &[SemanticID],
    item_ids: &[String],
    max_history: usize,
) -> Result<Vec<SlateSample>> {
    if sids.len() != item_ids.len() {
        return Err(HigrError::Data(format!(
            "tokenize: {} SIDs for {} items",
            sids.len(),
            item_ids.len()
        )));
    }
    let lookup = |idx: usize| -> Result<&SemanticID> {
        sids.get(idx)
            .ok_or_else(|| HigrError::Data(format!("tokenize: item index {idx} out of range")))
    };
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        let start = s.history.len().saturating_sub(max_history);
        let history: Vec<SemanticID> = s.history[start..]
            .iter()
            .map(|&i| lookup(i).cloned())
            .collect::<Result<_>>()?;
        let slate: Vec<SemanticID> = s
            .slate
            .iter()
            .map(|&i| lookup(i).cloned())
            .collect::<Result<_>>()?;
        let disliked: Vec<SemanticID> = s
            .disliked
            .iter()
            .map(|&i| lookup(i).cloned())
            .collect::<Result<_>>()?;
        let slate_item_ids = s.slate.iter().map(|&i| item_ids[i].clone()).collect();
        out.push(SlateSample {
            context: UserContext {
                features: s.user_features.clone(),
                history,
            },
            slate,
            feedback: s.feedback.clone(),
            effective_view: s.effective_view.clone(),
            slate_item_ids,
            disliked,
        });
    }
    Ok(out)
}

/// Convenience: tokenized samples as serializable records.
pub fn sessions_to_sample_records(
    sessions: &[SessionRecord],
    sids: &[SemanticID],
    item_ids: &[String],
    max_history: usize,
) -> Result<Vec<SampleRecord>> {
    Ok(tokenize_sessions(sessions, sids, item_ids, max_history)?
        .iter()
        .map(|s| s.to_record())
        .collect())
}

/// Ground-truth oracle: top-k item ids by true user relevance (affinity of
/// the item's topic), ties broken by item index.
pub fn oracle_recommend(world: &World, user: &SyntheticUser, k: usize) -> Vec<String> {
    let mut order: Vec<usize> = (0..world.items.len()).collect();
    order.sort_by(|&a, &b| {
        world
            .relevance(user, b)
            .partial_cmp(&world.relevance(user, a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(k)
        .map(|i| world.items[i].item_id.clone())
        .collect()
}
