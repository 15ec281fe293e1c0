//! Synthetic swipe logs from latent user and product styles.
//!
//! Users and products get unit-length style vectors drawn around a small set
//! of cluster centres. A user raids a shown product with probability
//! `clamp(intercept + slope * affinity, 0, 1)` where affinity is the dot
//! product of the two style vectors. In engine-driven mode every feed comes
//! from [`Recommender::feed_excluding`], so the log carries real recommender
//! impressions with their similarity scores.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abtest::Experiment;
use crate::dedup::{cluster_products, ProductClusterMap, ProductRecord, DEFAULT_THRESHOLD};
use crate::model::{
    Direction, Event, EventId, ImpressionEvent, ImpressionSource, InteractionMatrix, ProductId,
    ReferralClickEvent, SessionEvent, SwipeEvent, TimestampMs, UserId,
};
use crate::recommender::{FeedItem, RecommendationOutcome, RecommendationRecord, Recommender};

const DAY_MS: i64 = 86_400_000;

#[derive(Debug, Error, PartialEq)]
pub enum SimulationError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("{0} must lie in [0, 1]")]
    NotAProbability(&'static str),
    #[error("raid probability slope must be non-negative")]
    DecreasingRaidProbability,
    #[error("model has {model} {what}, config asks for {config}")]
    Inconsistent {
        what: &'static str,
        model: usize,
        config: usize,
    },
    #[error("clustered variant {0:?} is not part of the experiment")]
    UnknownVariant(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedPolicy {
    /// Random unswiped products only.
    PureFallback,
    /// Recommender first, random fallback after.
    #[default]
    EngineDriven,
}

/// `clamp(intercept + slope * affinity, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaidProbability {
    pub intercept: f64,
    pub slope: f64,
}

impl Default for RaidProbability {
    fn default() -> Self {
        Self {
            intercept: 0.15,
            slope: 0.6,
        }
    }
}

impl RaidProbability {
    pub fn always() -> Self {
        Self {
            intercept: 1.0,
            slope: 0.0,
        }
    }

    pub fn at(&self, affinity: f64) -> f64 {
        (self.intercept + self.slope * affinity).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleConfig {
    pub dimensions: usize,
    /// Number of style cluster centres.
    pub clusters: usize,
    /// Standard deviation of the per-entity offset from its centre.
    pub spread: f64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            dimensions: 8,
            clusters: 6,
            spread: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n_users: usize,
    pub n_products: usize,
    pub sessions_per_user: usize,
    pub swipes_per_session: usize,
    pub feed_policy: FeedPolicy,
    pub seed: u64,
    pub style: StyleConfig,
    pub raid_probability: RaidProbability,
    pub referral_click_probability: f64,
    /// Share of products that are colour/size variants of another product.
    pub variant_product_share: f64,
    /// Items requested per feed call.
    pub feed_batch: usize,
    pub start_ms: TimestampMs,
    pub session_gap_ms: i64,
    pub swipe_interval_ms: i64,
    /// When set, users are split by this experiment and events are labelled.
    pub experiment: Option<Experiment>,
    /// Variant whose recommendations run on title-clustered products.
    pub clustered_variant: Option<String>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_products: 500,
            sessions_per_user: 6,
            swipes_per_session: 40,
            feed_policy: FeedPolicy::EngineDriven,
            seed: 7,
            style: StyleConfig::default(),
            raid_probability: RaidProbability::default(),
            referral_click_probability: 0.05,
            variant_product_share: 0.1,
            feed_batch: 5,
            // 2020-04-01T00:00:00Z
            start_ms: 1_585_699_200_000,
            session_gap_ms: DAY_MS,
            swipe_interval_ms: 2_000,
            experiment: None,
            clustered_variant: None,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        for (v, name) in [
            (self.n_users, "n_users"),
            (self.n_products, "n_products"),
            (self.sessions_per_user, "sessions_per_user"),
            (self.swipes_per_session, "swipes_per_session"),
            (self.feed_batch, "feed_batch"),
            (self.style.dimensions, "style.dimensions"),
            (self.style.clusters, "style.clusters"),
        ] {
            if v == 0 {
                return Err(SimulationError::NonPositive(name));
            }
        }
        if self.session_gap_ms <= 0 {
            return Err(SimulationError::NonPositive("session_gap_ms"));
        }
        if self.swipe_interval_ms <= 0 {
            return Err(SimulationError::NonPositive("swipe_interval_ms"));
        }
        for (p, name) in [
            (
                self.referral_click_probability,
                "referral_click_probability",
            ),
            (self.variant_product_share, "variant_product_share"),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimulationError::NotAProbability(name));
            }
        }
        if self.raid_probability.slope.is_nan() || self.raid_probability.slope < 0.0 {
            return Err(SimulationError::DecreasingRaidProbability);
        }
        if let Some(label) = &self.clustered_variant {
            if !self
                .experiment
                .as_ref()
                .is_some_and(|e| e.labels().any(|l| l == label))
            {
                return Err(SimulationError::UnknownVariant(label.clone()));
            }
        }
        Ok(())
    }
}

/// Latent styles for every simulated user and product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStyleModel {
    pub style_dimensions: usize,
    pub users: Vec<(UserId, Vec<f64>)>,
    pub products: Vec<(ProductId, Vec<f64>)>,
    /// Style cluster of each product, aligned with `products`.
    pub product_clusters: Vec<usize>,
    pub raid_probability: RaidProbability,
    pub seed: u64,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        return e;
    }
    v.into_iter().map(|x| x / norm).collect()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

impl LatentStyleModel {
    /// Draws cluster centres, then users and products around them.
    pub fn clustered(config: &SimulationConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = &config.style;
        let centres: Vec<Vec<f64>> = (0..s.clusters)
            .map(|_| unit(gaussian_vec(&mut rng, s.dimensions)))
            .collect();
        let around = |rng: &mut ChaCha8Rng, c: usize| {
            let noise = gaussian_vec(rng, s.dimensions);
            unit(
                centres[c]
                    .iter()
                    .zip(noise)
                    .map(|(m, n)| m + s.spread * n)
                    .collect(),
            )
        };
        let users = (0..config.n_users)
            .map(|i| {
                let c = rng.random_range(0..s.clusters);
                (UserId::new(format!("u{i:05}")), around(&mut rng, c))
            })
            .collect();
        let mut products: Vec<(ProductId, Vec<f64>)> = Vec::with_capacity(config.n_products);
        let mut product_clusters = Vec::with_capacity(config.n_products);
        for i in 0..config.n_products {
            let id = ProductId::new(format!("p{i:05}"));
            // Variants share their base product's style exactly.
            if i > 0 && rng.random::<f64>() < config.variant_product_share {
                let base = rng.random_range(0..i);
                products.push((id, products[base].1.clone()));
                product_clusters.push(product_clusters[base]);
            } else {
                let c = rng.random_range(0..s.clusters);
                products.push((id, around(&mut rng, c)));
                product_clusters.push(c);
            }
        }
        Self {
            style_dimensions: s.dimensions,
            users,
            products,
            product_clusters,
            raid_probability: config.raid_probability,
            seed: config.seed,
        }
    }

    pub fn affinity(&self, user: usize, product: usize) -> f64 {
        self.users[user]
            .1
            .iter()
            .zip(&self.products[product].1)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn raid_probability(&self, user: usize, product: usize) -> f64 {
        self.raid_probability.at(self.affinity(user, product))
    }

    fn check(&self, config: &SimulationConfig) -> Result<(), SimulationError> {
        if self.users.len() != config.n_users {
            return Err(SimulationError::Inconsistent {
                what: "users",
                model: self.users.len(),
                config: config.n_users,
            });
        }
        if self.products.len() != config.n_products {
            return Err(SimulationError::Inconsistent {
                what: "products",
                model: self.products.len(),
                config: config.n_products,
            });
        }
        if self.raid_probability.slope.is_nan() || self.raid_probability.slope < 0.0 {
            return Err(SimulationError::DecreasingRaidProbability);
        }
        Ok(())
    }
}

/// A recommendation the engine produced during simulation, with the
/// number of leading swipe events its matrix was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedRecommendation {
    pub matrix_swipes: usize,
    pub clustered: bool,
    pub record: RecommendationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedLog {
    pub events: Vec<Event>,
    pub catalogue: Vec<ProductRecord>,
    pub users: Vec<UserId>,
    pub recommendations: Vec<LoggedRecommendation>,
    pub cluster_map: Option<ProductClusterMap>,
}

impl SimulatedLog {
    pub fn swipes(&self) -> impl Iterator<Item = &SwipeEvent> {
        self.events.iter().filter_map(|e| match e {
            Event::Swipe(s) => Some(s),
            _ => None,
        })
    }
}

const ADJECTIVES: &[&str] = &[
    "nordic", "rustic", "minimal", "vintage", "modern", "classic", "soft", "round", "tall", "low",
];
const MATERIALS: &[&str] = &[
    "oak", "walnut", "brass", "linen", "wool", "marble", "rattan", "glass", "velvet", "ceramic",
];
const NOUNS: &[&str] = &[
    "chair", "lamp", "sofa", "table", "vase", "rug", "shelf", "mirror", "stool", "cabinet",
];
const COLOURS: &[&str] = &["black", "white", "grey", "green", "sand", "rose"];

fn catalogue(model: &LatentStyleModel, rng: &mut ChaCha8Rng) -> Vec<ProductRecord> {
    let mut titles: Vec<String> = Vec::with_capacity(model.products.len());
    for (i, (_, style)) in model.products.iter().enumerate() {
        let base = (0..i).find(|&j| model.products[j].1 == *style);
        let title = match base {
            Some(j) => format!(
                "{} {}",
                titles[j],
                COLOURS[rng.random_range(0..COLOURS.len())]
            ),
            None => format!(
                "{} {} {} {}",
                ADJECTIVES[rng.random_range(0..ADJECTIVES.len())],
                MATERIALS[rng.random_range(0..MATERIALS.len())],
                NOUNS[rng.random_range(0..NOUNS.len())],
                i
            ),
        };
        titles.push(title);
    }
    model
        .products
        .iter()
        .zip(titles)
        .map(|((id, _), title)| ProductRecord {
            product_id: id.clone(),
            referral_url: Some(format!("https://shop.example/{id}")),
            title,
        })
        .collect()
}

struct Ids(u64);

impl Ids {
    fn next(&mut self) -> EventId {
        self.0 += 1;
        EventId::new(format!("ev{:09}", self.0))
    }
}

/// Generates a full log. Identical config and model give identical output.
pub fn generate(
    config: &SimulationConfig,
    model: &LatentStyleModel,
) -> Result<SimulatedLog, SimulationError> {
    config.validate()?;
    model.check(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let catalogue = catalogue(model, &mut rng);
    let cluster_map = config.clustered_variant.as_ref().map(|_| {
        cluster_products(&catalogue, DEFAULT_THRESHOLD).expect("generated titles are valid")
    });

    let n_users = config.n_users;
    let product_ids: Vec<ProductId> = model.products.iter().map(|(p, _)| p.clone()).collect();
    let labels: Vec<Option<String>> = model
        .users
        .iter()
        .map(|(u, _)| {
            config
                .experiment
                .as_ref()
                .map(|e| e.assign_variant(u).to_owned())
        })
        .collect();

    let mut events = Vec::new();
    let mut swipes: Vec<SwipeEvent> = Vec::new();
    let mut recommendations = Vec::new();
    let mut swiped: Vec<HashSet<usize>> = vec![HashSet::new(); n_users];
    let mut swiped_ids: Vec<HashSet<ProductId>> = vec![HashSet::new(); n_users];
    let mut ids = Ids(0);
    let mut matrix = InteractionMatrix::empty();
    let mut clustered_matrix = InteractionMatrix::empty();

    for round in 0..config.sessions_per_user {
        let round_start = config.start_ms + round as i64 * config.session_gap_ms;
        let matrix_swipes = swipes.len();
        for (u, (user_id, _)) in model.users.iter().enumerate() {
            let variant = labels[u].clone();
            let clustered = variant.is_some() && variant == config.clustered_variant;
            let session_start = round_start + (u as i64 * config.session_gap_ms) / n_users as i64;
            let mut t = session_start;
            let mut done = 0;
            while done < config.swipes_per_session && swiped[u].len() < config.n_products {
                let pool =
                    fallback_pool(&mut rng, &swiped[u], config.n_products, config.feed_batch);
                let pool_ids: Vec<ProductId> =
                    pool.iter().map(|&p| product_ids[p].clone()).collect();
                let items: Vec<FeedItem> = match config.feed_policy {
                    FeedPolicy::PureFallback => pool_ids
                        .into_iter()
                        .take(config.feed_batch)
                        .map(|p| FeedItem {
                            product_id: p,
                            source: ImpressionSource::Fallback,
                            similarity: None,
                        })
                        .collect(),
                    FeedPolicy::EngineDriven => {
                        let m = if clustered {
                            &clustered_matrix
                        } else {
                            &matrix
                        };
                        let engine = Recommender::new(m);
                        let exclude = if clustered {
                            let map = cluster_map.as_ref().expect("clustered variant has a map");
                            swiped_ids[u]
                                .iter()
                                .map(|p| map.canonical(p).clone())
                                .collect()
                        } else {
                            swiped_ids[u].clone()
                        };
                        if let Ok(RecommendationOutcome::Recommended(rec)) =
                            engine.recommend_excluding(user_id, config.feed_batch, &exclude)
                        {
                            recommendations.push(LoggedRecommendation {
                                matrix_swipes,
                                clustered,
                                record: rec,
                            });
                        }
                        engine
                            .feed_excluding(user_id, config.feed_batch, &pool_ids, &exclude)
                            .into_iter()
                            .filter(|item| {
                                // Canonical ids may map back to an already seen variant.
                                product_ids
                                    .binary_search(&item.product_id)
                                    .is_ok_and(|p| !swiped[u].contains(&p))
                            })
                            .collect()
                    }
                };
                if items.is_empty() {
                    break;
                }
                for item in items {
                    if done == config.swipes_per_session {
                        break;
                    }
                    let p = product_ids
                        .binary_search(&item.product_id)
                        .expect("feed only returns catalogue products");
                    if !swiped[u].insert(p) {
                        continue;
                    }
                    swiped_ids[u].insert(item.product_id.clone());
                    events.push(Event::Impression(ImpressionEvent {
                        event_id: ids.next(),
                        user_id: user_id.clone(),
                        product_id: item.product_id.clone(),
                        source: item.source,
                        similarity_score: item.similarity,
                        timestamp_ms: t,
                        variant: variant.clone(),
                    }));
                    let raid = rng.random::<f64>() < model.raid_probability(u, p);
                    let swipe = SwipeEvent {
                        event_id: ids.next(),
                        user_id: user_id.clone(),
                        product_id: item.product_id.clone(),
                        direction: if raid {
                            Direction::Raid
                        } else {
                            Direction::Dislike
                        },
                        timestamp_ms: t + 1,
                        variant: variant.clone(),
                    };
                    events.push(Event::Swipe(swipe.clone()));
                    swipes.push(swipe);
                    if raid && rng.random::<f64>() < config.referral_click_probability {
                        events.push(Event::ReferralClick(ReferralClickEvent {
                            event_id: ids.next(),
                            user_id: user_id.clone(),
                            product_id: item.product_id,
                            timestamp_ms: t + 2,
                            variant: variant.clone(),
                        }));
                    }
                    t += config.swipe_interval_ms;
                    done += 1;
                }
            }
            events.push(Event::Session(SessionEvent {
                event_id: ids.next(),
                user_id: user_id.clone(),
                session_start_ms: session_start,
                session_end_ms: t.max(session_start),
                variant,
            }));
        }
        if config.feed_policy == FeedPolicy::EngineDriven {
            matrix = InteractionMatrix::build(&swipes, None).expect("generated swipes are valid");
            if let Some(map) = &cluster_map {
                clustered_matrix = InteractionMatrix::build(&swipes, Some(map))
                    .expect("generated swipes are valid");
            }
        }
    }

    Ok(SimulatedLog {
        events,
        catalogue,
        users: model.users.iter().map(|(u, _)| u.clone()).collect(),
        recommendations,
        cluster_map,
    })
}

/// Up to `2 * batch` distinct random products the user has not swiped.
fn fallback_pool(
    rng: &mut ChaCha8Rng,
    swiped: &HashSet<usize>,
    n_products: usize,
    batch: usize,
) -> Vec<usize> {
    let want = 2 * batch;
    let mut pool = Vec::with_capacity(want);
    let mut chosen = HashSet::new();
    for _ in 0..want * 8 {
        let p = rng.random_range(0..n_products);
        if !swiped.contains(&p) && chosen.insert(p) {
            pool.push(p);
            if pool.len() == want {
                return pool;
            }
        }
    }
    // Nearly exhausted users: take what is left in random order.
    let mut rest: Vec<usize> = (0..n_products)
        .filter(|p| !swiped.contains(p) && !chosen.contains(p))
        .collect();
    rest.shuffle(rng);
    pool.extend(rest.into_iter().take(want - pool.len()));
    pool
}
