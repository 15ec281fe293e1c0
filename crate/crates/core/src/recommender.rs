//! Single-neighbor collaborative filtering: find the most similar user and
//! queue up to `n` of their raided products the target has not seen.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::model::{
    Direction, ImpressionSource, InteractionMatrix, ModelError, ProductId, TimestampMs, UserId,
};
use crate::similarity::{ranked_candidates, SimilarityScore};

pub const DEFAULT_QUEUE_LEN: usize = 5;

/// How a neighbor's fresh raids are ordered in the queue.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueOrder {
    /// Neighbor's most recent raids first.
    #[default]
    NeighborRecency,
    /// Products with the most raids across all users first.
    MostRaided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationRecord {
    pub target: UserId,
    pub neighbor: UserId,
    pub similarity: SimilarityScore,
    pub queued: Vec<ProductId>,
    pub created_at: TimestampMs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoRecommendationReason {
    ColdUser,
    NoQualifiedNeighbor,
    NoFreshProducts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RecommendationOutcome {
    Recommended(RecommendationRecord),
    NoRecommendation { reason: NoRecommendationReason },
}

impl RecommendationOutcome {
    pub fn record(&self) -> Option<&RecommendationRecord> {
        match self {
            RecommendationOutcome::Recommended(r) => Some(r),
            RecommendationOutcome::NoRecommendation { .. } => None,
        }
    }

    pub fn reason(&self) -> Option<NoRecommendationReason> {
        match self {
            RecommendationOutcome::Recommended(_) => None,
            RecommendationOutcome::NoRecommendation { reason } => Some(*reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedItem {
    pub product_id: ProductId,
    pub source: ImpressionSource,
    pub similarity: Option<f64>,
}

/// Recommendation engine over one immutable matrix.
#[derive(Debug, Clone)]
pub struct Recommender<'m> {
    matrix: &'m InteractionMatrix,
    order: QueueOrder,
    popularity: Option<Vec<usize>>,
}

impl<'m> Recommender<'m> {
    pub fn new(matrix: &'m InteractionMatrix) -> Self {
        Self {
            matrix,
            order: QueueOrder::NeighborRecency,
            popularity: None,
        }
    }

    pub fn with_order(mut self, order: QueueOrder) -> Self {
        self.order = order;
        self.popularity = match order {
            QueueOrder::MostRaided => Some(
                (0..self.matrix.n_products() as u32)
                    .map(|p| self.matrix.product_raiders(p).len())
                    .collect(),
            ),
            QueueOrder::NeighborRecency => None,
        };
        self
    }

    pub fn matrix(&self) -> &InteractionMatrix {
        self.matrix
    }

    /// Recommends up to `n` products to `target`, stamped with the matrix's
    /// latest swipe time.
    pub fn recommend(
        &self,
        target: &UserId,
        n: usize,
    ) -> Result<RecommendationOutcome, ModelError> {
        self.recommend_excluding(target, n, &HashSet::new())
    }

    /// Like [`Recommender::recommend`], additionally skipping `exclude`
    /// (products swiped since the matrix was built).
    pub fn recommend_excluding(
        &self,
        target: &UserId,
        n: usize,
        exclude: &HashSet<ProductId>,
    ) -> Result<RecommendationOutcome, ModelError> {
        let m = self.matrix;
        let t = m
            .user_index(target)
            .ok_or_else(|| ModelError::UnknownUser(target.clone()))?;
        if m.user_raid_indices(t).is_empty() {
            return Ok(no_recommendation(NoRecommendationReason::ColdUser));
        }
        let neighbors = ranked_candidates(m, t, 0.0);
        if neighbors.is_empty() {
            return Ok(no_recommendation(
                NoRecommendationReason::NoQualifiedNeighbor,
            ));
        }
        for neighbor in &neighbors {
            let queued = self.fresh_products(t, neighbor, n, exclude);
            if !queued.is_empty() {
                return Ok(RecommendationOutcome::Recommended(RecommendationRecord {
                    target: target.clone(),
                    neighbor: neighbor.user_id.clone(),
                    similarity: neighbor.score,
                    queued,
                    created_at: m.as_of().unwrap_or_default(),
                }));
            }
        }
        Ok(no_recommendation(NoRecommendationReason::NoFreshProducts))
    }

    fn fresh_products(
        &self,
        target: u32,
        neighbor: &crate::similarity::RankedNeighbor,
        n: usize,
        exclude: &HashSet<ProductId>,
    ) -> Vec<ProductId> {
        let m = self.matrix;
        let nb = m
            .user_index(&neighbor.user_id)
            .expect("neighbor comes from the same matrix");
        let mut fresh: Vec<(u32, TimestampMs)> = m
            .user_cells(nb)
            .iter()
            .filter(|c| c.direction == Direction::Raid)
            .filter(|c| !m.has_swiped(target, c.product))
            .filter(|c| !exclude.contains(&m.products()[c.product as usize]))
            .map(|c| (c.product, c.timestamp_ms))
            .collect();
        // Product indices follow id order, so index ties are id ties.
        match &self.popularity {
            Some(pop) => fresh.sort_by(|a, b| {
                pop[b.0 as usize]
                    .cmp(&pop[a.0 as usize])
                    .then(a.0.cmp(&b.0))
            }),
            None => fresh.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0))),
        }
        fresh
            .into_iter()
            .take(n)
            .map(|(p, _)| m.products()[p as usize].clone())
            .collect()
    }

    /// Builds a feed of up to `n` items: recommended products first, then
    /// unswiped products from `fallback_pool` in the given order.
    ///
    /// Users unknown to the matrix get a pure fallback feed.
    pub fn feed(&self, target: &UserId, n: usize, fallback_pool: &[ProductId]) -> Vec<FeedItem> {
        self.feed_excluding(target, n, fallback_pool, &HashSet::new())
    }

    pub fn feed_excluding(
        &self,
        target: &UserId,
        n: usize,
        fallback_pool: &[ProductId],
        exclude: &HashSet<ProductId>,
    ) -> Vec<FeedItem> {
        let m = self.matrix;
        let mut items = Vec::with_capacity(n);
        if let Ok(RecommendationOutcome::Recommended(rec)) =
            self.recommend_excluding(target, n, exclude)
        {
            items.extend(rec.queued.into_iter().map(|p| FeedItem {
                product_id: p,
                source: ImpressionSource::Recommender,
                similarity: Some(rec.similarity.value()),
            }));
        }
        let t = m.user_index(target);
        let mut emitted: HashSet<ProductId> = items.iter().map(|i| i.product_id.clone()).collect();
        for p in fallback_pool {
            if items.len() >= n {
                break;
            }
            let swiped = t
                .zip(m.product_index(p))
                .is_some_and(|(u, pi)| m.has_swiped(u, pi));
            if swiped || exclude.contains(p) || !emitted.insert(p.clone()) {
                continue;
            }
            items.push(FeedItem {
                product_id: p.clone(),
                source: ImpressionSource::Fallback,
                similarity: None,
            });
        }
        items
    }
}

fn no_recommendation(reason: NoRecommendationReason) -> RecommendationOutcome {
    RecommendationOutcome::NoRecommendation { reason }
}

/// Convenience wrapper around [`Recommender::recommend`].
pub fn recommend(
    matrix: &InteractionMatrix,
    target: &UserId,
    n: usize,
) -> Result<RecommendationOutcome, ModelError> {
    Recommender::new(matrix).recommend(target, n)
}

/// Convenience wrapper around [`Recommender::feed`].
pub fn feed(
    matrix: &InteractionMatrix,
    target: &UserId,
    n: usize,
    fallback_pool: &[ProductId],
) -> Vec<FeedItem> {
    Recommender::new(matrix).feed(target, n, fallback_pool)
}
