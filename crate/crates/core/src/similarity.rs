//! Cosine similarity over boolean raid vectors and K-nearest-neighbor search.
//!
//! For boolean vectors `cos(A, B) = |A ∩ B| / sqrt(|A| * |B|)`. Neighbor search
//! walks the product -> raiders inverted index, so a query only touches users
//! who share at least one raided product with the target.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::{InteractionMatrix, ModelError, SparseBoolVec, UserId};

/// Cosine similarity of two boolean vectors, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub const ZERO: SimilarityScore = SimilarityScore(0.0);

    /// Similarity from co-raid count and the two raid counts. Zero when
    /// either vector is empty.
    pub fn from_counts(overlap: usize, left: usize, right: usize) -> Self {
        if left == 0 || right == 0 {
            return Self::ZERO;
        }
        let value = overlap as f64 / ((left as f64) * (right as f64)).sqrt();
        Self(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `cos(θ)` between two raid vectors over the same product dimension.
pub fn cosine_similarity(
    a: &SparseBoolVec,
    b: &SparseBoolVec,
) -> Result<SimilarityScore, ModelError> {
    if a.dim() != b.dim() {
        return Err(ModelError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let overlap = sorted_intersection_len(a.ones(), b.ones());
    Ok(SimilarityScore::from_counts(
        overlap,
        a.count_ones(),
        b.count_ones(),
    ))
}

fn sorted_intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborQuery {
    pub target: UserId,
    pub k: usize,
    /// Exclusive lower bound on the score.
    pub min_similarity: f64,
}

impl NeighborQuery {
    pub fn new(target: impl Into<UserId>, k: usize) -> Self {
        Self {
            target: target.into(),
            k,
            min_similarity: 0.0,
        }
    }

    pub fn with_min_similarity(mut self, min_similarity: f64) -> Self {
        self.min_similarity = min_similarity;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedNeighbor {
    pub user_id: UserId,
    pub score: SimilarityScore,
    /// Number of co-raided products.
    pub overlap: usize,
    #[serde(skip)]
    pub(crate) raid_count: usize,
}

/// Ranking used for neighbor lists: score descending, then overlap
/// descending, then user id ascending.
///
/// Scores are compared exactly as the rationals `overlap² / raid_count`
/// (the target's raid count is common to every candidate), so two
/// candidates with mathematically equal cosine never order by rounding noise.
pub fn rank_order(
    a_overlap: usize,
    a_raids: usize,
    a_user: &UserId,
    b_overlap: usize,
    b_raids: usize,
    b_user: &UserId,
) -> Ordering {
    let lhs = (a_overlap as u128).pow(2) * b_raids as u128;
    let rhs = (b_overlap as u128).pow(2) * a_raids as u128;
    rhs.cmp(&lhs)
        .then(b_overlap.cmp(&a_overlap))
        .then_with(|| a_user.cmp(b_user))
}

/// The `k` users most similar to `query.target`, excluding the target.
///
/// A target without raids yields an empty list.
pub fn nearest_neighbors(
    matrix: &InteractionMatrix,
    query: &NeighborQuery,
) -> Result<Vec<RankedNeighbor>, ModelError> {
    let target = matrix
        .user_index(&query.target)
        .ok_or_else(|| ModelError::UnknownUser(query.target.clone()))?;
    let mut ranked = ranked_candidates(matrix, target, query.min_similarity);
    ranked.truncate(query.k);
    Ok(ranked)
}

/// Every user sharing a raid with `target` whose score exceeds
/// `min_similarity`, fully ranked.
pub(crate) fn ranked_candidates(
    matrix: &InteractionMatrix,
    target: u32,
    min_similarity: f64,
) -> Vec<RankedNeighbor> {
    let target_raids = matrix.user_raid_indices(target);
    if target_raids.is_empty() {
        return Vec::new();
    }
    let mut overlaps: HashMap<u32, usize> = HashMap::new();
    for &p in target_raids {
        for &u in matrix.product_raiders(p) {
            if u != target {
                *overlaps.entry(u).or_default() += 1;
            }
        }
    }

    let users = matrix.users();
    let mut ranked: Vec<RankedNeighbor> = overlaps
        .into_iter()
        .filter_map(|(u, overlap)| {
            let raid_count = matrix.user_raid_indices(u).len();
            let score = SimilarityScore::from_counts(overlap, target_raids.len(), raid_count);
            (score.value() > min_similarity).then(|| RankedNeighbor {
                user_id: users[u as usize].clone(),
                score,
                overlap,
                raid_count,
            })
        })
        .collect();
    ranked.sort_by(|a, b| {
        rank_order(
            a.overlap,
            a.raid_count,
            &a.user_id,
            b.overlap,
            b.raid_count,
            &b.user_id,
        )
    });
    ranked
}
