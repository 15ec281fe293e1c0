//! Collaborative filtering for swipe-based product discovery.
//!
//! Raids and dislikes are folded into a sparse user × product matrix,
//! users are compared by cosine similarity over their raid vectors, and the
//! nearest neighbour's fresh raids become the target's recommendation queue.

pub mod abtest;
pub mod dedup;
pub mod evaluation;
pub mod eventstore;
pub mod model;
pub mod recommender;
pub mod similarity;
pub mod simulator;

pub use abtest::{compare, Experiment, Variant, VariantComparison};
pub use dedup::{cluster_products, ProductClusterMap, ProductRecord};
pub use evaluation::{evaluate, EvaluateOptions, EvaluationReport, FunnelReport};
pub use eventstore::{EventEnvelope, EventStore, ReplayFilter, Snapshot, StoreError};
pub use model::{
    Direction, Event, EventId, EventKind, ImpressionEvent, ImpressionSource, InteractionMatrix,
    ModelError, ProductId, ReferralClickEvent, SessionEvent, SparseBoolVec, SwipeEvent, TimeWindow,
    TimestampMs, UserId,
};
pub use recommender::{
    feed, recommend, FeedItem, NoRecommendationReason, RecommendationOutcome, RecommendationRecord,
    Recommender,
};
pub use similarity::{
    cosine_similarity, nearest_neighbors, NeighborQuery, RankedNeighbor, SimilarityScore,
};
pub use simulator::{generate, FeedPolicy, LatentStyleModel, SimulatedLog, SimulationConfig};
