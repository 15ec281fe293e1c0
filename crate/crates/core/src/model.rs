//! Event vocabulary and the sparse boolean user x product interaction matrix.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::ProductClusterMap;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_newtype!(
    /// Opaque user identifier.
    UserId
);
id_newtype!(
    /// Opaque product identifier.
    ProductId
);
id_newtype!(
    /// Opaque event identifier, unique within a log.
    EventId
);

/// UTC epoch milliseconds.
pub type TimestampMs = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Right swipe: the product is saved to the user's board.
    Raid,
    /// Left swipe.
    Dislike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImpressionSource {
    Recommender,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwipeEvent {
    pub event_id: EventId,
    pub user_id: UserId,
    pub product_id: ProductId,
    pub direction: Direction,
    pub timestamp_ms: TimestampMs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

/// A single product shown to a user. `similarity_score` is present exactly
/// when the recommender produced the impression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionEvent {
    pub event_id: EventId,
    pub user_id: UserId,
    pub product_id: ProductId,
    pub source: ImpressionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity_score: Option<f64>,
    pub timestamp_ms: TimestampMs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferralClickEvent {
    pub event_id: EventId,
    pub user_id: UserId,
    pub product_id: ProductId,
    pub timestamp_ms: TimestampMs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub event_id: EventId,
    pub user_id: UserId,
    pub session_start_ms: TimestampMs,
    pub session_end_ms: TimestampMs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

/// Any record of the event log. The `type` tag matches the wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Swipe(SwipeEvent),
    Impression(ImpressionEvent),
    ReferralClick(ReferralClickEvent),
    Session(SessionEvent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Swipe,
    Impression,
    ReferralClick,
    Session,
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self {
            Event::Swipe(_) => EventKind::Swipe,
            Event::Impression(_) => EventKind::Impression,
            Event::ReferralClick(_) => EventKind::ReferralClick,
            Event::Session(_) => EventKind::Session,
        }
    }

    pub fn event_id(&self) -> &EventId {
        match self {
            Event::Swipe(e) => &e.event_id,
            Event::Impression(e) => &e.event_id,
            Event::ReferralClick(e) => &e.event_id,
            Event::Session(e) => &e.event_id,
        }
    }

    pub fn user_id(&self) -> &UserId {
        match self {
            Event::Swipe(e) => &e.user_id,
            Event::Impression(e) => &e.user_id,
            Event::ReferralClick(e) => &e.user_id,
            Event::Session(e) => &e.user_id,
        }
    }

    pub fn product_id(&self) -> Option<&ProductId> {
        match self {
            Event::Swipe(e) => Some(&e.product_id),
            Event::Impression(e) => Some(&e.product_id),
            Event::ReferralClick(e) => Some(&e.product_id),
            Event::Session(_) => None,
        }
    }

    /// The instant used for time-window filtering. Sessions are placed at their start.
    pub fn timestamp_ms(&self) -> TimestampMs {
        match self {
            Event::Swipe(e) => e.timestamp_ms,
            Event::Impression(e) => e.timestamp_ms,
            Event::ReferralClick(e) => e.timestamp_ms,
            Event::Session(e) => e.session_start_ms,
        }
    }

    pub fn variant(&self) -> Option<&str> {
        match self {
            Event::Swipe(e) => e.variant.as_deref(),
            Event::Impression(e) => e.variant.as_deref(),
            Event::ReferralClick(e) => e.variant.as_deref(),
            Event::Session(e) => e.variant.as_deref(),
        }
    }

    /// Checks the per-type invariants that serde cannot express.
    pub fn validate(&self) -> Result<(), String> {
        if self.event_id().as_str().is_empty() {
            return Err("empty event_id".into());
        }
        if self.user_id().as_str().is_empty() {
            return Err("empty user_id".into());
        }
        if let Some(p) = self.product_id() {
            if p.as_str().is_empty() {
                return Err("empty product_id".into());
            }
        }
        match self {
            Event::Impression(imp) => match (imp.source, imp.similarity_score) {
                (ImpressionSource::Recommender, None) => {
                    Err("recommender impression without similarity_score".into())
                }
                (ImpressionSource::Recommender, Some(s)) if !(0.0..=1.0).contains(&s) => {
                    Err(format!("similarity_score {s} outside [0, 1]"))
                }
                (ImpressionSource::Fallback, Some(_)) => {
                    Err("fallback impression carries a similarity_score".into())
                }
                _ => Ok(()),
            },
            Event::Session(s) if s.session_end_ms < s.session_start_ms => {
                Err("session_end_ms precedes session_start_ms".into())
            }
            _ => Ok(()),
        }
    }
}

impl SwipeEvent {
    fn validate(&self) -> Result<(), ModelError> {
        let reason = if self.event_id.as_str().is_empty() {
            Some("empty event_id")
        } else if self.user_id.as_str().is_empty() {
            Some("empty user_id")
        } else if self.product_id.as_str().is_empty() {
            Some("empty product_id")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(ModelError::MalformedEvent {
                event_id: self.event_id.clone(),
                reason: reason.into(),
            }),
            None => Ok(()),
        }
    }
}

/// Half-open time range `[from_ms, to_ms)`; a missing bound is unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub from_ms: Option<TimestampMs>,
    pub to_ms: Option<TimestampMs>,
}

impl TimeWindow {
    pub const ALL: TimeWindow = TimeWindow {
        from_ms: None,
        to_ms: None,
    };

    pub fn new(from_ms: Option<TimestampMs>, to_ms: Option<TimestampMs>) -> Self {
        Self { from_ms, to_ms }
    }

    pub fn contains(&self, ts: TimestampMs) -> bool {
        self.from_ms.is_none_or(|f| ts >= f) && self.to_ms.is_none_or(|t| ts < t)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("malformed event {event_id}: {reason}")]
    MalformedEvent { event_id: EventId, reason: String },
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("vector dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid matrix record: {0}")]
    InvalidRecord(String),
}

/// Sparse boolean vector: the sorted indices of its 1-components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseBoolVec {
    dim: usize,
    ones: Vec<u32>,
}

impl SparseBoolVec {
    /// Builds a vector from arbitrary indices; duplicates collapse.
    pub fn new(dim: usize, mut ones: Vec<u32>) -> Result<Self, ModelError> {
        ones.sort_unstable();
        ones.dedup();
        if let Some(&last) = ones.last() {
            if last as usize >= dim {
                return Err(ModelError::InvalidRecord(format!(
                    "index {last} out of bounds for dimension {dim}"
                )));
            }
        }
        Ok(Self { dim, ones })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ones(&self) -> &[u32] {
        &self.ones
    }

    pub fn count_ones(&self) -> usize {
        self.ones.len()
    }

    pub fn get(&self, i: usize) -> bool {
        u32::try_from(i).is_ok_and(|i| self.ones.binary_search(&i).is_ok())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &i in &self.ones {
            v[i as usize] = 1.0;
        }
        v
    }
}

/// One filled matrix cell: the winning swipe for a (user, product) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub user: u32,
    pub product: u32,
    pub direction: Direction,
    pub timestamp_ms: TimestampMs,
    pub event_id: EventId,
}

/// Immutable user x product matrix of Raid/Dislike cells.
///
/// Users and products are sorted by id. Each (user, product) pair holds at
/// most one cell, the swipe with the greatest `(timestamp_ms, event_id)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRecord", into = "MatrixRecord")]
pub struct InteractionMatrix {
    users: Vec<UserId>,
    products: Vec<ProductId>,
    user_lookup: HashMap<UserId, u32>,
    product_lookup: HashMap<ProductId, u32>,
    /// Sorted by (user, product).
    cells: Vec<Cell>,
    /// CSR offsets into `cells`, one entry per user plus a terminator.
    user_offsets: Vec<usize>,
    /// Sorted raid product indices per user.
    user_raids: Vec<Vec<u32>>,
    /// Inverted index: users who raided each product, ascending.
    product_raiders: Vec<Vec<u32>>,
    as_of: Option<TimestampMs>,
}

impl InteractionMatrix {
    pub fn empty() -> Self {
        Self::from_winners(HashMap::new())
    }

    /// Builds the matrix from swipe events, remapping products through
    /// `clusters` when given.
    pub fn build<'a, I>(events: I, clusters: Option<&ProductClusterMap>) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = &'a SwipeEvent>,
    {
        let mut winners: HashMap<(UserId, ProductId), Winner> = HashMap::new();
        for ev in events {
            ev.validate()?;
            let product = match clusters {
                Some(map) => map.canonical(&ev.product_id).clone(),
                None => ev.product_id.clone(),
            };
            let candidate = Winner {
                direction: ev.direction,
                timestamp_ms: ev.timestamp_ms,
                event_id: ev.event_id.clone(),
            };
            winners
                .entry((ev.user_id.clone(), product))
                .and_modify(|w| {
                    if candidate.beats(w) {
                        *w = candidate.clone();
                    }
                })
                .or_insert(candidate);
        }
        Ok(Self::from_winners(winners))
    }

    fn from_winners(winners: HashMap<(UserId, ProductId), Winner>) -> Self {
        let mut users: Vec<UserId> = winners.keys().map(|(u, _)| u.clone()).collect();
        users.sort_unstable();
        users.dedup();
        let mut products: Vec<ProductId> = winners.keys().map(|(_, p)| p.clone()).collect();
        products.sort_unstable();
        products.dedup();

        let user_lookup: HashMap<UserId, u32> = users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i as u32))
            .collect();
        let product_lookup: HashMap<ProductId, u32> = products
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();

        let mut cells: Vec<Cell> = winners
            .into_iter()
            .map(|((u, p), w)| Cell {
                user: user_lookup[&u],
                product: product_lookup[&p],
                direction: w.direction,
                timestamp_ms: w.timestamp_ms,
                event_id: w.event_id,
            })
            .collect();
        cells.sort_unstable_by_key(|c| (c.user, c.product));

        let mut user_offsets = vec![0usize; users.len() + 1];
        for c in &cells {
            user_offsets[c.user as usize + 1] += 1;
        }
        for i in 1..user_offsets.len() {
            user_offsets[i] += user_offsets[i - 1];
        }

        let mut user_raids = vec![Vec::new(); users.len()];
        let mut product_raiders = vec![Vec::new(); products.len()];
        for c in cells.iter().filter(|c| c.direction == Direction::Raid) {
            user_raids[c.user as usize].push(c.product);
            product_raiders[c.product as usize].push(c.user);
        }

        let as_of = cells.iter().map(|c| c.timestamp_ms).max();
        Self {
            users,
            products,
            user_lookup,
            product_lookup,
            cells,
            user_offsets,
            user_raids,
            product_raiders,
            as_of,
        }
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn products(&self) -> &[ProductId] {
        &self.products
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_products(&self) -> usize {
        self.products.len()
    }

    pub fn user_index(&self, user: &UserId) -> Option<u32> {
        self.user_lookup.get(user).copied()
    }

    pub fn product_index(&self, product: &ProductId) -> Option<u32> {
        self.product_lookup.get(product).copied()
    }

    pub fn contains_user(&self, user: &UserId) -> bool {
        self.user_lookup.contains_key(user)
    }

    /// Latest swipe timestamp in the matrix.
    pub fn as_of(&self) -> Option<TimestampMs> {
        self.as_of
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Cells of one user, sorted by product index.
    pub fn user_cells(&self, user: u32) -> &[Cell] {
        let u = user as usize;
        &self.cells[self.user_offsets[u]..self.user_offsets[u + 1]]
    }

    pub fn raids(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.cells_with(Direction::Raid)
    }

    pub fn dislikes(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.cells_with(Direction::Dislike)
    }

    fn cells_with(&self, direction: Direction) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.cells
            .iter()
            .filter(move |c| c.direction == direction)
            .map(|c| (c.user, c.product))
    }

    pub fn raid_count(&self) -> usize {
        self.user_raids.iter().map(Vec::len).sum()
    }

    /// Sorted raid product indices of a user.
    pub fn user_raid_indices(&self, user: u32) -> &[u32] {
        &self.user_raids[user as usize]
    }

    /// Users who raided a product, ascending.
    pub fn product_raiders(&self, product: u32) -> &[u32] {
        &self.product_raiders[product as usize]
    }

    /// Whether the user swiped the product in either direction.
    pub fn has_swiped(&self, user: u32, product: u32) -> bool {
        self.user_cells(user)
            .binary_search_by_key(&product, |c| c.product)
            .is_ok()
    }

    /// The user's raids as a boolean vector over all products. Dislikes map to 0.
    pub fn raid_vector(&self, user: &UserId) -> Result<SparseBoolVec, ModelError> {
        let idx = self
            .user_index(user)
            .ok_or_else(|| ModelError::UnknownUser(user.clone()))?;
        Ok(SparseBoolVec {
            dim: self.products.len(),
            ones: self.user_raids[idx as usize].clone(),
        })
    }

    /// The winning swipes, one per filled cell, in (user, product) order.
    pub fn winning_swipes(&self) -> Vec<SwipeEvent> {
        self.cells
            .iter()
            .map(|c| SwipeEvent {
                event_id: c.event_id.clone(),
                user_id: self.users[c.user as usize].clone(),
                product_id: self.products[c.product as usize].clone(),
                direction: c.direction,
                timestamp_ms: c.timestamp_ms,
                variant: None,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Winner {
    direction: Direction,
    timestamp_ms: TimestampMs,
    event_id: EventId,
}

impl Winner {
    fn beats(&self, other: &Winner) -> bool {
        (self.timestamp_ms, &self.event_id) > (other.timestamp_ms, &other.event_id)
    }
}

/// Serialized form of a matrix: id tables plus index-addressed cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub users: Vec<UserId>,
    pub products: Vec<ProductId>,
    pub cells: Vec<CellRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub user: u32,
    pub product: u32,
    pub direction: Direction,
    pub timestamp_ms: TimestampMs,
    pub event_id: EventId,
}

impl From<InteractionMatrix> for MatrixRecord {
    fn from(m: InteractionMatrix) -> Self {
        MatrixRecord {
            cells: m
                .cells
                .into_iter()
                .map(|c| CellRecord {
                    user: c.user,
                    product: c.product,
                    direction: c.direction,
                    timestamp_ms: c.timestamp_ms,
                    event_id: c.event_id,
                })
                .collect(),
            users: m.users,
            products: m.products,
        }
    }
}

impl TryFrom<MatrixRecord> for InteractionMatrix {
    type Error = ModelError;

    fn try_from(rec: MatrixRecord) -> Result<Self, Self::Error> {
        let mut winners = HashMap::with_capacity(rec.cells.len());
        for c in rec.cells {
            let user = rec.users.get(c.user as usize).ok_or_else(|| {
                ModelError::InvalidRecord(format!("user index {} out of bounds", c.user))
            })?;
            let product = rec.products.get(c.product as usize).ok_or_else(|| {
                ModelError::InvalidRecord(format!("product index {} out of bounds", c.product))
            })?;
            let prev = winners.insert(
                (user.clone(), product.clone()),
                Winner {
                    direction: c.direction,
                    timestamp_ms: c.timestamp_ms,
                    event_id: c.event_id,
                },
            );
            if prev.is_some() {
                return Err(ModelError::InvalidRecord(format!(
                    "duplicate cell ({user}, {product})"
                )));
            }
        }
        let matrix = Self::from_winners(winners);
        // Rows or columns without cells cannot be represented.
        if matrix.users.len() != rec.users.len() || matrix.products.len() != rec.products.len() {
            return Err(ModelError::InvalidRecord(
                "id tables contain entries without cells".into(),
            ));
        }
        Ok(matrix)
    }
}
