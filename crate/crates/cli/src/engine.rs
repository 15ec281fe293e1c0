//! Store-backed operations shared by the CLI and the HTTP service.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use swipecf_core::dedup::{ProductClusterMap, ProductRecord};
use swipecf_core::evaluation::{evaluate, EvaluateOptions, EvaluationReport};
use swipecf_core::eventstore::{
    parse_envelope_value, read_catalogue, read_registry, EventStore, IngestRejection, IngestReport,
    ReplayFilter, ReplayMode, Snapshot, StoreReader, CATALOGUE_FILE, REGISTRY_FILE, SNAPSHOT_FILE,
};
use swipecf_core::model::{
    ImpressionSource, InteractionMatrix, ProductId, TimeWindow, TimestampMs, UserId,
};
use swipecf_core::recommender::{NoRecommendationReason, RecommendationOutcome, Recommender};

use crate::error::AppError;

/// What a client shows the user next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationResponse {
    pub target: UserId,
    pub products: Vec<ProductId>,
    /// Similarity to the neighbor the products came from; null for fallback.
    pub similarity: Option<f64>,
    pub source: ImpressionSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<NoRecommendationReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighbor: Option<UserId>,
}

/// Summary of a loaded engine.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineInfo {
    pub users: usize,
    pub products: usize,
    pub raids: usize,
    pub as_of: Option<TimestampMs>,
}

/// Immutable recommendation state built from one read of the store.
#[derive(Debug)]
pub struct Engine {
    matrix: InteractionMatrix,
    registry: HashSet<UserId>,
    fallback: Vec<ProductId>,
}

impl Engine {
    /// Uses the store's snapshot plus its tail when the snapshot was taken
    /// with the same cluster map, and a full replay otherwise.
    pub fn load(dir: &Path, clusters: Option<&ProductClusterMap>) -> Result<Self, AppError> {
        let reader = StoreReader::open(dir)?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let matrix = match snap_path.is_file() {
            true => {
                let snap = Snapshot::read(&snap_path)?;
                if snap.cluster_map.as_ref() == clusters {
                    reader.restore(&snap)?
                } else {
                    reader.snapshot(clusters)?.matrix
                }
            }
            false => reader.snapshot(clusters)?.matrix,
        };
        let registry = load_registry(dir)?.into_iter().collect();
        let fallback = fallback_order(&matrix, &load_catalogue(dir)?, clusters);
        Ok(Self {
            matrix,
            registry,
            fallback,
        })
    }

    pub fn matrix(&self) -> &InteractionMatrix {
        &self.matrix
    }

    pub fn info(&self) -> EngineInfo {
        EngineInfo {
            users: self.matrix.n_users(),
            products: self.matrix.n_products(),
            raids: self.matrix.raid_count(),
            as_of: self.matrix.as_of(),
        }
    }

    /// Personalized products when a neighbor qualifies, otherwise the most
    /// raided products the user has not swiped. Users absent from both the
    /// matrix and the registry are unknown.
    pub fn recommend(&self, user: &UserId, n: usize) -> Result<RecommendationResponse, AppError> {
        let in_matrix = self.matrix.contains_user(user);
        if !in_matrix && !self.registry.contains(user) {
            return Err(AppError::UnknownUser(user.clone()));
        }
        let engine = Recommender::new(&self.matrix);
        let outcome = match in_matrix {
            true => engine.recommend(user, n)?,
            false => RecommendationOutcome::NoRecommendation {
                reason: NoRecommendationReason::ColdUser,
            },
        };
        Ok(match outcome {
            RecommendationOutcome::Recommended(rec) => RecommendationResponse {
                target: rec.target,
                products: rec.queued,
                similarity: Some(rec.similarity.value()),
                source: ImpressionSource::Recommender,
                reason: None,
                neighbor: Some(rec.neighbor),
            },
            RecommendationOutcome::NoRecommendation { reason } => RecommendationResponse {
                target: user.clone(),
                products: engine
                    .feed(user, n, &self.fallback)
                    .into_iter()
                    .map(|item| item.product_id)
                    .collect(),
                similarity: None,
                source: ImpressionSource::Fallback,
                reason: Some(reason),
                neighbor: None,
            },
        })
    }
}

/// Catalogue and matrix products, most raided first, then by id.
fn fallback_order(
    matrix: &InteractionMatrix,
    catalogue: &[ProductRecord],
    clusters: Option<&ProductClusterMap>,
) -> Vec<ProductId> {
    let mut pool: HashSet<ProductId> = matrix.products().iter().cloned().collect();
    for p in catalogue {
        let id = match clusters {
            Some(map) => map.canonical(&p.product_id).clone(),
            None => p.product_id.clone(),
        };
        pool.insert(id);
    }
    let raids = |p: &ProductId| {
        matrix
            .product_index(p)
            .map_or(0, |i| matrix.product_raiders(i).len())
    };
    let mut order: Vec<(usize, ProductId)> = pool.into_iter().map(|p| (raids(&p), p)).collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    order.into_iter().map(|(_, p)| p).collect()
}

fn load_catalogue(dir: &Path) -> Result<Vec<ProductRecord>, AppError> {
    let path = dir.join(CATALOGUE_FILE);
    match path.is_file() {
        true => Ok(read_catalogue(path)?),
        false => Ok(Vec::new()),
    }
}

fn load_registry(dir: &Path) -> Result<Vec<UserId>, AppError> {
    let path = dir.join(REGISTRY_FILE);
    match path.is_file() {
        true => Ok(read_registry(path)?),
        false => Ok(Vec::new()),
    }
}

/// Full evaluation of the store over `window`. Catalogue and registry
/// sizes, when present, set the product and user totals.
pub fn evaluate_store(
    dir: &Path,
    window: TimeWindow,
    clusters: Option<&ProductClusterMap>,
) -> Result<EvaluationReport, AppError> {
    let reader = StoreReader::open(dir)?;
    let events = reader
        .replay(&ReplayFilter::all(), ReplayMode::Lenient)?
        .into_events();
    let catalogue = load_catalogue(dir)?;
    let registry = load_registry(dir)?;
    let total_products = (!catalogue.is_empty()).then(|| {
        catalogue
            .iter()
            .map(|p| match clusters {
                Some(map) => map.canonical(&p.product_id),
                None => &p.product_id,
            })
            .collect::<HashSet<_>>()
            .len()
    });
    let opts = EvaluateOptions {
        window,
        clusters: clusters.cloned(),
        total_products,
        total_users: (!registry.is_empty()).then_some(registry.len()),
        ..EvaluateOptions::default()
    };
    Ok(evaluate(&events, &opts)?)
}

/// Appends a JSON array of envelopes, or JSON lines, to `store`.
///
/// A body that is an array but not valid JSON is refused outright; invalid
/// records inside a well-formed body are reported per index.
pub fn ingest_text(store: &mut EventStore, text: &str) -> Result<IngestReport, AppError> {
    if !text.trim_start().starts_with('[') {
        return Ok(store.ingest_jsonl(text)?);
    }
    let values: Vec<serde_json::Value> = serde_json::from_str(text)
        .map_err(|e| AppError::InvalidArgument(format!("malformed JSON: {e}")))?;
    let mut parsed = Vec::new();
    let mut early = Vec::new();
    for (index, value) in values.into_iter().enumerate() {
        match parse_envelope_value(value) {
            Ok(env) => parsed.push((index, env)),
            Err(error) => early.push(IngestRejection { index, error }),
        }
    }
    let mut report = store.append_batch(parsed.iter().map(|(_, e)| e))?;
    for r in &mut report.errors {
        r.index = parsed[r.index].0;
    }
    report.rejected += early.len();
    report.errors.extend(early);
    report.errors.sort_by_key(|r| r.index);
    Ok(report)
}

pub fn read_cluster_map(path: &Path) -> Result<ProductClusterMap, AppError> {
    let file = fs::File::open(path)
        .map_err(|e| AppError::InvalidArgument(format!("{}: {e}", path.display())))?;
    Ok(ProductClusterMap::read_csv(file)?)
}

/// One side of a window: epoch milliseconds or an RFC 3339 timestamp.
pub fn parse_instant(s: &str) -> Result<TimestampMs, AppError> {
    let s = s.trim();
    if let Ok(ms) = s.parse::<i64>() {
        return Ok(ms);
    }
    DateTime::parse_from_rfc3339(s)
        .map(|dt| dt.timestamp_millis())
        .map_err(|_| {
            AppError::InvalidArgument(format!(
                "{s:?} is neither epoch milliseconds nor an RFC 3339 timestamp"
            ))
        })
}

pub fn window_from_bounds(from: Option<&str>, to: Option<&str>) -> Result<TimeWindow, AppError> {
    let bound = |s: Option<&str>| {
        s.filter(|s| !s.trim().is_empty())
            .map(parse_instant)
            .transpose()
    };
    let (from_ms, to_ms) = (bound(from)?, bound(to)?);
    if let (Some(f), Some(t)) = (from_ms, to_ms) {
        if f > t {
            return Err(AppError::InvalidArgument(format!(
                "window starts after it ends ({f} > {t})"
            )));
        }
    }
    Ok(TimeWindow::new(from_ms, to_ms))
}

/// Parses `FROM..TO`; either side may be empty.
pub fn parse_window(s: &str) -> Result<TimeWindow, AppError> {
    let (from, to) = s
        .split_once("..")
        .ok_or_else(|| AppError::InvalidArgument(format!("window {s:?} is not FROM..TO")))?;
    window_from_bounds(Some(from), Some(to))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows() {
        assert_eq!(parse_window("..").unwrap(), TimeWindow::ALL);
        assert_eq!(
            parse_window("1000..2000").unwrap(),
            TimeWindow::new(Some(1000), Some(2000))
        );
        assert_eq!(
            parse_window("2020-04-01T00:00:00Z..").unwrap(),
            TimeWindow::new(Some(1_585_699_200_000), None)
        );
        assert!(parse_window("5..1").is_err());
        assert!(parse_window("yesterday").is_err());
        assert!(parse_window("x..1").is_err());
    }
}
