//! Dataset, system and user perspective metrics over an event log.
//!
//! Dataset metrics (sparsity, catalogue coverage, coverage) describe what
//! the recommender has to work with. System metrics (precision, the
//! similarity/precision buckets and the recommendation funnel) describe how
//! well it recommends. User metrics summarise engagement.

use std::collections::{BTreeMap, HashMap, HashSet};

use chrono::{DateTime, Datelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::ProductClusterMap;
use crate::model::{
    Direction, Event, ImpressionEvent, ImpressionSource, ProductId, SessionEvent, SwipeEvent,
    TimeWindow, TimestampMs, UserId,
};

pub const DEFAULT_BUCKET_WIDTH: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{0} must be positive")]
    ZeroDenominator(&'static str),
    #[error("inconsistent counts: {0}")]
    InconsistentCounts(String),
    #[error("bucket width {0} does not divide 1 evenly")]
    InvalidBucketWidth(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_users: usize,
    pub total_products: usize,
    pub total_swipes: usize,
    pub products_swiped_min_twice: usize,
    pub products_raided: usize,
}

impl DatasetStats {
    pub fn new(
        total_users: usize,
        total_products: usize,
        total_swipes: usize,
        products_swiped_min_twice: usize,
        products_raided: usize,
    ) -> Result<Self, MetricError> {
        if products_swiped_min_twice > total_products || products_raided > total_products {
            return Err(MetricError::InconsistentCounts(format!(
                "{products_swiped_min_twice} swiped twice / {products_raided} raided of {total_products} products"
            )));
        }
        if products_swiped_min_twice > total_swipes {
            return Err(MetricError::InconsistentCounts(format!(
                "{products_swiped_min_twice} products swiped twice from {total_swipes} swipes"
            )));
        }
        Ok(Self {
            total_users,
            total_products,
            total_swipes,
            products_swiped_min_twice,
            products_raided,
        })
    }

    /// Counts swipe events against explicit catalogue and user totals.
    /// Every swipe event counts, including repeats on the same pair.
    pub fn from_swipes<'a>(
        swipes: impl IntoIterator<Item = &'a SwipeEvent>,
        total_users: usize,
        total_products: usize,
    ) -> Result<Self, MetricError> {
        let mut per_product: HashMap<&ProductId, usize> = HashMap::new();
        let mut raided: HashSet<&ProductId> = HashSet::new();
        let mut total_swipes = 0;
        for s in swipes {
            total_swipes += 1;
            *per_product.entry(&s.product_id).or_default() += 1;
            if s.direction == Direction::Raid {
                raided.insert(&s.product_id);
            }
        }
        let twice = per_product.values().filter(|&&c| c >= 2).count();
        Self::new(
            total_users,
            total_products,
            total_swipes,
            twice,
            raided.len(),
        )
    }
}

/// Percentage of the user x product matrix without a swipe.
///
/// Floors at 0 when repeat swipes outnumber the cells.
pub fn sparsity(stats: &DatasetStats) -> Result<f64, MetricError> {
    if stats.total_products == 0 {
        return Err(MetricError::ZeroDenominator("total_products"));
    }
    if stats.total_users == 0 {
        return Err(MetricError::ZeroDenominator("total_users"));
    }
    let cells = stats.total_products as f64 * stats.total_users as f64;
    Ok(((1.0 - stats.total_swipes as f64 / cells) * 100.0).max(0.0))
}

/// Percentage of products swiped at least twice.
pub fn catalogue_coverage(stats: &DatasetStats) -> Result<f64, MetricError> {
    if stats.total_products == 0 {
        return Err(MetricError::ZeroDenominator("total_products"));
    }
    Ok(stats.products_swiped_min_twice as f64 / stats.total_products as f64 * 100.0)
}

/// Percentage of products raided at least once.
pub fn coverage(stats: &DatasetStats) -> Result<f64, MetricError> {
    if stats.total_products == 0 {
        return Err(MetricError::ZeroDenominator("total_products"));
    }
    Ok(stats.products_raided as f64 / stats.total_products as f64 * 100.0)
}

/// `N_rs / N_s` as a ratio; `None` when nothing was selected.
pub fn precision(
    n_relevant_selected: usize,
    n_selected: usize,
) -> Result<Option<f64>, MetricError> {
    if n_relevant_selected > n_selected {
        return Err(MetricError::InconsistentCounts(format!(
            "{n_relevant_selected} relevant of {n_selected} selected"
        )));
    }
    if n_selected == 0 {
        return Ok(None);
    }
    Ok(Some(n_relevant_selected as f64 / n_selected as f64))
}

/// Positive actions (raids and referral clicks) indexed for impression lookups.
///
/// An impression is positive when the same user raided or clicked the same
/// product at or after the impression time.
#[derive(Debug, Default, Clone)]
pub struct PositiveActions {
    latest: HashMap<UserId, HashMap<ProductId, TimestampMs>>,
}

impl PositiveActions {
    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a Event>) -> Self {
        let mut latest: HashMap<UserId, HashMap<ProductId, TimestampMs>> = HashMap::new();
        for ev in events {
            let key_ts = match ev {
                Event::Swipe(s) if s.direction == Direction::Raid => {
                    Some((&s.user_id, &s.product_id, s.timestamp_ms))
                }
                Event::ReferralClick(c) => Some((&c.user_id, &c.product_id, c.timestamp_ms)),
                _ => None,
            };
            if let Some((u, p, ts)) = key_ts {
                latest
                    .entry(u.clone())
                    .or_default()
                    .entry(p.clone())
                    .and_modify(|t| *t = (*t).max(ts))
                    .or_insert(ts);
            }
        }
        Self { latest }
    }

    pub fn is_positive(&self, imp: &ImpressionEvent) -> bool {
        self.latest
            .get(&imp.user_id)
            .and_then(|m| m.get(&imp.product_id))
            .is_some_and(|&ts| ts >= imp.timestamp_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBucket {
    pub lower: f64,
    pub upper: f64,
    pub impressions: usize,
    pub positives: usize,
    /// Percentage, like [`FunnelReport::precision`].
    pub precision: Option<f64>,
}

fn bucket_count(width: f64) -> Result<usize, MetricError> {
    if !(width > 0.0 && width <= 1.0) {
        return Err(MetricError::InvalidBucketWidth(width));
    }
    let n = (1.0 / width).round();
    if (n * width - 1.0).abs() > 1e-9 {
        return Err(MetricError::InvalidBucketWidth(width));
    }
    Ok(n as usize)
}

/// Index of the bucket `[i/n, (i+1)/n)` holding `score`; 1.0 lands in the last.
fn bucket_index(score: f64, n: usize) -> usize {
    let mut i = ((score * n as f64).floor().max(0.0) as usize).min(n - 1);
    while i + 1 < n && (i + 1) as f64 / n as f64 <= score {
        i += 1;
    }
    while i > 0 && i as f64 / n as f64 > score {
        i -= 1;
    }
    i
}

/// Precision per similarity-score interval over recommender impressions.
/// Empty buckets carry no precision.
pub fn similarity_precision_buckets<'a>(
    impressions: impl IntoIterator<Item = &'a ImpressionEvent>,
    is_positive: impl Fn(&ImpressionEvent) -> bool,
    bucket_width: f64,
) -> Result<Vec<SimilarityBucket>, MetricError> {
    let n = bucket_count(bucket_width)?;
    let mut counts = vec![(0usize, 0usize); n];
    for imp in impressions {
        if imp.source != ImpressionSource::Recommender {
            continue;
        }
        let Some(score) = imp.similarity_score else {
            continue;
        };
        let slot = &mut counts[bucket_index(score, n)];
        slot.0 += 1;
        if is_positive(imp) {
            slot.1 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, (impressions, positives))| SimilarityBucket {
            lower: i as f64 / n as f64,
            upper: (i + 1) as f64 / n as f64,
            impressions,
            positives,
            precision: (impressions > 0).then(|| positives as f64 / impressions as f64 * 100.0),
        })
        .collect())
}

/// Shown -> recommended -> positive-action counts. Shares and precision are
/// percentages and absent when their denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub total_shown: usize,
    pub recommended_shown: usize,
    pub recommended_share: Option<f64>,
    pub positive_actions_on_recommended: usize,
    pub precision: Option<f64>,
}

impl FunnelReport {
    pub fn from_counts(
        total_shown: usize,
        recommended_shown: usize,
        positive_actions_on_recommended: usize,
    ) -> Result<Self, MetricError> {
        if recommended_shown > total_shown {
            return Err(MetricError::InconsistentCounts(format!(
                "{recommended_shown} recommended of {total_shown} shown"
            )));
        }
        let precision = precision(positive_actions_on_recommended, recommended_shown)?;
        Ok(Self {
            total_shown,
            recommended_shown,
            recommended_share: (total_shown > 0)
                .then(|| recommended_shown as f64 / total_shown as f64 * 100.0),
            positive_actions_on_recommended,
            precision: precision.map(|p| p * 100.0),
        })
    }

    /// Share rounded to one decimal, as printed in funnel reports.
    pub fn recommended_share_display(&self) -> Option<f64> {
        self.recommended_share.map(|s| (s * 10.0).round() / 10.0)
    }

    /// Precision rounded to the nearest whole percent.
    pub fn precision_display(&self) -> Option<f64> {
        self.precision.map(f64::round)
    }
}

impl Default for FunnelReport {
    fn default() -> Self {
        FunnelReport::from_counts(0, 0, 0).expect("zero counts are consistent")
    }
}

pub fn funnel<'a>(
    impressions: impl IntoIterator<Item = &'a ImpressionEvent>,
    is_positive: impl Fn(&ImpressionEvent) -> bool,
) -> FunnelReport {
    let (mut shown, mut rec, mut pos) = (0, 0, 0);
    for imp in impressions {
        shown += 1;
        if imp.source == ImpressionSource::Recommender {
            rec += 1;
            if is_positive(imp) {
                pos += 1;
            }
        }
    }
    FunnelReport::from_counts(shown, rec, pos).expect("counts are consistent by construction")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserMetricsReport {
    pub avg_session_minutes: f64,
    pub avg_swipes_per_new_user: f64,
    pub new_users: usize,
    pub referral_clicks: usize,
    pub returning_users: usize,
    /// Swipe counts keyed by `YYYY-MM` (UTC).
    pub monthly_swipes: BTreeMap<String, usize>,
    /// Mean number of swipes a user made before their first recommender
    /// impression, over users who received one.
    pub avg_swipes_to_first_recommendation: Option<f64>,
    pub users_with_recommendation: usize,
}

fn month_key(ts: TimestampMs) -> String {
    match DateTime::from_timestamp_millis(ts) {
        Some(dt) => format!("{:04}-{:02}", dt.year(), dt.month()),
        None => "invalid".to_owned(),
    }
}

/// User-perspective metrics over the events that fall inside `window`.
///
/// A user's first session in the window counts as their new-user session;
/// users with two or more sessions count as returning.
pub fn user_metrics<'a>(
    events: impl IntoIterator<Item = &'a Event>,
    window: &TimeWindow,
) -> UserMetricsReport {
    let mut sessions: HashMap<&UserId, Vec<&SessionEvent>> = HashMap::new();
    let mut swipes: HashMap<&UserId, Vec<TimestampMs>> = HashMap::new();
    let mut first_rec: HashMap<&UserId, TimestampMs> = HashMap::new();
    let mut report = UserMetricsReport::default();

    for ev in events
        .into_iter()
        .filter(|e| window.contains(e.timestamp_ms()))
    {
        match ev {
            Event::Session(s) => sessions.entry(&s.user_id).or_default().push(s),
            Event::Swipe(s) => {
                swipes.entry(&s.user_id).or_default().push(s.timestamp_ms);
                *report
                    .monthly_swipes
                    .entry(month_key(s.timestamp_ms))
                    .or_default() += 1;
            }
            Event::ReferralClick(_) => report.referral_clicks += 1,
            Event::Impression(imp) if imp.source == ImpressionSource::Recommender => {
                first_rec
                    .entry(&imp.user_id)
                    .and_modify(|t| *t = (*t).min(imp.timestamp_ms))
                    .or_insert(imp.timestamp_ms);
            }
            Event::Impression(_) => {}
        }
    }
    for ts in swipes.values_mut() {
        ts.sort_unstable();
    }

    let all_sessions: Vec<&SessionEvent> = sessions.values().flatten().copied().collect();
    if !all_sessions.is_empty() {
        let total_ms: i64 = all_sessions
            .iter()
            .map(|s| s.session_end_ms - s.session_start_ms)
            .sum();
        report.avg_session_minutes = total_ms as f64 / 60_000.0 / all_sessions.len() as f64;
    }

    let mut new_user_swipes = 0usize;
    for (user, list) in &sessions {
        if list.len() >= 2 {
            report.returning_users += 1;
        }
        let first = list
            .iter()
            .min_by(|a, b| {
                (a.session_start_ms, &a.event_id).cmp(&(b.session_start_ms, &b.event_id))
            })
            .expect("non-empty");
        let in_first = swipes.get(user).map_or(0, |ts| {
            let lo = ts.partition_point(|&t| t < first.session_start_ms);
            let hi = ts.partition_point(|&t| t <= first.session_end_ms);
            hi - lo
        });
        new_user_swipes += in_first;
        report.new_users += 1;
    }
    if report.new_users > 0 {
        report.avg_swipes_per_new_user = new_user_swipes as f64 / report.new_users as f64;
    }

    if !first_rec.is_empty() {
        let total: usize = first_rec
            .iter()
            .map(|(user, &t)| {
                swipes
                    .get(user)
                    .map_or(0, |ts| ts.partition_point(|&s| s < t))
            })
            .sum();
        report.users_with_recommendation = first_rec.len();
        report.avg_swipes_to_first_recommendation = Some(total as f64 / first_rec.len() as f64);
    }
    report
}

/// Spearman rank correlation with average ranks for ties. `None` for
/// fewer than two points or a constant series.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Inputs of a full evaluation pass besides the log itself.
#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub window: TimeWindow,
    pub clusters: Option<ProductClusterMap>,
    /// Catalogue size; defaults to the distinct products seen in the window.
    pub total_products: Option<usize>,
    /// Registered users; defaults to the distinct users seen in the window.
    pub total_users: Option<usize>,
    pub bucket_width: f64,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            window: TimeWindow::ALL,
            clusters: None,
            total_products: None,
            total_users: None,
            bucket_width: DEFAULT_BUCKET_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub stats: DatasetStats,
    /// Users with at least one swipe in the window.
    pub active_users: usize,
    pub sparsity: Option<f64>,
    pub sparsity_over_active_users: Option<f64>,
    pub catalogue_coverage: Option<f64>,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub window: TimeWindow,
    pub dataset: DatasetReport,
    pub funnel: FunnelReport,
    pub buckets: Vec<SimilarityBucket>,
    pub user_metrics: UserMetricsReport,
}

/// Runs every metric over the events inside `opts.window`.
pub fn evaluate(events: &[Event], opts: &EvaluateOptions) -> Result<EvaluationReport, MetricError> {
    let in_window: Vec<&Event> = events
        .iter()
        .filter(|e| opts.window.contains(e.timestamp_ms()))
        .collect();

    let swipes: Vec<SwipeEvent> = in_window
        .iter()
        .filter_map(|e| match e {
            Event::Swipe(s) => Some(match &opts.clusters {
                Some(map) => map.remap_swipe(s),
                None => s.clone(),
            }),
            _ => None,
        })
        .collect();
    let impressions: Vec<&ImpressionEvent> = in_window
        .iter()
        .filter_map(|e| match e {
            Event::Impression(i) => Some(i),
            _ => None,
        })
        .collect();

    let observed_products: HashSet<&ProductId> = swipes
        .iter()
        .map(|s| &s.product_id)
        .chain(impressions.iter().map(|i| match &opts.clusters {
            Some(map) => map.canonical(&i.product_id),
            None => &i.product_id,
        }))
        .collect();
    let observed_users: HashSet<&UserId> = in_window.iter().map(|e| e.user_id()).collect();
    let active_users = swipes
        .iter()
        .map(|s| &s.user_id)
        .collect::<HashSet<_>>()
        .len();

    let stats = DatasetStats::from_swipes(
        &swipes,
        opts.total_users.unwrap_or(observed_users.len()),
        opts.total_products.unwrap_or(observed_products.len()),
    )?;
    let active_stats = DatasetStats {
        total_users: active_users,
        ..stats
    };
    let dataset = DatasetReport {
        stats,
        active_users,
        sparsity: sparsity(&stats).ok(),
        sparsity_over_active_users: sparsity(&active_stats).ok(),
        catalogue_coverage: catalogue_coverage(&stats).ok(),
        coverage: coverage(&stats).ok(),
    };

    let positives = PositiveActions::from_events(in_window.iter().copied());
    let is_positive = |imp: &ImpressionEvent| positives.is_positive(imp);
    Ok(EvaluationReport {
        window: opts.window,
        dataset,
        funnel: funnel(impressions.iter().copied(), is_positive),
        buckets: similarity_precision_buckets(
            impressions.iter().copied(),
            is_positive,
            opts.bucket_width,
        )?,
        user_metrics: user_metrics(in_window.iter().copied(), &TimeWindow::ALL),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::{EventId, ReferralClickEvent};

    fn stats(users: usize, products: usize, swipes: usize) -> DatasetStats {
        DatasetStats::new(users, products, swipes, 0, 0).unwrap()
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity(&stats(10, 100, 0)).unwrap(), 100.0);
        assert!((sparsity(&stats(10, 100, 100)).unwrap() - 90.0).abs() < 1e-9);
        // swipes / cells = 0.0045
        for (s, p, u) in [(45, 100, 100), (450, 1000, 100), (9, 40, 50)] {
            assert!((sparsity(&stats(u, p, s)).unwrap() - 99.55).abs() < 0.005);
        }
        assert_eq!(
            sparsity(&stats(0, 10, 0)),
            Err(MetricError::ZeroDenominator("total_users"))
        );
        assert_eq!(
            sparsity(&stats(10, 0, 0)),
            Err(MetricError::ZeroDenominator("total_products"))
        );
        assert_eq!(sparsity(&stats(1, 1, 3)).unwrap(), 0.0);
    }

    #[test]
    fn coverage_examples() {
        let s = DatasetStats::new(5, 1000, 2000, 882, 477).unwrap();
        assert!((catalogue_coverage(&s).unwrap() - 88.2).abs() < 0.005);
        assert!((coverage(&s).unwrap() - 47.7).abs() < 0.005);
        let none = DatasetStats::new(1, 4, 0, 0, 0).unwrap();
        assert_eq!(catalogue_coverage(&none).unwrap(), 0.0);
        assert_eq!(coverage(&none).unwrap(), 0.0);
        assert!(DatasetStats::new(1, 4, 10, 5, 0).is_err());
    }

    fn sw(i: usize, user: &str, product: &str, dir: Direction, ts: i64) -> SwipeEvent {
        SwipeEvent {
            event_id: EventId::new(format!("s{i}")),
            user_id: user.into(),
            product_id: product.into(),
            direction: dir,
            timestamp_ms: ts,
            variant: None,
        }
    }

    #[test]
    fn catalogue_coverage_counts_products_swiped_twice() {
        // swipe counts [2, 1, 0, 5] over p1..p4
        let mut events = Vec::new();
        for (p, n) in [("p1", 2), ("p2", 1), ("p3", 0), ("p4", 5)] {
            for k in 0..n {
                events.push(sw(events.len(), &format!("u{k}"), p, Direction::Dislike, 0));
            }
        }
        let s = DatasetStats::from_swipes(&events, 5, 4).unwrap();
        assert_eq!(s.products_swiped_min_twice, 2);
        assert_eq!(catalogue_coverage(&s).unwrap(), 50.0);
    }

    #[test]
    fn coverage_counts_raided_products() {
        let events = vec![
            sw(0, "u1", "p1", Direction::Raid, 0),
            sw(1, "u2", "p1", Direction::Raid, 0),
            sw(2, "u1", "p2", Direction::Raid, 0),
            sw(3, "u1", "p3", Direction::Raid, 0),
            sw(4, "u1", "p4", Direction::Dislike, 0),
            sw(5, "u2", "p5", Direction::Dislike, 0),
        ];
        let s = DatasetStats::from_swipes(&events, 2, 6).unwrap();
        assert_eq!(coverage(&s).unwrap(), 50.0);
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision(7, 7).unwrap(), Some(1.0));
        assert_eq!(precision(0, 9).unwrap(), Some(0.0));
        assert_eq!(precision(0, 0).unwrap(), None);
        let p = precision(1198, 9505).unwrap().unwrap();
        assert!((p * 100.0 - 12.6).abs() < 0.05);
        assert_eq!((p * 100.0).round(), 13.0);
        assert!(precision(3, 2).is_err());
    }

    #[test]
    fn funnel_rounding_matches_printed_values() {
        let v1 = FunnelReport::from_counts(53141, 9505, 1198).unwrap();
        assert_eq!(v1.recommended_share_display(), Some(17.9));
        assert_eq!(v1.precision_display(), Some(13.0));
        let v2 = FunnelReport::from_counts(76390, 11605, 1326).unwrap();
        assert_eq!(v2.recommended_share_display(), Some(15.2));
        assert_eq!(v2.precision_display(), Some(11.0));
        let zero = FunnelReport::from_counts(0, 0, 0).unwrap();
        assert_eq!(zero.recommended_share, None);
        assert_eq!(zero.precision, None);
    }

    fn imp(i: usize, user: &str, product: &str, score: Option<f64>, ts: i64) -> ImpressionEvent {
        ImpressionEvent {
            event_id: EventId::new(format!("i{i}")),
            user_id: user.into(),
            product_id: product.into(),
            source: if score.is_some() {
                ImpressionSource::Recommender
            } else {
                ImpressionSource::Fallback
            },
            similarity_score: score,
            timestamp_ms: ts,
            variant: None,
        }
    }

    #[test]
    fn single_bucket_at_one_half() {
        let imps: Vec<_> = (0..10)
            .map(|i| imp(i, "u", &format!("p{i}"), Some(0.5), 0))
            .collect();
        let buckets =
            similarity_precision_buckets(&imps, |i| i.product_id.as_str() < "p5", 0.05).unwrap();
        assert_eq!(buckets.len(), 20);
        let full: Vec<_> = buckets.iter().filter(|b| b.impressions > 0).collect();
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].lower, 0.5);
        assert_eq!(full[0].precision, Some(50.0));
        assert!(buckets
            .iter()
            .filter(|b| b.impressions == 0)
            .all(|b| b.precision.is_none()));
    }

    #[test]
    fn fallback_only_gives_empty_buckets() {
        let imps = vec![imp(0, "u", "p", None, 0)];
        let buckets = similarity_precision_buckets(&imps, |_| true, 0.05).unwrap();
        assert!(buckets.iter().all(|b| b.impressions == 0));
    }

    #[test]
    fn bucket_edges() {
        assert_eq!(bucket_index(0.0, 20), 0);
        assert_eq!(bucket_index(0.15, 20), 3);
        assert_eq!(bucket_index(0.1499999, 20), 2);
        assert_eq!(bucket_index(1.0, 20), 19);
        assert_eq!(bucket_index(0.3, 10), 3);
        assert!(bucket_count(0.3).is_err());
        assert!(bucket_count(0.0).is_err());
        assert_eq!(bucket_count(0.1).unwrap(), 10);
    }

    #[test]
    fn positive_actions_need_same_user_product_at_or_after() {
        let events = vec![
            Event::Swipe(sw(0, "u", "p1", Direction::Raid, 100)),
            Event::Swipe(sw(1, "u", "p2", Direction::Dislike, 100)),
            Event::ReferralClick(ReferralClickEvent {
                event_id: "c".into(),
                user_id: "u".into(),
                product_id: "p3".into(),
                timestamp_ms: 50,
                variant: None,
            }),
        ];
        let pa = PositiveActions::from_events(&events);
        assert!(pa.is_positive(&imp(0, "u", "p1", Some(0.5), 100)));
        assert!(!pa.is_positive(&imp(1, "u", "p1", Some(0.5), 101)));
        assert!(!pa.is_positive(&imp(2, "u", "p2", Some(0.5), 0)));
        assert!(pa.is_positive(&imp(3, "u", "p3", Some(0.5), 50)));
        assert!(!pa.is_positive(&imp(4, "v", "p1", Some(0.5), 0)));
    }

    fn session(i: usize, user: &str, start: i64, end: i64) -> Event {
        Event::Session(SessionEvent {
            event_id: EventId::new(format!("sess{i}")),
            user_id: user.into(),
            session_start_ms: start,
            session_end_ms: end,
            variant: None,
        })
    }

    #[test]
    fn one_user_ninety_seconds_hundred_swipes() {
        let t0 = 1_585_699_200_000; // 2020-04-01
        let mut events = vec![session(0, "u", t0, t0 + 90_000)];
        for i in 0..100 {
            events.push(Event::Swipe(sw(
                i,
                "u",
                &format!("p{i}"),
                Direction::Dislike,
                t0 + i as i64 * 900,
            )));
        }
        let r = user_metrics(&events, &TimeWindow::ALL);
        assert_eq!(r.avg_session_minutes, 1.5);
        assert_eq!(r.avg_swipes_per_new_user, 100.0);
        assert_eq!(r.new_users, 1);
        assert_eq!(r.returning_users, 0);
        assert_eq!(r.monthly_swipes.get("2020-04"), Some(&100));
        assert_eq!(r.avg_swipes_to_first_recommendation, None);
    }

    #[test]
    fn no_sessions_zeroed() {
        assert_eq!(
            user_metrics(&[], &TimeWindow::ALL),
            UserMetricsReport::default()
        );
        let only_swipe = [Event::Swipe(sw(0, "u", "p", Direction::Raid, 0))];
        let r = user_metrics(&only_swipe, &TimeWindow::ALL);
        assert_eq!(r.avg_session_minutes, 0.0);
        assert_eq!(r.new_users, 0);
    }

    #[test]
    fn swipes_to_first_recommendation_hand_count() {
        // a: 3 swipes before its first rec; b: 0; c: 5 (never gets one -> excluded); d: 6.
        let mut events = Vec::new();
        let mut n = 0;
        let mut push_swipes = |events: &mut Vec<Event>, user: &str, times: &[i64]| {
            for &t in times {
                events.push(Event::Swipe(sw(
                    n,
                    user,
                    &format!("p{n}"),
                    Direction::Raid,
                    t,
                )));
                n += 1;
            }
        };
        push_swipes(&mut events, "a", &[1, 2, 3, 10, 11]);
        push_swipes(&mut events, "b", &[20, 21]);
        push_swipes(&mut events, "c", &[1, 2, 3, 4, 5]);
        push_swipes(&mut events, "d", &[1, 2, 3, 4, 5, 6, 30]);
        events.push(Event::Impression(imp(0, "a", "x", Some(0.3), 5)));
        events.push(Event::Impression(imp(1, "a", "y", Some(0.3), 12)));
        events.push(Event::Impression(imp(2, "b", "x", Some(0.3), 20)));
        events.push(Event::Impression(imp(3, "c", "x", None, 3)));
        events.push(Event::Impression(imp(4, "d", "x", Some(0.9), 7)));
        let r = user_metrics(&events, &TimeWindow::ALL);
        assert_eq!(r.users_with_recommendation, 3);
        assert_eq!(
            r.avg_swipes_to_first_recommendation,
            Some((3.0 + 0.0 + 6.0) / 3.0)
        );
    }

    #[test]
    fn returning_users_and_first_session_swipes() {
        let events = vec![
            session(0, "a", 0, 1000),
            session(1, "a", 5000, 6000),
            session(2, "b", 0, 60_000),
            Event::Swipe(sw(0, "a", "p", Direction::Raid, 500)),
            Event::Swipe(sw(1, "a", "q", Direction::Raid, 5500)),
            Event::Swipe(sw(2, "b", "q", Direction::Raid, 100)),
            Event::Swipe(sw(3, "b", "r", Direction::Raid, 200)),
        ];
        let r = user_metrics(&events, &TimeWindow::ALL);
        assert_eq!(r.returning_users, 1);
        assert_eq!(r.new_users, 2);
        assert_eq!(r.avg_swipes_per_new_user, 1.5);
        let expected_minutes = (1000.0 + 1000.0 + 60_000.0) / 60_000.0 / 3.0;
        assert!((r.avg_session_minutes - expected_minutes).abs() < 1e-12);
        let windowed = user_metrics(&events, &TimeWindow::new(Some(4000), None));
        assert_eq!(windowed.returning_users, 0);
        assert_eq!(windowed.new_users, 1);
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    fn arb_impressions() -> impl Strategy<Value = Vec<ImpressionEvent>> {
        prop::collection::vec(
            (0u8..5, 0u8..8, prop::option::of(0.0f64..=1.0), 0i64..100),
            0..80,
        )
        .prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (u, p, s, ts))| imp(i, &format!("u{u}"), &format!("p{p}"), s, ts))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn funnel_counts_add_and_ratios_stay_in_range(
            a in arb_impressions(),
            b in arb_impressions(),
        ) {
            let pos = |i: &ImpressionEvent| i.timestamp_ms % 3 == 0;
            let fa = funnel(&a, pos);
            let fb = funnel(&b, pos);
            let both: Vec<_> = a.iter().chain(b.iter()).cloned().collect();
            let fab = funnel(&both, pos);
            prop_assert_eq!(fab.total_shown, fa.total_shown + fb.total_shown);
            prop_assert_eq!(fab.recommended_shown, fa.recommended_shown + fb.recommended_shown);
            prop_assert_eq!(
                fab.positive_actions_on_recommended,
                fa.positive_actions_on_recommended + fb.positive_actions_on_recommended
            );
            for v in [fab.recommended_share, fab.precision].into_iter().flatten() {
                prop_assert!((0.0..=100.0).contains(&v));
            }

            // Aggregate precision is the impression-weighted mean of bucket precisions.
            let buckets = similarity_precision_buckets(&both, pos, 0.05).unwrap();
            let n: usize = buckets.iter().map(|b| b.impressions).sum();
            prop_assert_eq!(n, fab.recommended_shown);
            if n > 0 {
                let weighted: f64 = buckets
                    .iter()
                    .filter_map(|b| b.precision.map(|p| p * b.impressions as f64))
                    .sum::<f64>() / n as f64;
                prop_assert!((weighted - fab.precision.unwrap()).abs() < 1e-9);
            }
        }
    }
}
