//! Deterministic variant assignment and same-window funnel comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluation::{funnel, user_metrics, FunnelReport, PositiveActions, UserMetricsReport};
use crate::model::{Event, ImpressionEvent, TimeWindow, UserId};

#[derive(Debug, Error, PartialEq)]
pub enum AbTestError {
    #[error("experiment needs at least two variants, got {0}")]
    TooFewVariants(usize),
    #[error("variant {0:?} has a non-positive weight")]
    NonPositiveWeight(String),
    #[error("variant weights sum to {0}, expected 1")]
    WeightsDoNotSumToOne(f64),
    #[error("duplicate variant label {0:?}")]
    DuplicateLabel(String),
    #[error("reports cover different windows: {left:?} vs {right:?}")]
    WindowMismatch { left: TimeWindow, right: TimeWindow },
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub name: String,
    pub variants: Vec<Variant>,
    pub salt: String,
}

impl Experiment {
    pub fn new(
        name: impl Into<String>,
        variants: Vec<Variant>,
        salt: impl Into<String>,
    ) -> Result<Self, AbTestError> {
        let exp = Self {
            name: name.into(),
            variants,
            salt: salt.into(),
        };
        exp.validate()?;
        Ok(exp)
    }

    /// Even split across `labels`.
    pub fn even(name: &str, labels: &[&str], salt: &str) -> Result<Self, AbTestError> {
        let w = 1.0 / labels.len() as f64;
        let variants = labels
            .iter()
            .map(|l| Variant {
                label: (*l).to_owned(),
                weight: w,
            })
            .collect();
        Self::new(name, variants, salt)
    }

    pub fn validate(&self) -> Result<(), AbTestError> {
        if self.variants.len() < 2 {
            return Err(AbTestError::TooFewVariants(self.variants.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.variants {
            if v.weight.is_nan() || v.weight <= 0.0 {
                return Err(AbTestError::NonPositiveWeight(v.label.clone()));
            }
            if !seen.insert(v.label.as_str()) {
                return Err(AbTestError::DuplicateLabel(v.label.clone()));
            }
        }
        let sum: f64 = self.variants.iter().map(|v| v.weight).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AbTestError::WeightsDoNotSumToOne(sum));
        }
        Ok(())
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.variants.iter().map(|v| v.label.as_str())
    }

    /// Variant for `user`: the SHA-256 digest of `salt \0 user_id` mapped to
    /// `[0, 1)` and partitioned by cumulative weight.
    pub fn assign_variant(&self, user: &UserId) -> &str {
        let point = unit_digest(&self.salt, user.as_str());
        let mut cumulative = 0.0;
        for v in &self.variants {
            cumulative += v.weight;
            if point < cumulative {
                return &v.label;
            }
        }
        // Rounding in the cumulative sum can leave a sliver below 1.0.
        &self.variants.last().expect("experiment has variants").label
    }
}

/// Stable hash of `(salt, key)` as a uniform point in `[0, 1)`.
pub fn unit_digest(salt: &str, key: &str) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(salt.as_bytes());
    hasher.update([0u8]);
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(head) >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub funnel: FunnelReport,
    pub user_metrics: UserMetricsReport,
}

/// Event counts that could not be attributed to a known variant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Unattributed {
    pub events: usize,
    pub funnel: FunnelReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantComparison {
    pub experiment: String,
    pub window: TimeWindow,
    pub variants: BTreeMap<String, VariantReport>,
    pub unattributed: Unattributed,
}

impl VariantComparison {
    /// The variant with the highest funnel precision, if any variant has one.
    pub fn best_by_precision(&self) -> Option<&str> {
        self.variants
            .iter()
            .filter_map(|(l, r)| r.funnel.precision.map(|p| (l, p)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(l, _)| l.as_str())
    }

    /// Precision difference `a - b` in percentage points.
    pub fn precision_delta(&self, a: &str, b: &str) -> Result<Option<f64>, AbTestError> {
        let get = |l: &str| {
            self.variants
                .get(l)
                .ok_or_else(|| AbTestError::UnknownVariant(l.to_owned()))
        };
        let (ra, rb) = (get(a)?, get(b)?);
        Ok(ra
            .funnel
            .precision
            .zip(rb.funnel.precision)
            .map(|(x, y)| x - y))
    }
}

/// A funnel tagged with the window it was measured over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedFunnel {
    pub window: TimeWindow,
    pub funnel: FunnelReport,
}

/// Precision difference between two funnels, refused unless both were
/// measured over the same window.
pub fn funnel_precision_delta(
    a: &WindowedFunnel,
    b: &WindowedFunnel,
) -> Result<Option<f64>, AbTestError> {
    if a.window != b.window {
        return Err(AbTestError::WindowMismatch {
            left: a.window,
            right: b.window,
        });
    }
    Ok(a.funnel
        .precision
        .zip(b.funnel.precision)
        .map(|(x, y)| x - y))
}

/// Splits the log by each event's variant label and evaluates every variant
/// over the same window. Events without a label, or with a label the
/// experiment does not define, land in `unattributed`.
pub fn compare(
    events: &[Event],
    experiment: &Experiment,
    window: &TimeWindow,
) -> VariantComparison {
    let mut split: BTreeMap<&str, Vec<&Event>> =
        experiment.labels().map(|l| (l, Vec::new())).collect();
    let mut unattributed: Vec<&Event> = Vec::new();
    for ev in events.iter().filter(|e| window.contains(e.timestamp_ms())) {
        match ev.variant().and_then(|v| split.get_mut(v)) {
            Some(bucket) => bucket.push(ev),
            None => unattributed.push(ev),
        }
    }

    let report_funnel = |evs: &[&Event]| {
        let positives = PositiveActions::from_events(evs.iter().copied());
        funnel(impressions(evs), |i| positives.is_positive(i))
    };
    let variants = split
        .iter()
        .map(|(label, evs)| {
            (
                (*label).to_owned(),
                VariantReport {
                    funnel: report_funnel(evs),
                    user_metrics: user_metrics(evs.iter().copied(), &TimeWindow::ALL),
                },
            )
        })
        .collect();
    VariantComparison {
        experiment: experiment.name.clone(),
        window: *window,
        variants,
        unattributed: Unattributed {
            events: unattributed.len(),
            funnel: report_funnel(&unattributed),
        },
    }
}

fn impressions<'a>(evs: &'a [&'a Event]) -> impl Iterator<Item = &'a ImpressionEvent> {
    evs.iter().filter_map(|e| match e {
        Event::Impression(i) => Some(i),
        _ => None,
    })
}
