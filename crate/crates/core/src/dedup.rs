//! Near-duplicate product clustering by title edit distance.
//!
//! Two products join a cluster when their normalized titles are more than
//! `threshold` similar, where similarity is `1 - editdistance / maxlen`.
//! Clusters are single-link and each is represented by its smallest id.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ProductId, SwipeEvent};

pub const DEFAULT_THRESHOLD: f64 = 0.85;

#[derive(Debug, Error)]
pub enum DedupError {
    #[error("title is empty after normalization")]
    EmptyTitle,
    #[error("product {product_id}: title is empty after normalization")]
    UnusableTitle { product_id: ProductId },
    #[error("duplicate product id {0}")]
    DuplicateProduct(ProductId),
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("cluster map is not idempotent at {0}")]
    NotIdempotent(ProductId),
    #[error("cluster map file: {0}")]
    Csv(#[from] csv::Error),
    #[error("cluster map file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub product_id: ProductId,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referral_url: Option<String>,
}

/// Case-folds, trims and collapses internal whitespace.
pub fn normalize_title(title: &str) -> Result<String, DedupError> {
    let folded = title.to_lowercase();
    let normal = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    if normal.is_empty() {
        Err(DedupError::EmptyTitle)
    } else {
        Ok(normal)
    }
}

/// Unit-cost Levenshtein distance over chars.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein(&a, &b, usize::MAX).unwrap_or(usize::MAX)
}

/// Levenshtein distance, or `None` once it provably exceeds `limit`.
fn levenshtein(a: &[char], b: &[char], limit: usize) -> Option<usize> {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    if a.len() - b.len() > limit {
        return None;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        let mut row_min = cur[0];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
            row_min = row_min.min(cur[j + 1]);
        }
        if row_min > limit {
            return None;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let d = prev[b.len()];
    (d <= limit).then_some(d)
}

fn similarity_from(distance: usize, max_len: usize) -> f64 {
    if max_len == 0 {
        1.0
    } else {
        1.0 - distance as f64 / max_len as f64
    }
}

/// `1 - editdistance(a, b) / max(|a|, |b|)` on already-normalized titles.
pub fn title_similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    similarity_from(edit_distance(a, b), max_len)
}

/// Largest edit distance that still clears `threshold` for strings whose
/// longer side has `max_len` chars, or `None` if even equality does not.
fn max_distance(max_len: usize, threshold: f64) -> Option<usize> {
    if similarity_from(0, max_len) <= threshold {
        return None;
    }
    let mut d = 0;
    while d < max_len && similarity_from(d + 1, max_len) > threshold {
        d += 1;
    }
    Some(d)
}

/// Maps every product to the canonical (smallest) id of its cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductClusterMap {
    mapping: BTreeMap<ProductId, ProductId>,
    threshold: f64,
}

impl ProductClusterMap {
    /// Builds a map from explicit `(product, canonical)` pairs, checking
    /// idempotence.
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (ProductId, ProductId)>,
        threshold: f64,
    ) -> Result<Self, DedupError> {
        let mapping: BTreeMap<ProductId, ProductId> = pairs.into_iter().collect();
        for canon in mapping.values() {
            if let Some(c) = mapping.get(canon) {
                if c != canon {
                    return Err(DedupError::NotIdempotent(canon.clone()));
                }
            }
        }
        Ok(Self { mapping, threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Canonical id; products missing from the map are their own canonical.
    pub fn canonical<'a>(&'a self, product: &'a ProductId) -> &'a ProductId {
        self.mapping.get(product).unwrap_or(product)
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ProductId, &ProductId)> {
        self.mapping.iter()
    }

    pub fn cluster_count(&self) -> usize {
        self.mapping.iter().filter(|(p, c)| p == c).count()
    }

    pub fn remap_swipe(&self, ev: &SwipeEvent) -> SwipeEvent {
        SwipeEvent {
            product_id: self.canonical(&ev.product_id).clone(),
            ..ev.clone()
        }
    }

    /// Writes a `product_id,canonical_id` CSV preceded by a threshold comment.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), DedupError> {
        writeln!(out, "# threshold={}", self.threshold).map_err(|e| DedupError::Csv(e.into()))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["product_id", "canonical_id"])?;
        for (p, c) in &self.mapping {
            w.write_record([p.as_str(), c.as_str()])?;
        }
        w.flush().map_err(|e| DedupError::Csv(e.into()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(mut input: R) -> Result<Self, DedupError> {
        let mut text = String::new();
        input
            .read_to_string(&mut text)
            .map_err(|e| DedupError::Csv(e.into()))?;
        let mut threshold = DEFAULT_THRESHOLD;
        if let Some(rest) = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# threshold="))
        {
            threshold = rest
                .trim()
                .parse()
                .map_err(|_| DedupError::Format(format!("bad threshold {rest:?}")))?;
        }
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut pairs = Vec::new();
        for row in r.records() {
            let row = row?;
            if row.len() != 2 {
                return Err(DedupError::Format(format!(
                    "expected 2 columns, got {}",
                    row.len()
                )));
            }
            pairs.push((ProductId::from(&row[0]), ProductId::from(&row[1])));
        }
        Self::from_pairs(pairs, threshold)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Single-link clustering of products whose titles are more than
/// `threshold` similar.
///
/// Candidate pairs are pruned without losing any qualifying pair:
/// titles are visited in length order and a pair is only scored when the
/// length gap alone does not rule it out, and when at least one of the
/// `k + 1` segments of the longer title occurs in the shorter one (any
/// `k` edits leave some segment untouched). Survivors are scored with a
/// distance-bounded dynamic program.
pub fn cluster_products(
    products: &[ProductRecord],
    threshold: f64,
) -> Result<ProductClusterMap, DedupError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(DedupError::InvalidThreshold(threshold));
    }
    let mut seen = HashMap::with_capacity(products.len());
    let mut titles: Vec<Vec<char>> = Vec::with_capacity(products.len());
    for (i, p) in products.iter().enumerate() {
        if seen.insert(&p.product_id, i).is_some() {
            return Err(DedupError::DuplicateProduct(p.product_id.clone()));
        }
        let t = normalize_title(&p.title).map_err(|_| DedupError::UnusableTitle {
            product_id: p.product_id.clone(),
        })?;
        titles.push(t.chars().collect());
    }

    let mut by_len: Vec<usize> = (0..products.len()).collect();
    by_len.sort_by_key(|&i| titles[i].len());
    let strings: Vec<String> = titles.iter().map(|t| t.iter().collect()).collect();

    let edges: Vec<(usize, usize)> = (0..by_len.len())
        .into_par_iter()
        .flat_map_iter(|pos| {
            let long = by_len[pos];
            let long_t = &titles[long];
            let mut found = Vec::new();
            let Some(k) = max_distance(long_t.len(), threshold) else {
                return found.into_iter();
            };
            let segments = segment_strings(long_t, k + 1);
            for &short in by_len[..pos].iter().rev() {
                let short_t = &titles[short];
                if long_t.len() - short_t.len() > k {
                    break;
                }
                if !segments.iter().any(|s| strings[short].contains(s.as_str())) {
                    continue;
                }
                if levenshtein(long_t, short_t, k).is_some() {
                    found.push((short, long));
                }
            }
            found.into_iter()
        })
        .collect();

    let mut uf = UnionFind::new(products.len());
    for (a, b) in edges {
        uf.union(a, b);
    }
    let mut canon: HashMap<usize, &ProductId> = HashMap::new();
    for (i, p) in products.iter().enumerate() {
        let root = uf.find(i);
        let id = &p.product_id;
        canon
            .entry(root)
            .and_modify(|c| {
                if id < *c {
                    *c = id;
                }
            })
            .or_insert(id);
    }
    let mapping = (0..products.len())
        .map(|i| {
            let root = uf.find(i);
            (products[i].product_id.clone(), canon[&root].clone())
        })
        .collect();
    Ok(ProductClusterMap { mapping, threshold })
}

/// Splits `chars` into `parts` contiguous, nearly equal segments. Empty
/// segments are dropped unless every segment would be empty.
fn segment_strings(chars: &[char], parts: usize) -> Vec<String> {
    let n = chars.len();
    let mut out = Vec::with_capacity(parts);
    for i in 0..parts {
        let lo = i * n / parts;
        let hi = (i + 1) * n / parts;
        if lo == hi {
            // An empty segment matches anything: no pruning possible.
            return vec![String::new()];
        }
        out.push(chars[lo..hi].iter().collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, title: &str) -> ProductRecord {
        ProductRecord {
            product_id: id.into(),
            title: title.into(),
            referral_url: None,
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_title("  Eames  Chair ").unwrap(), "eames chair");
        assert_eq!(normalize_title("VASE").unwrap(), "vase");
        assert_eq!(normalize_title("eames chair").unwrap(), "eames chair");
        assert!(matches!(
            normalize_title(" \t "),
            Err(DedupError::EmptyTitle)
        ));
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(title_similarity("vase", "vase"), 1.0);
        let s = title_similarity("eames chair", "eames chair white");
        assert!((s - (1.0 - 6.0 / 17.0)).abs() < 1e-12);
        assert!((s - 0.647).abs() < 1e-3);
        assert_eq!(title_similarity("", ""), 1.0);
        assert_eq!(title_similarity("abc", ""), 0.0);
    }

    #[test]
    fn bounded_levenshtein_agrees_when_within_limit() {
        let a: Vec<char> = "kitten".chars().collect();
        let b: Vec<char> = "sitting".chars().collect();
        assert_eq!(levenshtein(&a, &b, 3), Some(3));
        assert_eq!(levenshtein(&a, &b, 2), None);
    }

    #[test]
    fn max_distance_is_tight() {
        for len in 0..60 {
            for t in [0.5, 0.85, 0.9, 1.0] {
                match max_distance(len, t) {
                    Some(k) => {
                        assert!(similarity_from(k, len) > t);
                        assert!(k == len || similarity_from(k + 1, len) <= t);
                    }
                    None => assert!(similarity_from(0, len) <= t),
                }
            }
        }
    }

    #[test]
    fn identical_titles_collapse_to_smallest_id() {
        let ps = [rec("c", "Lamp"), rec("a", "lamp"), rec("b", " LAMP ")];
        let map = cluster_products(&ps, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(map.cluster_count(), 1);
        for p in ["a", "b", "c"] {
            assert_eq!(map.canonical(&p.into()).as_str(), "a");
        }
    }

    #[test]
    fn dissimilar_titles_stay_apart() {
        let ps = [
            rec("a", "oak table"),
            rec("b", "wool rug"),
            rec("c", "brass lamp"),
        ];
        let map = cluster_products(&ps, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(map.cluster_count(), 3);
    }

    #[test]
    fn single_link_chains() {
        // 10-char titles, one substitution apart per hop.
        let a = "aaaaaaaaaa";
        let b = "aaaaaaaaab";
        let c = "aaaaaaaabb";
        assert!((title_similarity(a, b) - 0.9).abs() < 1e-12);
        assert!((title_similarity(b, c) - 0.9).abs() < 1e-12);
        assert!((title_similarity(a, c) - 0.8).abs() < 1e-12);
        let map = cluster_products(&[rec("A", a), rec("B", b), rec("C", c)], 0.85).unwrap();
        assert_eq!(map.cluster_count(), 1);
        assert_eq!(map.canonical(&"C".into()).as_str(), "A");
    }

    #[test]
    fn threshold_is_strict() {
        // 20 chars, 3 edits: exactly 0.85.
        let a = "abcdefghijklmnopqrst";
        let b = "abcdefghijklmnopqxyz";
        assert!((title_similarity(a, b) - 0.85).abs() < 1e-12);
        let map = cluster_products(&[rec("a", a), rec("b", b)], 0.85).unwrap();
        assert_eq!(map.cluster_count(), 2);
    }

    #[test]
    fn differing_first_letters_still_cluster() {
        let map = cluster_products(
            &[
                rec("a", "xeames lounge chair"),
                rec("b", "eames lounge chair"),
            ],
            0.85,
        )
        .unwrap();
        assert_eq!(map.cluster_count(), 1);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            cluster_products(&[rec("a", "x")], 0.0),
            Err(DedupError::InvalidThreshold(_))
        ));
        assert!(matches!(
            cluster_products(&[rec("a", "x"), rec("a", "y")], 0.85),
            Err(DedupError::DuplicateProduct(_))
        ));
        assert!(matches!(
            cluster_products(&[rec("a", "  ")], 0.85),
            Err(DedupError::UnusableTitle { .. })
        ));
    }

    #[test]
    fn reclustering_canonical_catalogue_is_identity() {
        let ps = [
            rec("a", "eames chair black"),
            rec("b", "eames chair blacks"),
            rec("c", "arco floor lamp"),
        ];
        let map = cluster_products(&ps, 0.85).unwrap();
        let canon: Vec<ProductRecord> = ps
            .iter()
            .filter(|p| map.canonical(&p.product_id) == &p.product_id)
            .cloned()
            .collect();
        let again = cluster_products(&canon, 0.85).unwrap();
        assert!(again.iter().all(|(p, c)| p == c));
    }

    #[test]
    fn csv_roundtrip() {
        let ps = [rec("a", "lamp"), rec("b", "lamp"), rec("c", "rug")];
        let map = cluster_products(&ps, 0.9).unwrap();
        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# threshold=0.9\nproduct_id,canonical_id\n"));
        let back = ProductClusterMap::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn non_idempotent_pairs_rejected() {
        let pairs = [("a", "b"), ("b", "c")].map(|(x, y)| (ProductId::from(x), ProductId::from(y)));
        assert!(matches!(
            ProductClusterMap::from_pairs(pairs, 0.85),
            Err(DedupError::NotIdempotent(_))
        ));
    }
}
