//! Kendall tau-b, Stuart's tau-c and Spearman rank correlation.
//!
//! Pair counts come from Knight's O(n log n) algorithm: sort by (x, y), count
//! tie runs, then count the swaps a stable merge sort on y needs. Every
//! coefficient is then a closed-form expression of integer counts.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RankError {
    #[error("length mismatch: {ids} ids, {x} x values, {y} y values")]
    LengthMismatch { ids: usize, x: usize, y: usize },
    #[error("need at least 2 paired observations, got {0}")]
    TooShort(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("correlation undefined: {0}")]
    Undefined(&'static str),
}

/// Metric scores `x` paired with human scores `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScores {
    ids: Vec<String>,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl PairedScores {
    pub fn new(ids: Vec<String>, x: Vec<f64>, y: Vec<f64>) -> Result<Self, RankError> {
        if ids.len() != x.len() || x.len() != y.len() {
            return Err(RankError::LengthMismatch {
                ids: ids.len(),
                x: x.len(),
                y: y.len(),
            });
        }
        if x.len() < 2 {
            return Err(RankError::TooShort(x.len()));
        }
        if let Some(i) = x.iter().zip(&y).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(RankError::NonFinite(i));
        }
        Ok(Self { ids, x, y })
    }

    /// Pairs with generated ids `0..n`.
    pub fn from_xy(x: Vec<f64>, y: Vec<f64>) -> Result<Self, RankError> {
        let ids = (0..x.len()).map(|i| i.to_string()).collect();
        Self::new(ids, x, y)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Pair classification over all n(n-1)/2 unordered pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    /// tied in x only
    pub ties_x: u64,
    /// tied in y only
    pub ties_y: u64,
    /// tied in both
    pub ties_xy: u64,
}

fn tie_pairs(run: u64) -> u64 {
    run * (run - 1) / 2
}

/// Sum of t(t-1)/2 over runs of equal values in a sorted slice, keyed by `eq`.
fn count_tie_runs<T>(sorted: &[T], eq: impl Fn(&T, &T) -> bool) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if eq(&w[0], &w[1]) {
            run += 1;
        } else {
            total += tie_pairs(run);
            run = 1;
        }
    }
    total + tie_pairs(run)
}

/// Stable merge sort on y that returns the number of inversions (strictly
/// greater elements moved past smaller ones).
fn merge_count(v: &mut [(f64, f64)], buf: &mut [(f64, f64)]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[i].1 <= v[j].1 {
            buf[k] = v[i];
            i += 1;
        } else {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

pub fn pair_counts(p: &PairedScores) -> PairCounts {
    let n = p.len() as u64;
    let mut v: Vec<(f64, f64)> = p.x.iter().copied().zip(p.y.iter().copied()).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let tied_x = count_tie_runs(&v, |a, b| a.0 == b.0);
    let tied_xy = count_tie_runs(&v, |a, b| a.0 == b.0 && a.1 == b.1);

    let mut buf = vec![(0.0, 0.0); v.len()];
    let discordant = merge_count(&mut v, &mut buf);
    let tied_y = count_tie_runs(&v, |a, b| a.1 == b.1);

    let total = n * (n - 1) / 2;
    let untied = total + tied_xy - tied_x - tied_y;
    PairCounts {
        concordant: untied - discordant,
        discordant,
        ties_x: tied_x - tied_xy,
        ties_y: tied_y - tied_xy,
        ties_xy: tied_xy,
    }
}

fn distinct(values: &[f64]) -> usize {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

pub fn tau_b_from_counts(c: &PairCounts) -> Result<f64, RankError> {
    let (p, q) = (c.concordant as f64, c.discordant as f64);
    let dx = p + q + c.ties_x as f64;
    let dy = p + q + c.ties_y as f64;
    if dx == 0.0 || dy == 0.0 {
        return Err(RankError::Undefined("all values tied in one variable"));
    }
    Ok((p - q) / (dx * dy).sqrt())
}

pub fn tau_c_from_counts(c: &PairCounts, n: usize, m: usize) -> Result<f64, RankError> {
    if m < 2 {
        return Err(RankError::Undefined("fewer than 2 distinct values"));
    }
    let (p, q) = (c.concordant as f64, c.discordant as f64);
    let (n, m) = (n as f64, m as f64);
    Ok(2.0 * m * (p - q) / (n * n * (m - 1.0)))
}

pub fn kendall_tau_b(p: &PairedScores) -> Result<f64, RankError> {
    tau_b_from_counts(&pair_counts(p))
}

/// Stuart's tau-c with m = min(distinct x, distinct y).
pub fn kendall_tau_c(p: &PairedScores) -> Result<f64, RankError> {
    let m = distinct(&p.x).min(distinct(&p.y));
    tau_c_from_counts(&pair_counts(p), p.len(), m)
}

/// Fractional ranks, 1-based; ties share the mean of the positions they span.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]].total_cmp(&values[order[start]]) == Ordering::Equal {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, RankError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(RankError::Undefined("zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn srcc(p: &PairedScores) -> Result<f64, RankError> {
    pearson(&mid_ranks(&p.x), &mid_ranks(&p.y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub tau_b: f64,
    pub tau_c: f64,
    pub srcc: f64,
    pub n: usize,
}

pub fn correlate(p: &PairedScores) -> Result<CorrelationReport, RankError> {
    let counts = pair_counts(p);
    let m = distinct(&p.x).min(distinct(&p.y));
    Ok(CorrelationReport {
        tau_b: tau_b_from_counts(&counts)?,
        tau_c: tau_c_from_counts(&counts, p.len(), m)?,
        srcc: srcc(p)?,
        n: p.len(),
    })
}
