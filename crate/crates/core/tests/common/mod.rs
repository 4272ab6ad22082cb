//! Reference implementations written straight from the definitions, sharing
//! no code with the library. Quadratic or otherwise slow on purpose.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use icbench_core::dataset::Dimension;
use icbench_core::subjective::RatingRecord;

/// (concordant, discordant, tied in x only, tied in y only, tied in both) over all pairs.
pub fn brute_counts(x: &[f64], y: &[f64]) -> (u64, u64, u64, u64, u64) {
    let (mut p, mut q, mut tx, mut ty, mut txy) = (0, 0, 0, 0, 0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                txy += 1;
            } else if dx == 0.0 {
                tx += 1;
            } else if dy == 0.0 {
                ty += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                p += 1;
            } else {
                q += 1;
            }
        }
    }
    (p, q, tx, ty, txy)
}

pub fn tau_b_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let (p, q, tx, ty, _) = brute_counts(x, y);
    let (p, q) = (p as f64, q as f64);
    let dx = p + q + tx as f64;
    let dy = p + q + ty as f64;
    if dx == 0.0 || dy == 0.0 {
        return None;
    }
    Some((p - q) / (dx * dy).sqrt())
}

fn n_distinct(v: &[f64]) -> usize {
    let mut seen: Vec<f64> = Vec::new();
    for &a in v {
        if !seen.contains(&a) {
            seen.push(a);
        }
    }
    seen.len()
}

pub fn tau_c_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let m = n_distinct(x).min(n_distinct(y));
    if m < 2 {
        return None;
    }
    let (p, q, ..) = brute_counts(x, y);
    let (p, q) = (p as f64, q as f64);
    let (n, m) = (x.len() as f64, m as f64);
    Some(2.0 * m * (p - q) / (n * n * (m - 1.0)))
}

/// Fractional rank: 1 + (number below) + (number equal - 1) / 2.
pub fn frac_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let below = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn pearson_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

pub fn srcc_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson_oracle(&frac_ranks(x), &frac_ranks(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMos {
    pub mos: f64,
    pub z_mean: f64,
    pub n_valid: usize,
}

fn moments(v: &[f64]) -> (f64, f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    (m, m2, m4)
}

/// Outlier flags, then subject screening, then z-scores and the mapped mean,
/// following the rule set literally with its own bookkeeping.
pub fn mos_oracle(ratings: &[RatingRecord]) -> (BTreeMap<(String, Dimension), OracleMos>, BTreeSet<String>) {
    // 1. outliers per (caption, dimension)
    let mut groups: HashMap<(String, Dimension), Vec<usize>> = HashMap::new();
    for (i, r) in ratings.iter().enumerate() {
        groups.entry((r.caption_id.clone(), r.dimension)).or_default().push(i);
    }
    let mut outlier = vec![false; ratings.len()];
    for idx in groups.values() {
        if idx.len() < 2 {
            continue;
        }
        let v: Vec<f64> = idx.iter().map(|&i| ratings[i].score).collect();
        let (m, m2, m4) = moments(&v);
        let k = if m2 > 0.0 && (2.0..=4.0).contains(&(m4 / (m2 * m2))) {
            2.0
        } else {
            20f64.sqrt()
        };
        for &i in idx {
            if (ratings[i].score - m).abs() > k * m2.sqrt() {
                outlier[i] = true;
            }
        }
    }

    // 2. screening per (subject, dimension)
    let mut subj: HashMap<(String, Dimension), Vec<usize>> = HashMap::new();
    for (i, r) in ratings.iter().enumerate() {
        subj.entry((r.subject_id.clone(), r.dimension)).or_default().push(i);
    }
    let mut params: HashMap<(String, Dimension), (f64, f64)> = HashMap::new();
    for (key, idx) in &subj {
        let n_out = idx.iter().filter(|&&i| outlier[i]).count();
        let kept: Vec<f64> = idx.iter().filter(|&&i| !outlier[i]).map(|&i| ratings[i].score).collect();
        if kept.is_empty() {
            continue;
        }
        let (m, m2, _) = moments(&kept);
        let sd = m2.sqrt();
        let frac = n_out as f64 / idx.len() as f64;
        if frac > 0.05 || sd < 1e-6 {
            continue;
        }
        params.insert(key.clone(), (m, sd));
    }

    // 3. z-scores and MOS
    let mut zs: BTreeMap<(String, Dimension), Vec<f64>> = BTreeMap::new();
    let mut removed = BTreeSet::new();
    for (i, r) in ratings.iter().enumerate() {
        let key = (r.subject_id.clone(), r.dimension);
        match params.get(&key) {
            Some(&(m, sd)) if !outlier[i] => zs
                .entry((r.caption_id.clone(), r.dimension))
                .or_default()
                .push((r.score - m) / sd),
            _ => {
                removed.insert(r.rating_id.clone());
            }
        }
    }
    let out = zs
        .into_iter()
        .map(|(k, v)| {
            let z = v.iter().sum::<f64>() / v.len() as f64;
            let mos = (100.0 * (z + 3.0) / 6.0).clamp(0.0, 100.0);
            (
                k,
                OracleMos {
                    mos,
                    z_mean: z,
                    n_valid: v.len(),
                },
            )
        })
        .collect();
    (out, removed)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise relative error, with magnitudes below `floor`
/// compared absolutely.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Random ratings with a few planted deviants, continuous scores in [1, 5].
pub fn random_ratings(seed: u64, max_ratings: usize) -> Vec<RatingRecord> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_subjects = rng.random_range(3..12);
    let n_captions = rng.random_range(2..20);
    let dims = [Dimension::Fluency, Dimension::Relevance];
    let quality: Vec<f64> = (0..n_captions).map(|_| rng.random_range(1.5..4.5)).collect();
    let bias: Vec<f64> = (0..n_subjects).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut out = Vec::new();
    'outer: for c in 0..n_captions {
        for s in 0..n_subjects {
            for d in dims {
                if out.len() >= max_ratings {
                    break 'outer;
                }
                if rng.random_bool(0.2) {
                    continue;
                }
                let mut score = quality[c] + bias[s] + rng.random_range(-0.4..0.4);
                if rng.random_bool(0.05) {
                    score = rng.random_range(1.0..5.0);
                }
                out.push(RatingRecord {
                    rating_id: format!("r{}", out.len()),
                    subject_id: format!("u{s}"),
                    caption_id: format!("c{c}"),
                    dimension: d,
                    score: score.clamp(1.0, 5.0),
                    session_id: format!("sess{s}"),
                    timestamp: out.len() as i64,
                });
            }
        }
    }
    out
}

pub mod e2e;
