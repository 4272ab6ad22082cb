//! Metric-vs-human correlation tables and plot-data exports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{CaptionSample, Dimension, LengthClass};
use crate::jsonl::{self, JsonlError};
use crate::rank::{correlate, CorrelationReport, PairedScores};
use crate::subjective::MosEntry;

/// One externally computed (or predicted) score. Accepts our own
/// `scores.jsonl` rows too, reading `mu` as the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub caption_id: String,
    pub dimension: Dimension,
    #[serde(alias = "mu", alias = "mos")]
    pub score: f64,
}

/// Predicted distribution for one caption and dimension, on the [0, 100] scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub caption_id: String,
    pub dimension: Dimension,
    pub mu: f64,
    pub sigma: f64,
    pub mu_agg: f64,
    pub sigma_agg: f64,
}

impl From<&ScoreRecord> for MetricScore {
    fn from(r: &ScoreRecord) -> Self {
        Self {
            caption_id: r.caption_id.clone(),
            dimension: r.dimension,
            score: r.mu,
        }
    }
}

impl From<&MosEntry> for MetricScore {
    fn from(m: &MosEntry) -> Self {
        Self {
            caption_id: m.caption_id.clone(),
            dimension: m.dimension,
            score: m.mos,
        }
    }
}

pub fn load_scores(path: &Path) -> Result<Vec<MetricScore>, JsonlError> {
    jsonl::read(path)
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("scores and MOS share no (caption_id, dimension) pairs")]
    EmptyJoin,
    #[error("leaderboard needs at least 2 models, found {0}")]
    TooFewModels(usize),
    #[error("caption {0:?} is not in the captions file")]
    UnknownCaption(String),
    #[error("leaderboard needs MOS entries or metric scores")]
    MissingInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub subset: Option<LengthClass>,
    pub dimension: Dimension,
    pub n: usize,
    pub correlation: Option<CorrelationReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCoefficients {
    pub tau_b: f64,
    pub tau_c: f64,
    pub srcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub rows: Vec<ReportRow>,
    /// Coefficients over the union of all joined pairs.
    pub overall_pooled: Option<CorrelationReport>,
    /// Mean of the per-row coefficients that are defined.
    pub overall_mean: Option<MeanCoefficients>,
}

/// Join metric scores with MOS and correlate per dimension. With captions,
/// rows are further split into short and long subsets.
pub fn correlation_table(
    scores: &[MetricScore],
    mos: &[MosEntry],
    captions: Option<&[CaptionSample]>,
) -> Result<CorrelationTable, ReportError> {
    let human: HashMap<(&str, Dimension), f64> = mos
        .iter()
        .map(|m| ((m.caption_id.as_str(), m.dimension), m.mos))
        .collect();
    let lengths: Option<HashMap<&str, LengthClass>> =
        captions.map(|cs| cs.iter().map(|c| (c.caption_id.as_str(), c.length_class)).collect());

    type Columns = (Vec<String>, Vec<f64>, Vec<f64>);
    let mut groups: BTreeMap<(Option<LengthClass>, Dimension), Columns> = BTreeMap::new();
    let mut pooled = (Vec::new(), Vec::new(), Vec::new());
    for s in scores {
        let Some(&h) = human.get(&(s.caption_id.as_str(), s.dimension)) else {
            continue;
        };
        let subset = match &lengths {
            Some(map) => Some(
                *map.get(s.caption_id.as_str())
                    .ok_or_else(|| ReportError::UnknownCaption(s.caption_id.clone()))?,
            ),
            None => None,
        };
        let g = groups.entry((subset, s.dimension)).or_default();
        g.0.push(s.caption_id.clone());
        g.1.push(s.score);
        g.2.push(h);
        pooled.0.push(s.caption_id.clone());
        pooled.1.push(s.score);
        pooled.2.push(h);
    }
    if pooled.0.is_empty() {
        return Err(ReportError::EmptyJoin);
    }

    let corr = |ids, x, y| PairedScores::new(ids, x, y).and_then(|p| correlate(&p)).ok();
    let rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|((subset, dimension), (ids, x, y))| ReportRow {
            subset,
            dimension,
            n: ids.len(),
            correlation: corr(ids, x, y),
        })
        .collect();
    let defined: Vec<&CorrelationReport> = rows.iter().filter_map(|r| r.correlation.as_ref()).collect();
    let overall_mean = (!defined.is_empty()).then(|| {
        let k = defined.len() as f64;
        MeanCoefficients {
            tau_b: defined.iter().map(|c| c.tau_b).sum::<f64>() / k,
            tau_c: defined.iter().map(|c| c.tau_c).sum::<f64>() / k,
            srcc: defined.iter().map(|c| c.srcc).sum::<f64>() / k,
        }
    });
    Ok(CorrelationTable {
        rows,
        overall_pooled: corr(pooled.0, pooled.1, pooled.2),
        overall_mean,
    })
}

/// Coefficient scaled by 100 with two decimals, or `n/a`.
pub fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", 100.0 * v),
        None => "n/a".into(),
    }
}

fn row_label(subset: Option<LengthClass>, dim: Dimension) -> String {
    match subset {
        Some(s) => format!("{s}/{dim}"),
        None => dim.to_string(),
    }
}

impl CorrelationTable {
    fn lines(&self) -> Vec<[String; 5]> {
        let mut out: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                let c = r.correlation.as_ref();
                [
                    row_label(r.subset, r.dimension),
                    r.n.to_string(),
                    pct(c.map(|c| c.tau_b)),
                    pct(c.map(|c| c.tau_c)),
                    pct(c.map(|c| c.srcc)),
                ]
            })
            .collect();
        let p = self.overall_pooled.as_ref();
        out.push([
            "overall (pooled)".into(),
            p.map(|c| c.n.to_string()).unwrap_or_default(),
            pct(p.map(|c| c.tau_b)),
            pct(p.map(|c| c.tau_c)),
            pct(p.map(|c| c.srcc)),
        ]);
        let m = self.overall_mean.as_ref();
        out.push([
            "overall (mean of rows)".into(),
            String::new(),
            pct(m.map(|c| c.tau_b)),
            pct(m.map(|c| c.tau_c)),
            pct(m.map(|c| c.srcc)),
        ]);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dimension,n,tau_b,tau_c,srcc\n");
        for l in self.lines() {
            let _ = writeln!(s, "{}", l.join(","));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let header = ["dimension", "n", "tau_b", "tau_c", "srcc"].map(String::from);
        align(&std::iter::once(header).chain(self.lines()).collect::<Vec<_>>())
    }
}

/// Left-align the first column, right-align the rest.
pub(crate) fn align<const N: usize>(rows: &[[String; N]]) -> String {
    let mut widths = [0usize; N];
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut s = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
    }
    s
}

/// MOS histogram per (length class, dimension) with `bins` equal-width bins on [0, 100].
pub fn mos_histogram_csv(mos: &[MosEntry], captions: &[CaptionSample], bins: usize) -> Result<String, ReportError> {
    let lengths: HashMap<&str, LengthClass> = captions.iter().map(|c| (c.caption_id.as_str(), c.length_class)).collect();
    let mut counts: BTreeMap<(LengthClass, Dimension), Vec<usize>> = BTreeMap::new();
    for m in mos {
        let lc = *lengths
            .get(m.caption_id.as_str())
            .ok_or_else(|| ReportError::UnknownCaption(m.caption_id.clone()))?;
        let hist = counts.entry((lc, m.dimension)).or_insert_with(|| vec![0; bins]);
        let b = ((m.mos / 100.0 * bins as f64) as usize).min(bins - 1);
        hist[b] += 1;
    }
    let width = 100.0 / bins as f64;
    let mut s = String::from("length_class,dimension,bin_lo,bin_hi,count\n");
    for ((lc, dim), hist) in counts {
        for (i, c) in hist.iter().enumerate() {
            let _ = writeln!(s, "{lc},{dim},{:.2},{:.2},{c}", i as f64 * width, (i + 1) as f64 * width);
        }
    }
    Ok(s)
}

/// Mean MOS per (length class, dimension, category, model).
pub fn category_comparison_csv(mos: &[MosEntry], captions: &[CaptionSample]) -> Result<String, ReportError> {
    let by_id: HashMap<&str, &CaptionSample> = captions.iter().map(|c| (c.caption_id.as_str(), c)).collect();
    let mut acc: BTreeMap<(LengthClass, Dimension, &str, &str), (f64, usize)> = BTreeMap::new();
    for m in mos {
        let c = by_id
            .get(m.caption_id.as_str())
            .ok_or_else(|| ReportError::UnknownCaption(m.caption_id.clone()))?;
        let e = acc
            .entry((c.length_class, m.dimension, c.category.as_str(), c.model_id.as_str()))
            .or_default();
        e.0 += m.mos;
        e.1 += 1;
    }
    let mut s = String::from("length_class,dimension,category,model_id,mean_mos,n\n");
    for ((lc, dim, cat, model), (sum, n)) in acc {
        let _ = writeln!(s, "{lc},{dim},{cat},{model},{:.2},{n}", sum / n as f64);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mos(id: &str, dim: Dimension, v: f64) -> MosEntry {
        MosEntry {
            caption_id: id.into(),
            dimension: dim,
            mos: v,
            z_mean: 0.0,
            n_valid: 1,
        }
    }

    #[test]
    fn identity_scores_are_100() {
        let m: Vec<_> = (0..10).map(|i| mos(&format!("c{i}"), Dimension::Fluency, i as f64 * 7.0)).collect();
        let s: Vec<_> = m
            .iter()
            .map(|e| MetricScore {
                caption_id: e.caption_id.clone(),
                dimension: e.dimension,
                score: e.mos,
            })
            .collect();
        let t = correlation_table(&s, &m, None).unwrap();
        assert_eq!(pct(t.rows[0].correlation.map(|c| c.tau_b)), "100.00");
        assert!(t.to_csv().contains("fluency,10,100.00,100.00,100.00"));
        assert!(t.to_text().starts_with("dimension"));
    }

    #[test]
    fn empty_join_is_error() {
        let m = vec![mos("a", Dimension::Fluency, 1.0)];
        let s = vec![MetricScore {
            caption_id: "b".into(),
            dimension: Dimension::Fluency,
            score: 1.0,
        }];
        assert!(matches!(correlation_table(&s, &m, None), Err(ReportError::EmptyJoin)));
    }

    #[test]
    fn score_rows_accept_mu() {
        let row: MetricScore =
            serde_json::from_str(r#"{"caption_id":"a","dimension":"fluency","mu":61.5,"sigma":3.0,"mu_agg":60.0,"sigma_agg":2.0}"#).unwrap();
        assert_eq!(row.score, 61.5);
    }

    #[test]
    fn histogram_bins_cover_range() {
        let caps = vec![CaptionSample {
            caption_id: "a".into(),
            image_ref: "x".into(),
            model_id: "m".into(),
            category: "food".into(),
            length_class: LengthClass::Short,
            text: "t".into(),
        }];
        let csv = mos_histogram_csv(&[mos("a", Dimension::Fluency, 100.0)], &caps, 4).unwrap();
        assert!(csv.contains("short,fluency,75.00,100.00,1"));
        let cat = category_comparison_csv(&[mos("a", Dimension::Fluency, 40.0)], &caps).unwrap();
        assert!(cat.contains("short,fluency,food,m,40.00,1"));
    }
}
