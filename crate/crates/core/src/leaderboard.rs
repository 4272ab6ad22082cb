//! Per-model leaderboards and their rank agreement with human judgments.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{CaptionSample, Dimension, LengthClass};
use crate::rank::{srcc, PairedScores};
use crate::report::{align, ReportError};

/// A (caption, dimension, value) triple on the [0, 100] scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<'a> {
    pub caption_id: &'a str,
    pub dimension: Dimension,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub model_id: String,
    pub dims: BTreeMap<Dimension, f64>,
    pub overall: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub dimensions: Vec<Dimension>,
    /// Sorted by rank.
    pub rows: Vec<LeaderboardRow>,
}

impl Leaderboard {
    /// Mean per model and dimension, overall as the mean of a row's dimension
    /// means, ranked by overall (descending; ties broken by model id).
    pub fn build<'a>(
        obs: impl IntoIterator<Item = Observation<'a>>,
        captions: &[CaptionSample],
        subset: Option<LengthClass>,
    ) -> Result<Self, ReportError> {
        let by_id: HashMap<&str, &CaptionSample> = captions.iter().map(|c| (c.caption_id.as_str(), c)).collect();
        let mut acc: BTreeMap<&str, BTreeMap<Dimension, (f64, usize)>> = BTreeMap::new();
        let mut dims = BTreeSet::new();
        for o in obs {
            let c = by_id
                .get(o.caption_id)
                .ok_or_else(|| ReportError::UnknownCaption(o.caption_id.to_string()))?;
            if subset.is_some_and(|s| s != c.length_class) {
                continue;
            }
            let e = acc.entry(c.model_id.as_str()).or_default().entry(o.dimension).or_default();
            e.0 += o.value;
            e.1 += 1;
            dims.insert(o.dimension);
        }
        if acc.len() < 2 {
            return Err(ReportError::TooFewModels(acc.len()));
        }
        let mut rows: Vec<LeaderboardRow> = acc
            .into_iter()
            .map(|(model, per_dim)| {
                let dims: BTreeMap<Dimension, f64> = per_dim.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect();
                let overall = dims.values().sum::<f64>() / dims.len() as f64;
                LeaderboardRow {
                    model_id: model.to_string(),
                    dims,
                    overall,
                    rank: 0,
                }
            })
            .collect();
        rows.sort_by(|a, b| b.overall.total_cmp(&a.overall).then_with(|| a.model_id.cmp(&b.model_id)));
        for (i, r) in rows.iter_mut().enumerate() {
            r.rank = i + 1;
        }
        Ok(Self {
            dimensions: dims.into_iter().collect(),
            rows,
        })
    }

    pub fn row(&self, model: &str) -> Option<&LeaderboardRow> {
        self.rows.iter().find(|r| r.model_id == model)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model_id");
        for d in &self.dimensions {
            let _ = write!(s, ",{d}");
        }
        s.push_str(",overall,rank\n");
        for r in &self.rows {
            s.push_str(&r.model_id);
            for d in &self.dimensions {
                let _ = write!(s, ",{}", r.dims.get(d).map(|v| format!("{v:.2}")).unwrap_or_default());
            }
            let _ = writeln!(s, ",{:.2},{}", r.overall, r.rank);
        }
        s
    }
}

/// SRCC between a metric leaderboard and the human one, per dimension and
/// for the overall score, over the models both boards contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAgreement {
    pub per_dimension: BTreeMap<Dimension, Option<f64>>,
    pub overall: Option<f64>,
}

pub fn srcc_to_human(human: &Leaderboard, metric: &Leaderboard) -> RankAgreement {
    let common: Vec<(&LeaderboardRow, &LeaderboardRow)> = human
        .rows
        .iter()
        .filter_map(|h| metric.row(&h.model_id).map(|m| (h, m)))
        .collect();
    let rho = |pairs: Vec<(f64, f64)>| {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        PairedScores::from_xy(x, y).ok().and_then(|p| srcc(&p).ok())
    };
    let per_dimension = human
        .dimensions
        .iter()
        .map(|d| {
            let pairs = common
                .iter()
                .filter_map(|(h, m)| Some((*m.dims.get(d)?, *h.dims.get(d)?)))
                .collect();
            (*d, rho(pairs))
        })
        .collect();
    RankAgreement {
        per_dimension,
        overall: rho(common.iter().map(|(h, m)| (m.overall, h.overall)).collect()),
    }
}

/// Human and metric boards side by side, plus the SRCC row.
pub fn comparison_text(human: &Leaderboard, metric: &Leaderboard, agreement: &RankAgreement) -> String {
    let mut rows: Vec<[String; 7]> = vec![[
        "model".into(),
        "dimension".into(),
        "human".into(),
        "metric".into(),
        "human rank".into(),
        "metric rank".into(),
        "".into(),
    ]];
    for h in &human.rows {
        let m = metric.row(&h.model_id);
        for d in &human.dimensions {
            rows.push([
                h.model_id.clone(),
                d.to_string(),
                h.dims.get(d).map(|v| format!("{v:.2}")).unwrap_or_default(),
                m.and_then(|m| m.dims.get(d)).map(|v| format!("{v:.2}")).unwrap_or_default(),
                String::new(),
                String::new(),
                String::new(),
            ]);
        }
        rows.push([
            h.model_id.clone(),
            "overall".into(),
            format!("{:.2}", h.overall),
            m.map(|m| format!("{:.2}", m.overall)).unwrap_or_default(),
            h.rank.to_string(),
            m.map(|m| m.rank.to_string()).unwrap_or_default(),
            String::new(),
        ]);
    }
    let f = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
    let mut out = align(&rows);
    out.push_str("\nSRCC to human\n");
    for (d, v) in &agreement.per_dimension {
        let _ = writeln!(out, "  {:<14}{:>7}", d.to_string(), f(*v));
    }
    let _ = writeln!(out, "  {:<14}{:>7}", "overall rank", f(agreement.overall));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cap(id: &str, model: &str) -> CaptionSample {
        CaptionSample {
            caption_id: id.into(),
            image_ref: format!("{id}.png"),
            model_id: model.into(),
            category: "food".into(),
            length_class: LengthClass::Short,
            text: "t".into(),
        }
    }

    #[test]
    fn dominating_model_ranks_first() {
        let caps = vec![cap("a1", "A"), cap("a2", "A"), cap("b1", "B"), cap("b2", "B")];
        let vals = [("a1", 60.0), ("a2", 70.0), ("b1", 50.0), ("b2", 55.0)];
        let obs = vals.iter().map(|(id, v)| Observation {
            caption_id: id,
            dimension: Dimension::Fluency,
            value: *v,
        });
        let lb = Leaderboard::build(obs, &caps, None).unwrap();
        assert_eq!(lb.rows[0].model_id, "A");
        assert_eq!(lb.rows[0].rank, 1);
        assert_eq!(lb.rows[0].overall, 65.0);
        assert!(lb.to_csv().starts_with("model_id,fluency,overall,rank\nA,65.00,65.00,1\n"));
    }

    #[test]
    fn single_model_is_rejected() {
        let caps = vec![cap("a1", "A")];
        let obs = [Observation {
            caption_id: "a1",
            dimension: Dimension::Fluency,
            value: 1.0,
        }];
        assert!(matches!(Leaderboard::build(obs, &caps, None), Err(ReportError::TooFewModels(1))));
    }

    #[test]
    fn identical_boards_agree_fully() {
        let caps: Vec<_> = (0..4).map(|i| cap(&format!("c{i}"), &format!("M{i}"))).collect();
        let obs: Vec<_> = (0..4)
            .flat_map(|i| {
                let id: &str = &caps[i].caption_id;
                [Dimension::Fluency, Dimension::Relevance].map(move |d| Observation {
                    caption_id: id,
                    dimension: d,
                    value: (i * 10) as f64 + d.index() as f64,
                })
            })
            .collect();
        let lb = Leaderboard::build(obs, &caps, None).unwrap();
        let agree = srcc_to_human(&lb, &lb);
        assert_eq!(agree.overall, Some(1.0));
        assert!(agree.per_dimension.values().all(|v| *v == Some(1.0)));
        assert!(comparison_text(&lb, &lb, &agree).contains("overall rank    1.000"));
    }
}
