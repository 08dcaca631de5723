//! Liveness metrics: confusion counts at a threshold, APCER/BPCER/ACER,
//! dev-set threshold selection and mean ± std across protocols.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::trackio::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub track_id: String,
    pub score: f64,
    pub label: u8,
}

/// Scored tracks of one split. Real tracks are the positive class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    entries: Vec<ScoredEntry>,
}

impl ScoredSet {
    pub fn new(entries: Vec<ScoredEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !(e.score.is_finite() && (0.0..=1.0).contains(&e.score)) {
                return Err(Error::InvalidArgument(format!(
                    "score {} of {} outside [0, 1]",
                    e.score, e.track_id
                )));
            }
            if Label::from_u8(e.label).is_none() {
                return Err(Error::InvalidArgument(format!("label {} of {}", e.label, e.track_id)));
            }
            if !seen.insert(e.track_id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate track id {}", e.track_id)));
            }
        }
        Ok(ScoredSet { entries })
    }

    pub fn from_parts(items: impl IntoIterator<Item = (String, f64, Label)>) -> Result<Self> {
        Self::new(
            items
                .into_iter()
                .map(|(track_id, score, label)| ScoredEntry {
                    track_id,
                    score,
                    label: label.as_u8(),
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[ScoredEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(reals, fakes)`.
    pub fn label_counts(&self) -> (usize, usize) {
        let real = self.entries.iter().filter(|e| e.label == 1).count();
        (real, self.entries.len() - real)
    }

    fn require_both(&self, what: &str) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Empty(format!("{what} scored set")));
        }
        let (r, f) = self.label_counts();
        if r == 0 || f == 0 {
            return Err(Error::SingleLabel(format!("{what} set")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Predicted real iff `score >= thr`.
pub fn confusion_at(s: &ScoredSet, thr: f64) -> Result<ConfusionCounts> {
    s.require_both("scored")?;
    let mut c = ConfusionCounts::default();
    for e in &s.entries {
        match (e.label == 1, e.score >= thr) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

pub fn rates(c: &ConfusionCounts) -> Result<Rates> {
    if c.tn + c.fp == 0 || c.tp + c.fn_ == 0 {
        return Err(Error::SingleLabel("confusion counts".into()));
    }
    let apcer = c.fp as f64 / (c.tn + c.fp) as f64;
    let bpcer = c.fn_ as f64 / (c.tp + c.fn_) as f64;
    Ok(Rates {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Lowest dev ACER; ties by smaller |APCER - BPCER|, then lower threshold.
    #[default]
    MinAcer,
    /// Smallest |APCER - BPCER|; ties by lower ACER, then lower threshold.
    Eer,
}

/// Candidate thresholds: `-inf`, midpoints of adjacent distinct scores, `+inf`.
pub fn candidate_thresholds(s: &ScoredSet) -> Vec<f64> {
    let mut scores: Vec<f64> = s.entries.iter().map(|e| e.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut out = Vec::with_capacity(scores.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(scores.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(f64::INFINITY);
    out
}

/// Integer keys proportional to `2 * ACER` and `|APCER - BPCER|`, so that
/// ties are detected exactly.
fn keys(c: &ConfusionCounts) -> (u128, u128) {
    let pos = (c.tp + c.fn_) as u128;
    let neg = (c.tn + c.fp) as u128;
    let a = c.fp as u128 * pos;
    let b = c.fn_ as u128 * neg;
    (a + b, a.abs_diff(b))
}

pub fn select_threshold(dev: &ScoredSet, rule: ThresholdRule) -> Result<f64> {
    dev.require_both("dev")?;
    let mut sorted: Vec<(f64, bool)> = dev.entries.iter().map(|e| (e.score, e.label == 1)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (reals, fakes) = dev.label_counts();
    // Start at -inf: everything predicted real.
    let mut c = ConfusionCounts {
        tp: reals,
        tn: 0,
        fp: fakes,
        fn_: 0,
    };
    let rank = |c: &ConfusionCounts| {
        let (acer, gap) = keys(c);
        match rule {
            ThresholdRule::MinAcer => (acer, gap),
            ThresholdRule::Eer => (gap, acer),
        }
    };
    let mut best = (rank(&c), f64::NEG_INFINITY);
    let mut i = 0;
    while i < sorted.len() {
        // Move every entry with this score below the threshold.
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                c.tp -= 1;
                c.fn_ += 1;
            } else {
                c.fp -= 1;
                c.tn += 1;
            }
            i += 1;
        }
        let thr = if i < sorted.len() {
            score + (sorted[i].0 - score) / 2.0
        } else {
            f64::INFINITY
        };
        let r = rank(&c);
        // Candidates arrive in increasing order, so strict improvement keeps
        // the lowest threshold among ties.
        if r < best.0 {
            best = (r, thr);
        }
    }
    Ok(best.1)
}

/// One protocol's test result at its dev-selected threshold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProtocolResult {
    pub protocol_id: u32,
    #[serde(serialize_with = "finite_or_string")]
    pub threshold: f64,
    pub dev: Rates,
    pub test: Rates,
    pub test_counts: ConfusionCounts,
}

fn finite_or_string<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

/// Picks the threshold on `dev` and measures `test` with it.
pub fn evaluate_protocol(protocol_id: u32, dev: &ScoredSet, test: &ScoredSet, rule: ThresholdRule) -> Result<ProtocolResult> {
    let threshold = select_threshold(dev, rule)?;
    let test_counts = confusion_at(test, threshold)?;
    Ok(ProtocolResult {
        protocol_id,
        threshold,
        dev: rates(&confusion_at(dev, threshold)?)?,
        test: rates(&test_counts)?,
        test_counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub protocols: Vec<ProtocolResult>,
    pub mean: Rates,
    /// Population standard deviation across protocols.
    pub std: Rates,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn evaluate_protocols(protocols: Vec<ProtocolResult>) -> Result<EvalReport> {
    if protocols.is_empty() {
        return Err(Error::Empty("no protocols to aggregate".into()));
    }
    let col = |f: fn(&Rates) -> f64| mean_std(&protocols.iter().map(|p| f(&p.test)).collect::<Vec<_>>());
    let (am, asd) = col(|r| r.apcer);
    let (bm, bsd) = col(|r| r.bpcer);
    let (cm, csd) = col(|r| r.acer);
    Ok(EvalReport {
        protocols,
        mean: Rates {
            apcer: am,
            bpcer: bm,
            acer: cm,
        },
        std: Rates {
            apcer: asd,
            bpcer: bsd,
            acer: csd,
        },
    })
}

/// Percent with two decimals.
pub fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl EvalReport {
    /// Human-readable table in percent, one row per protocol plus mean ± std.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>14} {:>14} {:>14}\n", "protocol", "APCER, %", "BPCER, %", "ACER, %");
        for p in &self.protocols {
            s += &format!(
                "{:<10} {:>14} {:>14} {:>14}\n",
                p.protocol_id,
                pct(p.test.apcer),
                pct(p.test.bpcer),
                pct(p.test.acer)
            );
        }
        let pm = |m: f64, d: f64| format!("{}±{}", pct(m), pct(d));
        s += &format!(
            "{:<10} {:>14} {:>14} {:>14}\n",
            "mean",
            pm(self.mean.apcer, self.std.apcer),
            pm(self.mean.bpcer, self.std.bpcer),
            pm(self.mean.acer, self.std.acer)
        );
        s
    }
}

pub fn write_scores<W: Write>(w: W, s: &ScoredSet) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for e in &s.entries {
        out.serialize(e).map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_scores<R: Read>(r: R) -> Result<ScoredSet> {
    let mut rdr = csv::Reader::from_reader(r);
    let entries = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<ScoredEntry>, _>>()
        .map_err(|e| Error::Format(e.to_string()))?;
    ScoredSet::new(entries)
}
