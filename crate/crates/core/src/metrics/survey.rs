//! Scoring of a real-vs-generated reader study.
//!
//! Readers rate each image on a 1-10 scale where 1 means "real" and 10 means
//! "generated". The positive class is *generated*.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confidence at or above which a response counts as "generated".
pub const DEFAULT_SURVEY_THRESHOLD: u8 = 6;

/// Largest gap between a reported and a recomputed rate still treated as
/// rounding of a printed percentage.
const REPORTED_RATE_TOLERANCE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Real,
    Generated,
}

impl std::str::FromStr for Truth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Ok(Truth::Real),
            "generated" | "synthetic" | "fake" => Ok(Truth::Generated),
            other => Err(Error::InvalidArgument(format!("unknown truth label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderResponse {
    pub image_id: String,
    pub confidence: u8,
    pub truth: Truth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderScore {
    pub tp: u32,
    #[serde(rename = "fn")]
    pub fn_: u32,
    pub fp: u32,
    pub tn: u32,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
}

fn rate(num: u32, den: u32) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ReaderScore {
    /// Rates derived from the confusion counts. Undefined rates are 0.
    pub fn from_counts(tp: u32, fn_: u32, fp: u32, tn: u32) -> Self {
        Self {
            tp,
            fn_,
            fp,
            tn,
            accuracy: rate(tp + tn, tp + fn_ + fp + tn),
            recall: rate(tp, tp + fn_),
            precision: rate(tp, tp + fp),
        }
    }

    /// A score as published, whose rates may not match its counts.
    pub fn reported(counts: [u32; 4], accuracy: f64, recall: f64, precision: f64) -> Self {
        let [tp, fn_, fp, tn] = counts;
        Self {
            tp,
            fn_,
            fp,
            tn,
            accuracy,
            recall,
            precision,
        }
    }

    /// Names every rate that disagrees with the counts beyond percentage rounding.
    pub fn inconsistencies(&self) -> Vec<String> {
        let derived = Self::from_counts(self.tp, self.fn_, self.fp, self.tn);
        [
            ("accuracy", self.accuracy, derived.accuracy),
            ("recall", self.recall, derived.recall),
            ("precision", self.precision, derived.precision),
        ]
        .into_iter()
        .filter(|(_, stated, implied)| (stated - implied).abs() > REPORTED_RATE_TOLERANCE)
        .map(|(name, stated, implied)| format!("{name} {stated:.4} but counts imply {implied:.4}"))
        .collect()
    }

    pub fn is_consistent(&self) -> bool {
        self.inconsistencies().is_empty()
    }
}

/// Confusion counts and rates for one reader's responses.
pub fn score_survey(responses: &[ReaderResponse], threshold: u8) -> Result<ReaderScore> {
    if responses.is_empty() {
        return Err(Error::InvalidArgument("no survey responses".into()));
    }
    let (mut tp, mut fn_, mut fp, mut tn) = (0, 0, 0, 0);
    for r in responses {
        if !(1..=10).contains(&r.confidence) {
            return Err(Error::InvalidArgument(format!(
                "confidence {} for {} outside 1-10",
                r.confidence, r.image_id
            )));
        }
        let says_generated = r.confidence >= threshold;
        match (r.truth, says_generated) {
            (Truth::Generated, true) => tp += 1,
            (Truth::Generated, false) => fn_ += 1,
            (Truth::Real, true) => fp += 1,
            (Truth::Real, false) => tn += 1,
        }
    }
    Ok(ReaderScore::from_counts(tp, fn_, fp, tn))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyMean {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Unweighted mean of each rate across readers.
pub fn survey_mean(scores: &[ReaderScore]) -> Result<SurveyMean> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no reader scores".into()));
    }
    let n = scores.len() as f64;
    let mean = |f: fn(&ReaderScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Ok(SurveyMean {
        accuracy: mean(|s| s.accuracy),
        recall: mean(|s| s.recall),
        precision: mean(|s| s.precision),
    })
}
