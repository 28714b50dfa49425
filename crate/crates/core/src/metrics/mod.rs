//! Answer and evidence scoring.

mod iou;
mod text;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use iou::{covered_frames, iou1, iou2, iou_interval};
pub use text::{
    bleu4, cider_d, cider_d_scores, coco_tokenize, rouge_l, rouge_l_scores, rouge_l_sentence, CIDER_SIGMA, ROUGE_BETA,
};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::generation::AnswerFile;
use crate::reasoning::ReasonFile;

/// Metrics the report lists but does not compute.
pub const UNAVAILABLE: [&str; 1] = ["METEOR"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub video_id: String,
    pub turn: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cider_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou2: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Corpus-level values by metric name.
    pub corpus: BTreeMap<String, f64>,
    /// Listed as "n/a" in the table.
    pub unavailable: Vec<String>,
    pub samples: Vec<SampleScores>,
}

impl ScoreReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.corpus.get(metric).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn table(&self) -> String {
        let mut out = String::from("metric     value\n");
        let order = ["BLEU4", "METEOR", "ROUGE_L", "CIDEr", "IoU-1", "IoU-2"];
        for name in order {
            if let Some(v) = self.corpus.get(name) {
                let _ = writeln!(out, "{name:<10} {v:.4}");
            } else if self.unavailable.iter().any(|u| u == name) {
                let _ = writeln!(out, "{name:<10} n/a");
            }
        }
        out
    }
}

/// Score generated answers and, optionally, predicted regions against the
/// ground truth in `references`. IoU-2 uses each video's visual frame period,
/// or `default_frame_period` when its features are not loaded.
///
/// Every turn of the reference corpus must be present in the answer file and,
/// for turns with ground-truth regions, in the reason file.
pub fn evaluate(
    answers: Option<&AnswerFile>,
    reasons: Option<&ReasonFile>,
    references: &Corpus,
    default_frame_period: f64,
) -> Result<ScoreReport> {
    let mut missing = Vec::new();
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    let mut samples = Vec::new();
    let mut ious = Vec::new();
    for s in &references.samples {
        let period = references
            .features
            .get(&s.video_id)
            .map_or(default_frame_period, |f| f.visual_period());
        for (t, turn) in s.turns.iter().enumerate() {
            let mut row = SampleScores {
                video_id: s.video_id.clone(),
                turn: t,
                rouge_l: None,
                cider_d: None,
                iou1: None,
                iou2: None,
            };
            if let Some(a) = answers {
                match a.get(&s.video_id).and_then(|m| m.get(&t)) {
                    Some(text) => {
                        cands.push(coco_tokenize(text));
                        refs.push(vec![coco_tokenize(&turn.answer.join(" "))]);
                    }
                    None => missing.push(format!("answer {}#{t}", s.video_id)),
                }
            }
            if let Some(rf) = reasons {
                let gt = s.reasons_for(t);
                if !gt.is_empty() {
                    match rf.get(&s.video_id).and_then(|m| m.get(&t)) {
                        Some(pred) => {
                            let (a, b) = (iou1(pred, gt), iou2(pred, gt, period));
                            row.iou1 = Some(a);
                            row.iou2 = Some(b);
                            ious.push((a, b));
                        }
                        None => missing.push(format!("reason {}#{t}", s.video_id)),
                    }
                }
            }
            samples.push(row);
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!("missing ids: {}", missing.join(", "))));
    }
    let mut report = ScoreReport {
        unavailable: UNAVAILABLE.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    if answers.is_some() && !cands.is_empty() {
        report.corpus.insert("BLEU4".into(), bleu4(&cands, &refs)?);
        let rouge = rouge_l_scores(&cands, &refs)?;
        let cider = cider_d_scores(&cands, &refs)?;
        report.corpus.insert("ROUGE_L".into(), mean(&rouge));
        report.corpus.insert("CIDEr".into(), mean(&cider));
        let mut k = 0;
        for row in &mut samples {
            row.rouge_l = Some(rouge[k]);
            row.cider_d = Some(cider[k]);
            k += 1;
        }
    }
    if reasons.is_some() {
        let n = ious.len().max(1) as f64;
        report.corpus.insert("IoU-1".into(), ious.iter().map(|x| x.0).sum::<f64>() / n);
        report.corpus.insert("IoU-2".into(), ious.iter().map(|x| x.1).sum::<f64>() / n);
    }
    report.samples = samples;
    Ok(report)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
