//! Dialogs, features, vocabularies and the synthetic corpus generator.

mod features;
mod synth;
mod tokenize;
mod vocab;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use features::{decode_features, encode_features, read_features, write_features};
pub use synth::{generate_synthetic_corpus, SynthSpec};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{
    build_vocabulary, Vocabulary, EOS, EOS_ID, PAD, PAD_ID, RESERVED, SOS, SOS_ID, UNK, UNK_ID,
};

const REGION_TOLERANCE: f64 = 1e-6;

/// A `[start, end]` interval of video time in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeRegion {
    pub start: f64,
    pub end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl TimeRegion {
    pub fn new(start: f64, end: f64) -> Self {
        Self {
            start,
            end,
            confidence: None,
        }
    }

    pub fn with_confidence(start: f64, end: f64, confidence: f64) -> Self {
        Self {
            start,
            end,
            confidence: Some(confidence),
        }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn is_valid(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && 0.0 <= self.start && self.start <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTurn {
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

impl DialogTurn {
    pub fn from_text(question: &str, answer: &str) -> Self {
        Self {
            question: tokenize(question),
            answer: tokenize(answer),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialogSample {
    pub video_id: String,
    pub turns: Vec<DialogTurn>,
    pub caption: Option<Vec<String>>,
    /// One list of evidence regions per turn.
    pub reasons: Option<Vec<Vec<TimeRegion>>>,
}

impl DialogSample {
    pub fn reasons_for(&self, turn: usize) -> &[TimeRegion] {
        self.reasons
            .as_ref()
            .and_then(|r| r.get(turn))
            .map_or(&[], Vec::as_slice)
    }
}

/// Audio and visual frame sequences of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub audio: Matrix,
    pub visual: Matrix,
    pub audio_rate: f64,
    pub visual_rate: f64,
    /// Seconds; equal to the visual frame count over the visual frame rate.
    pub duration: f64,
}

impl FeatureSet {
    pub fn new(audio: Matrix, audio_rate: f64, visual: Matrix, visual_rate: f64) -> Result<Self> {
        let duration = visual.rows() as f64 / visual_rate;
        let fs = Self {
            audio,
            visual,
            audio_rate,
            visual_rate,
            duration,
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio.rows() == 0 || self.visual.rows() == 0 {
            return Err(Error::Validation("feature sequences must have at least one frame".into()));
        }
        if !(self.audio_rate > 0.0 && self.visual_rate > 0.0) {
            return Err(Error::Validation("frame rates must be positive".into()));
        }
        if !self.audio.is_finite() || !self.visual.is_finite() {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        let audio_span = self.audio.rows() as f64 / self.audio_rate;
        let slack = (1.0 / self.audio_rate).max(1.0 / self.visual_rate) + 1e-9;
        if (audio_span - self.duration).abs() > slack {
            return Err(Error::Validation(format!(
                "audio spans {audio_span:.3}s but visual spans {:.3}s",
                self.duration
            )));
        }
        Ok(())
    }

    pub fn audio_period(&self) -> f64 {
        1.0 / self.audio_rate
    }

    pub fn visual_period(&self) -> f64 {
        1.0 / self.visual_rate
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub samples: Vec<DialogSample>,
    pub features: BTreeMap<String, FeatureSet>,
}

impl Corpus {
    pub fn num_turns(&self) -> usize {
        self.samples.iter().map(|s| s.turns.len()).sum()
    }

    pub fn features_for(&self, sample: &DialogSample) -> Result<&FeatureSet> {
        self.features
            .get(&sample.video_id)
            .ok_or_else(|| Error::Validation(format!("no features for `{}`", sample.video_id)))
    }

    pub fn validate(&self) -> Result<()> {
        for sample in &self.samples {
            let fs = self.features_for(sample)?;
            fs.validate()?;
            validate_sample(sample, fs.duration)?;
        }
        Ok(())
    }

    /// A corpus holding `samples[range]` and only the features they reference.
    pub fn subset(&self, range: std::ops::Range<usize>, split: Split) -> Corpus {
        let samples: Vec<DialogSample> = self.samples[range].to_vec();
        let features = samples
            .iter()
            .filter_map(|s| {
                self.features
                    .get(&s.video_id)
                    .map(|f| (s.video_id.clone(), f.clone()))
            })
            .collect();
        Corpus {
            split,
            samples,
            features,
        }
    }

    /// Consecutive train/validation/test partitions of the sample list.
    pub fn partition(&self, train: usize, validation: usize) -> (Corpus, Corpus, Corpus) {
        let n = self.samples.len();
        let a = train.min(n);
        let b = (a + validation).min(n);
        (
            self.subset(0..a, Split::Train),
            self.subset(a..b, Split::Validation),
            self.subset(b..n, Split::Test),
        )
    }
}

fn validate_sample(sample: &DialogSample, duration: f64) -> Result<()> {
    for (t, turn) in sample.turns.iter().enumerate() {
        for tok in turn.question.iter().chain(&turn.answer) {
            if RESERVED.contains(&tok.as_str()) {
                return Err(Error::Validation(format!(
                    "video `{}` turn {t} contains reserved token {tok}",
                    sample.video_id
                )));
            }
        }
    }
    if let Some(reasons) = &sample.reasons {
        if reasons.len() != sample.turns.len() {
            return Err(Error::Validation(format!(
                "video `{}` has {} reason lists for {} turns",
                sample.video_id,
                reasons.len(),
                sample.turns.len()
            )));
        }
        for (t, regions) in reasons.iter().enumerate() {
            for r in regions {
                if !r.is_valid() || r.end > duration + REGION_TOLERANCE {
                    return Err(Error::Validation(format!(
                        "video `{}` turn {t}: region [{}, {}] outside [0, {duration}]",
                        sample.video_id, r.start, r.end
                    )));
                }
            }
        }
    }
    Ok(())
}

/// How much dialog history precedes the current question in the decoder input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryPolicy {
    Full,
    #[default]
    PreviousQuestionOnly,
}

/// Decoder input for answering `turn_index`: optional history, the current
/// question, then the start-of-sentence token.
pub fn build_decoder_context(
    sample: &DialogSample,
    turn_index: usize,
    policy: HistoryPolicy,
) -> Result<Vec<String>> {
    let turn = sample.turns.get(turn_index).ok_or(Error::TurnOutOfRange {
        index: turn_index,
        turns: sample.turns.len(),
    })?;
    let mut out = Vec::new();
    if policy == HistoryPolicy::Full {
        for prior in &sample.turns[..turn_index] {
            out.extend(prior.question.iter().cloned());
            out.extend(prior.answer.iter().cloned());
        }
    }
    out.extend(turn.question.iter().cloned());
    out.push(SOS.to_string());
    Ok(out)
}

// --- JSON dialog files -----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DialogFile {
    dialogs: Vec<DialogRecord>,
}

#[derive(Serialize, Deserialize)]
struct DialogRecord {
    image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    dialog: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reasons: Option<Vec<Vec<RegionRecord>>>,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    question: String,
    answer: String,
}

#[derive(Serialize, Deserialize)]
struct RegionRecord {
    start: f64,
    end: f64,
}

pub fn audio_feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}_audio.bin"))
}

pub fn visual_feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}_visual.bin"))
}

/// Parse a dialog JSON file without touching features.
pub fn load_dialogs(dialog_path: &Path) -> Result<Vec<DialogSample>> {
    let text = fs::read_to_string(dialog_path).map_err(|e| Error::io(dialog_path, e))?;
    let file: DialogFile = serde_json::from_str(&text).map_err(|e| Error::json(dialog_path, e))?;
    let mut samples = Vec::with_capacity(file.dialogs.len());
    for rec in file.dialogs {
        let reasons = rec.reasons.map(|lists| {
            lists
                .into_iter()
                .map(|regions| {
                    regions
                        .into_iter()
                        .map(|r| TimeRegion::new(r.start, r.end))
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        });
        for (t, regions) in reasons.iter().flatten().enumerate() {
            if let Some(r) = regions.iter().find(|r| !r.is_valid()) {
                return Err(Error::Validation(format!(
                    "video `{}` turn {t}: malformed region [{}, {}]",
                    rec.image_id, r.start, r.end
                )));
            }
        }
        samples.push(DialogSample {
            video_id: rec.image_id,
            turns: rec
                .dialog
                .iter()
                .map(|t| DialogTurn::from_text(&t.question, &t.answer))
                .collect(),
            caption: rec.caption.as_deref().map(tokenize),
            reasons,
        });
    }
    Ok(samples)
}

pub fn load_features(feature_dir: &Path, video_id: &str) -> Result<FeatureSet> {
    let audio_path = audio_feature_path(feature_dir, video_id);
    let visual_path = visual_feature_path(feature_dir, video_id);
    for path in [&audio_path, &visual_path] {
        if !path.exists() {
            return Err(Error::MissingFeatures {
                video_id: video_id.to_string(),
                path: path.clone(),
            });
        }
    }
    let (audio, audio_rate) = read_features(&audio_path)?;
    let (visual, visual_rate) = read_features(&visual_path)?;
    FeatureSet::new(audio, audio_rate, visual, visual_rate)
}

/// Load a dialog file plus the feature containers of every referenced video.
pub fn load_corpus(dialog_path: &Path, feature_dir: &Path, split: Split) -> Result<Corpus> {
    let samples = load_dialogs(dialog_path)?;
    let mut features = BTreeMap::new();
    for sample in &samples {
        if !features.contains_key(&sample.video_id) {
            let fs = load_features(feature_dir, &sample.video_id)?;
            features.insert(sample.video_id.clone(), fs);
        }
    }
    let corpus = Corpus {
        split,
        samples,
        features,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub fn dialogs_to_json(samples: &[DialogSample]) -> String {
    let file = DialogFile {
        dialogs: samples
            .iter()
            .map(|s| DialogRecord {
                image_id: s.video_id.clone(),
                caption: s.caption.as_deref().map(detokenize),
                dialog: s
                    .turns
                    .iter()
                    .map(|t| TurnRecord {
                        question: detokenize(&t.question),
                        answer: detokenize(&t.answer),
                    })
                    .collect(),
                reasons: s.reasons.as_ref().map(|lists| {
                    lists
                        .iter()
                        .map(|regions| {
                            regions
                                .iter()
                                .map(|r| RegionRecord {
                                    start: r.start,
                                    end: r.end,
                                })
                                .collect()
                        })
                        .collect()
                }),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("dialog records always serialize")
}

/// Write the dialog JSON and one container per video per modality.
pub fn save_corpus(corpus: &Corpus, dialog_path: &Path, feature_dir: &Path) -> Result<()> {
    if let Some(parent) = dialog_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::create_dir_all(feature_dir).map_err(|e| Error::io(feature_dir, e))?;
    fs::write(dialog_path, dialogs_to_json(&corpus.samples)).map_err(|e| Error::io(dialog_path, e))?;
    for (id, fs) in &corpus.features {
        write_features(&audio_feature_path(feature_dir, id), &fs.audio, fs.audio_rate)?;
        write_features(&visual_feature_path(feature_dir, id), &fs.visual, fs.visual_rate)?;
    }
    Ok(())
}
