//! Deterministic desk-scale corpora with planted audio/visual evidence.
//!
//! Every question asks about one "type". A type owns a 4-wide slice of one
//! modality's feature vector, and each answer word of that type owns a
//! prototype direction inside the slice. The turn's planted region gets
//! `signal · prototype` added on top of Gaussian noise, so the answer word is
//! recoverable only from that stream inside that window. Captions are the
//! concatenated answers, which gives a caption-reading teacher the answer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Corpus, DialogSample, DialogTurn, FeatureSet, Split, TimeRegion};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const SLICE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub turns_per_dialog: usize,
    /// Number of distinct answer words.
    pub vocab_size: usize,
    pub t_a: usize,
    pub t_v: usize,
    pub d_a: usize,
    pub d_v: usize,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_signal")]
    pub signal: f64,
    #[serde(default = "default_region_min")]
    pub region_min: f64,
    #[serde(default = "default_region_max")]
    pub region_max: f64,
}

fn default_duration() -> f64 {
    10.0
}
fn default_noise() -> f64 {
    0.5
}
fn default_signal() -> f64 {
    1.0
}
fn default_region_min() -> f64 {
    2.0
}
fn default_region_max() -> f64 {
    5.0
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 100,
            turns_per_dialog: 3,
            vocab_size: 12,
            t_a: 20,
            t_v: 20,
            d_a: 8,
            d_v: 16,
            duration: default_duration(),
            noise: default_noise(),
            signal: default_signal(),
            region_min: default_region_min(),
            region_max: default_region_max(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_videos", self.num_videos),
            ("turns_per_dialog", self.turns_per_dialog),
            ("vocab_size", self.vocab_size),
            ("t_a", self.t_a),
            ("t_v", self.t_v),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth.{name} must be positive")));
        }
        if self.d_a < SLICE || self.d_v < SLICE {
            return Err(Error::Config(format!("synth.d_a and synth.d_v must be at least {SLICE}")));
        }
        if !(self.duration > 0.0) || self.noise < 0.0 || !(self.signal > 0.0) {
            return Err(Error::Config("synth.duration and synth.signal must be positive, synth.noise non-negative".into()));
        }
        if !(0.0 < self.region_min && self.region_min <= self.region_max && self.region_max <= self.duration) {
            return Err(Error::Config("need 0 < region_min <= region_max <= duration".into()));
        }
        Ok(())
    }
}

const AUDIO_TOPICS: [&str; 6] = ["sound", "noise", "voice", "music", "tone", "rhythm"];
const VISUAL_TOPICS: [&str; 8] = ["object", "color", "motion", "room", "person", "shape", "light", "pose"];
const WORDS: [&str; 48] = [
    "apple", "banana", "bottle", "candle", "carpet", "chair", "clock", "cookie", "door", "drum",
    "engine", "fan", "glass", "guitar", "hammer", "kettle", "lamp", "laptop", "mirror", "mug",
    "paper", "phone", "piano", "pillow", "plate", "radio", "rope", "shoe", "sofa", "spoon",
    "table", "towel", "window", "whistle", "bell", "blanket", "book", "box", "broom", "brush",
    "camera", "closet", "dish", "floor", "jacket", "laundry", "sandwich", "shelf",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stream {
    Audio,
    Visual,
}

struct QuestionType {
    topic: String,
    stream: Stream,
    offset: usize,
    words: Vec<usize>,
}

fn topic_name(list: &[&str], i: usize) -> String {
    match i / list.len() {
        0 => list[i].to_string(),
        k => format!("{}{}", list[i % list.len()], k + 1),
    }
}

fn word_name(i: usize) -> String {
    match i / WORDS.len() {
        0 => WORDS[i].to_string(),
        k => format!("{}{}", WORDS[i % WORDS.len()], k + 1),
    }
}

fn question_types(spec: &SynthSpec) -> Vec<QuestionType> {
    let mut types = Vec::new();
    let (na, nv) = (spec.d_a / SLICE, spec.d_v / SLICE);
    // Interleave audio and visual so that trimming keeps both modalities.
    for i in 0..na.max(nv) {
        if i < na {
            types.push((Stream::Audio, i));
        }
        if i < nv {
            types.push((Stream::Visual, i));
        }
    }
    // At least two answer words per type where the word budget allows.
    let keep = (spec.vocab_size / 2).clamp(1, types.len());
    types.truncate(keep);
    let mut out: Vec<QuestionType> = types
        .into_iter()
        .map(|(stream, slot)| QuestionType {
            topic: match stream {
                Stream::Audio => topic_name(&AUDIO_TOPICS, slot),
                Stream::Visual => topic_name(&VISUAL_TOPICS, slot),
            },
            stream,
            offset: slot * SLICE,
            words: Vec::new(),
        })
        .collect();
    let n = out.len();
    for w in 0..spec.vocab_size {
        out[w % n].words.push(w);
    }
    out
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..SLICE).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Prototype of the `j`-th word of a type: signed basis vectors first, then
/// random unit directions.
fn prototype(j: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if j < 2 * SLICE {
        let mut v = vec![0.0; SLICE];
        v[j % SLICE] = if j < SLICE { 1.0 } else { -1.0 };
        v
    } else {
        unit_vector(rng)
    }
}

fn noise_matrix(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> Matrix {
    if sd == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, sd).unwrap();
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn plant(frames: &mut Matrix, rate: f64, region: &TimeRegion, offset: usize, direction: &[f64], signal: f64) {
    for t in 0..frames.rows() {
        let time = t as f64 / rate;
        if region.start <= time && time <= region.end {
            for (k, d) in direction.iter().enumerate() {
                let v = frames.get(t, offset + k) + signal * d;
                frames.set(t, offset + k, v);
            }
        }
    }
}

fn to_f32(m: &Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let types = question_types(spec);
    let prototypes: BTreeMap<usize, Vec<f64>> = types
        .iter()
        .flat_map(|qt| qt.words.iter().enumerate().map(|(j, &w)| (w, j)).collect::<Vec<_>>())
        .map(|(w, j)| (w, prototype(j, &mut rng)))
        .collect();
    let audio_rate = spec.t_a as f64 / spec.duration;
    let visual_rate = spec.t_v as f64 / spec.duration;
    let width = spec.d_a.max(spec.d_v).to_string().len().max(5);

    let mut samples = Vec::with_capacity(spec.num_videos);
    let mut features = BTreeMap::new();
    let type_ids: Vec<usize> = (0..types.len()).collect();
    for v in 0..spec.num_videos {
        let video_id = format!("vid{v:0width$}");
        let mut audio = noise_matrix(spec.t_a, spec.d_a, spec.noise, &mut rng);
        let mut visual = noise_matrix(spec.t_v, spec.d_v, spec.noise, &mut rng);
        let mut order = type_ids.clone();
        order.shuffle(&mut rng);
        let mut turns = Vec::with_capacity(spec.turns_per_dialog);
        let mut reasons = Vec::with_capacity(spec.turns_per_dialog);
        for t in 0..spec.turns_per_dialog {
            let qt = &types[order[t % order.len()]];
            let word = qt.words[rng.gen_range(0..qt.words.len())];
            let length = rng.gen_range(spec.region_min..=spec.region_max);
            let start = rng.gen_range(0.0..=spec.duration - length);
            let region = TimeRegion::new(start, start + length);
            match qt.stream {
                Stream::Audio => plant(&mut audio, audio_rate, &region, qt.offset, &prototypes[&word], spec.signal),
                Stream::Visual => plant(&mut visual, visual_rate, &region, qt.offset, &prototypes[&word], spec.signal),
            }
            let question = format!("what {} do you notice ?", qt.topic);
            let answer = format!("the {} i notice is {} here", qt.topic, word_name(word));
            turns.push(DialogTurn::from_text(&question, &answer));
            reasons.push(vec![region]);
        }
        let caption: Vec<String> = turns.iter().flat_map(|t| t.answer.iter().cloned()).collect();
        let fs = FeatureSet::new(to_f32(&audio), audio_rate, to_f32(&visual), visual_rate)?;
        features.insert(video_id.clone(), fs);
        samples.push(DialogSample {
            video_id,
            turns,
            caption: Some(caption),
            reasons: Some(reasons),
        });
    }
    let corpus = Corpus {
        split: Split::Train,
        samples,
        features,
    };
    corpus.validate()?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_the_spec() {
        let spec = SynthSpec {
            num_videos: 100,
            turns_per_dialog: 3,
            ..SynthSpec::default()
        };
        let c = generate_synthetic_corpus(&spec, 7).unwrap();
        assert_eq!(c.samples.len(), 100);
        assert_eq!(c.num_turns(), 300);
        assert_eq!(c.features.len(), 100);
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SynthSpec {
            num_videos: 5,
            ..SynthSpec::default()
        };
        let a = generate_synthetic_corpus(&spec, 3).unwrap();
        let b = generate_synthetic_corpus(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_corpus(&spec, 4).unwrap());
    }

    #[test]
    fn regions_lie_inside_the_video() {
        let c = generate_synthetic_corpus(&SynthSpec::default(), 11).unwrap();
        for s in &c.samples {
            let d = c.features[&s.video_id].duration;
            for r in s.reasons.as_ref().unwrap().iter().flatten() {
                assert!(0.0 <= r.start && r.start <= r.end && r.end <= d);
            }
        }
    }

    #[test]
    fn caption_contains_every_answer() {
        let c = generate_synthetic_corpus(&SynthSpec::default(), 1).unwrap();
        let s = &c.samples[0];
        let cap = s.caption.as_ref().unwrap().join(" ");
        for t in &s.turns {
            assert!(cap.contains(&t.answer.join(" ")));
            assert!(t.answer.len() >= 5);
        }
    }

    #[test]
    fn small_word_budget_trims_types() {
        let spec = SynthSpec {
            vocab_size: 3,
            ..SynthSpec::default()
        };
        let types = question_types(&spec);
        assert_eq!(types.len(), 1);
        assert_eq!(types[0].words, vec![0, 1, 2]);
    }

    #[test]
    fn zero_field_rejected() {
        let spec = SynthSpec {
            t_v: 0,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic_corpus(&spec, 0).is_err());
    }
}
