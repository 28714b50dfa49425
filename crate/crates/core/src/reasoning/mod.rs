//! Which stretch of the video supports an answer.
//!
//! Two methods: the moments of the decoder's source attention
//! ([`attention_region`]) and a trained region proposal network over the
//! encoder outputs ([`RpnModel`]).

mod attention;
mod rpn;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use attention::{attention_moments, attention_region, pool_qa_embedding, AttentionTrace, ModalityTrace};
pub use rpn::{
    anchor_region, decode_anchor, encode_target, filter_proposals, label_anchor, rpn_batch_gradients,
    rpn_train_step, train_rpn, AnchorLabel, BranchVars, ReasoningConfig, RegionProposal, RpnBranch, RpnDims,
    RpnEpoch, RpnExample, RpnLoss, RpnModel, RPN_FORMAT, RPN_VERSION,
};

use crate::data::{build_decoder_context, Corpus, DialogSample, HistoryPolicy, TimeRegion, SOS_ID};
use crate::error::{Error, Result};
use crate::generation::AnswerFile;
use crate::model::{AvsdModel, DecoderState};
use crate::tensor::Matrix;
use crate::data::tokenize;

/// Predicted regions keyed by video id, then turn index.
pub type ReasonFile = BTreeMap<String, BTreeMap<usize, Vec<TimeRegion>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningMethod {
    Attention,
    Rpn,
}

/// Decoder state over `context ++ answer` and the rows that predict the
/// answer words and the closing end token.
pub struct TurnTrace {
    pub state: DecoderState,
    pub answer_rows: Vec<usize>,
}

/// Run the decoder over a question/answer pair. `answer` overrides the
/// reference answer of the turn (e.g. with a generated one).
pub fn trace_turn(
    model: &AvsdModel,
    sample: &DialogSample,
    turn: usize,
    streams: &crate::encoder::EncodedStreams,
    policy: HistoryPolicy,
    answer: Option<&[String]>,
) -> Result<TurnTrace> {
    let context = build_decoder_context(sample, turn, policy)?;
    let mut ids = model.vocab.encode(&context);
    debug_assert_eq!(ids.last(), Some(&SOS_ID));
    let answer = answer.unwrap_or(&sample.turns[turn].answer);
    let start = ids.len() - 1;
    ids.extend(model.vocab.encode(answer));
    let state = model.next_word_distribution(&ids, streams)?;
    Ok(TurnTrace {
        state,
        answer_rows: (start..ids.len()).collect(),
    })
}

fn answer_override<'a>(answers: Option<&'a AnswerFile>, sample: &DialogSample, turn: usize) -> Result<Option<Vec<String>>> {
    match answers {
        None => Ok(None),
        Some(file) => file
            .get(&sample.video_id)
            .and_then(|m| m.get(&turn))
            .map(|text| Some(tokenize(text)))
            .ok_or_else(|| Error::Validation(format!("no generated answer for {}#{turn}", sample.video_id))),
    }
}

/// Training pairs for the proposal network: every turn with ground-truth
/// regions, encoded by the frozen dialog model on its reference answer.
pub fn rpn_examples(model: &AvsdModel, corpus: &Corpus, policy: HistoryPolicy) -> Result<Vec<RpnExample>> {
    let mut out = Vec::new();
    for s in &corpus.samples {
        let fs = corpus.features_for(s)?;
        let streams = model.encode(fs, s.caption.as_deref())?;
        for t in 0..s.turns.len() {
            let gt = s.reasons_for(t);
            if gt.is_empty() {
                continue;
            }
            let trace = trace_turn(model, s, t, &streams, policy, None)?;
            let qa = pool_qa_embedding(&trace.state);
            out.push(RpnExample {
                streams: streams.clone(),
                qa: Matrix::from_vec(1, qa.len(), qa),
                gt: gt.to_vec(),
                periods: [fs.audio_period(), fs.visual_period()],
                duration: fs.duration,
            });
        }
    }
    Ok(out)
}

pub fn rpn_dims(model: &AvsdModel) -> RpnDims {
    RpnDims {
        d_a: model.config.encoder.d_a,
        d_v: model.config.encoder.d_v,
        d_qa: model.config.decoder.d,
    }
}

/// Regions for every turn of `corpus`. The answer of each turn comes from
/// `answers` when given, else from the reference.
pub fn reason_corpus(
    model: &AvsdModel,
    rpn: Option<&RpnModel>,
    corpus: &Corpus,
    policy: HistoryPolicy,
    answers: Option<&AnswerFile>,
    method: ReasoningMethod,
    config: &ReasoningConfig,
) -> Result<ReasonFile> {
    let rpn = match (method, rpn) {
        (ReasoningMethod::Rpn, None) => {
            return Err(Error::Validation("the rpn method needs a trained proposal network".into()))
        }
        (_, r) => r,
    };
    let mut out = ReasonFile::new();
    for s in &corpus.samples {
        let fs = corpus.features_for(s)?;
        let streams = model.encode(fs, s.caption.as_deref())?;
        let entry = out.entry(s.video_id.clone()).or_default();
        for t in 0..s.turns.len() {
            let answer = answer_override(answers, s, t)?;
            let trace = trace_turn(model, s, t, &streams, policy, answer.as_deref())?;
            let regions = match method {
                ReasoningMethod::Attention => {
                    let at = AttentionTrace::from_state(
                        &trace.state,
                        &trace.answer_rows,
                        fs.audio_period(),
                        fs.visual_period(),
                    );
                    vec![attention_region(&at, config.nu, fs.duration)]
                }
                ReasoningMethod::Rpn => {
                    let rpn = rpn.expect("checked above");
                    let qa = pool_qa_embedding(&trace.state);
                    let proposals = rpn.propose(&streams, &qa, [fs.audio_period(), fs.visual_period()], fs.duration)?;
                    filter_proposals(&proposals, config.confidence_threshold, config.nms_iou)
                }
            };
            entry.insert(t, regions);
        }
    }
    Ok(out)
}
