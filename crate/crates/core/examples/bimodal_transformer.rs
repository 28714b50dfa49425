//! One forward pass of the teacher model with attentional fusion: encoded
//! stream shapes, the next-word distribution, source attention and fusion
//! weights.

use avsd::data::{build_decoder_context, build_vocabulary, generate_synthetic_corpus, HistoryPolicy, SynthSpec};
use avsd::decoder::FusionMode;
use avsd::model::{AvsdModel, ModelConfig};

fn main() -> avsd::Result<()> {
    let spec = SynthSpec {
        num_videos: 2,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, 3)?;
    let mut cfg = ModelConfig::default();
    cfg.encoder.input_a = spec.d_a;
    cfg.encoder.input_v = spec.d_v;
    cfg.decoder.fusion = FusionMode::Attentional;
    let model = AvsdModel::new(cfg.with_caption(true), build_vocabulary(&corpus, 1), 3)?;
    println!("{} parameter tensors, {} scalars", model.params.len(), model.params.num_scalars());

    let s = &corpus.samples[0];
    let streams = model.encode(corpus.features_for(s)?, s.caption.as_deref())?;
    println!("audio {:?}, visual {:?}", streams.a.shape(), streams.v.shape());
    if let Some(c) = &streams.c {
        println!("caption {:?}", c.shape());
    }

    let context = build_decoder_context(s, 0, HistoryPolicy::PreviousQuestionOnly)?;
    let state = model.next_word_distribution(&model.vocab.encode(&context), &streams)?;
    let mut ranked: Vec<(usize, f64)> = state.distribution.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("context: {}", context.join(" "));
    for (id, p) in ranked.iter().take(3) {
        println!("  {:<10} {p:.4}", model.vocab.token(*id).unwrap_or("?"));
    }
    let last = state.layers[0].rows() - 1;
    for (m, name) in ["audio", "visual", "caption"].iter().enumerate() {
        let head0 = &state.source_attention[0][m][0];
        let peak = avsd::tensor::argmax(head0.row(last));
        println!("layer 0 {name} attention peaks at frame {peak}");
    }
    if let Some(w) = &state.fusion_weights[0] {
        println!("layer 0 fusion weights at the last position: {:?}", w.row(last));
    }
    Ok(())
}
