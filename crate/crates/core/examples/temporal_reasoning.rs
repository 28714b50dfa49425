//! Localize answer evidence two ways: moments of the decoder's source
//! attention, and a proposal network trained on the planted regions.

use avsd::data::{build_vocabulary, generate_synthetic_corpus, HistoryPolicy, SynthSpec};
use avsd::metrics::evaluate;
use avsd::model::{AvsdModel, ModelConfig};
use avsd::reasoning::{reason_corpus, rpn_dims, rpn_examples, train_rpn, ReasoningConfig, ReasoningMethod, RpnModel};
use avsd::training::{fit, TrainingConfig};

fn main() -> avsd::Result<()> {
    let policy = HistoryPolicy::PreviousQuestionOnly;
    let spec = SynthSpec {
        num_videos: 24,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, 4)?;
    let (train, val, test) = corpus.partition(16, 0);
    let mut cfg = ModelConfig::default();
    cfg.encoder.input_a = spec.d_a;
    cfg.encoder.input_v = spec.d_v;
    let mut model = AvsdModel::new(cfg, build_vocabulary(&corpus, 1), 4)?;
    let tc = TrainingConfig {
        epochs: 10,
        ..TrainingConfig::default()
    };
    fit(&mut model, None, &train, &val, &tc, 4)?;

    let rc = ReasoningConfig {
        kernel_sizes: vec![3, 5, 7, 9, 11],
        rpn_epochs: 40,
        rpn_learning_rate: 3e-3,
        ..ReasoningConfig::default()
    };
    let mut rpn = RpnModel::new(rc.clone(), rpn_dims(&model), 4)?;
    let log = train_rpn(&mut rpn, &rpn_examples(&model, &train, policy)?, 4)?;
    println!("rpn loss {:.3} -> {:.3}", log[0].loss, log.last().map_or(0.0, |e| e.loss));

    let s = &test.samples[0];
    for method in [ReasoningMethod::Attention, ReasoningMethod::Rpn] {
        let regions = reason_corpus(&model, Some(&rpn), &test, policy, None, method, &rc)?;
        let report = evaluate(None, Some(&regions), &test, 0.5)?;
        println!(
            "{method:?}: IoU-1 {:.3}  IoU-2 {:.3}",
            report.get("IoU-1").unwrap_or(0.0),
            report.get("IoU-2").unwrap_or(0.0)
        );
        println!("    {} #0 truth {:?}", s.video_id, s.reasons_for(0));
        println!("    {} #0 found {:?}", s.video_id, regions[&s.video_id][&0]);
    }
    Ok(())
}
