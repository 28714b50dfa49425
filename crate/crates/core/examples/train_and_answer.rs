//! Train a plain student for a few epochs, then beam-search answers for the
//! held-out dialogs and score them.

use avsd::data::{build_vocabulary, generate_synthetic_corpus, HistoryPolicy, SynthSpec};
use avsd::generation::{generate_answers, SearchConfig};
use avsd::metrics::evaluate;
use avsd::model::{AvsdModel, ModelConfig};
use avsd::training::{fit, TrainingConfig};

fn main() -> avsd::Result<()> {
    let spec = SynthSpec {
        num_videos: 40,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, 1)?;
    let (train, val, test) = corpus.partition(24, 8);
    let mut cfg = ModelConfig::default();
    cfg.encoder.input_a = spec.d_a;
    cfg.encoder.input_v = spec.d_v;
    let mut model = AvsdModel::new(cfg, build_vocabulary(&corpus, 1), 1)?;

    let tc = TrainingConfig {
        epochs: 30,
        ..TrainingConfig::default()
    };
    let outcome = fit(&mut model, None, &train, &val, &tc, 1)?;
    for m in outcome.log.iter().step_by(3) {
        println!("epoch {:>2}  train {:.3}  val {:.3}  lr {:.1e}", m.epoch, m.train_loss, m.val_loss, m.lr);
    }
    println!("kept epoch {}", outcome.best_epoch);

    let answers = generate_answers(&[&model], &test, HistoryPolicy::PreviousQuestionOnly, &SearchConfig::default())?;
    let s = &test.samples[0];
    for (t, turn) in s.turns.iter().enumerate() {
        println!("{}  ref: {}\n{}  got: {}", turn.question.join(" "), turn.answer.join(" "), " ".repeat(turn.question.join(" ").len()), answers[&s.video_id][&t]);
    }
    print!("{}", evaluate(Some(&answers), None, &test, 0.5)?.table());
    Ok(())
}
