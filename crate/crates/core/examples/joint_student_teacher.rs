//! Train a caption-reading teacher, then train a student jointly with it and
//! show the three loss terms per epoch.

use avsd::data::{build_vocabulary, generate_synthetic_corpus, SynthSpec};
use avsd::model::{AvsdModel, ModelConfig};
use avsd::training::{fit, Role, TrainingConfig};

fn main() -> avsd::Result<()> {
    let spec = SynthSpec {
        num_videos: 24,
        noise: 2.0,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, 2)?;
    let (train, val, _) = corpus.partition(16, 8);
    let vocab = build_vocabulary(&corpus, 1);
    let mut cfg = ModelConfig::default();
    cfg.encoder.input_a = spec.d_a;
    cfg.encoder.input_v = spec.d_v;

    let mut teacher = AvsdModel::new(cfg.with_caption(true), vocab.clone(), 2)?;
    let tc = TrainingConfig {
        epochs: 8,
        role: Role::Teacher,
        ..TrainingConfig::default()
    };
    let t = fit(&mut teacher, None, &train, &val, &tc, 2)?;
    println!("teacher val CE {:.3}", t.best_val_loss);

    let mut student = AvsdModel::new(cfg, vocab, 3)?;
    let jc = TrainingConfig {
        role: Role::StudentJstl,
        lambda_c: 1.0,
        ..tc
    };
    let out = fit(&mut student, Some(&mut teacher), &train, &val, &jc, 2)?;
    println!("epoch  total   hard CE  soft CE  state MSE");
    for m in &out.log {
        println!("{:>5}  {:.3}   {:.3}    {:.3}    {:.4}", m.epoch, m.train_loss, m.ce, m.st, m.mse);
    }
    Ok(())
}
