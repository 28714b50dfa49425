//! Generate a small corpus with planted evidence, write it to disk and read
//! it back.

use avsd::data::{build_vocabulary, generate_synthetic_corpus, load_corpus, save_corpus, Split, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec {
        num_videos: 8,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, 11)?;
    let vocab = build_vocabulary(&corpus, 1);
    println!("{} dialogs, {} turns, {} vocabulary entries", corpus.samples.len(), corpus.num_turns(), vocab.len());

    let s = &corpus.samples[0];
    for (t, turn) in s.turns.iter().enumerate() {
        println!(
            "{} #{t}: Q: {} | A: {} | evidence {:?}",
            s.video_id,
            turn.question.join(" "),
            turn.answer.join(" "),
            s.reasons_for(t)
        );
    }
    println!("caption: {}", s.caption.as_ref().map(|c| c.join(" ")).unwrap_or_default());

    let dir = tempfile::tempdir()?;
    let (dialogs, features) = (dir.path().join("train.json"), dir.path().join("features"));
    save_corpus(&corpus, &dialogs, &features)?;
    let back = load_corpus(&dialogs, &features, Split::Train)?;
    println!("round trip equal: {}", back == corpus);
    Ok(())
}
