//! Beam search against brute force on a toy next-word model, and the log
//! domain ensemble of two distributions.

use avsd::generation::{beam_search, ensemble_next_distribution, greedy_decode, Ensemble, SearchConfig};
use avsd::verify::{exhaustive_best, TableModel};

fn main() -> avsd::Result<()> {
    let m = TableModel { vocab: 4, seed: 9 };
    let cfg = SearchConfig {
        beam: 3,
        max_len: 3,
        length_normalize: true,
    };
    for h in beam_search(&m, &cfg)? {
        println!("{:?}  log p {:.3}  score {:.3}  finished {}", h.tokens, h.log_prob, h.score(true), h.finished);
    }
    println!("greedy      {:?}", greedy_decode(&m, 3)?);
    println!("brute force {:?}", exhaustive_best(&m, 3, true)?);

    let other = TableModel { vocab: 4, seed: 10 };
    let pair = Ensemble::new(vec![&m, &other])?;
    println!("ensemble    {:?}", beam_search(&pair, &cfg)?[0].tokens);
    println!(
        "geometric mean of [0.7, 0.2, 0.1] and [0.1, 0.2, 0.7]: {:?}",
        ensemble_next_distribution(&[0.7, 0.2, 0.1], &[0.1, 0.2, 0.7])?
    );
    Ok(())
}
