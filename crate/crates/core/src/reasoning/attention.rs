//! Evidence regions from the moments of decoder source attention.

use crate::data::TimeRegion;
use crate::model::DecoderState;
use crate::tensor::Matrix;

/// Source-attention maps of one modality. Each map is one (layer, head)
/// slice: rows are answer positions, columns are source frames, and frame
/// `f` sits at time `f · frame_period`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityTrace {
    pub frame_period: f64,
    pub maps: Vec<Matrix>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub modalities: Vec<ModalityTrace>,
}

impl AttentionTrace {
    /// Collect audio and visual source attention of `state` at rows `positions`.
    pub fn from_state(state: &DecoderState, positions: &[usize], audio_period: f64, visual_period: f64) -> Self {
        let periods = [audio_period, visual_period];
        let modalities = periods
            .iter()
            .enumerate()
            .map(|(m, &frame_period)| ModalityTrace {
                frame_period,
                maps: state
                    .source_attention
                    .iter()
                    .flat_map(|layer| layer[m].iter().map(|head| head.select_rows(positions)))
                    .collect(),
            })
            .collect();
        Self { modalities }
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.iter().all(|m| m.maps.iter().all(|x| x.rows() == 0))
    }
}

/// Mean and standard deviation of the equal-weight mixture of every attention
/// row in the trace, each row a distribution over its modality's frame times.
///
/// Frame times are used natively rather than resampled to a shared grid, so
/// the moments are exact.
pub fn attention_moments(trace: &AttentionTrace) -> Option<(f64, f64)> {
    let (mut rows, mut first, mut second) = (0usize, 0.0, 0.0);
    for m in &trace.modalities {
        for map in &m.maps {
            for r in 0..map.rows() {
                let row = map.row(r);
                let total: f64 = row.iter().sum();
                if total <= 0.0 {
                    continue;
                }
                let (mut e1, mut e2) = (0.0, 0.0);
                for (f, &w) in row.iter().enumerate() {
                    let t = f as f64 * m.frame_period;
                    e1 += w * t;
                    e2 += w * t * t;
                }
                first += e1 / total;
                second += e2 / total;
                rows += 1;
            }
        }
    }
    if rows == 0 {
        return None;
    }
    let mu = first / rows as f64;
    let var = (second / rows as f64 - mu * mu).max(0.0);
    Some((mu, var.sqrt()))
}

/// `[μ − νσ, μ + νσ]` clamped to `[0, duration]`. An empty trace yields the
/// whole video.
pub fn attention_region(trace: &AttentionTrace, nu: f64, duration: f64) -> TimeRegion {
    match attention_moments(trace) {
        Some((mu, sigma)) => {
            let start = (mu - nu * sigma).clamp(0.0, duration);
            let end = (mu + nu * sigma).clamp(start, duration);
            TimeRegion::new(start, end)
        }
        None => TimeRegion::new(0.0, duration),
    }
}

/// Mean of the final-layer decoder states.
pub fn pool_qa_embedding(state: &DecoderState) -> Vec<f64> {
    let last = state.layers.last().expect("decoder state has layers");
    let n = last.rows().max(1) as f64;
    last.column_sums().into_iter().map(|v| v / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(row: Vec<f64>, period: f64) -> AttentionTrace {
        let n = row.len();
        AttentionTrace {
            modalities: vec![ModalityTrace {
                frame_period: period,
                maps: vec![Matrix::from_vec(1, n, row)],
            }],
        }
    }

    #[test]
    fn point_mass() {
        let mut row = vec![0.0; 10];
        row[5] = 1.0;
        let r = attention_region(&single(row, 1.0), 1.0, 10.0);
        assert_eq!((r.start, r.end), (5.0, 5.0));
    }

    #[test]
    fn uniform_over_ten_frames() {
        let (mu, sigma) = attention_moments(&single(vec![0.1; 10], 1.0)).unwrap();
        assert!((mu - 4.5).abs() < 1e-12);
        assert!((sigma - 8.25f64.sqrt()).abs() < 1e-12);
        let r = attention_region(&single(vec![0.1; 10], 1.0), 1.0, 10.0);
        assert!((r.start - 1.6277).abs() < 1e-4 && (r.end - 7.3723).abs() < 1e-4);
    }

    #[test]
    fn clamps_to_the_video() {
        // μ = 1, σ = 1 and ν = 3 put the raw interval at [−2, 4].
        let t = single(vec![0.5, 0.0, 0.5], 1.0);
        let (mu, sigma) = attention_moments(&t).unwrap();
        assert!((mu - 1.0).abs() < 1e-12 && (sigma - 1.0).abs() < 1e-12);
        let r = attention_region(&t, 3.0, 10.0);
        assert_eq!((r.start, r.end), (0.0, 4.0));
    }
}
