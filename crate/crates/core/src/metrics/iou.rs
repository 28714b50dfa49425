//! Overlap between predicted and ground-truth time regions.

use std::collections::BTreeSet;

use crate::data::TimeRegion;

/// `|a ∩ b| / |a ∪ b|` on the real line. Two identical points score 1; any
/// other pair with a zero-measure union scores 0.
pub fn iou_interval(a: &TimeRegion, b: &TimeRegion) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return if a.start == b.start && a.end == b.end { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Best-match IoU of each ground-truth region, averaged over ground truths.
/// No predictions (or no ground truth) gives 0.
pub fn iou1(predicted: &[TimeRegion], ground_truth: &[TimeRegion]) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let total: f64 = ground_truth
        .iter()
        .map(|g| predicted.iter().map(|p| iou_interval(p, g)).fold(0.0, f64::max))
        .sum();
    total / ground_truth.len() as f64
}

/// Indices of frames whose centers `f·period + period/2` fall inside any region.
pub fn covered_frames(regions: &[TimeRegion], frame_period: f64) -> BTreeSet<usize> {
    let mut frames = BTreeSet::new();
    for r in regions {
        if r.end < 0.0 {
            continue;
        }
        let first = ((r.start / frame_period) - 0.5).ceil().max(0.0) as usize;
        let mut f = first.saturating_sub(1);
        loop {
            let c = f as f64 * frame_period + frame_period / 2.0;
            if c > r.end {
                break;
            }
            if c >= r.start {
                frames.insert(f);
            }
            f += 1;
        }
    }
    frames
}

/// Frame-level set IoU. When neither side covers any frame the score is 1 if
/// the two region lists are identical, else 0.
pub fn iou2(predicted: &[TimeRegion], ground_truth: &[TimeRegion], frame_period: f64) -> f64 {
    assert!(frame_period > 0.0, "frame period must be positive");
    let p = covered_frames(predicted, frame_period);
    let g = covered_frames(ground_truth, frame_period);
    let union = p.union(&g).count();
    if union == 0 {
        return if predicted == ground_truth { 1.0 } else { 0.0 };
    }
    p.intersection(&g).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: f64, e: f64) -> TimeRegion {
        TimeRegion::new(s, e)
    }

    #[test]
    fn interval_examples() {
        assert!((iou_interval(&r(2.0, 6.0), &r(4.0, 8.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_interval(&r(1.0, 2.0), &r(1.0, 2.0)), 1.0);
        assert_eq!(iou_interval(&r(0.0, 1.0), &r(2.0, 3.0)), 0.0);
        assert_eq!(iou_interval(&r(3.0, 3.0), &r(3.0, 3.0)), 1.0);
        assert_eq!(iou_interval(&r(3.0, 3.0), &r(4.0, 4.0)), 0.0);
    }

    #[test]
    fn iou1_examples() {
        let gt = [r(0.0, 4.0), r(6.0, 10.0)];
        assert!((iou1(&[r(1.0, 5.0), r(6.0, 8.0)], &gt) - 0.55).abs() < 1e-15);
        assert_eq!(iou1(&gt, &gt), 1.0);
        assert_eq!(iou1(&[], &gt), 0.0);
    }

    #[test]
    fn iou2_counts_frame_sets() {
        // GT covers frames 0..=4, the prediction 2..=6.
        let s = iou2(&[r(2.0, 7.0)], &[r(0.0, 5.0)], 1.0);
        assert!((s - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou2(&[r(1.0, 3.0)], &[r(1.0, 3.0)], 0.5), 1.0);
        assert_eq!(covered_frames(&[r(0.5, 0.5)], 1.0), BTreeSet::from([0]));
    }
}
