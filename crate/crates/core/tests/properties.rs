use avsd::data::{
    build_decoder_context, build_vocabulary, generate_synthetic_corpus, load_corpus, save_corpus, HistoryPolicy,
    Split, SynthSpec, TimeRegion,
};
use avsd::decoder::FusionMode;
use avsd::encoder::Encoder;
use avsd::generation::{beam_search, SearchConfig};
use avsd::metrics::{bleu4, cider_d, iou1, iou2, iou_interval, rouge_l};
use avsd::model::{AvsdModel, ModelConfig};
use avsd::reasoning::{attention_region, filter_proposals, AttentionTrace, ModalityTrace, RegionProposal};
use avsd::training::{fit, student_teacher_loss, Role, TrainingConfig};
use avsd::verify::{gradcheck_config, gradcheck_corpus, TableModel};
use avsd::Matrix;
use proptest::prelude::*;

fn region() -> impl Strategy<Value = TimeRegion> {
    (0.0..10.0f64, 0.0..10.0f64).prop_map(|(a, b)| TimeRegion::new(a.min(b), a.max(b)))
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 1..8)
        .prop_map(|w| w.into_iter().map(String::from).collect())
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..1.0f64, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interval_iou_is_symmetric(a in region(), b in region()) {
        prop_assert_eq!(iou_interval(&a, &b), iou_interval(&b, &a));
    }

    #[test]
    fn region_metrics_stay_in_unit_range(p in prop::collection::vec(region(), 0..4), g in prop::collection::vec(region(), 0..4)) {
        for v in [iou1(&p, &g), iou2(&p, &g, 0.5)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn adding_a_ground_truth_region_never_lowers_iou1(p in prop::collection::vec(region(), 0..4), g in prop::collection::vec(region(), 1..4), k in 0usize..4) {
        let mut more = p.clone();
        more.push(g[k % g.len()]);
        prop_assert!(iou1(&more, &g) >= iou1(&p, &g));
    }

    #[test]
    fn text_metrics_are_bounded_and_order_free(pairs in prop::collection::vec((words(), prop::collection::vec(words(), 1..3)), 2..6)) {
        let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let (rc, rr): (Vec<_>, Vec<_>) = pairs.into_iter().rev().unzip();
        let (b, l, d) = (bleu4(&c, &r).unwrap(), rouge_l(&c, &r).unwrap(), cider_d(&c, &r).unwrap());
        prop_assert!((0.0..=1.0).contains(&b) && (0.0..=1.0).contains(&l) && d >= 0.0);
        prop_assert!((b - bleu4(&rc, &rr).unwrap()).abs() < 1e-12);
        prop_assert!((l - rouge_l(&rc, &rr).unwrap()).abs() < 1e-12);
        prop_assert!((d - cider_d(&rc, &rr).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn filtered_proposals_are_a_spread_out_subset(raw in prop::collection::vec((region(), -3.0..3.0f64), 0..12)) {
        let props: Vec<RegionProposal> = raw
            .iter()
            .map(|&(region, logit)| RegionProposal { region, modality: 0, kernel: 1, frame: 0, period: 0.5, delta_c: 0.0, delta_l: 0.0, logit })
            .collect();
        let kept = filter_proposals(&props, 0.3, 0.5);
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(props.iter().any(|p| p.region.start == a.start && p.region.end == a.end));
            for b in &kept[i + 1..] {
                prop_assert!(iou_interval(a, b) < 0.5);
            }
        }
    }

    #[test]
    fn soft_target_loss_dominates_teacher_entropy(pairs in prop::collection::vec((distribution(5), distribution(5)), 1..4)) {
        let (t, s): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let entropy: f64 = t.iter().flatten().map(|p| -p * p.ln()).sum();
        prop_assert!(student_teacher_loss(&t, &s).unwrap() >= entropy - 1e-8);
    }

    #[test]
    fn beam_scores_fall_with_rank_and_length(seed in 0u64..1000, beam in 1usize..6) {
        let m = TableModel { vocab: 5, seed };
        for normalize in [true, false] {
            let hyps = beam_search(&m, &SearchConfig { beam, max_len: 4, length_normalize: normalize }).unwrap();
            for w in hyps.windows(2) {
                prop_assert!(w[0].score(normalize) >= w[1].score(normalize));
            }
            for h in &hyps {
                // Every prefix scores at least as high as the whole.
                let mut total = 0.0;
                for (i, &t) in h.tokens.iter().enumerate() {
                    let lp = avsd::generation::NextWordModel::log_probs(&m, &h.tokens[..i]).unwrap()[t];
                    prop_assert!(total + lp <= total);
                    total += lp;
                }
                prop_assert!((total - h.log_prob).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_region_moves_with_the_mass(shift in 0usize..6, spread in 1usize..4) {
        let frames = 20;
        let trace = |offset: usize| {
            let mut m = Matrix::zeros(2, frames);
            for r in 0..2 {
                for f in 0..spread {
                    m.set(r, 5 + offset + f + r, 1.0 / spread as f64);
                }
            }
            AttentionTrace { modalities: vec![ModalityTrace { frame_period: 0.5, maps: vec![m] }] }
        };
        let (a, b) = (attention_region(&trace(0), 1.0, 10.0), attention_region(&trace(shift), 1.0, 10.0));
        let delta = shift as f64 * 0.5;
        prop_assert!((b.start - a.start - delta).abs() < 1e-9 && (b.end - a.end - delta).abs() < 1e-9);

        // Scaling every row by a shared constant and renormalizing changes nothing.
        let mut scaled = trace(shift);
        for m in &mut scaled.modalities[0].maps {
            for r in 0..m.rows() {
                let z: f64 = m.row(r).iter().map(|v| v * 3.0).sum();
                for c in 0..m.cols() {
                    m.set(r, c, m.get(r, c) * 3.0 / z);
                }
            }
        }
        let c = attention_region(&scaled, 1.0, 10.0);
        prop_assert!((c.start - b.start).abs() < 1e-12 && (c.end - b.end).abs() < 1e-12);
    }
}

#[test]
fn corpus_survives_a_disk_round_trip() {
    let spec = SynthSpec {
        num_videos: 6,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, 4).unwrap();
    let d = tempfile::tempdir().unwrap();
    let (dialogs, feats) = (d.path().join("train.json"), d.path().join("features"));
    save_corpus(&corpus, &dialogs, &feats).unwrap();
    let back = load_corpus(&dialogs, &feats, Split::Train).unwrap();
    assert_eq!(back, corpus);
}

#[test]
fn question_only_context_is_question_plus_start() {
    let corpus = generate_synthetic_corpus(&SynthSpec::default(), 2).unwrap();
    for s in &corpus.samples {
        for (t, turn) in s.turns.iter().enumerate() {
            let ctx = build_decoder_context(s, t, HistoryPolicy::PreviousQuestionOnly).unwrap();
            assert_eq!(ctx.len(), turn.question.len() + 1);
        }
    }
    let v1 = build_vocabulary(&corpus, 1);
    let v2 = build_vocabulary(&corpus, 1);
    for (i, tok) in avsd::data::RESERVED.iter().enumerate() {
        assert_eq!((v1.id(tok), v2.id(tok)), (i, i));
    }
}

#[test]
fn encoder_block_is_time_equivariant_without_positions() {
    let mut cfg = gradcheck_config(FusionMode::Concat);
    cfg.encoder.positional = false;
    let corpus = gradcheck_corpus(3);
    let model = AvsdModel::new(cfg, build_vocabulary(&corpus, 1), 3).unwrap();
    let enc = Encoder {
        cfg: &model.config.encoder,
        layout: &model.layout.encoder,
        params: &model.params,
    };
    let fs = &corpus.features["grad"];
    let (a, v) = enc.project_features(&fs.audio, &fs.visual).unwrap();
    let perm = [2, 0, 3, 1];
    let (ao, vo) = enc.block(0, &a, &v).unwrap();
    let (ap, vp) = enc.block(0, &a.select_rows(&perm), &v).unwrap();
    assert!(ap.max_abs_diff(&ao.select_rows(&perm)) < 1e-12);
    assert!(vp.max_abs_diff(&vo) < 1e-12);
}

#[test]
fn forward_pass_is_bitwise_repeatable_and_argmax_ignores_logit_offsets() {
    let corpus = gradcheck_corpus(8);
    let model = AvsdModel::new(gradcheck_config(FusionMode::Attentional), build_vocabulary(&corpus, 1), 8).unwrap();
    let fs = &corpus.features["grad"];
    let s1 = model.encode(fs, None).unwrap();
    let s2 = model.encode(fs, None).unwrap();
    assert_eq!(s1, s2);
    let ids = [4, 5, 6, 7, 1];
    let l1 = model.next_logits(&ids, &s1).unwrap();
    assert_eq!(l1, model.next_logits(&ids, &s2).unwrap());
    let argmax = |v: &[f64]| avsd::tensor::argmax(v);
    let shifted: Vec<f64> = l1.iter().map(|x| x + 17.5).collect();
    assert_eq!(argmax(&l1), argmax(&shifted));
}

#[test]
fn frozen_teacher_with_zero_lambda_does_not_move() {
    let corpus = gradcheck_corpus(5);
    let vocab = build_vocabulary(&corpus, 1);
    let cfg = gradcheck_config(FusionMode::Concat);
    let mut teacher = AvsdModel::new(cfg.with_caption(true), vocab.clone(), 5).unwrap();
    let before = teacher.params.clone();
    let mut student = AvsdModel::new(cfg, vocab, 6).unwrap();
    let student_before = student.params.clone();
    let tc = TrainingConfig {
        epochs: 1,
        role: Role::StudentJstl,
        lambda_c: 0.0,
        freeze_teacher: true,
        ..TrainingConfig::default()
    };
    let empty = corpus.subset(0..0, Split::Validation);
    fit(&mut student, Some(&mut teacher), &corpus, &empty, &tc, 5).unwrap();
    assert_eq!(teacher.params, before);
    assert_ne!(student.params, student_before);
}

#[test]
fn training_loss_falls_every_epoch_at_first() {
    let spec = SynthSpec::default();
    let corpus = generate_synthetic_corpus(&spec, 3).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.encoder.input_a = spec.d_a;
    cfg.encoder.input_v = spec.d_v;
    let mut model = AvsdModel::new(cfg, build_vocabulary(&corpus, 1), 3).unwrap();
    let tc = TrainingConfig {
        epochs: 5,
        ..TrainingConfig::default()
    };
    let empty = corpus.subset(0..0, Split::Validation);
    let out = fit(&mut model, None, &corpus, &empty, &tc, 3).unwrap();
    for w in out.log.windows(2) {
        assert!(w[1].ce < w[0].ce, "{:?}", out.log);
    }
    for m in &out.log {
        assert!((m.train_loss - m.ce).abs() < 1e-8);
    }
}
