mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use avsd::data::{detokenize, Split, Vocabulary};
use avsd::generation::AnswerFile;
use avsd::model::{write_json, AvsdModel};
use avsd::reasoning::ReasonFile;
use common::avsd;
use tempfile::TempDir;

/// One finished pipeline shared by every test in this file.
fn pipeline() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        common::full_pipeline(d.path());
        d
    })
    .path()
}

fn ck(root: &Path, name: &str) -> String {
    root.join("checkpoints").join(format!("{name}.json")).display().to_string()
}

fn out(root: &Path, name: &str) -> PathBuf {
    root.join("outputs").join(name)
}

fn read<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// The real binary, for checks on stderr.
fn binary(args: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_avsd")).args(args).output().unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

#[test]
fn synth_writes_every_split_and_repeats_exactly() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(avsd(a.path(), &["synth"]), 0);
    assert_eq!(avsd(b.path(), &["synth"]), 0);
    for split in ["train", "validation", "test"] {
        assert!(a.path().join("data").join(format!("{split}.json")).is_file());
    }
    assert_eq!(common::snapshot(a.path()), common::snapshot(b.path()));
}

#[test]
fn missing_required_field_exits_2_and_names_it() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    let text = avsd::config::RunConfig::default().to_toml();
    let kept: String = text.lines().filter(|l| !l.starts_with("seed")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&cfg, kept).unwrap();
    let (code, err) = binary(&["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(code, 2);
    assert!(err.contains("seed"), "{err}");
}

#[test]
fn shipped_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    let cfg = avsd::config::RunConfig::load(&path, &[]).unwrap();
    assert_eq!(cfg, avsd::config::RunConfig::default());
}

#[test]
fn unwritable_root_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let file = d.path().join("occupied");
    std::fs::write(&file, "x").unwrap();
    assert_eq!(avsd(&file.join("run"), &["synth"]), 2);
}

#[test]
fn unknown_subcommand_and_bad_override_exit_2() {
    assert_eq!(binary(&["fly"]).0, 2);
    assert_eq!(binary(&["--override", "model.decoder.heads=0", "synth"]).0, 2);
    assert_eq!(binary(&["--override", "no_equals_sign", "synth"]).0, 2);
}

#[test]
fn joint_training_without_teacher_exits_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(avsd(d.path(), &["synth"]), 0);
    assert_eq!(avsd(d.path(), &["train", "--role", "student-jstl"]), 2);
}

#[test]
fn zero_lambda_zeroes_the_state_term() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    for (f, t) in ["data", "checkpoints"].iter().map(|s| (pipeline().join(s), root.join(s))) {
        copy_dir(&f, &t);
    }
    let mut args: Vec<String> = vec!["avsd".into(), "--seed".into(), "5".into()];
    for o in common::tiny_overrides(root).into_iter().chain(["training.lambda_c=0".to_string()]) {
        args.extend(["--override".to_string(), o]);
    }
    args.extend(["train", "--role", "student-jstl"].map(String::from));
    assert_eq!(avsd::cli::run(args), 0);
    let log = std::fs::read_to_string(root.join("logs/student_jstl.jsonl")).unwrap();
    for l in log.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["mse"], 0.0, "{l}");
    }
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let p = e.unwrap().path();
        let dest = to.join(p.file_name().unwrap());
        if p.is_dir() {
            copy_dir(&p, &dest);
        } else {
            std::fs::copy(&p, &dest).unwrap();
        }
    }
}

#[test]
fn retraining_with_the_same_seed_repeats_the_log() {
    let root = pipeline();
    let d = tempfile::tempdir().unwrap();
    copy_dir(&root.join("data"), &d.path().join("data"));
    assert_eq!(avsd(d.path(), &["train", "--role", "plain"]), 0);
    assert_eq!(
        std::fs::read(root.join("logs/plain.jsonl")).unwrap(),
        std::fs::read(d.path().join("logs/plain.jsonl")).unwrap()
    );
}

#[test]
fn duplicate_checkpoint_matches_single_and_beam_one_matches_greedy() {
    let root = pipeline();
    let d = tempfile::tempdir().unwrap();
    let p = |n: &str| d.path().join(n).display().to_string();
    let plain = ck(root, "plain");
    let g = |extra: &[&str], o: &str| {
        let mut a = vec!["generate", "--checkpoint", &plain];
        a.extend_from_slice(extra);
        a.extend(["--output", o]);
        assert_eq!(avsd(root, &a), 0);
        read::<AnswerFile>(Path::new(o))
    };
    let (one, two) = (p("one.json"), p("two.json"));
    assert_eq!(g(&[], &one), g(&["--checkpoint", &plain], &two));

    let beam1 = g(&["--beam", "1"], &p("b1.json"));
    let model = AvsdModel::load(Path::new(&plain)).unwrap();
    let corpus = avsd::cli::Layout::new(root).corpus(Split::Test).unwrap();
    let policy = avsd::data::HistoryPolicy::PreviousQuestionOnly;
    for s in &corpus.samples {
        let streams = model.encode(corpus.features_for(s).unwrap(), None).unwrap();
        for t in 0..s.turns.len() {
            let ctx = avsd::data::build_decoder_context(s, t, policy).unwrap();
            let cond = avsd::generation::Conditioned {
                model: &model,
                streams: streams.clone(),
                context: model.vocab.encode(&ctx),
            };
            let ids = avsd::generation::greedy_decode(&cond, avsd::generation::SearchConfig::default().max_len).unwrap();
            let words = model.vocab.decode(&ids);
            assert_eq!(beam1[&s.video_id][&t], detokenize(&words));
        }
    }
}

#[test]
fn mismatched_vocabularies_exit_2() {
    let root = pipeline();
    let d = tempfile::tempdir().unwrap();
    let plain = AvsdModel::load(Path::new(&ck(root, "plain"))).unwrap();
    let other = AvsdModel::new(plain.config.clone(), Vocabulary::from_words(["only"]), 1).unwrap();
    let path = d.path().join("other.json");
    other.save(&path).unwrap();
    let o = d.path().join("a.json").display().to_string();
    let args = ["generate", "--checkpoint", &ck(root, "plain"), "--checkpoint", path.to_str().unwrap(), "--output", &o];
    assert_eq!(avsd(root, &args), 2);
}

#[test]
fn attention_reasoning_gives_one_region_per_turn() {
    let r: ReasonFile = read(&out(pipeline(), "reasons_attention_test.json"));
    assert!(!r.is_empty());
    for turns in r.values() {
        assert!(turns.values().all(|v| v.len() == 1));
    }
}

#[test]
fn rpn_threshold_above_one_keeps_nothing_and_missing_rpn_exits_2() {
    let root = pipeline();
    let d = tempfile::tempdir().unwrap();
    let o = d.path().join("r.json");
    let mut args: Vec<String> = vec!["avsd".into(), "--seed".into(), "5".into()];
    for ov in common::tiny_overrides(root).into_iter().chain(["reasoning.confidence_threshold=1.01".to_string()]) {
        args.extend(["--override".to_string(), ov]);
    }
    args.extend(["reason", "--method", "rpn", "--output", o.to_str().unwrap()].map(String::from));
    assert_eq!(avsd::cli::run(args), 0);
    let r: ReasonFile = read(&o);
    assert!(r.values().flat_map(|t| t.values()).all(Vec::is_empty));

    let missing = d.path().join("nothing.json").display().to_string();
    assert_eq!(avsd(root, &["reason", "--method", "rpn", "--rpn", &missing]), 2);
}

#[test]
fn reference_answers_score_one_and_empty_reasons_score_zero() {
    let root = pipeline();
    let d = tempfile::tempdir().unwrap();
    let corpus = avsd::cli::Layout::new(root).corpus(Split::Test).unwrap();
    let mut answers = AnswerFile::new();
    let mut reasons = ReasonFile::new();
    for s in &corpus.samples {
        for (t, turn) in s.turns.iter().enumerate() {
            answers.entry(s.video_id.clone()).or_default().insert(t, turn.answer.join(" "));
            reasons.entry(s.video_id.clone()).or_default().insert(t, Vec::new());
        }
    }
    let (a, r, o) = (d.path().join("a.json"), d.path().join("r.json"), d.path().join("s.json"));
    write_json(&a, &answers).unwrap();
    write_json(&r, &reasons).unwrap();
    let args = ["evaluate", "--answers", a.to_str().unwrap(), "--reasons", r.to_str().unwrap(), "--output", o.to_str().unwrap()];
    assert_eq!(avsd(root, &args), 0);
    let report: serde_json::Value = read(&o);
    assert!((report["corpus"]["BLEU4"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(report["corpus"]["IoU-1"], 0.0);
    assert_eq!(report["corpus"]["IoU-2"], 0.0);
    assert_eq!(report["unavailable"][0], "METEOR");
}

#[test]
fn missing_ids_exit_2_and_are_listed() {
    let root = pipeline();
    let d = tempfile::tempdir().unwrap();
    let mut answers: AnswerFile = read(&out(root, "answers_test.json"));
    let dropped = answers.keys().next().unwrap().clone();
    answers.remove(&dropped);
    let a = d.path().join("a.json");
    write_json(&a, &answers).unwrap();
    let cfg = d.path().join("run.toml");
    let mut text = avsd::config::RunConfig::default().to_toml();
    text = text.replace("root = \"run\"", &format!("root = {:?}", root.display().to_string()));
    std::fs::write(&cfg, text).unwrap();
    let (code, err) = binary(&["--config", cfg.to_str().unwrap(), "evaluate", "--answers", a.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains(&dropped), "{err}");
}
