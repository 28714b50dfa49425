#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Runs the CLI in-process against `root` with a config small enough to
/// finish in seconds.
pub fn avsd(root: &Path, args: &[&str]) -> i32 {
    let mut argv: Vec<String> = vec!["avsd".into(), "--seed".into(), "5".into()];
    for o in tiny_overrides(root) {
        argv.push("--override".into());
        argv.push(o);
    }
    argv.extend(args.iter().map(|s| s.to_string()));
    avsd::cli::run(argv)
}

pub fn tiny_overrides(root: &Path) -> Vec<String> {
    vec![
        format!("paths.root={:?}", root.display().to_string()),
        "synth.num_videos=10".into(),
        "split.train=5".into(),
        "split.validation=2".into(),
        "training.epochs=2".into(),
        "reasoning.rpn_epochs=2".into(),
        "reasoning.kernel_sizes=[1, 3, 5]".into(),
        "reasoning.rpn_width=8".into(),
    ]
}

/// The whole pipeline, in the order a user would run it.
pub fn full_pipeline(root: &Path) {
    let ck = |n: &str| root.join("checkpoints").join(format!("{n}.json")).display().to_string();
    let out = |n: &str| root.join("outputs").join(n).display().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["synth".into()],
        vec!["train".into(), "--role".into(), "teacher".into()],
        vec!["train".into(), "--role".into(), "student-jstl".into()],
        vec!["train".into(), "--role".into(), "plain".into()],
        vec!["train-rpn".into()],
        vec!["generate".into(), "--checkpoint".into(), ck("student_jstl"), "--checkpoint".into(), ck("plain")],
        vec!["reason".into(), "--method".into(), "attention".into()],
        vec!["reason".into(), "--method".into(), "rpn".into(), "--answers".into(), out("answers_test.json")],
        vec![
            "evaluate".into(),
            "--answers".into(),
            out("answers_test.json"),
            "--reasons".into(),
            out("reasons_rpn_test.json"),
        ],
    ];
    for s in steps {
        let args: Vec<&str> = s.iter().map(String::as_str).collect();
        assert_eq!(avsd(root, &args), 0, "step {s:?} failed");
    }
}

/// Relative path to file contents for everything under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
