//! Command-line surface. Every command reads one [`RunConfig`] and works
//! inside its root directory:
//!
//! ```text
//! <root>/data/{train,validation,test}.json   dialogs
//! <root>/data/features/                      feature containers
//! <root>/checkpoints/<name>.json             dialog models and the RPN
//! <root>/logs/<name>.jsonl                   per-epoch metrics
//! <root>/outputs/                            answers, reasons, scores
//! ```

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::{build_vocabulary, generate_synthetic_corpus, load_corpus, save_corpus, Corpus, Split};
use crate::error::{Error, Result};
use crate::generation::{generate_answers, AnswerFile};
use crate::metrics::evaluate;
use crate::model::{write_json, AvsdModel};
use crate::reasoning::{reason_corpus, rpn_dims, rpn_examples, train_rpn, ReasonFile, ReasoningMethod, RpnModel};
use crate::training::{fit, metrics_jsonl, Role};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "avsd", version, about = "Audio-visual scene-aware dialog: train, answer, localize, score")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces `seed` from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key.path=value`, applied in order after loading the configuration.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Teacher,
    StudentJstl,
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Attention,
    Rpn,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with planted evidence.
    Synth,
    /// Train a dialog model. `student-jstl` needs a trained teacher.
    Train {
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Teacher checkpoint for joint training.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train the region proposal network on top of a frozen dialog model.
    TrainRpn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Beam-search answers for one split; two checkpoints are ensembled.
    Generate {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Predict evidence regions for every turn of one split.
    Reason {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        rpn: Option<PathBuf>,
        /// Generated answers to reason about; references are used otherwise.
        #[arg(long)]
        answers: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score answers and regions against a split's references.
    Evaluate {
        #[arg(long)]
        answers: Option<PathBuf>,
        #[arg(long)]
        reasons: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Gradient checks, oracle equivalences and invariants.
    Verify,
}

/// Paths inside a run root.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dialogs(&self, split: Split) -> PathBuf {
        let name = match split {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        };
        self.root.join("data").join(format!("{name}.json"))
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("data").join("features")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.json"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.jsonl"))
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.root.join("outputs").join(name)
    }

    pub fn corpus(&self, split: Split) -> Result<Corpus> {
        load_corpus(&self.dialogs(split), &self.features(), split)
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Teacher => "teacher",
        Role::StudentJstl => "student_jstl",
        Role::Plain => "plain",
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found at {}", path.display())))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let corpus = generate_synthetic_corpus(&cfg.synth, cfg.seed)?;
    let (train, val, test) = corpus.partition(cfg.split.train, cfg.split.validation);
    let mut written = Vec::new();
    for part in [&train, &val, &test] {
        let path = layout.dialogs(part.split);
        save_corpus(part, &path, &layout.features())?;
        written.push(path);
    }
    Ok(written)
}

/// Train one model; returns the checkpoint path.
pub fn cmd_train(cfg: &RunConfig, layout: &Layout, role: Role, teacher: Option<&Path>) -> Result<PathBuf> {
    let teacher_path = teacher.map_or_else(|| layout.checkpoint("teacher"), Path::to_path_buf);
    if role == Role::StudentJstl {
        require(&teacher_path, "teacher checkpoint")?;
    }
    let train = layout.corpus(Split::Train)?;
    let val = layout.corpus(Split::Validation)?;
    let mut training = cfg.training.clone();
    training.role = role;
    let (model_cfg, mut teacher_model) = match role {
        Role::Teacher => (cfg.model.with_caption(true), None),
        Role::Plain => (cfg.model.with_caption(false), None),
        Role::StudentJstl => {
            let t = AvsdModel::load(&teacher_path)?;
            if !t.uses_caption() {
                return Err(Error::Config(format!("{} is not a caption-reading teacher", teacher_path.display())));
            }
            (cfg.model.with_caption(false), Some(t))
        }
    };
    let vocab = match &teacher_model {
        Some(t) => t.vocab.clone(),
        None => build_vocabulary(&train, 1),
    };
    let mut model = AvsdModel::new(model_cfg, vocab, cfg.seed)?;
    let outcome = fit(&mut model, teacher_model.as_mut(), &train, &val, &training, cfg.seed)?;
    let name = role_name(role);
    write_text(&layout.log(name), &metrics_jsonl(&outcome.log))?;
    let path = layout.checkpoint(name);
    model.save(&path)?;
    if let Some(t) = teacher_model {
        t.save(&layout.checkpoint("teacher_joint"))?;
    }
    Ok(path)
}

pub fn cmd_train_rpn(cfg: &RunConfig, layout: &Layout, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let path = checkpoint.map_or_else(|| layout.checkpoint("student_jstl"), Path::to_path_buf);
    require(&path, "dialog model checkpoint")?;
    let model = AvsdModel::load(&path)?;
    let train = layout.corpus(Split::Train)?;
    let examples = rpn_examples(&model, &train, cfg.training.history_policy)?;
    let mut rpn = RpnModel::new(cfg.reasoning.clone(), rpn_dims(&model), cfg.seed)?;
    let log = train_rpn(&mut rpn, &examples, cfg.seed)?;
    let lines: String = log
        .iter()
        .map(|e| serde_json::to_string(e).expect("rpn log serializes") + "\n")
        .collect();
    write_text(&layout.log("rpn"), &lines)?;
    let out = layout.checkpoint("rpn");
    rpn.save(&out)?;
    Ok(out)
}

pub fn cmd_generate(
    cfg: &RunConfig,
    layout: &Layout,
    checkpoints: &[PathBuf],
    beam: Option<usize>,
    split: Split,
    output: Option<&Path>,
) -> Result<PathBuf> {
    if checkpoints.is_empty() || checkpoints.len() > 2 {
        return Err(Error::Config("generate takes one or two checkpoints".into()));
    }
    for c in checkpoints {
        require(c, "checkpoint")?;
    }
    let models = checkpoints.iter().map(|c| AvsdModel::load(c)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&AvsdModel> = models.iter().collect();
    let mut search = cfg.generation;
    if let Some(b) = beam {
        search.beam = b;
    }
    search.validate()?;
    let corpus = layout.corpus(split)?;
    let answers = generate_answers(&refs, &corpus, cfg.training.history_policy, &search)?;
    let path = output.map_or_else(
        || layout.output(&format!("answers_{}.json", split_name(split))),
        Path::to_path_buf,
    );
    write_json(&path, &answers)?;
    Ok(path)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_reason(
    cfg: &RunConfig,
    layout: &Layout,
    method: ReasoningMethod,
    checkpoint: Option<&Path>,
    rpn: Option<&Path>,
    answers: Option<&Path>,
    split: Split,
    output: Option<&Path>,
) -> Result<PathBuf> {
    let model_path = checkpoint.map_or_else(|| layout.checkpoint("student_jstl"), Path::to_path_buf);
    require(&model_path, "dialog model checkpoint")?;
    let rpn_model = match method {
        ReasoningMethod::Rpn => {
            let p = rpn.map_or_else(|| layout.checkpoint("rpn"), Path::to_path_buf);
            require(&p, "RPN checkpoint")?;
            Some(RpnModel::load(&p)?)
        }
        ReasoningMethod::Attention => None,
    };
    let model = AvsdModel::load(&model_path)?;
    let answer_file: Option<AnswerFile> = answers.map(read_json).transpose()?;
    let corpus = layout.corpus(split)?;
    let reasons = reason_corpus(
        &model,
        rpn_model.as_ref(),
        &corpus,
        cfg.training.history_policy,
        answer_file.as_ref(),
        method,
        &cfg.reasoning,
    )?;
    let name = match method {
        ReasoningMethod::Attention => "attention",
        ReasoningMethod::Rpn => "rpn",
    };
    let path = output.map_or_else(
        || layout.output(&format!("reasons_{name}_{}.json", split_name(split))),
        Path::to_path_buf,
    );
    write_json(&path, &reasons)?;
    Ok(path)
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    layout: &Layout,
    answers: Option<&Path>,
    reasons: Option<&Path>,
    split: Split,
    output: Option<&Path>,
) -> Result<(PathBuf, String)> {
    if answers.is_none() && reasons.is_none() {
        return Err(Error::Config("evaluate needs --answers, --reasons or both".into()));
    }
    let answer_file: Option<AnswerFile> = answers.map(read_json).transpose()?;
    let reason_file: Option<ReasonFile> = reasons.map(read_json).transpose()?;
    let corpus = layout.corpus(split)?;
    let report = evaluate(
        answer_file.as_ref(),
        reason_file.as_ref(),
        &corpus,
        cfg.evaluation.frame_period,
    )?;
    let path = output.map_or_else(
        || layout.output(&format!("scores_{}.json", split_name(split))),
        Path::to_path_buf,
    );
    write_text(&path, &report.to_json())?;
    Ok((path, report.table()))
}

/// 0 success, 1 runtime failure, 2 usage or configuration error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. }
        | Error::Json { .. }
        | Error::MissingFeatures { .. }
        | Error::FeatureFormat { .. }
        | Error::Validation(_)
        | Error::VocabularyMismatch(_)
        | Error::Config(_)
        | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    match &cli.config {
        Some(p) => RunConfig::load(p, &overrides),
        None => RunConfig::from_toml(&RunConfig::default().to_toml(), &overrides),
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    let layout = Layout::new(cfg.root());
    match &cli.command {
        Command::Synth => {
            for p in cmd_synth(&cfg, &layout)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train { role, teacher } => {
            let role = match role {
                RoleArg::Teacher => Role::Teacher,
                RoleArg::StudentJstl => Role::StudentJstl,
                RoleArg::Plain => Role::Plain,
            };
            println!("wrote {}", cmd_train(&cfg, &layout, role, teacher.as_deref())?.display());
        }
        Command::TrainRpn { checkpoint } => {
            println!("wrote {}", cmd_train_rpn(&cfg, &layout, checkpoint.as_deref())?.display());
        }
        Command::Generate {
            checkpoints,
            beam,
            split,
            output,
        } => {
            let p = cmd_generate(&cfg, &layout, checkpoints, *beam, (*split).into(), output.as_deref())?;
            println!("wrote {}", p.display());
        }
        Command::Reason {
            method,
            checkpoint,
            rpn,
            answers,
            split,
            output,
        } => {
            let method = match method {
                MethodArg::Attention => ReasoningMethod::Attention,
                MethodArg::Rpn => ReasoningMethod::Rpn,
            };
            let p = cmd_reason(
                &cfg,
                &layout,
                method,
                checkpoint.as_deref(),
                rpn.as_deref(),
                answers.as_deref(),
                (*split).into(),
                output.as_deref(),
            )?;
            println!("wrote {}", p.display());
        }
        Command::Evaluate {
            answers,
            reasons,
            split,
            output,
        } => {
            let (p, table) = cmd_evaluate(
                &cfg,
                &layout,
                answers.as_deref(),
                reasons.as_deref(),
                (*split).into(),
                output.as_deref(),
            )?;
            print!("{table}");
            println!("wrote {}", p.display());
        }
        Command::Verify => {
            let report = verify::run_all(&cfg)?;
            print!("{}", report.render());
            return Ok(if report.passed() { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
