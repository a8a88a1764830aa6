//! `actmil` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actmil::cca::CcaModel;
use actmil::data::{class_stats, load_corpus, synth_generate, Corpus, SynthSpec};
use actmil::gradcheck;
use actmil::model::{ModelConfig, Network};
use actmil::qa::{
    answer_vocabulary, evaluate_qa, load_questions, save_questions, synth_questions, train_qa,
    Difficulty, ImageIndex, QaOptions, WordVecTable,
};
use actmil::train::{evaluate, train, TrainConfig};
use actmil::Error;
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(
    name = "actmil",
    version,
    about = "Multi-instance activity recognition and CCA question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML (or .json) config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test corpus pair.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a network; writes model.ckpt and loss.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Score a corpus; writes map.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Finite-difference check of every layer, loss and the full model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the CCA answer space; writes cca.ckpt and qa_fit.json.
    QaTrain {
        #[command(flatten)]
        common: Common,
        /// One or more networks whose features are concatenated.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Corpora holding the question images.
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        wordvecs: PathBuf,
    },
    /// Answer questions; writes answers.csv and accuracy.json.
    QaAnswer {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        wordvecs: PathBuf,
        /// Model written by qa-train.
        #[arg(long)]
        cca: PathBuf,
    },
    /// Class balance report; writes stats.json.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
}

/// Question files written next to a synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct QuestionSpec {
    train: usize,
    test: usize,
    choices: usize,
    seed: u64,
}

impl Default for QuestionSpec {
    fn default() -> Self {
        QuestionSpec {
            train: 300,
            test: 100,
            choices: 4,
            seed: 1,
        }
    }
}

/// The config file as loose sections, resolved per command.
struct Config {
    raw: Map<String, Value>,
}

impl Config {
    fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(Config { raw: Map::new() });
        };
        let text = fs::read_to_string(path)?;
        let value: Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
        };
        match value {
            Value::Object(raw) => Ok(Config { raw }),
            _ => Err(Error::Config("config root must be a table".into())),
        }
    }

    fn section(&self, name: &str) -> Result<Map<String, Value>, Error> {
        match self.raw.get(name) {
            None => Ok(Map::new()),
            Some(Value::Object(m)) => Ok(m.clone()),
            Some(_) => Err(Error::Config(format!("[{name}] must be a table"))),
        }
    }

    /// `base` with the keys of section `name` laid over it.
    fn resolve<T: Serialize + DeserializeOwned>(
        &self,
        name: &str,
        base: T,
        mut section: Map<String, Value>,
    ) -> Result<T, Error> {
        let Value::Object(mut merged) = serde_json::to_value(base)? else {
            unreachable!("config types serialize to objects")
        };
        merged.append(&mut section);
        serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::Config(format!("[{name}]: {e}")))
    }

    fn synth(&self, seed: Option<u64>) -> Result<SynthSpec, Error> {
        let mut s = self.resolve("synth", SynthSpec::default(), self.section("synth")?)?;
        if let Some(seed) = seed {
            s.seed = seed;
        }
        Ok(s)
    }

    fn questions(&self, seed: Option<u64>) -> Result<Option<QuestionSpec>, Error> {
        if !self.raw.contains_key("questions") {
            return Ok(None);
        }
        let mut q = self.resolve(
            "questions",
            QuestionSpec::default(),
            self.section("questions")?,
        )?;
        if let Some(seed) = seed {
            q.seed = seed;
        }
        Ok(Some(q))
    }

    /// Model config plus the optional `freeze_below` layer.
    fn model(
        &self,
        num_classes: usize,
        seed: Option<u64>,
    ) -> Result<(ModelConfig, Option<String>), Error> {
        let mut section = self.section("model")?;
        let freeze = match section.remove("freeze_below") {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => {
                return Err(Error::Config(
                    "[model] freeze_below must be a layer name".into(),
                ))
            }
        };
        let mut m = self.resolve(
            "model",
            ModelConfig {
                num_classes,
                ..ModelConfig::default()
            },
            section,
        )?;
        if let Some(seed) = seed {
            m.seed = seed;
        }
        Ok((m, freeze))
    }

    /// Training config, starting from `preset` (default `hico_desk`).
    fn train(&self, seed: Option<u64>) -> Result<TrainConfig, Error> {
        let mut section = self.section("train")?;
        let base = match section.remove("preset") {
            None => TrainConfig::hico_desk(),
            Some(Value::String(name)) => TrainConfig::preset(&name)?,
            Some(_) => return Err(Error::Config("[train] preset must be a string".into())),
        };
        let mut t = self.resolve("train", base, section)?;
        if let Some(seed) = seed {
            t.seed = seed;
        }
        t.validate()?;
        Ok(t)
    }

    fn qa(&self, seed: Option<u64>) -> Result<QaOptions, Error> {
        let mut q = self.resolve("qa", QaOptions::default(), self.section("qa")?)?;
        if let Some(seed) = seed {
            q.seed = seed;
        }
        Ok(q)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn paths(ps: &[PathBuf]) -> Vec<String> {
    ps.iter().map(|p| p.display().to_string()).collect()
}

struct Run<'a> {
    command: &'a str,
    common: &'a Common,
}

impl Run<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.common.out.join(name)
    }

    fn manifest(&self, config: Value, inputs: Value, outputs: &[&str]) -> Result<(), Error> {
        let manifest = json!({
            "command": self.command,
            "config": config,
            "seed_override": self.common.seed,
            "config_file": self.common.config.as_ref().map(|p| p.display().to_string()),
            "inputs": inputs,
            "outputs": outputs,
            "versions": {
                "actmil": env!("CARGO_PKG_VERSION"),
                "checkpoint_format": String::from_utf8_lossy(&actmil::checkpoint::MAGIC[..7]),
            },
        });
        write_json(&self.out("manifest.json"), &manifest)
    }
}

fn load_corpora(ps: &[PathBuf]) -> Result<Vec<Corpus>, Error> {
    ps.iter().map(load_corpus).collect()
}

fn load_nets(ps: &[PathBuf]) -> Result<Vec<Network>, Error> {
    ps.iter().map(Network::load).collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    let (name, common) = match &cli.command {
        Command::Synth { common } => ("synth", common),
        Command::Train { common, .. } => ("train", common),
        Command::Eval { common, .. } => ("eval", common),
        Command::Gradcheck { common } => ("gradcheck", common),
        Command::QaTrain { common, .. } => ("qa-train", common),
        Command::QaAnswer { common, .. } => ("qa-answer", common),
        Command::Stats { common, .. } => ("stats", common),
    };
    let cfg = Config::load(common.config.as_deref())?;
    let seed = common.seed;
    fs::create_dir_all(&common.out)?;
    let run = Run {
        command: name,
        common,
    };

    match &cli.command {
        Command::Synth { .. } => {
            let spec = cfg.synth(seed)?;
            let qspec = cfg.questions(seed)?;
            let (train_c, test_c) = synth_generate(&spec)?;
            train_c.save(run.out("train.json"))?;
            test_c.save(run.out("test.json"))?;
            let mut outputs = vec!["train.json", "test.json"];
            if let Some(q) = &qspec {
                let train_q =
                    synth_questions(&train_c, q.train, q.choices, Difficulty::Easy, q.seed)?;
                let easy =
                    synth_questions(&test_c, q.test, q.choices, Difficulty::Easy, q.seed + 1)?;
                let hard =
                    synth_questions(&test_c, q.test, q.choices, Difficulty::Hard, q.seed + 1)?;
                save_questions(run.out("questions_train.json"), &train_q)?;
                save_questions(run.out("questions_easy.json"), &easy)?;
                save_questions(run.out("questions_hard.json"), &hard)?;
                let vocab = answer_vocabulary(&train_c.classes);
                WordVecTable::synthetic(vocab.iter().map(String::as_str), q.seed)
                    .save(run.out("wordvecs.txt"))?;
                outputs.extend([
                    "questions_train.json",
                    "questions_easy.json",
                    "questions_hard.json",
                    "wordvecs.txt",
                ]);
            }
            println!(
                "train: {} images, test: {} images",
                train_c.samples.len(),
                test_c.samples.len()
            );
            run.manifest(
                json!({ "synth": spec, "questions": qspec }),
                json!({}),
                &outputs,
            )?;
        }
        Command::Train { corpus, .. } => {
            let corpus_data = load_corpus(corpus)?;
            let (model, freeze) = cfg.model(corpus_data.num_classes(), seed)?;
            let tcfg = cfg.train(seed)?;
            let mut net = Network::build(model.clone())?;
            if let Some(layer) = &freeze {
                net = net.freeze_below(layer)?;
            }
            let out = train(net, &corpus_data, &tcfg)?;
            out.net.save(run.out("model.ckpt"))?;
            out.trace.write_csv(run.out("loss.csv"))?;
            println!(
                "trained {} iterations: loss {:.4} -> {:.4}",
                tcfg.total_iters,
                out.trace.leading_mean(100),
                out.trace.trailing_mean(100)
            );
            run.manifest(
                json!({ "model": model, "freeze_below": freeze, "train": tcfg }),
                json!({ "corpus": corpus.display().to_string() }),
                &["model.ckpt", "loss.csv"],
            )?;
        }
        Command::Eval {
            checkpoint, corpus, ..
        } => {
            let net = Network::load(checkpoint)?;
            let corpus_data = load_corpus(corpus)?;
            let report = evaluate(&net, &corpus_data)?;
            write_json(&run.out("map.json"), &report)?;
            println!(
                "mAP {:.2} over {} classes",
                report.map,
                report.per_class.len() - report.skipped
            );
            run.manifest(
                json!({ "model": net.config() }),
                json!({ "checkpoint": checkpoint.display().to_string(), "corpus": corpus.display().to_string() }),
                &["map.json"],
            )?;
        }
        Command::Gradcheck { .. } => {
            let first = seed.unwrap_or(0);
            let seeds: Vec<u64> = (first..first + 5).collect();
            let results = gradcheck::run_all(&seeds)?;
            println!(
                "{:<28} {:>12} {:>8}  status",
                "check", "max rel err", "coords"
            );
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<28} {:>12.3e} {:>8}  {status}",
                    r.name, r.max_rel_error, r.coords
                );
            }
            write_json(&run.out("gradcheck.json"), &results)?;
            run.manifest(
                json!({ "step": gradcheck::STEP, "tolerance": gradcheck::TOLERANCE, "seeds": seeds }),
                json!({}),
                &["gradcheck.json"],
            )?;
            if let Some(bad) = results.iter().find(|r| !r.passed()) {
                return Err(Error::Numerical(format!(
                    "gradient check {} exceeded tolerance: {:.3e}",
                    bad.name, bad.max_rel_error
                )));
            }
        }
        Command::QaTrain {
            checkpoint,
            corpus,
            questions,
            wordvecs,
            ..
        } => {
            let opts = cfg.qa(seed)?;
            let nets = load_nets(checkpoint)?;
            let corpora = load_corpora(corpus)?;
            let index = ImageIndex::new(&corpora.iter().collect::<Vec<_>>());
            let qs = load_questions(questions)?;
            let table = WordVecTable::load(wordvecs)?;
            let fit = train_qa(&nets, &index, &qs, &table, &opts)?;
            fit.model.save(run.out("cca.ckpt"))?;
            let summary = json!({
                "reg": fit.reg,
                "grid": fit.grid_scores.iter().map(|(r, a)| json!({ "reg": r, "val_accuracy": a })).collect::<Vec<_>>(),
                "val_accuracy": fit.val_accuracy,
                "dim": fit.model.dim(),
                "pairs": qs.len(),
            });
            write_json(&run.out("qa_fit.json"), &summary)?;
            match fit.val_accuracy {
                Some(a) => println!("reg {} (validation accuracy {a:.2}%)", fit.reg),
                None => println!("reg {}", fit.reg),
            }
            run.manifest(
                json!({ "qa": opts }),
                json!({
                    "checkpoints": paths(checkpoint),
                    "corpora": paths(corpus),
                    "questions": questions.display().to_string(),
                    "wordvecs": wordvecs.display().to_string(),
                }),
                &["cca.ckpt", "qa_fit.json"],
            )?;
        }
        Command::QaAnswer {
            checkpoint,
            corpus,
            questions,
            wordvecs,
            cca,
            ..
        } => {
            let opts = cfg.qa(seed)?;
            let nets = load_nets(checkpoint)?;
            let corpora = load_corpora(corpus)?;
            let index = ImageIndex::new(&corpora.iter().collect::<Vec<_>>());
            let qs = load_questions(questions)?;
            let table = WordVecTable::load(wordvecs)?;
            let model = CcaModel::load(cca)?;
            let report = evaluate_qa(&model, &nets, &index, &qs, &table, &opts)?;
            fs::write(run.out("answers.csv"), report.to_csv())?;
            write_json(
                &run.out("accuracy.json"),
                &json!({ "accuracy": report.accuracy, "per_difficulty": report.per_difficulty, "questions": qs.len() }),
            )?;
            println!("accuracy {:.2}% on {} questions", report.accuracy, qs.len());
            run.manifest(
                json!({ "qa": opts }),
                json!({
                    "checkpoints": paths(checkpoint),
                    "corpora": paths(corpus),
                    "questions": questions.display().to_string(),
                    "wordvecs": wordvecs.display().to_string(),
                    "cca": cca.display().to_string(),
                }),
                &["answers.csv", "accuracy.json"],
            )?;
        }
        Command::Stats { corpus, .. } => {
            let corpus_data = load_corpus(corpus)?;
            let stats = class_stats(&corpus_data);
            println!(
                "{:<24} {:>9} {:>9} {:>9}",
                "class", "positive", "negative", "neg:pos"
            );
            for c in &stats.per_class {
                let ratio = c.ratio.map_or("-".to_string(), |r| format!("{r:.1}"));
                println!(
                    "{:<24} {:>9} {:>9} {:>9}",
                    c.name, c.positives, c.negatives, ratio
                );
            }
            if !stats.empty_classes.is_empty() {
                println!("classes without positives: {:?}", stats.empty_classes);
            }
            write_json(&run.out("stats.json"), &stats)?;
            run.manifest(
                json!({}),
                json!({ "corpus": corpus.display().to_string() }),
                &["stats.json"],
            )?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail
                .lines()
                .next()
                .unwrap_or(&msg)
                .trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(exit_code(&e))
        }
    }
}
