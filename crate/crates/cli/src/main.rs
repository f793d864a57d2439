use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use slv_core::analysis::{self, ReportInputs};
use slv_core::data::{self, Normalization};
use slv_core::language::{pretrain, training_corpus, Vocabulary};
use slv_core::model::Model;
use slv_core::regression::{generate_motion, regress_slv, run_suite, LanguageMode, Observation, Rollout, SuiteResult};
use slv_core::sim::{sample_scene, InstructionBank, PositionMode, Sample, Split, Task};
use slv_core::training::{train, TrainOptions};
use slv_core::Config;

mod runs;

use runs::RunDir;

#[derive(Parser)]
#[command(name = "slvbot", version, about = "Language-conditioned motion learning with shared latent variables")]
struct Cli {
    /// TOML or JSON config overlay; keys not given fall back to its `preset`.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: paper, desk or tiny.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Parent directory of the indexed run directories.
    #[arg(long, global = true, default_value = "runs")]
    runs: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted demonstrations into a dataset directory.
    GenData(GenData),
    /// Pretrain the language model on the instruction corpus and freeze it.
    PretrainLm,
    /// Train the motion model and SLV table with the frozen language model.
    Train(TrainArgs),
    /// Regress an SLV for one scene and instruction, then run the closed loop.
    Rollout(RolloutArgs),
    /// Success rates over randomized scenes, with or without regression.
    Evaluate(EvaluateArgs),
    /// Build CSV/JSON analysis products from finished runs.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_delimiter = ',', default_value = "lift,roll,stack")]
    tasks: Vec<Task>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// A gen-data run directory.
    #[arg(long)]
    data: PathBuf,
    /// A pretrain-lm run directory.
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct ErSwitch {
    /// Regress the SLV before moving (the default).
    #[arg(long, overrides_with = "no_er")]
    er: bool,
    /// Keep the SLV at zero.
    #[arg(long)]
    no_er: bool,
}

impl ErSwitch {
    fn enabled(&self) -> bool {
        !self.no_er || self.er
    }
}

#[derive(Args)]
struct RolloutArgs {
    /// A train run directory.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    instruction: Option<String>,
    /// A scene JSON file, or `random`.
    #[arg(long, default_value = "random")]
    scene: String,
    #[arg(long, default_value = "training")]
    case: PositionMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    er: ErSwitch,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value = "training")]
    case: PositionMode,
    #[arg(long, default_value = "seen")]
    language: LanguageMode,
    #[arg(long)]
    seed: Option<u64>,
    /// Trials per task whose step captures are stored for analysis.
    #[arg(long, default_value_t = 1)]
    captures: usize,
    #[command(flatten)]
    er: ErSwitch,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Rollout or evaluate run directories.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}\n\nRun `slvbot --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    match (&cli.config, &cli.preset) {
        (Some(path), _) => Config::from_file(path).with_context(|| format!("config {}", path.display())),
        (None, Some(name)) => Ok(Config::preset(name)?),
        (None, None) => Ok(Config::desk()),
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let mut cfg = load_config(&cli).map_err(Failure::Usage)?;
    let explicit = cli.config.is_some() || cli.preset.is_some();
    let rt = Failure::Runtime;
    match &cli.command {
        Command::GenData(a) => gen_data(&cli.runs, &mut cfg, a).map_err(rt),
        Command::PretrainLm => pretrain_lm(&cli.runs, &cfg).map_err(rt),
        Command::Train(a) => train_model(&cli.runs, &mut cfg, a).map_err(rt),
        Command::Rollout(a) => rollout(&cli.runs, explicit.then_some(&cfg), a).map_err(rt),
        Command::Evaluate(a) => evaluate(&cli.runs, explicit.then_some(&cfg), a).map_err(rt),
        Command::Analyze(a) => analyze(&cli.runs, &cfg, a).map_err(rt),
    }
}

fn gen_data(runs: &Path, cfg: &mut Config, a: &GenData) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    let run = RunDir::create(runs, "gen-data", cfg)?;
    let eps = data::generate(cfg, &a.tasks)?;
    data::save(run.path(), &eps, cfg, &a.tasks)?;
    log::info!("{} episodes written to {}", eps.len(), run.path().display());
    println!("{}", run.path().display());
    Ok(())
}

fn pretrain_lm(runs: &Path, cfg: &Config) -> Result<()> {
    let run = RunDir::create(runs, "pretrain-lm", cfg)?;
    let text = training_corpus();
    let vocab = Vocabulary::from_corpus(&text);
    let mut model = Model::new(cfg, vocab.clone(), 0)?;
    let corpus = text.iter().map(|s| vocab.encode(s)).collect::<slv_core::Result<Vec<_>>>()?;
    let report = pretrain(&model.lm, &mut model.store, &corpus, &cfg.pretrain)?;
    fs::write(run.path().join("pretrain_report.json"), serde_json::to_string_pretty(&report)?)?;
    vocab.save(&run.path().join("vocab.txt"))?;
    log::info!(
        "final loss {:.4} nats/token, entropy floor {:.4}, excess {:.4}",
        report.final_loss,
        report.entropy_floor,
        report.excess
    );
    if !report.converged {
        bail!(
            "language model did not converge (excess {:.4} >= {}); not freezing. Report in {}",
            report.excess,
            cfg.pretrain.max_excess_nats,
            run.path().display()
        );
    }
    model.save_lm(&run.path().join("lm.ckpt"))?;
    println!("{}", run.path().display());
    Ok(())
}

fn train_model(runs: &Path, cfg: &mut Config, a: &TrainArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let (_, eps) = data::load(&a.data).with_context(|| format!("dataset {}", a.data.display()))?;
    let vocab = Vocabulary::load(&a.lm.join("vocab.txt"))?;
    let mut model = Model::new(cfg, vocab.clone(), eps.len())?;
    model.load_lm(&a.lm.join("lm.ckpt")).with_context(|| format!("language model {}", a.lm.display()))?;
    let run = RunDir::create(runs, "train", cfg)?;
    let norm = Normalization::fit(&eps)?;
    let prepared = data::prepare(&eps, &norm, &vocab)?;
    let opts = TrainOptions {
        config: &cfg.train,
        noise_sigma: cfg.data.noise_sigma,
        paraphrase: cfg.data.paraphrase_rate,
        out: Some(run.path()),
        norm: &norm,
    };
    let report = train(&mut model, &prepared, &opts)?;
    fs::write(run.path().join("train_report.json"), serde_json::to_string_pretty(&report)?)?;
    log::info!("{} epochs ({:?}), final {:?}", report.epochs, report.stop, report.history.last());
    println!("{}", run.path().display());
    Ok(())
}

fn scene_for(model: &Model, a: &RolloutArgs) -> Result<Sample> {
    let sim = &model.cfg.sim;
    let mut sample = if a.scene == "random" {
        let task = match &a.instruction {
            Some(text) => InstructionBank::new().parse(text).with_context(|| format!("cannot parse instruction `{text}`"))?.0,
            None => Task::ALL[(a.seed % 3) as usize],
        };
        sample_scene(task, a.case, Split::Train, a.seed, sim)?
    } else {
        serde_json::from_str(&fs::read_to_string(&a.scene).with_context(|| format!("scene {}", a.scene))?)?
    };
    if let Some(text) = &a.instruction {
        let (task, target, destination) =
            InstructionBank::new().parse(text).with_context(|| format!("cannot parse instruction `{text}`"))?;
        let (_, cube) = sample.scene.cube(target).with_context(|| format!("scene has no {} cube", target.name()))?;
        sample.truth.task = task;
        sample.truth.target = target;
        sample.truth.destination = destination;
        sample.truth.start = [cube.x, cube.z];
        sample.instruction = text.clone();
    }
    Ok(sample)
}

/// Loads a trained model; an explicit config replaces its regression and evaluation settings.
fn load_model(dir: &Path, overrides: Option<&Config>) -> Result<(Model, Normalization)> {
    let (mut model, norm) = Model::load(dir).with_context(|| format!("model {}", dir.display()))?;
    if let Some(c) = overrides {
        model.cfg.er = c.er.clone();
        model.cfg.eval = c.eval.clone();
    }
    Ok((model, norm))
}

fn rollout(runs: &Path, overrides: Option<&Config>, a: &RolloutArgs) -> Result<()> {
    let (mut model, norm) = load_model(&a.model, overrides)?;
    let cfg = model.cfg.clone();
    let sample = scene_for(&model, a)?;
    let run = RunDir::create(runs, "rollout", &cfg)?;
    fs::write(run.path().join("scene.json"), serde_json::to_string_pretty(&sample)?)?;
    let slv = if a.er.enabled() {
        let obs = Observation::of(&sample, &model)?;
        let (slv, trace) = regress_slv(&mut model, &norm, &obs, &sample.instruction, &cfg.er)?;
        fs::write(run.path().join("er_trace.json"), serde_json::to_string_pretty(&trace)?)?;
        slv
    } else {
        vec![0.0; model.slv.dim]
    };
    let r = generate_motion(&model, &norm, &sample, &slv, cfg.eval.timeout_factor)?;
    fs::write(run.path().join("rollout.json"), serde_json::to_string(&r)?)?;
    println!("{}: success={} steps={}{}", sample.instruction, r.success, r.steps, r.fault.map(|f| format!(" fault: {f}")).unwrap_or_default());
    println!("{}", run.path().display());
    Ok(())
}

fn evaluate(runs: &Path, overrides: Option<&Config>, a: &EvaluateArgs) -> Result<()> {
    let (mut model, norm) = load_model(&a.model, overrides)?;
    let mut cfg = model.cfg.clone();
    if let Some(s) = a.seed {
        cfg.eval.seed = s;
    }
    let trials = a.trials.unwrap_or(cfg.eval.trials);
    let run = RunDir::create(runs, "evaluate", &cfg)?;
    let (suite, kept) = run_suite(&mut model, &norm, &cfg.eval, &cfg.er, trials, a.case, a.language, a.er.enabled(), a.captures)?;
    fs::write(run.path().join("suite.json"), serde_json::to_string(&suite)?)?;
    fs::write(run.path().join("success.csv"), analysis::success_csv(std::slice::from_ref(&suite)))?;
    let dir = run.path().join("rollouts");
    fs::create_dir_all(&dir)?;
    for (i, r) in kept.iter().enumerate() {
        fs::write(dir.join(format!("{:03}_{}.json", i, r.task.name())), serde_json::to_string(r)?)?;
    }
    for task in Task::ALL {
        let (s, n) = suite.successes(task);
        println!("{:5} {s}/{n}", task.name());
    }
    println!("{}", run.path().display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&fs::read_to_string(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn analyze(runs: &Path, cfg: &Config, a: &AnalyzeArgs) -> Result<()> {
    let mut inputs = ReportInputs::default();
    for dir in &a.inputs {
        if !dir.is_dir() {
            bail!("{} is not a run directory", dir.display());
        }
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let suite = dir.join("suite.json");
        if suite.exists() {
            let s: SuiteResult = read_json(&suite)?;
            for (i, t) in s.trials.iter().enumerate() {
                if let Some(trace) = &t.trace {
                    inputs.traces.push((format!("{name}/{i}"), trace.clone()));
                }
            }
            inputs.suites.push(s);
        }
        let trace = dir.join("er_trace.json");
        if trace.exists() {
            inputs.traces.push((name.clone(), read_json(&trace)?));
        }
        let single = dir.join("rollout.json");
        if single.exists() {
            inputs.rollouts.push((name.clone(), read_json::<Rollout>(&single)?));
        }
        let many = dir.join("rollouts");
        if many.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&many)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            files.sort();
            for f in files {
                let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                inputs.rollouts.push((format!("{name}/{stem}"), read_json(&f)?));
            }
        }
    }
    let run = RunDir::create(runs, "analyze", cfg)?;
    fs::write(run.path().join("inputs.json"), serde_json::to_string_pretty(&a.inputs)?)?;
    let gaps = analysis::report(run.path(), &inputs)?;
    for g in &gaps {
        log::warn!("no {g} among the inputs");
    }
    println!("{}", run.path().display());
    Ok(())
}
