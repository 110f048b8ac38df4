use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

use tplf::data::LabelSet;
use tplf::encoder::{EncoderParams, Vocab};
use tplf::eval::perturb::perturb_corpus;
use tplf::eval::{perturbation_similarity, token_homogeneity, EncoderEmbedder, EntityBank};
use tplf::io::bundle::export_deployment;
use tplf::io::experiment::{run_experiment, run_sweep, ExperimentPlan};
use tplf::io::formats::{load_classified, load_conll, load_pairs};
use tplf::io::resolve_data_path;
use tplf::io::store::{
    load_adapter, load_encoder, load_train_state, peek_kind, save_ner_model, CheckpointKind,
};
use tplf::lora::{AdapterGroup, Task};
use tplf::trainer::mtpf::TplLayers;
use tplf::trainer::{adapt_ner, adapt_tc, AdaptNerConfig, PlanMode, ProbeConfig};
use tplf::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tplf",
    version,
    about = "Multi-task pre-finetuning with task-primary LoRA adapters"
)]
struct Cli {
    /// JSON config: an experiment plan for training commands, an adaptation
    /// or probe config for adapt-ner / adapt-tc.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation (1 = single-threaded).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    /// Run a double-precision finite-difference check of the joint loss first.
    #[value(name = "f64-test")]
    F64Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-finetune on the token-labelled corpora only.
    PretrainNer(TrainArgs),
    /// Pre-finetune on the contrastive pair corpora only.
    PretrainTc(TrainArgs),
    /// Joint pre-finetuning; `--tpl-layers` adds task-primary adapters.
    Mtpf(MtpfArgs),
    /// Adapt a backbone to a CoNLL NER task with LoRA.
    AdaptNer(AdaptNerArgs),
    /// Fit a linear probe on pooled embeddings.
    AdaptTc(AdaptTcArgs),
    /// Homogeneity and perturbation similarity for checkpoints.
    Analyze(AnalyzeArgs),
    /// MTPF-TPL over several TPL layer counts.
    Sweep(SweepArgs),
    /// Write a deployment bundle from a trained checkpoint.
    Export(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct MtpfArgs {
    #[arg(long)]
    steps: Option<usize>,
    /// Final layers with task-primary adapters: a count or `all`.
    #[arg(long, value_parser = parse_tpl_layers)]
    tpl_layers: Option<TplLayers>,
    /// Freeze the backbone and train adapters only (PF-L).
    #[arg(long)]
    adapters_only: bool,
    /// Project conflicting backbone gradients.
    #[arg(long)]
    pcgrad: bool,
}

#[derive(Args)]
struct AdaptNerArgs {
    /// Encoder, train-state or NER-model checkpoint.
    #[arg(long)]
    backbone: PathBuf,
    /// NER adapter file; defaults to the NER TPL group of a train state.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Ignore any TPL group and start from fresh LoRA.
    #[arg(long)]
    no_tpl: bool,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct AdaptTcArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    no_tpl: bool,
    /// JSONL (text, label) or TSV (label, text).
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoints in snapshot order.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    /// CoNLL file for entity perturbation.
    #[arg(long)]
    bio: Option<PathBuf>,
    /// Pair file whose anchors feed the homogeneity probe.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    variants: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated layer counts, e.g. `1,2,4,all`.
    #[arg(long, value_delimiter = ',', value_parser = parse_tpl_layers)]
    layers: Option<Vec<TplLayers>>,
}

#[derive(Args)]
struct ExportArgs {
    /// Train-state checkpoint with TPL adapters.
    #[arg(long)]
    checkpoint: PathBuf,
}

fn parse_tpl_layers(s: &str) -> std::result::Result<TplLayers, String> {
    if s == "all" {
        return Ok(TplLayers::All);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(TplLayers::Count(n)),
        _ => Err(format!("expected a positive count or `all`, got {s:?}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let out = |default: &str| {
        cli.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(default))
    };
    match &cli.cmd {
        Cmd::PretrainNer(a) => train(
            &cli,
            PlanMode::PfNer,
            a.steps,
            None,
            false,
            &out("pretrain-ner"),
        ),
        Cmd::PretrainTc(a) => train(
            &cli,
            PlanMode::PfTc,
            a.steps,
            None,
            false,
            &out("pretrain-tc"),
        ),
        Cmd::Mtpf(a) => {
            let mode = match (a.adapters_only, a.tpl_layers) {
                (true, _) => PlanMode::PfL,
                (false, Some(_)) => PlanMode::MtpfTpl,
                (false, None) => PlanMode::Mtpf,
            };
            train(&cli, mode, a.steps, a.tpl_layers, a.pcgrad, &out("mtpf"))
        }
        Cmd::Sweep(a) => {
            let mut plan = plan_for(&cli, PlanMode::MtpfTpl, a.steps)?;
            if let Some(l) = &a.layers {
                plan.sweep = Some(l.clone());
            }
            plan.validate()?;
            let dir = out("sweep");
            let rows = run_sweep(&plan, &dir)?;
            for r in &rows {
                println!(
                    "tpl_layers={:<4} ner_f1={} tc_accuracy={} combined={}",
                    r.tpl_layers,
                    fmt(r.ner_f1),
                    fmt(r.tc_accuracy),
                    fmt(r.combined)
                );
            }
            println!("wrote {}", dir.join("sweep.csv").display());
            Ok(())
        }
        Cmd::AdaptNer(a) => {
            no_f64(&cli, "adapt-ner")?;
            adapt_ner_cmd(&cli, a, &out("adapt-ner"))
        }
        Cmd::AdaptTc(a) => {
            no_f64(&cli, "adapt-tc")?;
            adapt_tc_cmd(&cli, a, &out("adapt-tc"))
        }
        Cmd::Analyze(a) => {
            no_f64(&cli, "analyze")?;
            analyze_cmd(&cli, a, &out("analyze"))
        }
        Cmd::Export(a) => {
            no_f64(&cli, "export")?;
            export_cmd(a, &out("export"))
        }
    }
}

fn fmt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn no_f64(cli: &Cli, cmd: &str) -> Result<()> {
    if cli.precision == Precision::F64Test {
        return Err(Error::Config(format!(
            "--precision f64-test applies to training commands, not {cmd}"
        )));
    }
    Ok(())
}

fn read_json<C: DeserializeOwned>(path: &Path) -> Result<C> {
    serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Plan from `--config` or the built-in toy setup, with CLI overrides.
fn plan_for(cli: &Cli, mode: PlanMode, steps: Option<usize>) -> Result<ExperimentPlan> {
    let mut plan = match &cli.config {
        Some(p) => ExperimentPlan::load(p)?,
        None => ExperimentPlan::toy(mode, cli.seed.unwrap_or(0)),
    };
    plan.train.mode = mode;
    if let Some(s) = cli.seed {
        plan.train.seed = s;
    }
    if let Some(s) = steps {
        plan.train.total_steps = s;
    }
    if cli.precision == Precision::F64Test {
        plan.gradcheck = true;
    }
    Ok(plan)
}

fn train(
    cli: &Cli,
    mode: PlanMode,
    steps: Option<usize>,
    tpl: Option<TplLayers>,
    pcgrad: bool,
    out: &Path,
) -> Result<()> {
    let mut plan = plan_for(cli, mode, steps)?;
    if tpl.is_some() {
        plan.train.tpl_layers = tpl;
    }
    if pcgrad {
        plan.train.pcgrad = true;
    }
    plan.validate()?;
    info!(
        "{} for {} steps into {}",
        mode.name(),
        plan.train.total_steps,
        out.display()
    );
    let r = run_experiment(&plan, out)?;
    println!(
        "{} steps={} loss_ner={} loss_tc={}",
        r.mode,
        r.steps_run,
        fmt(r.final_loss_ner),
        fmt(r.final_loss_tc)
    );
    if let Some(d) = r.downstream {
        println!(
            "downstream ner_f1={} tc_accuracy={} combined={}",
            fmt(d.ner_f1),
            fmt(d.tc_accuracy),
            fmt(d.combined)
        );
    }
    if let Some(e) = r.gradcheck_max_rel_error {
        println!("gradcheck max_rel_error={e:.3e}");
    }
    println!(
        "metrics {} sha256={}",
        r.metrics_file.display(),
        r.metrics_sha256
    );
    Ok(())
}

/// Backbone, vocab and the task's TPL group (from `--adapter`, or from the
/// checkpoint itself when it is a train state).
fn backbone_and_tpl(
    backbone: &Path,
    adapter: Option<&PathBuf>,
    no_tpl: bool,
    task: Task,
) -> Result<(EncoderParams<f32>, Vocab, Option<AdapterGroup<f32>>)> {
    let backbone = resolve_data_path(backbone);
    let kind = peek_kind(&backbone)?;
    let (enc, vocab, from_state) = match kind {
        CheckpointKind::TrainState { .. } => {
            let saved = load_train_state(&backbone)?;
            let g = saved.state.model.adapters.group(task).cloned();
            (saved.state.model.encoder, saved.vocab, g)
        }
        _ => {
            let (e, v) = load_encoder(&backbone)?;
            (e, v, None)
        }
    };
    if no_tpl {
        return Ok((enc, vocab, None));
    }
    let group = match adapter {
        Some(p) => {
            let f = load_adapter(&resolve_data_path(p))?;
            if f.task != task {
                return Err(Error::Config(format!(
                    "{} holds a {} adapter, expected {task}",
                    p.display(),
                    f.task
                )));
            }
            f.group.check_compatible(&enc.config)?;
            Some(f.group)
        }
        None => from_state,
    };
    Ok((enc, vocab, group))
}

fn adapt_ner_cmd(cli: &Cli, a: &AdaptNerArgs, out: &Path) -> Result<()> {
    let mut cfg: AdaptNerConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => AdaptNerConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.optimizer.validate()?;
    let train = load_conll(&resolve_data_path(&a.train))?;
    let test = load_conll(&resolve_data_path(&a.test))?;
    let (enc, vocab, tpl) = backbone_and_tpl(&a.backbone, a.adapter.as_ref(), a.no_tpl, Task::Ner)?;
    let mut tags = train.tag_set();
    tags.extend(test.tag_set());
    tags.sort();
    tags.dedup();
    let labels = LabelSet::new(tags);
    fs::create_dir_all(out)?;
    let (model, report) = adapt_ner(&enc, tpl.as_ref(), &train, &labels, &vocab, &cfg)?;
    let scores = model.evaluate(&vocab, &test)?;
    save_ner_model(&out.join("ner_model.tplf"), &model, &vocab)?;
    let summary = serde_json::json!({
        "test": scores,
        "stage1_train": report.stage1_train,
        "stage2_train": report.stage2_train,
        "epoch_losses": report.epoch_losses,
        "warm_started_modules": report.warm_started_modules,
    });
    fs::write(
        out.join("scores.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "test precision={:.4} recall={:.4} f1={:.4} (warm-started modules: {})",
        scores.precision, scores.recall, scores.f1, report.warm_started_modules
    );
    Ok(())
}

fn adapt_tc_cmd(cli: &Cli, a: &AdaptTcArgs, out: &Path) -> Result<()> {
    let cfg: ProbeConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => ProbeConfig::default(),
    };
    let train = load_classified(&resolve_data_path(&a.train))?;
    let test = load_classified(&resolve_data_path(&a.test))?;
    let mut names: Vec<String> = train.classes.iter().chain(&test.classes).cloned().collect();
    names.sort();
    names.dedup();
    let (train, _) = train.indexed(Some(&names))?;
    let (test, _) = test.indexed(Some(&names))?;
    let (enc, vocab, tpl) = backbone_and_tpl(&a.backbone, a.adapter.as_ref(), a.no_tpl, Task::Tc)?;
    fs::create_dir_all(out)?;
    let (_, report) = adapt_tc(&enc, tpl.as_ref(), &train, &test, &vocab, &cfg)?;
    fs::write(
        out.join("scores.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "train_accuracy={:.4} test_accuracy={:.4}{}",
        report.train_accuracy,
        report.test_accuracy,
        if report.degenerate {
            " (degenerate probe)"
        } else {
            ""
        }
    );
    Ok(())
}

fn analyze_cmd(cli: &Cli, a: &AnalyzeArgs, out: &Path) -> Result<()> {
    if a.bio.is_none() && a.pairs.is_none() {
        return Err(Error::Config("analyze needs --bio and/or --pairs".into()));
    }
    if a.variants == 0 {
        return Err(Error::Config("--variants must be >= 1".into()));
    }
    for c in &a.checkpoint {
        peek_kind(&resolve_data_path(c))?;
    }
    let bio = a
        .bio
        .as_ref()
        .map(|p| load_conll(&resolve_data_path(p)))
        .transpose()?;
    let pairs = a
        .pairs
        .as_ref()
        .map(|p| load_pairs(&resolve_data_path(p)))
        .transpose()?;
    let seed = cli.seed.unwrap_or(0);
    let perturbed = match &bio {
        Some(d) => {
            let bank = EntityBank::harvest(d);
            let take: Vec<_> = d.sentences.iter().take(a.samples).cloned().collect();
            perturb_corpus(
                &take,
                &bank,
                a.variants,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )?
        }
        None => Vec::new(),
    };
    let sents: Vec<Vec<String>> = pairs
        .map(|p| {
            p.pairs
                .iter()
                .map(|(x, _)| tplf::data::split_words(x))
                .collect()
        })
        .unwrap_or_default();
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut csv = String::from("checkpoint,homogeneity,perturbation_similarity\n");
    for c in &a.checkpoint {
        let (enc, vocab) = load_encoder(&resolve_data_path(c))?;
        let emb = EncoderEmbedder::new(&enc, &vocab);
        let h = if sents.is_empty() {
            None
        } else {
            Some(token_homogeneity(&emb, &sents, a.samples, seed)?.mean)
        };
        let p = if perturbed.is_empty() {
            None
        } else {
            Some(perturbation_similarity(&emb, &perturbed)?.mean)
        };
        println!(
            "{} homogeneity={} perturbation_similarity={}",
            c.display(),
            fmt(h),
            fmt(p)
        );
        csv.push_str(&format!(
            "{},{},{}\n",
            c.display(),
            h.map_or(String::new(), |v| v.to_string()),
            p.map_or(String::new(), |v| v.to_string())
        ));
        rows.push(
            serde_json::json!({"checkpoint": c, "homogeneity": h, "perturbation_similarity": p}),
        );
    }
    fs::write(out.join("analysis.csv"), csv)?;
    let mut jsonl = String::new();
    for r in rows {
        jsonl.push_str(&r.to_string());
        jsonl.push('\n');
    }
    fs::write(out.join("analysis.jsonl"), jsonl)?;
    Ok(())
}

fn export_cmd(a: &ExportArgs, out: &Path) -> Result<()> {
    let saved = load_train_state(&resolve_data_path(&a.checkpoint))?;
    let model = &saved.state.model;
    if model.adapters.is_empty() {
        return Err(Error::Config(format!(
            "{} was trained as {} and has no task-primary adapters to export",
            a.checkpoint.display(),
            saved.plan.mode.name()
        )));
    }
    let mut heads = Vec::new();
    if let (Some(h), Some(l)) = (&model.ner_head, &saved.ner_labels) {
        heads.push((Task::Ner, h, l.tags.clone()));
    }
    let m = export_deployment(out, &model.encoder, &saved.vocab, &model.adapters, &heads)?;
    println!(
        "bundle {} backbone_hash={} tasks={:?}",
        out.display(),
        m.backbone_hash,
        m.tasks.keys().map(|t| t.name()).collect::<Vec<_>>()
    );
    Ok(())
}
