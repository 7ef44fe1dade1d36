//! Pipeline orchestrator: every stage as a subcommand over one run config.
//!
//! Exit codes: 0 success (including empty selections), 1 usage, 2 data
//! error, 3 numeric failure.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Artifact, RunConfig};
use crate::intervention::{
    category_reduction_report, evaluate_accuracy, layer_distribution, random_control_mask,
    write_eval_csv, write_layer_csv, EvalReport, SuppressionMask,
};
use crate::model::{build_model, Model, ModelConfig, NeuronId};
use crate::plant::{plant_truth_neuron, PlantConfig, PlantReport};
use crate::selection::{select_truth_neurons, SelectionReport};
use crate::stats::{welch_one_sided, WelchResult};
use crate::tasks::{
    build_vocab, generate_synthetic_dataset, load_dataset, write_dataset, DatasetFormat,
    PromptTemplate, QAExample, SyntheticFactSpec, Vocab, DEFAULT_TEMPLATE,
};
use crate::train::{holdout_split, render_training_set, train_toy, Hyperparams, TrainReport};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: msg.into() }
    }
    fn data(msg: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_DATA, message: msg.to_string() }
    }
    fn numeric(msg: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_NUMERIC, message: msg.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "truth-neurons",
    version,
    about = "Detect and causally validate truth neurons in a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic true/false fact dataset (JSONL)
    GenData(GenDataArgs),
    /// Train the toy model and write a checkpoint
    Train(TrainArgs),
    /// Run the selection pipeline and write the truth-neuron set
    Select(SelectArgs),
    /// Evaluate accuracy with an optional suppression mask
    Eval(EvalArgs),
    /// Summarize selection and evaluation artifacts
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run config; explicit flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<DatasetFormat>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores)
    #[arg(long)]
    workers: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(Failure::data)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.checkpoint {
            cfg.checkpoint = v.clone();
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = self.format {
            cfg.dataset_format = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if cfg.workers > 0 {
            // best effort; the global pool can only be set once per process
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build_global();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 5)]
    entities: usize,
    #[arg(long, default_value_t = 3)]
    attributes: usize,
    #[arg(long, default_value_t = 60)]
    examples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/dataset.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 48)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    d_ff: usize,
    #[arg(long, default_value_t = 96)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 2600)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    act_l1: f64,
    /// Skip the neuron-planting stage after training
    #[arg(long)]
    no_plant: bool,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    t_percent: Option<f64>,
    #[arg(long)]
    p_percent: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Mask source: none | file:PATH | random:COUNT:SEED
    #[arg(long, default_value = "none")]
    mask: String,
    #[arg(long)]
    repetitions: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainArtifact {
    model_config: ModelConfig,
    hyperparams: Hyperparams,
    train: TrainReport,
    holdout_accuracy: f64,
    plant: Option<PlantReport>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalArtifact {
    mask_source: String,
    mask_neurons: Vec<NeuronId>,
    baseline: EvalReport,
    masked: EvalReport,
    welch: Option<WelchResult>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryArtifact {
    truth_neurons: Vec<NeuronId>,
    layer_fractions: Vec<f64>,
    mean_probability_change: Option<f64>,
    accuracy_drop_points: f64,
    welch: Option<WelchResult>,
    omitted_categories: Vec<(String, usize)>,
}

fn write_artifact<T: Serialize>(
    path: &Path,
    cfg: &RunConfig,
    payload: T,
) -> Result<(), Failure> {
    let artifact = Artifact {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        payload,
    };
    let mut bytes = serde_json::to_vec_pretty(&artifact).map_err(Failure::data)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(Failure::data)
}

fn read_artifact<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Artifact<T>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::data(format!("cannot parse {}: {e}", path.display())))
}

fn load_env(cfg: &RunConfig) -> Result<(Model, Vec<QAExample>, PromptTemplate, Vocab), Failure> {
    let model = load_checkpoint(&cfg.checkpoint).map_err(Failure::data)?;
    let examples = load_dataset(&cfg.dataset, cfg.dataset_format).map_err(Failure::data)?;
    let template = PromptTemplate::new(DEFAULT_TEMPLATE.into()).map_err(Failure::data)?;
    let vocab = build_vocab(&examples, &template);
    if vocab.words != model.vocab {
        return Err(Failure::data(
            "dataset vocabulary does not match the checkpoint vocabulary",
        ));
    }
    Ok((model, examples, template, vocab))
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), Failure> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(Failure::data)
}

fn cmd_gen_data(args: &GenDataArgs) -> CmdResult {
    let spec = SyntheticFactSpec {
        n_entities: args.entities,
        n_attributes: args.attributes,
        n_examples: args.examples,
        seed: args.seed,
    };
    let examples = generate_synthetic_dataset(&spec).map_err(Failure::data)?;
    if let Some(dir) = args.out.parent() {
        std::fs::create_dir_all(dir).map_err(Failure::data)?;
    }
    write_dataset(&args.out, &examples).map_err(Failure::data)?;
    println!(
        "wrote {} examples to {}",
        examples.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let cfg = args.common.resolve()?;
    ensure_out_dir(&cfg)?;
    let examples = load_dataset(&cfg.dataset, cfg.dataset_format).map_err(Failure::data)?;
    let template = PromptTemplate::new(DEFAULT_TEMPLATE.into()).map_err(Failure::data)?;
    let vocab = build_vocab(&examples, &template);
    let model_config = ModelConfig {
        n_layers: args.layers,
        d_model: args.d_model,
        n_heads: args.heads,
        d_ff: args.d_ff,
        vocab_size: vocab.len(),
        max_seq_len: args.max_seq_len,
    };
    let mut model =
        build_model(&model_config, cfg.seed, vocab.words.clone()).map_err(Failure::data)?;
    let (train_ex, holdout_ex) = holdout_split(&examples);
    let rows = render_training_set(&train_ex, &template, &vocab, model_config.max_seq_len)
        .map_err(Failure::data)?;
    let holdout_rows = render_training_set(&holdout_ex, &template, &vocab, model_config.max_seq_len)
        .map_err(Failure::data)?;
    let hp = Hyperparams {
        lr: args.lr,
        steps: args.steps,
        batch: args.batch,
        seed: cfg.seed,
        act_l1: args.act_l1,
    };
    let train = train_toy(&mut model, &rows, &holdout_rows, &hp).map_err(Failure::numeric)?;
    let holdout = evaluate_accuracy(
        &model,
        &holdout_ex,
        &template,
        &vocab,
        None,
        10,
        cfg.seed,
    )
    .map_err(Failure::numeric)?;
    println!("held-out accuracy: {:.1}%", 100.0 * holdout.mean_accuracy);
    let plant = if args.no_plant {
        None
    } else {
        let report =
            plant_truth_neuron(&mut model, &examples, &template, &vocab, &PlantConfig::default())
                .map_err(Failure::numeric)?;
        println!(
            "planted {} (flip fraction {:.3})",
            report.neuron, report.flip_fraction
        );
        Some(report)
    };
    save_checkpoint(&model, &cfg.checkpoint).map_err(Failure::data)?;
    println!("checkpoint: {}", cfg.checkpoint.display());
    write_artifact(
        &cfg.out_dir.join("train_report.json"),
        &cfg,
        TrainArtifact {
            model_config,
            hyperparams: hp,
            train,
            holdout_accuracy: holdout.mean_accuracy,
            plant,
        },
    )
}

fn cmd_select(args: &SelectArgs) -> CmdResult {
    let mut cfg = args.common.resolve()?;
    if let Some(v) = args.t_percent {
        cfg.selection.t_percent = v;
    }
    if let Some(v) = args.p_percent {
        cfg.selection.p_percent = v;
    }
    if let Some(v) = args.alpha {
        cfg.selection.alpha = v;
    }
    if let Some(v) = args.m {
        cfg.selection.m = v;
    }
    if let Some(v) = args.split_seed {
        cfg.selection.split_seed = v;
    }
    ensure_out_dir(&cfg)?;
    let (model, examples, template, vocab) = load_env(&cfg)?;
    let report = select_truth_neurons(&model, &examples, &template, &vocab, &cfg.selection)
        .map_err(Failure::numeric)?;
    println!(
        "effective config: t={}% p={}% alpha={} m={} split_seed={}",
        cfg.selection.t_percent,
        cfg.selection.p_percent,
        cfg.selection.alpha,
        cfg.selection.m,
        cfg.selection.split_seed
    );
    println!(
        "retention {:.3}, candidates {}, truth neurons {}",
        report.retention_rate,
        report.candidates.neurons.len(),
        report.truth_neurons.len()
    );
    if report.truth_neurons.is_empty() {
        println!("truth neurons: none (empty set)");
    } else {
        for n in &report.truth_neurons {
            println!("  {n}");
        }
    }
    let neurons = report.truth_neurons.clone();
    write_artifact(&cfg.out_dir.join("selection_report.json"), &cfg, report)?;
    write_artifact(&cfg.out_dir.join("truth_neurons.json"), &cfg, neurons)
}

fn parse_mask(
    spec: &str,
    model: &Model,
) -> Result<(Option<SuppressionMask>, Vec<NeuronId>), Failure> {
    if spec == "none" {
        return Ok((None, Vec::new()));
    }
    if let Some(path) = spec.strip_prefix("file:") {
        let artifact: Artifact<Vec<NeuronId>> = read_artifact(Path::new(path))?;
        let neurons = artifact.payload;
        let mask = SuppressionMask::new(neurons.iter().copied());
        return Ok((Some(mask), neurons));
    }
    if let Some(rest) = spec.strip_prefix("random:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 2 {
            return Err(Failure::usage(format!(
                "bad mask spec '{spec}': expected random:COUNT:SEED"
            )));
        }
        let count: usize = parts[0]
            .parse()
            .map_err(|_| Failure::usage(format!("bad mask count '{}'", parts[0])))?;
        let seed: u64 = parts[1]
            .parse()
            .map_err(|_| Failure::usage(format!("bad mask seed '{}'", parts[1])))?;
        let mask = random_control_mask(count, seed, model).map_err(Failure::data)?;
        let neurons = mask.neurons.iter().copied().collect();
        return Ok((Some(mask), neurons));
    }
    Err(Failure::usage(format!(
        "unknown mask source '{spec}': expected none, file:PATH, or random:COUNT:SEED"
    )))
}

fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let mut cfg = args.common.resolve()?;
    if let Some(v) = args.repetitions {
        cfg.repetitions = v;
    }
    ensure_out_dir(&cfg)?;
    let (model, examples, template, vocab) = load_env(&cfg)?;
    let (mask, mask_neurons) = parse_mask(&args.mask, &model)?;
    let baseline = evaluate_accuracy(
        &model,
        &examples,
        &template,
        &vocab,
        None,
        cfg.repetitions,
        cfg.seed,
    )
    .map_err(Failure::numeric)?;
    let masked = match &mask {
        Some(m) => evaluate_accuracy(
            &model,
            &examples,
            &template,
            &vocab,
            Some(m),
            cfg.repetitions,
            cfg.seed,
        )
        .map_err(Failure::numeric)?,
        None => baseline.clone(),
    };
    println!(
        "baseline accuracy: {:.3} +/- {:.3}",
        baseline.mean_accuracy, baseline.accuracy_std
    );
    println!(
        "masked accuracy:   {:.3} +/- {:.3} ({} neurons)",
        masked.mean_accuracy,
        masked.accuracy_std,
        mask_neurons.len()
    );
    if let Some(change) = masked.mean_probability_change {
        println!("mean correct-probability change: {:.4}", change);
    }
    let welch = if mask.is_some() {
        match welch_one_sided(&baseline.per_repetition_accuracy, &masked.per_repetition_accuracy) {
            Ok(w) => {
                println!("welch one-sided p: {:.4e}", w.p_value);
                Some(w)
            }
            Err(e) => {
                println!("welch test unavailable: {e}");
                None
            }
        }
    } else {
        None
    };
    write_eval_csv(&masked, &cfg.out_dir.join("eval_rows.csv")).map_err(Failure::data)?;
    write_artifact(
        &cfg.out_dir.join("eval_report.json"),
        &cfg,
        EvalArtifact {
            mask_source: args.mask.clone(),
            mask_neurons,
            baseline,
            masked,
            welch,
        },
    )
}

fn cmd_report(args: &ReportArgs) -> CmdResult {
    let cfg = args.common.resolve()?;
    let selection: Artifact<SelectionReport> =
        read_artifact(&cfg.out_dir.join("selection_report.json"))?;
    let eval: Artifact<EvalArtifact> = read_artifact(&cfg.out_dir.join("eval_report.json"))?;
    let model = load_checkpoint(&cfg.checkpoint).map_err(Failure::data)?;

    let neurons: std::collections::BTreeSet<NeuronId> =
        selection.payload.truth_neurons.iter().copied().collect();
    let hist = layer_distribution(&neurons, model.config.n_layers);
    write_layer_csv(&hist, &cfg.out_dir.join("layer_hist.csv")).map_err(Failure::data)?;

    let categories = category_reduction_report(&eval.payload.masked, 15);
    {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(cfg.out_dir.join("category_table.csv"))
                .map_err(Failure::data)?,
        );
        writeln!(w, "category,example_count,reduction_fraction").map_err(Failure::data)?;
        for c in &categories.included {
            writeln!(w, "{},{},{}", c.category, c.example_count, c.reduction_fraction)
                .map_err(Failure::data)?;
        }
    }

    let drop_points =
        100.0 * (eval.payload.baseline.mean_accuracy - eval.payload.masked.mean_accuracy);
    println!(
        "truth neurons: {} across {} layers",
        neurons.len(),
        model.config.n_layers
    );
    println!("layer fractions: {:?}", hist.fractions);
    println!("accuracy drop: {:.1} points", drop_points);
    match eval.payload.masked.mean_probability_change {
        Some(c) => println!("average correct-probability change: {:.4}", c),
        None => println!("average correct-probability change: unavailable"),
    }
    if !categories.omitted.is_empty() {
        println!("categories omitted (fewer than 15 questions): {}", categories.omitted.len());
    }
    write_artifact(
        &cfg.out_dir.join("summary.json"),
        &cfg,
        SummaryArtifact {
            truth_neurons: selection.payload.truth_neurons.clone(),
            layer_fractions: hist.fractions.clone(),
            mean_probability_change: eval.payload.masked.mean_probability_change,
            accuracy_drop_points: drop_points,
            welch: eval.payload.welch,
            omitted_categories: categories.omitted.clone(),
        },
    )
}

/// Parses argv and runs the chosen subcommand; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Select(args) => cmd_select(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
