//! `cgmn`: dataset generation, exact edit-distance labeling, training,
//! evaluation and prediction for the contrastive graph-matching pipeline.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cgmn_core::config::{self, ConfigError, Task, TrainConfig, SEED_ENV_VAR};
use cgmn_core::ged;
use cgmn_core::graph::{
    load_graphs, load_pair_records, resolve_pairs, split_dataset, write_graphs,
    write_pair_records, DatasetSplit, Graph, GraphError, GraphPair, PairRecord,
};
use cgmn_core::synth::{self, SynthError};
use cgmn_core::train::{evaluate, predict, train, Checkpoint, TrainError};

#[derive(Parser)]
#[command(name = "cgmn", version, about = "Self-supervised graph similarity learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic oracle-labeled dataset.
    Generate {
        /// Number of graph pairs.
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 5)]
        n_min: usize,
        #[arg(long, default_value_t = 8)]
        n_max: usize,
        /// Feature dimension; node labels are one-hot in this many classes.
        #[arg(long, default_value_t = 4)]
        dim: usize,
        /// Maximum number of edits between the two graphs of a pair (ged task).
        #[arg(long, default_value_t = 4)]
        edit_budget: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory for graphs.jsonl, pairs.jsonl and manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// ged: edited copies with exact distances; bsd: +1/-1 pairs.
        #[arg(long, default_value = "ged")]
        task: String,
    },
    /// Fill exact edit distances into a pair file.
    Ged {
        #[arg(long)]
        graphs: PathBuf,
        /// Pair file to label; omit with --all-pairs to label every pair.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Label the complete pair set of the graphs file instead.
        #[arg(long, default_value_t = false)]
        all_pairs: bool,
        #[arg(long, default_value_t = ged::DEFAULT_NODE_LIMIT)]
        node_limit: usize,
    },
    /// Train on a pair file and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-path config overrides, e.g. --set loss.tau=0.25.
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        graphs: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Split fractions train,valid,test; train on the first slice and
        /// record the split beside the checkpoint.
        #[arg(long)]
        split: Option<String>,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        graphs: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// ged or bsd; defaults to the checkpoint's configured task.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate only one slice of a recorded split.
        #[arg(long)]
        split_file: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        subset: String,
        /// Sweep a config key over start:stop:step, retraining per value,
        /// e.g. --sweep augment.p_mask=0.1:0.9:0.1.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Score pairs with a trained checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        graphs: Option<PathBuf>,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        task: Option<String>,
    },
}

enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Divergence(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ged::GedError> for CliError {
    fn from(e: ged::GedError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::BadRange(..) | SynthError::Intractable { .. } | SynthError::ZeroDim => {
                CliError::Config(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => CliError::Config(c.to_string()),
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate {
            count,
            n_min,
            n_max,
            dim,
            edit_budget,
            seed,
            out,
            task,
        } => cmd_generate(count, (n_min, n_max), dim, edit_budget, seed, &out, &task),
        Command::Ged {
            graphs,
            pairs,
            out,
            all_pairs,
            node_limit,
        } => cmd_ged(&graphs, pairs.as_deref(), &out, all_pairs, node_limit),
        Command::Train {
            config,
            set,
            graphs,
            pairs,
            out,
            split,
        } => cmd_train(config.as_deref(), &set, graphs, pairs, out, split),
        Command::Eval {
            ckpt,
            graphs,
            pairs,
            task,
            out,
            split_file,
            subset,
            sweep,
            config,
            set,
        } => cmd_eval(EvalArgs {
            ckpt,
            graphs,
            pairs,
            task,
            out,
            split_file,
            subset,
            sweep,
            config,
            set,
        }),
        Command::Predict {
            ckpt,
            graphs,
            pairs,
            out,
            task,
        } => cmd_predict(&ckpt, graphs, &pairs, &out, task),
    }
}

fn parse_task(s: &str) -> Result<Task, CliError> {
    match s {
        "ged" => Ok(Task::Ged),
        "bsd" => Ok(Task::Bsd),
        other => Err(CliError::Config(format!(
            "task must be ged or bsd, got {other:?}"
        ))),
    }
}

fn env_seed_override(seed: u64) -> Result<u64, CliError> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(raw) => raw
            .parse()
            .map_err(|_| CliError::Config(format!("invalid {SEED_ENV_VAR} value {raw:?}"))),
        Err(_) => Ok(seed),
    }
}

fn write_manifest(dir: &Path, command: &str, seed: u64, config: serde_json::Value) -> Result<(), CliError> {
    let manifest = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
    });
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn cmd_generate(
    count: usize,
    n_range: (usize, usize),
    dim: usize,
    edit_budget: u32,
    seed: u64,
    out: &Path,
    task: &str,
) -> Result<(), CliError> {
    let task = parse_task(task)?;
    let seed = env_seed_override(seed)?;

    let pairs: Vec<GraphPair> = match task {
        Task::Ged => synth::generate_synthetic_pairs(count, n_range, dim, edit_budget, seed)?
            .into_iter()
            .map(|sp| sp.pair)
            .collect(),
        Task::Bsd => synth::generate_bsd_pairs(count, n_range, dim, seed)?,
    };

    let mut graphs = Vec::with_capacity(2 * pairs.len());
    let mut records = Vec::with_capacity(pairs.len());
    for p in &pairs {
        graphs.push(p.g1.clone());
        graphs.push(p.g2.clone());
        records.push(PairRecord {
            g1: p.g1.id.clone(),
            g2: p.g2.id.clone(),
            ged: p.ged,
            label: p.bsd_label,
        });
    }

    std::fs::create_dir_all(out)?;
    write_graphs(out.join("graphs.jsonl"), &graphs)?;
    write_pair_records(out.join("pairs.jsonl"), &records)?;
    write_manifest(
        out,
        "generate",
        seed,
        serde_json::json!({
            "count": count,
            "n_min": n_range.0,
            "n_max": n_range.1,
            "dim": dim,
            "edit_budget": edit_budget,
            "task": task.to_string(),
        }),
    )?;
    println!(
        "generated {} pairs ({} graphs) into {}",
        records.len(),
        graphs.len(),
        out.display()
    );
    Ok(())
}

fn cmd_ged(
    graphs_path: &Path,
    pairs_path: Option<&Path>,
    out: &Path,
    all_pairs: bool,
    node_limit: usize,
) -> Result<(), CliError> {
    let graphs = load_graphs(graphs_path)?;
    let by_id: BTreeMap<&str, &Graph> = graphs.iter().map(|g| (g.id.as_str(), g)).collect();

    let mut records: Vec<PairRecord> = if all_pairs {
        let mut out = Vec::new();
        for i in 0..graphs.len() {
            for j in (i + 1)..graphs.len() {
                out.push(PairRecord {
                    g1: graphs[i].id.clone(),
                    g2: graphs[j].id.clone(),
                    ged: None,
                    label: None,
                });
            }
        }
        out
    } else {
        let path = pairs_path.ok_or_else(|| {
            CliError::Config("either --pairs or --all-pairs is required".into())
        })?;
        load_pair_records(path)?
    };

    for r in &mut records {
        let g1 = *by_id
            .get(r.g1.as_str())
            .ok_or_else(|| CliError::Data(format!("pair references unknown graph id {:?}", r.g1)))?;
        let g2 = *by_id
            .get(r.g2.as_str())
            .ok_or_else(|| CliError::Data(format!("pair references unknown graph id {:?}", r.g2)))?;
        let (cost, _) = ged::ged_exact(g1, g2, node_limit)?;
        r.ged = Some(cost);
    }

    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_pair_records(out, &records)?;
    println!("labeled {} pairs into {}", records.len(), out.display());
    Ok(())
}

fn parse_split(spec: &str) -> Result<(f64, f64, f64), CliError> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Config(format!(
            "--split must be three comma-separated fractions, got {spec:?}"
        )));
    }
    let mut f = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        f[i] = p
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("bad split fraction {p:?}")))?;
    }
    Ok((f[0], f[1], f[2]))
}

struct LoadedData {
    pairs: Vec<GraphPair>,
}

fn load_dataset(
    graphs: Option<&Path>,
    pairs: Option<&Path>,
    cfg: &TrainConfig,
) -> Result<LoadedData, CliError> {
    let graphs_path = graphs
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.graphs.clone())
        .ok_or_else(|| CliError::Config("no graphs file given (flag --graphs or data.graphs)".into()))?;
    let pairs_path = pairs
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.pairs.clone())
        .ok_or_else(|| CliError::Config("no pairs file given (flag --pairs or data.pairs)".into()))?;
    let graphs = load_graphs(&graphs_path)?;
    let records = load_pair_records(&pairs_path)?;
    let pairs = resolve_pairs(&records, &graphs)?;
    Ok(LoadedData { pairs })
}

fn out_dir(flag: Option<PathBuf>, cfg: &TrainConfig) -> PathBuf {
    flag.or_else(|| cfg.data.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."))
}

fn cmd_train(
    config_path: Option<&Path>,
    overrides: &[String],
    graphs: Option<PathBuf>,
    pairs: Option<PathBuf>,
    out: Option<PathBuf>,
    split: Option<String>,
) -> Result<(), CliError> {
    let cfg = config::load_config(config_path, overrides)?;
    let data = load_dataset(graphs.as_deref(), pairs.as_deref(), &cfg)?;
    let dir = out_dir(out, &cfg);
    std::fs::create_dir_all(&dir)?;

    let (train_pairs, split_record): (Vec<GraphPair>, Option<DatasetSplit>) = match &split {
        Some(spec) => {
            let fractions = parse_split(spec)?;
            let s = split_dataset(data.pairs.len(), fractions, cfg.train.seed)?;
            let subset = s.train.iter().map(|&i| data.pairs[i].clone()).collect();
            (subset, Some(s))
        }
        None => (data.pairs.clone(), None),
    };

    let ckpt = train(&train_pairs, &cfg)?;

    ckpt.save(dir.join("checkpoint.json"))?;
    let mut curve = String::from("epoch,loss\n");
    for (i, loss) in ckpt.loss_history.iter().enumerate() {
        curve.push_str(&format!("{},{}\n", i + 1, loss));
    }
    std::fs::write(dir.join("loss_curve.csv"), curve)?;
    if let Some(s) = &split_record {
        std::fs::write(dir.join("split.json"), serde_json::to_string_pretty(s)?)?;
    }
    write_manifest(&dir, "train", cfg.train.seed, serde_json::to_value(&cfg)?)?;
    println!(
        "trained {} epochs on {} pairs; checkpoint at {}",
        ckpt.epoch,
        train_pairs.len(),
        dir.join("checkpoint.json").display()
    );
    Ok(())
}

struct EvalArgs {
    ckpt: Option<PathBuf>,
    graphs: Option<PathBuf>,
    pairs: Option<PathBuf>,
    task: Option<String>,
    out: Option<PathBuf>,
    split_file: Option<PathBuf>,
    subset: String,
    sweep: Option<String>,
    config: Option<PathBuf>,
    set: Vec<String>,
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    if let Some(spec) = &args.sweep {
        return cmd_sweep(&args, spec);
    }

    let ckpt_path = args
        .ckpt
        .as_ref()
        .ok_or_else(|| CliError::Config("--ckpt is required unless --sweep is given".into()))?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let data = load_dataset(args.graphs.as_deref(), args.pairs.as_deref(), &ckpt.config)?;
    let task = match &args.task {
        Some(t) => parse_task(t)?,
        None => ckpt.config.train.task,
    };

    let pairs = select_subset(&data.pairs, args.split_file.as_deref(), &args.subset)?;
    let report = evaluate(&ckpt, &pairs, task)?;

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| out_dir(None, &ckpt.config).join("metrics.json"));
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&out, report.to_json())?;
    if let Some(dir) = out.parent() {
        write_manifest(dir, "eval", ckpt.config.train.seed, serde_json::to_value(&ckpt.config)?)?;
    }
    println!("{}", report.to_json());
    Ok(())
}

fn select_subset(
    pairs: &[GraphPair],
    split_file: Option<&Path>,
    subset: &str,
) -> Result<Vec<GraphPair>, CliError> {
    let Some(path) = split_file else {
        return Ok(pairs.to_vec());
    };
    let text = std::fs::read_to_string(path)?;
    let split: DatasetSplit =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("bad split file: {e}")))?;
    let indices = match subset {
        "train" => &split.train,
        "valid" => &split.valid,
        "test" => &split.test,
        other => {
            return Err(CliError::Config(format!(
                "subset must be train, valid or test, got {other:?}"
            )))
        }
    };
    indices
        .iter()
        .map(|&i| {
            pairs.get(i).cloned().ok_or_else(|| {
                CliError::Data(format!("split index {i} out of range for {} pairs", pairs.len()))
            })
        })
        .collect()
}

/// Fig-5-style sweep: retrain per value of one config key and evaluate on
/// the test slice of a fresh split.
fn cmd_sweep(args: &EvalArgs, spec: &str) -> Result<(), CliError> {
    let (key, values) = parse_sweep(spec)?;
    let base_overrides = args.set.clone();

    let mut rows = Vec::new();
    for v in &values {
        let mut overrides = base_overrides.clone();
        overrides.push(format!("{key}={v}"));
        let cfg = config::load_config(args.config.as_deref(), &overrides)?;
        let data = load_dataset(args.graphs.as_deref(), args.pairs.as_deref(), &cfg)?;
        let split = split_dataset(data.pairs.len(), (0.6, 0.2, 0.2), cfg.train.seed)?;
        let train_pairs: Vec<GraphPair> = split.train.iter().map(|&i| data.pairs[i].clone()).collect();
        let test_pairs: Vec<GraphPair> = split.test.iter().map(|&i| data.pairs[i].clone()).collect();
        let ckpt = train(&train_pairs, &cfg)?;
        let report = evaluate(&ckpt, &test_pairs, cfg.train.task)?;
        rows.push((*v, report));
    }

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("sweep.csv"));
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut csv = String::from("value,mse,rho,tau,auc\n");
    for (v, r) in &rows {
        let fmt = |x: Option<f64>| x.map_or(String::new(), |x| x.to_string());
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            v,
            fmt(r.mse),
            fmt(r.rho),
            fmt(r.tau),
            fmt(r.auc)
        ));
    }
    std::fs::write(&out, csv)?;
    println!("swept {key} over {} values into {}", values.len(), out.display());
    Ok(())
}

fn parse_sweep(spec: &str) -> Result<(String, Vec<f64>), CliError> {
    let bad = || CliError::Config(format!("--sweep must look like key=start:stop:step, got {spec:?}"));
    let (key, range) = spec.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = range.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if step <= 0.0 || stop < start {
        return Err(bad());
    }
    let mut values = Vec::new();
    let mut v = start;
    while v <= stop + 1e-12 {
        values.push((v * 1e12).round() / 1e12);
        v += step;
    }
    Ok((key.trim().to_string(), values))
}

fn cmd_predict(
    ckpt_path: &Path,
    graphs: Option<PathBuf>,
    pairs_path: &Path,
    out: &Path,
    task: Option<String>,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let data = load_dataset(graphs.as_deref(), Some(pairs_path), &ckpt.config)?;
    let task = match &task {
        Some(t) => parse_task(t)?,
        None => ckpt.config.train.task,
    };
    let predictions = predict(&ckpt, &data.pairs, task)?;

    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut text = String::new();
    for p in &predictions {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    std::fs::write(out, text)?;
    println!("wrote {} predictions to {}", predictions.len(), out.display());
    Ok(())
}
