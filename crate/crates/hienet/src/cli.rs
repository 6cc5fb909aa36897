//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hienet_core::graph::{ppr_closed_form, ppr_iterate, CoocGraph, PprConfig};
use hienet_core::model::{self, AblationMode, HieNet};
use hienet_core::position;
use hienet_core::progressive::{default_lambda_grid, NeighborSource, PmConfig};
use hienet_core::synth;
use hienet_core::trainer::{self, BatchMap, Example};
use hienet_core::tree::CodeTree;

use crate::checkpoint;
use crate::config::{self, RunConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::manifest::{self, RunManifest};
use crate::par::Rayon;

#[derive(Debug, Parser)]
#[command(name = "hienet", version, about = "Hierarchical multi-label code prediction")]
pub struct Cli {
    /// Worker threads for batch evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigFlags {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    #[arg(long, env = "HIENET_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PmFlags {
    #[arg(long)]
    pub lambda: Option<f64>,

    #[arg(long = "pm-rounds")]
    pub pm_rounds: Option<usize>,

    #[arg(long = "pm-tau")]
    pub pm_tau: Option<f64>,

    #[arg(long = "pm-neighbors", value_parser = ["graph", "tree", "union"])]
    pub pm_neighbors: Option<String>,
}

impl PmFlags {
    fn apply(&self, mut pm: PmConfig) -> Result<PmConfig> {
        if let Some(l) = self.lambda {
            pm.lambda = l;
        }
        if let Some(r) = self.pm_rounds {
            pm.rounds = r;
        }
        if let Some(t) = self.pm_tau {
            pm.tau = t;
        }
        if let Some(n) = &self.pm_neighbors {
            pm.neighbors = NeighborSource::parse(n)?;
        }
        pm.validate()?;
        Ok(pm)
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataFlags {
    /// Directory with tree.json, train.jsonl, val.jsonl and test.jsonl.
    #[arg(long = "data-dir")]
    pub data_dir: Option<PathBuf>,

    #[arg(long)]
    pub tree: Option<PathBuf>,

    #[arg(long)]
    pub train: Option<PathBuf>,

    #[arg(long)]
    pub val: Option<PathBuf>,

    #[arg(long)]
    pub test: Option<PathBuf>,

    /// Token vocabulary size (default: the configured generator vocabulary,
    /// widened to cover every token seen).
    #[arg(long = "vocab-size")]
    pub vocab_size: Option<usize>,
}

impl DataFlags {
    fn path(&self, explicit: &Option<PathBuf>, file: &str) -> Result<PathBuf> {
        explicit
            .clone()
            .or_else(|| self.data_dir.as_ref().map(|d| d.join(file)))
            .ok_or_else(|| Error::Config(format!("no path for {file}; pass --data-dir or the file flag")))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted structure.
    GenData {
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        /// Start from the sparse planted-clique preset.
        #[arg(long = "planted-cliques")]
        planted_cliques: bool,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Build the code tree from a TAB-separated code list.
    BuildTree {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write raw stack tree positions as CSV.
    EncodePositions {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the label co-occurrence graph of a dataset.
    BuildGraph {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "binary", value_parser = ["binary", "counts"])]
        weighting: String,
    },
    /// Propagate a feature matrix over a graph by personalized PageRank.
    Ppr {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        d: f64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fixed-point iteration instead of the linear solve.
        #[arg(long)]
        iterate: bool,
        #[arg(long = "max-iters", default_value_t = 50)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Train a model and write a checkpoint, logs and validation metrics.
    Train {
        #[command(flatten)]
        data: DataFlags,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        cfg: ConfigFlags,
        #[command(flatten)]
        pm: PmFlags,
    },
    /// Score a dataset and write the metric table.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        pm: PmFlags,
    },
    /// Write ranked predictions as JSON lines.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only list the best `top` codes per document.
        #[arg(long)]
        top: Option<usize>,
        /// Include the progressive-mechanism trace (gold-aware).
        #[arg(long)]
        trace: bool,
        #[command(flatten)]
        pm: PmFlags,
    },
    /// Train and test every ablation mode from the same seed and data.
    Ablate {
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of full,no_pm,no_bhpe,no_pp.
        #[arg(long)]
        modes: Option<String>,
        #[command(flatten)]
        cfg: ConfigFlags,
        #[command(flatten)]
        pm: PmFlags,
    },
    /// Evaluate a trained model over a grid of blend factors.
    LambdaSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated values (default 0, 0.1, ..., 1).
        #[arg(long)]
        values: Option<String>,
    },
    /// Check the full-model gradient against central differences.
    GradCheck {
        #[arg(long, default_value_t = 3)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0.3)]
        lambda: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_config(flags: &ConfigFlags) -> Result<RunConfig> {
    let mut rc = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &flags.set {
        rc.set_pair(pair)?;
    }
    if let Some(s) = flags.seed {
        rc.gen.seed = s;
        rc.train.seed = s;
    }
    Ok(rc)
}

fn parse_modes(s: Option<&str>) -> Result<Vec<AblationMode>> {
    match s {
        None => Ok(AblationMode::ALL.to_vec()),
        Some(s) => s.split(',').map(|m| Ok(AblationMode::parse(m.trim())?)).collect(),
    }
}

fn parse_values(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad value `{v}`"))))
        .collect()
}

fn load_examples(tree: &CodeTree, path: &Path, man: &mut RunManifest) -> Result<(Vec<String>, Vec<Example>)> {
    man.input(path)?;
    let docs = io::read_dataset(path)?;
    let ids = docs.iter().map(|d| d.doc_id.clone()).collect();
    Ok((ids, trainer::examples(tree, &docs)?))
}

fn vocab_for(flag: Option<usize>, rc: &RunConfig, sets: &[&[Example]]) -> usize {
    flag.unwrap_or_else(|| {
        let seen = sets.iter().flat_map(|s| s.iter()).flat_map(|e| e.tokens.iter()).max().map_or(0, |&t| t + 1);
        rc.gen.vocab_size.max(seen)
    })
}

fn gen_data(out_dir: &Path, planted: bool, flags: &ConfigFlags) -> Result<()> {
    let mut rc = RunConfig::default();
    if planted {
        rc.gen = synth::GenConfig::planted_cliques();
    }
    if let Some(p) = &flags.config {
        rc.apply_text(&io::read_text(p)?, p)?;
    }
    for pair in &flags.set {
        rc.set_pair(pair)?;
    }
    if let Some(s) = flags.seed {
        rc.gen.seed = s;
    }
    let corpus = synth::generate(&rc.gen)?;
    let mut man = RunManifest::new("gen-data");
    man.seed = Some(rc.gen.seed);
    man.config = rc.to_pairs().into_iter().filter(|(k, _)| k.starts_with("gen.")).collect();
    if let Some(p) = &flags.config {
        man.input(p)?;
    }
    let files: [(&str, String); 7] = [
        ("codes.tsv", io::format_codes(&corpus.codes)),
        ("tree.json", io::tree_to_json(&corpus.tree)?),
        ("train.jsonl", io::format_dataset(&corpus.train)?),
        ("val.jsonl", io::format_dataset(&corpus.val)?),
        ("test.jsonl", io::format_dataset(&corpus.test)?),
        ("planted.json", io::planted_to_json(&corpus.planted)?),
        ("config.txt", rc.to_text()),
    ];
    for (name, text) in files {
        let p = out_dir.join(name);
        io::write_text(&p, &text)?;
        man.output(&p);
    }
    man.write(&manifest::path_for(out_dir, true))
}

fn train_cmd(data: &DataFlags, out_dir: &Path, mode: Option<&str>, flags: &ConfigFlags, pm: &PmFlags) -> Result<()> {
    let mut rc = run_config(flags)?;
    if let Some(m) = mode {
        rc.model.mode = AblationMode::parse(m)?;
    }
    rc.model.pm = pm.apply(rc.model.pm)?;
    rc.validate()?;
    let mut man = RunManifest::new("train");
    if let Some(p) = &flags.config {
        man.input(p)?;
    }
    let tree_path = data.path(&data.tree, "tree.json")?;
    man.input(&tree_path)?;
    let tree = io::read_tree(&tree_path)?;
    let (_, train) = load_examples(&tree, &data.path(&data.train, "train.jsonl")?, &mut man)?;
    let (_, val) = load_examples(&tree, &data.path(&data.val, "val.jsonl")?, &mut man)?;
    let vocab = vocab_for(data.vocab_size, &rc, &[&train, &val]);
    let mut model = trainer::init_model(rc.train.seed, rc.model.clone(), tree, vocab, &train)?;
    let report = trainer::train(&mut model, &train, &val, &rc.train, &Rayon, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val micro-F1 {:.4}  macro-F1 {:.4}  jaccard@20 {:.4}{}",
            e.epoch,
            e.train_loss,
            e.val.micro_f1,
            e.val.macro_f1,
            e.val.jaccard_top20,
            if e.improved { "  *" } else { "" }
        );
    })?;
    let (_, val_result) = trainer::evaluate(&model, &val, &Rayon)?;

    let ck = out_dir.join("checkpoint.json");
    checkpoint::save(&ck, &model)?;
    let log = out_dir.join("train_log.csv");
    io::write_text(&log, &io::format_epoch_log(&report.log))?;
    let metrics = out_dir.join("val_metrics.csv");
    io::write_text(&metrics, &io::format_metric_table("mode", &[(model.cfg.mode.as_str(), val_result)]))?;
    let vpt = out_dir.join("vpt.csv");
    io::write_text(&vpt, &io::format_code_rows(&model.ctx.tree, &model.ctx.vpt, false))?;
    let bpr = out_dir.join("bpr_log.csv");
    let mut bpr_text = String::from("epoch,loss\n");
    if let Some(b) = &report.bpr {
        for (i, l) in b.losses.iter().enumerate() {
            bpr_text.push_str(&format!("{i},{l}\n"));
        }
    }
    io::write_text(&bpr, &bpr_text)?;
    for p in [&ck, &log, &metrics, &vpt, &bpr] {
        man.output(p);
    }
    man.seed = Some(rc.train.seed);
    man.config = rc.to_pairs().into_iter().filter(|(k, _)| !k.starts_with("gen.") || k == "gen.vocab_size").collect();
    man.config.push(("vocab_size".into(), vocab.to_string()));
    eprintln!(
        "best epoch {} of {}, val micro-F1 {:.4}{}",
        report.best_epoch,
        report.epochs_run,
        report.best_val_micro_f1,
        if report.stopped_early { " (early stop)" } else { "" }
    );
    man.write(&manifest::path_for(out_dir, true))
}

fn load_model(path: &Path, man: &mut RunManifest, mode: Option<&str>, pm: &PmFlags) -> Result<HieNet> {
    man.input(path)?;
    let mut model = checkpoint::load(path)?;
    if let Some(m) = mode {
        model.set_mode(AblationMode::parse(m)?)?;
    }
    model.set_pm(pm.apply(model.cfg.pm)?)?;
    man.config = config::model_pairs(&model.cfg);
    Ok(model)
}

fn evaluate_cmd(ck: &Path, dataset: &Path, out: &Path, mode: Option<&str>, pm: &PmFlags) -> Result<()> {
    let mut man = RunManifest::new("evaluate");
    let model = load_model(ck, &mut man, mode, pm)?;
    let (_, data) = load_examples(&model.ctx.tree, dataset, &mut man)?;
    let (_, r) = trainer::evaluate(&model, &data, &Rayon)?;
    io::write_text(out, &io::format_metric_table("mode", &[(model.cfg.mode.as_str(), r)]))?;
    man.output(out);
    man.write(&manifest::path_for(out, false))
}

fn predict_cmd(ck: &Path, dataset: &Path, out: &Path, top: Option<usize>, trace: bool, pm: &PmFlags) -> Result<()> {
    let mut man = RunManifest::new("predict");
    let model = load_model(ck, &mut man, None, pm)?;
    let (ids, data) = load_examples(&model.ctx.tree, dataset, &mut man)?;
    let preds = Rayon
        .map(data.len(), |i| {
            let gold = model::gold_vector(model.num_labels(), &data[i].gold);
            model.predict(&data[i].tokens, trace.then_some(gold.as_slice()))
        })
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let traces: Vec<_> = preds.into_iter().map(|p| p.trace).collect();
    let text = io::format_predictions(&model.ctx.tree, &ids, &probs, trace.then_some(traces.as_slice()), top)?;
    io::write_text(out, &text)?;
    man.output(out);
    man.write(&manifest::path_for(out, false))
}

fn ablate_cmd(data: &DataFlags, out: &Path, modes: Option<&str>, flags: &ConfigFlags, pm: &PmFlags) -> Result<()> {
    let mut rc = run_config(flags)?;
    rc.model.pm = pm.apply(rc.model.pm)?;
    rc.validate()?;
    let modes = parse_modes(modes)?;
    let mut man = RunManifest::new("ablate");
    let tree_path = data.path(&data.tree, "tree.json")?;
    man.input(&tree_path)?;
    let tree = io::read_tree(&tree_path)?;
    let (_, train) = load_examples(&tree, &data.path(&data.train, "train.jsonl")?, &mut man)?;
    let (_, val) = load_examples(&tree, &data.path(&data.val, "val.jsonl")?, &mut man)?;
    let (_, test) = load_examples(&tree, &data.path(&data.test, "test.jsonl")?, &mut man)?;
    let vocab = vocab_for(data.vocab_size, &rc, &[&train, &val, &test]);
    let rows = trainer::ablate(&rc.model, &tree, vocab, &train, &val, &test, &rc.train, &modes, &Rayon)?;
    let table: Vec<(&str, _)> = rows.iter().map(|r| (r.mode.as_str(), r.test.clone())).collect();
    io::write_text(out, &io::format_metric_table("mode", &table))?;
    man.output(out);
    man.seed = Some(rc.train.seed);
    man.config = rc.to_pairs();
    man.write(&manifest::path_for(out, false))
}

fn sweep_cmd(ck: &Path, dataset: &Path, out: &Path, values: Option<&str>) -> Result<()> {
    let mut man = RunManifest::new("lambda-sweep");
    let model = load_model(ck, &mut man, None, &PmFlags::default())?;
    let (_, data) = load_examples(&model.ctx.tree, dataset, &mut man)?;
    let values = match values {
        Some(v) => parse_values(v)?,
        None => default_lambda_grid(),
    };
    let rows = trainer::lambda_sweep(&model, &data, &values, &Rayon)?;
    io::write_text(out, &io::format_metric_table("lambda", &rows))?;
    man.output(out);
    man.write(&manifest::path_for(out, false))
}

fn grad_check_cmd(seed: u64, eps: f64, lambda: f64, out: Option<&Path>) -> Result<bool> {
    let toy = model::toy_instance(seed, 6, 16, 8, lambda)?;
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (tokens, gold) in &toy.docs {
        let report = model::full_grad_check(&toy.model, tokens, gold, None, eps)?;
        worst = worst.max(report.max_rel_err);
        coords += report.coords_checked;
    }
    let ok = worst <= 1e-4;
    let text = format!(
        "{}\n",
        serde_json::json!({ "docs": toy.docs.len(), "coords_checked": coords, "max_rel_err": worst, "tolerance": 1e-4, "pass": ok })
    );
    match out {
        Some(p) => {
            io::write_text(p, &text)?;
            let mut man = RunManifest::new("grad-check");
            man.seed = Some(seed);
            man.output(p);
            man.write(&manifest::path_for(p, false))?;
        }
        None => print!("{text}"),
    }
    Ok(ok)
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        // A second initialization in the same process is harmless to ignore.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenData {
            out_dir,
            planted_cliques,
            cfg,
        } => gen_data(&out_dir, planted_cliques, &cfg)?,
        Command::BuildTree { codes, out } => {
            let mut man = RunManifest::new("build-tree");
            man.input(&codes)?;
            let tree = CodeTree::build(&io::read_codes(&codes)?)?;
            io::write_tree(&out, &tree)?;
            man.output(&out);
            man.write(&manifest::path_for(&out, false))?;
        }
        Command::EncodePositions { tree, n, k, out } => {
            let mut man = RunManifest::new("encode-positions");
            man.input(&tree)?;
            let t = io::read_tree(&tree)?;
            let n = n.unwrap_or(t.max_branching()).max(1);
            let k = k.unwrap_or(t.max_depth()).max(1);
            let pos = position::encode_all(&t, n, k)?;
            io::write_text(&out, &io::format_code_rows(&t, &pos, true))?;
            man.config = vec![("n".into(), n.to_string()), ("k".into(), k.to_string())];
            man.output(&out);
            man.write(&manifest::path_for(&out, false))?;
        }
        Command::BuildGraph {
            dataset,
            tree,
            out,
            weighting,
        } => {
            let mut man = RunManifest::new("build-graph");
            man.input(&tree)?;
            let t = io::read_tree(&tree)?;
            let (_, ex) = load_examples(&t, &dataset, &mut man)?;
            let sets: Vec<Vec<usize>> = ex.into_iter().map(|e| e.gold).collect();
            let g = CoocGraph::build(t.num_labels(), &sets, config::parse_weighting(&weighting)?)?;
            io::write_text(&out, &io::format_edges(&g))?;
            man.config = vec![("weighting".into(), weighting), ("num_labels".into(), t.num_labels().to_string())];
            man.output(&out);
            man.write(&manifest::path_for(&out, false))?;
        }
        Command::Ppr {
            edges,
            d,
            input,
            out,
            iterate,
            max_iters,
            tol,
        } => {
            let mut man = RunManifest::new("ppr");
            man.input(&edges)?;
            man.input(&input)?;
            let x = io::read_matrix(&input)?;
            let g = CoocGraph::from_edges(x.rows(), &io::read_edges(&edges)?)?;
            let cfg = PprConfig { d, max_iters, tol };
            let z = if iterate {
                let r = ppr_iterate(&g, &cfg, &x)?;
                eprintln!("iterations {}  residual {:e}  converged {}", r.iterations, r.residual, r.converged);
                r.z
            } else {
                ppr_closed_form(&g, &cfg, &x)?
            };
            io::write_text(&out, &io::format_matrix(&z))?;
            man.config = vec![
                ("d".into(), d.to_string()),
                ("mode".into(), if iterate { "iterate" } else { "closed_form" }.into()),
                ("max_iters".into(), max_iters.to_string()),
                ("tol".into(), tol.to_string()),
            ];
            man.output(&out);
            man.write(&manifest::path_for(&out, false))?;
        }
        Command::Train {
            data,
            out_dir,
            mode,
            cfg,
            pm,
        } => train_cmd(&data, &out_dir, mode.as_deref(), &cfg, &pm)?,
        Command::Evaluate {
            checkpoint,
            dataset,
            out,
            mode,
            pm,
        } => evaluate_cmd(&checkpoint, &dataset, &out, mode.as_deref(), &pm)?,
        Command::Predict {
            checkpoint,
            dataset,
            out,
            top,
            trace,
            pm,
        } => predict_cmd(&checkpoint, &dataset, &out, top, trace, &pm)?,
        Command::Ablate {
            data,
            out,
            modes,
            cfg,
            pm,
        } => ablate_cmd(&data, &out, modes.as_deref(), &cfg, &pm)?,
        Command::LambdaSweep {
            checkpoint,
            dataset,
            out,
            values,
        } => sweep_cmd(&checkpoint, &dataset, &out, values.as_deref())?,
        Command::GradCheck { seed, eps, lambda, out } => return grad_check_cmd(seed, eps, lambda, out.as_deref()),
    }
    Ok(true)
}

/// Parses `args` and runs; exit code 0 on success, 1 on failure, 2 on
/// usage errors.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
