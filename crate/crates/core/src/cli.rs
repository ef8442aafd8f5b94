//! Command-line front end: `gen-data`, `train`, `eval` and `ablate`.
//!
//! Errors map to exit codes 1 (usage or configuration), 2 (data) and
//! 3 (runtime).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::synthetic::write_market_tree;
use crate::data::{generate_synthetic, load_dataset, split_by_domain, LoadOptions, ReidDataset, Split};
use crate::evaluation::{evaluate_scores, ranking_grid, stream_scores, EvalReport, FusionMode, LabelColumns};
use crate::matching::Mixing;
use crate::norm::NormMode;
use crate::training::{train, TrainData, TrainOutputs};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "tal", version, about = "Two-stream domain-generalizable retrieval")]
pub struct Cli {
    /// Log filter, e.g. `info` or `tal=debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir`; every other path is relative to it.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic source domains and held-out target to disk.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Write into a non-empty data directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write checkpoints and metrics.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the target domain.
    Eval {
        #[arg(long, default_value = "checkpoint.tal")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/default")]
        output_dir: PathBuf,
        /// Data root; defaults to the checkpoint's `data_root`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Repeatable; one report per mode.
        #[arg(long, value_enum, default_values_t = [FusionArg::Sum])]
        fusion: Vec<FusionArg>,
        /// Also write every query's ranking as JSON.
        #[arg(long)]
        dump_rankings: bool,
        /// Rows of the ranking grid image; 0 disables it.
        #[arg(long, default_value_t = 0)]
        grid: usize,
    },
    /// Train and evaluate every variant of one design axis.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Sum,
    RawSum,
    Ds,
    Di,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Sum => FusionMode::Sum,
            FusionArg::RawSum => FusionMode::RawSum,
            FusionArg::Ds => FusionMode::Ds,
            FusionArg::Di => FusionMode::Di,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Invariant-stream normalization: average pooling, plain BN, adaptive.
    Dabn,
    /// Expert mixing: average pooling, voting, learned attention.
    Attention,
    /// Matching scales: stage 1, stage 2, both.
    Scales,
}

/// Loads the config and applies command-line overrides.
pub fn effective_config(common: &CommonArgs, epochs: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &ExperimentConfig, name: &str) -> Result<()> {
    write_file(&cfg.output_dir.join(name), cfg.to_toml()?)
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<PathBuf> {
    let root = cfg.data_dir();
    if !force && root.is_dir() {
        let mut entries = fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
        if entries.next().is_some() {
            return Err(Error::Data(format!(
                "{} is not empty; pass --force to overwrite",
                root.display()
            )));
        }
    }
    let mut bundle = generate_synthetic(&cfg.synthetic_config())?;
    for (d, name) in bundle.train.iter_mut().zip(&cfg.train_domains) {
        d.name = name.clone();
    }
    let written = write_market_tree(&bundle, &root, &cfg.target_domain)?;
    echo_config(cfg, "gen_data_config.toml")?;
    log::info!("wrote {} images under {}", written.len(), root.display());
    Ok(root)
}

/// Source domains in config order; with `camera_as_domain` every camera of
/// every source becomes a domain while identities stay linked.
pub fn load_training_data(cfg: &ExperimentConfig) -> Result<TrainData> {
    let root = cfg.data_dir();
    if !cfg.camera_as_domain {
        let domains = cfg
            .train_domains
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let opts = LoadOptions {
                    domain: Some(i),
                    camera_as_domain: false,
                };
                load_dataset(&root.join(name), cfg.data_layout, Split::Train, opts)
            })
            .collect::<Result<Vec<_>>>()?;
        return TrainData::new(domains);
    }
    let mut domains = Vec::new();
    let mut sources = Vec::new();
    for name in &cfg.train_domains {
        let opts = LoadOptions {
            domain: None,
            camera_as_domain: true,
        };
        let mut source = load_dataset(&root.join(name), cfg.data_layout, Split::Train, opts)?;
        let offset = domains.len();
        for r in &mut source.records {
            r.domain += offset;
        }
        domains.extend(split_by_domain(&source));
        sources.push(source);
    }
    TrainData::with_hybrid(domains, crate::data::hybrid_view(&sources)?)
}

pub fn load_target(cfg: &ExperimentConfig, root: &Path) -> Result<(ReidDataset, ReidDataset)> {
    let dir = root.join(&cfg.target_domain);
    let opts = LoadOptions::default();
    Ok((
        load_dataset(&dir, cfg.data_layout, Split::Query, opts)?,
        load_dataset(&dir, cfg.data_layout, Split::Gallery, opts)?,
    ))
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let data = load_training_data(cfg)?;
    echo_config(cfg, "effective_config.toml")?;
    let resume = resume.map(|p| Checkpoint::load(&cfg.resolve(p))).transpose()?;
    let outputs = TrainOutputs {
        dir: cfg.output_dir.clone(),
    };
    train(cfg, &data, Some(&outputs), resume.as_ref())?;
    Ok(outputs.checkpoint())
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    pub data: Option<PathBuf>,
    pub fusion: Vec<FusionMode>,
    pub dump_rankings: bool,
    pub grid: usize,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<EvalReport>> {
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            args.output_dir.join(p)
        }
    };
    let ckpt_path = resolve(&args.checkpoint);
    if !ckpt_path.is_file() {
        return Err(Error::Data(format!("checkpoint {} not found", ckpt_path.display())));
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let cfg = &ckpt.header.config;
    let model = ckpt.model()?;
    let root = resolve(args.data.as_deref().unwrap_or(&cfg.data_root));
    let (query, gallery) = load_target(cfg, &root)?;
    let scores = stream_scores(&model, &query, &gallery, &cfg.pixel_norm())?;
    let labels = LabelColumns::new(&query, &gallery);
    let dir = args.output_dir.join("eval");
    let mut reports = Vec::new();
    for &mode in &args.fusion {
        let (result, report) = evaluate_scores(&scores, &labels.view(), mode)?;
        report.write(&dir)?;
        print!("{}", report.to_text());
        if args.dump_rankings {
            write_file(
                &dir.join(format!("rankings_{}.json", mode.name())),
                serde_json::to_string(&result.queries)?,
            )?;
        }
        if args.grid > 0 {
            let path = dir.join(format!("ranking_grid_{}.png", mode.name()));
            ranking_grid(&result, &query, &gallery, args.grid, 10)?
                .save(&path)
                .map_err(|source| Error::Image { path, source })?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// One trained-and-evaluated variant of an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub ds: EvalReport,
    pub di: EvalReport,
    pub fused: EvalReport,
}

pub fn ablation_variants(base: &ExperimentConfig, axis: Axis) -> Vec<(String, ExperimentConfig)> {
    let with = |name: &str, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c.output_dir = base.output_dir.join(format!("ablate_{}", axis_name(axis))).join(name.replace([' ', '+'], "_"));
        (name.to_string(), c)
    };
    match axis {
        Axis::Dabn => vec![
            with("average pooling", &|c| c.di_norm = NormMode::Average),
            with("bn", &|c| c.di_norm = NormMode::Plain),
            with("dabn", &|c| c.di_norm = NormMode::Adaptive),
        ],
        Axis::Attention => vec![
            with("average pooling", &|c| c.ds_mixing = Mixing::Average),
            with("voting", &|c| c.ds_mixing = Mixing::Voting),
            with("msda-qaconv", &|c| c.ds_mixing = Mixing::Attention),
        ],
        Axis::Scales => vec![
            with("stage 1", &|c| c.scales = vec![1]),
            with("stage 2", &|c| c.scales = vec![2]),
            with("stage 1+2", &|c| c.scales = vec![1, 2]),
        ],
    }
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Dabn => "dabn",
        Axis::Attention => "attention",
        Axis::Scales => "scales",
    }
}

pub fn ablation_table(axis: Axis, rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ablation: {}", axis_name(axis));
    let _ = writeln!(s);
    let _ = writeln!(s, "| variant | DS mAP | DS top-1 | DI mAP | DI top-1 | fused mAP | fused top-1 |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.variant, r.ds.map, r.ds.top1, r.di.map, r.di.top1, r.fused.map, r.fused.top1
        );
    }
    s
}

/// Trains every variant on the same data and seed; writes
/// `ablation_<axis>.md` and `.json` into the output directory.
pub fn cmd_ablate(base: &ExperimentConfig, axis: Axis) -> Result<Vec<AblationRow>> {
    let data = load_training_data(base)?;
    let (query, gallery) = load_target(base, &base.data_dir())?;
    let labels = LabelColumns::new(&query, &gallery);
    echo_config(base, "effective_config.toml")?;
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(base, axis) {
        log::info!("ablation {}: training {name}", axis_name(axis));
        let outputs = TrainOutputs {
            dir: cfg.output_dir.clone(),
        };
        let trainer = train(&cfg, &data, Some(&outputs), None)?;
        let scores = stream_scores(&trainer.model, &query, &gallery, &cfg.pixel_norm())?;
        let report = |mode| evaluate_scores(&scores, &labels.view(), mode).map(|(_, r)| r);
        rows.push(AblationRow {
            variant: name,
            ds: report(FusionMode::Ds)?,
            di: report(FusionMode::Di)?,
            fused: report(FusionMode::Sum)?,
        });
    }
    let table = ablation_table(axis, &rows);
    print!("{table}");
    let stem = format!("ablation_{}", axis_name(axis));
    write_file(&base.output_dir.join(format!("{stem}.md")), &table)?;
    write_file(
        &base.output_dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&rows)?,
    )?;
    Ok(rows)
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, force } => {
            cmd_gen_data(&effective_config(&common, None)?, force)?;
        }
        Command::Train { common, epochs, resume } => {
            let path = cmd_train(&effective_config(&common, epochs)?, resume.as_deref())?;
            log::info!("checkpoint written to {}", path.display());
        }
        Command::Eval {
            checkpoint,
            output_dir,
            data,
            fusion,
            dump_rankings,
            grid,
        } => {
            cmd_eval(&EvalArgs {
                checkpoint,
                output_dir,
                data,
                fusion: fusion.into_iter().map(FusionMode::from).collect(),
                dump_rankings,
                grid,
            })?;
        }
        Command::Ablate { common, axis, epochs } => {
            cmd_ablate(&effective_config(&common, epochs)?, axis)?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log).try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
