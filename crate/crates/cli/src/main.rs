use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mmrec_core::backbone::EPOCH_CSV_HEADER;
use mmrec_core::checkpoint::{load_model, save_checkpoint};
use mmrec_core::codebook::assign_hard;
use mmrec_core::config::RunConfig;
use mmrec_core::dataset::{generate_synthetic, load_dataset_dir, write_dataset_dir, SyntheticSpec};
use mmrec_core::frontdoor::write_pruned_graph;
use mmrec_core::pipeline::{self, RunReport};
use mmrec_core::{Error, Result};

/// Environment variable naming the directory that relative output paths
/// resolve against.
const OUTPUT_ROOT_VAR: &str = "MMREC_OUTPUT_ROOT";
const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Parser)]
#[command(name = "mmrec", version, about = "Causal multimodal recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, epoch log, report and resolved config.
    Train {
        /// TOML config; every key has a default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-key override, e.g. `train.epochs=5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory (overrides `data.dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        disable_backdoor: bool,
        #[arg(long)]
        disable_frontdoor: bool,
        #[arg(long)]
        disable_dcd: bool,
    },
    /// Evaluate a checkpoint without modifying it.
    Evaluate {
        /// Checkpoint directory (the run's `checkpoint/`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the data the checkpoint was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Cutoffs; defaults to the checkpoint's configured list.
        #[arg(long = "k", num_args = 1..)]
        ks: Vec<usize>,
        /// Where to write the report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        /// TOML synthetic spec; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export environment assignments or the pruned interaction graph.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: ExportKind,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Propagation layer whose masks are exported.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Environments,
    PrunedGraph,
}

fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<PathBuf>,
    mut set: Vec<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    disable_backdoor: bool,
    disable_frontdoor: bool,
    disable_dcd: bool,
) -> Result<()> {
    if let Some(s) = seed {
        set.push(format!("seed={s}"));
    }
    for (flag, key) in [
        (disable_backdoor, "ablation.disable_backdoor"),
        (disable_frontdoor, "ablation.disable_frontdoor"),
        (disable_dcd, "ablation.disable_dcd"),
    ] {
        if flag {
            set.push(format!("{key}=true"));
        }
    }
    let mut cfg = RunConfig::load_with_overrides(config.as_deref(), &set)?;
    if let Some(d) = data {
        cfg.data.dir = Some(d);
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let out_dir = resolve_output(&cfg.output_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_file(&out_dir.join("config.json"), cfg.to_json_pretty() + "\n")?;

    let result = pipeline::run(&cfg)?;
    let outcome = &result.outcome;
    save_checkpoint(
        &out_dir.join(CHECKPOINT_DIR),
        &outcome.model,
        &result.prepared.inputs,
        outcome.best_epoch,
        outcome.best_val_recall20,
    )?;
    let mut csv = String::from(EPOCH_CSV_HEADER);
    csv.push('\n');
    for rec in &outcome.epochs {
        csv.push_str(&rec.csv_row());
        csv.push('\n');
    }
    write_file(&out_dir.join("epochs.csv"), csv)?;
    write_file(&out_dir.join("report.json"), to_json(&result.report)?)?;
    print_report(&result.report);
    log::info!("wrote {}", out_dir.display());
    Ok(())
}

fn print_report(report: &RunReport) {
    let sections = [
        ("validation", Some(&report.validation)),
        ("test", Some(&report.test)),
        ("deconfounded", report.deconfounded_test.as_ref()),
    ];
    for (name, m) in sections {
        let Some(m) = m else { continue };
        let cells: Vec<String> = m
            .metrics
            .iter()
            .map(|(k, v)| format!("R@{k}={:.4} N@{k}={:.4}", v.recall, v.ndcg))
            .collect();
        println!("{name:<13} {}", cells.join(" "));
    }
}

/// Loads the checkpoint's config and dataset and rebuilds its inputs.
fn open_checkpoint(
    checkpoint: &Path,
    data: Option<PathBuf>,
) -> Result<(mmrec_core::checkpoint::Manifest, mmrec_core::backbone::Model, pipeline::Prepared)> {
    let (manifest, _) = mmrec_core::checkpoint::read_checkpoint(checkpoint)?;
    let cfg = &manifest.config;
    let dataset = match data.or_else(|| cfg.data.dir.clone()) {
        Some(dir) => load_dataset_dir(&dir)?,
        None => generate_synthetic(&cfg.data.synthetic)?,
    };
    let prepared = pipeline::prepare(cfg, dataset)?;
    let (manifest, model) = load_model(checkpoint, &prepared.inputs)?;
    Ok((manifest, model, prepared))
}

fn cmd_evaluate(checkpoint: PathBuf, data: Option<PathBuf>, ks: Vec<usize>, out: Option<PathBuf>) -> Result<()> {
    let (manifest, model, prepared) = open_checkpoint(&checkpoint, data)?;
    let ks = if ks.is_empty() {
        model.config.train.eval_ks.clone()
    } else {
        ks
    };
    let report = pipeline::report_at(&model, &prepared, manifest.epoch, &ks)?;
    print_report(&report);
    if let Some(o) = out {
        write_file(&resolve_output(&o), to_json(&report)?)?;
    }
    Ok(())
}

fn cmd_synth(spec: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            toml::from_str::<SyntheticSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = generate_synthetic(&spec)?;
    let dir = resolve_output(&out);
    write_dataset_dir(&dir, &ds)?;
    println!(
        "{}: {} users, {} items, {} interactions",
        dir.display(),
        ds.graph.num_users(),
        ds.graph.num_items(),
        ds.graph.edges().len()
    );
    Ok(())
}

fn cmd_export(checkpoint: PathBuf, what: ExportKind, data: Option<PathBuf>, layer: usize, out: PathBuf) -> Result<()> {
    let (_, model, prepared) = open_checkpoint(&checkpoint, data)?;
    let out = resolve_output(&out);
    match what {
        ExportKind::Environments => {
            if !model.uses_codebook() {
                return Err(Error::InvalidArgument(
                    "checkpoint was trained without the environment codebook".into(),
                ));
            }
            let soft = model.soft_assignment()?;
            let h = model.confounder.as_ref().expect("codebook model keeps its confounder");
            let codebook = model.params.get(mmrec_core::backbone::CODEBOOK);
            let hard = assign_hard(h, codebook)?;
            let records: Vec<_> = prepared
                .dataset
                .item_ids
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    json!({
                        "item": id,
                        "hard": hard.labels[i],
                        "soft": soft.probs.row(i).to_vec(),
                    })
                })
                .collect();
            write_file(&out, to_json(&records)?)?;
        }
        ExportKind::PrunedGraph => {
            if !model.uses_frontdoor() {
                return Err(Error::InvalidArgument(
                    "checkpoint was trained without edge masking".into(),
                ));
            }
            let rho = model.infer(&prepared.inputs)?.rho;
            let r = rho.get(layer).ok_or_else(|| {
                Error::InvalidArgument(format!("layer {layer} out of range (model has {} layers)", rho.len()))
            })?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_pruned_graph(
                &out,
                prepared.inputs.train_graph.edges(),
                r,
                &prepared.dataset.user_ids,
                &prepared.dataset.item_ids,
            )?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            set,
            seed,
            out,
            data,
            disable_backdoor,
            disable_frontdoor,
            disable_dcd,
        } => cmd_train(config, set, seed, out, data, disable_backdoor, disable_frontdoor, disable_dcd),
        Command::Evaluate {
            checkpoint,
            data,
            ks,
            out,
        } => cmd_evaluate(checkpoint, data, ks, out),
        Command::Synth { spec, out, seed } => cmd_synth(spec, out, seed),
        Command::Export {
            checkpoint,
            what,
            data,
            layer,
            out,
        } => cmd_export(checkpoint, what, data, layer, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
