use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use upa::ablate::{ablate, Axis};
use upa::alloc_count::CountingAlloc;
use upa::analyze::analyze_run;
use upa::bench::{bench, parse_variant, BenchConfig};
use upa::dataset::{generate_dataset, read_cloud_dir, save_dataset, DatasetSpec};
use upa::error::{Error, Result};
use upa::formats;
use upa::train::{evaluate, load_model, read_model_config, train, TrainConfig};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

/// Unary-pairwise attention experiments on point clouds.
#[derive(Parser)]
#[command(name = "upa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes log.jsonl, model.json, model.upak (and maps/).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory, a cloud directory or one cloud.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Model or training config; defaults to model.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-stage/per-head mJSD report over UAMP1 dumps.
    Analyze {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_queries: Option<usize>,
    },
    /// Sweep one axis: k, pooling, stage, arrangement or variant.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: PathBuf,
        /// Also write the JSON table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time one attention block across input sizes.
    Bench {
        #[arg(long)]
        variant: String,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Write a synthetic dataset as UPCD1 files.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "UPA_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Convert an `x y z [label]` text file to UPCD1.
    Import {
        #[arg(long)]
        xyz: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn eval_clouds(data: &Path) -> Result<Vec<upa_core::geometry::PointCloud>> {
    if data.join("meta.json").is_file() {
        read_cloud_dir(&data.join("test"))
    } else if data.is_dir() {
        read_cloud_dir(data)
    } else {
        Ok(vec![formats::read_cloud(data)?])
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let r = train(&cfg, Some(&out))?;
            print(&json!({
                "out": out,
                "epochs": r.history.len(),
                "seconds": r.seconds,
                "final": r.final_metrics(),
                "maps": r.map_files,
            }))
        }
        Command::Eval { ckpt, data, config } => {
            let config = config.unwrap_or_else(|| ckpt.with_file_name("model.json"));
            let mc = read_model_config(&config)?;
            let (model, store) = load_model(&ckpt, &mc)?;
            print(&evaluate(&model, &store, &eval_clouds(&data)?)?)
        }
        Command::Analyze { maps, out, max_queries } => {
            let r = analyze_run(&maps, &out, max_queries)?;
            print!("{}", upa::analyze::render_table(&r));
            Ok(())
        }
        Command::Ablate { axis, config, out } => {
            let axis = Axis::parse(&axis)?;
            let cfg = TrainConfig::load(&config)?;
            let t = ablate(axis, &cfg)?;
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_vec_pretty(&t)?).map_err(|e| Error::io(&p, e))?;
            }
            print!("{}", t.render());
            Ok(())
        }
        Command::Bench {
            variant,
            sizes,
            k,
            width,
            heads,
            repeats,
        } => {
            let cfg = BenchConfig {
                k,
                width,
                heads,
                repeats,
                ..BenchConfig::new(parse_variant(&variant)?, sizes)
            };
            print(&bench(&cfg)?)
        }
        Command::Generate { spec, out, seed } => {
            let bytes = std::fs::read(&spec).map_err(|e| Error::io(&spec, e))?;
            let spec: DatasetSpec = serde_json::from_slice(&bytes)?;
            let ds = generate_dataset(&spec, seed)?;
            save_dataset(&out, &ds)?;
            print(&json!({ "out": out, "train": ds.train.len(), "test": ds.test.len(), "meta": ds.meta }))
        }
        Command::Import { xyz, out } => {
            let text = std::fs::read_to_string(&xyz).map_err(|e| Error::io(&xyz, e))?;
            let pc = formats::parse_xyz(&text)?;
            formats::save_cloud(&out, &pc)?;
            print(&json!({ "out": out, "points": pc.len() }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    upa::tune_allocator();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
