use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use d2dmoe::checkpoint::{load_checkpoint, save_checkpoint};
use d2dmoe::cost::{read_cost_csv, write_cost_csv};
use d2dmoe::data::{gen_dataset, save_dataset, Task};
use d2dmoe::harness::{
    build_id, compare_methods, plot_svg, prepare_data, run_pipeline, run_stage, run_sweep,
    stage_seed, ExperimentSpec, PlotAxis, PolicyGrid, RunOptions, StageCtx, StageSpec, SweepMeta,
    SweepResult,
};
use d2dmoe::model::DenseModel;
use d2dmoe::sparsity::{activation_stats, default_threshold, write_stats_csv};
use d2dmoe::train::validation_batches;
use d2dmoe::{Error, Result};

#[derive(Parser)]
#[command(
    name = "d2dmoe",
    version,
    about = "Convert dense transformers into dynamic-k mixture-of-experts models"
)]
struct Cli {
    /// Experiment seed; overrides the spec's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment spec (JSON).
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (1 gives the reference single-threaded schedule).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct StageArgs {
    /// Checkpoint to start from; the spec's model config is built fresh when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        size: usize,
    },
    /// Run every stage of the spec, then sweep.
    Run {
        /// Reuse stage checkpoints whose inputs are unchanged.
        #[arg(long)]
        resume: bool,
    },
    /// Base training.
    Train(StageArgs),
    /// Fine-tune with the activation-sparsity penalty.
    Sparsify(StageArgs),
    /// Swap the activation to ReLU and fine-tune.
    Relufy(StageArgs),
    /// Replace attention projections with distilled MLPs.
    ReplaceMha(StageArgs),
    /// Split FFNs into experts (select-all MoE, no routers yet).
    Cluster(StageArgs),
    /// Train routers for every MoE site.
    TrainRouters(StageArgs),
    /// Cluster and train routers in one step.
    Convert(StageArgs),
    /// Evaluate a converted checkpoint across the policy grid.
    Sweep {
        #[command(flatten)]
        stage: StageArgs,
        /// Override the spec's tau list (comma separated).
        #[arg(long, value_delimiter = ',')]
        tau: Option<Vec<f64>>,
        /// Override the spec's k list (comma separated).
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long, default_value = "sweep")]
        method: String,
    },
    /// Run the spec's methods from one base model with equal budgets.
    Compare {
        #[arg(long)]
        resume: bool,
    },
    /// Activation histograms of a checkpoint.
    Stats {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 8)]
        bucket_width: usize,
    },
    /// SVG line chart from a sweep CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum, default_value = "measured-flops")]
        x: PlotAxis,
        #[arg(long, default_value = "cost vs metric")]
        title: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_spec(cli: &Cli) -> Result<ExperimentSpec> {
    let path = cli
        .spec
        .as_ref()
        .ok_or_else(|| Error::Validation(vec!["--spec is required".into()]))?;
    let mut spec = ExperimentSpec::load(path)?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn out_dir(cli: &Cli, spec: Option<&ExperimentSpec>) -> Result<PathBuf> {
    cli.out
        .clone()
        .or_else(|| spec.and_then(|s| s.out_dir.clone()))
        .ok_or_else(|| Error::Validation(vec!["--out is required".into()]))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn start_model(spec: &ExperimentSpec, args: &StageArgs) -> Result<DenseModel> {
    match &args.input {
        Some(p) => load_checkpoint(p),
        None => DenseModel::build(spec.model.clone(), stage_seed(spec.seed, 0, "init")),
    }
}

fn with_data_dir(mut spec: ExperimentSpec, args: &StageArgs) -> ExperimentSpec {
    if let Some(d) = &args.data {
        spec.data.dir = Some(d.clone());
    }
    spec
}

/// Run the spec stages named in `names`, in spec order, writing one checkpoint.
fn run_named_stages(cli: &Cli, args: &StageArgs, names: &[&str]) -> Result<()> {
    let spec = with_data_dir(load_spec(cli)?, args);
    let out = out_dir(cli, Some(&spec))?;
    mkdir(&out)?;
    let data = prepare_data(&spec, None)?;
    let mut model = start_model(&spec, args)?;
    let mut logs = Vec::new();
    for name in names {
        let (index, stage): (usize, &StageSpec) = spec
            .stages
            .iter()
            .enumerate()
            .find(|(_, s)| s.name() == *name)
            .ok_or_else(|| Error::Validation(vec![format!("spec has no `{name}` stage")]))?;
        let seed = stage_seed(spec.seed, index, name);
        let ctx = StageCtx {
            data: &data,
            eval: &spec.eval,
            seed,
            out: Some(&out),
            label: format!("{index:02}_{name}"),
        };
        let res = run_stage(stage, &model, &ctx).map_err(|e| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        })?;
        logs.push(serde_json::json!({
            "stage": name, "index": index, "seed": seed, "tokens_seen": res.tokens_seen,
            "train": res.train, "details": res.details,
        }));
        model = res.model;
    }
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    fs::write(
        out.join("log.json"),
        serde_json::to_string_pretty(&logs)? + "\n",
    )
    .map_err(|e| Error::io(out.join("log.json"), e))?;
    println!("{}", ckpt.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        // Ignored when a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global();
    }
    match &cli.cmd {
        Cmd::GenData { task, size } => {
            let out = out_dir(&cli, None)?;
            let data = gen_dataset(*task, *size, cli.seed.unwrap_or(0))?;
            save_dataset(&out, &data)?;
            println!("{}", data.hash());
            Ok(())
        }
        Cmd::Run { resume } => {
            let spec = load_spec(&cli)?;
            let out = out_dir(&cli, Some(&spec))?;
            let res = run_pipeline(&spec, &out, &RunOptions { resume: *resume })?;
            for l in &res.logs {
                println!(
                    "{} {} -> {}",
                    l.index,
                    l.stage,
                    out.join(&l.checkpoint).display()
                );
            }
            if let Some(s) = &res.sweep {
                println!(
                    "sweep: {} rows -> {}",
                    s.rows.len(),
                    out.join("sweep.csv").display()
                );
            }
            Ok(())
        }
        Cmd::Train(a) => run_named_stages(&cli, a, &["train"]),
        Cmd::Sparsify(a) => run_named_stages(&cli, a, &["sparsify"]),
        Cmd::Relufy(a) => run_named_stages(&cli, a, &["relufy"]),
        Cmd::ReplaceMha(a) => run_named_stages(&cli, a, &["replace_mha"]),
        Cmd::Cluster(a) => run_named_stages(&cli, a, &["cluster"]),
        Cmd::TrainRouters(a) => run_named_stages(&cli, a, &["train_routers"]),
        Cmd::Convert(a) => run_named_stages(&cli, a, &["cluster", "train_routers"]),
        Cmd::Sweep {
            stage,
            tau,
            k,
            method,
        } => {
            let spec = with_data_dir(load_spec(&cli)?, stage);
            let out = out_dir(&cli, Some(&spec))?;
            mkdir(&out)?;
            let input = stage
                .input
                .as_ref()
                .ok_or_else(|| Error::Validation(vec!["--input is required".into()]))?;
            let model = load_checkpoint(input)?;
            let data = prepare_data(&spec, None)?;
            let grid = PolicyGrid {
                tau: tau.clone().unwrap_or_else(|| spec.grid.tau.clone()),
                k: k.clone().unwrap_or_else(|| spec.grid.k.clone()),
            };
            if grid.is_empty() {
                return Err(Error::Validation(vec!["policy grid is empty".into()]));
            }
            let batches = validation_batches(
                &model,
                &data,
                spec.eval.batch_size,
                spec.eval.seq_len,
                spec.eval.batches,
            )?;
            let rows = run_sweep(&model, &grid, &batches, method)?;
            let res = SweepResult {
                meta: SweepMeta {
                    seed: spec.seed,
                    dataset_hash: data.hash(),
                    spec_hash: spec.hash(),
                    build_id: build_id(),
                },
                rows,
            };
            write_cost_csv(&out.join("sweep.csv"), &res.rows)?;
            fs::write(
                out.join("sweep_meta.json"),
                serde_json::to_string_pretty(&res.meta)? + "\n",
            )
            .map_err(|e| Error::io(out.join("sweep_meta.json"), e))?;
            println!("{}", out.join("sweep.csv").display());
            Ok(())
        }
        Cmd::Compare { resume } => {
            let spec = load_spec(&cli)?;
            let out = out_dir(&cli, Some(&spec))?;
            let res = compare_methods(&spec, &out, &RunOptions { resume: *resume })?;
            println!(
                "compare: {} rows -> {}",
                res.rows.len(),
                out.join("compare.csv").display()
            );
            Ok(())
        }
        Cmd::Stats {
            stage,
            threshold,
            bucket_width,
        } => {
            let spec = with_data_dir(load_spec(&cli)?, stage);
            let out = out_dir(&cli, Some(&spec))?;
            mkdir(&out)?;
            let model = start_model(&spec, stage)?;
            let data = prepare_data(&spec, None)?;
            let batches = validation_batches(
                &model,
                &data,
                spec.eval.batch_size,
                spec.eval.seq_len,
                spec.eval.batches,
            )?;
            let th = threshold.unwrap_or_else(|| default_threshold(model.config.activation));
            let stats = activation_stats(&model, &batches, th)?;
            write_stats_csv(&out, "stats", &stats, *bucket_width)?;
            println!("mean non-zero fraction {:.4}", stats.mean_nonzero());
            Ok(())
        }
        Cmd::Plot { csv, x, title } => {
            let rows = read_cost_csv(csv)?;
            let svg = plot_svg(&rows, *x, title);
            let path = match &cli.out {
                Some(p) if p.extension().is_some_and(|e| e == "svg") => p.clone(),
                Some(dir) => {
                    mkdir(dir)?;
                    dir.join("plot.svg")
                }
                None => csv.with_extension("svg"),
            };
            fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            println!("{}", path.display());
            Ok(())
        }
    }
}
