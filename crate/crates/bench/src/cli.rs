use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hpn_core::model::HpnModel;
use hpn_core::trainer::{Outputs, TrainConfig, Trainer};
use hpn_core::tsp::{read_batch, write_batch};
use hpn_core::tsplib::{normalize, parse_tsplib};
use hpn_core::{generate_uniform, Instance};

use crate::evaluate::{evaluate, parse_methods, EvalOptions};
use crate::report::{write_results, BenchReport};
use crate::svg::write_tour_svg;

#[derive(Debug, Parser)]
#[command(name = "hpn", version, about = "Euclidean TSP datasets, training, evaluation and tour plots")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a batch of uniform random instances.
    Generate(GenerateArgs),
    /// Train a network from a TOML config or a named regime.
    Train(TrainArgs),
    /// Solve a batch file or a TSPLIB file with several methods.
    Evaluate(EvaluateArgs),
    /// Draw one solved instance as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file, or one of small, large, smoke.
    #[arg(long)]
    pub config: String,
    /// Directory for checkpoint.bin, metrics.csv and model.bin.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Batch file, or a TSPLIB file ending in .tsp.
    pub input: PathBuf,
    #[arg(long, default_value = "nearest_neighbor,farthest_insertion,two_opt")]
    pub methods: String,
    /// Also run every method followed by 2-opt.
    #[arg(long)]
    pub two_opt: bool,
    /// Model or training checkpoint for the hpn method.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training config the checkpoint must match.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub solve: SolveArgs,
    /// Per-instance results CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub solve: SolveArgs,
    /// Instance to draw from a batch file.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Instances to solve and, for TSPLIB input, the factor back to raw units.
pub struct Input {
    pub instances: Vec<Instance>,
    pub scale: Option<f64>,
}

pub fn load_input(path: &Path) -> Result<Input> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsp")) {
        let raw = parse_tsplib(reader).with_context(|| format!("parsing {}", path.display()))?;
        let norm = normalize(&raw);
        Ok(Input {
            instances: vec![norm.instance.clone()],
            scale: Some(norm.scale),
        })
    } else {
        let (_, instances) = read_batch(reader).with_context(|| format!("reading {}", path.display()))?;
        Ok(Input {
            instances,
            scale: None,
        })
    }
}

/// A TOML file if `spec` names one, otherwise a named regime.
pub fn load_config(spec: &str) -> Result<TrainConfig> {
    let path = Path::new(spec);
    let cfg = if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
        toml::from_str(&text).with_context(|| format!("parsing {spec}"))?
    } else if let Some(cfg) = TrainConfig::named(spec) {
        cfg
    } else {
        bail!("{spec:?} is neither a config file nor one of small, large, smoke");
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(args: &SolveArgs) -> Result<Option<HpnModel>> {
    let Some(path) = &args.checkpoint else {
        return Ok(None);
    };
    let model = match &args.config {
        Some(spec) => HpnModel::load_expecting(path, &load_config(spec)?.model),
        None => HpnModel::load(path),
    };
    Ok(Some(model.with_context(|| format!("loading {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let instances = generate_uniform(a.n, a.count, a.seed);
            let mut w = create(&a.out)?;
            write_batch(&mut w, a.n, &instances)?;
            w.flush()?;
            writeln!(stdout, "wrote {} instances of {} cities to {}", a.count, a.n, a.out.display())?;
        }
        Command::Train(a) => {
            let mut cfg = load_config(&a.config)?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            let outputs = Outputs {
                metrics: Some(a.out.join("metrics.csv")),
                checkpoint: Some(a.out.join("checkpoint.bin")),
            };
            let pool = rayon::ThreadPoolBuilder::new().num_threads(a.workers).build()?;
            let mut trainer = if a.resume {
                let t = Trainer::resume(a.out.join("checkpoint.bin")).context("resuming")?;
                if t.config() != &cfg {
                    bail!("checkpoint was trained with a different config");
                }
                t
            } else {
                if let Some(m) = &outputs.metrics {
                    if m.exists() {
                        std::fs::remove_file(m)?;
                    }
                }
                Trainer::new(cfg)?
            };
            let metrics = pool.install(|| trainer.fit(&outputs))?;
            for m in &metrics {
                writeln!(
                    stdout,
                    "epoch {} sampled {:.4} greedy {:.4} refreshed {} lr {}",
                    m.epoch, m.mean_sampled_len, m.mean_greedy_len, m.baseline_refreshed, m.lr
                )?;
            }
            trainer.policy().save(a.out.join("model.bin"))?;
        }
        Command::Evaluate(a) => {
            let input = load_input(&a.solve.input)?;
            let methods = parse_methods(&a.solve.methods, a.solve.two_opt)?;
            let model = load_model(&a.solve)?;
            let opts = EvalOptions {
                model: model.as_ref(),
                seed: a.solve.seed,
                workers: a.solve.workers,
            };
            let results = evaluate(&input.instances, &methods, opts)?;
            if let Some(path) = &a.out {
                let mut w = create(path)?;
                write_results(&mut w, &results)?;
                w.flush()?;
            }
            write!(stdout, "{}", BenchReport::from_results(&results, input.scale).to_table())?;
        }
        Command::Render(a) => {
            let input = load_input(&a.solve.input)?;
            let inst = input
                .instances
                .get(a.index)
                .with_context(|| format!("no instance {} in {}", a.index, a.solve.input.display()))?;
            let method = parse_methods(&a.solve.methods, false)?[0];
            let method = if a.solve.two_opt { method.with_two_opt() } else { method };
            let model = load_model(&a.solve)?;
            let tour = method.solve(inst, a.solve.seed, model.as_ref())?;
            let length = match input.scale {
                Some(s) => format!("{:.2}", tour.length * s),
                None => format!("{:.4}", tour.length),
            };
            write_tour_svg(&a.out, inst, &tour.order, &format!("{method}, n = {}, length {length}", inst.len()))?;
            writeln!(stdout, "{method}: length {length}, drawn to {}", a.out.display())?;
        }
    }
    Ok(())
}
