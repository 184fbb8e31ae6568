use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lth_core::earlybird::{early_bird_run, EarlyBirdConfig};
use lth_core::masking::{full_mask, sparsity, PruneMask};
use lth_core::metrics::{cost_report, store};
use lth_core::nn::ParameterSet;
use lth_core::pruning::{fine_tune, imp, train_ticket, PruneConfig, Scope};
use lth_core::tasks::{evaluate, load_or_generate, TaskKind};
use lth_core::train::{train_dense, EvalPoint, Workload};
use lth_core::transfer::{cross_task_transfer, mask_transfer, ticket_transfer, GroupMapping};

use lth_harness::config::{output_root, ExperimentConfig, Recipe};
use lth_harness::presets::{self, NetSize};
use lth_harness::{report, runner};

#[derive(Parser)]
#[command(name = "lth", about = "Lottery-ticket pruning experiments on the shapes desk benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, value_enum, default_value = "small")]
    network: NetSize,
    #[arg(long, default_value = "classify", value_parser = parse_task)]
    task: TaskKind,
    #[arg(long, default_value_t = presets::DESK_ITERATIONS)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    /// Defaults to `$LTH_OUTPUT/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct PruneArgs {
    #[arg(long, default_value_t = 0.8)]
    p: f64,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, value_enum, default_value = "global")]
    scope: ScopeArg,
    /// Defaults to 5% of training.
    #[arg(long)]
    rewind_iter: Option<usize>,
    /// Comma-separated; defaults to every group.
    #[arg(long, value_delimiter = ',')]
    groups: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Global,
    Layerwise,
}

#[derive(Clone, Copy, ValueEnum)]
#[clap(rename_all = "snake_case")]
enum Mode {
    TicketTransfer,
    MaskTransfer,
    CrossTask,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a dense network.
    Train(Common),
    /// Find a ticket by iterative magnitude pruning and train it.
    Prune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        prune: PruneArgs,
    },
    /// Find an early-bird ticket and train it.
    Earlybird {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        prune: PruneArgs,
        #[arg(long, default_value_t = 0.95)]
        threshold: f64,
        #[arg(long, default_value_t = 3)]
        window: usize,
        /// Defaults to 5% of training.
        #[arg(long)]
        probe_interval: Option<usize>,
    },
    /// Move a ticket or mask found on `--source` to `--task`.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        prune: PruneArgs,
        #[arg(long, value_parser = parse_task)]
        source: TaskKind,
        #[arg(long, value_enum, default_value = "ticket_transfer")]
        mode: Mode,
    },
    /// Run a recipe over its grid and replicates.
    Run {
        #[arg(value_enum)]
        recipe: Recipe,
        /// JSON config; missing fields take the recipe defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        network: Option<NetSize>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        base_seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Aggregate every results.csv under a directory.
    Report {
        dir: Option<PathBuf>,
    },
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    TaskKind::parse(s).map_err(|e| e.to_string())
}

fn workload(c: &Common, task: TaskKind) -> Result<Workload> {
    let data = load_or_generate(&presets::desk_data(), c.data_seed, &runner::data_cache_dir())?;
    Ok(presets::workload(c.network, task, Arc::new(data), presets::desk_train(c.iterations))?)
}

fn prune_config(c: &Common, p: &PruneArgs) -> PruneConfig {
    PruneConfig {
        target: p.p,
        rounds: p.rounds,
        scope: match p.scope {
            ScopeArg::Global => Scope::Global,
            ScopeArg::Layerwise => Scope::Layerwise,
        },
        groups: if p.groups.is_empty() {
            presets::default_groups()
        } else {
            p.groups.clone()
        },
        rewind_iter: p.rewind_iter.unwrap_or(presets::default_rewind(c.iterations)),
        train_iters: None,
    }
}

fn out_dir(c: &Common, name: &str) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| output_root().join(name));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn history_csv(h: &[EvalPoint]) -> String {
    let mut s = String::from("iteration,epoch,train_loss,val_loss,metric\n");
    for e in h {
        s += &format!("{},{:.4},{:.6},{:.6},{:.6}\n", e.iteration, e.epoch, e.train_loss, e.val_loss, e.metric);
    }
    s
}

/// Evaluate, write the checkpoint, cost table and curve, print a summary.
fn finish(dir: &Path, w: &Workload, params: &ParameterSet, mask: &PruneMask, history: &[EvalPoint]) -> Result<()> {
    let ev = evaluate(params, Some(mask), &w.spec, &w.task, &w.data, lth_core::tasks::SplitKind::Val)?;
    let bytes = store(&dir.join("model.ltht"), params, Some(mask))?;
    let mut cost = cost_report(&w.spec, &w.task.head, params, mask)?;
    cost.bytes = bytes;
    std::fs::write(dir.join("cost.csv"), cost.to_csv())?;
    std::fs::write(dir.join("history.csv"), history_csv(history))?;
    println!(
        "{} {} = {:.4}  sparsity {:.4}  bytes {bytes}  MACs {:.0}/{}  -> {}",
        w.task.kind,
        ev.metric.name(),
        ev.value,
        sparsity(mask, None)?.network_sparsity,
        cost.adjusted_macs,
        cost.dense_macs,
        dir.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(c) => {
            let w = workload(&c, c.task)?;
            let (state, history) = train_dense(&w, c.seed)?;
            let mask = full_mask(&w.spec, &state.params)?;
            finish(&out_dir(&c, "train")?, &w, &state.params, &mask, &history)?;
        }
        Cmd::Prune { common: c, prune } => {
            let w = workload(&c, c.task)?;
            let pc = prune_config(&c, &prune);
            let out = imp(&w, &pc, c.seed)?;
            let dir = out_dir(&c, "prune")?;
            store(&dir.join("ticket.ltht"), &out.ticket.rewind_weights, Some(&out.ticket.mask))?;
            std::fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(&out.ticket.provenance)?)?;
            let run = train_ticket(&w, &out.ticket, c.seed)?;
            finish(&dir, &w, &run.state.params, &out.ticket.mask, &run.history)?;
        }
        Cmd::Earlybird {
            common: c,
            prune,
            threshold,
            window,
            probe_interval,
        } => {
            let w = workload(&c, c.task)?;
            let pc = prune_config(&c, &prune);
            let mut cfg = EarlyBirdConfig::new(c.iterations, pc.target, pc.groups);
            cfg.scope = pc.scope;
            cfg.rewind_iter = pc.rewind_iter;
            cfg.iou_threshold = threshold;
            cfg.stable_window = window;
            if let Some(k) = probe_interval {
                cfg.probe_interval = k;
            }
            let out = early_bird_run(&w, &cfg, c.seed)?;
            let dir = out_dir(&c, "earlybird")?;
            std::fs::write(dir.join("iou.csv"), out.report.to_csv())?;
            println!("stopped at iteration {} of {}", out.stop_iteration, c.iterations);
            let run = train_ticket(&w, &out.ticket, c.seed)?;
            finish(&dir, &w, &run.state.params, &out.ticket.mask, &run.history)?;
        }
        Cmd::Transfer {
            common: c,
            prune,
            source,
            mode,
        } => {
            let mut pc = prune_config(&c, &prune);
            if prune.groups.is_empty() {
                pc.groups = presets::SHARED.map(String::from).to_vec();
            }
            let src = workload(&c, source)?;
            let tgt = workload(&c, c.task)?;
            let groups: Vec<&str> = pc.groups.iter().map(String::as_str).collect();
            let (params, mask) = match mode {
                Mode::MaskTransfer => {
                    let (dense, _) = train_dense(&src, c.seed)?;
                    let mapping = GroupMapping::by_groups(&dense.params, &groups)?;
                    mask_transfer(&dense.params, &tgt.spec, pc.target, &mapping, false, c.seed)?
                }
                Mode::TicketTransfer | Mode::CrossTask => {
                    let ticket = imp(&src, &pc, c.seed)?.ticket;
                    let mapping = GroupMapping::by_groups(&ticket.rewind_weights, &groups)?;
                    if matches!(mode, Mode::CrossTask) {
                        let init = cross_task_transfer(&ticket, &tgt.spec, &mapping, c.seed)?;
                        println!(
                            "trunk sparsity {:.4}  trunk fraction {:.4}  network sparsity {:.4}",
                            init.trunk_sparsity, init.trunk_fraction, init.network_sparsity
                        );
                        (init.params, init.mask)
                    } else {
                        ticket_transfer(&ticket, &tgt.spec, &mapping, c.seed)?
                    }
                }
            };
            let run = fine_tune(&tgt, params, &mask, c.seed)?;
            finish(&out_dir(&c, "transfer")?, &tgt, &run.state.params, &mask, &run.history)?;
        }
        Cmd::Run {
            recipe,
            config,
            network,
            replicates,
            base_seed,
            iterations,
            workers,
            out,
            print_config,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    let cfg = ExperimentConfig::from_json(&text)?;
                    anyhow::ensure!(cfg.recipe == recipe, "config is for recipe {}", cfg.recipe.name());
                    cfg
                }
                None => ExperimentConfig::for_recipe(recipe),
            };
            if let Some(n) = network {
                cfg.network = n;
            }
            if let Some(r) = replicates {
                cfg.replicates = r;
            }
            if let Some(s) = base_seed {
                cfg.base_seed = s;
            }
            if let Some(n) = iterations {
                // rewind points keep their position relative to the schedule
                let old = cfg.train.iterations;
                cfg.train = presets::desk_train(n);
                for r in cfg.grid.rewind_iter.iter_mut() {
                    *r = (*r * n / old).min(n.saturating_sub(1));
                }
            }
            if let Some(k) = workers {
                cfg.workers = k;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            if print_config {
                println!("{}", cfg.to_json()?);
                return Ok(());
            }
            let result = runner::run(&cfg)?;
            let failed = result.rows.iter().filter(|r| !r.is_ok()).count();
            let dir = cfg.output_dir();
            let summary = report::report(&dir)?;
            print!("{}", report::to_markdown(&summary));
            println!("{} rows ({failed} failed) in {}", result.rows.len(), dir.display());
        }
        Cmd::Report { dir } => {
            let dir = dir.unwrap_or_else(output_root);
            let summary = report::report(&dir)?;
            print!("{}", report::to_markdown(&summary));
        }
    }
    Ok(())
}
