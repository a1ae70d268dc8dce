//! The ablation grid and the ε sweep: batches of derived training runs
//! executed on a small thread pool, summarized as Markdown + CSV tables.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Mutex;

use clap::Args;
use marl_core::error::{Error, Result};
use marl_core::train::{train, RunConfig};

#[derive(Args)]
pub struct AblateArgs {
    /// Base JSON run configuration; toggles are overridden per row.
    #[arg(long)]
    config: PathBuf,
    /// Seeds per row (seed, seed+1, …).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Override epochs for every row.
    #[arg(long)]
    epochs: Option<usize>,
    /// Root directory for the per-row run directories and the tables.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Concurrent runs.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated eps_min values.
    #[arg(long, default_value = "0.1,0.2,0.4,0.6,0.8")]
    eps: String,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    overwrite: bool,
}

/// Table-4 row layout: (visual, semantic, decoder, rl).
pub const ABLATION_ROWS: [(bool, bool, bool, bool); 9] = [
    (false, true, true, true),
    (false, false, true, true),
    (false, false, false, true),
    (false, true, false, true),
    (true, true, false, true),
    (true, false, true, true),
    (true, false, false, true),
    (true, true, true, false),
    (true, true, true, true),
];

struct Job {
    label: String,
    cfg: RunConfig,
}

/// Run jobs on up to `jobs` worker threads; results keep job order.
fn run_jobs(jobs_list: Vec<Job>, jobs: usize) -> Vec<(String, Result<Option<f64>>)> {
    let n = jobs_list.len();
    let queue: Mutex<VecDeque<(usize, Job)>> =
        Mutex::new(jobs_list.into_iter().enumerate().collect());
    let results: Mutex<Vec<Option<(String, Result<Option<f64>>)>>> =
        Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(n.max(1)) {
            scope.spawn(|| loop {
                let Some((idx, job)) = queue.lock().unwrap().pop_front() else {
                    break;
                };
                let outcome = train::<f32>(&job.cfg).map(|o| o.best_test_auc());
                results.lock().unwrap()[idx] = Some((job.label, outcome));
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(2, |n| n.get().min(4))
}

fn write_tables(dir: &PathBuf, stem: &str, markdown: &str, csv: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let md = dir.join(format!("{stem}.md"));
    std::fs::write(&md, markdown).map_err(|e| Error::io(&md, e))?;
    let cs = dir.join(format!("{stem}.csv"));
    std::fs::write(&cs, csv).map_err(|e| Error::io(&cs, e))?;
    Ok(())
}

pub fn run_ablation(args: AblateArgs) -> Result<()> {
    let base = RunConfig::load(&args.config)?;
    let root = super::resolve_out(args.out_dir.as_deref().unwrap_or(&base.out_dir));
    let mut jobs_list = Vec::new();
    for (i, (visual, semantic, decoder, rl)) in ABLATION_ROWS.iter().enumerate() {
        for s in 0..args.seeds {
            let mut cfg = base.clone();
            cfg.visual_enabled = *visual;
            cfg.semantic_enabled = *semantic;
            cfg.decoder_enabled = *decoder;
            cfg.rl_enabled = *rl;
            cfg.seed = base.seed + s;
            if let Some(e) = args.epochs {
                cfg.epochs = e;
            }
            cfg.overwrite = args.overwrite || cfg.overwrite;
            cfg.out_dir = root.join(format!("model{}_seed{}", i + 1, cfg.seed));
            jobs_list.push(Job {
                label: format!("model{}", i + 1),
                cfg,
            });
        }
    }
    let results = run_jobs(jobs_list, args.jobs.unwrap_or_else(default_jobs));

    let seeds = args.seeds as usize;
    let mut md = String::from("| Model | Visual | Semantic | Diagnostic | RL | AUC |\n|---|---|---|---|---|---|\n");
    let mut csv = String::from("model,visual,semantic,diagnostic,rl,auc\n");
    for (i, (visual, semantic, decoder, rl)) in ABLATION_ROWS.iter().enumerate() {
        let rows = &results[i * seeds..(i + 1) * seeds];
        let mut sum = 0.0;
        let mut count = 0usize;
        for (_, r) in rows {
            match r {
                Ok(Some(a)) => {
                    sum += a;
                    count += 1;
                }
                Ok(None) => {}
                Err(e) => return Err(Error::Aborted(format!("model{}: {e}", i + 1))),
            }
        }
        let auc = if count > 0 {
            format!("{:.4}", sum / count as f64)
        } else {
            "undefined".to_string()
        };
        let sign = |b: bool| if b { "+" } else { "-" };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            i + 1,
            sign(*visual),
            sign(*semantic),
            sign(*decoder),
            sign(*rl),
            auc
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            i + 1,
            sign(*visual),
            sign(*semantic),
            sign(*decoder),
            sign(*rl),
            auc
        );
    }
    write_tables(&root, "ablation", &md, &csv)?;
    print!("{md}");
    println!("tables written to {}", root.display());
    Ok(())
}

pub fn run_sweep(args: SweepArgs) -> Result<()> {
    let base = RunConfig::load(&args.config)?;
    let root = super::resolve_out(args.out_dir.as_deref().unwrap_or(&base.out_dir));
    let eps_values: Vec<f64> = args
        .eps
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad eps value `{t}`")))
        })
        .collect::<Result<_>>()?;
    let mut jobs_list = Vec::new();
    for &e in &eps_values {
        for s in 0..args.seeds {
            let mut cfg = base.clone();
            cfg.eps_min = e;
            cfg.seed = base.seed + s;
            if let Some(ep) = args.epochs {
                cfg.epochs = ep;
            }
            cfg.overwrite = args.overwrite || cfg.overwrite;
            cfg.out_dir = root.join(format!("eps{e}_seed{}", cfg.seed));
            jobs_list.push(Job {
                label: format!("eps{e}"),
                cfg,
            });
        }
    }
    let results = run_jobs(jobs_list, args.jobs.unwrap_or_else(default_jobs));

    let seeds = args.seeds as usize;
    let mut md = String::from("| eps_min | AUC |\n|---|---|\n");
    let mut csv = String::from("eps_min,auc\n");
    for (i, &e) in eps_values.iter().enumerate() {
        let rows = &results[i * seeds..(i + 1) * seeds];
        let mut sum = 0.0;
        let mut count = 0usize;
        for (_, r) in rows {
            match r {
                Ok(Some(a)) => {
                    sum += a;
                    count += 1;
                }
                Ok(None) => {}
                Err(err) => return Err(Error::Aborted(format!("eps {e}: {err}"))),
            }
        }
        let auc = if count > 0 {
            format!("{:.4}", sum / count as f64)
        } else {
            "undefined".to_string()
        };
        let _ = writeln!(md, "| {e} | {auc} |");
        let _ = writeln!(csv, "{e},{auc}");
    }
    write_tables(&root, "epsilon_sweep", &md, &csv)?;
    print!("{md}");
    println!("tables written to {}", root.display());
    Ok(())
}
