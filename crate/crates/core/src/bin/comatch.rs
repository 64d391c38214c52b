use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use comatch::data::{load_corpus, write_corpus};
use comatch::harness::{
    ablate, bench_group, default_thresholds, emit_masks, eval_seed_miou, feature_extents,
    gen_corpora, read_checkpoint, save_run, sweep, train, write_csv, Config, SweepParam,
    TIMING_TRIALS,
};
use comatch::Error;

#[derive(Parser)]
#[command(
    name = "comatch",
    version,
    about = "Co-occurrent feature matching for CAM seeds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/ and eval/ corpora.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus directory and write a checkpoint with report sidecars.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seed-mask mIoU of a checkpoint at each threshold.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write seed masks and CAMs (at the best threshold) here.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Train and evaluate the four matching-stage variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One run per value of alpha, k or group_n.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Median inter-matching time per group size.
    BenchGroup {
        /// Group sizes, e.g. `2..5` or `2,3,5`.
        #[arg(long, default_value = "2..5")]
        n: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = TIMING_TRIALS)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> comatch::Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn parse_sizes(text: &str) -> comatch::Result<Vec<usize>> {
    let bad = || Error::Parameter(format!("cannot parse group sizes {text:?}"));
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        Ok((lo..=hi).collect())
    } else {
        text.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect()
    }
}

fn mkdir(dir: &Path) -> comatch::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cmd: Command) -> comatch::Result<()> {
    match cmd {
        Command::Gen { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let (train_set, eval_set) = gen_corpora(&cfg)?;
            write_corpus(&train_set, &out.join("train"))?;
            write_corpus(&eval_set, &out.join("eval"))?;
            println!(
                "wrote {} train and {} eval scenes to {}",
                train_set.len(),
                eval_set.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = load_corpus(&data)?;
            let outcome = train(&corpus, &cfg)?;
            save_run(&out, &outcome)?;
            println!(
                "run {}: {} iterations, final loss {:?}, checkpoint {}",
                outcome.report.run_id,
                outcome.report.losses.len(),
                outcome.report.losses.last(),
                out.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            report,
            masks,
        } => {
            let (params, cfg) = read_checkpoint(&ckpt)?;
            let corpus = load_corpus(&data)?;
            let pipeline = cfg.train_config().pipeline;
            let eval = eval_seed_miou(&params, &pipeline, &corpus, &default_thresholds())?;
            #[derive(serde::Serialize)]
            struct Row {
                threshold: f64,
                miou: f64,
                best: bool,
            }
            let rows: Vec<Row> = eval
                .thresholds
                .iter()
                .zip(&eval.miou)
                .map(|(&threshold, &miou)| Row {
                    threshold,
                    miou,
                    best: threshold == eval.best_threshold,
                })
                .collect();
            write_csv(&report, &rows)?;
            if let Some(dir) = masks {
                emit_masks(&params, &pipeline, &corpus, eval.best_threshold, &dir)?;
            }
            println!(
                "best mIoU {:.4} at threshold {:.2} over {} scenes",
                eval.best_miou, eval.best_threshold, eval.scenes
            );
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            mkdir(&out)?;
            let (train_set, eval_set) = gen_corpora(&cfg)?;
            let results = ablate(&train_set, &eval_set, &cfg)?;
            for (row, outcome) in &results {
                save_run(&out.join(format!("{}.ckpt", row.variant)), outcome)?;
                println!(
                    "{:<9} mIoU {:.4} (threshold {:.2})",
                    row.variant, row.miou, row.best_threshold
                );
            }
            let rows: Vec<_> = results.into_iter().map(|(r, _)| r).collect();
            write_csv(&out.join("ablation.csv"), &rows)?;
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let param = SweepParam::parse(&param)?;
            mkdir(&out)?;
            let (train_set, eval_set) = gen_corpora(&cfg)?;
            let rows = sweep(&train_set, &eval_set, &cfg, param, &values)?;
            for r in &rows {
                println!("{} = {}: mIoU {:.4}", r.param, r.value, r.miou);
            }
            write_csv(&out.join(format!("sweep_{}.csv", param.name())), &rows)?;
        }
        Command::BenchGroup {
            n,
            config,
            trials,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let rows = bench_group(&parse_sizes(&n)?, feature_extents(&cfg), trials)?;
            for r in &rows {
                println!("N = {}: {:.3} ms", r.group_n, r.median_ms);
            }
            write_csv(&out, &rows)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("comatch: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
