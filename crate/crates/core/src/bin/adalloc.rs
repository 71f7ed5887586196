use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use adalloc::agent::ModelParams;
use adalloc::checkpoint::{load_checkpoint_for, save_checkpoint};
use adalloc::config::RunConfig;
use adalloc::dataset::{load_dataset_checked, run_logging_policy, save_dataset, DatasetManifest};
use adalloc::eval::{
    evaluate, run_ablations, run_grid, run_sweep, tune_eta, validation_reward, GreedyPolicy,
    RandomPolicy, SweepParam, METRIC_NAMES,
};
use adalloc::plot::{line_chart, Series};
use adalloc::simulator::Simulator;
use adalloc::training::{train, TrainOptions};
use adalloc::{Error, Result};

const RUN_DIR_ENV: &str = "ADALLOC_RUN_DIR";
const SECTIONS: [&str; 4] = ["mdp", "sim", "train", "eval"];

/// Offline RL for ads-slot allocation in a simulated feed.
///
/// Any config value can be overridden with a flag named after its dotted key,
/// e.g. `--mdp.eta=0.1` or `--train.alpha1 0.02`.
#[derive(Parser)]
#[command(name = "adalloc", version)]
struct Cli {
    /// TOML config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to `$ADALLOC_RUN_DIR/<config hash>-<timestamp>`
    /// (or `runs/...`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as TOML.
    Config,
    /// Log requests with the uniform-random policy.
    GenData {
        #[arg(long)]
        requests: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train on a logged dataset.
    Train {
        /// Dataset base path (without `.manifest` / `.records`).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint base path to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy rollouts of a checkpoint, or of the logging policy.
    Eval {
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// `random` evaluates the uniform logging policy instead.
        #[arg(long, value_parser = ["random"])]
        baseline: Option<String>,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Full method against its four ablations.
    Ablate {
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Sensitivity of one parameter, or a two-parameter grid.
    Sweep {
        /// alpha1, alpha2, alpha3, M, L or K.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.005, 0.01, 0.05, 0.1])]
        values: Vec<f64>,
        /// Second parameter; produces a grid over both.
        #[arg(long)]
        grid_with: Option<String>,
        /// Values of the second parameter; defaults to `--values`.
        #[arg(long, value_delimiter = ',')]
        grid_values: Option<Vec<f64>>,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Bisect `mdp.eta` until the trained policy hits `eval.target_exposure`.
    TuneEta {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.005)]
        tolerance: f64,
        #[arg(long, default_value_t = 8)]
        max_iter: usize,
    },
}

#[derive(Args)]
struct SeedArgs {
    /// Single seed; replaces `eval.seeds`.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds; replaces `eval.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Evaluation requests per seed; replaces `eval.num_requests`.
    #[arg(long)]
    requests: Option<usize>,
}

impl SeedArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = &self.seeds {
            cfg.eval.seeds = s.clone();
        }
        if let Some(s) = self.seed {
            cfg.eval.seeds = vec![s];
        }
        if let Some(r) = self.requests {
            cfg.eval.num_requests = r;
        }
    }
}

/// Pulls `--section.field=value` / `--section.field value` pairs out of argv.
fn split_overrides(
    args: Vec<String>,
) -> std::result::Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let key = body.split('=').next().unwrap_or_default();
        let is_override = key
            .split_once('.')
            .is_some_and(|(section, field)| SECTIONS.contains(&section) && !field.is_empty());
        if !is_override {
            rest.push(arg);
            continue;
        }
        match body.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| format!("--{key} needs a value"))?;
                overrides.push((key.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn run_dir(cli_out: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match cli_out {
        Some(p) => p.clone(),
        None => {
            let base =
                std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            let stamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
            base.join(format!("{}-{stamp}", cfg.hash()))
        }
    };
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;

    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::GenData { requests, seed } => {
            if let Some(r) = requests {
                cfg.eval.dataset_requests = r;
            }
            let dir = run_dir(&cli.out, &cfg)?;
            let sim = Simulator::new(cfg.sim.clone(), cfg.mdp.clone())?;
            let log = run_logging_policy(&sim, cfg.eval.dataset_requests, seed)?;
            let manifest = DatasetManifest::describe(
                &log,
                &sim,
                cfg.eval.dataset_requests,
                seed,
                cfg.train.contrastive_size,
            );
            let base = dir.join("dataset");
            save_dataset(&log, &manifest, &base)?;
            let slots: usize = log.iter().map(|r| r.action.len()).sum();
            let ads: usize = log.iter().map(|r| r.action.num_ads()).sum();
            println!("requests\t{}", cfg.eval.dataset_requests);
            println!("transitions\t{}", log.len());
            println!(
                "ad_exposure\t{:.4}",
                if slots > 0 {
                    ads as f64 / slots as f64
                } else {
                    0.0
                }
            );
            println!("dataset\t{}", base.display());
            Ok(())
        }
        Command::Train {
            dataset,
            seed,
            resume,
        } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let sim = Simulator::new(cfg.sim.clone(), cfg.mdp.clone())?;
            let (log, manifest) = load_dataset_checked(&dataset, &sim.config.hash())?;
            if manifest.slots != cfg.mdp.slots || manifest.num_factors != cfg.mdp.num_factors {
                return Err(Error::Config(format!(
                    "dataset was logged with K={} M={}, config has K={} M={}",
                    manifest.slots, manifest.num_factors, cfg.mdp.slots, cfg.mdp.num_factors
                )));
            }
            let dir = run_dir(&cli.out, &cfg)?;
            let model = cfg.train.model_config(&cfg.mdp, &cfg.sim);
            let resume = match resume {
                Some(p) => Some(load_checkpoint_for(&p, &model)?),
                None => None,
            };
            let started = Instant::now();
            let (requests, valid_seed) = (cfg.eval.validation_requests, cfg.train.seed);
            let mut validate = |p: &ModelParams| validation_reward(p, &sim, requests, valid_seed);
            let opts = TrainOptions {
                out_dir: Some(dir.clone()),
                config_hash: cfg.hash(),
                resume,
                validator: if cfg.train.patience.is_some() {
                    Some(&mut validate)
                } else {
                    None
                },
            };
            let out = train(&log, &sim.catalog, &cfg.mdp, model, &cfg.train, opts)?;
            let final_ckpt = adalloc::checkpoint::Checkpoint {
                params: out.params,
                config_hash: cfg.hash(),
                step: out.steps,
                train_state: None,
            };
            save_checkpoint(&final_ckpt, &dir.join("final"))?;
            if let Some(last) = out.log.last() {
                println!(
                    "step {}\tl_dqn {:.5}\tl_rat {:.5}\tl_pat {:.5}\tl_clat {:.5}\ttotal {:.5}",
                    last.step,
                    last.terms.dqn,
                    last.terms.rat,
                    last.terms.pat,
                    last.terms.clat,
                    last.terms.total
                );
            }
            println!(
                "trained {} steps in {:.1}s",
                out.steps,
                started.elapsed().as_secs_f64()
            );
            println!("checkpoint\t{}", dir.join("final").display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            baseline,
            seeds,
        } => {
            seeds.apply(&mut cfg);
            cfg.validate()?;
            let sim = Simulator::new(cfg.sim.clone(), cfg.mdp.clone())?;
            let report = if baseline.is_some() {
                evaluate(
                    "random",
                    &sim,
                    cfg.eval.num_requests,
                    &cfg.eval.seeds,
                    RandomPolicy::default,
                )?
            } else {
                let path = checkpoint.expect("clap enforces checkpoint or baseline");
                let model = cfg.train.model_config(&cfg.mdp, &cfg.sim);
                let ckpt = load_checkpoint_for(&path, &model)?;
                evaluate(
                    "greedy",
                    &sim,
                    cfg.eval.num_requests,
                    &cfg.eval.seeds,
                    || GreedyPolicy::new(&ckpt.params),
                )?
            };
            let dir = run_dir(&cli.out, &cfg)?;
            let table = report.to_table();
            write(&dir.join("metrics.tsv"), &table)?;
            write(
                &dir.join("metrics.json"),
                &serde_json::to_string_pretty(&report)?,
            )?;
            print!("{table}");
            Ok(())
        }
        Command::Ablate { seeds } => {
            seeds.apply(&mut cfg);
            cfg.validate()?;
            let dir = run_dir(&cli.out, &cfg)?;
            let started = Instant::now();
            let report = run_ablations(&cfg, &cfg.eval.seeds, |variant, seed, m| {
                eprintln!(
                    "[{:>7.1}s] {variant:<10} seed {seed}: reward {:.4}",
                    started.elapsed().as_secs_f64(),
                    m.reward
                );
            })?;
            write(&dir.join("ablation.tsv"), &report.summary_table())?;
            write(&dir.join("ablation_per_seed.tsv"), &report.per_seed_table())?;
            write(
                &dir.join("ablation.json"),
                &serde_json::to_string_pretty(&report)?,
            )?;
            print!("{}", report.summary_table());
            Ok(())
        }
        Command::Sweep {
            param,
            values,
            grid_with,
            grid_values,
            seeds,
        } => {
            seeds.apply(&mut cfg);
            cfg.validate()?;
            let p = SweepParam::parse(&param)?;
            let second = grid_with.as_deref().map(SweepParam::parse).transpose()?;
            let dir = run_dir(&cli.out, &cfg)?;
            let started = Instant::now();
            match second {
                None => {
                    let report = run_sweep(p, &values, &cfg, &cfg.eval.seeds, |v, seed, m| {
                        eprintln!(
                            "[{:>7.1}s] {}={v} seed {seed}: reward {:.4}",
                            started.elapsed().as_secs_f64(),
                            p.name(),
                            m.reward
                        );
                    })?;
                    write(&dir.join("sweep.tsv"), &report.to_table())?;
                    write(
                        &dir.join("sweep.json"),
                        &serde_json::to_string_pretty(&report)?,
                    )?;
                    let means = report.means();
                    for (i, name) in METRIC_NAMES.iter().enumerate() {
                        let series = Series {
                            label: (*name).to_string(),
                            points: means.iter().map(|(v, m)| (*v, m[i])).collect(),
                        };
                        line_chart(
                            &dir.join(format!("sweep_{}_{name}.png", p.name())),
                            &[series],
                        )?;
                    }
                    print!("{}", report.to_table());
                }
                Some(q) => {
                    let qv = grid_values.unwrap_or_else(|| values.clone());
                    let report = run_grid(
                        p,
                        &values,
                        q,
                        &qv,
                        &cfg,
                        &cfg.eval.seeds,
                        |a, b, seed, m| {
                            eprintln!(
                                "[{:>7.1}s] {}={a} {}={b} seed {seed}: reward {:.4}",
                                started.elapsed().as_secs_f64(),
                                p.name(),
                                q.name(),
                                m.reward
                            );
                        },
                    )?;
                    let table = report.improvement_table()?;
                    write(&dir.join("grid_improvement.tsv"), &table)?;
                    write(
                        &dir.join("grid.json"),
                        &serde_json::to_string_pretty(&report)?,
                    )?;
                    let imp = report.improvements()?;
                    let series: Vec<Series> = qv
                        .iter()
                        .enumerate()
                        .map(|(j, cv)| Series {
                            label: format!("{}={cv}", q.name()),
                            points: values
                                .iter()
                                .zip(&imp)
                                .map(|(rv, row)| (*rv, row[j]))
                                .collect(),
                        })
                        .collect();
                    line_chart(
                        &dir.join(format!("grid_{}_{}.png", p.name(), q.name())),
                        &series,
                    )?;
                    print!("{table}");
                }
            }
            Ok(())
        }
        Command::TuneEta {
            seed,
            tolerance,
            max_iter,
        } => {
            let target = cfg
                .eval
                .target_exposure
                .ok_or_else(|| Error::Config("set eval.target_exposure to tune eta".into()))?;
            let dir = run_dir(&cli.out, &cfg)?;
            let (eta, m) = tune_eta(&cfg, target, tolerance, seed, max_iter)?;
            let text = format!(
                "eta\t{eta}\nad_exposure\t{:.6}\nreward\t{:.6}\n",
                m.ad_exposure, m.reward
            );
            write(&dir.join("tuned_eta.tsv"), &text)?;
            print!("{text}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let (rest, ov) = split_overrides(argv(
            "adalloc --mdp.eta=0.1 train --train.alpha1 0.02 --dataset d",
        ))
        .unwrap();
        assert_eq!(rest, argv("adalloc train --dataset d"));
        assert_eq!(
            ov,
            vec![
                ("mdp.eta".into(), "0.1".into()),
                ("train.alpha1".into(), "0.02".into())
            ]
        );
    }

    #[test]
    fn dangling_override_is_an_error() {
        assert!(split_overrides(argv("adalloc --sim.seed")).is_err());
    }
}
