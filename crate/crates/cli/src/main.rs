use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowstrike_cli::config::{keys_help, Config};
use flowstrike_cli::pipeline::{self, Layout};
use flowstrike_cli::Result;

#[derive(Parser)]
#[command(name = "flowstrike", version, about = "Flow-based hard-label black-box attacks", after_long_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (key = value lines under [section] headers).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the collection, flow, training and attack seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the target zoo, the white-box surrogates and the condition network.
    TrainClassifier(Common),
    /// Collect white-box adversarial pairs against the surrogates.
    CollectAdv(Common),
    /// Train the conditional flow on the collected pairs, resuming from a checkpoint.
    TrainFlow(Common),
    /// Hard-label attack on the target model, with the random-noise baseline.
    Attack(Common),
    /// Transfer matrix across the zoo.
    EvalTransfer(Common),
    /// Recompute the latent statistics of a trained flow.
    Stats(Common),
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::TrainClassifier(c)
        | Command::CollectAdv(c)
        | Command::TrainFlow(c)
        | Command::Attack(c)
        | Command::EvalTransfer(c)
        | Command::Stats(c) => c,
    };
    let mut cfg = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    let layout = Layout::new(&common.out);
    match cli.command {
        Command::TrainClassifier(_) => {
            let acc = pipeline::cmd_train_classifier(&cfg, &layout)?;
            for (i, a) in acc.zoo.iter().enumerate() {
                println!("zoo_{i} test accuracy {:.4}", a);
            }
            for (i, a) in acc.surrogates.iter().enumerate() {
                println!("surrogate_{i} test accuracy {:.4}", a);
            }
            println!("condition test accuracy {:.4}", acc.condition);
        }
        Command::CollectAdv(_) => {
            for (eps, r) in cfg.collect.epsilons.iter().zip(pipeline::cmd_collect_adv(&cfg, &layout)?) {
                println!("eps {eps}/255: {} pairs ({} successful) from {} eligible of {}", r.stored, r.successes, r.eligible, r.attempted);
            }
        }
        Command::TrainFlow(_) => {
            pipeline::cmd_train_flow(&cfg, &layout)?;
            println!("flow written to {}", layout.root.display());
        }
        Command::Attack(_) => {
            for o in pipeline::cmd_attack(&cfg, &layout)? {
                print!("eps {}/255\n{}", o.eps, o.dta.to_csv("dta"));
                if let Some(b) = o.baseline {
                    print!("{}", b.to_csv("baseline").lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
                }
            }
        }
        Command::EvalTransfer(_) => {
            for o in pipeline::cmd_eval_transfer(&cfg, &layout)? {
                println!("eps {}/255 dta\n{}", o.eps, pipeline::matrix_csv(&o.dta));
                if let Some(b) = &o.baseline {
                    println!("baseline\n{}", pipeline::matrix_csv(b));
                }
            }
        }
        Command::Stats(_) => {
            for (eps, s) in cfg.collect.epsilons.iter().zip(pipeline::cmd_stats(&cfg, &layout)?) {
                let n = s.dim() as f32;
                let mu = s.mu.iter().sum::<f32>() / n;
                let sigma = s.sigma.iter().sum::<f32>() / n;
                println!("eps {eps}/255: D {} mean mu {mu:.4} mean sigma {sigma:.4}", s.dim());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
