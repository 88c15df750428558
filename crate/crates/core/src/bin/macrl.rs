use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use macrl::harness::{
    cmd_collect, cmd_compare, cmd_gradcheck, cmd_meta_train, cmd_run, ExperimentConfig, PlannerName,
};

#[derive(Parser)]
#[command(name = "macrl", version, about = "Meta-learned dynamics models and behavior-transferring planners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample training tasks and collect one random-action dataset per task.
    Collect(Common),
    /// Meta-train the embedding model and the embedding-free baseline.
    MetaTrain(Common),
    /// Run meta-test episodes for one planner (or every compared planner).
    Run {
        #[command(flatten)]
        common: Common,
        /// rmpc, fmpc, mac or anchor-mpc.
        #[arg(long)]
        planner: Option<String>,
    },
    /// Aggregate traces into reports/.
    Compare(Common),
    /// Finite-difference check of the model gradients.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training seed; for run/compare, restricts test seeds to this one.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self, is_test: bool) -> macrl::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            if is_test {
                cfg.test.seeds = vec![seed];
            } else {
                cfg.meta_train.seed = seed;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> macrl::Result<bool> {
    match cli.command {
        Command::Collect(c) => {
            let m = cmd_collect(&c.load(false)?)?;
            println!("collected {} task datasets ({} transitions each)", m.tasks.len(), m.samples_per_task);
        }
        Command::MetaTrain(c) => {
            let m = cmd_meta_train(&c.load(false)?)?;
            println!(
                "meta-trained: enn post-adapt loss {:.5}, rmpc post-adapt loss {:.5}",
                m.enn_final_post_loss, m.rmpc_final_post_loss
            );
        }
        Command::Run { common, planner } => {
            let cfg = common.load(true)?;
            let planners = match planner {
                Some(p) => vec![PlannerName::parse(&p)?],
                None => cfg.compared_planners()?,
            };
            for p in planners {
                let m = cmd_run(&cfg, p)?;
                let aborted = m.runs.iter().filter(|r| r.aborted.is_some()).count();
                println!("{p}: {} episodes written ({aborted} aborted)", m.runs.len());
            }
        }
        Command::Compare(c) => {
            let report = cmd_compare(&c.load(true)?)?;
            print!("{}", report.table());
        }
        Command::Gradcheck { cases, seed } => {
            let r = cmd_gradcheck(cases, seed)?;
            println!("{}", r.summary());
            return Ok(r.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
