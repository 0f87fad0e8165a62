use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slotlab::harness::{cmd_diagnose, cmd_eval, cmd_generate, cmd_train, EvalOutput, LabConfig};
use slotlab::eval::CSV_HEADER;
use slotlab::{LabError, Result};

/// Object-centric world model lab: generate data, train, evaluate OOD
/// splits and diagnose slot factorization.
#[derive(Parser)]
#[command(name = "slotlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train and eval datasets for the configured split.
    Generate(Overrides),
    /// Train a world model on the run's training data.
    Train(Overrides),
    /// Score the checkpoint; `--sweep` covers every kind and k.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        sweep: bool,
    },
    /// Export feature maps, update matrix and factorization score.
    Diagnose(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory (defaults to $SLOTLAB_OUT, then `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// shapes, blocks or three_body.
    #[arg(long)]
    env: Option<String>,
    /// Split kind, e.g. iid or extrapolation_color.
    #[arg(long)]
    split: Option<String>,
    /// Number of changed objects.
    #[arg(long)]
    k: Option<usize>,
    /// cswm or ae.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue training from the run's checkpoint.
    #[arg(long)]
    resume: bool,
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

impl Overrides {
    fn load(&self, extra: &[(String, String)]) -> Result<LabConfig> {
        let mut pairs = Vec::new();
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("--set expects KEY=VALUE, got '{item}'")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("out_dir", self.out.as_ref().map(|p| quoted(&p.to_string_lossy()))),
            ("seed", self.seed.map(|s| s.to_string())),
            ("env.kind", self.env.as_deref().map(quoted)),
            ("split.kind", self.split.as_deref().map(quoted)),
            ("split.k", self.k.map(|k| k.to_string())),
            ("model.kind", self.model.as_deref().map(quoted)),
            ("train.epochs", self.epochs.map(|e| e.to_string())),
            ("train.resume", self.resume.then(|| "true".to_string())),
        ];
        pairs.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        pairs.extend_from_slice(extra);
        LabConfig::load(self.config.as_deref(), &pairs)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(o) => {
            print!("{}", cmd_generate(&o.load(&[])?)?);
        }
        Command::Train(o) => {
            let s = cmd_train(&o.load(&[])?)?;
            let last = s.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained epochs {}..{} final loss {last:.5} -> {}",
                s.resumed_from + 1,
                s.epochs_done,
                s.checkpoint.display()
            );
        }
        Command::Eval { overrides, sweep } => {
            let extra = if sweep { vec![("eval.sweep".to_string(), "true".to_string())] } else { vec![] };
            match cmd_eval(&overrides.load(&extra)?)? {
                EvalOutput::Single(r) => print!("{CSV_HEADER}\n{}", r.csv_rows()),
                EvalOutput::Sweep(rs) => {
                    println!("{CSV_HEADER}");
                    rs.iter().for_each(|r| print!("{}", r.csv_rows()));
                }
            }
        }
        Command::Diagnose(o) => {
            let s = cmd_diagnose(&o.load(&[])?)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "{} k={} factorization {} peak match {} diagonal mass {} -> {}",
                s.kind,
                s.k,
                fmt(s.factorization_score),
                fmt(s.peak_match_rate),
                fmt(s.diagonal_mass_ratio),
                s.dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
