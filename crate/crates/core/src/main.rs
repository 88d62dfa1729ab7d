use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iverlab::cli::commands::{self, Written};
use iverlab::cli::{parse_level, Method, Profile, RunConfig};
use iverlab::data::NoiseKind;
use iverlab::inference::Scheme;
use iverlab::par::{init_workers, Exec};
use iverlab::{Error, Result};

#[derive(Parser)]
#[command(name = "iverlab", version, about = "Amortized, iterative and hybrid inference on corrupted MNIST")]
struct Cli {
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one generative scheme on clean MNIST.
    Train(Opts),
    /// Train and gate the evaluation classifier.
    ClassifierTrain(Opts),
    /// Train the classifier and every model the experiments need.
    Prepare(Opts),
    /// Per-step classification accuracy of reconstructions of corrupted test images.
    Eval(Opts),
    /// Loss surfaces of a 2-latent model over a grid of posterior means.
    Landscape(Opts),
    /// Steps-to-correct against ELBO centile on clean test images.
    Typicality(Opts),
    /// Reconstruction sheets at selected inference steps.
    Reconstruct(Opts),
    /// Final accuracy of iVAE models trained with β ∈ {0, 1, 2}.
    BetaSweep(Opts),
}

#[derive(Args, Clone)]
struct Opts {
    /// vae, pcn, svi, ivae, or cl (classifier on the raw input). Omit for all.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long, env = "IVERLAB_DATA_DIR", default_value = "data/mnist")]
    data_dir: PathBuf,
    /// Checkpoints live under `<out-dir>/<profile>/`.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Inner steps: training steps for `train`, evaluation steps otherwise.
    #[arg(long)]
    inner_steps: Option<usize>,
    /// Inner learning rate, read like `--inner-steps`.
    #[arg(long)]
    inner_lr: Option<f32>,
    /// none, white, sp or blur. Omit on `eval` for the full suite.
    #[arg(long)]
    noise: Option<String>,
    /// Benchmark level 1..4, or an explicit σ / p.
    #[arg(long)]
    level: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate on the first N test images.
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Classify every N-th inference step in `eval` (the last step always).
    #[arg(long, default_value_t = 1)]
    step_stride: usize,
    /// Inference steps shown by `reconstruct`.
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
}

impl Opts {
    fn methods(&self) -> Result<Vec<Method>> {
        match &self.scheme {
            Some(s) => Ok(vec![Method::from_tag(s)?]),
            None => Ok(Method::ALL.to_vec()),
        }
    }

    fn config(&self, command: &str, training: bool) -> Result<RunConfig> {
        let scheme = match self.methods()?.as_slice() {
            [Method::Model(s)] => *s,
            _ => Scheme::Ivae,
        };
        let mut c = RunConfig::new(command, scheme, self.profile);
        c.data_dir = self.data_dir.clone();
        c.out_dir = self.out_dir.clone();
        c.seed = self.seed;
        c.eval_samples = self.eval_samples;
        c.step_stride = self.step_stride.max(1);
        if command == "landscape" {
            c.latent_dim = 2;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
            c.classifier_epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.latent_dim {
            c.latent_dim = v;
        }
        match (training, self.inner_steps) {
            (true, Some(v)) => c.train_inner_steps = v,
            (false, Some(v)) => c.eval_inner_steps = v,
            _ => {}
        }
        match (training, self.inner_lr) {
            (true, Some(v)) => c.train_inner_lr = v,
            (false, Some(v)) => c.eval_inner_lr = v,
            _ => {}
        }
        if let Some(n) = &self.noise {
            c.noise = NoiseKind::from_tag(n)?;
        }
        if let Some(l) = &self.level {
            c.level = parse_level(c.noise, l)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn noise(&self) -> Result<Option<NoiseKind>> {
        self.noise.as_deref().map(NoiseKind::from_tag).transpose()
    }
}

fn run(cli: Cli) -> Result<Written> {
    init_workers(cli.threads);
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match &cli.command {
        Command::Train(o) => {
            if o.methods()?.len() != 1 || o.scheme.as_deref() == Some("cl") {
                return Err(Error::Config("train needs --scheme vae|pcn|svi|ivae".into()));
            }
            commands::cmd_train(&o.config("train", true)?, exec)
        }
        Command::ClassifierTrain(o) => commands::cmd_classifier_train(&o.config("classifier-train", true)?, exec),
        Command::Prepare(o) => commands::cmd_prepare(&o.config("prepare", true)?, exec),
        Command::Eval(o) => {
            commands::cmd_eval(&o.config("eval", false)?, &o.methods()?, o.noise()?, o.level.is_some(), exec)
        }
        Command::Landscape(o) => commands::cmd_landscape(&o.config("landscape", false)?, o.noise()?, exec),
        Command::Typicality(o) => commands::cmd_typicality(&o.config("typicality", false)?, exec),
        Command::Reconstruct(o) => {
            let steps = o.steps.clone().unwrap_or_else(|| vec![1, 250, 500]);
            let methods: Vec<Method> = o.methods()?.into_iter().filter(|m| *m != Method::Cl).collect();
            commands::cmd_reconstruct(&o.config("reconstruct", false)?, &methods, &steps, o.noise()?, exec)
        }
        Command::BetaSweep(o) => {
            commands::cmd_beta_sweep(&o.config("beta-sweep", false)?, o.noise()?, o.level.is_some(), exec)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(written) => {
            for p in written.0 {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
