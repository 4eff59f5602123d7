use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use qclnet::bench::{param_totals, time_layer, KernelVariant};
use qclnet::config::Config;
use qclnet::episode::{fb_iou, forward_episode, miou, synth_episode, MetricsAccumulator};
use qclnet::erm::binarize;
use qclnet::model::{init_params, quaternion_layer_counts};
use qclnet::train::train_toy;
use qclnet::verify::{self, VerifyOptions, SUITES};
use qclnet::weights::{load_weights, save_weights};
use qclnet::{Error, RealTensor};

const EXIT_VERIFY: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_USAGE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "qclnet", version, about = "Quaternion correlation learning for few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// `key = value` config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for masks or trained weights.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the self-check suites.
    Verify {
        /// Run only this suite.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, hide = true)]
        mutate: Option<Mutation>,
    },
    /// Segment the query of one synthetic episode.
    Forward {
        /// Weight file to use instead of seeded initialization.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Overfit seeded synthetic episodes, logging `step,loss,miou`.
    TrainToy {
        /// Number of distinct training episodes.
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Start from this weight file instead of seeded initialization.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Parameter counts and kernel timings.
    Bench {
        /// Timed repetitions per measurement.
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mutation {
    QuatSign,
}

enum Failure {
    Verify,
    Run(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("QCLNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Failure::Usage(format!("QCLNET_THREADS must be a non-negative integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

fn load(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    info!("config: {cfg:?}");
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf, Failure> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(Error::from)?;
    Ok(dir)
}

fn write_pgm(path: &Path, mask: &RealTensor) -> Result<(), Failure> {
    let s = mask.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(mask.data().iter().map(|&v| if v > 0.5 { 255u8 } else { 0 }));
    fs::write(path, buf).map_err(Error::from)?;
    Ok(())
}

fn cmd_verify(cli: &Cli, suite: Option<&str>, mutate: Option<Mutation>) -> Result<(), Failure> {
    let cfg = load(cli)?;
    let opts = VerifyOptions {
        corrupt_hamilton: matches!(mutate, Some(Mutation::QuatSign)),
        seed: cfg.seed,
    };
    let results = verify::run(suite, opts)
        .ok_or_else(|| Failure::Usage(format!("unknown suite `{}`; expected one of {}", suite.unwrap_or(""), SUITES.join(", "))))?;
    let mut out = std::io::stdout().lock();
    for r in &results {
        let _ = writeln!(out, "{}", r.line());
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn cmd_forward(cli: &Cli, weights: Option<&Path>) -> Result<(), Failure> {
    let cfg = load(cli)?;
    let spec = cfg.model_spec()?;
    let params = match weights {
        Some(p) => load_weights(p, &spec)?,
        None => init_params(&spec, cfg.seed)?,
    };
    let ep = synth_episode(cfg.seed, cfg.k, &spec)?;
    let out = forward_episode(&ep, &spec, &params, cfg.tau)?;
    let dir = out_dir(cli)?;
    write_pgm(&dir.join("mask.pgm"), &out.mask)?;
    write_pgm(&dir.join("truth.pgm"), &ep.query_mask)?;
    for (i, soft) in out.per_shot_soft.iter().enumerate() {
        write_pgm(&dir.join(format!("shot{i}.pgm")), &binarize(soft)?)?;
    }
    let mut acc = MetricsAccumulator::new();
    acc.add(ep.class_id, &out.mask, &ep.query_mask)?;
    let fg = out.mask.sum() / out.mask.len() as f64;
    println!("class_id,{}", ep.class_id);
    println!("shots,{}", ep.k());
    for (i, p) in out.priors.iter().enumerate() {
        println!("prior_mean,{i},{:.6}", p.sum() / p.len() as f64);
    }
    println!("foreground_fraction,{fg:.6}");
    println!("miou,{:.6}", miou(&acc));
    println!("fb_iou,{:.6}", fb_iou(&acc));
    info!("masks written to {}", dir.display());
    Ok(())
}

fn cmd_train_toy(cli: &Cli, episodes: usize, weights: Option<&Path>) -> Result<(), Failure> {
    let cfg = load(cli)?;
    let spec = cfg.model_spec()?;
    let eps = (0..episodes as u64)
        .map(|i| synth_episode(cfg.seed.wrapping_add(i), cfg.k, &spec))
        .collect::<qclnet::Result<Vec<_>>>()?;
    let params = match weights {
        Some(p) => load_weights(p, &spec)?,
        None => init_params(&spec, cfg.seed)?,
    };
    info!("training {} parameters on {episodes} episode(s)", params.scalar_count());
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "step,loss,miou");
    let report = train_toy(&spec, params, &eps, cfg.steps, cfg.lr, cfg.tau, |r| {
        let _ = writeln!(stdout, "{}", r.csv());
    })?;
    let path = out_dir(cli)?.join("weights.qclw");
    save_weights(&report.params, &path)?;
    info!("weights saved to {}", path.display());
    Ok(())
}

fn cmd_bench(cli: &Cli, reps: usize) -> Result<(), Failure> {
    let cfg = load(cli)?;
    let spec = cfg.model_spec()?;
    let store = init_params(&spec, cfg.seed)?;
    let layers = quaternion_layer_counts(&store);
    println!("layer,quaternion,real_replacement,group_conv,real_over_quaternion");
    for l in &layers {
        println!(
            "{},{},{},{},{:.3}",
            l.name,
            l.quaternion,
            l.real_replacement,
            l.group_conv,
            l.real_replacement as f64 / l.quaternion as f64
        );
    }
    let t = param_totals(&store, &layers);
    println!("total,{},{},{},{:.3}", t.quaternion, t.real_replacement, t.group_conv, t.real_replacement as f64 / t.quaternion as f64);
    println!("variant,extent,channels,micros_per_forward");
    let base = cfg.extents[0];
    for variant in KernelVariant::ALL {
        for extent in [base, 2 * base, 4 * base] {
            let tm = time_layer(variant, cfg.d, extent, reps, cfg.seed)?;
            println!("{},{},{},{}", variant.name(), extent, cfg.d, tm.per_forward.as_micros());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Verify { suite, mutate } => cmd_verify(&cli, suite.as_deref(), *mutate),
        Command::Forward { weights } => cmd_forward(&cli, weights.as_deref()),
        Command::TrainToy { episodes, weights } => cmd_train_toy(&cli, *episodes, weights.as_deref()),
        Command::Bench { reps } => cmd_bench(&cli, *reps),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(EXIT_VERIFY),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(e @ Error::Divergence { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DIVERGENCE)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
