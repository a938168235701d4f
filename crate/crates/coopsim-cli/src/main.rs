//! Command-line front end: scenario generation, single-frame debugging,
//! SNR / path-loss sweeps and codec training.
//!
//! Exit codes: 0 success, 1 usage, 2 config, 3 I/O, 4 runtime.

mod commands;
mod config;

use coopsim::fusion::FusionScheme;
use std::path::PathBuf;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Io(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Io(m) | CliError::Runtime(m) => m,
        }
    }
}

const USAGE: &str = "\
coopsim - cooperative perception over V2V links, desk scale

USAGE:
    coopsim <COMMAND> --config PATH [--seed N] [--out DIR] [--jobs N] [ARGS]

COMMANDS:
    generate COUNT                  write COUNT scenario files to the output dir
    run SCENARIO SCHEME SNR_DB      run one frame and print detections + AP
    sweep                           run the configured SNR / path-loss grid
    train-ae DATASET_DIR            train the feature codec on scenario files

SCHEMES:
    early | intermediate | late | conv3d | conv2d | conv3d+ae | conv2d+ae

FLAGS:
    --config PATH   experiment config file (required)
    --seed N        override the master seed from the config
    --out DIR       override the output directory from the config
    --jobs N        worker threads for the sweep grid
";

struct Args {
    command: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
    positional: Vec<String>,
}

fn parse_args(argv: &[String]) -> Result<Args, CliError> {
    if argv.is_empty() {
        return Err(CliError::Usage("missing command".into()));
    }
    let command = argv[0].clone();
    let mut args = Args {
        command,
        config: None,
        seed: None,
        out: None,
        jobs: None,
        positional: Vec::new(),
    };
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        let mut take_value = |name: &str| -> Result<String, CliError> {
            i += 1;
            argv.get(i)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("{name} expects a value")))
        };
        match a.as_str() {
            "--config" => args.config = Some(PathBuf::from(take_value("--config")?)),
            "--seed" => {
                let v = take_value("--seed")?;
                args.seed = Some(v.parse().map_err(|_| {
                    CliError::Usage(format!("--seed expects an integer, got `{v}`"))
                })?);
            }
            "--out" => args.out = Some(PathBuf::from(take_value("--out")?)),
            "--jobs" => {
                let v = take_value("--jobs")?;
                args.jobs = Some(v.parse().map_err(|_| {
                    CliError::Usage(format!("--jobs expects an integer, got `{v}`"))
                })?);
            }
            other if other.starts_with("--") => {
                return Err(CliError::Usage(format!("unknown flag `{other}`")));
            }
            other => args.positional.push(other.to_string()),
        }
        i += 1;
    }
    Ok(args)
}

fn dispatch(args: Args) -> Result<(), CliError> {
    let config_path = args
        .config
        .ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    let loaded = config::load_config(&config_path)?;
    let seed = args.seed.unwrap_or(loaded.experiment.seed);
    let out = args.out.clone().unwrap_or_else(|| loaded.experiment.out_dir.clone());
    if let Some(jobs) = args.jobs {
        // Ignore the error if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }

    match args.command.as_str() {
        "generate" => {
            let [count] = args.positional.as_slice() else {
                return Err(CliError::Usage("generate expects COUNT".into()));
            };
            let count: usize = count
                .parse()
                .map_err(|_| CliError::Usage(format!("bad COUNT `{count}`")))?;
            commands::cmd_generate(&loaded, seed, &out, count)
        }
        "run" => {
            let [scenario, scheme, snr] = args.positional.as_slice() else {
                return Err(CliError::Usage("run expects SCENARIO SCHEME SNR_DB".into()));
            };
            let scheme = FusionScheme::parse(scheme).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown scheme `{scheme}`; valid schemes: {}",
                    FusionScheme::ALL_LABELS.join(", ")
                ))
            })?;
            let snr: f64 = snr
                .parse()
                .map_err(|_| CliError::Usage(format!("bad SNR_DB `{snr}`")))?;
            commands::cmd_run(&loaded, seed, &PathBuf::from(scenario), scheme, snr)
        }
        "sweep" => {
            if !args.positional.is_empty() {
                return Err(CliError::Usage("sweep takes no positional arguments".into()));
            }
            commands::cmd_sweep(&loaded, seed, &out)
        }
        "train-ae" => {
            let [dir] = args.positional.as_slice() else {
                return Err(CliError::Usage("train-ae expects DATASET_DIR".into()));
            };
            commands::cmd_train_ae(&loaded, seed, &out, &PathBuf::from(dir))
        }
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match parse_args(&argv).and_then(dispatch) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            if matches!(e, CliError::Usage(_)) {
                eprintln!("\n{USAGE}");
            }
            std::process::exit(e.exit_code());
        }
    }
}
