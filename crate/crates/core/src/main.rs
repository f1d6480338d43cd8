use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use hybridspoof::audio::{parse_protocol, TrialRecord};
use hybridspoof::pipeline::{self, PipelineError, RunConfig, CONFIG_KEYS};

/// Exit status for runs where some clips failed but the rest completed.
const ITEM_FAILURE: u8 = 1;
/// Exit status for config, I/O and other whole-run errors.
const RUN_ERROR: u8 = 2;

fn with_config_flags(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value config file; flags override it"),
    );
    CONFIG_KEYS.iter().fold(cmd, |c, &(key, help)| {
        c.arg(Arg::new(key).long(key).value_name("VALUE").help(help))
    })
}

fn cli() -> Command {
    Command::new("hybridspoof")
        .about("Replay and deep-fake audio detection with hybrid features and self-attention")
        .subcommand_required(true)
        .subcommand(with_config_flags(
            Command::new("featurize").about("Cache log-mel and raw-frame features"),
        ))
        .subcommand(with_config_flags(
            Command::new("train").about("Train and keep the best dev-EER checkpoint"),
        ))
        .subcommand(with_config_flags(
            Command::new("score").about("Score every trial of a protocol"),
        ))
        .subcommand(with_config_flags(
            Command::new("eval").about("EER and min t-DCF of a score file").arg(
                Arg::new("csv")
                    .long("csv")
                    .action(ArgAction::SetTrue)
                    .help("print the report as CSV"),
            ),
        ))
        .subcommand(with_config_flags(
            Command::new("simulate").about("Synthesise a labelled corpus"),
        ))
        .subcommand(with_config_flags(
            Command::new("sweep").about("Retrain over a list of frame lengths"),
        ))
}

fn load_config(m: &ArgMatches) -> Result<RunConfig, PipelineError> {
    let file = m.get_one::<String>("config").map(PathBuf::from);
    let overrides: Vec<(&str, &str)> = CONFIG_KEYS
        .iter()
        .filter_map(|&(k, _)| m.get_one::<String>(k).map(|v| (k, v.as_str())))
        .collect();
    RunConfig::load(file.as_deref(), overrides)
}

/// Trials named by `protocol`, or the union of the train and dev lists.
fn featurize_trials(cfg: &RunConfig) -> Result<Vec<TrialRecord>, PipelineError> {
    let p = &cfg.paths;
    let lists: Vec<&PathBuf> = match &p.protocol {
        Some(one) => vec![one],
        None => [&p.train_protocol, &p.dev_protocol].into_iter().flatten().collect(),
    };
    if lists.is_empty() {
        return Err(PipelineError::Config(
            "featurize needs protocol or train_protocol/dev_protocol".into(),
        ));
    }
    for l in &lists {
        if !l.is_file() {
            return Err(PipelineError::Config(format!("{} is not a file", l.display())));
        }
    }
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for l in lists {
        for r in parse_protocol(l)? {
            if seen.insert(r.utt_id.clone(), ()).is_none() {
                out.push(r);
            }
        }
    }
    Ok(out)
}

fn run(name: &str, m: &ArgMatches) -> Result<u8, PipelineError> {
    pipeline::init_thread_pool()?;
    let cfg = load_config(m)?;
    cfg.validate()?;
    match name {
        "featurize" => {
            let audio_dir = cfg
                .paths
                .audio_dir
                .clone()
                .filter(|d| d.is_dir())
                .ok_or_else(|| PipelineError::Config("audio_dir must be a directory".into()))?;
            let out = cfg
                .paths
                .feature_dir
                .clone()
                .ok_or_else(|| PipelineError::Config("feature_dir is required".into()))?;
            let trials = featurize_trials(&cfg)?;
            let report = pipeline::featurize(&trials, &audio_dir, &out, &cfg.model.dsp)?;
            print!("{}", report.summary());
            Ok(if report.failed.is_empty() { 0 } else { ITEM_FAILURE })
        }
        "train" => {
            let outcome = pipeline::train(&cfg)?;
            for r in &outcome.history {
                println!(
                    "epoch {:>3}  l_att {:.4}  l_fin {:.4}  total {:.4}  dev EER {:.2}%",
                    r.epoch,
                    r.l_att,
                    r.l_fin,
                    r.total,
                    100.0 * r.dev_eer
                );
            }
            println!(
                "best dev EER {:.2}% at epoch {} -> {}",
                100.0 * outcome.best_dev_eer,
                outcome.best_epoch.map_or("-".into(), |e| e.to_string()),
                outcome.checkpoint.display()
            );
            Ok(0)
        }
        "score" => {
            let lines = pipeline::score(&cfg)?;
            println!(
                "scored {} trials -> {}",
                lines.len(),
                cfg.paths.score_out.as_ref().expect("validated").display()
            );
            Ok(0)
        }
        "eval" => {
            let report = pipeline::eval(&cfg)?;
            for u in &report.extra_scores {
                eprintln!("warning: score for {u} has no protocol entry");
            }
            if m.get_flag("csv") {
                print!("{}", report.csv());
            } else {
                print!("{}", report.text());
            }
            Ok(0)
        }
        "simulate" => {
            let manifest = pipeline::simulate(&cfg)?;
            println!(
                "wrote {} clips to {}",
                manifest.records.len(),
                manifest.audio_dir.display()
            );
            Ok(0)
        }
        "sweep" => {
            let rows = pipeline::sweep(&cfg)?;
            println!("{}", pipeline::SWEEP_HEADER);
            for r in rows {
                println!("{},{},{},{}", r.frame_ms, r.hop_ms, r.n_frames, r.best_dev_eer);
            }
            Ok(0)
        }
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

/// Training allocates and frees tensors of tens of megabytes every step.
/// Keeping freed memory in the heap instead of handing it back to the OS
/// avoids faulting the same pages in again on the next step.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn keep_freed_memory() {
    // SAFETY: mallopt only changes allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn keep_freed_memory() {}

fn main() -> ExitCode {
    keep_freed_memory();
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(RUN_ERROR)
        }
    }
}
