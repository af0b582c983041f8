use clap::{Arg, ArgMatches, Command};
use hmp_core::config::{Config, Profile, KEYS};

pub const PROFILE_ENV: &str = "HMP_PROFILE";


fn default_text(key: &str) -> String {
    let desk = Config::profile(Profile::Desk).get(key).unwrap_or_default();
    let paper = Config::profile(Profile::Paper).get(key).unwrap_or_default();
    if desk == paper {
        desk
    } else {
        format!("{desk} (paper: {paper})")
    }
}

/// One `--key` flag per configuration key. No clap default is attached so
/// that only explicitly given flags override the profile and config file.
fn config_args() -> Vec<Arg> {
    let mut args = vec![
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("`key = value` file applied after the profile [default: none]"),
        Arg::new("profile")
            .long("profile")
            .value_name("PROFILE")
            .value_parser(["desk", "paper"])
            .help(format!("Hyperparameter profile [default: ${PROFILE_ENV} or desk]")),
    ];
    for &(key, about) in KEYS.iter().filter(|(k, _)| *k != "profile") {
        args.push(
            Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .help(format!("{about} [default: {}]", default_text(key)))
                .help_heading("Configuration"),
        );
    }
    args
}

fn path(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").help(help)
}

fn log_arg() -> Arg {
    path("log", "Log file [default: <out>.log]")
}

pub fn build() -> Command {
    let data = || path("data", "Dataset file").required(true);
    let task = || {
        Arg::new("task")
            .long("task")
            .value_name("TASK")
            .required(true)
            .value_parser(["arf", "shock", "mortality", "readmission", "risk"])
            .help("Downstream task")
    };
    let init = || {
        Arg::new("init")
            .long("init")
            .value_name("INIT")
            .default_value("a+s")
            .value_parser(["a+s", "s", "a", "scratch"])
            .help("Initialization of the pretrained arm")
    };
    let seeds = || {
        Arg::new("seeds")
            .long("seeds")
            .value_name("LIST")
            .default_value("0,1,2,3,4")
            .help("Comma-separated fine-tuning seeds")
    };
    let ckpt = || path("ckpt", "Stage checkpoint to initialize from [default: none]");

    let subcommands = [
        Command::new("gen-data")
            .about("Generate a synthetic hierarchical dataset")
            .long_about(
                "Generate a synthetic hierarchical dataset. The generator seed is --data_seed; \
                 when only --seed is given on the command line it seeds the generator instead.",
            )
            .arg(path("out", "Output dataset file").required(true)),
        Command::new("pretrain-stay")
            .about("Stage 1: stay-level reconstruction pretraining")
            .arg(data())
            .arg(path("out", "Output checkpoint").required(true))
            .arg(log_arg()),
        Command::new("pretrain-admission")
            .about("Stage 2: masked code prediction and contrastive pretraining")
            .arg(data())
            .arg(path("stage1", "Stage-1 checkpoint").required(true))
            .arg(path("out", "Output checkpoint").required(true))
            .arg(log_arg()),
        Command::new("finetune")
            .about("Fine-tune one task with one seed and report test metrics")
            .arg(data())
            .arg(task())
            .arg(init())
            .arg(ckpt())
            .arg(
                Arg::new("fraction")
                    .long("fraction")
                    .value_name("F")
                    .default_value("1.0")
                    .value_parser(clap::value_parser!(f64))
                    .help("Share of the training split used"),
            )
            .arg(log_arg()),
        Command::new("ablate")
            .about("Training-size ablation: pretrained and scratch arms per fraction")
            .arg(data())
            .arg(task())
            .arg(init())
            .arg(ckpt())
            .arg(
                Arg::new("fractions")
                    .long("fractions")
                    .value_name("LIST")
                    .default_value("0.1,0.25,0.5,1.0")
                    .help("Comma-separated training fractions"),
            )
            .arg(seeds())
            .arg(path("out", "Output TSV").required(true)),
        Command::new("eval")
            .about("Compare the pretrained arm with scratch on several tasks")
            .arg(data())
            .arg(ckpt())
            .arg(init())
            .arg(
                Arg::new("tasks")
                    .long("tasks")
                    .value_name("LIST")
                    .default_value("arf,shock,mortality,readmission")
                    .help("Comma-separated tasks"),
            )
            .arg(seeds())
            .arg(path("out", "Output TSV [default: none]")),
        Command::new("gradcheck")
            .about("Finite-difference gradient check of every layer and loss")
            .arg(
                Arg::new("gradcheck_seeds")
                    .long("gradcheck-seeds")
                    .value_name("N")
                    .default_value("20")
                    .value_parser(clap::value_parser!(usize))
                    .help("Random seeds per layer"),
            ),
    ];
    Command::new("hmp")
        .about("Two-stage hierarchical EHR pretraining, fine-tuning and evaluation")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(subcommands.into_iter().map(|c| c.args(config_args())))
        .after_help(format!(
            "Configuration precedence: defaults < profile (--profile or ${PROFILE_ENV}) < --config file < flags."
        ))
}

/// Config layered as defaults, profile, config file, then explicit flags.
/// Errors name the offending flag or file.
pub fn resolve_config(m: &ArgMatches) -> Result<Config, String> {
    let profile = match m.get_one::<String>("profile") {
        Some(p) => Some(p.clone()),
        None => std::env::var(PROFILE_ENV).ok().filter(|s| !s.is_empty()),
    };
    let mut cfg = Config::default();
    if let Some(p) = profile {
        cfg.set("profile", &p)
            .map_err(|e| format!("profile `{p}`: {e}"))?;
    }
    if let Some(file) = m.get_one::<String>("config") {
        cfg.apply_file(file).map_err(|e| format!("--config {file}: {e}"))?;
    }
    for &(key, _) in KEYS.iter().filter(|(k, _)| *k != "profile") {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v).map_err(|e| format!("--{key}: {e}"))?;
        }
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn flag_given(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(clap::parser::ValueSource::CommandLine)
}

pub fn list<T: std::str::FromStr>(m: &ArgMatches, id: &str) -> Result<Vec<T>, String> {
    let raw = m.get_one::<String>(id).expect("has default");
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| format!("--{id}: invalid entry `{s}`"))
        })
        .collect()
}
