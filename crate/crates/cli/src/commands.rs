use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use hmp_core::admission::pretrain_admission;
use hmp_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hmp_core::config::Config;
use hmp_core::data::{generate_dataset, load_dataset, save_dataset, Task};
use hmp_core::downstream::{ablation_run, finetune, write_tsv, AblationRow, Init, TaskSpec};
use hmp_core::gradsuite::{run_suite, STEP, TOLERANCE};
use hmp_core::stay::pretrain_stay;

use crate::cli::{flag_given, list, resolve_config};

/// Usage errors exit 1, runtime errors exit 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<hmp_core::Error> for Failure {
    fn from(e: hmp_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Writes each line to stdout and, when open, to the log file.
struct Logger {
    file: Option<File>,
}

impl Logger {
    fn open(path: Option<PathBuf>) -> Result<Self, Failure> {
        let file = match path {
            Some(p) => Some(
                File::create(&p)
                    .map_err(|e| Failure::Runtime(format!("cannot create log {}: {e}", p.display())))?,
            ),
            None => None,
        };
        Ok(Logger { file })
    }

    fn line(&mut self, msg: &str) {
        println!("{msg}");
        if let Some(f) = self.file.as_mut() {
            let _ = writeln!(f, "{msg}");
        }
    }
}

fn arg<'a>(m: &'a ArgMatches, id: &str) -> &'a str {
    m.get_one::<String>(id).map(String::as_str).expect("required by the parser")
}

fn log_path(m: &ArgMatches, out: &str) -> PathBuf {
    match m.get_one::<String>("log") {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(format!("{out}.log")),
    }
}

fn usage<T>(r: Result<T, String>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn parse_init(m: &ArgMatches) -> Result<Init, Failure> {
    usage(arg(m, "init").parse().map_err(|e: hmp_core::Error| format!("--init: {e}")))
}

fn parse_task(s: &str) -> Result<Task, Failure> {
    usage(s.parse().map_err(|e: hmp_core::Error| format!("--task: {e}")))
}

fn optional_ckpt(m: &ArgMatches) -> Result<Option<Checkpoint>, Failure> {
    Ok(match m.get_one::<String>("ckpt") {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    })
}

fn write_file(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn dispatch(name: &str, m: &ArgMatches) -> Outcome {
    let mut cfg = usage(resolve_config(m))?;
    match name {
        "gen-data" => gen_data(&mut cfg, m),
        "pretrain-stay" => pretrain_stay_cmd(&cfg, m),
        "pretrain-admission" => pretrain_admission_cmd(&cfg, m),
        "finetune" => finetune_cmd(&cfg, m),
        "ablate" => ablate_cmd(&cfg, m),
        "eval" => eval_cmd(&cfg, m),
        "gradcheck" => gradcheck_cmd(m),
        other => Err(Failure::Usage(format!("unknown command `{other}`"))),
    }
}

fn gen_data(cfg: &mut Config, m: &ArgMatches) -> Outcome {
    if flag_given(m, "seed") && !flag_given(m, "data_seed") {
        cfg.data.seed = cfg.seed;
    }
    let out = arg(m, "out");
    let ds = generate_dataset(&cfg.data)?;
    save_dataset(&ds, out)?;
    println!(
        "patients={} admissions={} stays={} seed={} out={out}",
        ds.patients.len(),
        ds.n_admissions(),
        ds.n_stays(),
        cfg.data.seed
    );
    Ok(())
}

fn pretrain_stay_cmd(cfg: &Config, m: &ArgMatches) -> Outcome {
    let out = arg(m, "out");
    let ds = load_dataset(arg(m, "data"))?;
    let mut log = Logger::open(Some(log_path(m, out)))?;
    let run = pretrain_stay(&ds, cfg, &mut |l| log.line(l))?;
    save_checkpoint(&run.checkpoint, out)?;
    log.line(&format!("checkpoint={out} stage=stay"));
    Ok(())
}

fn pretrain_admission_cmd(cfg: &Config, m: &ArgMatches) -> Outcome {
    let out = arg(m, "out");
    let ds = load_dataset(arg(m, "data"))?;
    let stage1 = load_checkpoint(arg(m, "stage1"))?;
    let mut log = Logger::open(Some(log_path(m, out)))?;
    let run = pretrain_admission(&ds, cfg, &stage1, &mut |l| log.line(l))?;
    save_checkpoint(&run.checkpoint, out)?;
    log.line(&format!("checkpoint={out} stage=admission"));
    Ok(())
}

fn finetune_cmd(cfg: &Config, m: &ArgMatches) -> Outcome {
    let ds = load_dataset(arg(m, "data"))?;
    let ckpt = optional_ckpt(m)?;
    let spec = TaskSpec {
        task: parse_task(arg(m, "task"))?,
        init: parse_init(m)?,
        train_fraction: *m.get_one::<f64>("fraction").expect("has default"),
        seed: cfg.seed,
    };
    let mut log = Logger::open(m.get_one::<String>("log").map(PathBuf::from))?;
    let r = finetune(&ds, cfg, ckpt.as_ref(), &spec)?;
    for e in &r.series {
        log.line(&format!(
            "epoch={} train_loss={:.6} val_loss={:.6} test_auroc={:.6} test_f1={:.6}",
            e.epoch, e.train_loss, e.val_loss, e.test_auroc, e.test_f1
        ));
    }
    log.line(&format!(
        "task={} init={} fraction={} seed={} auroc={:.6} aupr={:.6} f1={:.6} kappa={:.6} epochs={} best_epoch={}",
        spec.task, spec.init, spec.train_fraction, spec.seed, r.auroc, r.aupr, r.f1, r.kappa, r.epochs, r.best_epoch
    ));
    Ok(())
}

fn ablate_cmd(cfg: &Config, m: &ArgMatches) -> Outcome {
    let ds = load_dataset(arg(m, "data"))?;
    let ckpt = optional_ckpt(m)?;
    let task = parse_task(arg(m, "task"))?;
    let fractions: Vec<f64> = usage(list(m, "fractions"))?;
    let seeds: Vec<u64> = usage(list(m, "seeds"))?;
    let rows = ablation_run(&ds, cfg, ckpt.as_ref(), task, parse_init(m)?, &fractions, &seeds)?;
    let tsv = write_tsv(&rows);
    print!("{tsv}");
    write_file(Path::new(arg(m, "out")), &tsv)
}

fn eval_cmd(cfg: &Config, m: &ArgMatches) -> Outcome {
    let ds = load_dataset(arg(m, "data"))?;
    let ckpt = optional_ckpt(m)?;
    let init = parse_init(m)?;
    let seeds: Vec<u64> = usage(list(m, "seeds"))?;
    let names: Vec<String> = usage(list(m, "tasks"))?;
    let tasks = names.iter().map(|t| parse_task(t)).collect::<Result<Vec<_>, _>>()?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for task in tasks {
        let pair = ablation_run(&ds, cfg, ckpt.as_ref(), task, init, &[1.0], &seeds)?;
        println!(
            "task={task} {}_auroc={:.6} scratch_auroc={:.6} {}_f1={:.6} scratch_f1={:.6}",
            init, pair[0].auroc, pair[1].auroc, init, pair[0].f1, pair[1].f1
        );
        rows.extend(pair);
    }
    match m.get_one::<String>("out") {
        Some(out) => write_file(Path::new(out), &write_tsv(&rows)),
        None => Ok(()),
    }
}

fn gradcheck_cmd(m: &ArgMatches) -> Outcome {
    let seeds = *m.get_one::<usize>("gradcheck_seeds").expect("has default");
    let entries = run_suite(seeds)?;
    let mut all = true;
    for e in &entries {
        all &= e.pass;
        println!(
            "{:<14} seeds={} checked={} max_rel_err={:.3e} {}",
            e.name,
            e.seeds,
            e.checked,
            e.max_rel_error,
            if e.pass { "PASS" } else { "FAIL" }
        );
    }
    println!("step={STEP:e} tolerance={TOLERANCE:e} {}", if all { "all layers pass" } else { "FAILED" });
    if all {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}
