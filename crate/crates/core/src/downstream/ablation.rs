use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{finetune, labels_of, EvalReport, Init, TaskSpec};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{Dataset, ItemRef, Level, Task};
use crate::error::{Error, Result};
use crate::nn::derive_seed;

pub const TSV_HEADER: &str = "level\ttask\tinit\tfraction\tseed\tauroc\taupr\tf1\tkappa\tepochs";

/// Nested, seeded subsample of `train`: the first `ceil(fraction · n)` items of
/// one fixed permutation, returned in their original order. Smaller fractions
/// are therefore subsets of larger ones.
pub fn subsample(
    ds: &Dataset,
    train: &[ItemRef],
    task: Task,
    fraction: f64,
    seed: u64,
) -> Result<Vec<ItemRef>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let picked = if fraction == 1.0 {
        train.to_vec()
    } else {
        let keep = ((fraction * train.len() as f64).ceil() as usize).max(1);
        let mut pos: Vec<usize> = (0..train.len()).collect();
        pos.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "subsample", 0)));
        let mut chosen = pos[..keep].to_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| train[i]).collect()
    };
    let y = labels_of(ds, &picked, task)?;
    if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
        return Err(Error::FractionTooSmall { fraction });
    }
    Ok(picked)
}

/// Seed-averaged result for one fraction and arm.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub level: Level,
    pub task: Task,
    pub init: Init,
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub auroc: f64,
    pub aupr: f64,
    pub f1: f64,
    pub kappa: f64,
    pub epochs: f64,
    pub reports: Vec<EvalReport>,
}

/// Runs the pretrained arm (`init`) and the scratch arm for every fraction
/// and seed. Rows come out fraction-major, pretrained arm first.
pub fn ablation_run(
    ds: &Dataset,
    cfg: &Config,
    ckpt: Option<&Checkpoint>,
    task: Task,
    init: Init,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(2 * fractions.len());
    for &fraction in fractions {
        for arm in [init, Init::Scratch] {
            let mut reports = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let spec = TaskSpec {
                    task,
                    init: arm,
                    train_fraction: fraction,
                    seed,
                };
                reports.push(finetune(ds, cfg, ckpt, &spec)?);
            }
            let mean = |f: &dyn Fn(&EvalReport) -> f64| {
                reports.iter().map(f).sum::<f64>() / reports.len() as f64
            };
            rows.push(AblationRow {
                level: task.level(),
                task,
                init: arm,
                fraction,
                seeds: seeds.to_vec(),
                auroc: mean(&|r| r.auroc),
                aupr: mean(&|r| r.aupr),
                f1: mean(&|r| r.f1),
                kappa: mean(&|r| r.kappa),
                epochs: mean(&|r| r.epochs as f64),
                reports,
            });
        }
    }
    Ok(rows)
}

/// Header plus one line per row; the seed column lists the averaged seeds.
pub fn write_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.2}",
            r.level,
            r.task,
            r.init,
            r.fraction,
            seeds.join(","),
            r.auroc,
            r.aupr,
            r.f1,
            r.kappa,
            r.epochs
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig};
    use crate::downstream::Split;

    fn ds() -> Dataset {
        generate_dataset(&GenConfig {
            n_patients: 80,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn subsamples_are_nested_and_ordered() {
        let d = ds();
        let split = Split::new(&d, Level::Stay, 1).unwrap();
        let small = subsample(&d, &split.train, Task::Arf, 0.1, 1).unwrap();
        let large = subsample(&d, &split.train, Task::Arf, 0.5, 1).unwrap();
        assert!(small.iter().all(|x| large.contains(x)));
        assert_eq!(subsample(&d, &split.train, Task::Arf, 1.0, 1).unwrap(), split.train);
        let pos: Vec<usize> = large
            .iter()
            .map(|x| split.train.iter().position(|y| y == x).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn one_class_subsample_is_rejected() {
        let d = ds();
        let split = Split::new(&d, Level::Stay, 1).unwrap();
        assert!(matches!(
            subsample(&d, &split.train, Task::Arf, 1e-9, 1),
            Err(Error::FractionTooSmall { .. })
        ));
        assert!(subsample(&d, &split.train, Task::Arf, 0.0, 1).is_err());
    }

    #[test]
    fn table_shape() {
        let d = ds();
        let mut cfg = Config::default();
        cfg.finetune.max_epochs = 2;
        let rows = ablation_run(&d, &cfg, None, Task::Arf, Init::Scratch, &[0.5, 1.0], &[0]).unwrap();
        assert_eq!(rows.len(), 4);
        let tsv = write_tsv(&rows);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], TSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines.iter().all(|l| l.split('\t').count() == 10));
        let plain = finetune(&d, &cfg, None, &TaskSpec::new(Task::Arf, Init::Scratch, 0)).unwrap();
        assert_eq!(rows[2].reports[0], plain);
    }
}
