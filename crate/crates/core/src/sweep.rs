//! Grid sweeps over distillation hyperparameters, run on worker threads.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::analysis::write_file;
use crate::distill::LossKind;
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, ExperimentConfig, RunSummary};
use crate::rng::derive_seed;

pub const KL_GRID_TEMPERATURES: [f32; 4] = [1.0, 5.0, 10.0, 20.0];
pub const KL_GRID_LAMBDAS: [f32; 4] = [0.1, 0.2, 0.5, 1.0];
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";
pub const SWEEP_NAMES: [&str; 1] = ["kl-grid"];

/// One run of a sweep: its configuration and position in the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub config: ExperimentConfig,
}

/// Temperature × λ grid around `base`, which must have a teacher. Each cell
/// writes to `<out_dir>/T<T>_lambda<λ>` with a seed derived from the base
/// seed and the cell index.
pub fn kl_grid(base: &ExperimentConfig) -> Result<Vec<Cell>> {
    if base.teacher.is_none() {
        return Err(Error::config(
            "teacher",
            "the kl-grid sweep needs a teacher",
        ));
    }
    let mut cells = Vec::new();
    for &t in &KL_GRID_TEMPERATURES {
        for &l in &KL_GRID_LAMBDAS {
            let index = cells.len();
            let mut config = base.clone();
            config.plan.loss_kind = LossKind::Kl;
            config.plan.temperature = t;
            config.plan.lambda = l;
            config.seed = derive_seed(base.seed, index as u64);
            config.out_dir = base.out_dir.join(format!("T{t}_lambda{l}"));
            cells.push(Cell { index, config });
        }
    }
    Ok(cells)
}

pub fn sweep_cells(name: &str, base: &ExperimentConfig) -> Result<Vec<Cell>> {
    match name {
        "kl-grid" => kl_grid(base),
        _ => Err(Error::Usage(format!(
            "unknown sweep {name:?}; available: {}",
            SWEEP_NAMES.join(", ")
        ))),
    }
}

pub const SWEEP_HEADER: &str =
    "run,temperature,lambda,seed,out_dir,student_train_acc,student_test_acc,student_best_test_acc,teacher_test_acc,final_epoch_loss";

fn summary_row(cell: &Cell, s: &RunSummary) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        cell.index,
        cell.config.plan.temperature,
        cell.config.plan.lambda,
        cell.config.seed,
        cell.config.out_dir.display(),
        s.student.train_accuracy,
        s.student.test_accuracy,
        s.student.best_test_accuracy,
        s.teacher
            .as_ref()
            .map(|t| t.test_accuracy.to_string())
            .unwrap_or_default(),
        s.epoch_mean_loss.last().copied().unwrap_or(f64::NAN),
    )
}

/// Runs every cell on up to `jobs` threads and writes one summary row per
/// successful cell to `summary_path`, in cell order. Fails with the first
/// error (by cell order) after all cells have finished.
pub fn run_sweep(cells: &[Cell], jobs: usize, summary_path: &Path) -> Result<Vec<RunSummary>> {
    for c in cells {
        c.config.validate()?;
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = jobs.clamp(1, cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                log::info!(
                    "sweep run {} -> {}",
                    cell.index,
                    cell.config.out_dir.display()
                );
                let outcome = run_experiment(&cell.config).map(|o| o.summary);
                results.lock().expect("results lock")[i] = Some(outcome);
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    let mut summaries = Vec::with_capacity(cells.len());
    let mut first_error = None;
    for (cell, r) in cells.iter().zip(results) {
        match r.expect("every cell ran") {
            Ok(s) => {
                csv.push_str(&summary_row(cell, &s));
                csv.push('\n');
                summaries.push(s);
            }
            Err(e) => {
                log::error!("sweep run {} failed: {e}", cell.index);
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(dir) = summary_path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_file(summary_path, csv.as_bytes())?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(summaries),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;

    #[test]
    fn grid_has_sixteen_distinct_cells() {
        let base = preset("idat-P-kl").unwrap();
        let cells = kl_grid(&base).unwrap();
        assert_eq!(cells.len(), 16);
        let mut seeds: Vec<u64> = cells.iter().map(|c| c.config.seed).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 16);
        let mut dirs: Vec<_> = cells.iter().map(|c| c.config.out_dir.clone()).collect();
        dirs.sort();
        dirs.dedup();
        assert_eq!(dirs.len(), 16);
        assert!(cells
            .iter()
            .all(|c| c.config.plan.loss_kind == LossKind::Kl));
    }

    #[test]
    fn grid_needs_teacher() {
        assert!(kl_grid(&preset("baseline-par").unwrap()).is_err());
        assert!(sweep_cells("nope", &preset("idat-P-kl").unwrap()).is_err());
    }
}
