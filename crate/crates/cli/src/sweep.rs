//! Factorial sweeps over (method, tau, seed) with a manifest that supports
//! idempotent resume and records per-cell failures without aborting.

use gatenet::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::{exit_code_for, ExperimentConfig, MethodChoice};
use crate::run::{artifacts_complete, cell_dir_name, execute_into};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestCell {
    pub method: String,
    pub tau: f64,
    pub seed: u64,
    pub dir: String,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Pending,
    Completed,
    Failed,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub cells: Vec<ManifestCell>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("bad manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// The sweep grid: Cartesian product of methods, temperatures, and seeds.
pub struct SweepGrid {
    pub methods: Vec<MethodChoice>,
    pub taus: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// Runs (or resumes) a sweep under `base.out`. Completed cells found in an
/// existing manifest with intact artifacts are skipped; failed or pending
/// cells run again. Returns the manifest; cells that fail are marked and do
/// not abort the sweep.
pub fn run_sweep(base: &ExperimentConfig, grid: &SweepGrid, jobs: usize) -> Result<Manifest> {
    if grid.methods.is_empty() || grid.taus.is_empty() || grid.seeds.is_empty() {
        return Err(Error::config("sweep grids must be non-empty"));
    }
    std::fs::create_dir_all(&base.out)?;
    let manifest_path = base.out.join("manifest.json");
    let previous = if manifest_path.exists() {
        Some(Manifest::load(&manifest_path)?)
    } else {
        None
    };

    // Materialize the full grid in a fixed order.
    let mut cells: Vec<(ExperimentConfig, ManifestCell)> = Vec::new();
    for method in &grid.methods {
        for &tau in &grid.taus {
            for &seed in &grid.seeds {
                let mut cfg = base.clone();
                cfg.choice = *method;
                cfg.tau = tau;
                cfg.seed = seed;
                cfg.validate()?;
                let dir = cell_dir_name(&cfg);
                let status = previous
                    .as_ref()
                    .and_then(|m| {
                        m.cells.iter().find(|c| c.dir == dir).map(|c| {
                            if c.status == CellStatus::Completed
                                && artifacts_complete(&base.out.join(&dir))
                            {
                                CellStatus::Completed
                            } else {
                                CellStatus::Pending
                            }
                        })
                    })
                    .unwrap_or(CellStatus::Pending);
                cells.push((
                    cfg,
                    ManifestCell {
                        method: method.name(),
                        tau,
                        seed,
                        dir,
                        status,
                        error: None,
                    },
                ));
            }
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, CellStatus, Option<String>)>> = Mutex::new(Vec::new());
    let jobs = jobs.max(1);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let (cfg, cell) = &cells[i];
                if cell.status == CellStatus::Completed {
                    println!("skip {} (completed)", cell.dir);
                    continue;
                }
                println!("run  {}", cell.dir);
                let outcome = execute_into(cfg, &base.out.join(&cell.dir));
                let (status, error) = match outcome {
                    Ok(_) => (CellStatus::Completed, None),
                    Err(e) => {
                        eprintln!("cell {} failed: {e}", cell.dir);
                        (CellStatus::Failed, Some(e.to_string()))
                    }
                };
                results.lock().unwrap().push((i, status, error));
            });
        }
    });

    for (i, status, error) in results.into_inner().unwrap() {
        cells[i].1.status = status;
        cells[i].1.error = error;
    }
    let manifest = Manifest {
        cells: cells.into_iter().map(|(_, c)| c).collect(),
    };
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

/// Exit code for a finished sweep: 0 unless every cell failed, in which case
/// the first failure's class is propagated.
pub fn sweep_exit_code(manifest: &Manifest) -> u8 {
    let failed = manifest
        .cells
        .iter()
        .filter(|c| c.status == CellStatus::Failed)
        .count();
    if failed == manifest.cells.len() && failed > 0 {
        // All cells failed; surface a config-style failure unless a numeric
        // abort is recorded.
        let numeric = manifest
            .cells
            .iter()
            .any(|c| c.error.as_deref().is_some_and(|e| e.contains("numeric abort")));
        if numeric {
            3
        } else {
            exit_code_for(&Error::config("all sweep cells failed"))
        }
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetChoice;
    use gatenet::data::SyntheticKind;

    fn base_cfg(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetChoice::Synthetic(SyntheticKind::Parity);
        cfg.synthetic_dims = 6;
        cfg.synthetic_samples = 96;
        cfg.subset = None;
        cfg.layers = 1;
        cfg.width = 8;
        cfg.iters = 10;
        cfg.batch = 8;
        cfg.eval_every = 5;
        cfg.out = out.to_path_buf();
        cfg
    }

    #[test]
    fn sweep_runs_grid_and_resumes() {
        let tmp = tempfile::tempdir().unwrap();
        let base = base_cfg(tmp.path());
        let grid = SweepGrid {
            methods: vec![
                MethodChoice::parse("hard-st").unwrap(),
                MethodChoice::parse("soft-mix").unwrap(),
            ],
            taus: vec![0.5, 1.0],
            seeds: vec![0, 1, 2],
        };
        let manifest = run_sweep(&base, &grid, 2).unwrap();
        assert_eq!(manifest.cells.len(), 12);
        assert!(manifest
            .cells
            .iter()
            .all(|c| c.status == CellStatus::Completed));
        assert_eq!(sweep_exit_code(&manifest), 0);

        // Resume: everything already complete, so directories are untouched.
        let before: Vec<std::time::SystemTime> = manifest
            .cells
            .iter()
            .map(|c| {
                std::fs::metadata(tmp.path().join(&c.dir).join("metrics.jsonl"))
                    .unwrap()
                    .modified()
                    .unwrap()
            })
            .collect();
        let again = run_sweep(&base, &grid, 1).unwrap();
        assert!(again.cells.iter().all(|c| c.status == CellStatus::Completed));
        let after: Vec<std::time::SystemTime> = again
            .cells
            .iter()
            .map(|c| {
                std::fs::metadata(tmp.path().join(&c.dir).join("metrics.jsonl"))
                    .unwrap()
                    .modified()
                    .unwrap()
            })
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn failing_cell_is_marked_without_aborting() {
        let tmp = tempfile::tempdir().unwrap();
        let mut base = base_cfg(tmp.path());
        base.lr = 1e308; // numeric abort in every cell that runs
        let grid = SweepGrid {
            methods: vec![MethodChoice::parse("soft-mix").unwrap()],
            taus: vec![1.0],
            seeds: vec![0, 1],
        };
        let manifest = run_sweep(&base, &grid, 1).unwrap();
        assert_eq!(manifest.cells.len(), 2);
        assert!(manifest.cells.iter().all(|c| c.status == CellStatus::Failed));
        assert!(manifest.cells[0].error.as_deref().unwrap().contains("numeric abort"));
        assert_eq!(sweep_exit_code(&manifest), 3);
    }
}
