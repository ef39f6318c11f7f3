//! Aggregates sweep manifests into the method-by-temperature grid: final and
//! peak selection gap per cell, plus per-method worst accuracy and accuracy
//! range across temperatures.

use gatenet::error::{Error, Result};
use gatenet::metrics::peak_gap;
use gatenet::training::MetricsLog;
use std::collections::BTreeMap;
use std::path::Path;

use crate::sweep::{CellStatus, Manifest};

/// Aggregated statistics of one (method, tau) cell across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub method: String,
    pub tau: f64,
    pub seeds: usize,
    /// Mean final selection gap across seeds.
    pub final_gap: f64,
    /// Largest-magnitude selection gap over all checkpoints and seeds.
    pub peak_gap: f64,
    /// Mean final deployment (hard-circuit) accuracy across seeds.
    pub final_acc_hard: f64,
    /// Mean final method-forward accuracy across seeds.
    pub final_acc_method: f64,
}

/// Whole-report aggregation.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub cells: Vec<CellSummary>,
    /// Per method: (worst final hard accuracy across taus, accuracy range).
    pub robustness: Vec<(String, f64, f64)>,
    pub failed_cells: usize,
}

/// Builds the aggregate report from a sweep manifest. Only completed cells
/// contribute; failed cells are counted.
pub fn build_report(manifest: &Manifest, base_dir: &Path) -> Result<Report> {
    let mut groups: BTreeMap<(String, String), Vec<&crate::sweep::ManifestCell>> = BTreeMap::new();
    let mut failed = 0usize;
    let mut completed = 0usize;
    for cell in &manifest.cells {
        match cell.status {
            CellStatus::Completed => {
                completed += 1;
                // Order-independent key: method name, then numeric tau.
                groups
                    .entry((cell.method.clone(), format!("{:020.9}", cell.tau)))
                    .or_default()
                    .push(cell);
            }
            CellStatus::Failed => failed += 1,
            CellStatus::Pending => {}
        }
    }
    if completed == 0 {
        return Err(Error::data("manifest holds no completed runs"));
    }

    let mut cells = Vec::new();
    for ((method, _), group) in &groups {
        let tau = group[0].tau;
        let mut final_gap = 0.0;
        let mut final_hard = 0.0;
        let mut final_method = 0.0;
        let mut peak = 0.0f64;
        for cell in group {
            let log = MetricsLog::read_jsonl(&base_dir.join(&cell.dir).join("metrics.jsonl"))?;
            let last = log
                .final_row()
                .ok_or_else(|| Error::data(format!("empty metrics log in {}", cell.dir)))?;
            final_gap += last.selection_gap;
            final_hard += last.a_hard;
            final_method += last.a_method;
            let p = peak_gap(&log.rows)?;
            if p.abs() > peak.abs() {
                peak = p;
            }
        }
        let n = group.len() as f64;
        cells.push(CellSummary {
            method: method.clone(),
            tau,
            seeds: group.len(),
            final_gap: final_gap / n,
            peak_gap: peak,
            final_acc_hard: final_hard / n,
            final_acc_method: final_method / n,
        });
    }

    // Robustness per method: worst and range of mean final hard accuracy
    // across the temperature grid.
    let mut by_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for cell in &cells {
        by_method
            .entry(cell.method.clone())
            .or_default()
            .push(cell.final_acc_hard);
    }
    let robustness = by_method
        .into_iter()
        .map(|(method, accs)| {
            let worst = accs.iter().cloned().fold(f64::INFINITY, f64::min);
            let best = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (method, worst, best - worst)
        })
        .collect();

    Ok(Report {
        cells,
        robustness,
        failed_cells: failed,
    })
}

/// CSV rows of the per-cell grid.
pub fn report_csv(report: &Report) -> String {
    let mut out = String::from(
        "method,tau,seeds,final_selection_gap,peak_selection_gap,final_acc_hard,final_acc_method\n",
    );
    for c in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.method, c.tau, c.seeds, c.final_gap, c.peak_gap, c.final_acc_hard, c.final_acc_method
        ));
    }
    out
}

/// Human-readable grid: per method row, per tau column, "final/peak" gap in
/// percentage points, then the robustness table.
pub fn report_text(report: &Report) -> String {
    let mut taus: Vec<f64> = report.cells.iter().map(|c| c.tau).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let mut methods: Vec<String> = report.cells.iter().map(|c| c.method.clone()).collect();
    methods.sort();
    methods.dedup();

    let mut out = String::from("selection gap %, format final/peak\n");
    out.push_str(&format!("{:<18}", "method"));
    for tau in &taus {
        out.push_str(&format!("{:>16}", format!("tau={tau}")));
    }
    out.push('\n');
    for method in &methods {
        out.push_str(&format!("{method:<18}"));
        for tau in &taus {
            let cell = report
                .cells
                .iter()
                .find(|c| &c.method == method && c.tau == *tau);
            match cell {
                Some(c) => out.push_str(&format!(
                    "{:>16}",
                    format!("{:.1}/{:.1}", c.final_gap * 100.0, c.peak_gap * 100.0)
                )),
                None => out.push_str(&format!("{:>16}", "-")),
            }
        }
        out.push('\n');
    }
    out.push_str("\ndeployment accuracy %, worst/range across the tau grid\n");
    for (method, worst, range) in &report.robustness {
        out.push_str(&format!(
            "{method:<18}{:>8.1}{:>8.1}\n",
            worst * 100.0,
            range * 100.0
        ));
    }
    if report.failed_cells > 0 {
        out.push_str(&format!("\n{} failed cell(s) excluded\n", report.failed_cells));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DatasetChoice, ExperimentConfig, MethodChoice};
    use crate::sweep::{run_sweep, SweepGrid};
    use gatenet::data::SyntheticKind;

    #[test]
    fn report_aggregates_sweep_and_is_order_independent() {
        let tmp = tempfile::tempdir().unwrap();
        let mut base = ExperimentConfig::default();
        base.dataset = DatasetChoice::Synthetic(SyntheticKind::Parity);
        base.synthetic_dims = 6;
        base.synthetic_samples = 96;
        base.subset = None;
        base.layers = 1;
        base.width = 8;
        base.iters = 10;
        base.batch = 8;
        base.eval_every = 5;
        base.out = tmp.path().to_path_buf();

        let grid = SweepGrid {
            methods: vec![MethodChoice::parse("hard-st").unwrap()],
            taus: vec![0.5, 1.0],
            seeds: vec![0, 1],
        };
        let mut manifest = run_sweep(&base, &grid, 1).unwrap();
        let report = build_report(&manifest, tmp.path()).unwrap();
        assert_eq!(report.cells.len(), 2);
        assert_eq!(report.cells[0].seeds, 2);
        // Hard-ST: zero selection gap in every cell.
        for cell in &report.cells {
            assert_eq!(cell.final_gap, 0.0);
            assert_eq!(cell.peak_gap, 0.0);
        }
        assert_eq!(report.robustness.len(), 1);

        manifest.cells.reverse();
        let reversed = build_report(&manifest, tmp.path()).unwrap();
        assert_eq!(report.cells, reversed.cells);

        let csv = report_csv(&report);
        assert_eq!(csv.lines().count(), 3);
        let text = report_text(&report);
        assert!(text.contains("hard-st"));
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let manifest = Manifest::default();
        assert!(build_report(&manifest, Path::new(".")).is_err());
    }
}
