//! Loss-weight grid search and the module ablation study.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Trainer, TrainConfig, TrainOutcome};
use crate::cnmf::{cnmf_fuse, CnmfConfig};
use crate::error::{Error, Result};
use crate::losses::{LossParts, LossWeights};
use crate::metrics::{evaluate, MetricReport};
use crate::mixing::{HsiCube, PsfKernel, SrfMatrix};
use crate::network::{ModuleFlags, NetworkConfig};

/// Applies `f` to every item on up to `threads` workers; results keep the
/// input order, so output is independent of the thread count.
pub fn parallel_map<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return items.into_iter().map(f).collect();
    }
    let queue: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let item = queue[i].lock().expect("queue lock").take().expect("each item taken once");
                let r = f(item);
                *results[i].lock().expect("result lock") = Some(r);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("result lock").expect("every item ran"))
        .collect()
}

/// Candidate values for each loss weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for LossGrid {
    fn default() -> Self {
        Self {
            alpha: vec![0.01, 0.1, 1.0],
            beta: vec![1e-5, 1e-4, 1e-3],
            gamma: vec![0.1, 1.0, 10.0],
        }
    }
}

impl LossGrid {
    /// Every combination, `alpha` slowest; `epsilon` is held fixed.
    pub fn cells(&self, epsilon: f64) -> Vec<LossWeights> {
        let mut out = Vec::with_capacity(self.alpha.len() * self.beta.len() * self.gamma.len());
        for &alpha in &self.alpha {
            for &beta in &self.beta {
                for &gamma in &self.gamma {
                    out.push(LossWeights {
                        alpha,
                        beta,
                        gamma,
                        epsilon,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub weights: LossWeights,
    /// Held-out loss components at the best epoch.
    pub validation: LossParts,
    /// Unweighted held-out data fit, `L_R + L_C`, used to rank cells.
    pub score: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub rows: Vec<GridRow>,
    /// Index of the selected row.
    pub best: usize,
}

impl GridSearch {
    pub fn best_weights(&self) -> LossWeights {
        self.rows[self.best].weights
    }
}

fn held_out_at_best(outcome: &TrainOutcome) -> LossParts {
    outcome
        .log
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .map(|r| r.validation)
        .unwrap_or_default()
}

/// Trains one run per grid cell and selects the lowest held-out data fit.
/// Total validation losses are not compared across cells: they scale with the
/// very weights being searched, which would favour the smallest ones.
pub fn grid_search(
    x: &HsiCube,
    y: &HsiCube,
    net_cfg: &NetworkConfig,
    base: &TrainConfig,
    grid: &LossGrid,
    threads: usize,
) -> Result<GridSearch> {
    let cells = grid.cells(base.loss.epsilon);
    if cells.is_empty() {
        return Err(Error::invalid("loss grid is empty"));
    }
    let total = cells.len();
    let results = parallel_map(cells.into_iter().enumerate().collect(), threads, |(i, weights)| {
        let cfg = TrainConfig {
            loss: weights,
            ..base.clone()
        };
        let out = Trainer::new(x, y, net_cfg.clone(), cfg)?.run(|_, _| Ok(()))?;
        let validation = held_out_at_best(&out);
        log::info!(
            "grid cell {}/{} alpha {} beta {} gamma {}: fit {:.6e}",
            i + 1,
            total,
            weights.alpha,
            weights.beta,
            weights.gamma,
            validation.reconstruction + validation.consistency
        );
        Ok(GridRow {
            weights,
            validation,
            score: validation.reconstruction + validation.consistency,
            best_epoch: out.best_epoch,
            epochs_run: out.epochs_run,
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.score.total_cmp(&b.1.score))
        .map(|(i, _)| i)
        .expect("grid is non-empty");
    Ok(GridSearch { rows, best })
}

pub fn write_grid_csv<W: std::io::Write>(out: W, grid: &GridSearch) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "alpha", "beta", "gamma", "val_L_R", "val_L_ASC", "val_L_S", "val_L_C", "val_total", "score", "best_epoch",
        "epochs_run", "selected",
    ])?;
    for (i, r) in grid.rows.iter().enumerate() {
        w.write_record(&[
            r.weights.alpha.to_string(),
            r.weights.beta.to_string(),
            r.weights.gamma.to_string(),
            r.validation.reconstruction.to_string(),
            r.validation.asc.to_string(),
            r.validation.sparsity.to_string(),
            r.validation.consistency.to_string(),
            r.validation.total.to_string(),
            r.score.to_string(),
            r.best_epoch.to_string(),
            r.epochs_run.to_string(),
            (i == grid.best).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One network variant of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub name: &'static str,
    pub flags: ModuleFlags,
}

const fn arm(name: &'static str, use_clamp: bool, use_ssc: bool, use_ca: bool) -> Arm {
    Arm {
        name,
        flags: ModuleFlags {
            use_clamp,
            use_ssc,
            use_ca,
        },
    }
}

/// The network rows of the ablation table, weakest configuration first. The
/// clamp-off arm swaps the clamp for a channel softmax with both modules off,
/// so it pairs with `clamp`.
pub const ARMS: [Arm; 5] = [
    arm("clamp_off", false, false, false),
    arm("clamp", true, false, false),
    arm("clamp_ssc", true, true, false),
    arm("clamp_ca", true, false, true),
    arm("full", true, true, true),
];

/// The five headline metrics, without per-band detail.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub psnr: f64,
    pub sam: f64,
    pub ergas: f64,
    pub ssim: f64,
    pub uiqi: f64,
}

impl From<&MetricReport> for MetricSummary {
    fn from(m: &MetricReport) -> Self {
        Self {
            psnr: m.psnr,
            sam: m.sam,
            ergas: m.ergas,
            ssim: m.ssim,
            uiqi: m.uiqi,
        }
    }
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl MetricSummary {
    /// Per-metric median over runs.
    pub fn median_of(runs: &[MetricSummary]) -> Self {
        let pick = |f: fn(&MetricSummary) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            psnr: pick(|m| m.psnr),
            sam: pick(|m| m.sam),
            ergas: pick(|m| m.ergas),
            ssim: pick(|m| m.ssim),
            uiqi: pick(|m| m.uiqi),
        }
    }
}

/// Observations, ground truth and (for the CNMF row) the true operators.
#[derive(Clone, Copy, Debug)]
pub struct AblationInputs<'a> {
    pub lr_hsi: &'a HsiCube,
    pub hr_msi: &'a HsiCube,
    pub reference: &'a HsiCube,
    pub operators: Option<(&'a PsfKernel, &'a SrfMatrix)>,
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    /// Arm name, or `cnmf`.
    pub method: String,
    /// `None` for the CNMF row.
    pub flags: Option<ModuleFlags>,
    pub median: MetricSummary,
    /// Per-seed training runs (empty for CNMF).
    pub runs: Vec<AblationRun>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, method: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Trains every arm of [`ARMS`] once per seed and reports per-metric medians,
/// followed by a CNMF row when the operators are given.
pub fn run_ablation(
    inputs: AblationInputs<'_>,
    net_cfg: &NetworkConfig,
    base: &TrainConfig,
    seeds: &[u64],
    cnmf: &CnmfConfig,
    threads: usize,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let ratio = (inputs.hr_msi.height() / inputs.lr_hsi.height().max(1)) as f64;
    let jobs: Vec<(usize, u64)> = (0..ARMS.len()).flat_map(|a| seeds.iter().map(move |&s| (a, s))).collect();
    let total = jobs.len();
    let results = parallel_map(jobs, threads, |(a, seed)| -> Result<(usize, AblationRun)> {
        let cfg = TrainConfig {
            seed,
            modules: ARMS[a].flags,
            ..base.clone()
        };
        let outcome = Trainer::new(inputs.lr_hsi, inputs.hr_msi, net_cfg.clone(), cfg)?.run(|_, _| Ok(()))?;
        let metrics = evaluate(inputs.reference, &outcome.fused, ratio)?;
        log::info!(
            "arm {} seed {}: psnr {:.3} sam {:.3} after {} epochs ({:.1}s); {} runs total",
            ARMS[a].name,
            seed,
            metrics.psnr,
            metrics.sam,
            outcome.epochs_run,
            outcome.seconds,
            total
        );
        Ok((a, AblationRun { seed, outcome, metrics }))
    });
    let mut per_arm: Vec<Vec<AblationRun>> = (0..ARMS.len()).map(|_| Vec::new()).collect();
    for r in results {
        let (a, run) = r?;
        per_arm[a].push(run);
    }
    let mut rows: Vec<AblationRow> = ARMS
        .iter()
        .zip(per_arm)
        .map(|(arm, runs)| {
            let summaries: Vec<MetricSummary> = runs.iter().map(|r| (&r.metrics).into()).collect();
            AblationRow {
                method: arm.name.to_string(),
                flags: Some(arm.flags),
                median: MetricSummary::median_of(&summaries),
                runs,
            }
        })
        .collect();
    if let Some((psf, srf)) = inputs.operators {
        let out = cnmf_fuse(inputs.lr_hsi, inputs.hr_msi, psf, srf, cnmf)?;
        let m = evaluate(inputs.reference, &out.fused, ratio)?;
        rows.insert(
            0,
            AblationRow {
                method: "cnmf".into(),
                flags: None,
                median: (&m).into(),
                runs: Vec::new(),
            },
        );
    }
    Ok(AblationTable { rows })
}

/// Method, module switches and median metrics, one line per row.
pub fn write_ablation_csv<W: std::io::Write>(out: W, table: &AblationTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "clamp", "ssc", "ca", "psnr", "sam", "ergas", "ssim", "uiqi", "runs"])?;
    let flag = |f: Option<ModuleFlags>, pick: fn(&ModuleFlags) -> bool| match f {
        Some(f) => if pick(&f) { "yes" } else { "no" }.to_string(),
        None => "-".to_string(),
    };
    for r in &table.rows {
        w.write_record(&[
            r.method.clone(),
            flag(r.flags, |f| f.use_clamp),
            flag(r.flags, |f| f.use_ssc),
            flag(r.flags, |f| f.use_ca),
            r.median.psnr.to_string(),
            r.median.sam.to_string(),
            r.median.ergas.to_string(),
            r.median.ssim.to_string(),
            r.median.uiqi.to_string(),
            r.runs.len().max(1).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_27_cells() {
        let cells = LossGrid::default().cells(0.01);
        assert_eq!(cells.len(), 27);
        assert_eq!((cells[0].alpha, cells[0].beta, cells[0].gamma), (0.01, 1e-5, 0.1));
        assert_eq!((cells[26].alpha, cells[26].beta, cells[26].gamma), (1.0, 1e-3, 10.0));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let out = parallel_map((0..37).collect(), 4, |i: u64| i * i);
        assert_eq!(out, (0..37).map(|i| i * i).collect::<Vec<_>>());
        assert_eq!(parallel_map(Vec::<u8>::new(), 3, |i| i), Vec::<u8>::new());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn arms_cover_the_table() {
        let names: Vec<_> = ARMS.iter().map(|a| a.name).collect();
        assert_eq!(names, ["clamp_off", "clamp", "clamp_ssc", "clamp_ca", "full"]);
        assert_eq!(ARMS[4].flags, ModuleFlags::default());
    }
}
