use rayon::prelude::*;

use super::config::RunConfig;
use super::eval::evaluate_checkpoint;
use super::train::train;
use crate::error::{contract, Error, Result};
use crate::model::Variant;

/// One training run of a sweep or ablation grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub variant: Variant,
    pub lambda_avg: f64,
    pub lambda_var: f64,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Cell {
    pub fn config(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            variant: self.variant,
            lambda_avg: self.lambda_avg,
            lambda_var: self.lambda_var,
            decoder_layers: self.layers,
            n_heads: self.heads,
            seed: self.seed,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell: Cell,
    pub bleu: f64,
    pub accuracy: f64,
    pub ap: f64,
    pub al: f64,
    pub dal: f64,
    pub span: f64,
    /// Set when the cell failed; the metrics are then NaN.
    pub error: Option<String>,
}

pub const CSV_HEADER: &str = "variant,lambda_avg,lambda_var,L,H,seed,BLEU,accuracy,AP,AL,DAL,span";

impl SweepRow {
    pub fn to_csv_row(&self) -> String {
        let c = &self.cell;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            c.variant, c.lambda_avg, c.lambda_var, c.layers, c.heads, c.seed, self.bleu, self.accuracy, self.ap, self.al,
            self.dal, self.span
        )
    }
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

/// Rows whose DAL lies in `[lo, hi]`.
pub fn filter_dal(rows: &[SweepRow], lo: f64, hi: f64) -> Vec<SweepRow> {
    rows.iter().filter(|r| r.dal >= lo && r.dal <= hi).cloned().collect()
}

/// Trains and evaluates one cell; failures become a marked row.
pub fn run_cell(base: &RunConfig, cell: Cell, eval_sentences: usize) -> SweepRow {
    let result = (|| {
        let cfg = cell.config(base);
        let outcome = train(&cfg)?;
        evaluate_checkpoint(&outcome.best, &cfg.task_spec(), eval_sentences)
    })();
    match result {
        Ok(r) => SweepRow {
            cell,
            bleu: r.bleu,
            accuracy: r.token_accuracy,
            ap: r.latency.ap,
            al: r.latency.al,
            dal: r.latency.dal,
            span: r.latency.avg_attention_span,
            error: None,
        },
        Err(e) => {
            log::error!("cell {cell:?} failed: {e}");
            let nan = f64::NAN;
            SweepRow { cell, bleu: nan, accuracy: nan, ap: nan, al: nan, dal: nan, span: nan, error: Some(e.to_string()) }
        }
    }
}

/// Runs every cell on up to `jobs` threads; output order follows `cells`.
pub fn run_cells(base: &RunConfig, cells: &[Cell], jobs: usize, eval_sentences: usize) -> Result<Vec<SweepRow>> {
    if cells.is_empty() {
        return Err(contract("empty grid"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(|&c| run_cell(base, c, eval_sentences)).collect()))
}

/// Cells of a `(λ_avg, λ_var)` grid for every seed, using the base variant
/// and shape.
pub fn sweep_cells(base: &RunConfig, grid: &[(f64, f64)], seeds: &[u64]) -> Result<Vec<Cell>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(contract("sweep needs a nonempty grid and at least one seed"));
    }
    Ok(seeds
        .iter()
        .flat_map(|&seed| {
            grid.iter().map(move |&(lambda_avg, lambda_var)| Cell {
                variant: base.variant,
                lambda_avg,
                lambda_var,
                layers: base.decoder_layers,
                heads: base.n_heads,
                seed,
            })
        })
        .collect())
}

/// Cells of a layers × heads grid for every seed, with the base latency weights.
pub fn ablation_cells(
    base: &RunConfig,
    layers: &[usize],
    heads: &[usize],
    variant: Variant,
    seeds: &[u64],
) -> Result<Vec<Cell>> {
    if layers.is_empty() || heads.is_empty() || seeds.is_empty() {
        return Err(contract("ablation needs nonempty layer, head and seed lists"));
    }
    let mut cells = Vec::new();
    for &seed in seeds {
        for &l in layers {
            for &h in heads {
                cells.push(Cell {
                    variant,
                    lambda_avg: base.lambda_avg,
                    lambda_var: base.lambda_var,
                    layers: l,
                    heads: h,
                    seed,
                });
            }
        }
    }
    Ok(cells)
}

pub fn sweep(base: &RunConfig, grid: &[(f64, f64)], seeds: &[u64], jobs: usize, eval_sentences: usize) -> Result<Vec<SweepRow>> {
    run_cells(base, &sweep_cells(base, grid, seeds)?, jobs, eval_sentences)
}

pub fn ablation(
    base: &RunConfig,
    layers: &[usize],
    heads: &[usize],
    variant: Variant,
    seeds: &[u64],
    jobs: usize,
    eval_sentences: usize,
) -> Result<Vec<SweepRow>> {
    run_cells(base, &ablation_cells(base, layers, heads, variant, seeds)?, jobs, eval_sentences)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cardinalities() {
        let base = RunConfig::default();
        assert_eq!(sweep_cells(&base, &[(0.0, 0.0), (0.0, 0.2), (0.0, 0.4)], &[1]).unwrap().len(), 3);
        assert_eq!(sweep_cells(&base, &[(0.0, 0.1)], &[1, 2, 3]).unwrap().len(), 3);
        assert_eq!(ablation_cells(&base, &[1, 2], &[1, 4], Variant::Offline, &[7]).unwrap().len(), 4);
        assert!(sweep_cells(&base, &[], &[1]).is_err());
        assert!(ablation_cells(&base, &[], &[1], Variant::Offline, &[1]).is_err());
    }

    #[test]
    fn dal_filter_is_inclusive() {
        let cell = Cell { variant: Variant::MmaH, lambda_avg: 0.0, lambda_var: 0.0, layers: 1, heads: 1, seed: 0 };
        let row = |dal| SweepRow { cell, bleu: 0.0, accuracy: 0.0, ap: 0.0, al: 0.0, dal, span: 0.0, error: None };
        let rows = vec![row(1.0), row(5.0), row(6.5)];
        let kept = filter_dal(&rows, 0.0, 5.0);
        assert_eq!(kept.iter().map(|r| r.dal).collect::<Vec<_>>(), vec![1.0, 5.0]);
    }

    #[test]
    fn failed_cell_is_marked_not_fatal() {
        let base = RunConfig { d_model: 6, n_heads: 4, ..Default::default() };
        let cell = Cell { variant: Variant::MmaH, lambda_avg: 0.0, lambda_var: 0.0, layers: 1, heads: 4, seed: 0 };
        let row = run_cell(&base, cell, 1);
        assert!(row.error.is_some());
        assert!(row.dal.is_nan());
        assert!(row.to_csv_row().starts_with("mma_h,0,0,1,4,0,NaN"));
    }
}
