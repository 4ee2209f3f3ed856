//! Fine-tuning variant grid: each combination is scored per item as the
//! percentage change in QWK over the base plan.

use std::fmt::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::schedule::{LrSchedule, TrainPlan, DISCRIMINATIVE_XI, VARIANT_DROPOUT, VARIANT_LAYERS};

/// 1 gradual unfreezing, 2 discriminative rates, 3 dropout 0.2,
/// 4 stop-word removal, 5 first three layers only.
pub const GRID_VARIANTS: [&str; 10] = ["1", "2", "1+2", "3", "1+3", "2+3", "1+2+3", "4", "5", "4+5"];

pub fn apply_variant(base: &TrainPlan, combo: &str, n_layers: usize) -> Result<TrainPlan> {
    let mut plan = base.clone();
    for part in combo.split('+') {
        match part.trim() {
            "1" => plan.gradual_unfreeze = true,
            "2" => plan.lr_schedule = LrSchedule::Discriminative { xi: DISCRIMINATIVE_XI },
            "3" => plan.dropout = Some(VARIANT_DROPOUT),
            "4" => plan.remove_stopwords = true,
            "5" => plan.layer_limit = Some(VARIANT_LAYERS.min(n_layers)),
            other => return Err(Error::Config(format!("unknown variant `{other}` in `{combo}`"))),
        }
    }
    Ok(plan)
}

/// `100 · (variant − base) / |base|`.
pub fn delta_percent(base: f64, variant: f64) -> Result<f64> {
    if base == 0.0 || !base.is_finite() {
        return Err(Error::UndefinedKappa(format!("base QWK {base} admits no relative change")));
    }
    Ok(100.0 * (variant - base) / base.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridTable {
    pub items: Vec<i64>,
    pub base: Vec<f64>,
    /// `(variant, qwk per item)`.
    pub rows: Vec<(String, Vec<f64>)>,
}

impl GridTable {
    pub fn deltas(&self, row: usize) -> Result<Vec<f64>> {
        self.base.iter().zip(&self.rows[row].1).map(|(&b, &v)| delta_percent(b, v)).collect()
    }

    /// Base row of absolute QWKs, then one row of percentage deltas per
    /// variant. Undefined deltas print as `NA`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant");
        for i in &self.items {
            write!(out, "\t{i}").unwrap();
        }
        out.push_str("\tmean\n");
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        out.push_str("base");
        for b in &self.base {
            write!(out, "\t{b:.4}").unwrap();
        }
        writeln!(out, "\t{:.4}", mean(&self.base)).unwrap();
        for (r, (name, _)) in self.rows.iter().enumerate() {
            out.push_str(name);
            let cells: Vec<Option<f64>> =
                self.base.iter().zip(&self.rows[r].1).map(|(&b, &v)| delta_percent(b, v).ok()).collect();
            for c in &cells {
                match c {
                    Some(d) => write!(out, "\t{d:+.2}").unwrap(),
                    None => out.push_str("\tNA"),
                }
            }
            let defined: Vec<f64> = cells.iter().flatten().copied().collect();
            if defined.is_empty() {
                out.push_str("\tNA\n");
            } else {
                writeln!(out, "\t{:+.2}", mean(&defined)).unwrap();
            }
        }
        out
    }
}

/// Runs the base plan and every variant on every item. `run` returns the QWK
/// for one item under one plan.
pub fn experiment_grid<F>(
    items: &[i64],
    variants: &[&str],
    base: &TrainPlan,
    n_layers: usize,
    run: F,
) -> Result<GridTable>
where
    F: Fn(i64, &TrainPlan) -> Result<f64> + Sync,
{
    if items.is_empty() {
        return Err(Error::Empty("grid needs at least one item".into()));
    }
    let plans = variants.iter().map(|v| apply_variant(base, v, n_layers)).collect::<Result<Vec<_>>>()?;
    let all: Vec<&TrainPlan> = std::iter::once(base).chain(plans.iter()).collect();
    let cells = all
        .par_iter()
        .flat_map_iter(|p| items.iter().map(move |&i| (i, *p)))
        .map(|(i, p)| run(i, p))
        .collect::<Result<Vec<f64>>>()?;
    let mut rows = cells.chunks(items.len()).map(<[f64]>::to_vec);
    let base_row = rows.next().expect("base row");
    Ok(GridTable {
        items: items.to_vec(),
        base: base_row,
        rows: variants.iter().map(|v| v.to_string()).zip(rows).collect(),
    })
}
