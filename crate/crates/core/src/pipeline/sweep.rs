use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SiaConfig;
use crate::metrics::MetricsReport;
use crate::model::SeqModel;
use crate::pipeline::pas::{prepare_data, run_stages, to_json, write, Arm, PipelineConfig, PreparedData};
use crate::pipeline::train::{LossKind, RunRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Alpha,
    Beta,
    Joint,
}

/// Grid points `(alpha, beta)`. Alpha and beta sweeps hold the other
/// exponent at its value in `base`; a joint sweep takes every pair.
pub fn sweep_points(param: SweepParam, alphas: &[f64], betas: &[f64], base: &SiaConfig) -> Result<Vec<(f64, f64)>> {
    let points: Vec<(f64, f64)> = match param {
        SweepParam::Alpha => alphas.iter().map(|&a| (a, base.beta)).collect(),
        SweepParam::Beta => betas.iter().map(|&b| (base.alpha, b)).collect(),
        SweepParam::Joint => alphas
            .iter()
            .flat_map(|&a| betas.iter().map(move |&b| (a, b)))
            .collect(),
    };
    if points.is_empty() {
        return Err(Error::Validation("sweep grid is empty".into()));
    }
    for &(alpha, beta) in &points {
        SiaConfig {
            alpha,
            beta,
            ..base.clone()
        }
        .validate()?;
    }
    Ok(points)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub metrics: MetricsReport,
    /// The six metrics in CSV column order, min-max scaled over the grid.
    pub normalized: [f64; 6],
    pub record: RunRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

fn columns(m: &MetricsReport) -> [f64; 6] {
    [m.perplexity, m.bleu4, m.rouge_l, m.token_rep4, m.sent_rep4, m.unique4 as f64]
}

impl SweepTable {
    fn new(param: SweepParam, runs: Vec<((f64, f64), RunRecord)>) -> Self {
        let raw: Vec<[f64; 6]> = runs
            .iter()
            .map(|(_, r)| columns(r.metrics.as_ref().expect("evaluated")))
            .collect();
        let mut lo = [f64::INFINITY; 6];
        let mut hi = [f64::NEG_INFINITY; 6];
        for row in &raw {
            for k in 0..6 {
                lo[k] = lo[k].min(row[k]);
                hi[k] = hi[k].max(row[k]);
            }
        }
        let rows = runs
            .into_iter()
            .zip(raw)
            .map(|(((alpha, beta), record), r)| {
                let normalized = std::array::from_fn(|k| {
                    if hi[k] > lo[k] {
                        (r[k] - lo[k]) / (hi[k] - lo[k])
                    } else {
                        0.0
                    }
                });
                SweepRow {
                    alpha,
                    beta,
                    metrics: record.metrics.clone().expect("evaluated"),
                    normalized,
                    record,
                }
            })
            .collect();
        SweepTable { param, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "alpha,beta,perplexity,bleu4,rouge_l,token_rep4,sent_rep4,unique4,\
             norm_perplexity,norm_bleu4,norm_rouge_l,norm_token_rep4,norm_sent_rep4,norm_unique4\n",
        );
        for r in &self.rows {
            let norm: Vec<String> = r.normalized.iter().map(f64::to_string).collect();
            s.push_str(&format!("{},{},{},{}\n", r.alpha, r.beta, r.metrics.csv_row(), norm.join(",")));
        }
        s
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }
}

/// Fine-tunes one copy of `start` per grid point with identical seeds.
///
/// Up to `cfg.threads` points train at once; results do not depend on the
/// thread count.
pub fn sweep_from(
    cfg: &PipelineConfig,
    data: &PreparedData,
    start: &SeqModel,
    param: SweepParam,
    points: &[(f64, f64)],
) -> Result<SweepTable> {
    let run = |&(alpha, beta): &(f64, f64)| {
        let arm = Arm {
            loss: LossKind::Sia,
            sia: SiaConfig {
                alpha,
                beta,
                ..cfg.sia.clone()
            },
        };
        arm.run(cfg, data, start, None).map(|(_, rec)| ((alpha, beta), rec))
    };
    let mut runs = Vec::with_capacity(points.len());
    for chunk in points.chunks(cfg.threads) {
        let results: Vec<Result<_>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|p| s.spawn(move || run(p))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        });
        for r in results {
            runs.push(r?);
        }
    }
    Ok(SweepTable::new(param, runs))
}

/// Pre-trains and adapts once, then fine-tunes at every grid point.
/// With `out` set, writes `sweep.csv`, `sweep.json` and `config.json`.
pub fn sweep(cfg: &PipelineConfig, param: SweepParam, points: &[(f64, f64)], out: Option<&Path>) -> Result<SweepTable> {
    if points.is_empty() {
        return Err(Error::Validation("sweep grid is empty".into()));
    }
    let data = prepare_data(cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        write(dir, "config.json", &to_json(cfg))?;
    }
    let stages = run_stages(cfg, &data, out)?;
    let table = sweep_from(cfg, &data, stages.start(), param, points)?;
    if let Some(dir) = out {
        write(dir, "sweep.csv", &table.to_csv())?;
        write(dir, "sweep.json", &table.to_json())?;
    }
    Ok(table)
}
