use std::fmt::Write as _;
use std::path::Path;

use crate::evaluation::MetricsReport;
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 12] = [
    "step",
    "loss_g_dmd_src",
    "loss_g_dmd_trg",
    "loss_g_gan",
    "loss_fk_mse",
    "loss_d_gan",
    "loss_trg_mse",
    "w2_to_target",
    "w2_to_source",
    "diversity",
    "coverage",
    "memorization",
];

/// Loss values of one step; `None` where the term was not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSnapshot {
    pub g_dmd_src: Option<f64>,
    pub g_dmd_trg: Option<f64>,
    pub g_gan: Option<f64>,
    pub fk_mse: Option<f64>,
    pub d_gan: Option<f64>,
    pub trg_mse: Option<f64>,
}

impl LossSnapshot {
    pub fn as_array(&self) -> [Option<f64>; 6] {
        [
            self.g_dmd_src,
            self.g_dmd_trg,
            self.g_gan,
            self.fk_mse,
            self.d_gan,
            self.trg_mse,
        ]
    }

    pub fn from_array(v: [Option<f64>; 6]) -> Self {
        Self {
            g_dmd_src: v[0],
            g_dmd_trg: v[1],
            g_gan: v[2],
            fk_mse: v[3],
            d_gan: v[4],
            trg_mse: v[5],
        }
    }

    /// Overwrites the terms present in `newer`.
    pub fn update(&mut self, newer: &LossSnapshot) {
        let mut cur = self.as_array();
        for (c, n) in cur.iter_mut().zip(newer.as_array()) {
            if n.is_some() {
                *c = n;
            }
        }
        *self = Self::from_array(cur);
    }

    pub fn all_finite(&self) -> bool {
        self.as_array().iter().flatten().all(|v| v.is_finite())
    }
}

/// One line of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub losses: LossSnapshot,
    pub metrics: Option<MetricsReport>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricRow {
    pub fn cells(&self) -> Vec<String> {
        let mut out = vec![self.step.to_string()];
        out.extend(self.losses.as_array().into_iter().map(cell));
        let m = self.metrics;
        out.extend(
            [
                m.map(|m| m.w2_to_target),
                m.map(|m| m.w2_to_source),
                m.map(|m| m.diversity),
                m.map(|m| m.coverage),
                m.map(|m| m.memorization),
            ]
            .into_iter()
            .map(cell),
        );
        out
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = CSV_HEADER.join(",");
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.cells().join(","));
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

/// Reads a log written by [`metrics_csv`]. Sample counts and the
/// diversity flag are not stored and come back as zero / false.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::InvalidArgument(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<Option<f64>> {
            let f = rec.get(i).unwrap_or("");
            if f.is_empty() {
                return Ok(None);
            }
            f.parse::<f64>()
                .map(Some)
                .map_err(|e| Error::InvalidArgument(format!("metrics cell `{f}`: {e}")))
        };
        let step = rec
            .get(0)
            .unwrap_or("")
            .parse::<u64>()
            .map_err(|e| Error::InvalidArgument(format!("metrics step: {e}")))?;
        let losses =
            LossSnapshot::from_array([num(1)?, num(2)?, num(3)?, num(4)?, num(5)?, num(6)?]);
        let m = [num(7)?, num(8)?, num(9)?, num(10)?, num(11)?];
        let metrics = match m {
            [Some(t), Some(s), Some(d), Some(c), Some(mem)] => Some(MetricsReport {
                w2_to_target: t,
                w2_to_source: s,
                diversity: d,
                diversity_degenerate: false,
                coverage: c,
                memorization: mem,
                n_generated: 0,
                n_reference: 0,
            }),
            _ => None,
        };
        rows.push(MetricRow {
            step,
            losses,
            metrics,
        });
    }
    Ok(rows)
}
