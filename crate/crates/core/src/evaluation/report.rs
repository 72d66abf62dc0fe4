//! Per-(phantom, tracer) metric rows and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::metrics::{cov, cr, nrmse, psnr, ssim_default};
use super::phantom::PhantomPair;
use crate::error::{Error, Result};
use crate::image::Image;

pub const CSV_HEADER: &str = "phantom_id,tracer,psnr_db,ssim,nrmse,cr,cov";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub phantom_id: String,
    pub tracer: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub nrmse: f64,
    pub cr: f64,
    pub cov: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricMeans {
    pub psnr_db: f64,
    pub ssim: f64,
    pub nrmse: f64,
    pub cr: f64,
    pub cov: f64,
}

/// Scores predictions against a phantom's ground truth.
///
/// CR compares the lesion maximum with the background mean; COV is taken over
/// the lesion.
pub fn evaluate_pair(
    phantom_id: &str,
    predicted: &[Image],
    truth: &PhantomPair,
) -> Result<Vec<MetricsRow>> {
    if predicted.len() != truth.singles.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} tracers",
            predicted.len(),
            truth.singles.len()
        )));
    }
    predicted
        .iter()
        .zip(&truth.singles)
        .enumerate()
        .map(|(k, (x, y))| {
            let lesion = truth.region(k, "lesion")?;
            let background = truth.region(k, "background")?;
            Ok(MetricsRow {
                phantom_id: phantom_id.to_string(),
                tracer: k,
                psnr_db: psnr(x, y)?,
                ssim: ssim_default(x, y)?,
                nrmse: nrmse(x, y)?,
                cr: cr(x, lesion, background)?,
                cov: cov(x, lesion)?,
            })
        })
        .collect()
}

/// CSV cell text; `inf` for infinite values.
pub fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

impl MetricsReport {
    pub fn extend(&mut self, rows: Vec<MetricsRow>) {
        self.rows.extend(rows);
    }

    /// Means over all rows, or over one tracer. Infinite PSNR stays infinite.
    pub fn means(&self, tracer: Option<usize>) -> Option<MetricMeans> {
        let rows: Vec<_> = self
            .rows
            .iter()
            .filter(|r| tracer.is_none_or(|t| r.tracer == t))
            .collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        Some(MetricMeans {
            psnr_db: mean(|r| r.psnr_db),
            ssim: mean(|r| r.ssim),
            nrmse: mean(|r| r.nrmse),
            cr: mean(|r| r.cr),
            cov: mean(|r| r.cov),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.phantom_id,
                r.tracer,
                fmt_value(r.psnr_db),
                fmt_value(r.ssim),
                fmt_value(r.nrmse),
                fmt_value(r.cr),
                fmt_value(r.cov)
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::phantom::{gen_phantom, PhantomSpec};

    #[test]
    fn perfect_prediction_row() {
        let p = gen_phantom(5, &PhantomSpec::default()).unwrap();
        let rows = evaluate_pair("p0", &p.singles, &p).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert_eq!(r.psnr_db, f64::INFINITY);
            assert!((r.ssim - 1.0).abs() < 1e-12);
            assert_eq!(r.nrmse, 0.0);
            assert!(r.cr > 1.0 && r.cov >= 0.0);
        }
        let report = MetricsReport { rows };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert!(lines.next().unwrap().starts_with("p0,0,inf,"));
        assert_eq!(report.means(Some(1)).unwrap().nrmse, 0.0);
    }
}
