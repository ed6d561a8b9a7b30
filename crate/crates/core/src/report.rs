//! Run summaries, per-image CSV exports and baseline comparison tables.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::dataset::Dataset;
use crate::enumerate::{SearchStats, Termination};
use crate::expr::{Expr, TerminalKind};
use crate::metrics::{evaluate_metric, MetricError, MetricKind, MetricScore};
use crate::oracle::{GuardedResult, SynthesisOutcome};
use crate::syntax::print_expr;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_expr: Option<String>,
    pub metric: MetricKind,
    pub mean: Option<f64>,
    pub per_class_means: Vec<Option<f64>>,
    pub candidates: SearchStats,
    pub termination: Termination,
    pub tier_sizes: Vec<usize>,
    /// Present for class-wise runs: one entry per branch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<BranchSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSummary {
    pub class: usize,
    pub expr: String,
    pub size: usize,
    pub mean: Option<f64>,
    pub defaulted: bool,
}

impl Summary {
    pub fn from_outcome(metric: MetricKind, o: &SynthesisOutcome) -> Self {
        Self {
            best_expr: o.best_expr.as_ref().map(print_expr),
            metric,
            mean: o.best_mean,
            per_class_means: o.per_class_means.clone(),
            candidates: o.stats.clone(),
            termination: o.termination,
            tier_sizes: o.tier_sizes.clone(),
            branches: Vec::new(),
        }
    }

    /// Summary of a class-wise run. Search statistics are summed over the
    /// branches; the termination reported is the first branch's.
    pub fn from_guarded(metric: MetricKind, g: &GuardedResult) -> Self {
        let mut stats = SearchStats::default();
        let mut termination = Termination::Exhausted;
        let mut tier_sizes = Vec::new();
        for (i, o) in g.branches.iter().filter_map(|b| b.outcome.as_ref()).enumerate() {
            stats.generated += o.stats.generated;
            stats.pruned += o.stats.pruned;
            stats.failed += o.stats.failed;
            stats.evaluated += o.stats.evaluated;
            stats.abandoned += o.stats.abandoned;
            stats.generations = stats.generations.max(o.stats.generations);
            if i == 0 {
                termination = o.termination;
                tier_sizes = o.tier_sizes.clone();
            }
        }
        Self {
            best_expr: Some(print_expr(&g.guard)),
            metric,
            mean: g.overall_mean,
            per_class_means: g.branches.iter().map(|b| b.mean).collect(),
            candidates: stats,
            termination,
            tier_sizes,
            branches: g
                .branches
                .iter()
                .map(|b| BranchSummary {
                    class: b.class,
                    expr: print_expr(&b.expr),
                    size: b.size,
                    mean: b.mean,
                    defaulted: b.defaulted,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<(), ReportError> {
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    image_id: String,
    metric: String,
    expr_text: String,
    /// Empty when the image failed.
    value: Option<f64>,
}

/// Appends one row per dataset record to `w`. Images that failed get an
/// empty value.
fn write_rows<W: Write>(w: &mut csv::Writer<W>, ds: &Dataset, expr_text: &str, score: &MetricScore) -> Result<(), ReportError> {
    let metric = score.metric.to_string();
    let mut values = score.per_image.iter().peekable();
    for rec in &ds.records {
        let value = match values.peek() {
            Some((id, v)) if *id == rec.image_id => {
                let v = *v;
                values.next();
                Some(v)
            }
            _ => None,
        };
        w.serialize(CsvRow {
            image_id: rec.image_id.clone(),
            metric: metric.clone(),
            expr_text: expr_text.to_string(),
            value,
        })?;
    }
    Ok(())
}

/// Per-image CSV with columns `image_id, metric, expr_text, value`.
pub fn per_image_csv(ds: &Dataset, expr_text: &str, score: &MetricScore) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write_rows(&mut w, ds, expr_text, score)?;
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// A CSV row read back.
#[derive(Debug, Clone, PartialEq)]
pub struct PerImageRow {
    pub image_id: String,
    pub metric: String,
    pub expr_text: String,
    pub value: Option<f64>,
}

pub fn read_per_image_csv(text: &str) -> Result<Vec<PerImageRow>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row?;
        out.push(PerImageRow {
            image_id: row.image_id,
            metric: row.metric,
            expr_text: row.expr_text,
            value: row.value,
        });
    }
    Ok(out)
}

/// The four standard CAM methods as expressions.
pub fn baselines() -> Vec<(&'static str, Expr)> {
    vec![
        ("GradCAM", Expr::terminal(TerminalKind::Grads)),
        ("GradCAM++", Expr::relu(Expr::terminal(TerminalKind::Grads))),
        ("ScoreCAM", Expr::terminal(TerminalKind::CicScores)),
        ("AblationCAM", Expr::terminal(TerminalKind::AblScores)),
    ]
}

/// Resolves a baseline method name to its expression.
pub fn baseline(name: &str) -> Option<Expr> {
    baselines()
        .into_iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, e)| e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub name: String,
    pub expr_text: String,
    /// One mean per metric column; `None` where every image failed.
    pub means: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub metrics: Vec<MetricKind>,
    pub rows: Vec<CompareRow>,
    /// Long-form per-image rows behind every cell.
    pub per_image_csv: String,
}

impl CompareReport {
    /// Evaluates every `(name, expr)` under every metric.
    pub fn build(
        methods: &[(String, Expr)],
        metrics: &[MetricKind],
        ds: &Dataset,
        backend: Option<&dyn Backend>,
        workers: usize,
    ) -> Result<Self, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut rows = Vec::with_capacity(methods.len());
        for (name, e) in methods {
            let text = print_expr(e);
            let mut means = Vec::with_capacity(metrics.len());
            for &m in metrics {
                let s = evaluate_metric(m, e, ds, backend, workers)?;
                write_rows(&mut w, ds, &text, &s)?;
                means.push(s.value.is_finite().then_some(s.value));
            }
            rows.push(CompareRow {
                name: name.clone(),
                expr_text: text,
                means,
            });
        }
        let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
        Ok(Self {
            metrics: metrics.to_vec(),
            rows,
            per_image_csv: String::from_utf8(bytes).expect("csv output is UTF-8"),
        })
    }

    /// One row per method, one column per metric mean.
    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string(), "expr_text".to_string()];
        header.extend(self.metrics.iter().map(|m| m.to_string()));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.name.clone(), r.expr_text.clone()];
            rec.extend(r.means.iter().map(|m| m.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Aligned plain-text table for the terminal.
    pub fn to_table(&self) -> String {
        let mut cols: Vec<Vec<String>> = Vec::new();
        let mut head = vec!["method".to_string()];
        head.extend(self.metrics.iter().map(|m| m.to_string()));
        cols.push(head);
        for r in &self.rows {
            let mut line = vec![r.name.clone()];
            line.extend(r.means.iter().map(|m| m.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())));
            cols.push(line);
        }
        let widths: Vec<usize> = (0..cols[0].len())
            .map(|j| cols.iter().map(|c| c[j].len()).max().unwrap_or(0))
            .collect();
        cols.iter()
            .map(|line| {
                line.iter()
                    .zip(&widths)
                    .map(|(cell, w)| format!("{cell:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
                    + "\n"
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_support::record;
    use crate::syntax::parse_expr;

    fn ds() -> Dataset {
        let mut a = record("a", 2, 2, 2, [0.6, 0.4]);
        a.gt_mask = Some(crate::tensor::Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let mut b = record("b", 2, 2, 2, [0.3, 0.7]);
        b.gt_mask = Some(crate::tensor::Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap());
        Dataset::from_records(vec!["x".into(), "y".into()], vec![a, b], None).unwrap()
    }

    #[test]
    fn baseline_aliases() {
        assert_eq!(baseline("gradcam++"), Some(parse_expr("ReLU(Grads)").unwrap()));
        assert_eq!(baseline("ScoreCAM"), Some(Expr::terminal(TerminalKind::CicScores)));
        assert_eq!(baseline("nope"), None);
        assert_eq!(baselines().len(), 4);
    }

    #[test]
    fn csv_has_one_row_per_image_and_reproduces_the_mean() {
        let d = ds();
        let e = parse_expr("2*Grads + AblScores").unwrap();
        let s = evaluate_metric(MetricKind::MGt, &e, &d, None, 1).unwrap();
        let text = per_image_csv(&d, "2*Grads + AblScores", &s).unwrap();
        assert!(text.starts_with("image_id,metric,expr_text,value\n"));
        let rows = read_per_image_csv(&text).unwrap();
        assert_eq!(rows.len(), d.len());
        assert!(rows.iter().all(|r| r.expr_text == "2*Grads + AblScores" && r.metric == "mgt"));
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.value).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        assert_eq!(m, s.value);
    }

    #[test]
    fn compare_has_four_baseline_rows() {
        let d = ds();
        let methods: Vec<(String, Expr)> = baselines().into_iter().map(|(n, e)| (n.to_string(), e)).collect();
        let r = CompareReport::build(&methods, &[MetricKind::MGt, MetricKind::Sch], &d, None, 1).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.rows[0].means.len(), 2);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("method,expr_text,mgt,sch\n"));
        // every cell comes back out of the long-form rows
        let long = read_per_image_csv(&r.per_image_csv).unwrap();
        assert_eq!(long.len(), 4 * 2 * d.len());
        for row in &r.rows {
            for (m, cell) in r.metrics.iter().zip(&row.means) {
                let vals: Vec<f64> = long
                    .iter()
                    .filter(|l| l.expr_text == row.expr_text && l.metric == m.to_string())
                    .filter_map(|l| l.value)
                    .collect();
                assert_eq!(*cell, Some(vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        assert_eq!(r.to_table().lines().count(), 5);
    }
}
