//! Benchmark tables: per erasure operation and op-averaged, as tab-separated
//! text and as aligned plain text.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::Method;
use crate::faitheval::{AggregateResult, Metric, MetricMeans};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub architecture: String,
    pub aggregate: AggregateResult,
}

/// Which column of a table a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Column {
    Op(crate::faitheval::ErasureOp),
    Average,
}

impl Column {
    fn label(self) -> &'static str {
        match self {
            Column::Op(op) => op.label(),
            Column::Average => "Average",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Column::Op(op) => op.as_str(),
            Column::Average => "average",
        }
    }
}

fn columns() -> Vec<Column> {
    let mut c: Vec<Column> = crate::faitheval::ErasureOp::ALL.into_iter().map(Column::Op).collect();
    c.push(Column::Average);
    c
}

fn means(a: &AggregateResult, col: Column) -> MetricMeans {
    match col {
        Column::Op(op) => a.per_op.get(&op).copied().unwrap_or_default(),
        Column::Average => a.averaged,
    }
}

/// Percentage with one decimal.
pub fn percent(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Methods holding the best value of `metric` in one table. Baselines
/// compete only when no explanation method is present.
fn best(rows: &[&AggregateResult], col: Column, metric: Metric) -> Vec<Method> {
    let explainers: Vec<&&AggregateResult> =
        rows.iter().filter(|a| !matches!(a.method, Method::Random | Method::Oracle)).collect();
    let pool: Vec<&&AggregateResult> = if explainers.is_empty() { rows.iter().collect() } else { explainers };
    let value = |a: &AggregateResult| {
        let v = (100.0 * means(a, col).get(metric) * 10.0).round();
        if metric.higher_is_better() {
            v
        } else {
            -v
        }
    };
    let top = pool.iter().map(|a| value(a)).fold(f64::NEG_INFINITY, f64::max);
    pool.iter().filter(|a| value(a) == top).map(|a| a.method).collect()
}

type Groups<'a> = BTreeMap<(String, String), Vec<&'a AggregateResult>>;

fn group(entries: &[ReportEntry]) -> Groups<'_> {
    let mut g: Groups = BTreeMap::new();
    for e in entries {
        g.entry((e.architecture.clone(), e.aggregate.split.clone())).or_default().push(&e.aggregate);
    }
    g
}

fn arrow(metric: Metric) -> &'static str {
    if metric.higher_is_better() {
        "↑"
    } else {
        "↓"
    }
}

/// Tab-separated rows: one per architecture, split, column and method.
/// `best` lists the metrics on which the row is best in its table.
pub fn to_tsv(entries: &[ReportEntry]) -> String {
    let mut out = String::from("architecture\tsplit\top\tmethod\tsteps");
    for m in Metric::ALL {
        out.push_str(&format!("\t{}{}", m.label(), arrow(m)));
    }
    out.push_str("\tbest\n");
    for ((arch, split), rows) in group(entries) {
        for col in columns() {
            let bests: Vec<(Metric, Vec<Method>)> = Metric::ALL.into_iter().map(|m| (m, best(&rows, col, m))).collect();
            for a in &rows {
                let vals = means(a, col);
                out.push_str(&format!("{arch}\t{split}\t{}\t{}\t{}", col.key(), a.method.label(), a.steps));
                for m in Metric::ALL {
                    out.push_str(&format!("\t{}", percent(vals.get(m))));
                }
                let flags: Vec<&str> =
                    bests.iter().filter(|(_, ms)| ms.contains(&a.method)).map(|(m, _)| m.label()).collect();
                out.push_str(&format!("\t{}\n", if flags.is_empty() { "-".to_string() } else { flags.join(",") }));
            }
        }
    }
    out
}

/// Aligned tables; the best value per column is marked with `*`.
pub fn to_text(entries: &[ReportEntry]) -> String {
    let mut out = String::new();
    for ((arch, split), rows) in group(entries) {
        let steps = rows.iter().map(|a| a.steps).max().unwrap_or(0);
        out.push_str(&format!("== {arch} agent, split {split} ({steps} steps per operation) ==\n"));
        for col in columns() {
            out.push_str(&format!("\n{}\n", col.label()));
            out.push_str(&format!("{:<10}", "Method"));
            for m in Metric::ALL {
                out.push_str(&format!("{:>11}", format!("{}{}", m.label(), arrow(m))));
            }
            out.push('\n');
            let bests: Vec<Vec<Method>> = Metric::ALL.into_iter().map(|m| best(&rows, col, m)).collect();
            for a in &rows {
                out.push_str(&format!("{:<10}", a.method.label()));
                let vals = means(a, col);
                for (i, m) in Metric::ALL.into_iter().enumerate() {
                    let mark = if bests[i].contains(&a.method) { "*" } else { " " };
                    out.push_str(&format!("{:>10}{mark}", percent(vals.get(m))));
                }
                out.push('\n');
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faitheval::ErasureOp;

    fn agg(method: Method, so: MetricMeans, tr: MetricMeans) -> ReportEntry {
        let mut per_op = BTreeMap::new();
        per_op.insert(ErasureOp::SliceOut, so);
        per_op.insert(ErasureOp::TokenReplace, tr);
        ReportEntry {
            architecture: "transformer".into(),
            aggregate: AggregateResult {
                method,
                split: "val_seen".into(),
                per_op,
                averaged: MetricMeans::average(&[so, tr]),
                episode_mean: MetricMeans::default(),
                steps: 3,
            },
        }
    }

    fn m(a: f64, b: f64, c: f64, d: f64) -> MetricMeans {
        MetricMeans { df_wo_r: a, comp: b, df_w_r: c, suff: d }
    }

    #[test]
    fn single_method_is_best_everywhere() {
        let e = vec![agg(Method::VaAtt, m(0.5, 0.25, 0.125, 0.0625), m(0.5, 0.25, 0.125, 0.0625))];
        let tsv = to_tsv(&e);
        let rows: Vec<&str> = tsv.lines().skip(1).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].starts_with("transformer\tval_seen\tslice_out\tVaAtt\t3\t50.0\t25.0\t12.5\t6.2"));
        assert!(rows.iter().all(|r| r.ends_with("DFw/oR,COMP,DFw/R,SUFF")));
    }

    #[test]
    fn averages_and_flags() {
        let e = vec![
            agg(Method::VaAtt, m(0.2, 0.1, 0.4, 0.3), m(0.4, 0.3, 0.2, 0.1)),
            agg(Method::IngGrad, m(0.6, 0.5, 0.1, 0.0), m(0.2, 0.1, 0.3, 0.2)),
            agg(Method::Random, m(0.9, 0.9, 0.0, 0.0), m(0.9, 0.9, 0.0, 0.0)),
        ];
        let tsv = to_tsv(&e);
        let avg_ig = tsv.lines().find(|l| l.contains("\taverage\tIngGrad")).unwrap();
        assert!(avg_ig.contains("\t40.0\t30.0\t20.0\t10.0\t"), "{avg_ig}");
        let avg_random = tsv.lines().find(|l| l.contains("\taverage\tRandom")).unwrap();
        assert!(avg_random.ends_with("\t-"));
        let text = to_text(&e);
        assert!(text.contains("Slice Out") && text.contains("Token Replacement") && text.contains("Average"));
        assert!(text.contains("DFw/oR↑") && text.contains("SUFF↓"));
    }
}
