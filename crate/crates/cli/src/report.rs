//! Text tables and CSV files for command output.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use trace_core::eval::RecallRow;
use trace_core::experiment::AblationCell;
use trace_core::gradsuite::SuiteReport;

fn fmt_recall(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |r| format!("{r:.2}"))
}

pub fn recall_table(rows: &[RecallRow]) -> String {
    let ks: Vec<usize> = rows.first().map(|r| r.recalls.iter().map(|(k, _)| *k).collect()).unwrap_or_default();
    let mut out = format!("{:<8} {:<9} {:>7} {:>7}", "subset", "split", "queries", "gallery");
    for k in &ks {
        let _ = write!(out, " {:>7}", format!("R@{k}"));
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<8} {:<9} {:>7} {:>7}", r.subset, r.split.as_str(), r.queries, r.gallery);
        for k in &ks {
            let _ = write!(out, " {:>7}", fmt_recall(r.recall(*k)));
        }
        out.push('\n');
    }
    out
}

pub fn write_recall_csv(path: &Path, rows: &[RecallRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let ks: Vec<usize> = rows.first().map(|r| r.recalls.iter().map(|(k, _)| *k).collect()).unwrap_or_default();
    let mut header = vec!["subset".to_string(), "split".into(), "queries".into(), "gallery".into()];
    header.extend(ks.iter().map(|k| format!("R@{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.subset.clone(), r.split.as_str().into(), r.queries.to_string(), r.gallery.to_string()];
        rec.extend(ks.iter().map(|k| r.recall(*k).map_or(String::new(), |v| v.to_string())));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn ablation_table(cells: &[AblationCell], ks: &[usize]) -> String {
    let width = cells.iter().map(|c| c.label().len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:>4}  {:<width$}", "rank", "cell");
    for k in ks {
        let _ = write!(out, " {:>7}", format!("R@{k}"));
    }
    out.push_str("  R@10 per seed\n");
    for (rank, c) in cells.iter().enumerate() {
        let _ = write!(out, "{:>4}  {:<width$}", rank + 1, c.label());
        for k in ks {
            let _ = write!(out, " {:>7}", fmt_recall(c.result.mean_recall(*k)));
        }
        let per: Vec<String> = c.result.runs.iter().map(|r| fmt_recall(r.row.recall(10))).collect();
        let _ = writeln!(out, "  {}", per.join(" "));
    }
    out
}

pub fn write_ablation_csv(path: &Path, cells: &[AblationCell], ks: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let keys: Vec<String> = cells.first().map(|c| c.settings.iter().map(|(k, _)| k.clone()).collect()).unwrap_or_default();
    let mut header = vec!["rank".to_string(), "cell".into()];
    header.extend(keys.iter().cloned());
    header.push("seeds".into());
    header.extend(ks.iter().map(|k| format!("R@{k}")));
    w.write_record(&header)?;
    for (rank, c) in cells.iter().enumerate() {
        let mut rec = vec![(rank + 1).to_string(), c.index.to_string()];
        rec.extend(c.settings.iter().map(|(_, v)| match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }));
        rec.push(c.result.runs.len().to_string());
        rec.extend(ks.iter().map(|k| c.result.mean_recall(*k).map_or(String::new(), |v| v.to_string())));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn gradient_table(suite: &SuiteReport, tolerance: f64) -> String {
    let mut out = format!("{:<9} {:>5} {:>7} {:>12}  worst case\n", "module", "cases", "entries", "max rel err");
    for m in suite.modules() {
        let flag = if m.max_rel_err <= tolerance { "" } else { "  FAIL" };
        let _ = writeln!(
            out,
            "{:<9} {:>5} {:>7} {:>12.3e}  {}{flag}",
            m.module, m.cases, m.checked, m.max_rel_err, m.worst_case
        );
    }
    let verdict = if suite.passes(tolerance) { "PASS" } else { "FAIL" };
    let _ = writeln!(
        out,
        "{verdict}: max rel err {:.3e} (tolerance {tolerance:.0e}) over {} cases in {:.1?}",
        suite.max_rel_err(),
        suite.cases.len(),
        suite.elapsed
    );
    out
}
