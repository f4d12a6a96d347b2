//! CSV and Markdown rendering. Floats use a fixed number of decimals so
//! reruns produce identical files.

use std::path::Path;

use anyhow::{Context, Result};
use knowmem::harness::{Aggregate, FoldEvaluation, RepetitionResult};
use knowmem::MemoryReport;

pub fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

pub fn memory_header(ks: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = ["delta", "usage", "coverage", "precision", "precision_undefined"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(ks.iter().map(|k| format!("p_at_{k}")));
    h.push("mrr".into());
    h
}

pub fn memory_fields(report: Option<&MemoryReport>, delta: f64, ks: &[usize]) -> Vec<String> {
    match report {
        Some(r) => {
            let mut f = vec![
                fmt(r.delta),
                fmt(r.usage),
                fmt(r.coverage),
                fmt(r.precision),
                r.precision_undefined.to_string(),
            ];
            f.extend(ks.iter().map(|&k| r.precision_at_k(k).map(fmt).unwrap_or_default()));
            f.push(fmt(r.mrr));
            f
        }
        None => {
            let mut f = vec![fmt(delta)];
            f.resize(memory_header(ks).len(), String::new());
            f
        }
    }
}

pub fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

pub fn fold_header(ks: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = [
        "fold",
        "repetition",
        "examples",
        "positives",
        "macro_f1",
        "f1_negative",
        "f1_positive",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(memory_header(ks));
    h
}

pub fn fold_rows(eval: &FoldEvaluation, delta: f64, ks: &[usize]) -> Vec<Vec<String>> {
    eval.repetitions
        .iter()
        .enumerate()
        .map(|(r, rep): (usize, &RepetitionResult)| {
            let positives = rep.traces.iter().filter(|t| t.gold == 1).count();
            let mut row = vec![
                eval.fold.to_string(),
                r.to_string(),
                rep.traces.len().to_string(),
                positives.to_string(),
                fmt(rep.f1.macro_f1),
                fmt(rep.f1.per_class[0]),
                fmt(rep.f1.per_class[1]),
            ];
            row.extend(memory_fields(rep.memory.as_ref(), delta, ks));
            row
        })
        .collect()
}

pub fn aggregate_header(ks: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = ["folds", "macro_f1_mean", "macro_f1_std"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(memory_header(ks));
    h
}

pub fn aggregate_row(agg: &Aggregate, delta: f64, ks: &[usize]) -> Vec<String> {
    let mut row = vec![agg.folds.to_string(), fmt(agg.macro_f1_mean), fmt(agg.macro_f1_std)];
    row.extend(memory_fields(agg.memory.as_ref(), delta, ks));
    row
}

pub fn markdown_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out
}
