//! Classification macro-F1 and memory interpretability metrics over
//! attention traces.
//!
//! A slot is *selected* when its attention reaches the activation threshold
//! δ, and memory is *used* when at least one slot is selected. Ranking
//! metrics (P@K, MRR) ignore δ and rank every attended slot by descending
//! attention, ties going to the slot listed first in the trace.

use std::io::{BufRead, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One example's attention over the active memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub id: String,
    pub gold: usize,
    pub pred: usize,
    pub targets: Vec<String>,
    /// Slot id to attention, in memory order.
    pub attention: IndexMap<String, f64>,
}

impl AttentionTrace {
    /// Slot ids by descending attention.
    pub fn ranking(&self) -> Vec<&str> {
        let mut order: Vec<(usize, &str, f64)> = self
            .attention
            .iter()
            .enumerate()
            .map(|(i, (id, &a))| (i, id.as_str(), a))
            .collect();
        order.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));
        order.into_iter().map(|(_, id, _)| id).collect()
    }

    /// 1-based rank of the best-ranked target, if any target was attended.
    pub fn best_target_rank(&self) -> Option<usize> {
        self.ranking()
            .iter()
            .position(|id| self.targets.iter().any(|t| t == id))
            .map(|p| p + 1)
    }

    pub fn max_attention(&self) -> f64 {
        self.attention.values().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn uses_memory(&self, delta: f64) -> bool {
        self.attention.values().any(|&a| a >= delta)
    }

    pub fn selects_target(&self, delta: f64) -> bool {
        self.attention
            .iter()
            .any(|(id, &a)| a >= delta && self.targets.iter().any(|t| t == id))
    }
}

/// Memory metrics of a trace set at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub delta: f64,
    pub examples: usize,
    /// Examples using memory.
    pub used: usize,
    /// Examples selecting at least one target.
    pub correct: usize,
    /// U: fraction of examples using memory.
    pub usage: f64,
    /// C: fraction of examples selecting a target.
    pub coverage: f64,
    /// CP: fraction of memory-using examples selecting a target.
    pub precision: f64,
    /// Set when no example used memory and `precision` was reported as 0.
    pub precision_undefined: bool,
    /// `(K, P@K)` in the requested order.
    pub precision_at: Vec<(usize, f64)>,
    pub mrr: f64,
}

impl MemoryReport {
    pub fn precision_at_k(&self, k: usize) -> Option<f64> {
        self.precision_at.iter().find(|(kk, _)| *kk == k).map(|&(_, v)| v)
    }

    /// Elementwise mean of reports computed with the same δ and K list.
    /// Counts are summed.
    pub fn mean(reports: &[MemoryReport]) -> Result<MemoryReport> {
        let first = reports.first().ok_or_else(|| Error::data("no reports to average"))?;
        let ks: Vec<usize> = first.precision_at.iter().map(|p| p.0).collect();
        for r in reports {
            if r.delta != first.delta || r.precision_at.iter().map(|p| p.0).ne(ks.iter().copied()) {
                return Err(Error::config("averaged reports must share delta and K values"));
            }
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MemoryReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MemoryReport {
            delta: first.delta,
            examples: reports.iter().map(|r| r.examples).sum(),
            used: reports.iter().map(|r| r.used).sum(),
            correct: reports.iter().map(|r| r.correct).sum(),
            usage: avg(|r| r.usage),
            coverage: avg(|r| r.coverage),
            precision: avg(|r| r.precision),
            precision_undefined: reports.iter().any(|r| r.precision_undefined),
            precision_at: ks
                .iter()
                .enumerate()
                .map(|(i, &k)| (k, reports.iter().map(|r| r.precision_at[i].1).sum::<f64>() / n))
                .collect(),
            mrr: avg(|r| r.mrr),
        })
    }
}

/// Computes U, C, CP, P@K and MRR. Callers pass traces of positive
/// examples only. An example with no attended target has reciprocal rank 0.
pub fn compute_memory_report(traces: &[AttentionTrace], delta: f64, ks: &[usize]) -> Result<MemoryReport> {
    if traces.is_empty() {
        return Err(Error::data("memory report needs at least one trace"));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::config(format!("delta must lie in [0, 1], got {delta}")));
    }
    if ks.contains(&0) {
        return Err(Error::config("K must be at least 1"));
    }
    let n = traces.len();
    let mut used = 0;
    let mut correct = 0;
    let mut hits = vec![0usize; ks.len()];
    let mut rr_sum = 0.0;
    for t in traces {
        used += t.uses_memory(delta) as usize;
        correct += t.selects_target(delta) as usize;
        if let Some(rank) = t.best_target_rank() {
            rr_sum += 1.0 / rank as f64;
            for (h, &k) in hits.iter_mut().zip(ks) {
                *h += (rank <= k) as usize;
            }
        }
    }
    let nf = n as f64;
    let precision_undefined = used == 0;
    if precision_undefined {
        log::debug!("no trace uses memory at delta {delta}; CP reported as 0");
    }
    Ok(MemoryReport {
        delta,
        examples: n,
        used,
        correct,
        usage: used as f64 / nf,
        coverage: correct as f64 / nf,
        precision: if precision_undefined {
            0.0
        } else {
            correct as f64 / used as f64
        },
        precision_undefined,
        precision_at: ks.iter().zip(&hits).map(|(&k, &h)| (k, h as f64 / nf)).collect(),
        mrr: rr_sum / nf,
    })
}

/// One report per threshold. `deltas` must be ascending.
pub fn threshold_sweep(traces: &[AttentionTrace], deltas: &[f64], ks: &[usize]) -> Result<Vec<MemoryReport>> {
    if deltas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("sweep thresholds must be sorted ascending"));
    }
    deltas.iter().map(|&d| compute_memory_report(traces, d, ks)).collect()
}

/// Per-class and macro F1 over the classes {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub macro_f1: f64,
    pub per_class: [f64; 2],
    /// Classes with neither gold nor predicted members, scored 0.
    pub degenerate: Vec<usize>,
}

pub fn f1_report(gold: &[usize], pred: &[usize]) -> Result<F1Report> {
    if gold.len() != pred.len() {
        return Err(Error::data(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::data("F1 needs at least one example"));
    }
    if let Some(&bad) = gold.iter().chain(pred).find(|&&l| l > 1) {
        return Err(Error::data(format!("label {bad} is not binary")));
    }
    let mut per_class = [0.0; 2];
    let mut degenerate = Vec::new();
    for (c, f1) in per_class.iter_mut().enumerate() {
        let tp = gold.iter().zip(pred).filter(|&(&g, &p)| g == c && p == c).count();
        let n_gold = gold.iter().filter(|&&g| g == c).count();
        let n_pred = pred.iter().filter(|&&p| p == c).count();
        if n_gold + n_pred == 0 {
            degenerate.push(c);
            log::debug!("class {c} absent from gold and predictions; F1 set to 0");
        } else {
            *f1 = 2.0 * tp as f64 / (n_gold + n_pred) as f64;
        }
    }
    Ok(F1Report {
        macro_f1: (per_class[0] + per_class[1]) / 2.0,
        per_class,
        degenerate,
    })
}

pub fn macro_f1(gold: &[usize], pred: &[usize]) -> Result<f64> {
    f1_report(gold, pred).map(|r| r.macro_f1)
}

/// Writes one JSON object per trace.
pub fn write_traces<W: Write>(mut out: W, traces: &[AttentionTrace]) -> Result<()> {
    for t in traces {
        let line = serde_json::to_string(t).map_err(|source| Error::Json {
            context: format!("trace {}", t.id),
            source,
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io("<trace stream>", e))?;
    }
    Ok(())
}

pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<AttentionTrace>> {
    let mut traces = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<trace stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        traces.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            context: format!("trace line {}", i + 1),
            source,
        })?);
    }
    Ok(traces)
}

pub fn save_traces(path: &Path, traces: &[AttentionTrace]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_traces(&mut out, traces)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_traces(path: &Path) -> Result<Vec<AttentionTrace>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_traces(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(id: &str, attn: &[f64], targets: &[usize]) -> AttentionTrace {
        AttentionTrace {
            id: id.into(),
            gold: 1,
            pred: 1,
            targets: targets.iter().map(|t| format!("m{t}")).collect(),
            attention: attn.iter().enumerate().map(|(i, &a)| (format!("m{i}"), a)).collect(),
        }
    }

    fn two_traces() -> Vec<AttentionTrace> {
        vec![trace("a", &[0.9, 0.2], &[0]), trace("b", &[0.3, 0.4], &[0])]
    }

    #[test]
    fn two_trace_example() {
        let r = compute_memory_report(&two_traces(), 0.5, &[1, 2]).unwrap();
        assert_eq!(r.usage, 0.5);
        assert_eq!(r.coverage, 0.5);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.precision_at_k(1), Some(0.5));
        assert_eq!(r.precision_at_k(2), Some(1.0));
        assert_eq!(r.mrr, 0.75);
    }

    #[test]
    fn ranking_ignores_threshold() {
        let traces = vec![trace("a", &[0.3, 0.1], &[0]), trace("b", &[0.2, 0.4], &[1])];
        let r = compute_memory_report(&traces, 0.5, &[1]).unwrap();
        assert_eq!((r.usage, r.coverage), (0.0, 0.0));
        assert_eq!(r.precision, 0.0);
        assert!(r.precision_undefined);
        assert_eq!(r.precision_at_k(1), Some(1.0));
        assert_eq!(r.mrr, 1.0);
    }

    #[test]
    fn ties_go_to_earlier_slot() {
        let t = trace("a", &[0.5, 0.7, 0.7, 0.5], &[2]);
        assert_eq!(t.ranking(), vec!["m1", "m2", "m0", "m3"]);
        assert_eq!(t.best_target_rank(), Some(2));
    }

    #[test]
    fn missing_target_scores_zero_rank() {
        let t = trace("a", &[0.9, 0.8], &[]);
        let r = compute_memory_report(&[t], 0.5, &[1]).unwrap();
        assert_eq!(r.mrr, 0.0);
        assert_eq!(r.precision_at_k(1), Some(0.0));
    }

    #[test]
    fn empty_traces_rejected() {
        assert!(matches!(compute_memory_report(&[], 0.5, &[1]), Err(Error::Data(_))));
    }

    #[test]
    fn sweep_examples() {
        let rs = threshold_sweep(&two_traces(), &[0.25, 0.5, 0.75], &[1]).unwrap();
        let u: Vec<f64> = rs.iter().map(|r| r.usage).collect();
        assert_eq!(u, vec![1.0, 0.5, 0.5]);
        let r0 = threshold_sweep(&two_traces(), &[0.0], &[1]).unwrap();
        assert_eq!(r0[0].usage, 1.0);
        assert!(threshold_sweep(&two_traces(), &[0.5, 0.25], &[1]).is_err());
    }

    #[test]
    fn usage_times_precision_relation() {
        // U = 0.956 and CP = 0.953 give C = 0.911 after rounding.
        let c: f64 = 0.956 * 0.953;
        assert_eq!(format!("{c:.3}"), "0.911");
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap(), 1.0);
        assert_eq!(macro_f1(&[1, 0, 1, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        let r = f1_report(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        assert!((r.per_class[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[0] - 0.8).abs() < 1e-15);
        assert!((r.macro_f1 - 0.7333).abs() < 1e-4);
    }

    #[test]
    fn f1_degenerate_class_flagged() {
        let r = f1_report(&[1, 1], &[1, 1]).unwrap();
        assert_eq!(r.degenerate, vec![0]);
        assert_eq!(r.macro_f1, 0.5);
    }

    #[test]
    fn f1_length_mismatch() {
        assert!(matches!(macro_f1(&[1], &[1, 0]), Err(Error::Data(_))));
        assert!(matches!(macro_f1(&[], &[]), Err(Error::Data(_))));
    }

    #[test]
    fn mean_of_reports() {
        let a = compute_memory_report(&two_traces(), 0.5, &[1]).unwrap();
        let b = compute_memory_report(&two_traces()[..1], 0.5, &[1]).unwrap();
        let m = MemoryReport::mean(&[a, b]).unwrap();
        assert_eq!(m.usage, 0.75);
        assert_eq!(m.precision_at_k(1), Some(0.75));
        assert_eq!(m.examples, 3);
    }

    #[test]
    fn trace_file_round_trip_keeps_slot_order() {
        let mut traces = two_traces();
        traces[0].attention = [("z".to_string(), 0.1), ("a".to_string(), 0.123456789012345)]
            .into_iter()
            .collect();
        let mut buf = Vec::new();
        write_traces(&mut buf, &traces).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains(r#""attention":{"z":0.1,"a":0.123456789012345}"#));
        assert_eq!(read_traces(buf.as_slice()).unwrap(), traces);
    }

    fn arb_traces() -> impl Strategy<Value = Vec<AttentionTrace>> {
        (1usize..=6).prop_flat_map(|m| {
            proptest::collection::vec(
                (
                    proptest::collection::vec(prop_oneof![Just(0.5), 0.0f64..1.0], m),
                    proptest::collection::vec(any::<bool>(), m),
                ),
                1..=20,
            )
            .prop_map(|rows| {
                rows.into_iter()
                    .enumerate()
                    .map(|(i, (a, t))| {
                        let targets: Vec<usize> = (0..t.len()).filter(|&j| t[j]).collect();
                        trace(&i.to_string(), &a, &targets)
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn sweep_usage_non_increasing(traces in arb_traces()) {
            let rs = threshold_sweep(&traces, &[0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0], &[1]).unwrap();
            for w in rs.windows(2) {
                prop_assert!(w[1].usage <= w[0].usage);
            }
            prop_assert_eq!(rs[0].usage, 1.0);
        }

        #[test]
        fn trace_order_is_irrelevant(traces in arb_traces(), rot in 0usize..20) {
            let mut shuffled = traces.clone();
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
            let a = compute_memory_report(&traces, 0.5, &[1, 2, 3]).unwrap();
            let b = compute_memory_report(&shuffled, 0.5, &[1, 2, 3]).unwrap();
            prop_assert_eq!(a.used, b.used);
            prop_assert_eq!(a.correct, b.correct);
            prop_assert_eq!(a.precision_at, b.precision_at);
            prop_assert!((a.mrr - b.mrr).abs() < 1e-12);
        }

        #[test]
        fn precision_at_k_non_decreasing(traces in arb_traces()) {
            let r = compute_memory_report(&traces, 0.5, &[1, 2, 3, 4, 5, 6]).unwrap();
            for w in r.precision_at.windows(2) {
                prop_assert!(w[1].1 >= w[0].1);
            }
            prop_assert!(r.coverage <= r.usage);
            prop_assert!(r.mrr >= 0.0 && r.mrr <= 1.0);
        }

        #[test]
        fn macro_f1_bounded(pairs in proptest::collection::vec((0usize..2, 0usize..2), 1..40)) {
            let (g, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let f = macro_f1(&g, &p).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(macro_f1(&g, &g).unwrap() == 1.0, g.contains(&0) && g.contains(&1));
        }
    }
}
