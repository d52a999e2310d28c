//! Span-level precision, recall and micro-averaged F1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{to_spans, SchemeKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Counts {
    /// Percentage precision; 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: Counts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.correct += other.correct;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        100.0 * a as f64 / b as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub per_type: BTreeMap<String, Counts>,
    pub overall: Counts,
}

impl EvalCounts {
    pub fn f1(&self) -> f64 {
        self.overall.f1()
    }

    pub fn merge(&mut self, other: &EvalCounts) {
        for (ty, c) in &other.per_type {
            self.per_type.entry(ty.clone()).or_default().add(*c);
        }
        self.overall.add(other.overall);
    }

    /// Per-type and overall P/R/F1 table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}\n", "type", "P", "R", "F1", "gold", "pred", "ok");
        let rows = self.per_type.iter().map(|(t, c)| (t.as_str(), c)).chain([("overall", &self.overall)]);
        for (name, c) in rows {
            let _ = writeln!(
                out,
                "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>6} {:>6} {:>6}",
                name,
                c.precision(),
                c.recall(),
                c.f1(),
                c.gold,
                c.predicted,
                c.correct
            );
        }
        out
    }
}

/// Scores predicted tag sequences against gold ones, both in `kind`.
/// A span counts as correct only if start, end and type all match.
pub fn score<G: AsRef<str>, P: AsRef<str>>(gold: &[Vec<G>], predicted: &[Vec<P>], kind: SchemeKind) -> Result<EvalCounts> {
    if gold.len() != predicted.len() {
        return Err(Error::Data(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    let mut counts = EvalCounts::default();
    for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Data(format!(
                "sentence {i}: {} gold tags but {} predicted",
                g.len(),
                p.len()
            )));
        }
        let gs = to_spans(g, kind)?;
        let ps = to_spans(p, kind)?;
        for s in &gs {
            counts.per_type.entry(s.ty.clone()).or_default().gold += 1;
        }
        for s in &ps {
            let c = counts.per_type.entry(s.ty.clone()).or_default();
            c.predicted += 1;
            if gs.contains(s) {
                c.correct += 1;
            }
        }
    }
    for c in counts.per_type.values() {
        counts.overall.add(*c);
    }
    Ok(counts)
}

/// One line of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Aligned `F1 ± std` table; with a baseline row present, each other row
/// gets its difference in means.
pub fn report(rows: &[ReportRow], baseline: Option<&str>) -> String {
    let base = baseline.and_then(|b| rows.iter().find(|r| r.name == b)).map(|r| r.mean);
    let show_delta = base.is_some() && rows.len() > 1;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  {:>15}  {:>4}", "config", "F1 ± std", "runs");
    if show_delta {
        out.push_str(&format!("  {:>6}", "Δ"));
    }
    out.push('\n');
    for r in rows {
        let cell = format!("{:.2} ± {:.2}", r.mean, r.std);
        let _ = write!(out, "{:<width$}  {:>15}  {:>4}", r.name, cell, r.runs);
        if show_delta {
            match base {
                Some(b) if Some(r.name.as_str()) != baseline => {
                    let _ = write!(out, "  {:>+6.2}", r.mean - b);
                }
                _ => out.push_str(&format!("  {:>6}", "")),
            }
        }
        out = out.trim_end().to_string();
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_predictions() {
        let gold = vec![v(&["S-PER", "O", "B-LOC", "E-LOC"])];
        let c = score(&gold, &gold, SchemeKind::Bioes).unwrap();
        assert_eq!((c.overall.precision(), c.overall.recall(), c.f1()), (100.0, 100.0, 100.0));
    }

    #[test]
    fn one_hit_one_spurious() {
        let gold = vec![v(&["S-PER", "O", "B-LOC", "E-LOC"])];
        let pred = vec![v(&["S-PER", "S-ORG", "O", "S-LOC"])];
        let c = score(&gold, &pred, SchemeKind::Bioes).unwrap();
        // 2 gold spans, 3 predicted, 1 correct
        assert_eq!(c.overall, Counts { gold: 2, predicted: 3, correct: 1 });
        let gold = vec![v(&["S-PER", "O", "S-LOC"])];
        let pred = vec![v(&["S-PER", "S-ORG", "O"])];
        let c = score(&gold, &pred, SchemeKind::Bioes).unwrap();
        assert_eq!((c.overall.precision(), c.overall.recall(), c.f1()), (50.0, 50.0, 50.0));
    }

    #[test]
    fn no_predictions_score_zero() {
        let gold = vec![v(&["S-PER", "O"])];
        let pred = vec![v(&["O", "O"])];
        let c = score(&gold, &pred, SchemeKind::Bioes).unwrap();
        assert_eq!((c.overall.precision(), c.overall.recall(), c.f1()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn length_mismatch_names_sentence() {
        let gold = vec![v(&["O"]), v(&["O", "O"])];
        let pred = vec![v(&["O"]), v(&["O"])];
        let err = score(&gold, &pred, SchemeKind::Bioes).unwrap_err().to_string();
        assert!(err.contains("sentence 1"), "{err}");
    }

    #[test]
    fn micro_average_pools_counts() {
        let gold = vec![v(&["S-PER", "S-PER", "S-PER", "S-LOC"])];
        let pred = vec![v(&["S-PER", "S-PER", "S-PER", "O"])];
        let c = score(&gold, &pred, SchemeKind::Bioes).unwrap();
        let pooled = Counts { gold: 4, predicted: 3, correct: 3 };
        assert_eq!(c.overall, pooled);
        let macro_f1 = (c.per_type["PER"].f1() + c.per_type["LOC"].f1()) / 2.0;
        assert!((c.f1() - pooled.f1()).abs() < 1e-12);
        assert!((c.f1() - macro_f1).abs() > 1.0);
    }

    #[test]
    fn sentence_order_does_not_matter() {
        let gold = vec![v(&["S-PER", "O"]), v(&["B-LOC", "E-LOC"]), v(&["O", "S-ORG"])];
        let pred = vec![v(&["S-PER", "O"]), v(&["S-LOC", "O"]), v(&["O", "S-ORG"])];
        let a = score(&gold, &pred, SchemeKind::Bioes).unwrap();
        let (mut g2, mut p2) = (gold.clone(), pred.clone());
        g2.reverse();
        p2.reverse();
        assert_eq!(score(&g2, &p2, SchemeKind::Bioes).unwrap(), a);
    }

    #[test]
    fn report_layout() {
        assert_eq!(report(&[], None).lines().count(), 1);
        let one = report(&[ReportRow { name: "a".into(), mean: 90.0, std: 0.1, runs: 5 }], Some("a"));
        assert!(!one.contains('Δ'));
        let rows = [
            ReportRow { name: "no LM".into(), mean: 90.87, std: 0.13, runs: 10 },
            ReportRow { name: "TagLM".into(), mean: 91.93, std: 0.19, runs: 10 },
        ];
        let t = report(&rows, Some("no LM"));
        assert!(t.contains("+1.06"), "{t}");
        assert!(t.contains("91.93 ± 0.19"));
        assert_eq!(t.lines().count(), 3);
    }
}
