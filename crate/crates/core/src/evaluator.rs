//! Micro accuracy over gold mentions and first-pass/last-pass change
//! analysis for iterative runs.
//!
//! With gold mentions given and exactly one prediction per mention, micro
//! precision, recall and F1 all equal accuracy, so only accuracy is stored.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::predictor::PredictionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChangeTable {
    pub correct: usize,
    pub incorrect_to_correct: usize,
    pub correct_to_incorrect: usize,
    pub incorrect: usize,
}

impl ChangeTable {
    pub fn total(&self) -> usize {
        self.correct + self.incorrect_to_correct + self.correct_to_incorrect + self.incorrect
    }

    pub fn first_pass_accuracy(&self) -> f64 {
        (self.correct + self.correct_to_incorrect) as f64 / self.total() as f64
    }

    pub fn last_pass_accuracy(&self) -> f64 {
        (self.correct + self.incorrect_to_correct) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mentions: usize,
    pub correct: usize,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub change: Option<ChangeTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_pass_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_pass_accuracy: Option<f64>,
}

type Key<'a> = (&'a str, usize, usize);

/// Matches predictions to gold mentions by (document, start, end) and
/// returns, per gold mention in corpus order, whether it was predicted
/// correctly.
fn correctness(predictions: &[PredictionRecord], golds: &[Document]) -> Result<Vec<bool>> {
    let mut by_key: HashMap<Key<'_>, &PredictionRecord> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_key.insert((&p.doc, p.start, p.end), p).is_some() {
            return Err(Error::Eval(format!(
                "duplicate prediction for '{}' [{}, {})",
                p.doc, p.start, p.end
            )));
        }
    }
    let mut out = Vec::new();
    for doc in golds {
        for m in &doc.mentions {
            let p = by_key.remove(&(doc.id.as_str(), m.start, m.end)).ok_or_else(|| {
                Error::Eval(format!(
                    "missing prediction for '{}' [{}, {})",
                    doc.id, m.start, m.end
                ))
            })?;
            out.push(p.pred == m.gold);
        }
    }
    if let Some(((doc, s, e), _)) = by_key.into_iter().min_by_key(|(k, _)| *k) {
        return Err(Error::Eval(format!(
            "prediction for unknown mention '{doc}' [{s}, {e})"
        )));
    }
    if out.is_empty() {
        return Err(Error::Eval("no mentions".into()));
    }
    Ok(out)
}

pub fn score(predictions: &[PredictionRecord], golds: &[Document]) -> Result<EvalReport> {
    let hits = correctness(predictions, golds)?;
    let correct = hits.iter().filter(|&&h| h).count();
    Ok(EvalReport {
        mentions: hits.len(),
        correct,
        accuracy: correct as f64 / hits.len() as f64,
        change: None,
        first_pass_accuracy: None,
        last_pass_accuracy: None,
    })
}

pub fn change_analysis(
    first_pass: &[PredictionRecord],
    final_pass: &[PredictionRecord],
    golds: &[Document],
) -> Result<ChangeTable> {
    let first = correctness(first_pass, golds)?;
    let last = correctness(final_pass, golds)?;
    let mut table = ChangeTable {
        correct: 0,
        incorrect_to_correct: 0,
        correct_to_incorrect: 0,
        incorrect: 0,
    };
    for (f, l) in first.into_iter().zip(last) {
        match (f, l) {
            (true, true) => table.correct += 1,
            (false, true) => table.incorrect_to_correct += 1,
            (true, false) => table.correct_to_incorrect += 1,
            (false, false) => table.incorrect += 1,
        }
    }
    Ok(table)
}

/// Scores `final_pass` and, when given, attaches the change table against
/// `first_pass`.
pub fn evaluate(
    final_pass: &[PredictionRecord],
    golds: &[Document],
    first_pass: Option<&[PredictionRecord]>,
) -> Result<EvalReport> {
    let mut report = score(final_pass, golds)?;
    if let Some(first) = first_pass {
        let table = change_analysis(first, final_pass, golds)?;
        report.first_pass_accuracy = Some(table.first_pass_accuracy());
        report.last_pass_accuracy = Some(table.last_pass_accuracy());
        report.change = Some(table);
    }
    Ok(report)
}

pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24}{:>12}", "#Mentions", report.mentions);
    let _ = writeln!(out, "{:<24}{:>12}", "Correct", report.correct);
    let _ = writeln!(out, "{:<24}{:>12.4}", "Accuracy (micro F1)", report.accuracy);
    if let Some(t) = &report.change {
        let _ = writeln!(out, "{:<24}{:>12}", "correct", t.correct);
        let _ = writeln!(out, "{:<24}{:>12}", "incorrect > correct", t.incorrect_to_correct);
        let _ = writeln!(out, "{:<24}{:>12}", "correct > incorrect", t.correct_to_incorrect);
        let _ = writeln!(out, "{:<24}{:>12}", "incorrect", t.incorrect);
        let _ = writeln!(out, "{:<24}{:>12.4}", "Accuracy Step 1", t.first_pass_accuracy());
        let _ = writeln!(out, "{:<24}{:>12.4}", "Accuracy Last Step", t.last_pass_accuracy());
    }
    out
}
