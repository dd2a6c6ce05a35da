//! Invariant checks for iterative prediction, shared by the property tests
//! and the acceptance suite.

#![allow(dead_code)]

use verbalized::predictor::{insertion_text, Predictor};
use verbalized::{Chunk, LabelSet};

/// The text expected after every mention of `chunk` received its
/// prediction's insertion, built from the original text alone.
fn expected_final_text(chunk: &Chunk, labels: &LabelSet, predicted: &[String]) -> String {
    let chars: Vec<char> = chunk.text.chars().collect();
    let mut out = String::new();
    let mut pos = 0;
    for (m, id) in chunk.mentions.iter().zip(predicted) {
        out.extend(&chars[pos..m.end]);
        out.push_str(" (");
        out.push_str(insertion_text(labels.get(id).expect("predicted id is a label")));
        out.push(')');
        pos = m.end;
    }
    out.extend(&chars[pos..]);
    out
}

/// Checks termination, score monotonicity, text integrity and, for
/// single-mention chunks, equality with one-shot prediction.
pub fn check_iterative(predictor: &Predictor<'_>, chunk: &Chunk, labels: &LabelSet) -> Result<(), String> {
    let n = chunk.mentions.len();
    let out = predictor.predict_iterative(chunk, None).map_err(|e| e.to_string())?;
    if n > 0 && !(1..=n).contains(&out.iterations) {
        return Err(format!("{} iterations for {n} mentions", out.iterations));
    }
    if out.score_history.len() != out.iterations {
        return Err("score history length differs from iteration count".into());
    }
    for w in out.score_history.windows(2) {
        if w[0].iter().zip(&w[1]).any(|(a, b)| b < a) {
            return Err(format!("stored score decreased: {:?} -> {:?}", w[0], w[1]));
        }
    }
    if out.predictions.len() != n || !out.state.all_resolved() {
        return Err("not every mention was resolved".into());
    }
    // resolved count grows by at least one per round
    let per_round = n.div_ceil(3).max(1);
    if n > 0 && out.iterations != n.div_ceil(per_round) {
        return Err(format!("expected {} rounds, got {}", n.div_ceil(per_round), out.iterations));
    }
    if out.state.original_text() != chunk.text {
        return Err("stripping insertions does not restore the text".into());
    }
    let working = out.state.working_text();
    let stripped_len = working.chars().count() - out.state.insertions.iter().map(|i| i.len).sum::<usize>();
    if stripped_len != chunk.text.chars().count() {
        return Err("insertion lengths do not account for the working text".into());
    }
    // a mention's insertion names its prediction at the time it was
    // resolved; re-scoring can replace the stored one later, but only with a
    // strictly higher score, so unchanged predictions pin the inserted ids
    if !predictor.rescore_resolved || out.first_pass == out.predictions {
        let ids: Vec<String> = out.predictions.iter().map(|p| p.id.clone()).collect();
        if working != expected_final_text(chunk, labels, &ids) {
            return Err("working text differs from the reconstructed insertion text".into());
        }
    }
    for (i, m) in chunk.mentions.iter().enumerate() {
        if out.state.surface(i) != m.surface {
            return Err(format!("mention {i} offset no longer covers its surface"));
        }
    }
    if n == 1 {
        let once = predictor.predict_document(chunk, None).map_err(|e| e.to_string())?;
        if out.predictions != once || out.iterations != 1 {
            return Err("single-mention chunk differs from one-shot prediction".into());
        }
    }
    Ok(())
}
