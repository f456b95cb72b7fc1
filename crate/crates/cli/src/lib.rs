//! Command-line and HTTP front ends for the ragrank QA engine.

pub mod server;

use ragrank_core::generation::AnswerRecord;

/// Answer, then each source as `filename p.N (r=score)` followed by its
/// snippet, indented.
pub fn render_answer(rec: &AnswerRecord) -> String {
    let mut out = String::new();
    out.push_str(rec.prediction.trim());
    out.push('\n');
    if let Some(l) = rec.parsed_label {
        out.push_str(&format!("(parsed choice: {l})\n"));
    }
    if !rec.snippets.is_empty() {
        out.push_str("\nSources:\n");
    }
    for s in &rec.snippets {
        out.push_str(&format!("{} p.{} (r={:.4})\n", s.filename, s.page, s.rank_score));
        for line in s.text.lines() {
            out.push_str("    ");
            out.push_str(line);
            out.push('\n');
        }
    }
    for w in &rec.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}
