//! Line-delimited JSON and plain-text table renderings of analysis results.
//!
//! Every JSON line carries `"format": REPORT_FORMAT` and a `"record"` type so
//! consumers can dispatch without knowing which command produced the stream.

use std::fmt::Write;

use serde_json::{json, Value};

use super::{EvalReport, HeadInspection, ScanReport, TopKReport, TransferReport};

pub const REPORT_FORMAT: &str = "attnlens.report/v1";

pub trait Report {
    fn records(&self) -> Vec<Value>;

    fn to_table(&self) -> String;

    fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r).expect("report serializes"));
            out.push('\n');
        }
        out
    }
}

fn record(kind: &str, body: Value) -> Value {
    let mut v = json!({ "format": REPORT_FORMAT, "record": kind });
    if let (Some(dst), Value::Object(src)) = (v.as_object_mut(), body) {
        dst.extend(src);
    }
    v
}

/// Control characters and newlines escaped so every token fits on one cell.
fn show(token: &str) -> String {
    format!("{token:?}")
}

fn paired_rows(out: &mut String, left: &TopKReport, right: &TopKReport) {
    let _ = writeln!(
        out,
        "{:>4}  {:<18} {:>9} {:>8}   {:<18} {:>9} {:>8}",
        "rank", "lens", "logit", "prob", "baseline", "logit", "prob"
    );
    for i in 0..left.entries.len().max(right.entries.len()) {
        let cell = |r: &TopKReport| match r.entries.get(i) {
            Some(e) => format!("{:<18} {:>9.4} {:>8.5}", show(&e.token), e.logit, e.probability),
            None => format!("{:<18} {:>9} {:>8}", "", "", ""),
        };
        let _ = writeln!(out, "{:>4}  {}   {}", i + 1, cell(left), cell(right));
    }
}

impl Report for HeadInspection {
    fn records(&self) -> Vec<Value> {
        vec![record(
            "inspect",
            serde_json::to_value(self).expect("inspection serializes"),
        )]
    }

    fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "layer {} head {} position {} ({:?} baseline)",
            self.layer, self.head, self.position, self.baseline_mode
        );
        let _ = writeln!(
            out,
            "KL to model output: lens {:.5}  baseline {:.5}",
            self.lens_kl, self.baseline_kl
        );
        paired_rows(&mut out, &self.lens, &self.baseline);
        out
    }
}

impl Report for ScanReport {
    fn records(&self) -> Vec<Value> {
        let mut out = vec![record(
            "scan_summary",
            json!({
                "prompt": self.prompt,
                "position": self.position,
                "k": self.k,
                "flagged_vocab": self.flagged_vocab,
                "warnings": self.warnings,
                "coverage": self.coverage,
            }),
        )];
        for h in &self.hits {
            out.push(record(
                "scan_head",
                json!({ "layer": h.layer, "head": h.head, "hits": h.hits }),
            ));
        }
        out
    }

    fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "prompt: {}", show(&self.prompt));
        let _ = writeln!(
            out,
            "scanned {} heads (top {}), {} with hits, {} hits total",
            self.coverage.heads_scanned,
            self.k,
            self.coverage.heads_with_hits,
            self.coverage.total_hits
        );
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        for h in &self.hits {
            let hits: Vec<String> = h
                .hits
                .iter()
                .map(|x| format!("{}@{}", show(&x.token), x.rank))
                .collect();
            let _ = writeln!(out, "L{:<2} H{:<2} {}", h.layer, h.head, hits.join(", "));
        }
        out
    }
}

impl Report for TransferReport {
    fn records(&self) -> Vec<Value> {
        self.entries
            .iter()
            .map(|e| {
                let mut v = serde_json::to_value(e).expect("entry serializes");
                v["model_fingerprint"] = json!(self.model_fingerprint);
                record("transfer", v)
            })
            .collect()
    }

    fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:<8} {:>10} {:>10} {:>10} {:>10}",
            "a", "b", "KL(a|b)", "KL(b|a)", "H(a,b)", "H(b,a)"
        );
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<8} {:<8} {:>10.5} {:>10.5} {:>10.5} {:>10.5}",
                format!("L{}H{}", e.layer_a, e.head_a),
                format!("L{}H{}", e.layer_b, e.head_b),
                e.kl_ab,
                e.kl_ba,
                e.cross_entropy_ab,
                e.cross_entropy_ba
            );
        }
        out
    }
}

impl Report for EvalReport {
    fn records(&self) -> Vec<Value> {
        let mut out: Vec<Value> = self
            .heads
            .iter()
            .map(|h| {
                let mut v = serde_json::to_value(h).expect("head eval serializes");
                v["n_eval"] = json!(self.n_eval);
                record("eval_head", v)
            })
            .collect();
        out.push(record(
            "eval_summary",
            json!({
                "model_fingerprint": self.model_fingerprint,
                "baseline_mode": self.baseline_mode,
                "n_eval": self.n_eval,
                "heads": self.heads.len(),
                "lens_better_count": self.lens_better_count,
                "lens_better_fraction": self.lens_better_fraction(),
            }),
        ));
        out
    }

    fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>12} {:>12}  better", "head", "lens KL", "baseline KL");
        for h in &self.heads {
            let _ = writeln!(
                out,
                "{:<8} {:>12.5} {:>12.5}  {}",
                format!("L{}H{}", h.layer, h.head),
                h.lens_kl,
                h.baseline_kl,
                if h.lens_better { "lens" } else { "baseline" }
            );
        }
        let _ = writeln!(
            out,
            "lens_better={}/{} fraction={:.3} n_eval={}",
            self.lens_better_count,
            self.heads.len(),
            self.lens_better_fraction(),
            self.n_eval
        );
        out
    }
}
