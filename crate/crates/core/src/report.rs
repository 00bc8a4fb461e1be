//! Tables over evaluation reports, one row per protocol.

use crate::metrics::EvaluationReport;

const HEADERS: [&str; 7] = ["Protocol", "HTER(%)", "AUC(%)", "Bias", "Variance", "Threshold", "Seed"];
const CSV_HEADER: &str = "protocol,hter,auc,bias,variance,threshold,seed";

struct Row {
    protocol: String,
    hter: f64,
    auc: f64,
    bias: f64,
    variance: f64,
    threshold: Option<f64>,
    seed: Option<u64>,
}

fn rows(reports: &[EvaluationReport]) -> Vec<Row> {
    let mut rows: Vec<Row> = reports
        .iter()
        .map(|r| Row {
            protocol: r.provenance.manifest.clone(),
            hter: r.hter,
            auc: r.auc,
            bias: r.bias,
            variance: r.variance,
            threshold: Some(r.threshold_used),
            seed: Some(r.provenance.seed),
        })
        .collect();
    if reports.len() > 1 {
        // unweighted column means
        let n = reports.len() as f64;
        let mean = |f: fn(&EvaluationReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        rows.push(Row {
            protocol: "Average".into(),
            hter: mean(|r| r.hter),
            auc: mean(|r| r.auc),
            bias: mean(|r| r.bias),
            variance: mean(|r| r.variance),
            threshold: None,
            seed: None,
        });
    }
    rows
}

/// Aligned plain text. HTER and AUC in percent, as FAS tables usually show them.
pub fn render_text(reports: &[EvaluationReport]) -> String {
    let cells: Vec<[String; 7]> = rows(reports)
        .into_iter()
        .map(|r| {
            [
                r.protocol,
                format!("{:.2}", r.hter * 100.0),
                format!("{:.2}", r.auc * 100.0),
                format!("{:.3}", r.bias),
                format!("{:.3}", r.variance),
                r.threshold.map_or("-".into(), |t| format!("{t:.4}")),
                r.seed.map_or("-".into(), |s| s.to_string()),
            ]
        })
        .collect();

    let mut widths = HEADERS.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |fields: &[&str]| -> String {
        let mut s = String::new();
        for (i, (f, w)) in fields.iter().zip(widths).enumerate() {
            if i == 0 {
                s.push_str(&format!("{f:<w$}"));
            } else {
                s.push_str(&format!("  {f:>w$}"));
            }
        }
        s.trim_end().to_string() + "\n"
    };

    let mut out = line(&HEADERS);
    for row in &cells {
        let fields: Vec<&str> = row.iter().map(String::as_str).collect();
        out.push_str(&line(&fields));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with raw (fractional) values.
pub fn render_csv(reports: &[EvaluationReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows(reports) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&r.protocol),
            r.hter,
            r.auc,
            r.bias,
            r.variance,
            r.threshold.map_or(String::new(), |t| t.to_string()),
            r.seed.map_or(String::new(), |s| s.to_string()),
        ));
    }
    out
}
