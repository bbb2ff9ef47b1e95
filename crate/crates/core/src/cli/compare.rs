//! `compare` subcommand: seed-averaged error and credible-width tables across
//! result sets, in the layout of the benchmark tables (rows = methods,
//! columns = outer iterations).

use std::fs;
use std::path::Path;

use super::run::ResultsDocument;
use super::CliError;

struct MethodSummary {
    label: String,
    /// Seed-averaged l2 error per outer iteration (None when no truth).
    l2_error: Vec<Option<f64>>,
    avg_width: Vec<f64>,
}

/// Execute the `compare` subcommand; 0 on success, 1 on any error.
pub fn cmd_compare(paths: &[String], out_dir: Option<&Path>) -> i32 {
    match compare_impl(paths, out_dir) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn compare_impl(paths: &[String], out_dir: Option<&Path>) -> Result<(), CliError> {
    if paths.len() < 2 {
        return Err(CliError::Run("compare needs at least two results files".into()));
    }
    let mut documents = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Run(format!("cannot read {path}: {e}")))?;
        let doc: ResultsDocument = serde_json::from_str(&text)?;
        documents.push(doc);
    }
    let reference_hash = &documents[0].problem_hash;
    for (doc, path) in documents.iter().zip(paths) {
        if &doc.problem_hash != reference_hash {
            return Err(CliError::Run(format!(
                "problem hash of {path} ({}) does not match {} ({reference_hash}); \
                 the runs solved different problems",
                doc.problem_hash, paths[0]
            )));
        }
    }

    let summaries: Vec<MethodSummary> = documents.iter().map(summarize).collect();
    let columns = summaries.iter().map(|s| s.avg_width.len()).max().unwrap_or(0);

    let text = render_text(&summaries, columns);
    print!("{text}");
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("compare.txt"), &text)?;
        write_csv(&dir.join("compare.csv"), &summaries, columns)?;
    }
    Ok(())
}

fn summarize(doc: &ResultsDocument) -> MethodSummary {
    let label = method_label(doc);
    let columns = doc
        .runs
        .iter()
        .map(|r| r.iterations.len())
        .max()
        .unwrap_or(0);
    let mut l2_error = vec![None; columns];
    let mut avg_width = vec![0.0; columns];
    for col in 0..columns {
        let mut errors = Vec::new();
        let mut widths = Vec::new();
        for run in &doc.runs {
            if let Some(row) = run.iterations.get(col) {
                if let Some(e) = row.l2_error {
                    errors.push(e);
                }
                widths.push(row.avg_width);
            }
        }
        if !errors.is_empty() {
            l2_error[col] = Some(errors.iter().sum::<f64>() / errors.len() as f64);
        }
        if !widths.is_empty() {
            avg_width[col] = widths.iter().sum::<f64>() / widths.len() as f64;
        }
    }
    MethodSummary { label, l2_error, avg_width }
}

/// Method label like "l0.5-iekf", derived from the echoed config.
fn method_label(doc: &ResultsDocument) -> String {
    let variant = doc.config["solver"]["variant"].as_str().unwrap_or("?").to_string();
    let r = doc.config["solver"]["r"].as_f64().unwrap_or(f64::NAN);
    if r > 0.0 {
        let p = 2.0 * r / (r + 1.0);
        format!("l{}-{variant}", trim_float(p))
    } else {
        format!("invgamma-{variant}")
    }
}

fn trim_float(v: f64) -> String {
    let rounded = (v * 1000.0).round() / 1000.0;
    let mut s = format!("{rounded}");
    if s.ends_with(".0") {
        s.truncate(s.len() - 2);
    }
    s
}

fn render_text(summaries: &[MethodSummary], columns: usize) -> String {
    let mut out = String::new();
    let label_width = summaries.iter().map(|s| s.label.len()).max().unwrap_or(6).max(6);
    for (title, pick) in [
        ("seed-averaged l2 error", true),
        ("seed-averaged credible width", false),
    ] {
        out.push_str(title);
        out.push('\n');
        out.push_str(&format!("{:label_width$}", "method"));
        for c in 0..columns {
            out.push_str(&format!(" {:>10}", format!("{c}th")));
        }
        out.push('\n');
        for s in summaries {
            out.push_str(&format!("{:label_width$}", s.label));
            for c in 0..columns {
                let cell = if pick {
                    s.l2_error.get(c).copied().flatten().map(|v| format!("{v:.4}"))
                } else {
                    s.avg_width.get(c).map(|v| format!("{v:.4}"))
                };
                out.push_str(&format!(" {:>10}", cell.unwrap_or_default()));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

fn write_csv(path: &Path, summaries: &[MethodSummary], columns: usize) -> Result<(), CliError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)?;
    let mut header = vec!["method".to_string(), "metric".to_string()];
    header.extend((0..columns).map(|c| format!("outer_{c}")));
    writer.write_record(&header)?;
    for s in summaries {
        let mut row = vec![s.label.clone(), "l2_error".to_string()];
        row.extend((0..columns).map(|c| {
            s.l2_error.get(c).copied().flatten().map(|v| format!("{v}")).unwrap_or_default()
        }));
        writer.write_record(&row)?;
        let mut row = vec![s.label.clone(), "avg_width".to_string()];
        row.extend(
            (0..columns).map(|c| s.avg_width.get(c).map(|v| format!("{v}")).unwrap_or_default()),
        );
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_penalty_exponent() {
        let doc = |r: f64, variant: &str| ResultsDocument {
            schema_version: 1,
            package_version: "0".into(),
            config: serde_json::json!({"solver": {"r": r, "variant": variant}}),
            config_hash: String::new(),
            problem_hash: String::new(),
            runs: Vec::new(),
        };
        assert_eq!(method_label(&doc(1.0, "iekf")), "l1-iekf");
        assert_eq!(method_label(&doc(1.0 / 3.0, "iekf-sl")), "l0.5-iekf-sl");
        assert_eq!(method_label(&doc(-1.0, "iekf")), "invgamma-iekf");
    }

    #[test]
    fn compare_rejects_single_input() {
        assert_eq!(cmd_compare(&["only.json".to_string()], None), 1);
    }

    #[test]
    fn compare_rejects_missing_file() {
        let paths = vec!["definitely-missing-a.json".to_string(), "missing-b.json".to_string()];
        assert_eq!(cmd_compare(&paths, None), 1);
    }
}
