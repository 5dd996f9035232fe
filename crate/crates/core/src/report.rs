//! Plain-text reports: a timestamped header line, the resolved config, any
//! number of titled tables, and a trailing `[metrics]` block of
//! `metric=value` lines for machines.
//!
//! Everything below the header line is a pure function of the inputs, so two
//! runs with identical flags and seeds compare equal after [`strip_header`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::data::write_locked;
use crate::error::Result;
use crate::metrics::ClassificationReport;

pub const HEADER_PREFIX: &str = "# fusionvote report";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub command: String,
    pub config: String,
    sections: Vec<(String, String)>,
    metrics: Vec<(String, String)>,
}

impl Report {
    pub fn new(command: impl Into<String>, config: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            config: config.into(),
            ..Self::default()
        }
    }

    pub fn section(&mut self, title: impl Into<String>, body: impl Into<String>) -> &mut Self {
        self.sections.push((title.into(), body.into()));
        self
    }

    pub fn metric(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.metrics.push((key.into(), value.to_string()));
        self
    }

    /// Real-valued metric, fixed at four decimals.
    pub fn metric_f64(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.metric(key, format!("{value:.4}"))
    }

    pub fn metrics(&self) -> &[(String, String)] {
        &self.metrics
    }

    /// Renders the report; `unix_time` fills the header line only.
    pub fn render(&self, unix_time: u64) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER_PREFIX} command={} generated_unix={unix_time}", self.command);
        let _ = writeln!(s, "[config]");
        s.push_str(&self.config);
        if !self.config.ends_with('\n') {
            s.push('\n');
        }
        for (title, body) in &self.sections {
            let _ = writeln!(s, "\n[{title}]");
            s.push_str(body);
            if !body.ends_with('\n') {
                s.push('\n');
            }
        }
        let _ = writeln!(s, "\n[metrics]");
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        write_locked(path.as_ref(), self.render(now).as_bytes())
    }
}

/// Report text without its timestamp line.
pub fn strip_header(text: &str) -> &str {
    match text.split_once('\n') {
        Some((first, rest)) if first.starts_with(HEADER_PREFIX) => rest,
        _ => text,
    }
}

/// `metric=value` pairs from the `[metrics]` block.
pub fn parse_metrics(text: &str) -> BTreeMap<String, String> {
    text.split("\n[metrics]\n")
        .nth(1)
        .unwrap_or("")
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Right-aligned columns separated by two spaces, with a rule under the
/// header row.
pub fn text_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut width: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            width[i] = width[i].max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&width)
            .map(|(c, &w)| format!("{c:>w$}"))
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut s = line(headers.to_vec());
    s.push('\n');
    s.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
    s.push('\n');
    for row in rows {
        s.push_str(&line(row.iter().map(String::as_str).collect()));
        s.push('\n');
    }
    s
}

/// Row fractions as percentages in hundredths, rounded by largest remainder
/// so that a nonzero row sums to exactly 100.00.
pub fn percent_hundredths(row: &[f64]) -> Vec<u64> {
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        return vec![0; row.len()];
    }
    let exact: Vec<f64> = row.iter().map(|v| v / total * 10_000.0).collect();
    let mut out: Vec<u64> = exact.iter().map(|v| v.floor() as u64).collect();
    let short = 10_000 - out.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(short as usize) {
        out[i] += 1;
    }
    out
}

fn hundredths(v: u64) -> String {
    format!("{}.{:02}", v / 100, v % 100)
}

/// Confusion matrix in row percentages, true class down, predicted across.
pub fn confusion_table(report: &ClassificationReport, names: &[String]) -> String {
    let mut headers = vec!["true\\pred"];
    headers.extend(names.iter().map(String::as_str));
    headers.push("n");
    let rows: Vec<Vec<String>> = report
        .confusion
        .iter()
        .zip(&report.counts)
        .enumerate()
        .map(|(i, (row, counts))| {
            let mut cells = vec![names[i].clone()];
            cells.extend(percent_hundredths(row).into_iter().map(hundredths));
            cells.push(counts.iter().sum::<usize>().to_string());
            cells
        })
        .collect();
    text_table(&headers, &rows)
}

/// Per-rank fractions, one row.
pub fn rank_table(label: &str, dist: &[f64]) -> String {
    let names: Vec<String> = (1..=dist.len()).map(|k| format!("rank{k}")).collect();
    let mut headers = vec!["network"];
    headers.extend(names.iter().map(String::as_str));
    let mut row = vec![label.to_string()];
    row.extend(dist.iter().map(|v| format!("{v:.4}")));
    text_table(&headers, &[row])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_the_only_varying_line() {
        let mut r = Report::new("train", "a = 1\n");
        r.section("table", "x  y\n").metric_f64("accuracy", 0.9).metric("status", "plateau");
        let a = r.render(1);
        let b = r.render(2);
        assert_ne!(a, b);
        assert_eq!(strip_header(&a), strip_header(&b));
        assert!(a.starts_with(HEADER_PREFIX));
        let m = parse_metrics(&a);
        assert_eq!(m["accuracy"], "0.9000");
        assert_eq!(m["status"], "plateau");
    }

    #[test]
    fn percentages_sum_to_one_hundred() {
        for row in [vec![1.0, 1.0, 1.0], vec![0.1, 0.2, 0.3, 0.4], vec![1.0 / 7.0; 7], vec![0.0, 0.0]] {
            let p = percent_hundredths(&row);
            let total: u64 = p.iter().sum();
            assert!(total == 10_000 || row.iter().all(|&v| v == 0.0));
        }
        assert_eq!(percent_hundredths(&[1.0, 1.0, 1.0]), vec![3334, 3333, 3333]);
    }

    #[test]
    fn confusion_rows_render() {
        let rep = ClassificationReport::from_predictions(&[0, 0, 0, 1], &[0, 1, 1, 1], 2).unwrap();
        let t = confusion_table(&rep, &["a".into(), "b".into()]);
        assert!(t.contains("33.33"), "{t}");
        assert!(t.contains("66.67"));
        assert!(t.contains("100.00"));
    }

    #[test]
    fn table_alignment() {
        let t = text_table(&["k", "value"], &[vec!["long".into(), "1".into()]]);
        assert_eq!(t, "   k  value\n-----------\nlong      1\n");
    }
}
