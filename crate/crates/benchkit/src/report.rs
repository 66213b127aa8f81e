//! Run reports: one CSV row per iteration with wall time, dispatch path,
//! and per-cause token counts, plus a human summary table. Acceptance keys
//! on the token counts; wall time is informative only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: u32,
    pub mode: String,
    pub query: String,
    pub path: String,
    pub wall_ms: f64,
    pub query_tokens: u64,
    pub generated_tokens: u64,
    pub session_tokens: u64,
    pub stream_tokens: u64,
    pub flash_tokens: u64,
    pub pool_tokens: u64,
    pub context_tokens: u64,
    pub format_ok: bool,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyReport {
    pub rows: Vec<IterationRow>,
    pub complete: bool,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Summary {
    pub iterations: usize,
    pub avg_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub flash_hits: usize,
    pub spec_exits: usize,
    pub standard: usize,
}

impl LatencyReport {
    pub fn new(rows: Vec<IterationRow>, complete: bool) -> Self {
        let mut report = Self { rows, complete };
        let status = if complete { "ok" } else { "partial" };
        for row in &mut report.rows {
            row.status = status.to_string();
        }
        report
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("serialize row");
        }
        String::from_utf8(w.into_inner().expect("flush csv")).expect("utf8 csv")
    }

    pub fn from_csv(s: &str) -> Result<Self, ReportError> {
        let mut r = csv::Reader::from_reader(s.as_bytes());
        let mut rows = Vec::new();
        for row in r.deserialize::<IterationRow>() {
            rows.push(row.map_err(|e| ReportError::Csv(e.to_string()))?);
        }
        let complete = rows.iter().all(|r| r.status == "ok");
        Ok(Self { rows, complete })
    }

    pub fn summary(&self) -> Summary {
        let n = self.rows.len();
        if n == 0 {
            return Summary::default();
        }
        let times: Vec<f64> = self.rows.iter().map(|r| r.wall_ms).collect();
        let avg = times.iter().sum::<f64>() / n as f64;
        let var = times.iter().map(|t| (t - avg).powi(2)).sum::<f64>() / n as f64;
        let count = |p: &str| self.rows.iter().filter(|r| r.path == p).count();
        Summary {
            iterations: n,
            avg_ms: avg,
            std_ms: var.sqrt(),
            min_ms: times.iter().cloned().fold(f64::INFINITY, f64::min),
            max_ms: times.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            flash_hits: count("FLASH_HIT"),
            spec_exits: count("SPEC_EXIT"),
            standard: count("STANDARD"),
        }
    }

    /// Human-readable summary mirroring the latency-variance table shape.
    pub fn render_summary(&self) -> String {
        let s = self.summary();
        let mut out = String::new();
        if !self.complete {
            out.push_str("!! PARTIAL RUN: results flagged invalid\n");
        }
        out.push_str(&format!(
            "{:<12} {:>9} {:>12} {:>9} {:>9}\n",
            "iterations", "avg (ms)", "std dev (ms)", "min (ms)", "max (ms)"
        ));
        out.push_str(&format!(
            "{:<12} {:>9.2} {:>12.2} {:>9.2} {:>9.2}\n",
            s.iterations, s.avg_ms, s.std_ms, s.min_ms, s.max_ms
        ));
        out.push_str(&format!(
            "paths: FLASH_HIT {}  SPEC_EXIT {}  STANDARD {}\n",
            s.flash_hits, s.spec_exits, s.standard
        ));
        if let (Some(first), Some(last)) = (self.rows.first(), self.rows.last()) {
            out.push_str(&format!(
                "context growth: {} -> {} tokens\n",
                first.context_tokens, last.context_tokens
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u32, ms: f64) -> IterationRow {
        IterationRow {
            iteration: i,
            mode: "stateful".into(),
            query: format!("Q{}", 1 + i % 6),
            path: "STANDARD".into(),
            wall_ms: ms,
            query_tokens: 30,
            generated_tokens: 16,
            session_tokens: 46,
            stream_tokens: 880,
            flash_tokens: 0,
            pool_tokens: 0,
            context_tokens: 2480 + 880 * i as u64,
            format_ok: true,
            status: "ok".into(),
        }
    }

    #[test]
    fn csv_round_trip() {
        let report = LatencyReport::new((0..5).map(|i| row(i, 10.0 + i as f64)).collect(), true);
        let csv = report.to_csv();
        let back = LatencyReport::from_csv(&csv).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn partial_runs_are_flagged() {
        let report = LatencyReport::new(vec![row(0, 5.0)], false);
        assert!(report.render_summary().contains("PARTIAL"));
        let back = LatencyReport::from_csv(&report.to_csv()).unwrap();
        assert!(!back.complete);
    }

    #[test]
    fn empty_report_summary() {
        let report = LatencyReport::new(Vec::new(), true);
        assert_eq!(report.summary(), Summary::default());
        assert!(LatencyReport::from_csv("").unwrap().rows.is_empty());
    }

    #[test]
    fn summary_statistics() {
        let report =
            LatencyReport::new(vec![row(0, 10.0), row(1, 20.0), row(2, 30.0)], true);
        let s = report.summary();
        assert_eq!(s.avg_ms, 20.0);
        assert_eq!(s.min_ms, 10.0);
        assert_eq!(s.max_ms, 30.0);
        assert!((s.std_ms - 8.1649658).abs() < 1e-5);
        assert_eq!(s.standard, 3);
    }

    proptest::proptest! {
        #[test]
        fn csv_round_trips_any_rows(
            times in proptest::collection::vec(0.0f64..10_000.0, 0..20),
            partial in proptest::bool::ANY,
        ) {
            let rows: Vec<IterationRow> =
                times.iter().enumerate().map(|(i, t)| row(i as u32, *t)).collect();
            let report = LatencyReport::new(rows, !partial);
            let back = LatencyReport::from_csv(&report.to_csv()).unwrap();
            proptest::prop_assert_eq!(back, report);
        }
    }
}
