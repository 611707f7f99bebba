//! Throughput statistics and the experiment report with its CSV and JSON forms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::marl::EpisodeResult;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Long-format CSV: one row per episode total, improvement or note, every row
/// repeating the report metadata.
pub const CSV_HEADER: [&str; 8] = ["schema_version", "preset", "config_hash", "complete", "kind", "name", "key", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub n: usize,
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
}

/// Five-number summary. Quartiles are medians of the lower and upper halves,
/// leaving the middle element out of both halves when n is odd.
pub fn summarize(totals: &[f64]) -> Result<ThroughputSummary, HarnessError> {
    if totals.is_empty() {
        return Err(HarnessError::Stats("cannot summarize an empty list".into()));
    }
    if totals.iter().any(|x| !x.is_finite()) {
        return Err(HarnessError::Stats("non-finite total".into()));
    }
    let mut v = totals.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let (q1, q3) = if n == 1 {
        (v[0], v[0])
    } else {
        let half = n / 2;
        (median_sorted(&v[..half]), median_sorted(&v[n - half..]))
    };
    Ok(ThroughputSummary {
        min: v[0],
        q1,
        median: median_sorted(&v),
        q3,
        max: v[n - 1],
        mean: v.iter().sum::<f64>() / n as f64,
        n,
    })
}

/// `100 * (candidate - baseline) / baseline`.
pub fn percent_improvement(baseline: f64, candidate: f64) -> Result<f64, HarnessError> {
    if !(baseline > 0.0) {
        return Err(HarnessError::Stats(format!("baseline must be positive, got {baseline}")));
    }
    Ok(100.0 * (candidate - baseline) / baseline)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub totals: Vec<u64>,
    pub summary: ThroughputSummary,
}

impl StrategyResult {
    pub fn new(name: &str, seeds: Vec<u64>, totals: Vec<u64>) -> Result<Self, HarnessError> {
        if seeds.len() != totals.len() {
            return Err(HarnessError::Report(format!("{name}: {} seeds for {} totals", seeds.len(), totals.len())));
        }
        let f: Vec<f64> = totals.iter().map(|&t| t as f64).collect();
        Ok(StrategyResult { name: name.to_string(), seeds, totals, summary: summarize(&f)? })
    }

    pub fn from_results(name: &str, results: &[EpisodeResult]) -> Result<Self, HarnessError> {
        Self::new(name, results.iter().map(|r| r.seed).collect(), results.iter().map(|r| r.throughput).collect())
    }
}

/// Median-based improvement of `candidate` over `baseline`; `None` when the
/// baseline median is not positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub baseline: String,
    pub candidate: String,
    pub percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub preset: String,
    pub config_hash: String,
    pub complete: bool,
    pub strategies: Vec<StrategyResult>,
    pub improvements: Vec<Improvement>,
    /// Provenance: bundle paths, checkpoint hashes, config hashes of training runs.
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(HarnessError::Config(format!("unknown format {other}"))),
        }
    }
}

impl ExperimentReport {
    pub fn new(preset: &str, config_hash: &str) -> Self {
        ExperimentReport {
            schema_version: REPORT_SCHEMA_VERSION,
            preset: preset.to_string(),
            config_hash: config_hash.to_string(),
            complete: false,
            strategies: Vec::new(),
            improvements: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn strategy(&self, name: &str) -> Option<&StrategyResult> {
        self.strategies.iter().find(|s| s.name == name)
    }

    pub fn push_strategy(&mut self, s: StrategyResult) {
        self.strategies.push(s);
    }

    /// Adds the improvement of `candidate` over `baseline`, from stored medians.
    pub fn push_improvement(&mut self, baseline: &str, candidate: &str) -> Result<(), HarnessError> {
        let b = self.strategy(baseline).ok_or_else(|| HarnessError::Report(format!("no strategy {baseline}")))?;
        let c = self.strategy(candidate).ok_or_else(|| HarnessError::Report(format!("no strategy {candidate}")))?;
        let percent = percent_improvement(b.summary.median, c.summary.median).ok();
        self.improvements.push(Improvement { baseline: baseline.into(), candidate: candidate.into(), percent });
        Ok(())
    }

    pub fn improvement(&self, baseline: &str, candidate: &str) -> Option<&Improvement> {
        self.improvements.iter().find(|i| i.baseline == baseline && i.candidate == candidate)
    }

    /// True when every stored summary and improvement matches a recomputation.
    pub fn is_consistent(&self) -> bool {
        let mut fresh = ExperimentReport { strategies: Vec::new(), improvements: Vec::new(), ..self.clone() };
        for s in &self.strategies {
            match StrategyResult::new(&s.name, s.seeds.clone(), s.totals.clone()) {
                Ok(r) => fresh.push_strategy(r),
                Err(_) => return false,
            }
        }
        for i in &self.improvements {
            if fresh.push_improvement(&i.baseline, &i.candidate).is_err() {
                return false;
            }
        }
        fresh == *self
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let r: ExperimentReport = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(HarnessError::Report(format!("unsupported schema version {}", r.schema_version)));
        }
        Ok(r)
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        let meta = [self.schema_version.to_string(), self.preset.clone(), self.config_hash.clone(), self.complete.to_string()];
        let mut row = |kind: &str, name: &str, key: &str, value: &str| {
            let mut rec: Vec<&str> = meta.iter().map(String::as_str).collect();
            rec.extend([kind, name, key, value]);
            w.write_record(&rec)
        };
        row("meta", "", "", "")?;
        for s in &self.strategies {
            for (seed, total) in s.seeds.iter().zip(&s.totals) {
                row("episode", &s.name, &seed.to_string(), &total.to_string())?;
            }
        }
        for i in &self.improvements {
            row("improvement", &i.candidate, &i.baseline, &i.percent.map(|p| p.to_string()).unwrap_or_default())?;
        }
        for (k, v) in &self.notes {
            row("note", k, "", v)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Report(e.to_string()))
    }

    /// Summaries and improvements are recomputed from the episode rows, and
    /// stored improvement values must agree with the recomputation.
    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(HarnessError::Report(format!("unexpected header {header:?}")));
        }
        let mut report: Option<ExperimentReport> = None;
        let mut episodes: Vec<(String, Vec<u64>, Vec<u64>)> = Vec::new();
        let mut improvements: Vec<(String, String, String)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("").to_string();
            let bad = |what: &str| HarnessError::Report(format!("bad {what} in row {:?}", rec.position().map(|p| p.line())));
            let rep = report.get_or_insert_with(|| ExperimentReport::new(&f(1), &f(2)));
            rep.schema_version = f(0).parse().map_err(|_| bad("schema_version"))?;
            rep.complete = f(3).parse().map_err(|_| bad("complete"))?;
            match f(4).as_str() {
                "meta" => {}
                "episode" => {
                    let name = f(5);
                    let seed: u64 = f(6).parse().map_err(|_| bad("seed"))?;
                    let total: u64 = f(7).parse().map_err(|_| bad("total"))?;
                    match episodes.iter_mut().find(|e| e.0 == name) {
                        Some(e) => {
                            e.1.push(seed);
                            e.2.push(total);
                        }
                        None => episodes.push((name, vec![seed], vec![total])),
                    }
                }
                "improvement" => improvements.push((f(6), f(5), f(7))),
                "note" => {
                    rep.notes.insert(f(5), f(7));
                }
                other => return Err(HarnessError::Report(format!("unknown row kind {other}"))),
            }
        }
        let mut report = report.ok_or_else(|| HarnessError::Report("no rows".into()))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(HarnessError::Report(format!("unsupported schema version {}", report.schema_version)));
        }
        for (name, seeds, totals) in episodes {
            report.push_strategy(StrategyResult::new(&name, seeds, totals)?);
        }
        for (baseline, candidate, value) in improvements {
            report.push_improvement(&baseline, &candidate)?;
            let stored = report.improvements.last().expect("just pushed").percent;
            let given: Option<f64> = if value.is_empty() {
                None
            } else {
                Some(value.parse().map_err(|_| HarnessError::Report(format!("bad percent {value}")))?)
            };
            if stored != given {
                return Err(HarnessError::Report(format!("improvement {candidate} over {baseline} disagrees with totals")));
            }
        }
        Ok(report)
    }

    pub fn export(&self, format: ReportFormat) -> Result<String, HarnessError> {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
        }
    }

    pub fn import(text: &str, format: ReportFormat) -> Result<Self, HarnessError> {
        match format {
            ReportFormat::Csv => Self::from_csv(text),
            ReportFormat::Json => Self::from_json(text),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_numbers_hand_case() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 1.5, 3.0, 4.5, 5.0));
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.n, 5);
    }

    #[test]
    fn degenerate_lists() {
        let s = summarize(&[7.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (7.0, 7.0, 7.0, 7.0, 7.0));
        let s = summarize(&[4.0; 6]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (4.0, 4.0, 4.0, 4.0, 4.0));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn improvement_cases() {
        assert_eq!(percent_improvement(100.0, 100.0).unwrap(), 0.0);
        assert!(percent_improvement(0.0, 5.0).is_err());
        assert!((percent_improvement(200.0, 250.0).unwrap() - 25.0).abs() < 1e-12);
    }

    fn sample_report() -> ExperimentReport {
        let mut r = ExperimentReport::new("heuristic_comparison", "abc");
        r.push_strategy(StrategyResult::new("low", vec![0, 1, 2], vec![300, 310, 305]).unwrap());
        r.push_strategy(StrategyResult::new("high", vec![0, 1, 2], vec![330, 320, 341]).unwrap());
        r.push_improvement("low", "high").unwrap();
        r.notes.insert("run.bundle".into(), "out/a, with comma".into());
        r.complete = true;
        r
    }

    #[test]
    fn csv_and_json_round_trip() {
        let r = sample_report();
        for f in [ReportFormat::Csv, ReportFormat::Json] {
            let text = r.export(f).unwrap();
            assert_eq!(ExperimentReport::import(&text, f).unwrap(), r);
        }
        assert!(r.is_consistent());
    }

    #[test]
    fn csv_header_is_documented_schema() {
        let text = sample_report().to_csv().unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
    }

    #[test]
    fn tampered_improvement_is_rejected() {
        let text = sample_report().to_csv().unwrap();
        let line = text.lines().find(|l| l.contains(",improvement,")).unwrap().to_string();
        let value = line.rsplit(',').next().unwrap();
        let bad = text.replace(&line, &line.replace(value, "99"));
        assert!(ExperimentReport::from_csv(&bad).is_err());
    }
}
