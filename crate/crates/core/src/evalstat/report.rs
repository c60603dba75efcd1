use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{box_stats, quantile, wilcoxon_signed_rank, BoxStats, EvalError, WilcoxonMethod};
use crate::pipeline::ChannelSelection;
use crate::volgrid::SequenceId;

/// The five compared input configurations, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SequenceConfig {
    T1Only,
    T1cOnly,
    T2Only,
    FlairOnly,
    AllFour,
}

impl SequenceConfig {
    pub const ALL: [SequenceConfig; 5] = [
        SequenceConfig::T1Only,
        SequenceConfig::T1cOnly,
        SequenceConfig::T2Only,
        SequenceConfig::FlairOnly,
        SequenceConfig::AllFour,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SequenceConfig::T1Only => "T1_ONLY",
            SequenceConfig::T1cOnly => "T1C_ONLY",
            SequenceConfig::T2Only => "T2_ONLY",
            SequenceConfig::FlairOnly => "FLAIR_ONLY",
            SequenceConfig::AllFour => "ALL_FOUR",
        }
    }

    pub fn channels(self) -> ChannelSelection {
        match self {
            SequenceConfig::T1Only => ChannelSelection::single(SequenceId::T1),
            SequenceConfig::T1cOnly => ChannelSelection::single(SequenceId::T1C),
            SequenceConfig::T2Only => ChannelSelection::single(SequenceId::T2),
            SequenceConfig::FlairOnly => ChannelSelection::single(SequenceId::FLAIR),
            SequenceConfig::AllFour => ChannelSelection::all(),
        }
    }
}

impl fmt::Display for SequenceConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SequenceConfig {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| EvalError::Parse(format!("unknown sequence config {s:?}")))
    }
}

/// Test-set overlap of one case under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub case_id: String,
    pub patient_id: String,
    pub fold: usize,
    pub config: SequenceConfig,
    pub dice: f64,
    pub jaccard: f64,
}

const HEADER: [&str; 6] = ["case_id", "patient_id", "fold", "config", "dice", "jaccard"];

/// Serialises records sorted by (config, case_id).
pub fn write_metrics_csv(records: &[MetricRecord]) -> String {
    let mut sorted: Vec<&MetricRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (a.config, &a.case_id).cmp(&(b.config, &b.case_id)));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory write");
    for r in sorted {
        w.write_record([
            r.case_id.as_str(),
            r.patient_id.as_str(),
            &r.fold.to_string(),
            r.config.name(),
            &r.dice.to_string(),
            &r.jaccard.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>, EvalError> {
    let perr = |m: String| EvalError::Parse(m);
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| perr(e.to_string()))?.clone();
    if header.iter().ne(HEADER) {
        return Err(perr(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| perr(e.to_string()))?;
        let at = |m: &str| perr(format!("row {}: {m}", line + 1));
        if row.len() != HEADER.len() {
            return Err(at("wrong field count"));
        }
        let metric = |s: &str| -> Result<f64, EvalError> {
            let v: f64 = s.parse().map_err(|_| at(&format!("bad number {s:?}")))?;
            if (0.0..=1.0).contains(&v) {
                Ok(v)
            } else {
                Err(at(&format!("metric {v} outside [0, 1]")))
            }
        };
        out.push(MetricRecord {
            case_id: row[0].to_owned(),
            patient_id: row[1].to_owned(),
            fold: row[2].parse().map_err(|_| at("bad fold"))?,
            config: row[3].parse()?,
            dice: metric(&row[4])?,
            jaccard: metric(&row[5])?,
        });
    }
    if out.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(out)
}

/// `**` below 0.01, `*` below 0.05, empty otherwise.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub config: SequenceConfig,
    pub n: usize,
    pub dice: BoxStats,
    pub mean_dice: f64,
    pub median_jaccard: f64,
}

/// Best configuration against one other, paired by case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub config: SequenceConfig,
    #[serde(rename = "W")]
    pub w: Option<f64>,
    pub n_eff: usize,
    pub p: Option<f64>,
    /// `**`, `*`, empty, or `n/a` when every difference is zero.
    pub stars: String,
    pub method: Option<WilcoxonMethod>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub best: SequenceConfig,
    /// Best first, then the rest in canonical order.
    pub configs: Vec<ConfigSummary>,
    pub tests: Vec<PairwiseTest>,
    pub test: String,
}

/// Box statistics per configuration and two-sided signed-rank tests of the
/// highest-median configuration against every other one.
pub fn compare_report(records: &[MetricRecord]) -> Result<CompareReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut by_config: BTreeMap<SequenceConfig, BTreeMap<&str, (f64, f64)>> = BTreeMap::new();
    for r in records {
        if !(r.dice.is_finite() && r.jaccard.is_finite()) {
            return Err(EvalError::Parse(format!("non-finite metric for {}", r.case_id)));
        }
        let cases = by_config.entry(r.config).or_default();
        if cases.insert(&r.case_id, (r.dice, r.jaccard)).is_some() {
            return Err(EvalError::UnpairedRecords(format!("{} appears twice under {}", r.case_id, r.config)));
        }
    }
    let mut groups = by_config.iter();
    let (first_cfg, first) = groups.next().expect("non-empty");
    for (cfg, cases) in groups {
        if !cases.keys().eq(first.keys()) {
            return Err(EvalError::UnpairedRecords(format!("{cfg} and {first_cfg} cover different case sets")));
        }
    }

    let mut summaries = Vec::new();
    for (&config, cases) in &by_config {
        let dice: Vec<f64> = cases.values().map(|v| v.0).collect();
        let mut jac: Vec<f64> = cases.values().map(|v| v.1).collect();
        jac.sort_by(f64::total_cmp);
        summaries.push(ConfigSummary {
            config,
            n: dice.len(),
            dice: box_stats(&dice)?,
            mean_dice: dice.iter().sum::<f64>() / dice.len() as f64,
            median_jaccard: quantile(&jac, 0.5),
        });
    }
    // highest median; ties go to the earlier configuration
    let best_idx =
        summaries.iter().enumerate().fold(0, |b, (i, s)| if s.dice.median > summaries[b].dice.median { i } else { b });
    let best = summaries[best_idx].config;
    let best_summary = summaries.remove(best_idx);
    summaries.insert(0, best_summary);

    let best_dice: Vec<f64> = by_config[&best].values().map(|v| v.0).collect();
    let mut tests = Vec::new();
    for s in &summaries[1..] {
        let other: Vec<f64> = by_config[&s.config].values().map(|v| v.0).collect();
        tests.push(match wilcoxon_signed_rank(&best_dice, &other) {
            Ok(r) => PairwiseTest {
                config: s.config,
                w: Some(r.statistic),
                n_eff: r.n_effective,
                p: Some(r.p_two_sided),
                stars: stars(r.p_two_sided).to_owned(),
                method: Some(r.method),
            },
            Err(EvalError::AllZeroDifferences) => {
                PairwiseTest { config: s.config, w: None, n_eff: 0, p: None, stars: "n/a".to_owned(), method: None }
            }
            Err(e) => return Err(e),
        });
    }
    Ok(CompareReport {
        best,
        configs: summaries,
        tests,
        test: "Wilcoxon signed-rank, two-sided, zero differences excluded, average ranks for ties".to_owned(),
    })
}

impl CompareReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable");
        s.push('\n');
        s
    }

    pub fn test_for(&self, config: SequenceConfig) -> Option<&PairwiseTest> {
        self.tests.iter().find(|t| t.config == config)
    }

    /// Plain-text table of DICE medians and quartiles; a significance column
    /// appears only when there is something to compare against.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let with_tests = !self.tests.is_empty();
        let _ = write!(out, "{:<11} {:>4} {:>8} {:>8} {:>8}", "config", "n", "median", "q1", "q3");
        if with_tests {
            let _ = write!(out, "  vs {}", self.best);
        }
        out.push('\n');
        for s in &self.configs {
            let _ = write!(
                out,
                "{:<11} {:>4} {:>8.4} {:>8.4} {:>8.4}",
                s.config.name(),
                s.n,
                s.dice.median,
                s.dice.q1,
                s.dice.q3
            );
            if with_tests {
                match self.test_for(s.config) {
                    None => out.push_str("  best"),
                    Some(PairwiseTest { p: Some(p), stars, .. }) => {
                        let _ = write!(out, "  p={p:.4} {stars}");
                    }
                    Some(t) => {
                        let _ = write!(out, "  {}", t.stars);
                    }
                }
            }
            out.push('\n');
        }
        out.lines().map(str::trim_end).collect::<Vec<_>>().join("\n") + "\n"
    }

    /// One row of box-plot statistics per configuration.
    pub fn boxplot_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["config", "n", "median", "q1", "q3", "whisker_low", "whisker_high", "outliers"])
            .expect("in-memory write");
        for s in &self.configs {
            let outliers: Vec<String> = s.dice.outliers.iter().map(f64::to_string).collect();
            w.write_record([
                s.config.name().to_owned(),
                s.n.to_string(),
                s.dice.median.to_string(),
                s.dice.q1.to_string(),
                s.dice.q3.to_string(),
                s.dice.whisker_low.to_string(),
                s.dice.whisker_high.to_string(),
                outliers.join(";"),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}
