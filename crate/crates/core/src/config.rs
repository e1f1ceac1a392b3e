//! Run configuration: a TOML file whose sections override the defaults.
//!
//! ```toml
//! [stage]
//! tau_s = 0.5
//!
//! [cost]
//! lambda_l1 = 5.0
//! ```
//!
//! Unknown keys and out-of-range values are rejected with the key path and,
//! when it can be located, the line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{CostWeights, MatchScoreParams};
use crate::error::{Error, Result};
use crate::losses::O2mLossConfig;
use crate::simulator::{AblationSettings, MiningSettings, Scenario};
use crate::teacher_student::{ConsistencySettings, StageConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

/// What `simulate` runs besides the filtering comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    /// Top-k sizes of the assignment-quality analysis.
    pub quality_ks: Vec<usize>,
    /// Training steps to trace; 0 skips the trace.
    pub pipeline_steps: u64,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self { quality_ks: vec![1, 5, 9, 13], pipeline_steps: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSettings {
    pub format: ReportFormat,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub stage: StageConfig,
    pub cost: CostWeights,
    #[serde(rename = "match")]
    pub match_score: MatchScoreParams,
    pub loss: O2mLossConfig,
    pub assign: AblationSettings,
    pub mining: MiningSettings,
    pub consistency: ConsistencySettings,
    pub simulate: SimulateSettings,
    pub output: OutputSettings,
}

impl RunConfig {
    /// Range checks of every section.
    pub fn validate(&self) -> Result<()> {
        let sections: [(&str, Result<()>); 7] = [
            ("scenario", self.scenario.validate()),
            ("stage", self.stage.validate()),
            ("cost", self.cost.validate()),
            ("match", self.match_score.validate()),
            ("loss", validate_loss(&self.loss)),
            ("assign", validate_assign(&self.assign)),
            ("mining", self.mining.validate()),
        ];
        for (section, result) in sections {
            result.map_err(|e| section_error(section, e))?;
        }
        self.consistency.validate().map_err(|e| section_error("consistency", e))?;
        if self.simulate.quality_ks.contains(&0) {
            return Err(config_error("simulate.quality_ks", "every k must be >= 1"));
        }
        Ok(())
    }
}

fn validate_loss(l: &O2mLossConfig) -> Result<()> {
    if !(l.gamma.is_finite() && l.gamma >= 0.0) {
        return Err(Error::param(format!("gamma must be >= 0, got {}", l.gamma)));
    }
    Ok(())
}

fn validate_assign(a: &AblationSettings) -> Result<()> {
    if a.k == 0 || a.atss_candidates == 0 {
        return Err(Error::param("k and atss_candidates must be >= 1"));
    }
    if !(0.0..=1.0).contains(&a.max_iou.pos_thresh) {
        return Err(Error::param(format!("max_iou.pos_thresh {} outside [0, 1]", a.max_iou.pos_thresh)));
    }
    Ok(())
}

fn config_error(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), line: None, message: message.into() }
}

/// Turns a section's validation error into a config error, naming the first
/// field of the section the message mentions.
fn section_error(section: &str, e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        other => {
            let message = other.to_string();
            let fields = toml::Value::try_from(RunConfig::default())
                .ok()
                .and_then(|v| v.get(section).cloned())
                .map(|v| flatten_keys(&v, ""))
                .unwrap_or_default();
            let key = fields
                .iter()
                .filter(|f| message.contains(f.as_str()))
                .max_by_key(|f| f.len())
                .map_or_else(|| section.to_string(), |f| format!("{section}.{f}"));
            Error::Config { key, line: None, message }
        }
    }
}

fn flatten_keys(v: &toml::Value, prefix: &str) -> Vec<String> {
    let mut out = Vec::new();
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.extend(flatten_keys(child, &path));
            out.push(path);
        }
    }
    out
}

/// Table header (`[a.b]` -> `a.b`) of a TOML line, if it is one.
fn header_of(line: &str) -> Option<String> {
    let t = line.trim();
    let inner = t.strip_prefix('[')?.split(']').next()?;
    Some(inner.trim().trim_matches('[').trim().to_string())
}

/// Key path assigned on a TOML line, given the enclosing table.
fn key_of(line: &str, table: &str) -> Option<String> {
    let t = line.trim();
    if t.starts_with('#') || t.starts_with('[') {
        return None;
    }
    let (k, _) = t.split_once('=')?;
    let k: String = k.split('.').map(|p| p.trim().trim_matches('"')).collect::<Vec<_>>().join(".");
    Some(if table.is_empty() { k } else { format!("{table}.{k}") })
}

/// 1-based line at which `key` is set, or its table header.
pub fn locate_key(src: &str, key: &str) -> Option<usize> {
    let mut table = String::new();
    let mut header_line = None;
    for (i, line) in src.lines().enumerate() {
        if let Some(h) = header_of(line) {
            table = h;
            if table == key {
                header_line = Some(i + 1);
            }
            continue;
        }
        if key_of(line, &table).as_deref() == Some(key) {
            return Some(i + 1);
        }
    }
    header_line
}

/// Key path of the assignment on line `line` (1-based).
fn key_at_line(src: &str, line: usize) -> Option<String> {
    let mut table = String::new();
    for (i, l) in src.lines().enumerate() {
        if let Some(h) = header_of(l) {
            table = h;
            if i + 1 == line {
                return Some(table);
            }
            continue;
        }
        if i + 1 == line {
            return key_of(l, &table);
        }
    }
    None
}

/// Parses and validates a configuration text.
pub fn parse_config(src: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(src).map_err(|e| {
        let line = e.span().map(|s| src[..s.start.min(src.len())].matches('\n').count() + 1);
        let key = line.and_then(|l| key_at_line(src, l)).unwrap_or_else(|| "<root>".into());
        Error::Config { key, line, message: e.message().trim().to_string() }
    })?;
    cfg.validate().map_err(|e| match e {
        Error::Config { key, message, .. } => {
            let line = locate_key(src, &key);
            Error::Config { key, line, message }
        }
        other => other,
    })?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&src)
}

/// The complete effective configuration as TOML.
pub fn echo_config(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config types serialize to TOML")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.stage.tau_s, 0.4);
        assert_eq!((cfg.stage.w_u, cfg.stage.w_c, cfg.stage.ema_momentum), (4.0, 1.0, 0.999));
        assert_eq!((cfg.match_score.alpha, cfg.match_score.beta, cfg.loss.gamma), (1.0, 6.0, 2.0));
        assert_eq!(cfg.stage.t1 * 2, cfg.stage.total_iters);
    }

    #[test]
    fn range_error_names_key_and_line() {
        let err = parse_config("# run\n[stage]\ntau_s = 1.5\n").unwrap_err();
        match err {
            Error::Config { key, line, .. } => {
                assert_eq!(key, "stage.tau_s");
                assert_eq!(line, Some(3));
            }
            other => panic!("{other:?}"),
        }
        match parse_config("[cost]\nfocal_alpha = 1.5\n").unwrap_err() {
            Error::Config { key, line, .. } => assert_eq!((key.as_str(), line), ("cost.focal_alpha", Some(2))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        match parse_config("[cost]\nlambda_l1 = 5.0\nlambda_xx = 1.0\n").unwrap_err() {
            Error::Config { key, line, message } => {
                assert_eq!(key, "cost.lambda_xx");
                assert_eq!(line, Some(3));
                assert!(message.contains("lambda_xx"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_config("[nope]\n"), Err(Error::Config { .. })));
        assert!(matches!(parse_config("[stage]\nbogus = 1\n"), Err(Error::Config { .. })));
    }

    #[test]
    fn malformed_file() {
        assert!(matches!(parse_config("[stage\ntau_s = "), Err(Error::Config { .. })));
    }

    #[test]
    fn nested_override_is_echoed() {
        let cfg = parse_config("cost.lambda_l1 = 7.5\n[stage]\ntotal_iters = 1000\n").unwrap();
        assert_eq!(cfg.cost.lambda_l1, 7.5);
        assert_eq!(cfg.stage.t1, 500);
        let echo = echo_config(&cfg);
        assert!(echo.contains("lambda_l1 = 7.5"), "{echo}");
        assert_eq!(parse_config(&echo).unwrap(), cfg);
    }

    #[test]
    fn echo_round_trip_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(parse_config(&echo_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn locate_dotted_and_nested() {
        let src = "[scenario]\nseed = 3\n[scenario.noise]\nfeature_noise = 0.1\n";
        assert_eq!(locate_key(src, "scenario.seed"), Some(2));
        assert_eq!(locate_key(src, "scenario.noise.feature_noise"), Some(4));
        assert_eq!(locate_key(src, "scenario.noise"), Some(3));
    }
}
