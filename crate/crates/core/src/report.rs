//! Tabular reports as CSV or versioned JSON.
//!
//! Floats are written with 6 significant digits and columns keep their
//! declared order, so identical inputs give byte-identical files.

use std::path::Path;

use serde_json::{json, Value};

use crate::config::ReportFormat;
use crate::error::{Error, Result};
use crate::simulator::{AblationRow, FilterRow, QualityRow};
use crate::teacher_student::StepReport;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    Empty,
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Self::Str(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Self::Str(s)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Self::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Self::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Self::Float(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Self::Bool(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Self::Empty, Self::Float)
    }
}

/// Rounds to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let r = round_sig6(x);
    if r != 0.0 && (r.abs() < 1e-4 || r.abs() >= 1e15) {
        format!("{r:e}")
    } else {
        format!("{r}")
    }
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Self::Str(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Self::Str(s) => s.clone(),
            Self::Int(v) => v.to_string(),
            Self::Float(v) => fmt_float(*v),
            Self::Bool(b) => b.to_string(),
            Self::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Self::Str(s) => json!(s),
            Self::Int(v) => json!(v),
            Self::Float(v) if v.is_finite() => json!(round_sig6(*v)),
            Self::Float(_) | Self::Empty => Value::Null,
            Self::Bool(b) => json!(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::ShapeMismatch(format!("row of {} cells for {} columns", row.len(), self.columns.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn filtering(rows: &[FilterRow]) -> Self {
        let mut t = Self::new("filtering", &["strategy", "precision", "recall", "kept", "true_positives", "num_gt", "empty"]);
        for r in rows {
            t.rows.push(vec![
                r.strategy.clone().into(),
                r.precision.into(),
                r.recall.into(),
                r.kept.into(),
                r.true_positives.into(),
                r.num_gt.into(),
                r.empty.into(),
            ]);
        }
        t
    }

    pub fn quality(rows: &[QualityRow]) -> Self {
        let mut t = Self::new("assignment_quality", &["k", "num_boxes", "mean_i1", "mean_i2", "frac_i2_ge_i1"]);
        for r in rows {
            t.rows.push(vec![r.k.into(), r.num_boxes.into(), r.mean_i1.into(), r.mean_i2.into(), r.frac_i2_ge_i1.into()]);
        }
        t
    }

    pub fn ablation(rows: &[AblationRow]) -> Self {
        let mut t = Self::new(
            "strategy_ablation",
            &[
                "strategy",
                "num_targets",
                "positives",
                "mean_positives",
                "max_positives",
                "zero_positive_frac",
                "count_cv",
                "mean_positive_iou",
            ],
        );
        for r in rows {
            t.rows.push(vec![
                r.strategy.clone().into(),
                r.num_targets.into(),
                r.positives.into(),
                r.mean_positives.into(),
                r.max_positives.into(),
                r.zero_positive_frac.into(),
                r.count_cv.into(),
                r.mean_positive_iou.into(),
            ]);
        }
        t
    }

    pub fn pipeline(steps: &[StepReport]) -> Self {
        let mut t = Self::new(
            "pipeline",
            &[
                "t",
                "stage",
                "sup_total",
                "unsup_cls",
                "unsup_reg_giou",
                "unsup_reg_l1",
                "consistency",
                "total",
                "pseudo_cls",
                "pseudo_consistency",
                "cls_precision",
                "cls_recall",
                "consistency_precision",
                "consistency_recall",
                "mining_threshold",
                "teacher_student_gap",
            ],
        );
        for s in steps {
            let stage = match s.stage {
                crate::assignment::MatchMode::OneToMany => "one_to_many",
                crate::assignment::MatchMode::OneToOne => "one_to_one",
            };
            t.rows.push(vec![
                s.t.into(),
                stage.into(),
                s.sup.total.into(),
                s.unsup.cls.into(),
                s.unsup.reg_giou.into(),
                s.unsup.reg_l1.into(),
                s.consistency.into(),
                s.total.into(),
                s.pseudo_cls.into(),
                s.pseudo_consistency.into(),
                s.cls_precision.into(),
                s.cls_recall.into(),
                s.consistency_precision.into(),
                s.consistency_recall.into(),
                s.mining_threshold.into(),
                s.teacher_student_gap.into(),
            ]);
        }
        t
    }
}

/// CSV with a header row.
pub fn render_csv(table: &Table) -> String {
    let mut out = table.columns.join(",");
    out.push('\n');
    for row in &table.rows {
        out.push_str(&row.iter().map(Cell::csv).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// JSON document with the schema version, the table and, when given, the
/// effective configuration.
pub fn render_json(table: &Table, config: Option<&Value>) -> String {
    let rows: Vec<Value> = table.rows.iter().map(|r| Value::Array(r.iter().map(Cell::json).collect())).collect();
    let mut doc = serde_json::Map::new();
    doc.insert("schema_version".into(), json!(SCHEMA_VERSION));
    doc.insert("table".into(), json!(table.name));
    doc.insert("columns".into(), json!(table.columns));
    doc.insert("rows".into(), Value::Array(rows));
    if let Some(c) = config {
        doc.insert("config".into(), c.clone());
    }
    let mut s = serde_json::to_string_pretty(&Value::Object(doc)).expect("json values serialize");
    s.push('\n');
    s
}

pub fn render(table: &Table, format: ReportFormat, config: Option<&Value>) -> String {
    match format {
        ReportFormat::Csv => render_csv(table),
        ReportFormat::Json => render_json(table, config),
    }
}

/// Writes `table` to `dir/<name>.<ext>` and returns the path.
pub fn emit_report(
    table: &Table,
    format: ReportFormat,
    dir: impl AsRef<Path>,
    config: Option<&Value>,
) -> Result<std::path::PathBuf> {
    let path = dir.as_ref().join(format!("{}.{}", table.name, format.extension()));
    std::fs::write(&path, render(table, format, config)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_float(0.123456789), "0.123457");
        assert_eq!(fmt_float(1234567.0), "1234570");
        assert_eq!(fmt_float(-2.5), "-2.5");
        assert_eq!(fmt_float(0.0), "0");
        assert_eq!(fmt_float(1e-12), "1e-12");
        assert_eq!(round_sig6(0.0866434), 0.0866434);
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::filtering(&[]);
        assert_eq!(render_csv(&t), "strategy,precision,recall,kept,true_positives,num_gt,empty\n");
    }

    #[test]
    fn csv_quotes_and_order() {
        let mut t = Table::new("x", &["b", "a"]);
        t.push(vec!["p,q".into(), 1.5.into()]).unwrap();
        assert_eq!(render_csv(&t), "b,a\n\"p,q\",1.5\n");
        assert!(t.push(vec![Cell::Empty]).is_err());
    }

    #[test]
    fn json_has_schema_version() {
        let t = Table::quality(&[]);
        let v: Value = serde_json::from_str(&render_json(&t, None)).unwrap();
        assert_eq!(v["schema_version"], json!(SCHEMA_VERSION));
        assert_eq!(v["columns"][0], json!("k"));
    }
}
