//! Newline-delimited JSON detections.
//!
//! One object per line:
//!
//! ```json
//! {"image_id": "img_01", "bbox": [12.0, 30.5, 88.0, 140.0], "width": 640, "height": 480, "score": 0.83, "category_id": 2}
//! ```
//!
//! `bbox` is `[x_min, y_min, x_max, y_max]` in pixels; it is divided by the
//! image size on ingestion. Blank lines are ignored. Extra fields are allowed.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::mining::PseudoLabel;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireRecord {
    image_id: String,
    bbox: [f64; 4],
    width: f64,
    height: f64,
    #[serde(default = "default_score")]
    score: f64,
    category_id: i64,
}

fn default_score() -> f64 {
    1.0
}

/// A validated record with its box normalized to the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub line: usize,
    pub image_id: String,
    pub bbox: BBox,
    pub width: f64,
    pub height: f64,
    pub score: f64,
    pub category_id: usize,
}

/// Records of one image, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGroup {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub records: Vec<Record>,
}

impl ImageGroup {
    /// One-hot detections over `num_classes` classes.
    pub fn detections(&self, num_classes: usize) -> Result<Vec<Detection>> {
        self.records.iter().map(|r| Detection::single(r.bbox, r.category_id, r.score, num_classes)).collect()
    }

    pub fn labels(&self) -> Vec<PseudoLabel> {
        self.records.iter().map(|r| PseudoLabel::new(r.bbox, r.category_id, r.score)).collect()
    }
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub groups: Vec<ImageGroup>,
    /// Non-blank lines read.
    pub total: usize,
    /// Rejected records (lenient mode only).
    pub skipped: Vec<Error>,
}

impl Ingested {
    pub fn kept(&self) -> usize {
        self.groups.iter().map(|g| g.records.len()).sum()
    }

    /// One more than the largest category id seen.
    pub fn num_classes(&self) -> usize {
        self.groups.iter().flat_map(|g| &g.records).map(|r| r.category_id + 1).max().unwrap_or(1)
    }

    pub fn group(&self, image_id: &str) -> Option<&ImageGroup> {
        self.groups.iter().find(|g| g.image_id == image_id)
    }
}

fn parse_record(text: &str, line: usize) -> Result<Record> {
    let bad = |message: String| Error::Record { line, message };
    let w: WireRecord = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let nums = [w.bbox[0], w.bbox[1], w.bbox[2], w.bbox[3], w.width, w.height, w.score];
    if nums.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite number".into()));
    }
    if w.width <= 0.0 || w.height <= 0.0 {
        return Err(bad(format!("image size {}x{} must be positive", w.width, w.height)));
    }
    let [x0, y0, x1, y1] = w.bbox;
    if x1 < x0 || y1 < y0 {
        return Err(bad(format!("inverted bbox {:?}", w.bbox)));
    }
    if !(0.0..=1.0).contains(&w.score) {
        return Err(bad(format!("score {} outside [0, 1]", w.score)));
    }
    let category_id = usize::try_from(w.category_id).map_err(|_| bad(format!("negative category_id {}", w.category_id)))?;
    let bbox = BBox::new(x0 / w.width, y0 / w.height, x1 / w.width, y1 / w.height).map_err(|e| bad(e.to_string()))?;
    Ok(Record { line, image_id: w.image_id, bbox, width: w.width, height: w.height, score: w.score, category_id })
}

/// Reads records, grouping them by image in order of first appearance.
/// Strict mode stops at the first bad record; lenient mode skips and counts.
pub fn ingest_reader(reader: impl BufRead, strict: bool) -> Result<Ingested> {
    let mut out = Ingested::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| Error::Record { line: line_no, message: e.to_string() })?;
        if text.trim().is_empty() {
            continue;
        }
        out.total += 1;
        match parse_record(&text, line_no) {
            Ok(r) => match out.groups.iter_mut().find(|g| g.image_id == r.image_id) {
                Some(g) => g.records.push(r),
                None => out.groups.push(ImageGroup {
                    image_id: r.image_id.clone(),
                    width: r.width,
                    height: r.height,
                    records: vec![r],
                }),
            },
            Err(e) if strict => return Err(e),
            Err(e) => out.skipped.push(e),
        }
    }
    Ok(out)
}

pub fn ingest_predictions(path: impl AsRef<Path>, strict: bool) -> Result<Ingested> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file), strict)
}

/// Writes labels back in the wire format, in pixels.
pub fn write_labels(mut w: impl Write, image_id: &str, width: f64, height: f64, labels: &[PseudoLabel]) -> std::io::Result<()> {
    for l in labels {
        let rec = WireRecord {
            image_id: image_id.to_string(),
            bbox: [l.bbox.x_min * width, l.bbox.y_min * height, l.bbox.x_max * width, l.bbox.y_max * height],
            width,
            height,
            score: l.confidence,
            category_id: l.class_id as i64,
        };
        let line = serde_json::to_string(&rec).map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Writes detections as their top class and score, in pixels.
pub fn write_detections(w: impl Write, image_id: &str, width: f64, height: f64, dets: &[Detection]) -> std::io::Result<()> {
    let labels: Vec<PseudoLabel> = dets.iter().map(PseudoLabel::from_detection).collect();
    write_labels(w, image_id, width, height, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"image_id": "a", "bbox": [10, 20, 50, 60], "width": 100, "height": 200, "score": 0.9, "category_id": 1}"#;

    #[test]
    fn one_record() {
        let out = ingest_reader(GOOD.as_bytes(), true).unwrap();
        assert_eq!(out.groups.len(), 1);
        let r = &out.groups[0].records[0];
        assert_eq!(r.bbox, BBox::from_corners(0.1, 0.1, 0.5, 0.3));
        assert_eq!((r.score, r.category_id, r.line), (0.9, 1, 1));
        assert_eq!(out.num_classes(), 2);
    }

    #[test]
    fn inverted_box_rejected() {
        let bad = GOOD.replace("[10, 20, 50, 60]", "[50, 20, 10, 60]");
        let text = format!("{GOOD}\n{bad}\n");
        match ingest_reader(text.as_bytes(), true) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let lenient = ingest_reader(text.as_bytes(), false).unwrap();
        assert_eq!((lenient.kept(), lenient.skipped.len(), lenient.total), (1, 1, 2));
    }

    #[test]
    fn missing_and_non_finite_fields() {
        let missing = r#"{"image_id": "a", "bbox": [1, 2, 3, 4], "width": 10, "height": 10}"#;
        assert!(matches!(ingest_reader(missing.as_bytes(), true), Err(Error::Record { line: 1, .. })));
        let huge = GOOD.replace("\"score\": 0.9", "\"score\": 1e999");
        assert!(ingest_reader(huge.as_bytes(), true).is_err());
    }

    #[test]
    fn interleaved_images_group_in_order() {
        let b = GOOD.replace("\"a\"", "\"b\"");
        let a2 = GOOD.replace("0.9", "0.4");
        let text = format!("{GOOD}\n\n{b}\n{a2}\n");
        let out = ingest_reader(text.as_bytes(), true).unwrap();
        let ids: Vec<&str> = out.groups.iter().map(|g| g.image_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        let scores: Vec<f64> = out.groups[0].records.iter().map(|r| r.score).collect();
        assert_eq!(scores, [0.9, 0.4]);
        assert_eq!(out.groups[0].records[1].line, 4);
    }

    #[test]
    fn write_then_read() {
        let labels = vec![PseudoLabel::new(BBox::from_corners(0.25, 0.5, 0.75, 1.0), 3, 0.5)];
        let mut buf = Vec::new();
        write_labels(&mut buf, "x", 8.0, 4.0, &labels).unwrap();
        let back = ingest_reader(buf.as_slice(), true).unwrap();
        assert_eq!(back.groups[0].labels(), labels);
    }
}
