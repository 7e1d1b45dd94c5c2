//! File formats: MOTChallenge CSV, binary tensor dumps, run configuration
//! and the small subset of COCO JSON needed for detection scoring.
//!
//! Tensor dump layout, all integers little-endian:
//!
//! ```text
//! "TNSR" | version u8 (=1) | dtype u8 (0 = i32, 1 = f32) | ndim u8
//!        | ndim x u32 dims | product(dims) x 4-byte values
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{DecodeError, HeadMap};
use crate::geometry::BoundingBox;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },
    #[error("not a tensor dump (bad magic)")]
    BadMagic,
    #[error("unsupported tensor dump version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown tensor dtype {0}")]
    UnknownDtype(u8),
    #[error("tensor dump truncated: need {expected} bytes, have {found}")]
    Truncated { expected: usize, found: usize },
    #[error("tensor dump has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("tensor shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(String),
}

impl IoError {
    fn file(path: &Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.display().to_string(),
            source,
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|e| IoError::file(path, e))
}

/// One line of a MOTChallenge file. Detections use id -1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MotRow {
    pub frame: u64,
    pub id: i64,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub conf: f64,
}

impl MotRow {
    pub fn from_box(frame: u64, id: i64, b: &BoundingBox) -> Self {
        Self {
            frame,
            id,
            left: b.x_min,
            top: b.y_min,
            width: b.width(),
            height: b.height(),
            conf: b.score,
        }
    }

    /// Corner-form box. The confidence is clamped into `[0, 1]` because
    /// detection files carry raw detector scores.
    pub fn to_box(&self) -> BoundingBox {
        BoundingBox::new(self.left, self.top, self.left + self.width, self.top + self.height)
            .with_score(self.conf.clamp(0.0, 1.0))
    }
}

fn parse_row(line: &str, lineno: usize) -> Result<MotRow, IoError> {
    let err = |message: String| IoError::Row {
        line: lineno,
        message,
    };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if !(7..=10).contains(&fields.len()) {
        return Err(err(format!("expected 7 to 10 columns, found {}", fields.len())));
    }
    let num = |i: usize| -> Result<f64, IoError> {
        let v: f64 = fields[i]
            .parse()
            .map_err(|_| err(format!("column {}: not a number: {:?}", i + 1, fields[i])))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(err(format!("column {}: not finite", i + 1)))
        }
    };
    let int = |i: usize| -> Result<i64, IoError> {
        let v = num(i)?;
        if v.fract() != 0.0 {
            return Err(err(format!("column {}: not an integer: {}", i + 1, fields[i])));
        }
        Ok(v as i64)
    };
    let frame = int(0)?;
    if frame < 1 {
        return Err(err(format!("frame {frame} must be >= 1")));
    }
    let row = MotRow {
        frame: frame as u64,
        id: int(1)?,
        left: num(2)?,
        top: num(3)?,
        width: num(4)?,
        height: num(5)?,
        conf: num(6)?,
    };
    if row.width <= 0.0 || row.height <= 0.0 {
        return Err(err(format!(
            "box size {}x{} must be positive",
            row.width, row.height
        )));
    }
    Ok(row)
}

pub fn parse_mot(text: &str) -> Result<Vec<MotRow>, IoError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_row(l, i + 1))
        .collect()
}

pub fn read_mot(path: &Path) -> Result<Vec<MotRow>, IoError> {
    parse_mot(&read_text(path)?)
}

/// Rows sorted by `(frame, id)`, one per line, trailing columns `-1`.
pub fn format_mot(rows: &[MotRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| (r.frame, r.id));
    let mut out = String::new();
    for r in &sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},-1,-1,-1",
            r.frame, r.id, r.left, r.top, r.width, r.height, r.conf
        );
    }
    out
}

pub fn write_mot(rows: &[MotRow], path: &Path) -> Result<(), IoError> {
    write_bytes(path, format_mot(rows).as_bytes())
}

/// Rows grouped by frame; frames without rows are absent.
pub fn group_by_frame(rows: &[MotRow]) -> BTreeMap<u64, Vec<MotRow>> {
    let mut frames: BTreeMap<u64, Vec<MotRow>> = BTreeMap::new();
    for r in rows {
        frames.entry(r.frame).or_default().push(*r);
    }
    frames
}

/// Rows of one frame as `(id, box)` pairs for scoring. Negative ids are
/// rejected because tracks and ground-truth objects must be identified.
pub fn identified(rows: &[MotRow]) -> Result<Vec<(u64, BoundingBox)>, IoError> {
    rows.iter()
        .map(|r| {
            u64::try_from(r.id)
                .map(|id| (id, r.to_box()))
                .map_err(|_| IoError::Row {
                    line: 0,
                    message: format!("frame {}: id {} is not a track id", r.frame, r.id),
                })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    I32(Vec<i32>),
    F32(Vec<f32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::I32(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::I32(_) => 0,
            TensorData::F32(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Self, IoError> {
        if dims.len() > usize::from(u8::MAX) {
            return Err(IoError::Shape(format!("{} dims exceed 255", dims.len())));
        }
        let n = element_count(&dims)?;
        if n != data.len() {
            return Err(IoError::Shape(format!(
                "dims {:?} hold {n} values, data has {}",
                dims,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// `[channels][height][width]` f32 tensor as a detector head map.
    pub fn to_head_map(&self, stride: u32) -> Result<HeadMap, IoError> {
        let [c, h, w] = self.dims[..] else {
            return Err(IoError::Shape(format!("head map needs 3 dims, got {:?}", self.dims)));
        };
        let data = match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::I32(v) => v.iter().map(|&x| x as f32).collect(),
        };
        HeadMap::new(stride, c as usize, h as usize, w as usize, data)
            .map_err(|e: DecodeError| IoError::Shape(e.to_string()))
    }

    pub fn from_head_map(m: &HeadMap) -> Self {
        Self {
            dims: vec![m.channels as u32, m.height as u32, m.width as u32],
            data: TensorData::F32(m.data.clone()),
        }
    }
}

fn element_count(dims: &[u32]) -> Result<usize, IoError> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize)
            .ok_or_else(|| IoError::Shape(format!("dims {dims:?} overflow")))
    })
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(t.data.dtype());
    out.push(t.dims.len() as u8);
    for d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &t.data {
        TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

fn need(bytes: &[u8], expected: usize) -> Result<(), IoError> {
    if bytes.len() < expected {
        Err(IoError::Truncated {
            expected,
            found: bytes.len(),
        })
    } else {
        Ok(())
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, IoError> {
    need(bytes, 4)?;
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(IoError::BadMagic);
    }
    need(bytes, 7)?;
    if bytes[4] != TENSOR_VERSION {
        return Err(IoError::UnsupportedVersion(bytes[4]));
    }
    let dtype = bytes[5];
    if dtype > 1 {
        return Err(IoError::UnknownDtype(dtype));
    }
    let ndim = usize::from(bytes[6]);
    let header = 7 + 4 * ndim;
    need(bytes, header)?;
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().expect("4 bytes") };
    let dims: Vec<u32> = (0..ndim).map(|i| u32::from_le_bytes(word(7 + 4 * i))).collect();
    let n = element_count(&dims)?;
    let total = n
        .checked_mul(4)
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| IoError::Shape(format!("dims {dims:?} overflow")))?;
    need(bytes, total)?;
    if bytes.len() > total {
        return Err(IoError::TrailingBytes(bytes.len() - total));
    }
    let words = (0..n).map(|i| word(header + 4 * i));
    let data = if dtype == 0 {
        TensorData::I32(words.map(i32::from_le_bytes).collect())
    } else {
        TensorData::F32(words.map(f32::from_le_bytes).collect())
    };
    Ok(Tensor { dims, data })
}

pub fn read_tensor(path: &Path) -> Result<Tensor, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::file(path, e))?;
    decode_tensor(&bytes)
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<(), IoError> {
    write_bytes(path, &encode_tensor(t))
}

/// Run parameters read from a TOML file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub iou_min: f64,
    pub max_age: u32,
    pub min_hits: u32,
    pub mot_gate: f64,
    pub emit_warmup: bool,
    pub class_aware_nms: bool,
    /// Keep only these classes; empty keeps all.
    pub classes: Vec<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.25,
            nms_iou: 0.45,
            iou_min: 0.3,
            max_age: 1,
            min_hits: 3,
            mot_gate: 0.5,
            emit_warmup: true,
            class_aware_nms: true,
            classes: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, IoError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| IoError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_toml(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(IoError::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("score_thresh", self.score_thresh)?;
        unit("nms_iou", self.nms_iou)?;
        unit("iou_min", self.iou_min)?;
        unit("mot_gate", self.mot_gate)?;
        if self.mot_gate == 0.0 {
            return Err(IoError::Config("mot_gate must be positive".into()));
        }
        if self.max_age == 0 || self.min_hits == 0 {
            return Err(IoError::Config("max_age and min_hits must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sort_config(&self) -> crate::tracker::SortConfig {
        crate::tracker::SortConfig {
            max_age: self.max_age,
            min_hits: self.min_hits,
            iou_min: self.iou_min,
            emit_warmup: self.emit_warmup,
            ..Default::default()
        }
    }

    pub fn keeps_class(&self, class_id: u32) -> bool {
        self.classes.is_empty() || self.classes.contains(&class_id)
    }
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    bbox: [f64; 4],
    category_id: u32,
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct CocoGtFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

/// Ground truth as boxes per image, images ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoGt {
    pub image_ids: Vec<u64>,
    pub boxes: Vec<Vec<BoundingBox>>,
}

fn coco_box(a: &CocoAnnotation) -> Result<BoundingBox, IoError> {
    let [x, y, w, h] = a.bbox;
    if !(w > 0.0 && h > 0.0) || !a.bbox.iter().all(|v| v.is_finite()) {
        return Err(IoError::Json(format!("image {}: invalid bbox {:?}", a.image_id, a.bbox)));
    }
    Ok(BoundingBox::new(x, y, x + w, y + h).with_class(a.category_id))
}

/// `{"images": [{"id": ..}], "annotations": [{"image_id", "bbox": [x, y, w, h], "category_id"}]}`.
/// Images only mentioned by annotations are included too.
pub fn parse_coco_gt(text: &str) -> Result<CocoGt, IoError> {
    let file: CocoGtFile = serde_json::from_str(text).map_err(|e| IoError::Json(e.to_string()))?;
    let mut by_image: BTreeMap<u64, Vec<BoundingBox>> =
        file.images.iter().map(|i| (i.id, Vec::new())).collect();
    for a in &file.annotations {
        by_image.entry(a.image_id).or_default().push(coco_box(a)?);
    }
    Ok(CocoGt {
        image_ids: by_image.keys().copied().collect(),
        boxes: by_image.into_values().collect(),
    })
}

/// COCO results list `[{"image_id", "bbox", "category_id", "score"}]`,
/// aligned with `gt.image_ids`.
pub fn parse_coco_dets(text: &str, gt: &CocoGt) -> Result<Vec<Vec<BoundingBox>>, IoError> {
    let dets: Vec<CocoAnnotation> = serde_json::from_str(text).map_err(|e| IoError::Json(e.to_string()))?;
    let index: HashMap<u64, usize> = gt.image_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut out = vec![Vec::new(); gt.image_ids.len()];
    for d in &dets {
        let Some(&i) = index.get(&d.image_id) else {
            return Err(IoError::Json(format!("detection for unknown image {}", d.image_id)));
        };
        let score = d
            .score
            .ok_or_else(|| IoError::Json(format!("image {}: detection without score", d.image_id)))?;
        out[i].push(coco_box(d)?.with_score(score));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_reference_row() {
        let rows = parse_mot("1,2,10,20,30,40,1,-1,-1,-1\n").unwrap();
        assert_eq!(rows.len(), 1);
        let r = rows[0];
        assert_eq!((r.frame, r.id), (1, 2));
        let b = r.to_box();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (10.0, 20.0, 40.0, 60.0));
    }

    #[test]
    fn bad_rows_name_their_line() {
        let text = "1,1,0,0,5,5,1,-1,-1,-1\n\n1,2,0,0,0,5,1,-1,-1,-1\n";
        match parse_mot(text) {
            Err(IoError::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_mot("0,1,0,0,5,5,1"), Err(IoError::Row { line: 1, .. })));
        assert!(matches!(parse_mot("1,1,0,0,5"), Err(IoError::Row { line: 1, .. })));
        assert!(matches!(parse_mot("1,x,0,0,5,5,1"), Err(IoError::Row { line: 1, .. })));
        assert!(matches!(parse_mot("1.5,1,0,0,5,5,1"), Err(IoError::Row { line: 1, .. })));
    }

    #[test]
    fn writer_sorts_and_is_deterministic() {
        let rows = vec![
            MotRow { frame: 2, id: 1, left: 0.0, top: 0.0, width: 1.0, height: 1.0, conf: 1.0 },
            MotRow { frame: 1, id: 3, left: 0.5, top: 0.0, width: 1.0, height: 1.0, conf: 0.25 },
            MotRow { frame: 1, id: 2, left: 0.0, top: 0.0, width: 1.0, height: 1.0, conf: 1.0 },
        ];
        let text = format_mot(&rows);
        assert_eq!(
            text,
            "1,2,0,0,1,1,1,-1,-1,-1\n1,3,0.5,0,1,1,0.25,-1,-1,-1\n2,1,0,0,1,1,1,-1,-1,-1\n"
        );
        assert_eq!(format_mot(&parse_mot(&text).unwrap()), text);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("res.txt");
        let rows = vec![MotRow { frame: 3, id: 9, left: 1.25, top: 2.0, width: 3.0, height: 4.5, conf: 0.5 }];
        write_mot(&rows, &p).unwrap();
        assert_eq!(read_mot(&p).unwrap(), rows);
        assert!(matches!(read_mot(&dir.path().join("missing.txt")), Err(IoError::File { .. })));
    }

    #[test]
    fn tensor_round_trips() {
        let t = Tensor::new(vec![1], TensorData::I32(vec![0])).unwrap();
        assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);

        let n = 84 * 24 * 40;
        let vals: Vec<f32> = (0..n).map(|i| ((i * 7919) % 1000) as f32 * 0.37 - 150.0).collect();
        let t = Tensor::new(vec![84, 24, 40], TensorData::F32(vals)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tnsr");
        write_tensor(&t, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_tensor(&back), bytes);
        assert_eq!(bytes.len(), 7 + 12 + 4 * n);
    }

    #[test]
    fn tensor_errors_are_distinct() {
        let t = Tensor::new(vec![2, 3], TensorData::I32(vec![1, 2, 3, 4, 5, 6])).unwrap();
        let bytes = encode_tensor(&t);
        assert!(matches!(decode_tensor(&bytes[..bytes.len() - 1]), Err(IoError::Truncated { .. })));
        assert!(matches!(decode_tensor(&bytes[..9]), Err(IoError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(IoError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_tensor(&bad), Err(IoError::UnsupportedVersion(2))));
        let mut bad = bytes.clone();
        bad[5] = 7;
        assert!(matches!(decode_tensor(&bad), Err(IoError::UnknownDtype(7))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_tensor(&long), Err(IoError::TrailingBytes(1))));
        assert!(Tensor::new(vec![2, 2], TensorData::I32(vec![1])).is_err());
    }

    #[test]
    fn head_map_conversion() {
        let t = Tensor::new(vec![5, 1, 2], TensorData::F32(vec![0.0; 10])).unwrap();
        let m = t.to_head_map(8).unwrap();
        assert_eq!((m.channels, m.height, m.width, m.stride), (5, 1, 2, 8));
        assert_eq!(Tensor::from_head_map(&m), t);
        assert!(Tensor::new(vec![10], TensorData::F32(vec![0.0; 10])).unwrap().to_head_map(8).is_err());
    }

    #[test]
    fn run_config_keys() {
        let cfg = RunConfig::from_toml("score_thresh = 0.4\nmin_hits = 2\n").unwrap();
        assert_eq!(cfg.score_thresh, 0.4);
        assert_eq!(cfg.min_hits, 2);
        assert_eq!(cfg.nms_iou, 0.45);
        assert!(matches!(RunConfig::from_toml("scoer_thresh = 0.4"), Err(IoError::Config(_))));
        assert!(matches!(RunConfig::from_toml("nms_iou = 1.5"), Err(IoError::Config(_))));
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn coco_subset() {
        let gt = parse_coco_gt(
            r#"{"images": [{"id": 2}, {"id": 1}],
                "annotations": [{"image_id": 1, "bbox": [0, 0, 10, 10], "category_id": 3}]}"#,
        )
        .unwrap();
        assert_eq!(gt.image_ids, vec![1, 2]);
        assert_eq!(gt.boxes[0][0].class_id, 3);
        assert!(gt.boxes[1].is_empty());
        let dets = parse_coco_dets(
            r#"[{"image_id": 1, "bbox": [0, 0, 10, 10], "category_id": 3, "score": 0.9}]"#,
            &gt,
        )
        .unwrap();
        assert_eq!(dets[0][0].score, 0.9);
        assert!(parse_coco_dets(r#"[{"image_id": 5, "bbox": [0,0,1,1], "category_id": 1, "score": 1}]"#, &gt).is_err());
        assert!(parse_coco_dets(r#"[{"image_id": 1, "bbox": [0,0,1,1], "category_id": 1}]"#, &gt).is_err());
    }

    fn row() -> impl Strategy<Value = MotRow> {
        (1u64..50, -1i64..20, -100.0..1000.0f64, -100.0..1000.0f64, 0.5..300.0f64, 0.5..300.0f64, 0.0..=1.0f64)
            .prop_map(|(frame, id, left, top, width, height, conf)| MotRow { frame, id, left, top, width, height, conf })
    }

    proptest! {
        #[test]
        fn mot_text_round_trip(rows in proptest::collection::vec(row(), 0..30)) {
            let text = format_mot(&rows);
            let back = parse_mot(&text).unwrap();
            prop_assert_eq!(format_mot(&back), text);
            let mut sorted = rows.clone();
            sorted.sort_by_key(|r| (r.frame, r.id));
            prop_assert_eq!(back, sorted);
        }
    }
}
