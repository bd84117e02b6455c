//! JSONL datasets, detection and prediction files, and portable pixmaps.
//!
//! A dataset file starts with one manifest record followed by one record per
//! frame. Keys are emitted in sorted order and every float is rounded to 9
//! significant digits, so identical inputs produce identical bytes and a
//! read-then-write cycle reproduces the file exactly. Rasters live next to
//! the dataset in `<stem>_rasters/<frame id>.ppm` and are referenced by
//! relative path.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::augment::Raster;
use crate::geometry::{CameraIntrinsics, Dimensions3};
use crate::spl::{Annotation, CameraView, Detection2D, Frame};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: u32,
    pub name: String,
    pub prior: Dimensions3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub operation: String,
    pub parameters: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub frame_count: usize,
    pub categories: Vec<CategoryEntry>,
    #[serde(default)]
    pub provenance: Vec<ProvenanceEntry>,
}

impl DatasetManifest {
    pub fn new(categories: Vec<CategoryEntry>) -> Self {
        Self { schema_version: SCHEMA_VERSION, frame_count: 0, categories, provenance: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(PipelineError::SchemaMismatch { found: self.schema_version, supported: SCHEMA_VERSION });
        }
        for (i, c) in self.categories.iter().enumerate() {
            if c.id as usize != i {
                return Err(PipelineError::Invalid(format!("category ids must be dense from 0; entry {i} has id {}", c.id)));
            }
        }
        Ok(())
    }

    pub fn push_provenance(&mut self, operation: &str, parameters: Value, seed: Option<u64>) {
        self.provenance.push(ProvenanceEntry { operation: operation.to_string(), parameters, seed });
    }
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    kind: String,
    id: String,
    intrinsics: CameraIntrinsics,
    #[serde(default)]
    view: CameraView,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raster: Option<String>,
    annotations: Vec<Annotation>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    kind: String,
    #[serde(flatten)]
    manifest: DatasetManifest,
}

/// `v` rounded to 9 significant digits.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round_sig9(n.as_f64().expect("f64 number"));
            *v = serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number);
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// One canonical JSON line: sorted keys, floats at 9 significant digits.
pub fn canonical_line<T: Serialize>(value: &T) -> Result<String, PipelineError> {
    let mut v = serde_json::to_value(value).map_err(|e| PipelineError::Invalid(e.to_string()))?;
    round_floats(&mut v);
    Ok(serde_json::to_string(&v).expect("values serialize"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    for l in lines {
        writeln!(w, "{l}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn raster_dir_name(path: &Path) -> String {
    let stem = path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
    format!("{stem}_rasters")
}

fn check_frame_id(id: &str) -> Result<(), PipelineError> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Invalid(format!("frame id {id:?} must be non-empty ASCII letters, digits, '-', '_' or '.'")))
    }
}

/// Writes the manifest and frames; `manifest.frame_count` is set from
/// `frames`.
pub fn write_dataset(frames: &[Frame], manifest: &DatasetManifest, path: &Path) -> Result<(), PipelineError> {
    let mut manifest = manifest.clone();
    manifest.frame_count = frames.len();
    manifest.validate()?;
    let base = path.parent().unwrap_or(Path::new(""));
    let raster_dir = raster_dir_name(path);
    let mut lines = vec![canonical_line(&ManifestRecord { kind: "manifest".into(), manifest })?];
    for f in frames {
        check_frame_id(&f.id)?;
        let raster = match &f.raster {
            Some(r) => {
                let rel = format!("{raster_dir}/{}.ppm", f.id);
                write_ppm16(&base.join(&rel), r)?;
                Some(rel)
            }
            None => None,
        };
        let rec = FrameRecord {
            kind: "frame".into(),
            id: f.id.clone(),
            intrinsics: f.intrinsics,
            view: f.view,
            raster,
            annotations: f.annotations.clone(),
        };
        lines.push(canonical_line(&rec)?);
    }
    write_lines(path, &lines)
}

fn read_lines(path: &Path) -> Result<Vec<String>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io_err(path))
}

fn malformed(path: &Path, line: usize, message: impl std::fmt::Display) -> PipelineError {
    PipelineError::MalformedRecord { path: path.to_path_buf(), line, message: message.to_string() }
}

pub fn read_dataset(path: &Path) -> Result<(Vec<Frame>, DatasetManifest), PipelineError> {
    let lines = read_lines(path)?;
    let Some(first) = lines.first() else {
        return Err(malformed(path, 1, "missing manifest record"));
    };
    // Check the version before the full shape, so that a future schema is
    // reported as such rather than as a parse failure.
    let head: Value = serde_json::from_str(first).map_err(|e| malformed(path, 1, e))?;
    if head.get("kind").and_then(Value::as_str) != Some("manifest") {
        return Err(malformed(path, 1, "first record must have kind \"manifest\""));
    }
    match head.get("schema_version").and_then(Value::as_u64) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(PipelineError::SchemaMismatch { found: v as u32, supported: SCHEMA_VERSION }),
        None => return Err(malformed(path, 1, "manifest lacks schema_version")),
    }
    let manifest: ManifestRecord = serde_json::from_value(head).map_err(|e| malformed(path, 1, e))?;
    let manifest = manifest.manifest;
    manifest.validate()?;

    let base = path.parent().unwrap_or(Path::new(""));
    let mut frames = Vec::with_capacity(manifest.frame_count);
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(line).map_err(|e| malformed(path, i + 1, e))?;
        if rec.kind != "frame" {
            return Err(malformed(path, i + 1, format!("unexpected record kind {:?}", rec.kind)));
        }
        let raster = match &rec.raster {
            Some(rel) => {
                let p = base.join(rel);
                if !p.is_file() {
                    return Err(PipelineError::MissingRaster { frame: rec.id.clone(), path: p });
                }
                Some(read_ppm(&p)?)
            }
            None => None,
        };
        frames.push(Frame { id: rec.id, intrinsics: rec.intrinsics, view: rec.view, raster, annotations: rec.annotations });
    }
    if frames.len() != manifest.frame_count {
        return Err(PipelineError::Invalid(format!(
            "{}: manifest declares {} frames but {} were read",
            path.display(),
            manifest.frame_count,
            frames.len()
        )));
    }
    Ok((frames, manifest))
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    frame_id: String,
    detections: Vec<Detection2D>,
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    frame_id: String,
    predictions: Vec<Annotation>,
}

pub fn write_detections(path: &Path, per_frame: &[(String, Vec<Detection2D>)]) -> Result<(), PipelineError> {
    let lines = per_frame
        .iter()
        .map(|(id, d)| canonical_line(&DetectionRecord { frame_id: id.clone(), detections: d.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    write_lines(path, &lines)
}

pub fn write_predictions(path: &Path, per_frame: &[(String, Vec<Annotation>)]) -> Result<(), PipelineError> {
    let lines = per_frame
        .iter()
        .map(|(id, p)| canonical_line(&PredictionRecord { frame_id: id.clone(), predictions: p.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    write_lines(path, &lines)
}

fn read_keyed<T, R>(path: &Path, take: impl Fn(R) -> (String, Vec<T>)) -> Result<BTreeMap<String, Vec<T>>, PipelineError>
where
    R: for<'de> Deserialize<'de>,
{
    let mut out = BTreeMap::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: R = serde_json::from_str(line).map_err(|e| malformed(path, i + 1, e))?;
        let (id, items) = take(rec);
        if out.insert(id.clone(), items).is_some() {
            return Err(malformed(path, i + 1, format!("duplicate record for frame {id}")));
        }
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<BTreeMap<String, Vec<Detection2D>>, PipelineError> {
    read_keyed(path, |r: DetectionRecord| (r.frame_id, r.detections))
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, Vec<Annotation>>, PipelineError> {
    read_keyed(path, |r: PredictionRecord| (r.frame_id, r.predictions))
}

/// Lines up per-frame records with `frames`; frames without a record get
/// an empty list and records naming unknown frames are rejected.
pub fn align_to_frames<T: Clone>(
    frames: &[Frame],
    mut records: BTreeMap<String, Vec<T>>,
    source: &Path,
) -> Result<Vec<Vec<T>>, PipelineError> {
    let out = frames.iter().map(|f| records.remove(&f.id).unwrap_or_default()).collect();
    if let Some(id) = records.keys().next() {
        return Err(PipelineError::UnknownFrame { frame: id.clone(), path: source.to_path_buf() });
    }
    Ok(out)
}

/// Binary 16-bit PPM (`P6`, maxval 65535, big-endian samples).
pub fn write_ppm16(path: &Path, r: &Raster) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    let mut bytes = format!("P6\n{} {}\n65535\n", r.width, r.height).into_bytes();
    bytes.reserve(r.values.len() * 6);
    for px in &r.values {
        for &c in px {
            let q = (c.clamp(0.0, 1.0) * 65535.0).round() as u16;
            bytes.extend_from_slice(&q.to_be_bytes());
        }
    }
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Binary 8-bit PPM from rows of RGB bytes.
pub fn write_ppm8(path: &Path, width: u32, height: u32, rgb: &[[u8; 3]]) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    write!(w, "P6\n{width} {height}\n255\n").map_err(io_err(path))?;
    let flat: Vec<u8> = rgb.iter().flatten().copied().collect();
    w.write_all(&flat).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn ppm_header_token(data: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&data[start..*pos]).into_owned())
}

/// Reads binary PPM with maxval up to 65535 into unit-range floats.
pub fn read_ppm(path: &Path) -> Result<Raster, PipelineError> {
    let mut data = Vec::new();
    File::open(path).map_err(io_err(path))?.read_to_end(&mut data).map_err(io_err(path))?;
    let bad = |m: &str| PipelineError::BadPixmap { path: PathBuf::from(path), message: m.to_string() };
    let mut pos = 0;
    if ppm_header_token(&data, &mut pos).as_deref() != Some("P6") {
        return Err(bad("not a binary P6 pixmap"));
    }
    let mut num = || ppm_header_token(&data, &mut pos).and_then(|t| t.parse::<u32>().ok());
    let (width, height, maxval) = match (num(), num(), num()) {
        (Some(w), Some(h), Some(m)) if w > 0 && h > 0 && (1..=65535).contains(&m) => (w, h, m),
        _ => return Err(bad("malformed header")),
    };
    pos += 1;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let n = width as usize * height as usize;
    let body = data.get(pos..pos + n * 3 * bytes_per).ok_or_else(|| bad("truncated pixel data"))?;
    let sample = |i: usize| -> f32 {
        let v = if bytes_per == 2 { u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as u32 } else { body[i] as u32 };
        v as f32 / maxval as f32
    };
    let values = (0..n).map(|p| [sample(3 * p), sample(3 * p + 1), sample(3 * p + 2)]).collect();
    Ok(Raster { width, height, values })
}
