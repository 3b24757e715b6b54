// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk formats.
//!
//! A feature stream is JSON Lines: a header object, then one object per
//! processed frame.
//!
//! ```text
//! {"fps":4.0,"frame_count":3,"source":"standup-0412"}
//! {"frame":0,"faces":[{"box":[10,12,90,100],"expression":[0,0,0,0,0,0,1]}]}
//! {"frame":2,"faces":[{"box":[11,12,91,100],"channel":1,"label":"surprise"}]}
//! ```
//!
//! Annotations are CSV with `start_seconds,end_seconds,label` columns.
//! Detected events are written as a JSON array.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::aggregation::GroupEvent;
use crate::detectors::DetectionMethod;
use crate::error::{Error, Result};
use crate::evaluation::{GroundTruthWindow, LabeledMeeting};
use crate::geometry::BoundingBox;
use crate::tracking::{ExpressionLabel, FaceObservation, TrackId, EMBEDDING_DIM, EXPRESSION_DIM};

pub const DEFAULT_FPS: f64 = 4.0;
/// Expression vectors are classifier posteriors and must sum to one.
pub const EXPRESSION_SUM_TOLERANCE: f64 = 1e-6;
/// Detector channels a stream may carry.
pub const MAX_CHANNEL: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub fps: f64,
    pub frame_count: u64,
    pub source: String,
    /// Any other header keys, kept verbatim (backend versions and the like).
    pub extra: BTreeMap<String, Value>,
}

impl Default for StreamMeta {
    fn default() -> Self {
        Self {
            fps: DEFAULT_FPS,
            frame_count: 0,
            source: String::new(),
            extra: BTreeMap::new(),
        }
    }
}

/// A face as reported by one detector backend.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamFace {
    pub channel: u8,
    pub observation: FaceObservation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub faces: Vec<StreamFace>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStream {
    pub meta: StreamMeta,
    pub frames: Vec<FrameRecord>,
}

impl FeatureStream {
    /// Distinct detector channels present anywhere in the stream.
    pub fn channels(&self) -> BTreeSet<u8> {
        self.frames
            .iter()
            .flat_map(|f| f.faces.iter().map(|face| face.channel))
            .collect()
    }

    /// Apply `f` to every embedding and expression vector in place.
    pub fn map_vectors(&mut self, mut f: impl FnMut(&mut Vec<f64>)) {
        for frame in &mut self.frames {
            for face in &mut frame.faces {
                if let Some(v) = face.observation.embedding.as_mut() {
                    f(v);
                }
                if let Some(v) = face.observation.expression.as_mut() {
                    f(v);
                }
            }
        }
    }

    /// The same checks `read_stream` applies, reported against the line each
    /// record would occupy in a written file.
    pub fn validate(&self) -> Result<()> {
        check_meta(&self.meta, 1)?;
        let mut prev: Option<u64> = None;
        for (k, frame) in self.frames.iter().enumerate() {
            let line = k + 2;
            check_frame_index(frame.frame_index, prev, &self.meta, line)?;
            prev = Some(frame.frame_index);
            for (j, face) in frame.faces.iter().enumerate() {
                if face.observation.frame_index != frame.frame_index {
                    return Err(Error::record(
                        line,
                        format!("faces[{j}]"),
                        "observation frame differs from its record",
                    ));
                }
                check_face(face, line, j)?;
            }
        }
        Ok(())
    }
}

fn check_meta(meta: &StreamMeta, line: usize) -> Result<()> {
    if !(meta.fps.is_finite() && meta.fps > 0.0) {
        return Err(Error::record(
            line,
            "fps",
            format!("must be positive, got {}", meta.fps),
        ));
    }
    Ok(())
}

fn check_frame_index(frame: u64, prev: Option<u64>, meta: &StreamMeta, line: usize) -> Result<()> {
    if let Some(p) = prev {
        if frame <= p {
            return Err(Error::record(
                line,
                "frame",
                format!("frames must be strictly increasing, got {frame} after {p}"),
            ));
        }
    }
    if frame >= meta.frame_count {
        return Err(Error::record(
            line,
            "frame",
            format!(
                "{frame} is outside the header's frame_count {}",
                meta.frame_count
            ),
        ));
    }
    Ok(())
}

fn check_face(face: &StreamFace, line: usize, j: usize) -> Result<()> {
    let at = |name: &str| format!("faces[{j}].{name}");
    if face.channel > MAX_CHANNEL {
        return Err(Error::record(
            line,
            at("channel"),
            format!("must be 0 or 1, got {}", face.channel),
        ));
    }
    let obs = &face.observation;
    if !obs.bbox.is_valid() || obs.bbox.x_min < 0.0 || obs.bbox.y_min < 0.0 {
        return Err(Error::record(
            line,
            at("box"),
            "expected non-negative [x_min, y_min, x_max, y_max] with positive area",
        ));
    }
    if let Some(e) = &obs.embedding {
        if e.len() != EMBEDDING_DIM {
            return Err(Error::record(
                line,
                at("embedding"),
                format!("expected {EMBEDDING_DIM} components, got {}", e.len()),
            ));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::record(
                line,
                at("embedding"),
                "components must be finite",
            ));
        }
    }
    if let Some(x) = &obs.expression {
        if x.len() != EXPRESSION_DIM {
            return Err(Error::record(
                line,
                at("expression"),
                format!("expected {EXPRESSION_DIM} components, got {}", x.len()),
            ));
        }
        if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::record(
                line,
                at("expression"),
                "components must be finite and non-negative",
            ));
        }
        let sum: f64 = x.iter().sum();
        if (sum - 1.0).abs() > EXPRESSION_SUM_TOLERANCE {
            return Err(Error::record(
                line,
                at("expression"),
                format!("components must sum to 1, got {sum}"),
            ));
        }
    }
    Ok(())
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<FeatureStream> {
    let path = path.as_ref();
    File::open(path)
        .map_err(Error::from)
        .and_then(|f| parse_stream(BufReader::new(f)))
        .map_err(|e| e.in_file(path))
}

/// Parse and validate a stream. An input with no records at all is a valid
/// empty stream with default metadata.
pub fn parse_stream(reader: impl BufRead) -> Result<FeatureStream> {
    let mut stream: Option<FeatureStream> = None;
    let mut prev: Option<u64> = None;
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| Error::record(line_no, "<record>", format!("malformed JSON: {e}")))?;
        let Value::Object(obj) = value else {
            return Err(Error::record(line_no, "<record>", "expected a JSON object"));
        };
        match stream.as_mut() {
            None => {
                let meta = parse_header(&obj, line_no)?;
                stream = Some(FeatureStream {
                    meta,
                    frames: Vec::new(),
                });
            }
            Some(s) => {
                let record = parse_frame(&obj, line_no)?;
                check_frame_index(record.frame_index, prev, &s.meta, line_no)?;
                for (j, face) in record.faces.iter().enumerate() {
                    check_face(face, line_no, j)?;
                }
                prev = Some(record.frame_index);
                s.frames.push(record);
            }
        }
    }
    Ok(stream.unwrap_or_default())
}

fn parse_header(obj: &Map<String, Value>, line: usize) -> Result<StreamMeta> {
    if obj.contains_key("frame") || obj.contains_key("faces") {
        return Err(Error::record(
            line,
            "fps",
            "stream must start with a header record",
        ));
    }
    let fps = required(obj, "fps", line)?
        .as_f64()
        .ok_or_else(|| Error::record(line, "fps", "expected a number"))?;
    let frame_count = required(obj, "frame_count", line)?
        .as_u64()
        .ok_or_else(|| Error::record(line, "frame_count", "expected a non-negative integer"))?;
    let source = match obj.get("source") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(Error::record(line, "source", "expected a string")),
    };
    let extra = obj
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "fps" | "frame_count" | "source"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let meta = StreamMeta {
        fps,
        frame_count,
        source,
        extra,
    };
    check_meta(&meta, line)?;
    Ok(meta)
}

fn required<'a>(obj: &'a Map<String, Value>, key: &str, line: usize) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::record(line, key, "missing"))
}

fn parse_frame(obj: &Map<String, Value>, line: usize) -> Result<FrameRecord> {
    if let Some(k) = obj
        .keys()
        .find(|k| !matches!(k.as_str(), "frame" | "faces"))
    {
        return Err(Error::record(line, k.as_str(), "unknown field"));
    }
    let frame_index = required(obj, "frame", line)?
        .as_u64()
        .ok_or_else(|| Error::record(line, "frame", "expected a non-negative integer"))?;
    let faces = required(obj, "faces", line)?
        .as_array()
        .ok_or_else(|| Error::record(line, "faces", "expected an array"))?;
    let faces = faces
        .iter()
        .enumerate()
        .map(|(j, v)| parse_face(v, frame_index, line, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameRecord { frame_index, faces })
}

fn parse_face(value: &Value, frame_index: u64, line: usize, j: usize) -> Result<StreamFace> {
    let at = |name: &str| format!("faces[{j}].{name}");
    let obj = value
        .as_object()
        .ok_or_else(|| Error::record(line, format!("faces[{j}]"), "expected an object"))?;
    if let Some(k) = obj.keys().find(|k| {
        !matches!(
            k.as_str(),
            "box" | "channel" | "embedding" | "expression" | "label"
        )
    }) {
        return Err(Error::record(line, at(k), "unknown field"));
    }
    let coords = numbers(
        obj.get("box")
            .ok_or_else(|| Error::record(line, at("box"), "missing"))?,
        line,
        &at("box"),
    )?;
    let bbox = match coords.as_slice() {
        &[x0, y0, x1, y1] => BoundingBox::new(x0, y0, x1, y1)
            .map_err(|e| Error::record(line, at("box"), e.to_string()))?,
        _ => {
            return Err(Error::record(
                line,
                at("box"),
                format!("expected 4 coordinates, got {}", coords.len()),
            ))
        }
    };
    let channel = match obj.get("channel") {
        None | Some(Value::Null) => 0,
        Some(v) => v
            .as_u64()
            .and_then(|c| u8::try_from(c).ok())
            .ok_or_else(|| Error::record(line, at("channel"), "expected 0 or 1"))?,
    };
    let optional_vector = |key: &str| -> Result<Option<Vec<f64>>> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => numbers(v, line, &at(key)).map(Some),
        }
    };
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(ExpressionLabel::from_name(s).ok_or_else(|| {
            Error::record(line, at("label"), format!("unknown expression `{s}`"))
        })?),
        Some(_) => return Err(Error::record(line, at("label"), "expected a string")),
    };
    Ok(StreamFace {
        channel,
        observation: FaceObservation {
            frame_index,
            bbox,
            embedding: optional_vector("embedding")?,
            expression: optional_vector("expression")?,
            expression_label: label,
        },
    })
}

fn numbers(value: &Value, line: usize, field: &str) -> Result<Vec<f64>> {
    let arr = value
        .as_array()
        .ok_or_else(|| Error::record(line, field, "expected an array of numbers"))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_f64()
                .ok_or_else(|| Error::record(line, format!("{field}[{i}]"), "expected a number"))
        })
        .collect()
}

#[derive(Serialize)]
struct WireFace<'a> {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(skip_serializing_if = "is_default_channel")]
    channel: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expression: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<ExpressionLabel>,
}

fn is_default_channel(c: &u8) -> bool {
    *c == 0
}

#[derive(Serialize)]
struct WireFrame<'a> {
    frame: u64,
    faces: Vec<WireFace<'a>>,
}

pub fn write_stream(stream: &FeatureStream, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_stream_to(stream, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_stream_to(stream: &FeatureStream, out: &mut impl Write) -> Result<()> {
    let mut header = Map::new();
    header.insert("fps".into(), Value::from(stream.meta.fps));
    header.insert("frame_count".into(), Value::from(stream.meta.frame_count));
    header.insert("source".into(), Value::from(stream.meta.source.clone()));
    for (k, v) in &stream.meta.extra {
        header.insert(k.clone(), v.clone());
    }
    writeln!(out, "{}", Value::Object(header))?;
    for frame in &stream.frames {
        let wire = WireFrame {
            frame: frame.frame_index,
            faces: frame
                .faces
                .iter()
                .map(|f| {
                    let b = f.observation.bbox;
                    WireFace {
                        bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
                        channel: f.channel,
                        embedding: f.observation.embedding.as_deref(),
                        expression: f.observation.expression.as_deref(),
                        label: f.observation.expression_label,
                    }
                })
                .collect(),
        };
        serde_json::to_writer(&mut *out, &wire).map_err(std::io::Error::from)?;
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AnnotationRow {
    start_seconds: f64,
    end_seconds: f64,
    #[serde(default)]
    label: String,
}

// keeps 0.25 s * 4 fps from landing on 0.9999999 frames
const SECONDS_SLACK: f64 = 1e-9;

/// Frames whose timestamps fall inside `[start, end]` seconds.
pub fn seconds_to_frames(start: f64, end: f64, fps: f64) -> (i64, i64) {
    (
        (start * fps - SECONDS_SLACK).ceil() as i64,
        (end * fps + SECONDS_SLACK).floor() as i64,
    )
}

pub fn read_annotations(
    path: impl AsRef<Path>,
    fps: f64,
    frame_count: u64,
) -> Result<Vec<GroundTruthWindow>> {
    let path = path.as_ref();
    File::open(path)
        .map_err(Error::from)
        .and_then(|f| parse_annotations(f, fps, frame_count))
        .map_err(|e| e.in_file(path))
}

/// Windows reaching past the end of the stream are clipped to it.
pub fn parse_annotations(
    reader: impl Read,
    fps: f64,
    frame_count: u64,
) -> Result<Vec<GroundTruthWindow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<AnnotationRow>() {
        let row = row.map_err(csv_error)?;
        // header is line 1, so data rows start at 2
        let line = out.len() + 2;
        if !(row.start_seconds.is_finite() && row.start_seconds >= 0.0) {
            return Err(Error::record(
                line,
                "start_seconds",
                "must be a non-negative number",
            ));
        }
        if !(row.end_seconds.is_finite() && row.end_seconds >= row.start_seconds) {
            return Err(Error::record(
                line,
                "end_seconds",
                "must not precede start_seconds",
            ));
        }
        let (start, end) = seconds_to_frames(row.start_seconds, row.end_seconds, fps);
        let end = end.min(frame_count as i64 - 1);
        if start > end {
            return Err(Error::record(
                line,
                "end_seconds",
                "window contains no processed frame of the stream",
            ));
        }
        out.push(GroundTruthWindow {
            start_frame: start as u64,
            end_frame: end as u64,
            label: row.label,
        });
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    let field = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.field().map_or_else(
            || "<row>".to_string(),
            |i| {
                ["start_seconds", "end_seconds", "label"]
                    .get(i as usize)
                    .unwrap_or(&"<row>")
                    .to_string()
            },
        ),
        _ => "<row>".to_string(),
    };
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::record(line, field, format!("{kind:?}")),
    }
}

pub fn write_annotations(
    windows: &[GroundTruthWindow],
    fps: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_error)?;
    // explicit, so an event-free meeting still gets a header
    w.write_record(["start_seconds", "end_seconds", "label"])
        .map_err(csv_error)?;
    for win in windows {
        w.serialize(AnnotationRow {
            start_seconds: win.start_frame as f64 / fps,
            end_seconds: win.end_frame as f64 / fps,
            label: win.label.clone(),
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// One detected event in the machine-readable report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub start_frame: u64,
    pub end_frame: u64,
    pub start_seconds: f64,
    pub end_seconds: f64,
    pub participants: Vec<TrackId>,
    pub method: String,
}

pub fn event_records(events: &[GroupEvent], fps: f64, method: DetectionMethod) -> Vec<EventRecord> {
    events
        .iter()
        .map(|e| EventRecord {
            start_frame: e.start_frame,
            end_frame: e.end_frame,
            start_seconds: e.start_frame as f64 / fps,
            end_seconds: e.end_frame as f64 / fps,
            participants: e.participant_ids.iter().copied().collect(),
            method: method.short_name().to_string(),
        })
        .collect()
}

/// Load a labelled dataset: every `<name>.jsonl` stream in `dir` with its
/// `<name>.csv` annotations, in name order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledMeeting>> {
    let dir = dir.as_ref();
    let mut streams = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::from(e).in_file(dir))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "jsonl") {
            streams.push(path);
        }
    }
    streams.sort();
    if streams.is_empty() {
        return Err(Error::invalid_input(format!(
            "no .jsonl streams in {}",
            dir.display()
        )));
    }
    streams
        .into_iter()
        .map(|path| {
            let csv = path.with_extension("csv");
            if !csv.is_file() {
                return Err(
                    Error::invalid_input("stream has no matching .csv annotations").in_file(&path),
                );
            }
            let stream = read_stream(&path)?;
            let truth = read_annotations(&csv, stream.meta.fps, stream.meta.frame_count)?;
            let name = path
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            Ok(LabeledMeeting {
                name,
                stream,
                truth,
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value).map_err(std::io::Error::from)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}
