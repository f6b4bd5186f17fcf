//! File formats: ASCII XYZ and PLY clouds, the binary `DFRC` dataset
//! archive, `DFCK` checkpoints and plain-text feature dumps.
//!
//! Every writer goes through [`write_atomic`], which writes a temporary file
//! in the destination directory and renames it into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::network::{Layers, ModelParams, NetworkConfig};
use crate::optim::{Adam, AdamConfig};
use crate::train::{BestCheckpoint, EpochReport, TrainConfig, TrainState};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"DFRC";
pub const ARCHIVE_VERSION: u16 = 1;
/// Header flag: every sample carries per-point labels.
pub const FLAG_POINT_LABELS: u32 = 1;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const CHECKPOINT_END: &[u8; 4] = b"KCFD";

/// Writes `bytes` to `path` through a temporary sibling file and a rename,
/// so readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// A cloud read from disk with its optional per-point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCloud {
    pub cloud: PointCloud,
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
    Archive,
}

impl CloudFormat {
    /// Guesses the format from the file extension; anything unknown is XYZ.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ply") => CloudFormat::Ply,
            Some("dfrc") => CloudFormat::Archive,
            _ => CloudFormat::Xyz,
        }
    }
}

/// Loads a single cloud. Archives must hold exactly one sample.
pub fn load_cloud(path: &Path) -> Result<LoadedCloud> {
    match CloudFormat::from_path(path) {
        CloudFormat::Xyz => parse_xyz(&fs::read_to_string(path)?, path),
        CloudFormat::Ply => parse_ply(&fs::read_to_string(path)?, path),
        CloudFormat::Archive => {
            let mut archive = load_archive(path)?;
            if archive.samples.len() != 1 {
                return Err(Error::Format(format!(
                    "{} holds {} samples; expected exactly one",
                    path.display(),
                    archive.samples.len()
                )));
            }
            let s = archive.samples.remove(0);
            Ok(LoadedCloud {
                cloud: s.cloud,
                labels: s.point_labels,
            })
        }
    }
}

/// Saves a cloud in the format implied by the extension.
pub fn save_cloud(path: &Path, cloud: &PointCloud, labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != cloud.len() {
            return Err(Error::DimensionMismatch {
                what: "point labels",
                expected: cloud.len(),
                found: l.len(),
            });
        }
    }
    match CloudFormat::from_path(path) {
        CloudFormat::Xyz => write_atomic(path, format_xyz(cloud, labels).as_bytes()),
        CloudFormat::Ply => write_atomic(path, format_ply(cloud, labels).as_bytes()),
        CloudFormat::Archive => save_archive(
            path,
            &Archive {
                num_classes: 0,
                samples: vec![ArchiveSample {
                    cloud: cloud.clone(),
                    label: None,
                    point_labels: labels.map(<[usize]>::to_vec),
                }],
            },
        ),
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_coord(tok: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid coordinate {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite coordinate {tok:?}")));
    }
    Ok(v)
}

fn parse_label(tok: &str, path: &Path, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("invalid label {tok:?} (expected a non-negative integer)")))
}

/// Parses `x y z[ label]` lines. Blank lines and `#` comments are skipped;
/// labels must be given on every line or on none.
pub fn parse_xyz(text: &str, path: &Path) -> Result<LoadedCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut labelled: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        let has_label = match toks.len() {
            3 => false,
            4 => true,
            n => return Err(parse_err(path, line, format!("expected 3 or 4 fields, found {n}"))),
        };
        if *labelled.get_or_insert(has_label) != has_label {
            return Err(parse_err(path, line, "labels must be given on every line or on none"));
        }
        points.push([
            parse_coord(toks[0], path, line)?,
            parse_coord(toks[1], path, line)?,
            parse_coord(toks[2], path, line)?,
        ]);
        if has_label {
            labels.push(parse_label(toks[3], path, line)?);
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(LoadedCloud {
        cloud: PointCloud::new(points)?,
        labels: labelled.unwrap_or(false).then_some(labels),
    })
}

pub fn format_xyz(cloud: &PointCloud, labels: Option<&[usize]>) -> String {
    let mut out = String::with_capacity(cloud.len() * 64);
    for (i, p) in cloud.points().iter().enumerate() {
        // `{:?}` prints the shortest string that parses back to the same f64
        out.push_str(&format!("{:?} {:?} {:?}", p[0], p[1], p[2]));
        if let Some(l) = labels {
            out.push_str(&format!(" {}", l[i]));
        }
        out.push('\n');
    }
    out
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

/// Parses an ASCII PLY file. Only the `vertex` element is read; its `x`, `y`,
/// `z` properties are required and an integer `label` property is optional.
pub fn parse_ply(text: &str, path: &Path) -> Result<LoadedCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(parse_err(path, n, "missing \"ply\" magic line")),
        None => return Err(parse_err(path, 1, "empty file")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_done = false;
    let mut last_line = 1;
    for (n, line) in lines.by_ref() {
        last_line = n;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(parse_err(path, n, format!("unsupported PLY format {other:?}"))),
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(path, n, format!("invalid element count {count:?}")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", ..] => {
                let Some(el) = elements.last_mut() else {
                    return Err(parse_err(path, n, "property before any element"));
                };
                if el.name == "vertex" {
                    return Err(parse_err(path, n, "list properties on vertices are not supported"));
                }
                el.properties.push(toks.last().unwrap_or(&"").to_string());
            }
            ["property", _ty, name] => {
                let Some(el) = elements.last_mut() else {
                    return Err(parse_err(path, n, "property before any element"));
                };
                el.properties.push(name.to_string());
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(path, n, format!("unrecognised header line {line:?}"))),
        }
    }
    if !header_done {
        return Err(parse_err(path, last_line, "header is missing \"end_header\""));
    }

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut has_label = false;
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let col = |name: &str| el.properties.iter().position(|p| p == name);
        let (xi, yi, zi, li) = (col("x"), col("y"), col("z"), col("label"));
        if is_vertex {
            if xi.is_none() || yi.is_none() || zi.is_none() {
                return Err(parse_err(path, last_line, "vertex element lacks x, y or z"));
            }
            has_label = li.is_some();
        }
        let mut read = 0;
        while read < el.count {
            let Some((n, line)) = lines.next() else {
                return Err(parse_err(
                    path,
                    last_line + 1,
                    format!("expected {} {} rows, found {read}", el.count, el.name),
                ));
            };
            last_line = n;
            if line.is_empty() {
                continue;
            }
            read += 1;
            if !is_vertex {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != el.properties.len() {
                return Err(parse_err(
                    path,
                    n,
                    format!("expected {} values, found {}", el.properties.len(), toks.len()),
                ));
            }
            let get = |i: Option<usize>| toks[i.expect("checked above")];
            points.push([
                parse_coord(get(xi), path, n)?,
                parse_coord(get(yi), path, n)?,
                parse_coord(get(zi), path, n)?,
            ]);
            if let Some(i) = li {
                labels.push(parse_label(toks[i], path, n)?);
            }
        }
    }
    if !elements.iter().any(|e| e.name == "vertex") || points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(LoadedCloud {
        cloud: PointCloud::new(points)?,
        labels: has_label.then_some(labels),
    })
}

pub fn format_ply(cloud: &PointCloud, labels: Option<&[usize]>) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        cloud.len()
    );
    if labels.is_some() {
        out.push_str("property int label\n");
    }
    out.push_str("end_header\n");
    out.push_str(&format_xyz(cloud, labels));
    out
}

/// One sample of a dataset archive.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveSample {
    pub cloud: PointCloud,
    pub label: Option<usize>,
    pub point_labels: Option<Vec<usize>>,
}

/// The binary dataset archive. Coordinates are stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub num_classes: usize,
    pub samples: Vec<ArchiveSample>,
}

pub fn encode_archive(archive: &Archive) -> Result<Vec<u8>> {
    let seg = archive.samples.first().is_some_and(|s| s.point_labels.is_some());
    if archive.samples.iter().any(|s| s.point_labels.is_some() != seg) {
        return Err(Error::InvalidArgument("per-point labels must be present on all samples or none".into()));
    }
    let num_classes = u16::try_from(archive.num_classes)
        .map_err(|_| Error::InvalidArgument(format!("{} classes do not fit the archive header", archive.num_classes)))?;
    let count = u32::try_from(archive.samples.len()).map_err(|_| Error::InvalidArgument("too many samples".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&num_classes.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&(if seg { FLAG_POINT_LABELS } else { 0 }).to_le_bytes());
    let as_i32 = |v: usize| i32::try_from(v).map_err(|_| Error::InvalidArgument(format!("label {v} out of range")));
    for s in &archive.samples {
        let n = u32::try_from(s.cloud.len()).map_err(|_| Error::InvalidArgument("cloud too large".into()))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&s.label.map_or(Ok(-1), as_i32)?.to_le_bytes());
        for p in s.cloud.points() {
            for c in p {
                let v = *c as f32;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("coordinate {c} does not fit in f32")));
                }
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(labels) = &s.point_labels {
            if labels.len() != s.cloud.len() {
                return Err(Error::DimensionMismatch {
                    what: "point labels",
                    expected: s.cloud.len(),
                    found: labels.len(),
                });
            }
            for &l in labels {
                out.extend_from_slice(&as_i32(l)?.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    let mut r = Reader::new(bytes);
    if &r.array::<4>("magic")? != ARCHIVE_MAGIC {
        return Err(Error::Format("not a DFRC archive (bad magic)".into()));
    }
    let version = r.u16("version")?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let num_classes = r.u16("class count")? as usize;
    let count = r.u32("sample count")? as usize;
    let flags = r.u32("flags")?;
    if flags & !FLAG_POINT_LABELS != 0 {
        return Err(Error::Format(format!("unknown archive flags {flags:#x}")));
    }
    let seg = flags & FLAG_POINT_LABELS != 0;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let n = r.u32("point count")? as usize;
        let label = match r.i32("label")? {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(Error::Format(format!("sample {i}: invalid label {l}"))),
        };
        let mut points: Vec<Point3> = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let p = [r.f32("point")?, r.f32("point")?, r.f32("point")?];
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!("sample {i}: non-finite coordinate")));
            }
            points.push(p.map(f64::from));
        }
        let point_labels = if seg {
            let mut l = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let v = r.i32("point label")?;
                l.push(usize::try_from(v).map_err(|_| Error::Format(format!("sample {i}: invalid point label {v}")))?);
            }
            Some(l)
        } else {
            None
        };
        let cloud = PointCloud::new(points).map_err(|e| match e {
            Error::EmptyCloud => Error::Format(format!("sample {i}: empty cloud")),
            other => other,
        })?;
        samples.push(ArchiveSample { cloud, label, point_labels });
    }
    r.finish()?;
    Ok(Archive { num_classes, samples })
}

pub fn save_archive(path: &Path, archive: &Archive) -> Result<()> {
    write_atomic(path, &encode_archive(archive)?)
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    decode_archive(&fs::read(path)?)
}

/// A named `f64` tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Serialises a checkpoint: magic, version, JSON metadata, the tensors in
/// little-endian `f64`, an end marker and an FNV-1a checksum.
pub fn encode_checkpoint(meta: &[u8], tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::DimensionMismatch {
                what: "checkpoint tensor",
                expected: t.shape.iter().product(),
                found: t.data.len(),
            });
        }
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument("tensor name too long".into()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::try_from(t.shape.len()).map_err(|_| Error::InvalidArgument("tensor rank too large".into()))?);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(CHECKPOINT_END);
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Vec<u8>, Vec<Tensor>)> {
    if bytes.len() < 8 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(sum.try_into().expect("8 bytes")) {
        return Err(Error::Format("checkpoint checksum mismatch (truncated or corrupted file)".into()));
    }
    let mut r = Reader::new(body);
    if &r.array::<4>("magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a DFCK checkpoint (bad magic)".into()));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = usize::try_from(r.u64("metadata length")?).map_err(|_| Error::Format("metadata too large".into()))?;
    let meta = r.take(meta_len, "metadata")?.to_vec();
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 12));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64("dimension")?).map_err(|_| Error::Format("dimension too large".into()))?);
        }
        let size = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&s| s.checked_mul(8).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| Error::Format(format!("tensor {name} is larger than the file")))?;
        let mut data = Vec::with_capacity(size);
        for _ in 0..size {
            data.push(r.f64("tensor data")?);
        }
        tensors.push(Tensor { name, shape, data });
    }
    if &r.array::<4>("end marker")? != CHECKPOINT_END {
        return Err(Error::Format("missing checkpoint end marker".into()));
    }
    r.finish()?;
    Ok((meta, tensors))
}

fn layer_tensors(prefix: &str, layers: &Layers) -> Vec<Tensor> {
    layers
        .shapes()
        .into_iter()
        .zip(layers.tensors())
        .map(|((name, shape), data)| Tensor {
            name: format!("{prefix}{name}"),
            shape,
            data: data.to_vec(),
        })
        .collect()
}

/// Fills `layers` from the tensors named `prefix` + layer name, checking
/// names and shapes.
fn fill_layers(prefix: &str, layers: &mut Layers, tensors: &mut std::collections::HashMap<String, Tensor>) -> Result<()> {
    let shapes = layers.shapes();
    for ((name, shape), slot) in shapes.into_iter().zip(layers.tensors_mut()) {
        let key = format!("{prefix}{name}");
        let t = tensors
            .remove(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {key}")))?;
        if t.shape != shape {
            return Err(Error::Format(format!("tensor {key} has shape {:?}, expected {shape:?}", t.shape)));
        }
        *slot = t.data;
    }
    Ok(())
}

fn tensor_map(tensors: Vec<Tensor>) -> std::collections::HashMap<String, Tensor> {
    tensors.into_iter().map(|t| (t.name.clone(), t)).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    kind: String,
    network: NetworkConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
}

/// Saves model weights, plus the training configuration when known.
pub fn save_model(path: &Path, params: &ModelParams, train: Option<&TrainConfig>) -> Result<()> {
    let meta = serde_json::to_vec(&ModelMeta {
        kind: "model".into(),
        network: params.config.clone(),
        train: train.cloned(),
    })?;
    write_atomic(path, &encode_checkpoint(&meta, &layer_tensors("", &params.layers))?)
}

/// Loads a model checkpoint (or the current weights of a training-state
/// checkpoint) and the training configuration stored with it.
pub fn load_model(path: &Path) -> Result<(ModelParams, Option<TrainConfig>)> {
    let (meta, tensors) = decode_checkpoint(&fs::read(path)?)?;
    let value: serde_json::Value = serde_json::from_slice(&meta)?;
    if value.get("kind").and_then(|k| k.as_str()) == Some("train_state") {
        let (config, state) = state_from_parts(&meta, tensors)?;
        return Ok((state.params, Some(config)));
    }
    let meta: ModelMeta = serde_json::from_value(value)?;
    if meta.kind != "model" {
        return Err(Error::Format(format!("unexpected checkpoint kind {:?}", meta.kind)));
    }
    let mut params = ModelParams::zeros(meta.network)?;
    let mut map = tensor_map(tensors);
    fill_layers("", &mut params.layers, &mut map)?;
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Ok((params, meta.train))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BestMeta {
    epoch: usize,
    metric: Option<f64>,
    loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    kind: String,
    network: NetworkConfig,
    train: TrainConfig,
    epoch: usize,
    adam: AdamConfig,
    adam_steps: [u64; 3],
    best: Option<BestMeta>,
    reports: Vec<EpochReport>,
}

fn finite_or_none(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

/// Encodes everything needed to resume a run. Floating-point state is stored
/// bit-exactly as tensors; the JSON part holds configs and counters.
pub fn encode_train_state(config: &TrainConfig, state: &TrainState) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&StateMeta {
        kind: "train_state".into(),
        network: state.params.config.clone(),
        train: config.clone(),
        epoch: state.epoch,
        adam: state.adam.config,
        adam_steps: state.adam.steps,
        best: state.best.as_ref().map(|b| BestMeta {
            epoch: b.epoch,
            metric: finite_or_none(b.metric),
            loss: finite_or_none(b.loss),
        }),
        reports: state.reports.clone(),
    })?;
    let mut tensors = layer_tensors("params/", &state.params.layers);
    let names = state.params.layers.shapes();
    for (prefix, moments) in [("adam_m/", &state.adam.m), ("adam_v/", &state.adam.v)] {
        for ((name, shape), data) in names.iter().zip(moments) {
            tensors.push(Tensor {
                name: format!("{prefix}{name}"),
                shape: shape.clone(),
                data: data.clone(),
            });
        }
    }
    if let Some(b) = &state.best {
        tensors.extend(layer_tensors("best/", &b.params.layers));
        // the metric and loss may be NaN, which JSON cannot carry
        tensors.push(Tensor {
            name: "best_scores".into(),
            shape: vec![2],
            data: vec![b.metric, b.loss],
        });
    }
    encode_checkpoint(&meta, &tensors)
}

fn state_from_parts(meta: &[u8], tensors: Vec<Tensor>) -> Result<(TrainConfig, TrainState)> {
    let meta: StateMeta = serde_json::from_slice(meta)?;
    if meta.kind != "train_state" {
        return Err(Error::Format(format!("unexpected checkpoint kind {:?}", meta.kind)));
    }
    let mut map = tensor_map(tensors);
    let mut params = ModelParams::zeros(meta.network.clone())?;
    fill_layers("params/", &mut params.layers, &mut map)?;
    let mut adam = Adam::new(&params, meta.adam);
    adam.steps = meta.adam_steps;
    for (prefix, moments) in [("adam_m/", &mut adam.m), ("adam_v/", &mut adam.v)] {
        let mut holder = Layers::zeros(&meta.network);
        fill_layers(prefix, &mut holder, &mut map)?;
        for (slot, data) in moments.iter_mut().zip(holder.tensors()) {
            *slot = data.to_vec();
        }
    }
    let best = match meta.best {
        None => None,
        Some(b) => {
            let mut best = ModelParams::zeros(meta.network.clone())?;
            fill_layers("best/", &mut best.layers, &mut map)?;
            let scores = map
                .remove("best_scores")
                .filter(|t| t.data.len() == 2)
                .ok_or_else(|| Error::Format("checkpoint lacks best_scores".into()))?;
            Some(BestCheckpoint {
                params: best,
                epoch: b.epoch,
                metric: scores.data[0],
                loss: scores.data[1],
            })
        }
    };
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Ok((
        meta.train,
        TrainState {
            params,
            adam,
            epoch: meta.epoch,
            best,
            reports: meta.reports,
        },
    ))
}

pub fn decode_train_state(bytes: &[u8]) -> Result<(TrainConfig, TrainState)> {
    let (meta, tensors) = decode_checkpoint(bytes)?;
    state_from_parts(&meta, tensors)
}

pub fn save_train_state(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    write_atomic(path, &encode_train_state(config, state)?)
}

pub fn load_train_state(path: &Path) -> Result<(TrainConfig, TrainState)> {
    decode_train_state(&fs::read(path)?)
}

/// Labelled feature vectors, one per line: `label f_1 ... f_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub labels: Vec<usize>,
    pub features: Vec<Vec<f64>>,
}

impl FeatureDump {
    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

pub fn format_features(dump: &FeatureDump) -> String {
    let mut out = String::new();
    for (l, f) in dump.labels.iter().zip(&dump.features) {
        out.push_str(&l.to_string());
        for v in f {
            out.push_str(&format!(" {v:?}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_features(text: &str, path: &Path) -> Result<FeatureDump> {
    let mut labels = Vec::new();
    let mut features: Vec<Vec<f64>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut toks = body.split_whitespace();
        let label = parse_label(toks.next().expect("non-empty line"), path, line)?;
        let f = toks.map(|t| parse_coord(t, path, line)).collect::<Result<Vec<_>>>()?;
        if f.is_empty() {
            return Err(parse_err(path, line, "no feature values"));
        }
        if let Some(first) = features.first() {
            if first.len() != f.len() {
                return Err(parse_err(path, line, format!("expected {} features, found {}", first.len(), f.len())));
            }
        }
        labels.push(label);
        features.push(f);
    }
    if features.is_empty() {
        return Err(Error::EmptyInput("feature dump"));
    }
    Ok(FeatureDump { labels, features })
}

pub fn save_features(path: &Path, dump: &FeatureDump) -> Result<()> {
    write_atomic(path, format_features(dump).as_bytes())
}

pub fn load_features(path: &Path) -> Result<FeatureDump> {
    parse_features(&fs::read_to_string(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;
    use crate::network::Task;
    use crate::train::{train, TrainConfig};
    use crate::cloud::LabeledCloud;
    use proptest::prelude::*;

    fn p() -> PathBuf {
        PathBuf::from("test.xyz")
    }

    #[test]
    fn xyz_two_points() {
        let c = parse_xyz("0 0 0\n1 0 0\n", &p()).unwrap();
        assert_eq!(c.cloud.points(), &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(c.labels, None);
    }

    #[test]
    fn xyz_labels_and_comments() {
        let c = parse_xyz("# header\n0 0 0 2\n\n1 0 0 0 # tail\n", &p()).unwrap();
        assert_eq!(c.labels, Some(vec![2, 0]));
    }

    #[test]
    fn xyz_errors_carry_line_numbers() {
        let cases = [
            ("0 0 0\n1 0\n", 2),
            ("0 0 0\n\n1 x 0\n", 3),
            ("0 0 0\n1 0 0 1\n", 2),
            ("0 0 nan\n", 1),
            ("0 0 inf\n", 1),
            ("0 0 0 -1\n", 1),
        ];
        for (text, want) in cases {
            match parse_xyz(text, &p()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(matches!(parse_xyz("# nothing\n", &p()), Err(Error::EmptyCloud)));
    }

    #[test]
    fn ply_basic_and_labels() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar label\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 1\n1 2 3 0\n3 0 1 1\n";
        let c = parse_ply(text, Path::new("a.ply")).unwrap();
        assert_eq!(c.cloud.points(), &[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        assert_eq!(c.labels, Some(vec![1, 0]));
    }

    #[test]
    fn ply_empty_and_malformed() {
        let empty = "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        let e = parse_ply(empty, Path::new("a.ply")).unwrap_err();
        assert_eq!(e.to_string(), "empty cloud");
        let binary = "ply\nformat binary_little_endian 1.0\nend_header\n";
        assert!(matches!(parse_ply(binary, Path::new("a.ply")), Err(Error::Parse { line: 2, .. })));
        let short = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(matches!(parse_ply(short, Path::new("a.ply")), Err(Error::Parse { .. })));
        let bad = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0\n";
        assert!(matches!(parse_ply(bad, Path::new("a.ply")), Err(Error::Parse { line: 8, .. })));
        assert!(matches!(parse_ply("plx\n", Path::new("a.ply")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn text_formats_round_trip_exactly() {
        let cloud = PointCloud::new(vec![[0.1, -2.5e-7, 1.0 / 3.0], [std::f64::consts::PI, 0.0, -1.0]]).unwrap();
        let labels = [3, 0];
        let xyz = parse_xyz(&format_xyz(&cloud, Some(&labels)), &p()).unwrap();
        assert_eq!(xyz.cloud, cloud);
        assert_eq!(xyz.labels.as_deref(), Some(&labels[..]));
        let ply = parse_ply(&format_ply(&cloud, None), Path::new("a.ply")).unwrap();
        assert_eq!(ply.cloud, cloud);
    }

    fn sample_archive(seg: bool) -> Archive {
        let samples = (0..3)
            .map(|i| {
                let pts: Vec<Point3> = (0..5).map(|j| [i as f64 * 0.5, j as f64 * 0.25, -(j as f64) / 8.0]).collect();
                ArchiveSample {
                    cloud: PointCloud::new(pts).unwrap(),
                    label: if seg { None } else { Some(i % 2) },
                    point_labels: seg.then(|| vec![i, 0, 1, 2, 3]),
                }
            })
            .collect();
        Archive { num_classes: 4, samples }
    }

    #[test]
    fn archive_round_trip_bit_exact() {
        for seg in [false, true] {
            let a = sample_archive(seg);
            let bytes = encode_archive(&a).unwrap();
            let back = decode_archive(&bytes).unwrap();
            assert_eq!(back, a);
            assert_eq!(encode_archive(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn archive_header_layout() {
        let bytes = encode_archive(&sample_archive(true)).unwrap();
        assert_eq!(&bytes[0..4], b"DFRC");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), ARCHIVE_VERSION);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 4);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), FLAG_POINT_LABELS);
        // 16 header bytes, then per sample 4 + 4 + 5·12 + 5·4
        assert_eq!(bytes.len(), 16 + 3 * (8 + 60 + 20));
    }

    #[test]
    fn archive_rejects_damage() {
        let bytes = encode_archive(&sample_archive(false)).unwrap();
        assert!(decode_archive(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_archive(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_archive(&magic).is_err());
        let mut nan = bytes;
        // first coordinate of the first sample
        nan[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_archive(&nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn checkpoint_rejects_truncation_and_corruption() {
        let t = vec![Tensor { name: "w".into(), shape: vec![2, 2], data: vec![1.0, -0.0, f64::NAN, 1e-300] }];
        let bytes = encode_checkpoint(b"{}", &t).unwrap();
        let (meta, back) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(meta, b"{}");
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].data), bits(&t[0].data));
        for cut in [1, 8, 20, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..bytes.len() - cut]).is_err());
        }
        let mut flipped = bytes;
        flipped[30] ^= 1;
        assert!(decode_checkpoint(&flipped).is_err());
    }

    fn tiny_run() -> (TrainConfig, crate::train::TrainState) {
        let mk = |i: usize| {
            let pts: Vec<Point3> = (0..24)
                .map(|j| {
                    let t = j as f64 * 0.7 + i as f64;
                    [t.cos() * (1.0 + (i % 2) as f64), t.sin(), (j as f64 / 24.0) - 0.5]
                })
                .collect();
            LabeledCloud { cloud: PointCloud::new(pts).unwrap(), label: i % 2 }
        };
        let source: Vec<LabeledCloud> = (0..8).map(mk).collect();
        let target: Vec<PointCloud> = (8..16).map(|i| mk(i).cloud).collect();
        let mut config = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
        config.architecture = crate::train::Architecture::Compact;
        let out = train(&config, &source, 2, &target).unwrap();
        (config, out.state)
    }

    #[test]
    fn model_and_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (config, state) = tiny_run();
        assert_eq!(config.task, Task::Classification);

        let model = dir.path().join("m.dfck");
        save_model(&model, &state.params, Some(&config)).unwrap();
        let (params, cfg) = load_model(&model).unwrap();
        assert_eq!(params, state.params);
        assert_eq!(cfg.as_ref(), Some(&config));

        let path = dir.path().join("s.dfck");
        save_train_state(&path, &config, &state).unwrap();
        let (cfg, back) = load_train_state(&path).unwrap();
        assert_eq!(cfg, config);
        assert_eq!(back.params, state.params);
        assert_eq!(back.adam, state.adam);
        assert_eq!(back.best, state.best);
        assert_eq!(back.epoch, state.epoch);
        let strip = |r: &[EpochReport]| r.iter().map(|r| EpochReport { wall_clock: 0.0, ..r.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&back.reports), strip(&state.reports));
        // re-encoding the loaded state gives the same bytes
        let again = encode_train_state(&cfg, &back).unwrap();
        assert_eq!(again, fs::read(&path).unwrap());
        // a state checkpoint also loads as a model
        assert_eq!(load_model(&path).unwrap().0, state.params);
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        write_atomic(&path, b"first version, longer").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn feature_dump_round_trip() {
        let d = FeatureDump { labels: vec![0, 2], features: vec![vec![0.5, -1e-3], vec![3.0, 0.1]] };
        let back = parse_features(&format_features(&d), &p()).unwrap();
        assert_eq!(back, d);
        assert!(matches!(parse_features("0 1 2\n1 3\n", &p()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_features("0\n", &p()), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn archive_round_trip_prop(
            clouds in proptest::collection::vec(
                proptest::collection::vec(proptest::array::uniform3(-1.0e3f32..1.0e3), 1..20),
                0..6,
            ),
        ) {
            let samples = clouds
                .iter()
                .enumerate()
                .map(|(i, pts)| ArchiveSample {
                    cloud: PointCloud::new(pts.iter().map(|p| p.map(f64::from)).collect()).unwrap(),
                    label: Some(i),
                    point_labels: None,
                })
                .collect();
            let a = Archive { num_classes: 7, samples };
            let bytes = encode_archive(&a).unwrap();
            prop_assert_eq!(decode_archive(&bytes).unwrap(), a);
        }

        #[test]
        fn xyz_round_trip_prop(pts in proptest::collection::vec(proptest::array::uniform3(-1.0e6f64..1.0e6), 1..30)) {
            let cloud = PointCloud::new(pts).unwrap();
            prop_assert_eq!(parse_xyz(&format_xyz(&cloud, None), &p()).unwrap().cloud, cloud);
        }
    }
}
