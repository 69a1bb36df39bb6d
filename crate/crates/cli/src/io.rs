//! JSONL scene, truth and track files.
//!
//! Frames: `{"v":1,"frame":t,"anchors":[{"box":[x1,y1,x2,y2],"e":ê,"k":[..],"src":id}]}`
//! where `src` is optional and `-1` marks clutter.
//! Objects: `{"v":1,"frame":t,"objects":[{"id":..,"box":[..],"class":..,"conf":..,"cov":[16],"probs":[K]}]}`
//! where `cov` (row-major) and `probs` are optional.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use d2t_core::filter::{TrackEstimate, TrackOutput};
use d2t_core::{AnchorObservation, BBox, Error, FrameObservations, ObjectState, Result};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
const CLUTTER_SRC: i64 = -1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    e: f64,
    k: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    src: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    v: u32,
    frame: usize,
    anchors: Vec<AnchorRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    id: u64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class: usize,
    conf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cov: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectFrameRecord {
    v: u32,
    frame: usize,
    objects: Vec<ObjectRecord>,
}

/// Frames read from disk, with anchor sources when every anchor carries one.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFile {
    pub frames: Vec<FrameObservations>,
    pub sources: Option<Vec<Vec<Option<u64>>>>,
}

/// Opens `path` for writing, refusing to replace an existing file unless
/// `force` is set.
pub fn create_output(path: &Path, force: bool) -> Result<File> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut options = OpenOptions::new();
    options.write(true);
    if force {
        options.create(true).truncate(true);
    } else {
        options.create_new(true);
    }
    options.open(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::AlreadyExists {
            Error::Config(format!("{} exists; pass --force to overwrite", path.display()))
        } else {
            io_err(source)
        }
    })
}

fn write_lines<T: Serialize>(path: &Path, records: &[T], force: bool) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(create_output(path, force)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Parses every non-empty line; errors name the 1-based line number.
fn read_lines<T, R>(path: &Path, mut convert: impl FnMut(T) -> std::result::Result<R, String>) -> Result<Vec<R>>
where
    T: for<'de> Deserialize<'de>,
{
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        out.push(convert(record).map_err(parse)?);
    }
    Ok(out)
}

fn check_version(v: u32) -> std::result::Result<(), String> {
    if v != SCHEMA_VERSION {
        return Err(format!("unsupported schema version {v}, expected {SCHEMA_VERSION}"));
    }
    Ok(())
}

pub fn write_frames(path: &Path, frames: &[FrameObservations], sources: Option<&[Vec<Option<u64>>]>, force: bool) -> Result<()> {
    let records: Vec<FrameRecord> = frames
        .iter()
        .enumerate()
        .map(|(t, f)| FrameRecord {
            v: SCHEMA_VERSION,
            frame: f.frame_index,
            anchors: f
                .anchors
                .iter()
                .enumerate()
                .map(|(i, a)| AnchorRecord {
                    bbox: a.bbox.0,
                    e: a.appearance,
                    k: a.class_scores.clone(),
                    src: sources.map(|s| s[t][i].map_or(CLUTTER_SRC, |id| id as i64)),
                })
                .collect(),
        })
        .collect();
    write_lines(path, &records, force)
}

pub fn read_frames(path: &Path) -> Result<FrameFile> {
    let parsed = read_lines(path, |r: FrameRecord| {
        check_version(r.v)?;
        let mut anchors = Vec::with_capacity(r.anchors.len());
        let mut sources = Vec::with_capacity(r.anchors.len());
        for a in r.anchors {
            anchors.push(AnchorObservation::new(BBox(a.bbox), a.e, a.k).map_err(|e| e.to_string())?);
            sources.push(match a.src {
                None => None,
                Some(CLUTTER_SRC) => Some(None),
                Some(id) if id >= 0 => Some(Some(id as u64)),
                Some(id) => return Err(format!("invalid anchor source {id}")),
            });
        }
        Ok((
            FrameObservations {
                frame_index: r.frame,
                anchors,
            },
            sources,
        ))
    })?;
    let complete = parsed.iter().all(|(_, s)| s.iter().all(Option::is_some));
    let (frames, raw): (Vec<_>, Vec<_>) = parsed.into_iter().unzip();
    let sources = complete.then(|| raw.into_iter().map(|s| s.into_iter().flatten().collect()).collect());
    Ok(FrameFile { frames, sources })
}

fn object_record(t: &TrackEstimate) -> ObjectRecord {
    ObjectRecord {
        id: t.track_id,
        bbox: t.bbox.0,
        class: t.class_id,
        conf: t.confidence,
        cov: Some((0..16).map(|i| t.cov[(i / 4, i % 4)]).collect()),
        probs: Some(t.class_probs.clone()),
    }
}

pub fn write_tracks(path: &Path, output: &TrackOutput, force: bool) -> Result<()> {
    let records: Vec<ObjectFrameRecord> = output
        .frames
        .iter()
        .map(|(frame, objs)| ObjectFrameRecord {
            v: SCHEMA_VERSION,
            frame: *frame,
            objects: objs.iter().map(object_record).collect(),
        })
        .collect();
    write_lines(path, &records, force)
}

pub fn write_truth(path: &Path, frames: &[FrameObservations], truth: &[Vec<ObjectState>], force: bool) -> Result<()> {
    let records: Vec<ObjectFrameRecord> = frames
        .iter()
        .zip(truth)
        .map(|(f, objs)| ObjectFrameRecord {
            v: SCHEMA_VERSION,
            frame: f.frame_index,
            objects: objs
                .iter()
                .map(|o| ObjectRecord {
                    id: o.track_id,
                    bbox: o.bbox.0,
                    class: o.class_id,
                    conf: 1.0,
                    cov: None,
                    probs: None,
                })
                .collect(),
        })
        .collect();
    write_lines(path, &records, force)
}

/// Reads a truth or track file. Objects without `cov` get `default_var·I`;
/// objects without `probs` get a one-hot distribution over `num_classes`.
pub fn read_tracks(path: &Path, num_classes: usize, default_var: f64) -> Result<TrackOutput> {
    let frames = read_lines(path, |r: ObjectFrameRecord| {
        check_version(r.v)?;
        let objects = r
            .objects
            .into_iter()
            .map(|o| {
                if o.class >= num_classes {
                    return Err(format!("class {} out of range for {num_classes} classes", o.class));
                }
                let cov = match o.cov {
                    Some(c) if c.len() == 16 => Matrix4::from_row_slice(&c),
                    Some(c) => return Err(format!("cov has {} entries, expected 16", c.len())),
                    None => Matrix4::identity() * default_var,
                };
                let class_probs = match o.probs {
                    Some(p) if p.len() == num_classes => p,
                    Some(p) => return Err(format!("probs has {} entries, expected {num_classes}", p.len())),
                    None => (0..num_classes).map(|c| if c == o.class { 1.0 } else { 0.0 }).collect(),
                };
                Ok(TrackEstimate {
                    track_id: o.id,
                    bbox: BBox(o.bbox),
                    cov,
                    class_id: o.class,
                    class_probs,
                    confidence: o.conf,
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        Ok((r.frame, objects))
    })?;
    Ok(TrackOutput { frames })
}

/// Truth objects per frame with their frame indices.
pub fn read_truth(path: &Path, num_classes: usize) -> Result<Vec<(usize, Vec<ObjectState>)>> {
    Ok(read_tracks(path, num_classes, 1.0)?
        .frames
        .into_iter()
        .map(|(t, objs)| (t, objs.into_iter().map(|o| ObjectState::new(o.bbox, o.class_id, o.track_id)).collect()))
        .collect())
}
