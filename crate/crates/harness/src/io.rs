//! On-disk formats: KITTI-style `.bin` clouds, text labels, checkpoints,
//! and the CSV outputs.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use m3fuse_core::geometry::Box7;
use m3fuse_core::numerics::{read_blocks, write_blocks, Adam, CheckpointError, ParamStore, Tensor};
use m3fuse_core::pointcloud::{Point, PointCloud};

use crate::scene::{Label, Scene};
use crate::HarnessError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::io(path, e)
}

/// Little-endian `f32` quadruples `(x, y, z, r)`.
pub fn write_bin(path: &Path, cloud: &PointCloud) -> Result<(), HarnessError> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in p.features() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_bin(path: &Path) -> Result<PointCloud, HarnessError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 16 != 0 {
        return Err(HarnessError::Validation(format!(
            "{}: length {} is not a multiple of 16 bytes",
            path.display(),
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
            Point::new(f(0), f(1), f(2), f(3))
        })
        .collect();
    PointCloud::new(points).map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))
}

/// One object per line: `class x y z l h w theta points_inside height_px
/// occlusion truncation`. Values are written with full `f64` precision.
pub fn format_labels(labels: &[Label], class_names: &[String]) -> String {
    let mut s = String::new();
    for l in labels {
        let b = l.bbox;
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {}\n",
            class_names[l.class], b.x, b.y, b.z, b.l, b.h, b.w, b.theta, l.points_inside, l.height_px, l.occlusion, l.truncation
        ));
    }
    s
}

pub fn parse_labels(text: &str, class_names: &[String], origin: &str) -> Result<Vec<Label>, HarnessError> {
    let bad = |line: usize, msg: String| HarnessError::Validation(format!("{origin}:{line}: {msg}"));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 12 {
            return Err(bad(n, format!("expected 12 fields, found {}", f.len())));
        }
        let class = class_names
            .iter()
            .position(|c| c == f[0])
            .ok_or_else(|| bad(n, format!("unknown class `{}`", f[0])))?;
        let num = |k: usize| f[k].parse::<f64>().map_err(|e| bad(n, format!("field {}: {e}", k + 1)));
        let bbox = Box7::new(num(1)?, num(2)?, num(3)?, num(4)?, num(5)?, num(6)?, num(7)?).map_err(|e| bad(n, e.to_string()))?;
        let points_inside = f[8].parse().map_err(|e| bad(n, format!("points_inside: {e}")))?;
        let occlusion = f[10].parse().map_err(|e| bad(n, format!("occlusion: {e}")))?;
        out.push(Label {
            class,
            bbox,
            points_inside,
            height_px: num(9)?,
            occlusion,
            truncation: num(11)?,
        });
    }
    Ok(out)
}

/// Writes `<id>.bin` and `<id>.txt` for every scene.
pub fn write_scenes(dir: &Path, scenes: &[Scene], class_names: &[String]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for s in scenes {
        write_bin(&dir.join(format!("{}.bin", s.id)), &s.cloud)?;
        let p = dir.join(format!("{}.txt", s.id));
        fs::write(&p, format_labels(&s.labels, class_names)).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Loads every `<id>.bin` with its label file, sorted by id. A missing
/// label file means an unannotated scene.
pub fn read_scenes(dir: &Path, class_names: &[String]) -> Result<Vec<Scene>, HarnessError> {
    let mut bins: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    bins.sort();
    let mut scenes = Vec::with_capacity(bins.len());
    for bin in bins {
        let id = bin.file_stem().expect("file name").to_string_lossy().into_owned();
        let txt = bin.with_extension("txt");
        let labels = if txt.exists() {
            let text = fs::read_to_string(&txt).map_err(io_err(&txt))?;
            parse_labels(&text, class_names, &txt.display().to_string())?
        } else {
            Vec::new()
        };
        scenes.push(Scene {
            id,
            cloud: read_bin(&bin)?,
            labels,
        });
    }
    if scenes.is_empty() {
        return Err(HarnessError::Validation(format!("{}: no .bin scenes found", dir.display())));
    }
    Ok(scenes)
}

const STEP_KEY: &str = "train/step";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Parameters, optimizer moments and the step counter.
pub fn save_checkpoint(path: &Path, store: &ParamStore, adam: Option<&Adam>) -> Result<(), HarnessError> {
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    if let Some(adam) = adam {
        owned.push((STEP_KEY.into(), Tensor::scalar(adam.step_count() as f64)));
        for id in store.ids() {
            let (m, v) = adam.moments(id.index());
            let shape = store.value(id).shape().to_vec();
            owned.push((format!("{ADAM_M}{}", store.name(id)), Tensor::new(shape.clone(), m.to_vec()).expect("shape")));
            owned.push((format!("{ADAM_V}{}", store.name(id)), Tensor::new(shape, v.to_vec()).expect("shape")));
        }
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let blocks = store
        .ids()
        .map(|id| (store.name(id), store.value(id)))
        .chain(owned.iter().map(|(n, t)| (n.as_str(), t)));
    write_blocks(BufWriter::new(file), blocks)?;
    Ok(())
}

/// Overwrites `store` (and `adam`, when the file carries its state). Every
/// parameter must be present with the same shape.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore, adam: Option<&mut Adam>) -> Result<(), HarnessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let blocks: HashMap<String, Tensor> = read_blocks(std::io::BufReader::new(file))?.into_iter().collect();
    let fetch = |name: &str, expected: &[usize]| -> Result<&Tensor, CheckpointError> {
        let t = blocks.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if t.shape() != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    };
    let ids: Vec<_> = store.ids().collect();
    let mut values = Vec::with_capacity(ids.len());
    for &id in &ids {
        values.push(fetch(store.name(id), store.value(id).shape())?.clone());
    }
    let mut moments = None;
    if let Some(step) = blocks.get(STEP_KEY) {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for &id in &ids {
            let shape = store.value(id).shape();
            m.push(fetch(&format!("{ADAM_M}{}", store.name(id)), shape)?.data().to_vec());
            v.push(fetch(&format!("{ADAM_V}{}", store.name(id)), shape)?.data().to_vec());
        }
        moments = Some((step.item() as u64, m, v));
    }
    for (id, t) in ids.into_iter().zip(values) {
        *store.value_mut(id) = t;
    }
    if let (Some(adam), Some((step, m, v))) = (adam, moments) {
        adam.restore(step, m, v);
    }
    Ok(())
}

/// Writes rows to `path` as CSV with the given header.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| HarnessError::Validation(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Appends one line to an open text sink.
pub fn write_line(w: &mut impl Write, line: &str, path: &Path) -> Result<(), HarnessError> {
    writeln!(w, "{line}").map_err(io_err(path))
}
