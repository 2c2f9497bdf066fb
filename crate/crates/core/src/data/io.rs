//! On-disk dataset layout.
//!
//! ```text
//! <root>/classes.txt        one class name per line, id = line order
//! <root>/annotations.tsv    sample_id \t start_s \t end_s \t class_name
//! <root>/split.tsv          sample_id \t train|test   (optional)
//! <root>/signals/<id>.csi   binary amplitude matrix
//! ```
//!
//! Signal file (little-endian):
//!
//! ```text
//! magic "CSITADSG" (8 bytes), version u32 = 1, T u64, C u32,
//! sample_rate f64, then T·C f32 values in row-major (time, channel) order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{CsiSample, Dataset, DatasetSplit, Segment};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASSES_FILE: &str = "classes.txt";
pub const ANNOTATION_FILE: &str = "annotations.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const SIGNAL_DIR: &str = "signals";

const SIGNAL_MAGIC: &[u8; 8] = b"CSITADSG";
const SIGNAL_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 4 + 8;

pub fn write_signal(path: &Path, signal: &Tensor, sample_rate_hz: f64) -> Result<()> {
    let (t, c) = (signal.rows(), signal.cols());
    let mut buf = Vec::with_capacity(HEADER_LEN + t * c * 4);
    buf.extend_from_slice(SIGNAL_MAGIC);
    buf.extend_from_slice(&SIGNAL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u64).to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    buf.extend_from_slice(&sample_rate_hz.to_le_bytes());
    for &v in signal.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a signal file, returning the `[T × C]` matrix and its sample rate.
pub fn read_signal(path: &Path) -> Result<(Tensor, f64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::parse(path, 0, m);
    if bytes.len() < HEADER_LEN || &bytes[..8] != SIGNAL_MAGIC {
        return Err(bad("not a signal file (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != SIGNAL_VERSION {
        return Err(bad(format!("unsupported signal version {version}")));
    }
    let t = u64_at(12) as usize;
    let c = u32_at(20) as usize;
    let fs = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    if !(fs > 0.0) {
        return Err(bad(format!("sample rate {fs} must be positive")));
    }
    let expected = t
        .checked_mul(c)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    if bytes.len() - HEADER_LEN != expected {
        return Err(bad(format!(
            "payload of {} bytes, header declares {t}x{c} f32 values",
            bytes.len() - HEADER_LEN
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((Tensor::matrix(t, c, data)?, fs))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write the dataset under `root`, creating directories as needed.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    let sig_dir = root.join(SIGNAL_DIR);
    fs::create_dir_all(&sig_dir).map_err(|e| Error::io(&sig_dir, e))?;

    let mut classes = String::new();
    for c in &ds.classes {
        classes.push_str(c);
        classes.push('\n');
    }
    write_text(&root.join(CLASSES_FILE), &classes)?;

    let mut ann = String::new();
    for s in &ds.samples {
        s.validate(ds.classes.len())?;
        for seg in &s.segments {
            ann.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                s.id, seg.start_s, seg.end_s, ds.classes[seg.class_id]
            ));
        }
        write_signal(&sig_dir.join(format!("{}.csi", s.id)), &s.signal, s.sample_rate_hz)?;
    }
    write_text(&root.join(ANNOTATION_FILE), &ann)?;

    if let Some(split) = &ds.split {
        let mut body = String::new();
        for id in &split.train {
            body.push_str(&format!("{id}\ttrain\n"));
        }
        for id in &split.test {
            body.push_str(&format!("{id}\ttest\n"));
        }
        write_text(&root.join(SPLIT_FILE), &body)?;
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_time(path: &Path, line: usize, field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(path, line, format!("{what} `{field}` is not a finite number")))
}

pub(crate) fn read_classes(path: &Path) -> Result<Vec<String>> {
    let text = read_text(path)?;
    let mut classes: Vec<String> = Vec::new();
    for (line, l) in records(&text) {
        let name = l.trim().to_string();
        if classes.contains(&name) {
            return Err(Error::parse(path, line, format!("duplicate class `{name}`")));
        }
        classes.push(name);
    }
    if classes.is_empty() {
        return Err(Error::parse(path, 0, "no classes listed"));
    }
    Ok(classes)
}

/// Parse `id \t start \t end \t class` records into per-id segment lists.
pub(crate) fn read_annotations(
    path: &Path,
    classes: &[String],
) -> Result<BTreeMap<String, Vec<Segment>>> {
    let text = read_text(path)?;
    let mut out: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for (line, l) in records(&text) {
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 4 tab-separated fields, found {}", f.len()),
            ));
        }
        let start = parse_time(path, line, f[1], "start")?;
        let end = parse_time(path, line, f[2], "end")?;
        if end <= start || start < 0.0 {
            return Err(Error::parse(
                path,
                line,
                format!("segment of `{}` has end {end} <= start {start} or negative start", f[0]),
            ));
        }
        let class = f[3].trim();
        let class_id = classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::parse(path, line, format!("unknown class `{class}`")))?;
        out.entry(f[0].trim().to_string()).or_default().push(Segment {
            start_s: start,
            end_s: end,
            class_id,
        });
    }
    Ok(out)
}

fn read_split(path: &Path) -> Result<DatasetSplit> {
    let text = read_text(path)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (line, l) in records(&text) {
        match l.split('\t').collect::<Vec<_>>()[..] {
            [id, "train"] => train.push(id.to_string()),
            [id, "test"] => test.push(id.to_string()),
            _ => {
                return Err(Error::parse(path, line, format!("expected `id\\ttrain|test`, got `{l}`")));
            }
        }
    }
    Ok(DatasetSplit { train, test })
}

/// Read a dataset directory. Every sample with a signal file is loaded;
/// annotated ids without a signal file are an error.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let classes = read_classes(&root.join(CLASSES_FILE))?;
    let ann_path = root.join(ANNOTATION_FILE);
    let mut annotations = read_annotations(&ann_path, &classes)?;
    let sig_dir = root.join(SIGNAL_DIR);
    let mut ids: Vec<String> = Vec::new();
    for entry in fs::read_dir(&sig_dir).map_err(|e| Error::io(&sig_dir, e))? {
        let entry = entry.map_err(|e| Error::io(&sig_dir, e))?;
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "csi") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if let Some(missing) = annotations.keys().find(|k| ids.binary_search(k).is_err()) {
        return Err(Error::Invalid(format!(
            "{}: sample `{missing}` is annotated but {} has no signal file for it",
            ann_path.display(),
            sig_dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let (signal, fs) = read_signal(&sig_dir.join(format!("{id}.csi")))?;
        let mut segments = annotations.remove(&id).unwrap_or_default();
        segments.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        let s = CsiSample {
            id,
            signal,
            sample_rate_hz: fs,
            segments,
        };
        s.validate(classes.len())?;
        samples.push(s);
    }
    let split_path = root.join(SPLIT_FILE);
    let split = if split_path.exists() {
        Some(read_split(&split_path)?)
    } else {
        None
    };
    Ok(Dataset {
        classes,
        samples,
        split,
    })
}
