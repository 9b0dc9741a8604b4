//! On-disk layout: `<signal_dir>/<frame>.f32` raw little-endian samples with a
//! `<frame>.json` sidecar, plus a JSON-lines report file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cardiocap_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::{validate_texts, Dataset, ReportRecord, SignalFrame, Split, SplitManifest, LEADS, NUM_CLASSES, SAMPLES};
use crate::error::{Error, Result};
use crate::lang::Language;

const PAYLOAD_BYTES: u64 = (LEADS * SAMPLES * 4) as u64;

/// Frame sidecar. Converted external data may carry `labels` instead of a
/// single `label`; such frames are kept only when exactly one label is set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
    pub patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default)]
    pub frame_index: usize,
}

impl FrameMeta {
    fn single_label(&self) -> Option<usize> {
        match (&self.label, &self.labels) {
            (Some(l), None) => Some(*l),
            (None, Some(ls)) if ls.len() == 1 => Some(ls[0]),
            _ => None,
        }
    }
}

/// Validated metadata of a dataset whose payloads have not been read.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub languages: Vec<Language>,
    pub records: Vec<ReportRecord>,
    pub frames: Vec<FrameMeta>,
    /// Frames dropped because they carry more than one label.
    pub excluded: Vec<String>,
    signal_dir: PathBuf,
}

impl DatasetIndex {
    pub fn frame_counts(&self, manifest: &SplitManifest) -> BTreeMap<Split, usize> {
        let mut counts: BTreeMap<Split, usize> = Split::ALL.into_iter().map(|s| (s, 0)).collect();
        let lookup: BTreeMap<&str, Split> =
            Split::ALL.into_iter().flat_map(|s| manifest.patients(s).iter().map(move |p| (p.as_str(), s))).collect();
        for f in &self.frames {
            if let Some(s) = lookup.get(f.patient_id.as_str()) {
                *counts.get_mut(s).expect("all splits present") += 1;
            }
        }
        counts
    }

    /// Reads every payload, converting samples to `T`.
    pub fn load<T: Scalar>(&self) -> Result<Dataset<T>> {
        let mut frames = Vec::with_capacity(self.frames.len());
        for (r, meta) in self.records.iter().zip(&self.frames) {
            let path = self.signal_dir.join(format!("{}.f32", r.frame));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() as u64 != PAYLOAD_BYTES {
                return Err(Error::format(&path, format!("expected {PAYLOAD_BYTES} bytes, found {}", bytes.len())));
            }
            let data = bytes.chunks_exact(4).map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
            frames.push(SignalFrame {
                id: r.frame.clone(),
                patient_id: r.patient_id.clone(),
                leads: Tensor::new(vec![LEADS, SAMPLES], data)?,
                label: meta.single_label().expect("index keeps single-label frames"),
                frame_index: meta.frame_index,
            });
        }
        Ok(Dataset { languages: self.languages.clone(), frames, records: self.records.clone() })
    }
}

fn read_reports(report_file: &Path) -> Result<Vec<ReportRecord>> {
    let text = fs::read_to_string(report_file).map_err(|e| Error::io(report_file, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(report_file, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Validates the report file and every sidecar without reading payloads.
/// Multi-label frames (and their records) are dropped and listed in
/// `excluded`.
pub fn index_dataset(signal_dir: &Path, report_file: &Path) -> Result<DatasetIndex> {
    let all = read_reports(report_file)?;
    let languages = all.first().map(ReportRecord::languages).unwrap_or_default();
    let mut records = Vec::with_capacity(all.len());
    let mut frames = Vec::with_capacity(all.len());
    let mut excluded = Vec::new();
    for (i, r) in all.into_iter().enumerate() {
        validate_texts(i, &r, &languages)?;
        let side = signal_dir.join(format!("{}.json", r.frame));
        let raw = signal_dir.join(format!("{}.f32", r.frame));
        if !side.is_file() || !raw.is_file() {
            return Err(Error::Schema { index: i, msg: format!("frame {} not found in {}", r.frame, signal_dir.display()) });
        }
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: FrameMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side, e))?;
        if meta.shape != [LEADS, SAMPLES] {
            return Err(Error::Shape { what: format!("frame {}", r.frame), expected: vec![LEADS, SAMPLES], found: meta.shape });
        }
        if meta.dtype != "f32" || meta.order != "row-major" {
            return Err(Error::format(&side, format!("unsupported dtype/order {}/{}", meta.dtype, meta.order)));
        }
        let len = fs::metadata(&raw).map_err(|e| Error::io(&raw, e))?.len();
        if len != PAYLOAD_BYTES {
            return Err(Error::format(&raw, format!("expected {PAYLOAD_BYTES} bytes, found {len}")));
        }
        if meta.patient_id != r.patient_id {
            return Err(Error::Schema { index: i, msg: format!("record patient {} but frame patient {}", r.patient_id, meta.patient_id) });
        }
        match meta.single_label() {
            Some(l) if l < NUM_CLASSES => {
                records.push(r);
                frames.push(meta);
            }
            Some(l) => return Err(Error::Schema { index: i, msg: format!("label {l} outside [0, {NUM_CLASSES})") }),
            None => excluded.push(r.frame),
        }
    }
    Ok(DatasetIndex { languages, records, frames, excluded, signal_dir: signal_dir.to_path_buf() })
}

/// Loads a dataset, rejecting multi-label frames.
pub fn load_dataset<T: Scalar>(signal_dir: &Path, report_file: &Path) -> Result<Dataset<T>> {
    let index = index_dataset(signal_dir, report_file)?;
    if let Some(f) = index.excluded.first() {
        return Err(Error::format(signal_dir.join(format!("{f}.json")), "frame has more than one label"));
    }
    index.load()
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Writes frames as f32 payloads with sidecars, and the report file.
pub fn write_dataset<T: Scalar>(dataset: &Dataset<T>, signal_dir: &Path, report_file: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(signal_dir).map_err(|e| Error::io(signal_dir, e))?;
    for f in &dataset.frames {
        let raw = signal_dir.join(format!("{}.f32", f.id));
        let bytes: Vec<u8> = f.leads.data().iter().flat_map(|x| (x.as_f64() as f32).to_le_bytes()).collect();
        fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
        let meta = FrameMeta {
            shape: vec![LEADS, SAMPLES],
            dtype: "f32".into(),
            order: "row-major".into(),
            patient_id: f.patient_id.clone(),
            label: Some(f.label),
            labels: None,
            frame_index: f.frame_index,
        };
        let side = signal_dir.join(format!("{}.json", f.id));
        let json = serde_json::to_string(&meta).map_err(|e| Error::format(&side, e))?;
        fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    }
    if let Some(parent) = report_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = std::io::BufWriter::new(create(report_file)?);
    for r in &dataset.records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(report_file, e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(report_file, e))?;
    }
    out.flush().map_err(|e| Error::io(report_file, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic_corpus;

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic_corpus::<f32>(3, &Language::ALL, 5).unwrap();
        let (sig, rep) = (dir.path().join("signals"), dir.path().join("reports.jsonl"));
        write_dataset(&d, &sig, &rep).unwrap();
        let back: Dataset<f32> = load_dataset(&sig, &rep).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.languages.len(), 7);
    }

    #[test]
    fn empty_greek_text_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = generate_synthetic_corpus::<f32>(4, &Language::ALL, 5).unwrap();
        let (sig, rep) = (dir.path().join("s"), dir.path().join("r.jsonl"));
        write_dataset(&d, &sig, &rep).unwrap();
        d.records[2].texts.insert(Language::El, String::new());
        let lines: Vec<String> = d.records.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        fs::write(&rep, lines.join("\n")).unwrap();
        match load_dataset::<f32>(&sig, &rep) {
            Err(Error::Schema { index, msg }) => assert_eq!((index, msg.contains("el")), (2, true)),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_sidecars_and_missing_frames() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic_corpus::<f32>(2, &[Language::En], 5).unwrap();
        let (sig, rep) = (dir.path().join("s"), dir.path().join("r.jsonl"));
        write_dataset(&d, &sig, &rep).unwrap();
        let side = sig.join(format!("{}.json", d.frames[0].id));
        let good = fs::read_to_string(&side).unwrap();

        fs::write(&side, "{not json").unwrap();
        match load_dataset::<f32>(&sig, &rep) {
            Err(Error::Format { path, .. }) => assert_eq!(path, side),
            other => panic!("expected format error, got {other:?}"),
        }
        fs::write(&side, good.replace("[12,2500]", "[12,2000]")).unwrap();
        assert!(matches!(load_dataset::<f32>(&sig, &rep), Err(Error::Shape { .. })));
        fs::write(&side, good.replace("\"label\":", "\"labels\":[1,2],\"x\":")).unwrap();
        assert!(matches!(load_dataset::<f32>(&sig, &rep), Err(Error::Format { .. })));
        let idx = index_dataset(&sig, &rep).unwrap();
        assert_eq!(idx.excluded, vec![d.frames[0].id.clone()]);
        assert_eq!(idx.frames.len(), d.len() - 1);

        fs::remove_file(&side).unwrap();
        assert!(matches!(load_dataset::<f32>(&sig, &rep), Err(Error::Schema { index: 0, .. })));
    }
}
