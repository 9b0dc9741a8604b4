//! Indexing a converted dataset at full benchmark size without reading payloads.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;

use cardiocap::corpus::{index_dataset, ReportRecord, Split, SplitManifest};
use cardiocap::Language;

const PAYLOAD: u64 = 12 * 2500 * 4;

#[test]
fn benchmark_sized_manifest_reports_its_frame_counts() {
    let dir = tempfile::tempdir().unwrap();
    let sig = dir.path().join("signals");
    fs::create_dir(&sig).unwrap();
    let report = dir.path().join("reports.jsonl");
    let mut out = std::io::BufWriter::new(fs::File::create(&report).unwrap());

    // (patients, frames) per split
    let plan = [(Split::Train, 11_335usize, 22_670usize), (Split::Val, 1_642, 3_284), (Split::Test, 1_152, 3_304)];
    let mut manifest = SplitManifest { train: vec![], val: vec![], test: vec![], seed: 0 };
    for (split, patients, frames) in plan {
        let ids: Vec<String> = (0..patients).map(|i| format!("{}{i:05}", split.name())).collect();
        for f in 0..frames {
            let patient = &ids[f % patients];
            let frame = format!("{}_{f:05}", split.name());
            let raw = fs::File::create(sig.join(format!("{frame}.f32"))).unwrap();
            raw.set_len(PAYLOAD).unwrap();
            let label = f % 5;
            let side = format!(r#"{{"shape":[12,2500],"dtype":"f32","order":"row-major","patient_id":"{patient}","label":{label},"frame_index":{}}}"#, f / patients);
            fs::write(sig.join(format!("{frame}.json")), side).unwrap();
            let rec = ReportRecord { patient_id: patient.clone(), frame, texts: BTreeMap::from([(Language::En, "sinus rhythm".to_string())]) };
            writeln!(out, "{}", serde_json::to_string(&rec).unwrap()).unwrap();
        }
        match split {
            Split::Train => manifest.train = ids,
            Split::Val => manifest.val = ids,
            Split::Test => manifest.test = ids,
        }
    }
    out.flush().unwrap();
    drop(out);

    let index = index_dataset(&sig, &report).unwrap();
    assert!(index.excluded.is_empty());
    let counts = index.frame_counts(&manifest);
    assert_eq!(counts[&Split::Train], 22_670);
    assert_eq!(counts[&Split::Val], 3_284);
    assert_eq!(counts[&Split::Test], 3_304);
    let patients = |s| manifest.patients(s).len();
    assert_eq!((patients(Split::Train), patients(Split::Val), patients(Split::Test)), (11_335, 1_642, 1_152));
}
