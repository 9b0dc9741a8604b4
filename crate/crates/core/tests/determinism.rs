//! Identical seeds give identical artifacts at every stage.

use std::collections::BTreeMap;
use std::fs;

use cardiocap::caption::*;
use cardiocap::corpus::*;
use cardiocap::decoder::{Decoder, DecoderConfig};
use cardiocap::encoder::{pretrain_encoder, Encoder, EncoderConfig};
use cardiocap::tokenize::Vocabulary;
use cardiocap::train::TrainConfig;
use cardiocap::Language;

#[test]
fn synthetic_corpus_files_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str| {
        let d = generate_synthetic_corpus::<f32>(6, &[Language::En, Language::El], 3).unwrap();
        let (sig, rep) = (dir.path().join(name), dir.path().join(format!("{name}.jsonl")));
        write_dataset(&d, &sig, &rep).unwrap();
        let mut files: Vec<_> = fs::read_dir(&sig).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        let mut bytes = fs::read(&rep).unwrap();
        for f in files {
            bytes.extend(f.file_name().unwrap().as_encoded_bytes());
            bytes.extend(fs::read(f).unwrap());
        }
        bytes
    };
    assert_eq!(write("a"), write("b"));
}

#[test]
fn encoder_and_captioning_runs_repeat_exactly() {
    let langs = [Language::En, Language::De];
    let mut d = generate_synthetic_corpus::<f32>(12, &langs, 5).unwrap();
    let m = make_splits(&d, (0.5, 0.5, 0.0), 1).unwrap();
    Standardizer::fit(&d.split(&m, Split::Train).frames).unwrap().apply(&mut d);
    let (tr, va) = (d.split(&m, Split::Train), d.split(&m, Split::Val));
    let vocabs: BTreeMap<Language, Vocabulary> = langs.iter().map(|&l| (l, Vocabulary::build(&d.texts(l), l, 1).unwrap())).collect();
    let ml = default_max_len(&d);

    let run = || {
        let enc = Encoder::new(EncoderConfig { feature_dim: 16, ..EncoderConfig::default() }, 3).unwrap();
        let enc = pretrain_encoder(enc, &tr, &va, &TrainConfig { batch_size: 4, max_epochs: 2, ..TrainConfig::encoder() }).unwrap();
        let refs: Vec<&Vocabulary> = vocabs.values().collect();
        let dec = Decoder::new(DecoderConfig { width: 16, layers: 1, heads: 2, ff_width: 32, dropout: 0.1, max_len: 64 }, &refs, 4).unwrap();
        let model = CaptioningModel::new(enc.encoder, dec, vocabs.clone()).unwrap();
        let (s_tr, s_va) = (CaptionSet::prepare(&model, &tr, ml).unwrap(), CaptionSet::prepare(&model, &va, ml).unwrap());
        let opts = FinetuneOptions { train: TrainConfig { batch_size: 4, max_epochs: 3, seed: 9, ..TrainConfig::finetune() }, eval_every: None, max_steps: None, target_bleu: None, max_len: ml };
        let out = finetune(model, &s_tr, &s_va, Mode::Multilingual, &opts).unwrap();
        let (table, reports) = evaluate_split(&out.model, &s_va, &langs, ml).unwrap();
        let params = cardiocap_tensor::io::encode(&out.model.decoder.params.to_tensor_map());
        (enc.history, out.history, table.to_csv(), reports, params)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.3, b.3);
    assert!(a.4 == b.4, "decoder parameters differ");
}
