//! Statistical and structural contracts of the corruption samplers.

use std::collections::BTreeMap;

use cardiocap::decoder::{Decoder, DecoderConfig};
use cardiocap::pretrain::*;
use cardiocap::tokenize::{EmbeddingTable, TokenSequence, Vocabulary, END, MASK, PAD, START};
use cardiocap::Language;
use cardiocap_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seq(lang: Language, body: &[usize], pad: usize) -> TokenSequence {
    let mut ids = vec![START];
    ids.extend_from_slice(body);
    ids.push(END);
    let true_length = ids.len();
    ids.extend(std::iter::repeat_n(PAD, pad));
    TokenSequence { language: lang, ids, true_length }
}

#[test]
fn mlm_rates_over_a_million_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = SamplerConfig::default();
    let vocab = 1005;
    let (mut eligible, mut selected, mut masked, mut random, mut kept) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let body: Vec<usize> = (5..25).collect();
    while eligible < 1_000_000 {
        let s = seq(Language::En, &body, 3);
        let c = corrupt_mlm(&s, &cfg, vocab, &mut rng).unwrap();
        eligible += body.len();
        for (i, r) in c.replaced.iter().enumerate() {
            if *r {
                selected += 1;
                match c.ids[i] {
                    MASK => masked += 1,
                    id if id == s.ids[i] => kept += 1,
                    _ => random += 1,
                }
            }
        }
        assert_eq!(c.ids[c.ids.len() - 3..], [PAD; 3]);
    }
    let frac = |n: usize| n as f64 / selected as f64;
    assert!((selected as f64 / eligible as f64 - 0.15).abs() < 0.005);
    assert!((frac(masked) - 0.8).abs() < 0.01);
    assert!((frac(random) - 0.1).abs() < 0.01);
    assert!((frac(kept) - 0.1).abs() < 0.01);
}

#[test]
fn position_inclusion_is_k_over_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = seq(Language::En, &(5..15).collect::<Vec<_>>(), 0);
    let mut hits = [0usize; 12];
    for _ in 0..100_000 {
        for p in select_positions(&s, 3, &mut rng).unwrap() {
            hits[p] += 1;
        }
    }
    assert_eq!((hits[0], hits[11]), (0, 0));
    for h in &hits[1..11] {
        assert!((*h as f64 / 1e5 - 0.3).abs() < 0.01);
    }
}

#[test]
fn target_language_is_uniform_over_the_others() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts: BTreeMap<Language, usize> = BTreeMap::new();
    for _ in 0..100_000 {
        *counts.entry(select_target_language(Language::Fr, &Language::ALL, &mut rng).unwrap()).or_default() += 1;
    }
    assert!(!counts.contains_key(&Language::Fr));
    assert_eq!(counts.len(), 6);
    for c in counts.values() {
        assert!((*c as f64 / 1e5 - 1.0 / 6.0).abs() < 0.01);
    }
}

#[test]
fn similarity_sampling_matches_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = EmbeddingTable { language: Language::Es, matrix: Tensor::<f64>::uniform(&[15, 6], 1.0, &mut rng) };
    let source = [0.9, -0.4, 0.3, 0.7, -0.8, 0.2];
    let cfg = SamplerConfig { target_token_mode: TargetTokenMode::Similarity, ..SamplerConfig::default() };
    let q = similarity_distribution(&source, &table, 1.0, false).unwrap();
    assert_eq!(q.len(), 10);
    let mut counts = [0usize; 10];
    let draws = 50_000;
    for _ in 0..draws {
        counts[sample_target_token(&source, &table, &cfg, &mut rng).unwrap() - 5] += 1;
    }
    let tv: f64 = counts.iter().zip(&q).map(|(&c, p)| (c as f64 / draws as f64 - p).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.02, "total variation {tv}");
}

fn two_language_decoder() -> (Decoder<f64>, BTreeMap<Language, EmbeddingTable<f64>>) {
    let en = Vocabulary::build(&["a b c d e f"], Language::En, 1).unwrap();
    let es = Vocabulary::build(&["u v w x y z"], Language::Es, 1).unwrap();
    let cfg = DecoderConfig { width: 8, layers: 1, heads: 2, ff_width: 16, dropout: 0.0, max_len: 16 };
    let dec = Decoder::new(cfg, &[&en, &es], 11).unwrap();
    let tables = embedding_tables(&dec).unwrap();
    (dec, tables)
}

#[test]
fn rtlp_loss_matches_manual_sum() {
    // B = 1 per language, S = 4
    let (dec, tables) = two_language_decoder();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let langs = dec.languages.clone();
    let cfg = SamplerConfig::default();
    let en = corrupt_rtlp_k(&seq(Language::En, &[5, 6], 0), 1, &cfg, &langs, &tables, &mut rng).unwrap();
    let es = corrupt_rtlp_k(&seq(Language::Es, &[7, 8], 0), 1, &cfg, &langs, &tables, &mut rng).unwrap();
    let batches = vec![vec![en.clone()], vec![es.clone()]];
    let mut g = Graph::new(false);
    let out = loss_rtlp(&mut g, &dec, &batches, &mut rng).unwrap();
    let loss = g.data(out.loss)[0];

    // recompute: log-softmax of the language logits at every position
    let mut manual = 0.0;
    for c in [&en, &es] {
        let mut g = Graph::new(false);
        let tokens = cardiocap::decoder::TokenBatch::mixed(1, 4, c.ids.clone(), c.token_langs.clone()).unwrap();
        let trace = dec.forward(&mut g, &dec.params, "dec", &tokens, cardiocap::decoder::Memory::Null, false, &mut rng).unwrap();
        let logits = dec.project(&mut g, &dec.params, "dec", trace.hidden, cardiocap::decoder::Head::Rtlp).unwrap();
        let rows = g.data(logits).to_vec();
        for (s, row) in rows.chunks(2).enumerate() {
            let lse = (row[0].exp() + row[1].exp()).ln();
            let y = dec.language_index(c.lang_labels[s]).unwrap();
            manual -= row[y] - lse;
        }
    }
    manual /= 8.0;
    assert!((loss - manual).abs() < 1e-6, "{loss} vs {manual}");

    let swapped = vec![vec![es], vec![en]];
    let mut g = Graph::new(false);
    let again = loss_rtlp(&mut g, &dec, &swapped, &mut rng).unwrap();
    assert!((g.data(again.loss)[0] - loss).abs() < 1e-12);
}

#[test]
fn electra_binary_term_at_half_is_ln2() {
    let (mut dec, _) = two_language_decoder();
    dec.add_generator(1);
    dec.add_electra_head(2);
    dec.params.set("dec.head.electra.w", Tensor::zeros(&[8, 2])).unwrap();
    dec.params.set("dec.head.electra.b", Tensor::zeros(&[2])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = SamplerConfig::default();
    let batches = vec![
        vec![corrupt_mlm(&seq(Language::En, &[5, 6, 7], 1), &cfg, 11, &mut rng).unwrap()],
        vec![corrupt_mlm(&seq(Language::Es, &[8, 9, 10], 1), &cfg, 11, &mut rng).unwrap()],
    ];
    let mut g = Graph::new(false);
    let e = loss_electra(&mut g, &dec, &batches, 50.0, &mut rng).unwrap();
    assert!((g.data(e.discriminator)[0] - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn rtlp_pretraining_beats_chance_and_is_deterministic() {
    let langs = [Language::En, Language::Es, Language::Fr];
    let data = cardiocap::corpus::generate_synthetic_corpus::<f32>(60, &langs, 2).unwrap();
    let vocabs: BTreeMap<Language, Vocabulary> = langs.iter().map(|&l| (l, Vocabulary::build(&data.texts(l), l, 1).unwrap())).collect();
    let texts: BTreeMap<Language, Vec<String>> = langs.iter().map(|&l| (l, data.texts(l).into_iter().map(String::from).collect())).collect();
    let corpora = encode_corpora(&texts, &vocabs, 24).unwrap();
    let refs: Vec<&Vocabulary> = vocabs.values().collect();
    let cfg = DecoderConfig { width: 16, layers: 1, heads: 2, ff_width: 32, dropout: 0.1, max_len: 32 };
    let train = cardiocap::train::TrainConfig { batch_size: 16, max_epochs: 3, seed: 4, ..cardiocap::train::TrainConfig::pretrain() };
    let run = || {
        let dec = Decoder::<f32>::new(cfg.clone(), &refs, 1).unwrap();
        pretrain_decoder(Task::Rtlp, dec, &corpora, &corpora, &train, &SamplerConfig::default()).unwrap()
    };
    let (a, b) = (run(), run());
    let last = a.history.last().unwrap();
    assert!(last.val_metric > 1.0 / 3.0, "replaced-token accuracy {}", last.val_metric);
    assert_eq!(a.history, b.history);
    assert!(a.decoder.params.contains("dec.head.rtlp.w"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rtlp_bookkeeping(seed in 0u64..10_000, len in 1usize..12, pad in 0usize..4, k_fraction in 0.0f64..1.0) {
        let (dec, tables) = two_language_decoder();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let body: Vec<usize> = (0..len).map(|i| 5 + i % 6).collect();
        let s = seq(Language::En, &body, pad);
        let original = s.clone();
        let cfg = SamplerConfig { k_fraction, ..SamplerConfig::default() };
        let c = corrupt_rtlp(&s, &cfg, &dec.languages, &tables, &mut rng).unwrap();
        prop_assert_eq!(&s, &original);
        prop_assert_eq!(c.replaced.iter().filter(|&&r| r).count(), cfg.rtlp_k(len));
        for i in 0..c.len() {
            prop_assert_eq!(c.lang_labels[i] == Language::En, !c.replaced[i]);
            if c.replaced[i] {
                prop_assert!(i > 0 && i <= len);
                prop_assert!(c.ids[i] >= 5);
            } else {
                prop_assert_eq!(c.ids[i], s.ids[i]);
            }
        }
    }
}
