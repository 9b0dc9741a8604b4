//! Finite-difference checks of the full encoder stack and one decoder layer.

use std::collections::HashMap;

use cardiocap::decoder::{Decoder, DecoderConfig};
use cardiocap::encoder::{Encoder, EncoderConfig};
use cardiocap::nn::BoundParams;
use cardiocap::tokenize::Vocabulary;
use cardiocap::Language;
use cardiocap_tensor::check::{gradcheck, GradCheckConfig};
use cardiocap_tensor::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-4;

fn sampled(step: f64) -> GradCheckConfig {
    GradCheckConfig { step, max_per_input: Some(6), ..Default::default() }
}

#[test]
fn encoder_stack() {
    let enc = Encoder::<f64>::new(EncoderConfig::default(), 3).unwrap();
    let names: Vec<String> = enc.params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut inputs = vec![Tensor::uniform(&[2, 12, 2500], 1.0, &mut rng)];
    inputs.extend(names.iter().map(|n| enc.params.tensor(n).unwrap().clone()));
    // a small step keeps the perturbation from crossing ReLU and max-pool kinks
    let report = gradcheck(&inputs, sampled(1e-6), |g, v: &[Var]| {
        let vars: HashMap<String, Var> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
        let p = BoundParams { vars, fallback: &enc.params };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (f, _) = enc.features(g, &p, v[0], &mut rng).map_err(to_tensor)?;
        enc.classify(g, &p, f).map_err(to_tensor)
    })
    .unwrap();
    eprintln!("encoder {:.3e} over {}", report.max_rel_error, report.checked);
    assert!(report.max_rel_error < TOL, "encoder: {:.3e} at {:?}", report.max_rel_error, report.worst);
    assert!(report.checked > 6 * names.len());
}

#[test]
fn decoder_layer() {
    let vocab = Vocabulary::build(&["sinus rhythm normal ecg"], Language::En, 1).unwrap();
    let dec = Decoder::<f64>::new(DecoderConfig::default(), &[&vocab], 5).unwrap();
    let names: Vec<String> = dec.params.names().filter(|n| n.starts_with("dec.layer1.")).map(str::to_owned).collect();
    assert_eq!(names.len(), 2 * 4 * 2 + 2 * 2 + 3 * 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut inputs = vec![Tensor::uniform(&[2 * 5, 300], 1.0, &mut rng), Tensor::uniform(&[2 * 10, 300], 1.0, &mut rng)];
    inputs.extend(names.iter().map(|n| dec.params.tensor(n).unwrap().clone()));
    // causal self-attention with the last position of the second row padded
    let mask: Vec<bool> = (0..2 * 5 * 5).map(|i| (i % 5) <= (i / 5) % 5 && !(i >= 25 && i % 5 == 4)).collect();
    let report = gradcheck(&inputs, sampled(STEP), |g, v: &[Var]| {
        let vars: HashMap<String, Var> = names.iter().cloned().zip(v[2..].iter().copied()).collect();
        let p = BoundParams { vars, fallback: &dec.params };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (out, _, _) = dec.layer(g, &p, "dec.layer1", v[0], v[1], 2, &mask, &mut rng).map_err(to_tensor)?;
        Ok(out)
    })
    .unwrap();
    eprintln!("decoder layer {:.3e} over {}", report.max_rel_error, report.checked);
    assert!(report.max_rel_error < TOL, "decoder layer: {:.3e} at {:?}", report.max_rel_error, report.worst);
}

fn to_tensor(e: cardiocap::Error) -> cardiocap_tensor::TensorError {
    match e {
        cardiocap::Error::Tensor(t) => t,
        other => panic!("unexpected error {other}"),
    }
}
