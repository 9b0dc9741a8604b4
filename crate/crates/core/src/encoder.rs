//! 1-D convolutional signal encoder with a classification head used for
//! supervised pre-training.

use cardiocap_tensor::{conv1d_out_len, Adam, AdamConfig, Graph, ParamStore, Reduction, RunningStats, Scalar, Tensor, UpdatedStats, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, SignalFrame, LEADS, NUM_CLASSES, SAMPLES};
use crate::error::{Error, Result};
use crate::nn::{init_linear, linear, Params};
use crate::train::{check_loss, EarlyStopping, EpochRecord, TrainConfig, Verdict};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub leads: usize,
    pub samples: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
    pub dropout: f64,
    /// Width of the temporal features (M).
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            leads: LEADS,
            samples: SAMPLES,
            channels: vec![32, 64, 128],
            kernel: 7,
            stride: 3,
            pool: 2,
            dropout: 0.1,
            feature_dim: 300,
            num_classes: NUM_CLASSES,
        }
    }
}

impl EncoderConfig {
    /// Number of temporal positions (L) left after the conv blocks.
    pub fn temporal_len(&self) -> usize {
        self.channels.iter().fold(self.samples, |n, _| conv1d_out_len(n, self.kernel, self.stride) / self.pool)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.kernel == 0 || self.stride == 0 || self.pool == 0 || self.feature_dim == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        let mut n = self.samples;
        for _ in &self.channels {
            if n < self.kernel {
                return Err(Error::Config(format!("signal of {} samples is too short for the conv stack", self.samples)));
            }
            n = conv1d_out_len(n, self.kernel, self.stride) / self.pool;
        }
        if n == 0 {
            return Err(Error::Config("conv stack leaves no temporal positions".into()));
        }
        Ok(())
    }
}

/// Running-statistics update for one batch-norm layer.
pub struct BatchNormUpdate<T> {
    pub layer: usize,
    pub stats: UpdatedStats<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub cfg: EncoderConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut c_in = cfg.leads;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            let bound = 1.0 / ((c_in * cfg.kernel) as f64).sqrt();
            let n = i + 1;
            params.insert(format!("enc.conv{n}.w"), Tensor::uniform(&[c_out, c_in, cfg.kernel], bound, &mut rng));
            params.insert(format!("enc.conv{n}.b"), Tensor::uniform(&[c_out], bound, &mut rng));
            params.insert(format!("enc.bn{n}.gamma"), Tensor::full(&[c_out], T::one()));
            params.insert(format!("enc.bn{n}.beta"), Tensor::zeros(&[c_out]));
            params.insert_buffer(format!("enc.bn{n}.running_mean"), Tensor::zeros(&[c_out]));
            params.insert_buffer(format!("enc.bn{n}.running_var"), Tensor::full(&[c_out], T::one()));
            c_in = c_out;
        }
        let layer4 = cfg.channels.len() + 1;
        init_linear(&mut params, &format!("enc.linear{layer4}"), c_in, cfg.feature_dim, &mut rng);
        init_linear(&mut params, &format!("enc.head{}", layer4 + 1), cfg.feature_dim, cfg.num_classes, &mut rng);
        Ok(Encoder { cfg, params })
    }

    /// Excludes (or re-includes) every encoder parameter from optimisation.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.set_frozen("enc.", frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().filter(|(_, p)| p.trainable).all(|(_, p)| p.frozen)
    }

    /// Conv blocks followed by the per-position projection: `[B, leads, D]`
    /// to `[B, L, M]`. In training mode the batch-norm updates are returned
    /// for the caller to commit.
    pub fn features<P: Params<T>, R: Rng + ?Sized>(&self, g: &mut Graph<T>, p: &P, x: Var, rng: &mut R) -> Result<(Var, Vec<BatchNormUpdate<T>>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.leads || shape[2] != self.cfg.samples {
            return Err(Error::Shape { what: "encoder input".into(), expected: vec![0, self.cfg.leads, self.cfg.samples], found: shape });
        }
        let mut h = x;
        let mut updates = Vec::new();
        for n in 1..=self.cfg.channels.len() {
            let w = p.bind(g, &format!("enc.conv{n}.w"))?;
            let b = p.bind(g, &format!("enc.conv{n}.b"))?;
            h = g.conv1d(h, w, Some(b), self.cfg.stride)?;
            let gamma = p.bind(g, &format!("enc.bn{n}.gamma"))?;
            let beta = p.bind(g, &format!("enc.bn{n}.beta"))?;
            let running = RunningStats { mean: p.buffer(&format!("enc.bn{n}.running_mean"))?, var: p.buffer(&format!("enc.bn{n}.running_var"))? };
            let (y, upd) = g.batchnorm1d(h, gamma, beta, running)?;
            if let Some(stats) = upd {
                updates.push(BatchNormUpdate { layer: n, stats });
            }
            h = g.relu(y)?;
            h = g.maxpool1d(h, self.cfg.pool)?;
            h = g.dropout(h, self.cfg.dropout, rng)?;
        }
        let h = g.transpose(h, 1, 2)?;
        let h = linear(g, p, &format!("enc.linear{}", self.cfg.channels.len() + 1), h)?;
        Ok((g.relu(h)?, updates))
    }

    /// Mean over temporal positions, then the class projection: `[B, C_cls]`.
    pub fn classify<P: Params<T>>(&self, g: &mut Graph<T>, p: &P, features: Var) -> Result<Var> {
        let pooled = g.mean(features, Some(1))?;
        linear(g, p, &format!("enc.head{}", self.cfg.channels.len() + 2), pooled)
    }

    pub fn commit(&mut self, updates: Vec<BatchNormUpdate<T>>) -> Result<()> {
        for u in updates {
            let n = u.layer;
            let c = u.stats.mean.len();
            self.params.set(&format!("enc.bn{n}.running_mean"), Tensor::new(vec![c], u.stats.mean)?)?;
            self.params.set(&format!("enc.bn{n}.running_var"), Tensor::new(vec![c], u.stats.var)?)?;
        }
        Ok(())
    }

    /// Evaluation-mode temporal features `[L, M]` for each frame.
    pub fn encode_features(&self, frames: &[&SignalFrame<T>]) -> Result<Vec<Tensor<T>>> {
        let (l, m) = (self.cfg.temporal_len(), self.cfg.feature_dim);
        let mut out = Vec::with_capacity(frames.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in frames.chunks(32) {
            let mut g = Graph::new(false);
            let x = g.input(batch_input(chunk, &self.cfg)?);
            let (f, _) = self.features(&mut g, &self.params, x, &mut rng)?;
            let data = g.data(f);
            out.extend(data.chunks(l * m).map(|c| Tensor::new(vec![l, m], c.to_vec()).expect("chunk length matches")));
        }
        Ok(out)
    }

    /// Evaluation-mode mean loss and accuracy.
    pub fn evaluate(&self, data: &Dataset<T>) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
        }
        let frames: Vec<&SignalFrame<T>> = data.frames.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in frames.chunks(64) {
            let mut g = Graph::new(false);
            let x = g.input(batch_input(chunk, &self.cfg)?);
            let (f, _) = self.features(&mut g, &self.params, x, &mut rng)?;
            let logits = self.classify(&mut g, &self.params, f)?;
            let labels: Vec<usize> = chunk.iter().map(|f| f.label).collect();
            let loss = g.cross_entropy(logits, &labels, usize::MAX, Reduction::Sum)?;
            loss_sum += g.data(loss)[0].as_f64();
            let k = self.cfg.num_classes;
            for (row, &y) in g.data(logits).chunks(k).zip(&labels) {
                correct += usize::from(argmax(row) == y);
            }
        }
        Ok((loss_sum / frames.len() as f64, correct as f64 / frames.len() as f64))
    }
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Stacks frames into a `[B, leads, samples]` tensor.
pub fn batch_input<T: Scalar>(frames: &[&SignalFrame<T>], cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(frames.len() * cfg.leads * cfg.samples);
    for f in frames {
        if f.leads.shape() != [cfg.leads, cfg.samples] {
            return Err(Error::Shape { what: format!("frame {}", f.id), expected: vec![cfg.leads, cfg.samples], found: f.leads.shape().to_vec() });
        }
        data.extend_from_slice(f.leads.data());
    }
    Ok(Tensor::new(vec![frames.len(), cfg.leads, cfg.samples], data)?)
}

/// An encoder restored to its best-validation-loss epoch.
#[derive(Clone, Debug)]
pub struct PretrainedEncoder<T> {
    pub encoder: Encoder<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Supervised arrhythmia classification with early stopping on
/// validation loss.
pub fn pretrain_encoder<T: Scalar>(mut encoder: Encoder<T>, train: &Dataset<T>, val: &Dataset<T>, cfg: &TrainConfig) -> Result<PretrainedEncoder<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("encoder pre-training needs non-empty train and validation sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut stopper = EarlyStopping::minimize(cfg.patience);
    let mut best = encoder.params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let frames: Vec<&SignalFrame<T>> = idx.iter().map(|&i| &train.frames[i]).collect();
            let labels: Vec<usize> = frames.iter().map(|f| f.label).collect();
            let mut g = Graph::new(true);
            let x = g.input(batch_input(&frames, &encoder.cfg)?);
            let (f, updates) = encoder.features(&mut g, &encoder.params, x, &mut rng)?;
            let logits = encoder.classify(&mut g, &encoder.params, f)?;
            let loss = g.cross_entropy(logits, &labels, usize::MAX, Reduction::Mean)?;
            let value = check_loss("encoder", g.data(loss)[0].as_f64())?;
            g.backward(loss)?;
            g.accumulate_into(&mut encoder.params)?;
            adam.step(&mut encoder.params)?;
            encoder.commit(updates)?;
            loss_sum += value * idx.len() as f64;
            seen += idx.len();
        }
        let (val_loss, val_acc) = encoder.evaluate(val)?;
        check_loss("encoder validation", val_loss)?;
        history.push(EpochRecord { epoch, train_loss: loss_sum / seen as f64, val_loss, val_metric: val_acc });
        match stopper.observe(epoch, val_loss) {
            Verdict::Improved => best = encoder.params.clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    encoder.params = best;
    Ok(PretrainedEncoder { encoder, history, best_epoch: stopper.best_epoch() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::Language;

    #[test]
    fn temporal_arithmetic() {
        let cfg = EncoderConfig::default();
        let mut n = cfg.samples;
        let mut trace = vec![n];
        for _ in 0..3 {
            n = (n - 7) / 3 + 1;
            trace.push(n);
            n /= 2;
            trace.push(n);
        }
        assert_eq!(trace, [2500, 832, 416, 137, 68, 21, 10]);
        assert_eq!(cfg.temporal_len(), 10);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let mut enc = Encoder::<f32>::new(EncoderConfig::default(), 1).unwrap();
        let names: Vec<String> = enc.params.names().filter(|n| n.ends_with(".b") || n.ends_with(".beta")).map(str::to_owned).collect();
        for n in names {
            let shape = enc.params.tensor(&n).unwrap().shape().to_vec();
            enc.params.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new(false);
        let x = g.input(Tensor::zeros(&[1, LEADS, SAMPLES]));
        let (f, _) = enc.features(&mut g, &enc.params, x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.shape(f), [1, 10, 300]);
        assert!(g.data(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_rows_are_independent_in_eval_mode() {
        let enc = Encoder::<f32>::new(EncoderConfig::default(), 2).unwrap();
        let d = generate(3);
        let a = enc.encode_features(&[&d.frames[0], &d.frames[1], &d.frames[0]]).unwrap();
        assert_eq!(a[0].data(), a[2].data());
        let b = enc.encode_features(&[&d.frames[1], &d.frames[0]]).unwrap();
        assert_eq!(a[1].data(), b[0].data());
        assert_eq!(a[0].data(), b[1].data());
    }

    #[test]
    fn rejects_wrong_shape() {
        let enc = Encoder::<f32>::new(EncoderConfig::default(), 2).unwrap();
        let mut g = Graph::new(false);
        let x = g.input(Tensor::zeros(&[1, LEADS, 2000]));
        assert!(matches!(enc.features(&mut g, &enc.params, x, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_head_loss_is_ln5() {
        let mut enc = Encoder::<f64>::new(EncoderConfig::default(), 3).unwrap();
        enc.params.set("enc.head5.w", Tensor::zeros(&[300, 5])).unwrap();
        enc.params.set("enc.head5.b", Tensor::zeros(&[5])).unwrap();
        let (loss, _) = enc.evaluate(&generate(4)).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    fn generate<T: Scalar>(n: usize) -> Dataset<T> {
        crate::corpus::generate_synthetic_corpus(n, &[Language::En], 9).unwrap()
    }
}
