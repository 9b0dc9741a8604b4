//! Post-norm transformer decoder with per-language output heads.

use cardiocap_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::Language;
use crate::nn::{init_linear, linear, Params};
use crate::tokenize::{init_embeddings, TokenSequence, Vocabulary, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Model width (E); also the token-embedding dimension.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
    /// Longest sequence the positional encoding supports.
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { width: 300, layers: 4, heads: 4, ff_width: 1200, dropout: 0.1, max_len: 128 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.layers == 0 || self.heads == 0 || self.ff_width == 0 || self.max_len < 3 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Output projection selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Token distribution over one language's vocabulary.
    Language(Language),
    /// Language of each token.
    Rtlp,
    /// Original-versus-replaced token detection.
    Electra,
}

impl Head {
    pub fn key(self) -> String {
        match self {
            Head::Language(l) => l.code().to_string(),
            Head::Rtlp => "rtlp".into(),
            Head::Electra => "electra".into(),
        }
    }
}

/// A `[batch, seq]` block of token ids, each tagged with the language whose
/// embedding table it indexes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
    pub langs: Vec<Language>,
}

impl TokenBatch {
    /// Stacks equally long sequences; every token uses its sequence's table.
    pub fn from_sequences(seqs: &[&TokenSequence]) -> Result<Self> {
        let seq = seqs.first().map(|s| s.len()).ok_or_else(|| Error::Batching("empty batch".into()))?;
        if seqs.iter().any(|s| s.len() != seq) {
            return Err(Error::Batching("sequences in a batch must share one padded length".into()));
        }
        let ids = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        let langs = seqs.iter().flat_map(|s| std::iter::repeat_n(s.language, seq)).collect();
        Ok(TokenBatch { batch: seqs.len(), seq, ids, langs })
    }

    /// Same ids, each position carrying its own language tag.
    pub fn mixed(batch: usize, seq: usize, ids: Vec<usize>, langs: Vec<Language>) -> Result<Self> {
        if ids.len() != batch * seq || langs.len() != batch * seq {
            return Err(Error::Batching(format!("expected {} ids and languages, got {} and {}", batch * seq, ids.len(), langs.len())));
        }
        Ok(TokenBatch { batch, seq, ids, langs })
    }

    /// Self-attention mask `[batch, seq, seq]`: keys must be non-padding and,
    /// when `causal`, not after the query.
    pub fn self_mask(&self, causal: bool) -> Vec<bool> {
        let s = self.seq;
        let mut mask = Vec::with_capacity(self.batch * s * s);
        for b in 0..self.batch {
            for i in 0..s {
                mask.extend((0..s).map(|j| self.ids[b * s + j] != PAD && (!causal || j <= i)));
            }
        }
        mask
    }
}

/// Cross-attention source.
#[derive(Clone, Copy, Debug)]
pub enum Memory {
    /// A single learned vector per sequence.
    Null,
    /// Encoder features `[batch * len, width]`.
    Features { var: Var, len: usize },
}

/// Hidden states `[batch * seq, width]` plus the attention nodes of every
/// layer, whose weights can be read back from the graph.
pub struct DecoderTrace {
    pub hidden: Var,
    pub self_attention: Vec<Var>,
    pub cross_attention: Vec<Var>,
}

/// Fixed sinusoidal positional encoding `[seq, width]`.
pub fn positional_encoding<T: Scalar>(seq: usize, width: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(seq * width);
    for pos in 0..seq {
        for i in 0..width {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 / rate;
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![seq, width], data).expect("length matches")
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub cfg: DecoderConfig,
    pub languages: Vec<Language>,
    pub params: ParamStore<T>,
}

fn init_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[width], T::one()));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]));
}

/// Adds one stack of layers plus a null-memory vector under `prefix`.
pub(crate) fn init_stack<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, cfg: &DecoderConfig, rng: &mut R) {
    let e = cfg.width;
    for n in 1..=cfg.layers {
        let l = format!("{prefix}.layer{n}");
        for attn in ["self_attn", "cross_attn"] {
            for proj in ["q", "k", "v", "o"] {
                init_linear(store, &format!("{l}.{attn}.{proj}"), e, e, rng);
            }
        }
        init_linear(store, &format!("{l}.ff1"), e, cfg.ff_width, rng);
        init_linear(store, &format!("{l}.ff2"), cfg.ff_width, e, rng);
        for k in 1..=3 {
            init_norm(store, &format!("{l}.norm{k}"), e);
        }
    }
    store.insert(format!("{prefix}.null_memory"), Tensor::uniform(&[1, e], 1.0 / (e as f64).sqrt(), rng));
}

impl<T: Scalar> Decoder<T> {
    /// Fresh decoder with embeddings and heads for each vocabulary and an
    /// RTLP head over all of them.
    pub fn new(cfg: DecoderConfig, vocabs: &[&Vocabulary], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut languages: Vec<Language> = vocabs.iter().map(|v| v.language()).collect();
        languages.sort();
        languages.dedup();
        if languages.len() != vocabs.len() || languages.is_empty() {
            return Err(Error::Config("need one vocabulary per distinct language".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_stack(&mut params, "dec", &cfg, &mut rng);
        for v in vocabs {
            let l = v.language();
            let table = init_embeddings::<T>(v, cfg.width, seed.wrapping_add(1 + l.index() as u64))?;
            params.insert(format!("emb.{l}"), table.matrix);
            init_linear(&mut params, &format!("dec.head.{l}"), cfg.width, v.len(), &mut rng);
        }
        init_linear(&mut params, "dec.head.rtlp", cfg.width, languages.len(), &mut rng);
        Ok(Decoder { cfg, languages, params })
    }

    /// Index of a language in this decoder's language list (RTLP class id).
    pub fn language_index(&self, lang: Language) -> Result<usize> {
        self.languages.iter().position(|&l| l == lang).ok_or_else(|| Error::Config(format!("decoder has no {lang} head")))
    }

    pub fn vocab_size(&self, lang: Language) -> Result<usize> {
        Ok(self.params.tensor(&format!("emb.{lang}")).map_err(|_| Error::Config(format!("decoder has no {lang} embeddings")))?.shape()[0])
    }

    /// Scaled token embeddings plus positions: `[batch * seq, width]`.
    fn embed<P: Params<T>>(&self, g: &mut Graph<T>, p: &P, tokens: &TokenBatch) -> Result<Var> {
        let e = self.cfg.width;
        let mut present: Vec<Language> = tokens.langs.clone();
        present.sort();
        present.dedup();
        let x = if let [only] = present[..] {
            let table = p.bind(g, &format!("emb.{only}"))?;
            g.embedding_lookup(table, &tokens.ids)?
        } else {
            // Stack the tables and shift each id by its table's offset.
            let mut tables = Vec::with_capacity(present.len());
            let mut offsets = Vec::with_capacity(present.len());
            let mut offset = 0;
            for &l in &present {
                let t = p.bind(g, &format!("emb.{l}"))?;
                offsets.push(offset);
                offset += g.shape(t)[0];
                tables.push(t);
            }
            let all = g.concat(&tables, 0)?;
            let ids: Vec<usize> = tokens
                .ids
                .iter()
                .zip(&tokens.langs)
                .map(|(&id, l)| id + offsets[present.binary_search(l).expect("listed")])
                .collect();
            g.embedding_lookup(all, &ids)?
        };
        let x = g.scale(x, (e as f64).sqrt())?;
        let x = g.reshape(x, &[tokens.batch, tokens.seq, e])?;
        let pe = g.input(positional_encoding(tokens.seq, e));
        let x = g.add(x, pe)?;
        Ok(g.reshape(x, &[tokens.batch * tokens.seq, e])?)
    }

    /// Runs the `prefix` layer stack (`"dec"`, or `"gen"` for the ELECTRA
    /// generator).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<P: Params<T>, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &P,
        prefix: &str,
        tokens: &TokenBatch,
        memory: Memory,
        causal: bool,
        rng: &mut R,
    ) -> Result<DecoderTrace> {
        if tokens.seq > self.cfg.max_len {
            return Err(Error::Capacity { len: tokens.seq, max: self.cfg.max_len });
        }
        let e = self.cfg.width;
        let mut x = self.embed(g, p, tokens)?;
        let mem = match memory {
            Memory::Null => {
                let ones = g.input(Tensor::full(&[tokens.batch, 1], T::one()));
                let null = p.bind(g, &format!("{prefix}.null_memory"))?;
                g.matmul(ones, null)?
            }
            Memory::Features { var, len } => {
                if g.shape(var) != [tokens.batch * len, e] {
                    return Err(Error::Shape { what: "decoder memory".into(), expected: vec![tokens.batch * len, e], found: g.shape(var).to_vec() });
                }
                var
            }
        };
        let mask = tokens.self_mask(causal);
        let mut trace = DecoderTrace { hidden: x, self_attention: Vec::new(), cross_attention: Vec::new() };
        for n in 1..=self.cfg.layers {
            let (y, sa, ca) = self.layer(g, p, &format!("{prefix}.layer{n}"), x, mem, tokens.batch, &mask, rng)?;
            trace.self_attention.push(sa);
            trace.cross_attention.push(ca);
            x = y;
        }
        trace.hidden = x;
        Ok(trace)
    }

    /// One decoder layer on `[batch * seq, width]` input. Returns the output
    /// and the self- and cross-attention nodes.
    #[allow(clippy::too_many_arguments)]
    pub fn layer<P: Params<T>, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &P,
        name: &str,
        x: Var,
        memory: Var,
        batch: usize,
        self_mask: &[bool],
        rng: &mut R,
    ) -> Result<(Var, Var, Var)> {
        let drop = self.cfg.dropout;
        let (a, sa) = self.attention(g, p, &format!("{name}.self_attn"), x, x, batch, Some(self_mask))?;
        let a = g.dropout(a, drop, rng)?;
        let x = self.add_norm(g, p, &format!("{name}.norm1"), x, a)?;
        let (c, ca) = self.attention(g, p, &format!("{name}.cross_attn"), x, memory, batch, None)?;
        let c = g.dropout(c, drop, rng)?;
        let x = self.add_norm(g, p, &format!("{name}.norm2"), x, c)?;
        let f = linear(g, p, &format!("{name}.ff1"), x)?;
        let f = g.relu(f)?;
        let f = g.dropout(f, drop, rng)?;
        let f = linear(g, p, &format!("{name}.ff2"), f)?;
        let f = g.dropout(f, drop, rng)?;
        let x = self.add_norm(g, p, &format!("{name}.norm3"), x, f)?;
        Ok((x, sa, ca))
    }

    fn add_norm<P: Params<T>>(&self, g: &mut Graph<T>, p: &P, name: &str, x: Var, branch: Var) -> Result<Var> {
        let s = g.add(x, branch)?;
        let gamma = p.bind(g, &format!("{name}.gamma"))?;
        let beta = p.bind(g, &format!("{name}.beta"))?;
        Ok(g.layernorm(s, gamma, beta)?)
    }

    /// Projected multi-head attention; returns the output and the raw
    /// attention node.
    fn attention<P: Params<T>>(&self, g: &mut Graph<T>, p: &P, name: &str, xq: Var, xkv: Var, batch: usize, mask: Option<&[bool]>) -> Result<(Var, Var)> {
        let q = linear(g, p, &format!("{name}.q"), xq)?;
        let k = linear(g, p, &format!("{name}.k"), xkv)?;
        let v = linear(g, p, &format!("{name}.v"), xkv)?;
        let att = g.multi_head_attention(q, k, v, self.cfg.heads, batch, mask)?;
        Ok((linear(g, p, &format!("{name}.o"), att)?, att))
    }

    /// Affine map of hidden states to head logits `[rows, classes]`.
    pub fn project<P: Params<T>>(&self, g: &mut Graph<T>, p: &P, prefix: &str, hidden: Var, head: Head) -> Result<Var> {
        let name = format!("{prefix}.head.{}", head.key());
        if p.buffer(&format!("{name}.w")).is_err() {
            return Err(Error::Argument(format!("no output head {name}")));
        }
        linear(g, p, &name, hidden)
    }

    /// Adds a generator stack (`gen.*`) with its own language heads. The
    /// generator shares the token embeddings.
    pub fn add_generator(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_stack(&mut self.params, "gen", &self.cfg, &mut rng);
        for l in self.languages.clone() {
            let c = self.vocab_size(l).expect("embeddings exist");
            init_linear(&mut self.params, &format!("gen.head.{l}"), self.cfg.width, c, &mut rng);
        }
    }

    pub fn add_electra_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_linear(&mut self.params, "dec.head.electra", self.cfg.width, 2, &mut rng);
    }

    /// Removes parameters that only serve pre-training objectives.
    pub fn discard_pretraining_heads(&mut self) {
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with("gen.") || n.starts_with("dec.head.rtlp") || n.starts_with("dec.head.electra"))
            .map(str::to_owned)
            .collect();
        for n in names {
            self.params.remove(&n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(lang: Language, words: &str) -> Vocabulary {
        Vocabulary::build(&[words], lang, 1).unwrap()
    }

    fn small() -> DecoderConfig {
        DecoderConfig { width: 16, layers: 2, heads: 4, ff_width: 32, dropout: 0.0, max_len: 16 }
    }

    fn run(dec: &Decoder<f64>, ids: &[usize], causal: bool) -> (Graph<f64>, DecoderTrace) {
        let mut g = Graph::new(false);
        let seq = TokenSequence { language: Language::En, ids: ids.to_vec(), true_length: ids.len() };
        let tb = TokenBatch::from_sequences(&[&seq]).unwrap();
        let t = dec.forward(&mut g, &dec.params, "dec", &tb, Memory::Null, causal, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (g, t)
    }

    #[test]
    fn single_position_attends_to_itself() {
        let v = vocab(Language::En, "sinus rhythm");
        let dec = Decoder::<f64>::new(small(), &[&v], 0).unwrap();
        let (g, t) = run(&dec, &[1], true);
        assert_eq!(g.shape(t.hidden), [1, 16]);
        for sa in t.self_attention {
            assert!(g.attention_weights(sa).unwrap().iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn causal_prefix_is_unaffected_by_later_tokens() {
        let v = vocab(Language::En, "a b c d");
        let dec = Decoder::<f64>::new(small(), &[&v], 1).unwrap();
        let (g1, t1) = run(&dec, &[1, 5, 6, 7, 2], true);
        let (g2, t2) = run(&dec, &[1, 5, 6, 8, 2], true);
        let (h1, h2) = (g1.data(t1.hidden), g2.data(t2.hidden));
        assert_eq!(h1[..3 * 16], h2[..3 * 16]);
        assert_ne!(h1[3 * 16..4 * 16], h2[3 * 16..4 * 16]);
    }

    #[test]
    fn bidirectional_first_position_sees_last_token() {
        let v = vocab(Language::En, "a b c d");
        let dec = Decoder::<f64>::new(small(), &[&v], 1).unwrap();
        let (g1, t1) = run(&dec, &[1, 5, 6, 7], false);
        let (g2, t2) = run(&dec, &[1, 5, 6, 8], false);
        assert_ne!(g1.data(t1.hidden)[..16], g2.data(t2.hidden)[..16]);
    }

    #[test]
    fn padding_keys_get_zero_weight() {
        let v = vocab(Language::En, "a b");
        let dec = Decoder::<f64>::new(small(), &[&v], 2).unwrap();
        let (g, t) = run(&dec, &[1, 5, 2, PAD, PAD], false);
        let w = g.attention_weights(t.self_attention[0]).unwrap();
        for row in w.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(&row[3..], [0.0, 0.0]);
        }
    }

    #[test]
    fn capacity_and_unknown_heads() {
        let v = vocab(Language::En, "a");
        let dec = Decoder::<f64>::new(small(), &[&v], 3).unwrap();
        let mut g = Graph::new(false);
        let tb = TokenBatch::mixed(1, 17, vec![1; 17], vec![Language::En; 17]).unwrap();
        let r = dec.forward(&mut g, &dec.params, "dec", &tb, Memory::Null, true, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Capacity { len: 17, max: 16 })));
        let (mut g, t) = run(&dec, &[1, 2], true);
        assert!(matches!(dec.project(&mut g, &dec.params, "dec", t.hidden, Head::Language(Language::Es)), Err(Error::Argument(_))));
        let logits = dec.project(&mut g, &dec.params, "dec", t.hidden, Head::Rtlp).unwrap();
        assert_eq!(g.shape(logits), [2, 1]);
    }

    #[test]
    fn head_widths_follow_vocabularies() {
        let en = vocab(Language::En, "a b c");
        let es = vocab(Language::Es, "x y");
        let dec = Decoder::<f32>::new(small(), &[&es, &en], 4).unwrap();
        assert_eq!(dec.languages, [Language::En, Language::Es]);
        assert_eq!(dec.params.tensor("dec.head.en.w").unwrap().shape(), [16, 8]);
        assert_eq!(dec.params.tensor("dec.head.es.w").unwrap().shape(), [16, 7]);
        assert_eq!(dec.params.tensor("dec.head.rtlp.w").unwrap().shape(), [16, 2]);
    }

    #[test]
    fn zero_hidden_zero_bias_gives_uniform_rows() {
        let v = vocab(Language::En, "a b c");
        let mut dec = Decoder::<f64>::new(small(), &[&v], 5).unwrap();
        dec.params.set("dec.head.en.b", Tensor::zeros(&[8])).unwrap();
        let mut g = Graph::new(false);
        let h = g.input(Tensor::zeros(&[3, 16]));
        let logits = dec.project(&mut g, &dec.params, "dec", h, Head::Language(Language::En)).unwrap();
        let probs = g.softmax(logits, 1).unwrap();
        assert!(g.data(probs).iter().all(|&p| (p - 0.125).abs() < 1e-12));
    }

    #[test]
    fn mixed_language_tokens_use_their_own_tables() {
        let en = vocab(Language::En, "a b");
        let es = vocab(Language::Es, "x y");
        let dec = Decoder::<f64>::new(small(), &[&en, &es], 6).unwrap();
        let mut g = Graph::new(false);
        let tb = TokenBatch::mixed(1, 3, vec![1, 5, 6], vec![Language::En, Language::Es, Language::En]).unwrap();
        let x = dec.embed(&mut g, &dec.params, &tb).unwrap();
        let pe = positional_encoding::<f64>(3, 16);
        let es_row = &dec.params.tensor("emb.es").unwrap().data()[5 * 16..6 * 16];
        for i in 0..16 {
            let expect = es_row[i] * 4.0 + pe.data()[16 + i];
            assert!((g.data(x)[16 + i] - expect).abs() < 1e-12);
        }
    }
}
