//! A small causal transformer that plays the frozen model being edited.
//!
//! Two pre-norm blocks with multi-head self-attention and a ReLU MLP,
//! learned positional embeddings and an output head tied to the token
//! table. An optional prompt matrix is prepended to the token embeddings;
//! its rows take positions `0..T` and the tokens follow.

use std::path::Path;
use std::sync::Arc;

use medrek_autodiff::{Adam, AdamConfig, Graph, ParamId, ParamSet, Precision, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::init;
use crate::prompt_encoder::PromptMatrix;
use crate::synthetic::QaPair;
use crate::vocab::Vocab;

const MAGIC: &[u8; 4] = b"MRLM";
pub const MAX_VOCAB: usize = 512;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_lm: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Pre-training stops once mean answer cross-entropy falls below this.
    pub loss_threshold: f64,
    /// Largest random start position used during pre-training.
    pub position_jitter: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_lm: 64,
            heads: 4,
            layers: 2,
            mlp_ratio: 4,
            max_len: 64,
            seed: 0,
            lr: 3e-3,
            batch_size: 16,
            max_epochs: 300,
            loss_threshold: 0.05,
            position_jitter: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    ln2: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

/// Logits for every input position, prompt rows included.
#[derive(Debug, Clone, PartialEq)]
pub struct LmOutput {
    pub logits: Tensor,
    pub prefix: usize,
}

impl LmOutput {
    pub fn argmax(&self, row: usize) -> usize {
        argmax(self.logits.row(row))
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A question/answer example laid out as `<bos> q a <eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct QaTokens {
    pub tokens: Vec<usize>,
    /// Index in `tokens` of the first answer token.
    pub answer_start: usize,
    pub answer_len: usize,
}

impl QaTokens {
    /// Input for teacher-forced scoring: everything up to the last answer token.
    pub fn input(&self) -> &[usize] {
        &self.tokens[..self.answer_start + self.answer_len]
    }

    pub fn answer(&self) -> &[usize] {
        &self.tokens[self.answer_start..self.answer_start + self.answer_len]
    }

    pub fn question(&self) -> &[usize] {
        &self.tokens[..self.answer_start]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub answer_loss: f64,
    pub answer_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ToyLm {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: ParamId,
    frozen: Option<Frozen>,
}

#[derive(Debug, Clone)]
struct Frozen {
    weights: Vec<Arc<Tensor>>,
    embed_t: Arc<Tensor>,
}

impl ToyLm {
    pub fn new(config: LmConfig, vocab: Vocab) -> Result<Self> {
        let LmConfig {
            d_lm: d,
            heads,
            layers,
            mlp_ratio,
            max_len,
            ..
        } = config;
        if vocab.len() > MAX_VOCAB {
            return Err(Error::Config(format!("vocabulary of {} exceeds {MAX_VOCAB}", vocab.len())));
        }
        if d == 0 || heads == 0 || d % heads != 0 || layers == 0 || mlp_ratio == 0 || max_len == 0 {
            return Err(Error::Config("invalid language model dimensions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let embed = params.add("lm.embed", init::embedding(&mut rng, &[vocab.len(), d], 0.1));
        let pos = params.add("lm.pos", init::embedding(&mut rng, &[max_len, d], 0.1));
        let out_scale = 1.0 / (2.0 * layers as f64).sqrt();
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut proj = |name: &str, rows: usize, cols: usize, scale: f64| {
                let mut t = init::uniform(&mut rng, &[rows, cols], rows);
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
                params.add(format!("lm.{l}.{name}"), t)
            };
            let w_q = proj("w_q", d, d, 1.0);
            let w_k = proj("w_k", d, d, 1.0);
            let w_v = proj("w_v", d, d, 1.0);
            let w_o = proj("w_o", d, d, out_scale);
            let w_up = proj("w_up", d, d * mlp_ratio, 1.0);
            let w_down = proj("w_down", d * mlp_ratio, d, out_scale);
            let ln1 = params.add(format!("lm.{l}.ln1"), Tensor::filled(&[d], 1.0));
            let ln2 = params.add(format!("lm.{l}.ln2"), Tensor::filled(&[d], 1.0));
            blocks.push(Block {
                ln1,
                w_q,
                w_k,
                w_v,
                w_o,
                ln2,
                w_up,
                w_down,
            });
        }
        let ln_f = params.add("lm.ln_f", Tensor::filled(&[d], 1.0));
        Ok(Self {
            config,
            vocab,
            params,
            embed,
            pos,
            blocks,
            ln_f,
            frozen: None,
        })
    }

    pub fn d_lm(&self) -> usize {
        self.config.d_lm
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    /// Rounds weights to the stored precision, stops gradient flow into
    /// them and caches shared copies for inference.
    pub fn freeze(&mut self) {
        self.params.round_to(Precision::F32);
        self.params.clear_grads();
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.get_mut(id).requires_grad = false;
        }
        let weights: Vec<Arc<Tensor>> = self.params.ids().map(|id| Arc::new(self.params.get(id).clone())).collect();
        let e = self.params.get(self.embed);
        let (v, d) = e.dims2().expect("2-D embedding");
        let mut t = vec![0.0; v * d];
        for i in 0..v {
            for j in 0..d {
                t[j * v + i] = e.data()[i * d + j];
            }
        }
        let embed_t = Arc::new(Tensor::new(&[d, v], t).expect("valid shape"));
        self.frozen = Some(Frozen { weights, embed_t });
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    fn w(&self, g: &mut Graph, id: ParamId) -> Var {
        match &self.frozen {
            Some(f) => g.constant_shared(f.weights[id.index()].clone()),
            None => g.param(&self.params, id),
        }
    }

    pub fn qa_tokens(&self, question: &str, answer: &str) -> Result<QaTokens> {
        self.qa_tokens_with(None, question, answer)
    }

    /// `context <bos> q a <eos>`; the context, if any, precedes `<bos>`
    /// exactly where a prompt would sit.
    pub fn qa_tokens_with(&self, context: Option<&str>, question: &str, answer: &str) -> Result<QaTokens> {
        let q = self.vocab.encode(question)?;
        let a = self.vocab.encode(answer)?;
        let mut tokens = match context {
            Some(c) => self.vocab.encode(c)?,
            None => Vec::new(),
        };
        tokens.push(self.vocab.bos());
        tokens.extend_from_slice(&q);
        let answer_start = tokens.len();
        tokens.extend_from_slice(&a);
        tokens.push(self.vocab.eos());
        Ok(QaTokens {
            tokens,
            answer_start,
            answer_len: a.len(),
        })
    }

    pub fn pair_tokens(&self, p: &QaPair) -> Result<QaTokens> {
        self.qa_tokens_with(p.context.as_deref(), &p.question, &p.answer)
    }

    /// `<bos> q`, the prefix fed to the model when answering.
    pub fn question_tokens(&self, question: &str) -> Result<Vec<usize>> {
        let mut t = vec![self.vocab.bos()];
        t.extend(self.vocab.encode(question)?);
        Ok(t)
    }

    /// Builds the forward pass in `g`. Returns logits of shape
    /// `(T + tokens.len()) × V`.
    pub fn forward_graph(&self, g: &mut Graph, prompt: Option<Var>, tokens: &[usize]) -> Result<Var> {
        self.forward_at(g, prompt, tokens, 0)
    }

    fn forward_at(&self, g: &mut Graph, prompt: Option<Var>, tokens: &[usize], start: usize) -> Result<Var> {
        let d = self.config.d_lm;
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::OutOfVocabulary(format!("#{bad}")));
        }
        let t = match prompt {
            Some(p) => {
                let s = g.shape(p);
                if s.len() != 2 || s[1] != d {
                    return Err(Error::Dimension {
                        what: "prompt width",
                        expected: d,
                        got: s.get(1).copied().unwrap_or(0),
                    });
                }
                s[0]
            }
            None => 0,
        };
        let n = t + tokens.len();
        if start + n > self.config.max_len {
            return Err(Error::Overlength {
                len: start + n,
                max: self.config.max_len,
            });
        }
        let table = self.w(g, self.embed);
        let emb = g.gather(table, tokens)?;
        let x = match prompt {
            Some(p) => g.concat(&[p, emb], 0)?,
            None => emb,
        };
        let pos_table = self.w(g, self.pos);
        let pos = g.slice(pos_table, 0, start, n)?;
        let mut x = g.add(x, pos)?;

        let mask: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| if j > i { MASKED } else { 0.0 }))
            .collect();
        let mask = g.constant(Tensor::new(&[n, n], mask)?);
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let ln1 = self.w(g, b.ln1);
            let h = g.layer_norm(x, ln1)?;
            let (wq, wk, wv, wo) = (self.w(g, b.w_q), self.w(g, b.w_k), self.w(g, b.w_v), self.w(g, b.w_o));
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let mut outs = Vec::with_capacity(heads);
            for j in 0..heads {
                let qh = g.slice(q, 1, j * dh, dh)?;
                let kh = g.slice(k, 1, j * dh, dh)?;
                let vh = g.slice(v, 1, j * dh, dh)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, scale)?;
                let s = g.add(s, mask)?;
                let a = g.softmax(s, 1)?;
                outs.push(g.matmul(a, vh)?);
            }
            let o = g.concat(&outs, 1)?;
            let o = g.matmul(o, wo)?;
            x = g.add(x, o)?;
            let ln2 = self.w(g, b.ln2);
            let h = g.layer_norm(x, ln2)?;
            let (up, down) = (self.w(g, b.w_up), self.w(g, b.w_down));
            let h = g.matmul(h, up)?;
            let h = g.relu(h)?;
            let h = g.matmul(h, down)?;
            x = g.add(x, h)?;
        }
        let lnf = self.w(g, self.ln_f);
        let x = g.layer_norm(x, lnf)?;
        let et = match &self.frozen {
            Some(f) => g.constant_shared(f.embed_t.clone()),
            None => {
                let e = g.param(&self.params, self.embed);
                g.transpose(e)?
            }
        };
        Ok(g.matmul(x, et)?)
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<LmOutput> {
        self.forward_prompted(None, tokens)
    }

    pub fn forward_prompted(&self, prompt: Option<&PromptMatrix>, tokens: &[usize]) -> Result<LmOutput> {
        let mut g = Graph::new();
        let p = prompt.map(|p| g.constant(p.tokens.clone()));
        let logits = self.forward_graph(&mut g, p, tokens)?;
        Ok(LmOutput {
            logits: g.value(logits).clone(),
            prefix: prompt.map_or(0, PromptMatrix::rows),
        })
    }

    /// Teacher-forced argmax at each answer position.
    pub fn answer_argmax(&self, prompt: Option<&PromptMatrix>, qa: &QaTokens) -> Result<Vec<usize>> {
        let out = self.forward_prompted(prompt, qa.input())?;
        Ok(answer_rows(&out, qa).map(|r| out.argmax(r)).collect())
    }

    /// Greedy continuation of exactly `steps` tokens.
    pub fn greedy(&self, prompt: Option<&PromptMatrix>, tokens: &[usize], steps: usize) -> Result<Vec<usize>> {
        let mut seq = tokens.to_vec();
        for _ in 0..steps {
            let out = self.forward_prompted(prompt, &seq)?;
            let last = out.logits.shape()[0] - 1;
            seq.push(out.argmax(last));
        }
        Ok(seq.split_off(tokens.len()))
    }

    /// Mean answer cross-entropy and exact-answer accuracy over a corpus.
    pub fn answer_metrics(&self, corpus: &[QaPair]) -> Result<(f64, f64)> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let (mut loss, mut hits) = (0.0, 0usize);
        for p in corpus {
            let qa = self.pair_tokens(p)?;
            let out = self.forward_prompted(None, qa.input())?;
            let rows: Vec<usize> = answer_rows(&out, &qa).collect();
            let mut l = 0.0;
            for (&r, &t) in rows.iter().zip(qa.answer()) {
                l -= log_softmax_at(out.logits.row(r), t);
            }
            loss += l / rows.len() as f64;
            hits += usize::from(answer_match(&out, qa.answer()));
        }
        let n = corpus.len() as f64;
        Ok((loss / n, hits as f64 / n))
    }

    /// Trains a fresh model on `<bos> q a <eos>` sequences until the answer
    /// loss falls below the threshold, then freezes it.
    pub fn pretrain(config: LmConfig, vocab: Vocab, corpus: &[QaPair]) -> Result<(Self, PretrainReport)> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut lm = Self::new(config.clone(), vocab)?;
        let seqs = corpus
            .iter()
            .map(|p| lm.pair_tokens(p))
            .collect::<Result<Vec<_>>>()?;
        let mut adam = Adam::new(
            &lm.params,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let batch = config.batch_size.max(1);
        let mut step = 0usize;
        let mut last = (f64::INFINITY, 0.0);
        for epoch in 1..=config.max_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                lm.params.zero_grads();
                for &i in chunk {
                    let s = &seqs[i];
                    let max_start = config.max_len.saturating_sub(s.tokens.len());
                    let start = rng.gen_range(0..=config.position_jitter.min(max_start));
                    let mut g = Graph::new();
                    let logits = lm.forward_at(&mut g, None, &s.tokens[..s.tokens.len() - 1], start)?;
                    let ce = g.cross_entropy(logits, &s.tokens[1..])?;
                    let loss = g.scale(ce, 1.0 / chunk.len() as f64)?;
                    if !g.value(loss).is_finite() {
                        return Err(Error::NonFiniteLoss { step });
                    }
                    g.backward_into(loss, &mut lm.params)?;
                }
                lm.params.clip_grad_norm(1.0);
                adam.step(&mut lm.params)?;
                step += 1;
            }
            if epoch % 5 == 0 || epoch == config.max_epochs {
                last = lm.answer_metrics(corpus)?;
                if last.0 <= config.loss_threshold {
                    lm.freeze();
                    let (loss, acc) = lm.answer_metrics(corpus)?;
                    return Ok((
                        lm,
                        PretrainReport {
                            epochs: epoch,
                            answer_loss: loss,
                            answer_accuracy: acc,
                        },
                    ));
                }
            }
        }
        Err(Error::NonConvergence {
            loss: last.0,
            epochs: config.max_epochs,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.str(&self.vocab.to_text());
        w.params(&self.params);
        w.finish()
    }

    /// Loads a frozen model.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, MAGIC)?;
        let config: LmConfig = serde_json::from_str(&r.str()?).map_err(|e| Error::Corrupt(e.to_string()))?;
        let vocab = Vocab::from_text(&r.str()?)?;
        let mut lm = Self::new(config, vocab)?;
        r.params_into(&mut lm.params)?;
        r.finish()?;
        lm.freeze();
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

/// Rows whose logits predict the answer tokens of `qa`.
pub fn answer_rows(out: &LmOutput, qa: &QaTokens) -> std::ops::Range<usize> {
    let first = out.prefix + qa.answer_start - 1;
    first..first + qa.answer_len
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row[t] - lse
}

/// True iff the argmax at each of the last `target.len()` prediction rows
/// before the final input position equals the target token. The output
/// must come from an input ending in the target tokens.
pub fn answer_match(out: &LmOutput, target: &[usize]) -> bool {
    let n = out.logits.shape()[0];
    if target.is_empty() || target.len() >= n {
        return false;
    }
    let first = n - 1 - target.len();
    target.iter().enumerate().all(|(i, &t)| out.argmax(first + i) == t)
}
