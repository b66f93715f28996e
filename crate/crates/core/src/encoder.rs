//! Text → pooled feature → representation vectors.
//!
//! Texts are embedded by a trainable token table plus fixed sinusoidal
//! position offsets, pooled into `[cls; mean; max; min]`, and projected by
//! one of two residual MLPs of the form `ReLU(W2 (W1 x)) + W1 x`:
//!
//! * the shared query-key MLP, used for queries, stored keys and the
//!   retrieval prototype;
//! * the value MLP, used for full triples that feed the prompt encoder.
//!
//! With `shared_qk` off, keys get their own weight pair instead.

use medrek_autodiff::{Graph, ParamId, ParamSet, Reduce, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Key,
    Value,
    Prototype,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Key => "key",
            Role::Value => "value",
            Role::Prototype => "prototype",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepVector {
    pub z: Vec<f64>,
    pub role: Role,
}

impl RepVector {
    pub fn dot(&self, other: &RepVector) -> f64 {
        dot(&self.z, &other.z)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-token embeddings `H` (`L × d_enc`) and the sequence-start vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    pub h: Tensor,
    pub cls: Vec<f64>,
}

/// `[cls; mean(H); max(H); min(H)]`, length `4 · d_enc`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub x: Vec<f64>,
}

/// Anything that can turn a token sequence into contextual embeddings.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[usize]) -> Result<TokenEmbeddings>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_enc: usize,
    pub d_rep: usize,
    pub prototype_tokens: usize,
    pub shared_qk: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_enc: 32,
            d_rep: 64,
            prototype_tokens: 10,
            shared_qk: true,
        }
    }
}

/// Sinusoidal offset for position `pos`, dimension `i` of `d`.
pub fn sinusoid(pos: usize, i: usize, d: usize) -> f64 {
    let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
    let angle = pos as f64 * rate;
    if i.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub cls_id: usize,
    pub vocab_size: usize,
    pub(crate) embed: ParamId,
    pub(crate) w_q1: ParamId,
    pub(crate) w_q2: ParamId,
    pub(crate) w_k1: ParamId,
    pub(crate) w_k2: ParamId,
    /// Separate key weights, present only when `shared_qk` is off.
    pub(crate) key_weights: Option<(ParamId, ParamId)>,
    pub(crate) prototype: ParamId,
}

impl Encoder {
    pub fn new(config: EncoderConfig, vocab_size: usize, cls_id: usize, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        let EncoderConfig {
            d_enc,
            d_rep,
            prototype_tokens,
            shared_qk,
        } = config;
        if d_enc == 0 || d_rep == 0 || prototype_tokens == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let embed = params.add("enc.embed", init::embedding(rng, &[vocab_size, d_enc], 1.0));
        let w_q1 = params.add("enc.w_q1", init::uniform(rng, &[d_rep, 4 * d_enc], 4 * d_enc));
        let w_q2 = params.add("enc.w_q2", init::uniform(rng, &[d_rep, d_rep], d_rep));
        let w_k1 = params.add("enc.w_k1", init::uniform(rng, &[d_rep, 4 * d_enc], 4 * d_enc));
        let w_k2 = params.add("enc.w_k2", init::uniform(rng, &[d_rep, d_rep], d_rep));
        let key_weights = (!shared_qk).then(|| {
            let a = params.add("enc.w_key1", init::uniform(rng, &[d_rep, 4 * d_enc], 4 * d_enc));
            let b = params.add("enc.w_key2", init::uniform(rng, &[d_rep, d_rep], d_rep));
            (a, b)
        });
        let prototype = params.add("enc.prototype", init::embedding(rng, &[prototype_tokens, d_enc], 1.0));
        Ok(Self {
            config,
            cls_id,
            vocab_size,
            embed,
            w_q1,
            w_q2,
            w_k1,
            w_k2,
            key_weights,
            prototype,
        })
    }

    pub fn d_rep(&self) -> usize {
        self.config.d_rep
    }

    /// Weight pair `(W1, W2)` used for a role.
    pub fn weights(&self, role: Role) -> (ParamId, ParamId) {
        match role {
            Role::Query | Role::Prototype => (self.w_q1, self.w_q2),
            Role::Key => self.key_weights.unwrap_or((self.w_q1, self.w_q2)),
            Role::Value => (self.w_k1, self.w_k2),
        }
    }

    pub fn prototype_param(&self) -> ParamId {
        self.prototype
    }

    // ----- graph-level -----

    /// `(H, cls)` for a token sequence: `cls` sits at position 0 and the
    /// tokens at positions `1..=L`.
    pub fn embed_tokens(&self, g: &mut Graph, params: &ParamSet, tokens: &[usize]) -> Result<(Var, Var)> {
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::OutOfVocabulary(format!("#{bad}")));
        }
        let d = self.config.d_enc;
        let mut rows = Vec::with_capacity(tokens.len() + 1);
        rows.push(self.cls_id);
        rows.extend_from_slice(tokens);
        let table = g.param(params, self.embed);
        let emb = g.gather(table, &rows)?;
        let n = rows.len();
        let pe: Vec<f64> = (0..n).flat_map(|p| (0..d).map(move |i| sinusoid(p, i, d))).collect();
        let pe = g.constant(Tensor::new(&[n, d], pe)?);
        let full = g.add(emb, pe)?;
        let cls = g.slice(full, 0, 0, 1)?;
        let h = g.slice(full, 0, 1, tokens.len())?;
        Ok((h, cls))
    }

    /// Pooled column vector `[cls; mean; max; min]` of shape `[4·d, 1]`.
    pub fn pool(&self, g: &mut Graph, h: Var, cls: Var) -> Result<Var> {
        pool_graph(g, h, cls)
    }

    /// `ReLU(W2 (W1 x)) + W1 x` with the weights of `role`.
    pub fn encode(&self, g: &mut Graph, params: &ParamSet, x: Var, role: Role) -> Result<Var> {
        let (w1, w2) = self.weights(role);
        let w1 = g.param(params, w1);
        let w2 = g.param(params, w2);
        let h = g.matmul(w1, x)?;
        let inner = g.matmul(w2, h)?;
        let act = g.relu(inner)?;
        Ok(g.add(act, h)?)
    }

    pub fn encode_tokens(&self, g: &mut Graph, params: &ParamSet, tokens: &[usize], role: Role) -> Result<Var> {
        let (h, cls) = self.embed_tokens(g, params, tokens)?;
        let x = self.pool(g, h, cls)?;
        self.encode(g, params, x, role)
    }

    /// The prototype tokens pooled (first row as `cls`) and passed through
    /// the shared MLP.
    pub fn prototype_graph(&self, g: &mut Graph, params: &ParamSet) -> Result<Var> {
        let tokens = g.param(params, self.prototype);
        let cls = g.slice(tokens, 0, 0, 1)?;
        let x = pool_graph(g, tokens, cls)?;
        self.encode(g, params, x, Role::Prototype)
    }

    // ----- value-level -----

    pub fn embed_text(&self, params: &ParamSet, tokens: &[usize]) -> Result<TokenEmbeddings> {
        let mut g = Graph::new();
        let (h, cls) = self.embed_tokens(&mut g, params, tokens)?;
        Ok(TokenEmbeddings {
            h: g.value(h).clone(),
            cls: g.value(cls).data().to_vec(),
        })
    }

    fn run_mlp(&self, params: &ParamSet, x: &PooledFeature, role: Role) -> Result<RepVector> {
        let expected = 4 * self.config.d_enc;
        if x.x.len() != expected {
            return Err(Error::Dimension {
                what: "pooled feature",
                expected,
                got: x.x.len(),
            });
        }
        let mut g = Graph::new();
        let xv = g.constant(Tensor::column(x.x.clone())?);
        let z = self.encode(&mut g, params, xv, role)?;
        Ok(RepVector {
            z: g.value(z).data().to_vec(),
            role,
        })
    }

    /// Shared query-key MLP. `role` is `Query` or `Key`.
    pub fn encode_shared(&self, params: &ParamSet, x: &PooledFeature, role: Role) -> Result<RepVector> {
        if !matches!(role, Role::Query | Role::Key) {
            return Err(Error::RoleMismatch {
                expected: "query or key",
                got: role.name(),
            });
        }
        self.run_mlp(params, x, role)
    }

    pub fn encode_value(&self, params: &ParamSet, x: &PooledFeature) -> Result<RepVector> {
        self.run_mlp(params, x, Role::Value)
    }

    pub fn encode_text(&self, params: &ParamSet, tokens: &[usize], role: Role) -> Result<RepVector> {
        let mut g = Graph::new();
        let z = self.encode_tokens(&mut g, params, tokens, role)?;
        Ok(RepVector {
            z: g.value(z).data().to_vec(),
            role,
        })
    }

    pub fn prototype_rep(&self, params: &ParamSet) -> Result<RepVector> {
        let mut g = Graph::new();
        let z = self.prototype_graph(&mut g, params)?;
        Ok(RepVector {
            z: g.value(z).data().to_vec(),
            role: Role::Prototype,
        })
    }

    pub fn provider<'a>(&'a self, params: &'a ParamSet) -> ToyEmbedder<'a> {
        ToyEmbedder { encoder: self, params }
    }
}

fn pool_graph(g: &mut Graph, h: Var, cls: Var) -> Result<Var> {
    let mean = g.reduce(h, Reduce::Mean, 0)?;
    let max = g.reduce(h, Reduce::Max, 0)?;
    let min = g.reduce(h, Reduce::Min, 0)?;
    let cls_row = {
        let d = g.value(cls).numel();
        g.reshape(cls, &[1, d])?
    };
    let x = g.concat(&[cls_row, mean, max, min], 1)?;
    let n = g.value(x).numel();
    Ok(g.reshape(x, &[n, 1])?)
}

/// Pools precomputed token embeddings.
pub fn pool_features(e: &TokenEmbeddings) -> Result<PooledFeature> {
    let (_, d) = e.h.dims2().ok_or(Error::Dimension {
        what: "token embeddings rank",
        expected: 2,
        got: e.h.rank(),
    })?;
    if e.cls.len() != d {
        return Err(Error::Dimension {
            what: "cls width",
            expected: d,
            got: e.cls.len(),
        });
    }
    let mut g = Graph::new();
    let h = g.constant(e.h.clone());
    let cls = g.constant(Tensor::new(&[1, d], e.cls.clone())?);
    let x = pool_graph(&mut g, h, cls)?;
    Ok(PooledFeature {
        x: g.value(x).data().to_vec(),
    })
}

/// The toy embedding table exposed through [`EmbeddingProvider`].
pub struct ToyEmbedder<'a> {
    encoder: &'a Encoder,
    params: &'a ParamSet,
}

impl EmbeddingProvider for ToyEmbedder<'_> {
    fn dim(&self) -> usize {
        self.encoder.config.d_enc
    }

    fn embed(&self, tokens: &[usize]) -> Result<TokenEmbeddings> {
        self.encoder.embed_text(self.params, tokens)
    }
}
