//! Value representation → `T × d_lm` continuous prompt.

use medrek_autodiff::{Graph, ParamId, ParamSet, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{RepVector, Role};
use crate::error::{Error, Result};
use crate::init;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Multihead,
    /// Skips attention and returns `reshape(W_q z_v)`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptEncoderConfig {
    pub prompt_tokens: usize,
    pub d_lm: usize,
    pub heads: usize,
    pub attention_mode: AttentionMode,
}

impl Default for PromptEncoderConfig {
    fn default() -> Self {
        Self {
            prompt_tokens: 3,
            d_lm: 64,
            heads: 4,
            attention_mode: AttentionMode::Multihead,
        }
    }
}

/// `tokens` is `T × d_lm`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMatrix {
    pub tokens: Tensor,
}

impl PromptMatrix {
    pub fn rows(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    pub config: PromptEncoderConfig,
    pub d_rep: usize,
    pub(crate) w_q: ParamId,
    pub(crate) w_k: ParamId,
    pub(crate) w_v: ParamId,
}

impl PromptEncoder {
    pub fn new(config: PromptEncoderConfig, d_rep: usize, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        let PromptEncoderConfig {
            prompt_tokens: t,
            d_lm,
            heads,
            ..
        } = config;
        if t == 0 || d_lm == 0 || d_rep == 0 {
            return Err(Error::Config("prompt encoder dimensions must be positive".into()));
        }
        if heads == 0 || d_lm % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide d_lm = {d_lm}")));
        }
        let w_q = params.add("pe.w_q", init::uniform(rng, &[t * d_lm, d_rep], d_rep));
        let w_k = params.add("pe.w_k", init::uniform(rng, &[d_lm, d_rep], d_rep));
        let w_v = params.add("pe.w_v", init::uniform(rng, &[d_lm, d_rep], d_rep));
        Ok(Self {
            config,
            d_rep,
            w_q,
            w_k,
            w_v,
        })
    }

    pub fn weights(&self) -> [ParamId; 3] {
        [self.w_q, self.w_k, self.w_v]
    }

    /// `z_v` is a `d_rep × 1` column; returns a `T × d_lm` node.
    pub fn generate_graph(&self, g: &mut Graph, params: &ParamSet, z_v: Var) -> Result<Var> {
        let PromptEncoderConfig {
            prompt_tokens: t,
            d_lm,
            heads,
            attention_mode,
        } = self.config;
        if g.shape(z_v) != [self.d_rep, 1] {
            return Err(Error::Dimension {
                what: "value representation",
                expected: self.d_rep,
                got: g.value(z_v).numel(),
            });
        }
        let w_q = g.param(params, self.w_q);
        let q = g.matmul(w_q, z_v)?;
        let q = g.reshape(q, &[t, d_lm])?;
        if attention_mode == AttentionMode::Linear {
            return Ok(q);
        }
        let w_k = g.param(params, self.w_k);
        let w_v = g.param(params, self.w_v);
        let k = g.matmul(w_k, z_v)?;
        let v = g.matmul(w_v, z_v)?;
        let v = g.reshape(v, &[1, d_lm])?;
        let dh = d_lm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for j in 0..heads {
            let qh = g.slice(q, 1, j * dh, dh)?;
            let kh = g.slice(k, 0, j * dh, dh)?;
            let vh = g.slice(v, 1, j * dh, dh)?;
            let scores = g.matmul(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, vh)?);
        }
        Ok(g.concat(&outs, 1)?)
    }

    pub fn generate(&self, params: &ParamSet, z_v: &RepVector) -> Result<PromptMatrix> {
        if z_v.role != Role::Value {
            return Err(Error::RoleMismatch {
                expected: "value",
                got: z_v.role.name(),
            });
        }
        if z_v.z.len() != self.d_rep {
            return Err(Error::Dimension {
                what: "value representation",
                expected: self.d_rep,
                got: z_v.z.len(),
            });
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::column(z_v.z.clone())?);
        let p = self.generate_graph(&mut g, params, z)?;
        Ok(PromptMatrix {
            tokens: g.value(p).clone(),
        })
    }
}
