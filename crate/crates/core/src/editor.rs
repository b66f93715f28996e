//! The trainable editing engine: encoder, prompt encoder, their parameters
//! and the vocabulary they read.

use std::path::Path;

use medrek_autodiff::{Graph, ParamSet, Precision, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Reader, Writer};
use crate::dataset::KnowledgeTriple;
use crate::encoder::{Encoder, EncoderConfig, RepVector, Role};
use crate::error::{Error, Result};
use crate::prompt_encoder::{PromptEncoder, PromptEncoderConfig, PromptMatrix};
use crate::vocab::Vocab;

const MAGIC: &[u8; 4] = b"MRED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EditorConfig {
    pub encoder: EncoderConfig,
    pub prompt: PromptEncoderConfig,
}

#[derive(Debug, Clone)]
pub struct EditorModel {
    pub config: EditorConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub prompt_encoder: PromptEncoder,
}

impl EditorModel {
    pub fn new(config: EditorConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::new(config.encoder.clone(), vocab.len(), vocab.cls(), &mut params, &mut rng)?;
        let prompt_encoder = PromptEncoder::new(config.prompt.clone(), config.encoder.d_rep, &mut params, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            params,
            encoder,
            prompt_encoder,
        })
    }

    pub fn d_rep(&self) -> usize {
        self.config.encoder.d_rep
    }

    pub fn prompt_tokens(&self) -> usize {
        self.config.prompt.prompt_tokens
    }

    pub fn d_lm(&self) -> usize {
        self.config.prompt.d_lm
    }

    pub fn tokens(&self, text: &str) -> Result<Vec<usize>> {
        self.vocab.encode(text)
    }

    pub fn text_graph(&self, g: &mut Graph, text: &str, role: Role) -> Result<Var> {
        let ids = self.tokens(text)?;
        self.encoder.encode_tokens(g, &self.params, &ids, role)
    }

    pub fn prototype_graph(&self, g: &mut Graph) -> Result<Var> {
        self.encoder.prototype_graph(g, &self.params)
    }

    /// Prompt node for a triple: value MLP over the full triple, then the
    /// prompt encoder.
    pub fn prompt_graph(&self, g: &mut Graph, triple: &KnowledgeTriple) -> Result<Var> {
        let z_v = self.text_graph(g, &triple.full_text(), Role::Value)?;
        self.prompt_encoder.generate_graph(g, &self.params, z_v)
    }

    pub fn query_rep(&self, text: &str) -> Result<RepVector> {
        self.encoder.encode_text(&self.params, &self.tokens(text)?, Role::Query)
    }

    /// Object-free key of a triple.
    pub fn key_rep(&self, triple: &KnowledgeTriple) -> Result<RepVector> {
        self.encoder.encode_text(&self.params, &self.tokens(&triple.key_text())?, Role::Key)
    }

    pub fn value_rep(&self, triple: &KnowledgeTriple) -> Result<RepVector> {
        self.encoder.encode_text(&self.params, &self.tokens(&triple.full_text())?, Role::Value)
    }

    pub fn prototype_rep(&self) -> Result<RepVector> {
        self.encoder.prototype_rep(&self.params)
    }

    pub fn prompt(&self, triple: &KnowledgeTriple) -> Result<PromptMatrix> {
        self.prompt_encoder.generate(&self.params, &self.value_rep(triple)?)
    }

    /// Rounds parameters to the stored precision so that a reloaded
    /// checkpoint reproduces every output bit for bit.
    pub fn freeze(&mut self) {
        self.params.round_to(Precision::F32);
        self.params.clear_grads();
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.str(&self.vocab.to_text());
        w.params(&self.params);
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, MAGIC)?;
        let config: EditorConfig = serde_json::from_str(&r.str()?).map_err(|e| Error::Corrupt(e.to_string()))?;
        let vocab = Vocab::from_text(&r.str()?)?;
        let mut model = Self::new(config, vocab, 0)?;
        r.params_into(&mut model.params)?;
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EditorModel {
        let vocab = Vocab::build(["alpha beta gamma delta"]);
        let config = EditorConfig {
            encoder: EncoderConfig {
                d_enc: 4,
                d_rep: 6,
                prototype_tokens: 2,
                shared_qk: true,
            },
            prompt: PromptEncoderConfig {
                prompt_tokens: 2,
                d_lm: 8,
                heads: 2,
                ..Default::default()
            },
        };
        EditorModel::new(config, vocab, 4).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut m = small();
        m.freeze();
        let back = EditorModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back.params.checksum(), m.params.checksum());
        let t = KnowledgeTriple::new("alpha", "beta", "gamma");
        assert_eq!(back.prompt(&t).unwrap(), m.prompt(&t).unwrap());
        assert_eq!(back.key_rep(&t).unwrap(), m.key_rep(&t).unwrap());
    }

    #[test]
    fn key_ignores_object() {
        let m = small();
        let a = m.key_rep(&KnowledgeTriple::new("alpha", "beta", "gamma")).unwrap();
        let b = m.key_rep(&KnowledgeTriple::new("alpha", "beta", "delta")).unwrap();
        assert_eq!(a, b);
        let va = m.value_rep(&KnowledgeTriple::new("alpha", "beta", "gamma")).unwrap();
        let vb = m.value_rep(&KnowledgeTriple::new("alpha", "beta", "delta")).unwrap();
        assert_ne!(va, vb);
    }
}
