//! Knowledge base of `(key, prompt)` pairs with prototype-gated retrieval.
//!
//! A query retrieves the entry with the highest dot product `z_q · z_k`
//! only if that score strictly exceeds `z_q · z_pt`, the score of the
//! learned prototype. Ties between entries go to the lowest id.

use std::path::Path;

use medrek_autodiff::{Precision, Tensor};
use serde::Serialize;

use crate::container::{self, Reader, Writer};
use crate::dataset::KnowledgeTriple;
use crate::editor::EditorModel;
use crate::encoder::{dot, RepVector, Role};
use crate::error::{Error, Result};
use crate::prompt_encoder::PromptMatrix;

const MAGIC: &[u8; 4] = b"MRKB";

#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    pub id: usize,
    pub key: RepVector,
    pub prompt: PromptMatrix,
    pub triple: KnowledgeTriple,
}

/// Outcome of scoring a query against every entry and the prototype.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scan {
    /// Best entry and its score, `None` for an empty base.
    pub best: Option<(usize, f64)>,
    pub prototype_score: f64,
}

impl Scan {
    /// Id of the retrieved entry, if the gate opens.
    pub fn hit(&self) -> Option<usize> {
        self.best.filter(|&(_, s)| s > self.prototype_score).map(|(id, _)| id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KbHeader {
    pub version: u32,
    pub d_rep: usize,
    pub prompt_tokens: usize,
    pub d_lm: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub d_rep: usize,
    pub prompt_tokens: usize,
    pub d_lm: usize,
    entries: Vec<KbEntry>,
}

impl KnowledgeBase {
    pub fn new(d_rep: usize, prompt_tokens: usize, d_lm: usize) -> Self {
        Self {
            d_rep,
            prompt_tokens,
            d_lm,
            entries: Vec::new(),
        }
    }

    pub fn for_editor(editor: &EditorModel) -> Self {
        Self::new(editor.d_rep(), editor.prompt_tokens(), editor.d_lm())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> Option<&KbEntry> {
        self.entries.get(id)
    }

    pub fn header(&self) -> KbHeader {
        KbHeader {
            version: container::VERSION,
            d_rep: self.d_rep,
            prompt_tokens: self.prompt_tokens,
            d_lm: self.d_lm,
            count: self.len(),
        }
    }

    /// Appends an entry with the next id. Values are stored at 32-bit
    /// precision so snapshots reload bit for bit.
    pub fn insert(&mut self, key: RepVector, prompt: PromptMatrix, triple: KnowledgeTriple) -> Result<&KbEntry> {
        if key.z.len() != self.d_rep {
            return Err(Error::Dimension {
                what: "key representation",
                expected: self.d_rep,
                got: key.z.len(),
            });
        }
        if prompt.tokens.shape() != [self.prompt_tokens, self.d_lm] {
            return Err(Error::Dimension {
                what: "prompt matrix",
                expected: self.prompt_tokens * self.d_lm,
                got: prompt.tokens.numel(),
            });
        }
        let mut key = key;
        key.role = Role::Key;
        key.z.iter_mut().for_each(|v| *v = Precision::F32.round(*v));
        let mut prompt = prompt;
        prompt.tokens.round_to(Precision::F32);
        let id = self.entries.len();
        self.entries.push(KbEntry { id, key, prompt, triple });
        Ok(&self.entries[id])
    }

    /// Encodes the object-free key and the triple's prompt, then appends.
    pub fn insert_edit(&mut self, triple: &KnowledgeTriple, editor: &EditorModel) -> Result<&KbEntry> {
        let key = editor.key_rep(triple)?;
        let prompt = editor.prompt(triple)?;
        self.insert(key, prompt, triple.clone())
    }

    pub fn scan(&self, z_q: &[f64], z_pt: &[f64]) -> Scan {
        let mut best: Option<(usize, f64)> = None;
        for e in &self.entries {
            let s = dot(z_q, &e.key.z);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((e.id, s));
            }
        }
        Scan {
            best,
            prototype_score: dot(z_q, z_pt),
        }
    }

    pub fn retrieve_rep(&self, z_q: &[f64], z_pt: &[f64]) -> Option<&KbEntry> {
        self.scan(z_q, z_pt).hit().map(|id| &self.entries[id])
    }

    pub fn retrieve(&self, query: &str, editor: &EditorModel) -> Result<Option<&KbEntry>> {
        let z_q = editor.query_rep(query)?;
        let z_pt = editor.prototype_rep()?;
        Ok(self.retrieve_rep(&z_q.z, &z_pt.z))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.usize(self.d_rep);
        w.usize(self.prompt_tokens);
        w.usize(self.d_lm);
        w.usize(self.entries.len());
        for e in &self.entries {
            w.usize(e.id);
            w.f32s(&e.key.z);
            w.f32s(e.prompt.tokens.data());
            w.str(&e.triple.subject);
            w.str(&e.triple.relation);
            w.str(&e.triple.object);
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, MAGIC)?;
        let d_rep = r.usize()?;
        let t = r.usize()?;
        let d_lm = r.usize()?;
        let count = r.usize()?;
        if d_rep == 0 || t == 0 || d_lm == 0 {
            return Err(Error::Corrupt("zero dimension in header".into()));
        }
        let mut kb = Self::new(d_rep, t, d_lm);
        for expected in 0..count {
            let id = r.usize()?;
            if id != expected {
                return Err(Error::Corrupt(format!("entry id {id} at position {expected}")));
            }
            let key = RepVector {
                z: r.f32s(d_rep)?,
                role: Role::Key,
            };
            let prompt = PromptMatrix {
                tokens: Tensor::new(&[t, d_lm], r.f32s(t * d_lm)?)?,
            };
            let triple = KnowledgeTriple::new(r.str()?, r.str()?, r.str()?);
            kb.entries.push(KbEntry { id, key, prompt, triple });
        }
        r.finish()?;
        Ok(kb)
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

    fn entry_kb(keys: &[Vec<f64>]) -> KnowledgeBase {
        let d = keys[0].len();
        let mut kb = KnowledgeBase::new(d, 1, 2);
        for (i, k) in keys.iter().enumerate() {
            kb.insert(
                RepVector {
                    z: k.clone(),
                    role: Role::Key,
                },
                PromptMatrix {
                    tokens: Tensor::new(&[1, 2], vec![i as f64, 0.5]).unwrap(),
                },
                KnowledgeTriple::new(format!("s{i}"), "r", "o"),
            )
            .unwrap();
        }
        kb
    }

    #[test]
    fn empty_base_retrieves_nothing() {
        let kb = KnowledgeBase::new(2, 1, 2);
        assert!(kb.retrieve_rep(&[1.0, 0.0], &[-5.0, 0.0]).is_none());
    }

    #[test]
    fn gate_and_argmax() {
        let kb = entry_kb(&[vec![0.9], vec![0.2], vec![0.1]]);
        assert_eq!(kb.retrieve_rep(&[1.0], &[0.5]).unwrap().id, 0);
        assert!(kb.retrieve_rep(&[1.0], &[0.95]).is_none());
        // Equal to the prototype score is not enough.
        assert!(kb.retrieve_rep(&[1.0], &[0.9f32 as f64]).is_none());
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let kb = entry_kb(&[vec![0.25], vec![0.75], vec![0.75]]);
        assert_eq!(kb.retrieve_rep(&[1.0], &[0.0]).unwrap().id, 1);
    }

    #[test]
    fn snapshot_round_trip_and_errors() {
        let kb = entry_kb(&[vec![0.1, 0.3], vec![-2.0, 1.0 / 3.0]]);
        let bytes = kb.to_bytes();
        assert_eq!(KnowledgeBase::from_bytes(&bytes).unwrap(), kb);
        assert!(matches!(KnowledgeBase::from_bytes(&[]), Err(Error::Truncated)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(KnowledgeBase::from_bytes(&bad), Err(Error::UnsupportedVersion(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(KnowledgeBase::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(KnowledgeBase::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated)));
    }

    #[test]
    fn dimension_mismatch_raises() {
        let mut kb = KnowledgeBase::new(3, 1, 2);
        let r = kb.insert(
            RepVector {
                z: vec![0.0; 2],
                role: Role::Key,
            },
            PromptMatrix {
                tokens: Tensor::zeros(&[1, 2]),
            },
            KnowledgeTriple::new("s", "r", "o"),
        );
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
