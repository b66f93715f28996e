//! Seeded synthetic benchmark: a small world of `(entity, relation) → object`
//! facts, counterfactual edit records over it, and a QA corpus that teaches
//! the language model the original facts.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EditRecord, Split};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Question templates used for efficacy and locality questions.
pub const EFFICACY_TEMPLATES: [&str; 2] = ["what is the {r} of {s} ?", "which {r} belongs to {s} ?"];
/// Paraphrase templates; they share no word with the efficacy family.
pub const GENERALITY_TEMPLATES: [&str; 2] = ["{s} has {r} called", "give {r} for {s} :"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_records: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Number of subject-area tags.
    pub n_subjects: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_objects: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_records: 50,
            n_valid: 0,
            n_test: 0,
            n_subjects: 4,
            n_entities: 30,
            n_relations: 6,
            n_objects: 12,
        }
    }
}

/// A question with its answer, one pre-training example for the LM.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    /// A fact statement shown before the question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub records: Vec<EditRecord>,
    pub corpus: Vec<QaPair>,
}

fn fill(template: &str, s: &str, r: &str) -> String {
    template.replace("{s}", s).replace("{r}", r)
}

pub fn entity(i: usize) -> String {
    format!("ent{i}")
}

pub fn relation(j: usize) -> String {
    format!("rel{j}")
}

pub fn object(k: usize) -> String {
    format!("obj{k}")
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    if cfg.n_records < 2 {
        return Err(Error::Config("n_records must be at least 2".into()));
    }
    if cfg.n_valid + cfg.n_test > cfg.n_records {
        return Err(Error::Config("n_valid + n_test exceeds n_records".into()));
    }
    if cfg.n_subjects == 0 {
        return Err(Error::Config("n_subjects must be positive".into()));
    }
    if cfg.n_relations < 2 || cfg.n_objects < 2 {
        return Err(Error::VocabularyTooSmall(
            "need at least 2 relations and 2 objects".into(),
        ));
    }
    // Every edited subject keeps one relation free for its locality question.
    let capacity = cfg.n_entities * (cfg.n_relations - 1);
    if capacity < cfg.n_records {
        return Err(Error::VocabularyTooSmall(format!(
            "{} entities x {} relations support at most {capacity} records, {} requested",
            cfg.n_entities, cfg.n_relations, cfg.n_records
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world: Vec<usize> = (0..cfg.n_entities * cfg.n_relations)
        .map(|_| rng.gen_range(0..cfg.n_objects))
        .collect();
    let fact = |s: usize, r: usize| world[s * cfg.n_relations + r];

    let mut pairs: Vec<(usize, usize)> = (0..cfg.n_entities)
        .flat_map(|s| (0..cfg.n_relations).map(move |r| (s, r)))
        .collect();
    pairs.shuffle(&mut rng);
    let mut per_subject = vec![0usize; cfg.n_entities];
    let mut edits = Vec::with_capacity(cfg.n_records);
    for (s, r) in pairs {
        if edits.len() == cfg.n_records {
            break;
        }
        if per_subject[s] + 1 < cfg.n_relations {
            per_subject[s] += 1;
            edits.push((s, r));
        }
    }
    let edit_set: HashSet<(usize, usize)> = edits.iter().copied().collect();

    let n_train = cfg.n_records - cfg.n_valid - cfg.n_test;
    let mut records = Vec::with_capacity(cfg.n_records);
    let mut facts: Vec<(usize, usize)> = Vec::new();
    let mut seen_facts = HashSet::new();
    for (idx, &(s, r)) in edits.iter().enumerate() {
        let o = fact(s, r);
        let mut target = rng.gen_range(0..cfg.n_objects - 1);
        if target >= o {
            target += 1;
        }
        let free: Vec<usize> = (0..cfg.n_relations).filter(|&rl| !edit_set.contains(&(s, rl))).collect();
        let rl = *free.choose(&mut rng).expect("capacity check leaves a free relation");
        let (sn, rn, rln) = (entity(s), relation(r), relation(rl));
        let eff_t = EFFICACY_TEMPLATES.choose(&mut rng).unwrap();
        let gen_t = GENERALITY_TEMPLATES.choose(&mut rng).unwrap();
        let loc_t = EFFICACY_TEMPLATES.choose(&mut rng).unwrap();
        let split = if idx < n_train {
            Split::Train
        } else if idx < n_train + cfg.n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        records.push(EditRecord {
            efficacy_q: fill(eff_t, &sn, &rn),
            generality_q: fill(gen_t, &sn, &rn),
            locality_q: fill(loc_t, &sn, &rln),
            ground_truth: object(o),
            edit_target: object(target),
            locality_gt: object(fact(s, rl)),
            subject_tag: format!("area{}", s % cfg.n_subjects),
            split,
            subject: Some(sn),
            relation: Some(rn),
            extra_locality: Vec::new(),
        });
        for key in [(s, r), (s, rl)] {
            if seen_facts.insert(key) {
                facts.push(key);
            }
        }
    }

    let mut corpus = Vec::with_capacity(facts.len() * 4);
    for &(s, r) in &facts {
        for t in EFFICACY_TEMPLATES.iter().chain(GENERALITY_TEMPLATES.iter()) {
            corpus.push(QaPair {
                question: fill(t, &entity(s), &relation(r)),
                answer: object(fact(s, r)),
                context: None,
            });
        }
    }
    Ok(SyntheticBenchmark { records, corpus })
}

/// One `question<TAB>answer[<TAB>context]` line per pair.
pub fn corpus_to_tsv(corpus: &[QaPair]) -> String {
    let mut s = String::new();
    for p in corpus {
        let _ = match &p.context {
            Some(c) => writeln!(s, "{}\t{}\t{}", p.question, p.answer, c),
            None => writeln!(s, "{}\t{}", p.question, p.answer),
        };
    }
    s
}

pub fn corpus_from_tsv(text: &str) -> Result<Vec<QaPair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut parts = l.split('\t');
            let (Some(q), Some(a)) = (parts.next(), parts.next()) else {
                return Err(Error::MalformedLine {
                    line: i + 1,
                    message: "expected question<TAB>answer".into(),
                });
            };
            let context = parts.next().map(str::to_string);
            if parts.next().is_some() {
                return Err(Error::MalformedLine {
                    line: i + 1,
                    message: "too many columns".into(),
                });
            }
            Ok(QaPair {
                question: q.to_string(),
                answer: a.to_string(),
                context,
            })
        })
        .collect()
}

/// The vocabulary shared by the language model and the editor: every
/// token of the records (including triples and probe sets) and the corpus.
pub fn build_vocab(records: &[EditRecord], corpus: &[QaPair]) -> Vocab {
    let mut texts: Vec<String> = Vec::new();
    for r in records {
        let t = r.triple();
        texts.extend([
            r.efficacy_q.clone(),
            r.generality_q.clone(),
            r.locality_q.clone(),
            r.ground_truth.clone(),
            r.edit_target.clone(),
            r.locality_gt.clone(),
            t.full_text(),
        ]);
        for p in &r.extra_locality {
            texts.extend([p.question.clone(), p.answer.clone()]);
        }
    }
    for p in corpus {
        texts.extend([p.question.clone(), p.answer.clone()]);
        texts.extend(p.context.clone());
    }
    Vocab::build(texts.iter().map(String::as_str))
}

pub fn load_corpus(path: &Path) -> Result<Vec<QaPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    corpus_from_tsv(&text)
}
