//! Single- and batch-editing protocols and the metric suite.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::dataset::EditRecord;
use crate::editor::EditorModel;
use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, Scan};
use crate::lm::{answer_match, QaTokens, ToyLm};
use crate::prompt_encoder::PromptMatrix;

pub const DEFAULT_BATCH_SIZES: [usize; 4] = [1, 10, 50, 100];
/// Name of the locality probe set built from `locality_question`.
pub const PRIMARY_LOCALITY: &str = "loc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluencyConfig {
    pub w2: f64,
    pub w3: f64,
    /// Multiplies `Σ f log2 f`; `-1` gives the usual entropy.
    pub sign: f64,
    pub scale: f64,
    /// Greedy continuation length.
    pub steps: usize,
}

impl Default for FluencyConfig {
    fn default() -> Self {
        Self {
            w2: 1.0,
            w3: 1.0,
            sign: -1.0,
            scale: 1.0,
            steps: 20,
        }
    }
}

/// How prompts are chosen for a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    /// Prototype-gated knowledge-base retrieval.
    Gated,
    /// Never retrieves; the unedited model.
    Never,
    /// Always returns the record's own prompt for efficacy and generality
    /// queries and nothing for locality queries.
    Oracle,
}

/// Retrieval trace for one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub hit: bool,
    pub retrieved: Option<usize>,
    pub top1: Option<usize>,
    pub top1_score: Option<f64>,
    pub prototype_score: f64,
    /// Score of the record's own entry, when it is in the base.
    pub gt_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub index: usize,
    pub group: usize,
    /// Id of the record's own entry in its group's base.
    pub entry_id: usize,
    pub eff: QueryOutcome,
    pub gen: QueryOutcome,
    pub loc: QueryOutcome,
    /// Hits for additional locality probe sets, keyed by set name.
    pub extra_loc: BTreeMap<String, Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub batch_size: usize,
    pub n: usize,
    pub eff: f64,
    pub gen: f64,
    pub loc: f64,
    /// Locality per probe set; their mean enters `avg`.
    pub loc_sets: BTreeMap<String, f64>,
    pub flu: f64,
    pub avg: f64,
    #[serde(skip)]
    pub outcomes: Vec<SampleOutcome>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "method,batch_size,n,eff,gen,loc,flu,avg";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.method, self.batch_size, self.n, self.eff, self.gen, self.loc, self.flu, self.avg
        )
    }

    pub fn outcomes_jsonl(&self) -> String {
        self.outcomes
            .iter()
            .map(|o| serde_json::to_string(o).expect("outcome serializes") + "\n")
            .collect()
    }

    /// Percentage of locality queries for which no prompt was retrieved.
    pub fn loc_abstention_rate(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        let none = self.outcomes.iter().filter(|o| o.loc.retrieved.is_none()).count();
        100.0 * none as f64 / self.outcomes.len() as f64
    }
}

/// `((eff + gen)/2 + mean(loc))/2`.
pub fn average_score(eff: f64, gen: f64, loc: &[f64]) -> Result<f64> {
    if loc.is_empty() {
        return Err(Error::Empty("locality sub-metrics"));
    }
    let loc_mean = loc.iter().sum::<f64>() / loc.len() as f64;
    Ok(((eff + gen) / 2.0 + loc_mean) / 2.0)
}

fn ngram_entropy<T: Eq + Hash>(seq: &[T], n: usize) -> f64 {
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    for w in seq.windows(n) {
        *counts.entry(w).or_default() += 1;
    }
    let total = (seq.len() + 1 - n) as f64;
    let mut freqs: Vec<f64> = counts.values().map(|&c| c as f64 / total).collect();
    // Fixed summation order keeps the result independent of hashing.
    freqs.sort_by(f64::total_cmp);
    freqs.iter().map(|f| f * f.log2()).sum()
}

/// Weighted bi- and tri-gram entropy, averaged over sequences.
pub fn fluency<T: Eq + Hash>(seqs: &[Vec<T>], cfg: &FluencyConfig) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Empty("fluency sequences"));
    }
    let mut total = 0.0;
    for s in seqs {
        if s.len() < 3 {
            return Err(Error::TooShort { len: s.len(), min: 3 });
        }
        let h2 = cfg.sign * ngram_entropy(s, 2);
        let h3 = cfg.sign * ngram_entropy(s, 3);
        total += cfg.w2 * h2 + cfg.w3 * h3;
    }
    Ok(cfg.scale * total / seqs.len() as f64)
}

struct Probe {
    qa: QaTokens,
    plain: Vec<usize>,
}

impl Probe {
    fn new(lm: &ToyLm, question: &str, answer: &str) -> Result<Self> {
        let qa = lm.qa_tokens(question, answer)?;
        let plain = lm.answer_argmax(None, &qa)?;
        Ok(Self { qa, plain })
    }

    /// The edited model gives the same answer as the unedited one.
    fn preserved(&self, lm: &ToyLm, prompt: Option<&PromptMatrix>) -> Result<bool> {
        match prompt {
            None => Ok(true),
            Some(p) => Ok(lm.answer_argmax(Some(p), &self.qa)? == self.plain),
        }
    }
}

struct Query<'a> {
    kb: &'a KnowledgeBase,
    editor: &'a EditorModel,
    z_pt: &'a [f64],
    mode: RetrievalMode,
}

impl Query<'_> {
    /// Scan and the chosen entry id.
    fn run(&self, text: &str, own: Option<usize>) -> Result<(Scan, Option<usize>, Option<f64>)> {
        let z_q = self.editor.query_rep(text)?;
        let scan = self.kb.scan(&z_q.z, self.z_pt);
        let gt = own.and_then(|id| self.kb.get(id)).map(|e| crate::encoder::dot(&z_q.z, &e.key.z));
        let chosen = match self.mode {
            RetrievalMode::Gated => scan.hit(),
            RetrievalMode::Never => None,
            RetrievalMode::Oracle => own,
        };
        Ok((scan, chosen, gt))
    }
}

fn outcome(scan: Scan, chosen: Option<usize>, gt: Option<f64>, hit: bool) -> QueryOutcome {
    QueryOutcome {
        hit,
        retrieved: chosen,
        top1: scan.best.map(|b| b.0),
        top1_score: scan.best.map(|b| b.1),
        prototype_score: scan.prototype_score,
        gt_score: gt,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub method: String,
    pub mode: RetrievalMode,
    pub fluency: FluencyConfig,
    /// Skip greedy decoding; `flu` is then reported as 0.
    pub skip_fluency: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            method: "medrek".into(),
            mode: RetrievalMode::Gated,
            fluency: FluencyConfig::default(),
            skip_fluency: false,
        }
    }
}

/// Splits `records` into groups of `batch_size`; each group's edits go
/// into a fresh knowledge base before any of its records is evaluated.
pub fn run_protocol(
    records: &[EditRecord],
    batch_size: usize,
    editor: &EditorModel,
    lm: &ToyLm,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if batch_size == 0 || batch_size > records.len() {
        return Err(Error::BatchTooLarge {
            batch: batch_size,
            available: records.len(),
        });
    }
    let z_pt = editor.prototype_rep()?.z;
    let mut outcomes = Vec::with_capacity(records.len());
    let mut continuations = Vec::new();
    for (group, chunk) in records.chunks(batch_size).enumerate() {
        let mut kb = KnowledgeBase::for_editor(editor);
        for r in chunk {
            kb.insert_edit(&r.triple(), editor)?;
        }
        let q = Query {
            kb: &kb,
            editor,
            z_pt: &z_pt,
            mode: cfg.mode,
        };
        for (offset, r) in chunk.iter().enumerate() {
            let prompt_of = |id: Option<usize>| id.and_then(|i| kb.get(i)).map(|e| &e.prompt);

            let (scan, chosen, gt) = q.run(&r.efficacy_q, Some(offset))?;
            let qa = lm.qa_tokens(&r.efficacy_q, &r.edit_target)?;
            let hit = answer_match(&lm.forward_prompted(prompt_of(chosen), qa.input())?, qa.answer());
            let eff = outcome(scan, chosen, gt, hit);
            if !cfg.skip_fluency {
                let prefix = lm.question_tokens(&r.efficacy_q)?;
                continuations.push(lm.greedy(prompt_of(chosen), &prefix, cfg.fluency.steps)?);
            }

            let (scan, chosen, gt) = q.run(&r.generality_q, Some(offset))?;
            let qa = lm.qa_tokens(&r.generality_q, &r.edit_target)?;
            let hit = answer_match(&lm.forward_prompted(prompt_of(chosen), qa.input())?, qa.answer());
            let gen = outcome(scan, chosen, gt, hit);

            let mode_loc = |text: &str| -> Result<(Scan, Option<usize>, Option<f64>)> {
                let (scan, chosen, gt) = q.run(text, Some(offset))?;
                let chosen = if cfg.mode == RetrievalMode::Oracle { None } else { chosen };
                Ok((scan, chosen, gt))
            };
            let (scan, chosen, gt) = mode_loc(&r.locality_q)?;
            let hit = Probe::new(lm, &r.locality_q, &r.locality_gt)?.preserved(lm, prompt_of(chosen))?;
            let loc = outcome(scan, chosen, gt, hit);

            let mut extra_loc: BTreeMap<String, Vec<bool>> = BTreeMap::new();
            for p in &r.extra_locality {
                let (_, chosen, _) = mode_loc(&p.question)?;
                let hit = Probe::new(lm, &p.question, &p.answer)?.preserved(lm, prompt_of(chosen))?;
                extra_loc.entry(p.set.clone()).or_default().push(hit);
            }
            outcomes.push(SampleOutcome {
                index: group * batch_size + offset,
                group,
                entry_id: offset,
                eff,
                gen,
                loc,
                extra_loc,
            });
        }
    }
    let n = outcomes.len();
    let pct = |hits: usize, total: usize| 100.0 * hits as f64 / total as f64;
    let eff = pct(outcomes.iter().filter(|o| o.eff.hit).count(), n);
    let gen = pct(outcomes.iter().filter(|o| o.gen.hit).count(), n);
    let loc = pct(outcomes.iter().filter(|o| o.loc.hit).count(), n);
    let mut loc_sets = BTreeMap::new();
    loc_sets.insert(PRIMARY_LOCALITY.to_string(), loc);
    let mut extra: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for o in &outcomes {
        for (set, hits) in &o.extra_loc {
            let e = extra.entry(set.as_str()).or_default();
            e.0 += hits.iter().filter(|&&h| h).count();
            e.1 += hits.len();
        }
    }
    for (set, (h, t)) in extra {
        loc_sets.insert(set.to_string(), pct(h, t));
    }
    let loc_values: Vec<f64> = loc_sets.values().copied().collect();
    let avg = average_score(eff, gen, &loc_values)?;
    let flu = if cfg.skip_fluency {
        0.0
    } else {
        fluency(&continuations, &cfg.fluency)?
    };
    Ok(MetricReport {
        method: cfg.method.clone(),
        batch_size,
        n,
        eff,
        gen,
        loc,
        loc_sets,
        flu,
        avg,
        outcomes,
    })
}

/// The default batch sizes that fit in a split of `n` records.
pub fn default_batch_sizes(n: usize) -> Vec<usize> {
    DEFAULT_BATCH_SIZES.iter().copied().filter(|&b| b <= n).collect()
}
