//! Joint contrastive and editing objective, and the training loop.
//!
//! Per batch the loss is `L_contra + L_edit`. The edit terms run each
//! sample's prompt through the frozen LM in a separate graph; the prompt
//! gradient from that graph is then injected into the main graph through
//! the surrogate `<p, dL/dp>`, which yields exact gradients for the
//! encoder while keeping every graph small.

use std::sync::Arc;

use medrek_autodiff::{Adam, AdamConfig, AutodiffError, Graph, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EditRecord, KnowledgeTriple};
use crate::editor::EditorModel;
use crate::encoder::{RepVector, Role};
use crate::error::{Error, Result};
use crate::lm::{answer_rows, LmOutput, QaTokens, ToyLm};

/// What the contrastive candidates `R` are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastTarget {
    /// The stored key: the object-free `(s, r)` text through the key MLP.
    Key,
    /// The full triple through the value MLP.
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub contrast_target: ContrastTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 200,
            batch_size: 8,
            lr: 1e-5,
            temperature: 1.0,
            clip_norm: Some(1.0),
            contrast_target: ContrastTarget::Key,
        }
    }
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub eff: f64,
    pub gen: f64,
    pub loc: f64,
    pub no: f64,
    pub so: f64,
    pub contra: f64,
    pub edit: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, w: f64) {
        self.eff += w * o.eff;
        self.gen += w * o.gen;
        self.loc += w * o.loc;
        self.no += w * o.no;
        self.so += w * o.so;
        self.contra += w * o.contra;
        self.edit += w * o.edit;
        self.total += w * o.total;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

pub fn curve_to_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("epoch,eff,gen,loc,no,so,total\n");
    for r in rows {
        let l = &r.loss;
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, l.eff, l.gen, l.loc, l.no, l.so, l.total
        ));
    }
    s
}

/// `-ln softmax(q·c/τ)[positive]` over `candidates`, natural log.
pub fn infonce(q: &RepVector, positive: &RepVector, candidates: &[RepVector], temperature: f64) -> Result<f64> {
    let pos = candidates
        .iter()
        .position(|c| c.z == positive.z)
        .ok_or(Error::PositiveNotInCandidates)?;
    let scores: Vec<f64> = candidates.iter().map(|c| q.dot(c) / temperature).collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    Ok(lse - scores[pos])
}

/// Graph form of [`infonce`]; all vectors are `d × 1` columns.
pub fn infonce_graph(g: &mut Graph, q: Var, candidates: &[Var], positive: usize, temperature: f64) -> Result<Var> {
    if positive >= candidates.len() {
        return Err(Error::PositiveNotInCandidates);
    }
    let d = g.shape(q)[0];
    let rows = candidates
        .iter()
        .map(|&c| g.reshape(c, &[1, d]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let c = g.concat(&rows, 0)?;
    let s = g.matmul(c, q)?;
    let s = g.scale(s, 1.0 / temperature)?;
    let s = g.reshape(s, &[1, candidates.len()])?;
    Ok(g.cross_entropy(s, &[positive])?)
}

/// Query representations and contrastive candidate of one sample.
#[derive(Debug, Clone, Copy)]
pub struct ContrastSample {
    pub qe: Var,
    pub qg: Var,
    pub ql: Var,
    pub v: Var,
}

/// Batch means `(L_no, L_so)` with `R = {v_i} ∪ {z_pt}`.
pub fn contrastive_graph(g: &mut Graph, batch: &[ContrastSample], pt: Var, temperature: f64) -> Result<(Var, Var)> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    let mut r: Vec<Var> = batch.iter().map(|s| s.v).collect();
    r.push(pt);
    let mut no_terms = Vec::with_capacity(2 * b);
    let mut so_terms = Vec::with_capacity(3 * b);
    for (i, s) in batch.iter().enumerate() {
        no_terms.push(infonce_graph(g, s.qe, &r, i, temperature)?);
        no_terms.push(infonce_graph(g, s.qg, &r, i, temperature)?);
        so_terms.push(infonce_graph(g, s.ql, &r, b, temperature)?);
        let without: Vec<Var> = r.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).collect();
        let pt_idx = without.len() - 1;
        so_terms.push(infonce_graph(g, s.qe, &without, pt_idx, temperature)?);
        so_terms.push(infonce_graph(g, s.qg, &without, pt_idx, temperature)?);
    }
    let no = sum_vars(g, &no_terms)?;
    let no = g.scale(no, 1.0 / b as f64)?;
    let so = sum_vars(g, &so_terms)?;
    let so = g.scale(so, 1.0 / b as f64)?;
    Ok((no, so))
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Value-level `(L_no, L_so)` over explicit representations.
pub fn contrastive_losses(
    qe: &[RepVector],
    qg: &[RepVector],
    ql: &[RepVector],
    v: &[RepVector],
    prototype: &RepVector,
    temperature: f64,
) -> Result<(f64, f64)> {
    let b = qe.len();
    if qg.len() != b || ql.len() != b || v.len() != b {
        return Err(Error::Dimension {
            what: "contrastive batch",
            expected: b,
            got: qg.len().min(ql.len()).min(v.len()),
        });
    }
    let mut g = Graph::new();
    let mut col = |r: &RepVector| -> Result<Var> { Ok(g.constant(Tensor::column(r.z.clone())?)) };
    let mut batch = Vec::with_capacity(b);
    for i in 0..b {
        batch.push(ContrastSample {
            qe: col(&qe[i])?,
            qg: col(&qg[i])?,
            ql: col(&ql[i])?,
            v: col(&v[i])?,
        });
    }
    let pt = col(prototype)?;
    let (no, so) = contrastive_graph(&mut g, &batch, pt, temperature)?;
    Ok((g.value(no).data()[0], g.value(so).data()[0]))
}

/// A training record with its LM inputs tokenized and the plain model's
/// locality logits cached (the LM is frozen).
#[derive(Debug, Clone)]
pub struct Prepared {
    pub record: EditRecord,
    pub triple: KnowledgeTriple,
    pub eff: QaTokens,
    pub gen: QaTokens,
    pub loc: QaTokens,
    pub plain_loc: Arc<Tensor>,
}

pub fn prepare(records: &[EditRecord], lm: &ToyLm) -> Result<Vec<Prepared>> {
    records
        .iter()
        .map(|r| {
            let loc = lm.qa_tokens(&r.locality_q, &r.locality_gt)?;
            let out = lm.forward(loc.input())?;
            Ok(Prepared {
                record: r.clone(),
                triple: r.triple(),
                eff: lm.qa_tokens(&r.efficacy_q, &r.edit_target)?,
                gen: lm.qa_tokens(&r.generality_q, &r.edit_target)?,
                plain_loc: Arc::new(rows_of(&out, &loc)?),
                loc,
            })
        })
        .collect()
}

fn rows_of(out: &LmOutput, qa: &QaTokens) -> Result<Tensor> {
    let range = answer_rows(out, qa);
    let v = out.logits.shape()[1];
    let data = out.logits.data()[range.start * v..range.end * v].to_vec();
    Ok(Tensor::new(&[range.len(), v], data)?)
}

/// Edit terms for one prompt. Returns the graph, the prompt leaf and the
/// `(eff, gen, loc)` nodes.
fn edit_graph(lm: &ToyLm, prompt: &Tensor, s: &Prepared, g: &mut Graph) -> Result<(Var, [Var; 3])> {
    let p = g.variable(prompt.clone());
    let t = prompt.shape()[0];
    let answer_ce = |qa: &QaTokens, g: &mut Graph| -> Result<Var> {
        let logits = lm.forward_graph(g, Some(p), qa.input())?;
        let first = t + qa.answer_start - 1;
        let rows = g.slice(logits, 0, first, qa.answer_len)?;
        Ok(g.cross_entropy(rows, qa.answer())?)
    };
    let eff = answer_ce(&s.eff, g)?;
    let gen = answer_ce(&s.gen, g)?;
    let logits = lm.forward_graph(g, Some(p), s.loc.input())?;
    let rows = g.slice(logits, 0, t + s.loc.answer_start - 1, s.loc.answer_len)?;
    let plain = g.constant_shared(s.plain_loc.clone());
    let loc = g.kl_divergence(plain, rows)?;
    Ok((p, [eff, gen, loc]))
}

/// Loss of one batch, and optionally its gradient accumulated into
/// `editor.params`.
pub fn batch_loss(
    editor: &mut EditorModel,
    lm: &ToyLm,
    batch: &[&Prepared],
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<LossBreakdown> {
    let b = batch.len() as f64;
    let mut g = Graph::new();
    let pt = editor.prototype_graph(&mut g)?;
    let mut samples = Vec::with_capacity(batch.len());
    for s in batch {
        let r = &s.record;
        let v = match cfg.contrast_target {
            ContrastTarget::Key => editor.text_graph(&mut g, &s.triple.key_text(), Role::Key)?,
            ContrastTarget::Value => editor.text_graph(&mut g, &s.triple.full_text(), Role::Value)?,
        };
        samples.push(ContrastSample {
            qe: editor.text_graph(&mut g, &r.efficacy_q, Role::Query)?,
            qg: editor.text_graph(&mut g, &r.generality_q, Role::Query)?,
            ql: editor.text_graph(&mut g, &r.locality_q, Role::Query)?,
            v,
        });
    }
    let (no, so) = contrastive_graph(&mut g, &samples, pt, cfg.temperature)?;
    let mut out = LossBreakdown {
        no: g.value(no).data()[0],
        so: g.value(so).data()[0],
        ..Default::default()
    };
    let mut objective = g.add(no, so)?;
    for s in batch {
        let prompt = editor.prompt_graph(&mut g, &s.triple)?;
        let mut h = Graph::new();
        let (p, [eff, gen, loc]) = edit_graph(lm, g.value(prompt), s, &mut h)?;
        let (e, ge, l) = (h.value(eff).data()[0], h.value(gen).data()[0], h.value(loc).data()[0]);
        out.eff += e / b;
        out.gen += ge / b;
        out.loc += l / b;
        if with_grad {
            let sum = h.add(eff, gen)?;
            let sum = h.add(sum, loc)?;
            let grads = h.backward(sum)?;
            let gp = grads.get(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(prompt).numel()]);
            let gp = g.constant(Tensor::new(g.shape(prompt), gp)?);
            let inner = g.mul(prompt, gp)?;
            let inner = g.sum_all(inner)?;
            let inner = g.scale(inner, 1.0 / b)?;
            objective = g.add(objective, inner)?;
        }
    }
    out.contra = out.no + out.so;
    out.edit = out.eff + out.gen + out.loc;
    out.total = out.contra + out.edit;
    if !out.total.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    if with_grad {
        g.backward_into(objective, &mut editor.params)?;
    }
    Ok(out)
}

/// Mean loss over `data` in fixed batches, without gradients.
pub fn evaluate_loss(editor: &mut EditorModel, lm: &ToyLm, data: &[Prepared], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    let refs: Vec<&Prepared> = data.iter().collect();
    for chunk in refs.chunks(cfg.batch_size.max(1)) {
        let l = batch_loss(editor, lm, chunk, cfg, false)?;
        acc.add_scaled(&l, chunk.len() as f64 / data.len() as f64);
    }
    Ok(acc)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_loss: f64,
    /// Training-set means per epoch; row 0 is before any update.
    pub curve: Vec<CurveRow>,
    /// Selection-set means per epoch.
    pub valid_curve: Vec<CurveRow>,
    pub steps: usize,
}

fn nonfinite(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFiniteLoss { .. } | Error::Autodiff(AutodiffError::NonFinite { .. }) => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// Trains `editor` in place and leaves it at the checkpoint with the
/// lowest selection loss. Selection uses `valid` when non-empty and the
/// training set otherwise.
pub fn train(
    editor: &mut EditorModel,
    lm: &ToyLm,
    train_set: &[EditRecord],
    valid: &[EditRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(editor, lm, train_set, valid, cfg, |_, _| {})
}

/// [`train`] with a per-epoch callback receiving `(epoch, train loss)`.
pub fn train_with(
    editor: &mut EditorModel,
    lm: &ToyLm,
    train_set: &[EditRecord],
    valid: &[EditRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if cfg.batch_size == 0 || cfg.temperature <= 0.0 || cfg.lr < 0.0 {
        return Err(Error::Config("batch_size and temperature must be positive, lr non-negative".into()));
    }
    let train_data = prepare(train_set, lm)?;
    let valid_data = prepare(valid, lm)?;
    let select = |editor: &mut EditorModel, train_loss: LossBreakdown| -> Result<LossBreakdown> {
        if valid_data.is_empty() {
            Ok(train_loss)
        } else {
            evaluate_loss(editor, lm, &valid_data, cfg)
        }
    };

    let mut adam = Adam::new(
        &editor.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = evaluate_loss(editor, lm, &train_data, cfg).map_err(nonfinite(0))?;
    let initial_sel = select(editor, initial).map_err(nonfinite(0))?;
    let mut curve = vec![CurveRow { epoch: 0, loss: initial }];
    let mut valid_curve = vec![CurveRow {
        epoch: 0,
        loss: initial_sel,
    }];
    let mut best: (usize, f64, ParamSet) = (0, initial_sel.total, editor.params.clone());
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_data[i]).collect();
            editor.params.zero_grads();
            let l = batch_loss(editor, lm, &batch, cfg, true).map_err(nonfinite(step))?;
            acc.add_scaled(&l, chunk.len() as f64 / train_data.len() as f64);
            if let Some(c) = cfg.clip_norm {
                editor.params.clip_grad_norm(c);
            }
            adam.step(&mut editor.params)?;
            step += 1;
        }
        on_epoch(epoch, &acc);
        curve.push(CurveRow { epoch, loss: acc });
        let sel = select(editor, acc).map_err(nonfinite(step))?;
        valid_curve.push(CurveRow { epoch, loss: sel });
        if sel.total < best.1 {
            best = (epoch, sel.total, editor.params.clone());
        }
    }
    editor.params.copy_values_from(&best.2)?;
    editor.params.clear_grads();
    Ok(TrainOutcome {
        best_epoch: best.0,
        best_loss: best.1,
        curve,
        valid_curve,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(z: Vec<f64>) -> RepVector {
        RepVector { z, role: Role::Query }
    }

    #[test]
    fn infonce_examples() {
        let q = rep(vec![1.0, 0.0]);
        let pos = rep(vec![1.0, 0.0]);
        assert!(infonce(&q, &pos, std::slice::from_ref(&pos), 1.0).unwrap().abs() < 1e-12);
        let neg = rep(vec![0.0, 1.0]);
        let l = infonce(&q, &pos, &[pos.clone(), neg.clone()], 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
        let flat: Vec<RepVector> = (0..5).map(|i| rep(vec![0.0, i as f64])).collect();
        let l = infonce(&q, &flat[2], &flat, 1.0).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(infonce(&q, &neg, &[pos], 1.0), Err(Error::PositiveNotInCandidates)));
    }

    #[test]
    fn graph_infonce_matches_scalar_form() {
        let q = rep(vec![0.3, -1.1, 2.0]);
        let cands: Vec<RepVector> = vec![rep(vec![1.0, 0.5, -0.2]), rep(vec![-0.3, 0.1, 0.9]), rep(vec![0.0, 2.0, 0.4])];
        for tau in [1.0, 0.5] {
            let mut g = Graph::new();
            let qv = g.constant(Tensor::column(q.z.clone()).unwrap());
            let cv: Vec<Var> = cands.iter().map(|c| g.constant(Tensor::column(c.z.clone()).unwrap())).collect();
            let l = infonce_graph(&mut g, qv, &cv, 1, tau).unwrap();
            let expect = infonce(&q, &cands[1], &cands, tau).unwrap();
            assert!((g.value(l).data()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_single_sample_gives_ln2_terms() {
        let z = rep(vec![0.4, 0.7]);
        let one = std::slice::from_ref(&z);
        let (no, so) = contrastive_losses(one, one, one, one, &z, 1.0).unwrap();
        let ln2 = 2f64.ln();
        assert!((no - 2.0 * ln2).abs() < 1e-12);
        // Removing v from R leaves only the prototype for the last two terms.
        assert!((so - ln2).abs() < 1e-12);
    }

    #[test]
    fn aligned_geometry_gives_small_no_loss() {
        let big = 30.0;
        let e = |i: usize| {
            let mut z = vec![0.0; 4];
            z[i] = big;
            rep(z)
        };
        let qs: Vec<RepVector> = (0..3).map(e).collect();
        let (no, _) = contrastive_losses(&qs, &qs, &qs, &qs, &e(3), 1.0).unwrap();
        assert!(no < 1e-9);
    }

    #[test]
    fn so_terms_match_hand_assembled_candidates() {
        let qe = vec![rep(vec![1.0, 0.0]), rep(vec![0.0, 1.0])];
        let qg = vec![rep(vec![0.5, 0.5]), rep(vec![-1.0, 0.3])];
        let ql = vec![rep(vec![0.2, -0.4]), rep(vec![0.9, 0.9])];
        let v = vec![rep(vec![1.0, 1.0]), rep(vec![-0.5, 2.0])];
        let pt = rep(vec![0.1, -0.7]);
        let (no, so) = contrastive_losses(&qe, &qg, &ql, &v, &pt, 1.0).unwrap();
        let r = vec![v[0].clone(), v[1].clone(), pt.clone()];
        let mut e_no = 0.0;
        let mut e_so = 0.0;
        for i in 0..2 {
            e_no += infonce(&qe[i], &v[i], &r, 1.0).unwrap() + infonce(&qg[i], &v[i], &r, 1.0).unwrap();
            let without = vec![v[1 - i].clone(), pt.clone()];
            assert_eq!(without.len(), 2);
            e_so += infonce(&ql[i], &pt, &r, 1.0).unwrap()
                + infonce(&qe[i], &pt, &without, 1.0).unwrap()
                + infonce(&qg[i], &pt, &without, 1.0).unwrap();
        }
        assert!((no - e_no / 2.0).abs() < 1e-12);
        assert!((so - e_so / 2.0).abs() < 1e-12);
    }

    #[test]
    fn hand_kl_example() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[1, 2], vec![0.5f64.ln(), 0.5f64.ln()]).unwrap());
        let q = g.constant(Tensor::new(&[1, 2], vec![0.25f64.ln(), 0.75f64.ln()]).unwrap());
        let kl = g.kl_divergence(p, q).unwrap();
        let expect = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((g.value(kl).data()[0] - expect).abs() < 1e-12);
        assert!((expect - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn curve_csv_header() {
        let rows = vec![CurveRow {
            epoch: 0,
            loss: LossBreakdown::default(),
        }];
        assert!(curve_to_csv(&rows).starts_with("epoch,eff,gen,loc,no,so,total\n0,0,"));
    }
}
