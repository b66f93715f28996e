//! Benchmark records: schema, JSONL loading, overlap cleaning and subject
//! statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// An additional locality question scored as its own sub-metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityProbe {
    pub set: String,
    pub question: String,
    pub answer: String,
}

/// One benchmark row. Field names on disk follow the benchmark's table
/// headers in snake_case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    #[serde(rename = "efficacy_question")]
    pub efficacy_q: String,
    #[serde(rename = "generality_question")]
    pub generality_q: String,
    #[serde(rename = "locality_question")]
    pub locality_q: String,
    pub ground_truth: String,
    #[serde(rename = "counterfactual_edit_target")]
    pub edit_target: String,
    #[serde(rename = "locality_ground_truth")]
    pub locality_gt: String,
    pub subject_tag: String,
    pub split: Split,
    /// Subject of the edited fact, when the source provides triples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_locality: Vec<LocalityProbe>,
}

/// Trim and case-fold, the match key for overlap detection.
pub fn normalize(text: &str) -> String {
    text.trim().to_lowercase()
}

impl EditRecord {
    pub fn validate(&self, line: usize) -> Result<()> {
        let fields: [(&'static str, &str); 7] = [
            ("efficacy_question", &self.efficacy_q),
            ("generality_question", &self.generality_q),
            ("locality_question", &self.locality_q),
            ("ground_truth", &self.ground_truth),
            ("counterfactual_edit_target", &self.edit_target),
            ("locality_ground_truth", &self.locality_gt),
            ("subject_tag", &self.subject_tag),
        ];
        for (field, value) in fields {
            if value.trim().is_empty() {
                return Err(Error::InvalidField {
                    line,
                    field,
                    message: "must not be empty".into(),
                });
            }
        }
        if normalize(&self.edit_target) == normalize(&self.ground_truth) {
            return Err(Error::InvalidField {
                line,
                field: "counterfactual_edit_target",
                message: "must differ from ground_truth".into(),
            });
        }
        Ok(())
    }

    pub fn triple(&self) -> KnowledgeTriple {
        KnowledgeTriple::from_record(self)
    }
}

/// A fact `(subject, relation, object)`. The retrieval key is built from
/// subject and relation only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl KnowledgeTriple {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }

    /// The edit fact of a record. Records without explicit subject and
    /// relation use the efficacy question as the object-free key.
    pub fn from_record(r: &EditRecord) -> Self {
        match (&r.subject, &r.relation) {
            (Some(s), Some(rel)) => Self::new(s, rel, &r.edit_target),
            _ => Self::new(&r.efficacy_q, "", &r.edit_target),
        }
    }

    /// Text of the object-free key `(s, r)`.
    pub fn key_text(&self) -> String {
        join_nonempty(&[&self.subject, &self.relation])
    }

    /// Text of the full triple `(s, r, o)`.
    pub fn full_text(&self) -> String {
        join_nonempty(&[&self.subject, &self.relation, &self.object])
    }
}

fn join_nonempty(parts: &[&str]) -> String {
    parts
        .iter()
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_jsonl(text: &str) -> Result<Vec<EditRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: EditRecord = serde_json::from_str(raw).map_err(|e| Error::MalformedLine {
            line,
            message: e.to_string(),
        })?;
        rec.validate(line)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<EditRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_jsonl(&text)
}

pub fn to_jsonl(records: &[EditRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn save_jsonl(path: &Path, records: &[EditRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn split_records(records: &[EditRecord], split: Split) -> Vec<EditRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

// ---------------------------------------------------------------------------
// Overlap cleaning

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OverlapReason {
    /// The record's efficacy question is its own locality question.
    SelfOverlap,
    /// The record's efficacy question is another record's locality question.
    CrossOverlap { other_index: usize, other_split: Split },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub index: usize,
    pub split: Split,
    pub efficacy_question: String,
    pub reason: OverlapReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub kept: Vec<EditRecord>,
    pub removed: Vec<Removal>,
}

impl CleanReport {
    pub fn removed_per_split(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for r in &self.removed {
            *m.entry(r.split).or_insert(0) += 1;
        }
        m
    }
}

/// Drops records whose efficacy question doubles as a locality question,
/// either their own or any other record's (across all splits). Matching is
/// exact after trim and case-fold; surviving records keep their order.
pub fn clean_overlaps(records: &[EditRecord]) -> CleanReport {
    let mut loc_owner: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        loc_owner.entry(normalize(&r.locality_q)).or_default().push(i);
    }
    let mut report = CleanReport::default();
    for (i, r) in records.iter().enumerate() {
        let key = normalize(&r.efficacy_q);
        let reason = match loc_owner.get(&key) {
            Some(owners) if owners.contains(&i) => Some(OverlapReason::SelfOverlap),
            Some(owners) => owners.first().map(|&o| OverlapReason::CrossOverlap {
                other_index: o,
                other_split: records[o].split,
            }),
            None => None,
        };
        match reason {
            Some(reason) => report.removed.push(Removal {
                index: i,
                split: r.split,
                efficacy_question: r.efficacy_q.clone(),
                reason,
            }),
            None => report.kept.push(r.clone()),
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Subject statistics

/// Percentage of records per subject tag, rounded to two decimals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectStats {
    pub total: usize,
    pub percentages: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
}

impl SubjectStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject,count,percent\n");
        for (k, p) in &self.percentages {
            s.push_str(&format!("{},{},{:.2}\n", csv_field(k), self.counts[k], p));
        }
        s
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn subject_stats(records: &[EditRecord]) -> SubjectStats {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.subject_tag.clone()).or_insert(0) += 1;
    }
    let total = records.len();
    let percentages = counts
        .iter()
        .map(|(k, &c)| (k.clone(), (c as f64 * 10000.0 / total as f64).round() / 100.0))
        .collect();
    SubjectStats {
        total,
        percentages,
        counts,
    }
}
