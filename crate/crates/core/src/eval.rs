//! Attachment scores and result reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conllu::Treebank;
use crate::error::{Error, Result};
use crate::parser::ParseTree;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PunctPolicy {
    #[default]
    Include,
    /// Drop tokens whose upos is `PUNCT`.
    Exclude,
}

impl FromStr for PunctPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "include" => Ok(PunctPolicy::Include),
            "exclude" => Ok(PunctPolicy::Exclude),
            _ => Err(Error::Config(format!("unknown punctuation policy {s:?} (include|exclude)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub head_correct: usize,
    pub both_correct: usize,
}

impl Counts {
    fn add(&mut self, head_ok: bool, label_ok: bool) {
        self.total += 1;
        if head_ok {
            self.head_correct += 1;
            if label_ok {
                self.both_correct += 1;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttachmentScore {
    pub uas: f64,
    pub las: f64,
    pub counts: Counts,
}

impl AttachmentScore {
    pub fn from_counts(counts: Counts) -> Self {
        let pct = |c: usize| {
            if counts.total == 0 {
                0.0
            } else {
                100.0 * c as f64 / counts.total as f64
            }
        };
        AttachmentScore {
            uas: pct(counts.head_correct),
            las: pct(counts.both_correct),
            counts,
        }
    }
}

fn check_aligned(gold: &Treebank, pred: &[ParseTree]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (s, p)) in gold.sentences.iter().zip(pred).enumerate() {
        if s.len() != p.heads.len() || s.len() != p.labels.len() {
            return Err(Error::Contract(format!(
                "sentence {i}: {} gold tokens, {} predicted heads, {} predicted labels",
                s.len(),
                p.heads.len(),
                p.labels.len()
            )));
        }
    }
    Ok(())
}

fn scored_tokens<'a>(
    gold: &'a Treebank,
    pred: &'a [ParseTree],
    policy: PunctPolicy,
) -> impl Iterator<Item = (&'a str, bool, bool)> + 'a {
    gold.sentences.iter().zip(pred).flat_map(move |(s, p)| {
        s.tokens
            .iter()
            .enumerate()
            .filter(move |(_, t)| policy == PunctPolicy::Include || t.upos != "PUNCT")
            .map(move |(i, t)| (t.deprel.as_str(), t.head == p.heads[i], t.deprel == p.labels[i]))
    })
}

pub fn uas_las(gold: &Treebank, pred: &[ParseTree], policy: PunctPolicy) -> Result<AttachmentScore> {
    check_aligned(gold, pred)?;
    let mut counts = Counts::default();
    for (_, h, l) in scored_tokens(gold, pred, policy) {
        counts.add(h, l);
    }
    Ok(AttachmentScore::from_counts(counts))
}

/// Counts keyed by gold relation.
pub fn per_relation(gold: &Treebank, pred: &[ParseTree], policy: PunctPolicy) -> Result<BTreeMap<String, Counts>> {
    check_aligned(gold, pred)?;
    let mut out: BTreeMap<String, Counts> = BTreeMap::new();
    for (rel, h, l) in scored_tokens(gold, pred, policy) {
        out.entry(rel.to_string()).or_default().add(h, l);
    }
    Ok(out)
}

/// One named result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedScore {
    pub name: String,
    #[serde(flatten)]
    pub score: AttachmentScore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub json: String,
}

/// Fixed-order table with two-decimal `UAS / LAS` cells and the same rows
/// as JSON. Fails if any row has LAS above UAS.
pub fn report(results: &[NamedScore], breakdown: Option<&BTreeMap<String, Counts>>) -> Result<Report> {
    for r in results {
        if r.score.las > r.score.uas {
            return Err(Error::Contract(format!(
                "{}: LAS {} exceeds UAS {}",
                r.name, r.score.las, r.score.uas
            )));
        }
    }
    let mut text = String::new();
    if !results.is_empty() {
        let w = results.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let _ = writeln!(text, "{:<w$}  UAS / LAS", "model");
        for r in results {
            let _ = writeln!(text, "{:<w$}  {}", r.name, format_pair(&r.score));
        }
    }
    if let Some(rels) = breakdown {
        let w = rels.keys().map(String::len).max().unwrap_or(0).max(8);
        let _ = writeln!(text, "\n{:<w$}  {:>6}  {:>7}  {:>7}", "relation", "count", "UAS", "LAS");
        for (rel, c) in rels {
            let s = AttachmentScore::from_counts(*c);
            let _ = writeln!(text, "{rel:<w$}  {:>6}  {:>7.2}  {:>7.2}", c.total, s.uas, s.las);
        }
    }
    let json = serde_json::to_string_pretty(results)?;
    Ok(Report { text, json })
}

pub fn format_pair(s: &AttachmentScore) -> String {
    format!("{:.2} / {:.2}", s.uas, s.las)
}

/// Contents of a run's metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub run_name: String,
    pub uas: f64,
    pub las: f64,
    pub counts: Counts,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl Metrics {
    pub fn new(run_name: &str, score: &AttachmentScore, config: &serde_json::Value) -> Self {
        Metrics {
            run_name: run_name.to_string(),
            uas: score.uas,
            las: score.las,
            counts: score.counts,
            config_digest: config_digest(config),
            extra: BTreeMap::new(),
        }
    }

    /// Check that a parsed JSON document has the metrics shape.
    pub fn validate_json(v: &serde_json::Value) -> Result<Metrics> {
        let m: Metrics = serde_json::from_value(v.clone())?;
        if !(0.0..=100.0).contains(&m.uas) || !(0.0..=m.uas).contains(&m.las) {
            return Err(Error::Data(format!("scores out of range: UAS {} LAS {}", m.uas, m.las)));
        }
        if m.config_digest.len() != 64 || !m.config_digest.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(Error::Data("config_digest is not a SHA-256 hex string".into()));
        }
        Ok(m)
    }
}

/// SHA-256 of the compact JSON serialization (object keys sorted).
pub fn config_digest(config: &serde_json::Value) -> String {
    let text = serde_json::to_string(config).expect("JSON values serialize");
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::{Sentence, Token};

    fn r() -> Treebank {
        Treebank::new(
            "r",
            vec![Sentence::new(vec![
                Token::new(1, "rāmaḥ", "NOUN", 3, "nsubj"),
                Token::new(2, "phalam", "NOUN", 3, "obj"),
                Token::new(3, "khādati", "VERB", 0, "root"),
            ])],
        )
    }

    fn tree(heads: &[usize], labels: &[&str]) -> ParseTree {
        ParseTree {
            heads: heads.to_vec(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn hand_counted_examples() {
        let gold = r();
        let p = uas_las(&gold, &[tree(&[3, 3, 0], &["nsubj", "obj", "root"])], PunctPolicy::Include).unwrap();
        assert_eq!((p.uas, p.las), (100.0, 100.0));
        let p = uas_las(&gold, &[tree(&[3, 3, 0], &["obj", "obj", "root"])], PunctPolicy::Include).unwrap();
        assert_eq!(format_pair(&p), "100.00 / 66.67");
        let p = uas_las(&gold, &[tree(&[1, 3, 0], &["nsubj", "obj", "root"])], PunctPolicy::Include).unwrap();
        assert_eq!(format_pair(&p), "66.67 / 66.67");
        assert_eq!(p.counts, Counts { total: 3, head_correct: 2, both_correct: 2 });
    }

    #[test]
    fn misalignment_names_the_sentence() {
        let gold = r();
        let err = uas_las(&gold, &[tree(&[3, 0], &["x", "y"])], PunctPolicy::Include).unwrap_err();
        assert!(err.to_string().contains("sentence 0"), "{err}");
        assert!(uas_las(&gold, &[], PunctPolicy::Include).is_err());
    }

    #[test]
    fn punctuation_policy() {
        let mut gold = r();
        gold.sentences[0].tokens.push(Token::new(4, ".", "PUNCT", 3, "punct"));
        let pred = [tree(&[3, 3, 0, 1], &["nsubj", "obj", "root", "punct"])];
        let inc = uas_las(&gold, &pred, PunctPolicy::Include).unwrap();
        let exc = uas_las(&gold, &pred, PunctPolicy::Exclude).unwrap();
        assert_eq!(inc.uas, 75.0);
        assert_eq!(exc.uas, 100.0);
        let plain = r();
        let pred = [tree(&[1, 3, 0], &["nsubj", "obj", "root"])];
        assert_eq!(
            uas_las(&plain, &pred, PunctPolicy::Include).unwrap(),
            uas_las(&plain, &pred, PunctPolicy::Exclude).unwrap()
        );
    }

    #[test]
    fn report_rounding_and_json() {
        let s = AttachmentScore {
            uas: 70.666_666,
            las: 56.849_315,
            counts: Counts::default(),
        };
        let rows = vec![NamedScore {
            name: "Base".into(),
            score: s,
        }];
        let rep = report(&rows, None).unwrap();
        assert!(rep.text.contains("70.67 / 56.85"), "{}", rep.text);
        let back: Vec<NamedScore> = serde_json::from_str(&rep.json).unwrap();
        assert_eq!(back, rows);
        let empty = report(&[], None).unwrap();
        assert_eq!(empty.text, "");
        assert_eq!(empty.json, "[]");
    }

    #[test]
    fn report_rejects_las_above_uas() {
        let rows = vec![NamedScore {
            name: "bad".into(),
            score: AttachmentScore {
                uas: 50.0,
                las: 60.0,
                counts: Counts::default(),
            },
        }];
        assert!(report(&rows, None).is_err());
    }

    #[test]
    fn breakdown_by_relation() {
        let gold = r();
        let pred = [tree(&[1, 3, 0], &["nsubj", "nsubj", "root"])];
        let rels = per_relation(&gold, &pred, PunctPolicy::Include).unwrap();
        assert_eq!(rels["nsubj"], Counts { total: 1, head_correct: 0, both_correct: 0 });
        assert_eq!(rels["obj"], Counts { total: 1, head_correct: 1, both_correct: 0 });
        let text = report(&[], Some(&rels)).unwrap().text;
        assert!(text.contains("relation"));
    }

    #[test]
    fn metrics_digest_and_validation() {
        let cfg = serde_json::json!({"b": 1, "a": [1, 2]});
        let s = AttachmentScore::from_counts(Counts { total: 4, head_correct: 3, both_correct: 2 });
        let m = Metrics::new("run", &s, &cfg);
        assert_eq!(m.config_digest, config_digest(&serde_json::json!({"a": [1, 2], "b": 1})));
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(Metrics::validate_json(&v).unwrap(), m);
        let mut bad = v.clone();
        bad["las"] = serde_json::json!(90.0);
        assert!(Metrics::validate_json(&bad).is_err());
    }
}
