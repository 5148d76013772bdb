//! Seeded generator for free-word-order, case-marked toy treebanks.
//!
//! Each sentence is one clause: a verb (the root) plus nominal arguments
//! whose case picks both relation and head. Arguments may carry an
//! agreeing adjective and a genitive-style modifier; constituents are
//! shuffled, so position says little and the suffix says everything.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Sentence, Token, Treebank};
use crate::error::{Error, Result};
use crate::rng::{SeedKey, Stream};

const DEFAULT_GRAMMAR: &str = include_str!("../../data/grammar.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadRule {
    /// Attach to the clause verb.
    Verb,
    /// Attach to the nominal the word modifies.
    Nominal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRule {
    pub deprel: String,
    pub head: HeadRule,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Declension {
    pub gender: String,
    /// `"Case.Number"` → suffix.
    pub suffixes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    /// Building blocks for novel stems.
    pub syllables: Vec<String>,
    pub noun_stems: Vec<String>,
    pub adj_stems: Vec<String>,
    pub verb_stems: Vec<String>,
    /// Probability that a stem is freshly composed from syllables instead
    /// of drawn from the lexicon.
    pub novel_stem_rate: f64,
    pub declensions: Vec<Declension>,
    /// `"Number.Person"` → verb ending.
    pub verb_endings: BTreeMap<String, String>,
    pub case_rules: BTreeMap<String, CaseRule>,
    pub min_arguments: usize,
    pub max_arguments: usize,
    pub adjective_rate: f64,
    pub modifier_rate: f64,
    pub plural_rate: f64,
    /// Sentence-final punctuation form, if any.
    #[serde(default)]
    pub punct: Option<String>,
}

impl Default for Grammar {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_GRAMMAR).expect("bundled grammar is valid JSON")
    }
}

impl Grammar {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: Grammar = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("synthetic grammar: {e}")))?;
        g.check()?;
        Ok(g)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn argument_cases(&self) -> Vec<&str> {
        self.cases_with(HeadRule::Verb)
    }

    fn modifier_cases(&self) -> Vec<&str> {
        self.cases_with(HeadRule::Nominal)
    }

    fn cases_with(&self, rule: HeadRule) -> Vec<&str> {
        self.case_rules
            .iter()
            .filter(|(_, r)| r.head == rule)
            .map(|(c, _)| c.as_str())
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(format!("synthetic grammar: {m}")));
        let novel = self.novel_stem_rate > 0.0 && !self.syllables.is_empty();
        if self.noun_stems.is_empty() && !novel {
            return cfg("empty noun lexicon");
        }
        if self.verb_stems.is_empty() && !novel {
            return cfg("empty verb lexicon");
        }
        if self.adjective_rate > 0.0 && self.adj_stems.is_empty() && !novel {
            return cfg("empty adjective lexicon");
        }
        if self.declensions.is_empty() {
            return cfg("no declension classes");
        }
        let args = self.argument_cases();
        if args.is_empty() {
            return cfg("no verb-headed case rule");
        }
        if self.min_arguments > self.max_arguments || self.max_arguments > args.len() {
            return cfg("argument count range exceeds verb-headed cases");
        }
        for (i, d) in self.declensions.iter().enumerate() {
            for case in self.case_rules.keys() {
                for number in ["Sg", "Pl"] {
                    if !d.suffixes.contains_key(&format!("{case}.{number}")) {
                        return cfg(&format!("declension {i} lacks {case}.{number}"));
                    }
                }
            }
        }
        for number in ["Sg", "Pl"] {
            if !self.verb_endings.contains_key(&format!("{number}.3")) {
                return cfg(&format!("no verb ending for {number}.3"));
            }
        }
        for p in [
            self.novel_stem_rate,
            self.adjective_rate,
            self.modifier_rate,
            self.plural_rate,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return cfg("rates must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

struct Nominal {
    stem: String,
    declension: usize,
    number: &'static str,
}

struct Generator<'g> {
    g: &'g Grammar,
    rng: Stream,
}

impl Generator<'_> {
    fn stem(&mut self, lexicon: &[String]) -> String {
        let novel = lexicon.is_empty() || self.rng.gen_bool(self.g.novel_stem_rate);
        if novel {
            let n = self.rng.gen_range(2..=3);
            (0..n)
                .map(|_| self.g.syllables.choose(&mut self.rng).unwrap().as_str())
                .collect()
        } else {
            lexicon.choose(&mut self.rng).unwrap().clone()
        }
    }

    fn nominal(&mut self) -> Nominal {
        let g = self.g;
        let stem = self.stem(&g.noun_stems);
        let declension = self.rng.gen_range(0..self.g.declensions.len());
        let number = if self.rng.gen_bool(self.g.plural_rate) {
            "Pl"
        } else {
            "Sg"
        };
        Nominal {
            stem,
            declension,
            number,
        }
    }

    fn inflect(&self, stem: &str, declension: usize, case: &str, number: &str) -> Token {
        let d = &self.g.declensions[declension];
        let suffix = &d.suffixes[&format!("{case}.{number}")];
        let mut t = Token::new(0, &format!("{stem}{suffix}"), "NOUN", 0, "_");
        t.lemma = stem.to_string();
        t.with_feat("Case", case)
            .with_feat("Number", number)
            .with_feat("Gender", &d.gender)
    }

    /// Tokens of one argument constituent, modifiers first; heads are
    /// local offsets resolved later (`None` = the clause verb).
    fn constituent(&mut self, case: &str) -> Vec<(Token, Option<usize>)> {
        let g = self.g;
        let head = self.nominal();
        let mut out: Vec<(Token, Option<usize>)> = Vec::new();
        let modifier_cases = g.modifier_cases();
        if !modifier_cases.is_empty() && self.rng.gen_bool(g.modifier_rate) {
            let mcase = *modifier_cases.choose(&mut self.rng).unwrap();
            let m = self.nominal();
            let mut t = self.inflect(&m.stem, m.declension, mcase, m.number);
            t.deprel = g.case_rules[mcase].deprel.clone();
            out.push((t, Some(usize::MAX)));
        }
        if self.rng.gen_bool(g.adjective_rate) {
            let stem = self.stem(&g.adj_stems);
            let mut t = self.inflect(&stem, head.declension, case, head.number);
            t.upos = "ADJ".into();
            t.deprel = "amod".into();
            out.push((t, Some(usize::MAX)));
        }
        let mut t = self.inflect(&head.stem, head.declension, case, head.number);
        t.deprel = g.case_rules[case].deprel.clone();
        out.push((t, None));
        let head_pos = out.len() - 1;
        for (_, h) in out.iter_mut() {
            if *h == Some(usize::MAX) {
                *h = Some(head_pos);
            }
        }
        out
    }

    fn sentence(&mut self, index: usize) -> Sentence {
        let g = self.g;
        let mut cases = g.argument_cases();
        cases.shuffle(&mut self.rng);
        let k = self.rng.gen_range(g.min_arguments..=g.max_arguments);
        cases.truncate(k);

        let mut constituents: Vec<Vec<(Token, Option<usize>)>> =
            cases.iter().map(|c| self.constituent(c)).collect();

        let subject_number = constituents
            .iter()
            .flatten()
            .find(|(t, h)| h.is_none() && t.deprel == g.case_rules.get("Nom").map_or("", |r| &r.deprel))
            .and_then(|(t, _)| t.feat("Number").map(str::to_string))
            .unwrap_or_else(|| "Sg".into());
        let vstem = self.stem(&g.verb_stems);
        let ending = &g.verb_endings[&format!("{subject_number}.3")];
        let mut verb = Token::new(0, &format!("{vstem}{ending}"), "VERB", 0, "root")
            .with_feat("Number", &subject_number)
            .with_feat("Person", "3");
        verb.lemma = vstem;
        constituents.push(vec![(verb, None)]);
        let verb_constituent = constituents.len() - 1;

        let mut order: Vec<usize> = (0..constituents.len()).collect();
        order.shuffle(&mut self.rng);

        // assign ids
        let mut start = vec![0usize; constituents.len()];
        let mut next = 1;
        for &c in &order {
            start[c] = next;
            next += constituents[c].len();
        }
        let verb_id = start[verb_constituent];
        let mut tokens = Vec::with_capacity(next - 1);
        for &c in &order {
            for (local, (tok, head)) in constituents[c].iter().enumerate() {
                let mut t = tok.clone();
                t.id = start[c] + local;
                t.head = if c == verb_constituent {
                    0
                } else {
                    match head {
                        None => verb_id,
                        Some(h) => start[c] + h,
                    }
                };
                tokens.push(t);
            }
        }
        if let Some(p) = &g.punct {
            let id = tokens.len() + 1;
            tokens.push(Token::new(id, p, "PUNCT", verb_id, "punct"));
        }
        let mut s = Sentence::new(tokens);
        s.sent_id = Some(format!("syn-{index}"));
        s
    }
}

/// Generate `n_sentences` sentences; output is a pure function of
/// `(seed, n_sentences, grammar)`, and sentence `i` does not depend on `n`.
pub fn gen_synthetic(seed: u64, n_sentences: usize, grammar: &Grammar) -> Result<Treebank> {
    grammar.check()?;
    let key = SeedKey::new(seed).derive("synthetic");
    let sentences = (0..n_sentences)
        .map(|i| {
            let mut gen = Generator {
                g: grammar,
                rng: key.stream_for(&format!("sentence/{i}")),
            };
            gen.sentence(i)
        })
        .collect();
    Ok(Treebank::new(format!("synthetic-{seed}"), sentences))
}
