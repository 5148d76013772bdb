//! Auxiliary sequence-labelling datasets derived from treebanks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conllu::{validate_tree, Sentence, Treebank};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TagScheme {
    /// Full morphological tag.
    MT,
    /// Case, or coarse POS for words without case.
    CT,
    /// Dependency relation to the head.
    LT,
    /// Depth below the root.
    RD,
    /// Number of children.
    NC,
    /// Head direction and head POS.
    RP,
    /// Next word.
    LM,
    /// Coarse POS.
    CP,
    /// Head word form.
    HW,
    /// Head word POS.
    PHW,
    /// Number, else POS.
    NT,
    /// Person, else POS.
    PT,
    /// Gender, else POS.
    GT,
}

impl TagScheme {
    pub const ALL: [TagScheme; 13] = [
        TagScheme::MT,
        TagScheme::CT,
        TagScheme::LT,
        TagScheme::RD,
        TagScheme::NC,
        TagScheme::RP,
        TagScheme::LM,
        TagScheme::CP,
        TagScheme::HW,
        TagScheme::PHW,
        TagScheme::NT,
        TagScheme::PT,
        TagScheme::GT,
    ];

    /// Whether the labels are read off the dependency tree.
    pub fn needs_tree(self) -> bool {
        matches!(
            self,
            TagScheme::LT
                | TagScheme::RD
                | TagScheme::NC
                | TagScheme::RP
                | TagScheme::HW
                | TagScheme::PHW
        )
    }

    /// Default label `min_freq` (high-cardinality schemes prune singletons).
    pub fn default_min_freq(self) -> usize {
        match self {
            TagScheme::LM | TagScheme::HW => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TagScheme::MT => "MT",
            TagScheme::CT => "CT",
            TagScheme::LT => "LT",
            TagScheme::RD => "RD",
            TagScheme::NC => "NC",
            TagScheme::RP => "RP",
            TagScheme::LM => "LM",
            TagScheme::CP => "CP",
            TagScheme::HW => "HW",
            TagScheme::PHW => "PHW",
            TagScheme::NT => "NT",
            TagScheme::PT => "PT",
            TagScheme::GT => "GT",
        }
    }
}

impl fmt::Display for TagScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TagScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TagScheme::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown tag scheme {s:?}")))
    }
}

/// Label caps for the count-valued schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeOptions {
    pub cap_depth: usize,
    pub cap_children: usize,
}

impl Default for SchemeOptions {
    fn default() -> Self {
        SchemeOptions {
            cap_depth: 7,
            cap_children: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSequence {
    pub scheme: TagScheme,
    pub labels: Vec<String>,
}

pub const ROOT_LABEL: &str = "ROOT";
pub const ROOT_HEAD: &str = "<ROOT>";
pub const EOS: &str = "<EOS>";

/// Depth of every token (root-attached tokens have depth 0). Requires an
/// acyclic head vector.
pub fn depths(heads: &[usize]) -> Vec<usize> {
    let mut memo: Vec<Option<usize>> = vec![None; heads.len()];
    fn depth(i: usize, heads: &[usize], memo: &mut [Option<usize>]) -> usize {
        if let Some(d) = memo[i] {
            return d;
        }
        let d = match heads[i] {
            0 => 0,
            h => depth(h - 1, heads, memo) + 1,
        };
        memo[i] = Some(d);
        d
    }
    (0..heads.len()).map(|i| depth(i, heads, &mut memo)).collect()
}

pub fn child_counts(heads: &[usize]) -> Vec<usize> {
    let mut counts = vec![0; heads.len()];
    for &h in heads {
        if h > 0 {
            counts[h - 1] += 1;
        }
    }
    counts
}

fn capped(v: usize, cap: usize) -> String {
    if v >= cap {
        format!("≥{cap}")
    } else {
        v.to_string()
    }
}

pub fn derive_tags(sentence: &Sentence, scheme: TagScheme) -> Result<TagSequence> {
    derive_tags_with(sentence, scheme, &SchemeOptions::default())
}

pub fn derive_tags_with(
    sentence: &Sentence,
    scheme: TagScheme,
    opts: &SchemeOptions,
) -> Result<TagSequence> {
    if scheme.needs_tree() {
        validate_tree(sentence).map_err(|v| Error::Derivation {
            sentence: 0,
            msg: format!("scheme {scheme} needs a valid tree: {v}"),
        })?;
    }
    let toks = &sentence.tokens;
    let heads = sentence.heads();
    let feat_or_pos = |key: &str| -> Vec<String> {
        toks.iter()
            .map(|t| t.feat(key).unwrap_or(&t.upos).to_string())
            .collect()
    };
    let labels = match scheme {
        TagScheme::MT => toks.iter().map(|t| t.feats_string()).collect(),
        TagScheme::CT => feat_or_pos("Case"),
        TagScheme::NT => feat_or_pos("Number"),
        TagScheme::PT => feat_or_pos("Person"),
        TagScheme::GT => feat_or_pos("Gender"),
        TagScheme::LT => toks.iter().map(|t| t.deprel.clone()).collect(),
        TagScheme::CP => toks.iter().map(|t| t.upos.clone()).collect(),
        TagScheme::RD => depths(&heads)
            .into_iter()
            .map(|d| capped(d, opts.cap_depth))
            .collect(),
        TagScheme::NC => child_counts(&heads)
            .into_iter()
            .map(|c| capped(c, opts.cap_children))
            .collect(),
        TagScheme::RP => toks
            .iter()
            .map(|t| match t.head {
                0 => ROOT_LABEL.to_string(),
                h => {
                    let dir = if h < t.id { "L" } else { "R" };
                    format!("{dir}_{}", toks[h - 1].upos)
                }
            })
            .collect(),
        TagScheme::LM => (0..toks.len())
            .map(|i| toks.get(i + 1).map_or(EOS.to_string(), |n| n.form.clone()))
            .collect(),
        TagScheme::HW => toks
            .iter()
            .map(|t| match t.head {
                0 => ROOT_HEAD.to_string(),
                h => toks[h - 1].form.clone(),
            })
            .collect(),
        TagScheme::PHW => toks
            .iter()
            .map(|t| match t.head {
                0 => ROOT_HEAD.to_string(),
                h => toks[h - 1].upos.clone(),
            })
            .collect(),
    };
    Ok(TagSequence { scheme, labels })
}

pub fn derive_treebank_tags(treebank: &Treebank, scheme: TagScheme) -> Result<Vec<TagSequence>> {
    derive_treebank_tags_with(treebank, scheme, &SchemeOptions::default())
}

pub fn derive_treebank_tags_with(
    treebank: &Treebank,
    scheme: TagScheme,
    opts: &SchemeOptions,
) -> Result<Vec<TagSequence>> {
    treebank
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            derive_tags_with(s, scheme, opts).map_err(|e| match e {
                Error::Derivation { msg, .. } => Error::Derivation {
                    sentence: i,
                    msg: format!("{}: {msg}", s.label(i)),
                },
                other => other,
            })
        })
        .collect()
}

/// Label vocabulary over sequences of one scheme.
pub fn build_tag_vocab(sequences: &[TagSequence], min_freq: usize) -> Vocab {
    debug_assert!(sequences.windows(2).all(|w| w[0].scheme == w[1].scheme));
    Vocab::build(
        sequences.iter().flat_map(|s| s.labels.iter().map(String::as_str)),
        min_freq,
    )
}

/// A sentence of forms paired with labels; the unit taggers train on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedSentence {
    pub forms: Vec<String>,
    pub labels: Vec<String>,
}

pub fn tagged_sentences(treebank: &Treebank, tags: &[TagSequence]) -> Vec<TaggedSentence> {
    treebank
        .sentences
        .iter()
        .zip(tags)
        .map(|(s, t)| TaggedSentence {
            forms: s.tokens.iter().map(|t| t.form.clone()).collect(),
            labels: t.labels.clone(),
        })
        .collect()
}

/// Two-column TSV (`form \t label`), blank line after each sentence.
pub fn write_tag_tsv(data: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for s in data {
        for (f, l) in s.forms.iter().zip(&s.labels) {
            out.push_str(f);
            out.push('\t');
            out.push_str(l);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn parse_tag_tsv(text: &str) -> Result<Vec<TaggedSentence>> {
    let mut out = Vec::new();
    let mut cur = TaggedSentence {
        forms: vec![],
        labels: vec![],
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !cur.forms.is_empty() {
                out.push(std::mem::replace(
                    &mut cur,
                    TaggedSentence {
                        forms: vec![],
                        labels: vec![],
                    },
                ));
            }
            continue;
        }
        let (f, l) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected form<TAB>label".into(),
        })?;
        if l.contains('\t') {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected exactly two columns".into(),
            });
        }
        cur.forms.push(f.to_string());
        cur.labels.push(l.to_string());
    }
    if !cur.forms.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

pub fn read_tag_tsv_file(path: impl AsRef<Path>) -> Result<Vec<TaggedSentence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tag_tsv(&text)
}
