//! CoNLL-U treebanks: reading, writing, tree validation and a seeded
//! generator for synthetic case-marked corpora.

mod synthetic;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{gen_synthetic, CaseRule, Declension, Grammar, HeadRule};

/// Morphological features in canonical (sorted-key) order.
pub type Feats = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// 1-based position.
    pub id: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    pub feats: Feats,
    /// 0 is the synthetic root.
    pub head: usize,
    pub deprel: String,
    pub deps: String,
    pub misc: String,
}

impl Token {
    pub fn new(id: usize, form: &str, upos: &str, head: usize, deprel: &str) -> Self {
        Token {
            id,
            form: form.to_string(),
            lemma: form.to_string(),
            upos: upos.to_string(),
            xpos: "_".to_string(),
            feats: Feats::new(),
            head,
            deprel: deprel.to_string(),
            deps: "_".to_string(),
            misc: "_".to_string(),
        }
    }

    pub fn with_feat(mut self, key: &str, value: &str) -> Self {
        self.feats.insert(key.to_string(), value.to_string());
        self
    }

    pub fn feat(&self, key: &str) -> Option<&str> {
        self.feats.get(key).map(String::as_str)
    }

    /// `Key=Val|Key=Val`, or `_` when empty.
    pub fn feats_string(&self) -> String {
        format_feats(&self.feats)
    }
}

pub fn format_feats(feats: &Feats) -> String {
    if feats.is_empty() {
        return "_".to_string();
    }
    let mut out = String::new();
    for (i, (k, v)) in feats.iter().enumerate() {
        if i > 0 {
            out.push('|');
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
    }
    out
}

/// A line that is kept verbatim but never parsed or scored: multiword
/// token ranges (`1-2`) and empty nodes (`1.1`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpaqueLine {
    /// Number of regular tokens preceding the line.
    pub before_token: usize,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub sent_id: Option<String>,
    /// Comment lines other than `sent_id`, without the leading `#`.
    pub comments: Vec<String>,
    pub opaque: Vec<OpaqueLine>,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Sentence {
            tokens,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn heads(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    pub fn deprels(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.deprel.as_str()).collect()
    }

    /// A human-readable label for error messages.
    pub fn label(&self, index: usize) -> String {
        match &self.sent_id {
            Some(id) => format!("#{index} ({id})"),
            None => format!("#{index}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Treebank {
    pub name: String,
    pub sentences: Vec<Sentence>,
}

impl Treebank {
    pub fn new(name: impl Into<String>, sentences: Vec<Sentence>) -> Self {
        Treebank {
            name: name.into(),
            sentences,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    /// The first `n` sentences.
    pub fn prefix(&self, n: usize) -> Treebank {
        Treebank::new(
            self.name.clone(),
            self.sentences[..n.min(self.len())].to_vec(),
        )
    }

    pub fn slice(&self, from: usize, to: usize) -> Treebank {
        Treebank::new(self.name.clone(), self.sentences[from..to].to_vec())
    }

    pub fn concat(&self, other: &Treebank) -> Treebank {
        let mut sentences = self.sentences.clone();
        sentences.extend(other.sentences.iter().cloned());
        Treebank::new(self.name.clone(), sentences)
    }
}

/// Parse CoNLL-U text.
pub fn parse_conllu(text: &str) -> Result<Treebank> {
    let mut sentences = Vec::new();
    let mut current = Sentence::default();
    let mut head_lines: Vec<usize> = Vec::new();
    let mut open = false;

    fn finish(
        current: &mut Sentence,
        head_lines: &mut Vec<usize>,
        sentences: &mut Vec<Sentence>,
    ) -> Result<()> {
        let n = current.tokens.len();
        for (tok, &line) in current.tokens.iter().zip(head_lines.iter()) {
            if tok.head > n {
                return Err(Error::Parse {
                    line,
                    msg: format!("head out of range ({} > {n})", tok.head),
                });
            }
        }
        sentences.push(std::mem::take(current));
        head_lines.clear();
        Ok(())
    }

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            if open {
                finish(&mut current, &mut head_lines, &mut sentences)?;
                open = false;
            }
            continue;
        }
        open = true;
        if let Some(comment) = line.strip_prefix('#') {
            let body = comment.trim_start();
            if let Some(id) = body.strip_prefix("sent_id") {
                let id = id.trim_start();
                if let Some(v) = id.strip_prefix('=') {
                    current.sent_id = Some(v.trim().to_string());
                    continue;
                }
            }
            current.comments.push(comment.to_string());
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            current.opaque.push(OpaqueLine {
                before_token: current.tokens.len(),
                text: line.to_string(),
            });
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("non-integer id {:?}", cols[0]),
        })?;
        if id != current.tokens.len() + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected id {}, found {id}", current.tokens.len() + 1),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("non-integer head {:?}", cols[6]),
        })?;
        if head == id {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("token {id} is its own head"),
            });
        }
        let feats = parse_feats(cols[5]).map_err(|msg| Error::Parse { line: line_no, msg })?;
        current.tokens.push(Token {
            id,
            form: cols[1].to_string(),
            lemma: cols[2].to_string(),
            upos: cols[3].to_string(),
            xpos: cols[4].to_string(),
            feats,
            head,
            deprel: cols[7].to_string(),
            deps: cols[8].to_string(),
            misc: cols[9].to_string(),
        });
        head_lines.push(line_no);
    }
    if open {
        finish(&mut current, &mut head_lines, &mut sentences)?;
    }
    Ok(Treebank::new("", sentences))
}

fn parse_feats(col: &str) -> std::result::Result<Feats, String> {
    let mut feats = Feats::new();
    if col == "_" {
        return Ok(feats);
    }
    for pair in col.split('|') {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("malformed feature {pair:?}"))?;
        if feats.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("duplicate feature {k:?}"));
        }
    }
    Ok(feats)
}

/// Canonical serialization: one blank line after every sentence.
pub fn write_conllu(treebank: &Treebank) -> String {
    let mut out = String::new();
    for sentence in &treebank.sentences {
        write_sentence(&mut out, sentence);
        out.push('\n');
    }
    out
}

fn write_sentence(out: &mut String, s: &Sentence) {
    if let Some(id) = &s.sent_id {
        let _ = writeln!(out, "# sent_id = {id}");
    }
    for c in &s.comments {
        let _ = writeln!(out, "#{c}");
    }
    let mut opaque = s.opaque.iter().peekable();
    for (i, t) in s.tokens.iter().enumerate() {
        while let Some(o) = opaque.next_if(|o| o.before_token <= i) {
            let _ = writeln!(out, "{}", o.text);
        }
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            t.id,
            t.form,
            t.lemma,
            t.upos,
            t.xpos,
            t.feats_string(),
            t.head,
            t.deprel,
            t.deps,
            t.misc
        );
    }
    for o in opaque {
        let _ = writeln!(out, "{}", o.text);
    }
}

pub fn read_conllu_file(path: impl AsRef<Path>) -> Result<Treebank> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tb = parse_conllu(&text).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })?;
    tb.name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(tb)
}

pub fn write_conllu_file(path: impl AsRef<Path>, treebank: &Treebank) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_conllu(treebank)).map_err(|e| Error::io(path, e))
}

/// Why a head assignment is not a single rooted tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TreeViolation {
    Empty,
    HeadOutOfRange { token: usize, head: usize },
    SelfLoop(usize),
    /// Token ids on the cycle, ascending.
    Cycle(Vec<usize>),
    /// Token ids attached to the root, ascending.
    MultiRoot(Vec<usize>),
}

impl std::fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TreeViolation::Empty => write!(f, "empty sentence"),
            TreeViolation::HeadOutOfRange { token, head } => {
                write!(f, "token {token} has out-of-range head {head}")
            }
            TreeViolation::SelfLoop(t) => write!(f, "self-loop at token {t}"),
            TreeViolation::Cycle(nodes) => write!(f, "cycle {nodes:?}"),
            TreeViolation::MultiRoot(nodes) => write!(f, "multiple roots {nodes:?}"),
        }
    }
}

pub fn validate_tree(sentence: &Sentence) -> std::result::Result<(), TreeViolation> {
    validate_heads(&sentence.heads())
}

/// Checks a 1-based head vector (`heads[i]` is the head of token `i + 1`).
pub fn validate_heads(heads: &[usize]) -> std::result::Result<(), TreeViolation> {
    let n = heads.len();
    if n == 0 {
        return Err(TreeViolation::Empty);
    }
    for (i, &h) in heads.iter().enumerate() {
        if h > n {
            return Err(TreeViolation::HeadOutOfRange { token: i + 1, head: h });
        }
        if h == i + 1 {
            return Err(TreeViolation::SelfLoop(i + 1));
        }
    }
    if let Some(cycle) = find_cycle(heads) {
        return Err(TreeViolation::Cycle(cycle));
    }
    let roots: Vec<usize> = (1..=n).filter(|&t| heads[t - 1] == 0).collect();
    if roots.len() > 1 {
        return Err(TreeViolation::MultiRoot(roots));
    }
    Ok(())
}

/// First cycle reachable by following heads from tokens in id order.
fn find_cycle(heads: &[usize]) -> Option<Vec<usize>> {
    let n = heads.len();
    // 0 = unvisited, 1 = on current path, 2 = done
    let mut state = vec![0u8; n + 1];
    state[0] = 2;
    for start in 1..=n {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = heads[v - 1];
        }
        if state[v] == 1 {
            let pos = path.iter().position(|&p| p == v).unwrap();
            let mut cycle = path[pos..].to_vec();
            cycle.sort_unstable();
            return Some(cycle);
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sentence_r() -> Sentence {
        let mut s = Sentence::new(vec![
            Token::new(1, "rāmaḥ", "NOUN", 3, "nsubj")
                .with_feat("Case", "Nom")
                .with_feat("Number", "Sg"),
            Token::new(2, "phalam", "NOUN", 3, "obj")
                .with_feat("Case", "Acc")
                .with_feat("Number", "Sg"),
            Token::new(3, "khādati", "VERB", 0, "root")
                .with_feat("Number", "Sg")
                .with_feat("Person", "3"),
        ]);
        s.sent_id = Some("r".into());
        s
    }

    #[test]
    fn parses_minimal_sentence() {
        let tb = parse_conllu("1\tkhādati\tkhād\tVERB\t_\t_\t0\troot\t_\t_\n").unwrap();
        assert_eq!(tb.len(), 1);
        let t = &tb.sentences[0].tokens[0];
        assert_eq!((t.head, t.deprel.as_str(), t.lemma.as_str()), (0, "root", "khād"));
    }

    #[test]
    fn round_trips_sentence_r() {
        let tb = Treebank::new("", vec![sentence_r()]);
        assert_eq!(parse_conllu(&write_conllu(&tb)).unwrap(), tb);
    }

    #[test]
    fn rejects_head_out_of_range_with_line() {
        let text = "# sent_id = x\n1\ta\ta\tX\t_\t_\t0\troot\t_\t_\n2\tb\tb\tX\t_\t_\t1\tdep\t_\t_\n3\tc\tc\tX\t_\t_\t5\tdep\t_\t_\n";
        let err = parse_conllu(text).unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 4);
                assert!(msg.contains("head out of range"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_columns_and_ids() {
        assert!(matches!(
            parse_conllu("1\ta\ta\tX\t_\t_\t0\troot\t_\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_conllu("x\ta\ta\tX\t_\t_\t0\troot\t_\t_\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_conllu("1\ta\ta\tX\t_\t_\tz\troot\t_\t_\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_conllu("1\ta\ta\tX\t_\tCase=Nom|Case=Acc\t0\troot\t_\t_\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn keeps_multiword_and_empty_nodes_opaque() {
        let text = "1-2\tab\t_\t_\t_\t_\t_\t_\t_\t_\n1\ta\ta\tX\t_\t_\t2\tdep\t_\t_\n2\tb\tb\tX\t_\t_\t0\troot\t_\t_\n2.1\te\t_\t_\t_\t_\t_\t_\t_\t_\n\n";
        let tb = parse_conllu(text).unwrap();
        assert_eq!(tb.sentences[0].len(), 2);
        assert_eq!(tb.sentences[0].opaque.len(), 2);
        assert_eq!(write_conllu(&tb), text);
    }

    #[test]
    fn feats_serialization() {
        let t = Token::new(1, "a", "X", 0, "root");
        assert_eq!(t.feats_string(), "_");
        let t = t.with_feat("Number", "Sg").with_feat("Case", "Nom");
        assert_eq!(t.feats_string(), "Case=Nom|Number=Sg");
    }

    #[test]
    fn two_sentences_one_blank_line_between() {
        let tb = Treebank::new("", vec![sentence_r(), sentence_r()]);
        let text = write_conllu(&tb);
        assert!(text.ends_with("_\n\n"));
        assert_eq!(text.matches("\n\n").count(), 2);
        assert!(!text.contains("\n\n\n"));
    }

    #[test]
    fn validate_examples() {
        assert_eq!(validate_heads(&[3, 3, 0]), Ok(()));
        assert_eq!(validate_heads(&[2, 1, 0]), Err(TreeViolation::Cycle(vec![1, 2])));
        assert_eq!(
            validate_heads(&[0, 0, 1]),
            Err(TreeViolation::MultiRoot(vec![1, 2]))
        );
        assert_eq!(validate_heads(&[1]), Err(TreeViolation::SelfLoop(1)));
        assert_eq!(validate_heads(&[]), Err(TreeViolation::Empty));
        assert_eq!(validate_tree(&sentence_r()), Ok(()));
    }
}
