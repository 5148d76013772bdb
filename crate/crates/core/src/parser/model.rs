use std::path::Path;

use serde::{Deserialize, Serialize};

use super::decode::{decode_mst, ArcScores};
use crate::autodiff::{checkpoint, Var};
use crate::conllu::Sentence;
use crate::error::{Error, Result};
use crate::nn::{Biaffine, Dense, Encoder, EncoderInput, EncoderSpec, GateCombiner, GateVariant, Init, LabelBiaffine, Mode, TagHead};
use crate::rng::SeedKey;
use crate::tagschemes::{derive_tags, TagScheme};
use crate::vocab::{LabelSet, Vocab};
use crate::{model_io, Graph, ParameterStore, Tensor};

pub const MODEL_KIND: &str = "parser";

/// A per-token tagging loss trained jointly with the parser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxTaskSpec {
    pub scheme: TagScheme,
    pub vocab: Vocab,
    pub weight: f64,
}

/// Architecture of a biaffine parser over one or more gated encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParserSpec {
    /// Encoder roster; the first is the parser's own encoder.
    pub encoders: Vec<EncoderSpec>,
    #[serde(default)]
    pub gate: GateVariant,
    #[serde(default)]
    pub collapse_gate: bool,
    pub arc_mlp: usize,
    pub label_mlp: usize,
    pub mlp_dropout: f64,
    pub relations: LabelSet,
    pub single_root: bool,
    #[serde(default)]
    pub aux_task: Option<AuxTaskSpec>,
}

impl ParserSpec {
    pub fn new(encoders: Vec<EncoderSpec>, relations: LabelSet) -> Self {
        let dropout = encoders.first().map_or(0.33, |e| e.config.dropout);
        ParserSpec {
            encoders,
            gate: GateVariant::Softmax,
            collapse_gate: false,
            arc_mlp: 128,
            label_mlp: 64,
            mlp_dropout: dropout,
            relations,
            single_root: true,
            aux_task: None,
        }
    }
}

/// Predicted heads and relation labels of one sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseTree {
    pub heads: Vec<usize>,
    pub labels: Vec<String>,
}

impl ParseTree {
    /// Copy of `sentence` with heads and deprels replaced.
    pub fn apply_to(&self, sentence: &Sentence) -> Sentence {
        let mut out = sentence.clone();
        for (t, (h, l)) in out.tokens.iter_mut().zip(self.heads.iter().zip(&self.labels)) {
            t.head = *h;
            t.deprel = l.clone();
        }
        out
    }
}

/// Index form of a sentence for a [`Parser`].
#[derive(Clone, Debug)]
pub struct ParserInput {
    pub encoders: Vec<EncoderInput>,
    pub heads: Vec<usize>,
    /// Gold relation ids; `None` for relations outside the label set.
    pub rels: Vec<Option<usize>>,
    pub aux: Option<Vec<usize>>,
}

impl ParserInput {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Parser {
    pub spec: ParserSpec,
    pub encoders: Vec<Encoder>,
    pub gate: GateCombiner,
    arc_dep: Dense,
    arc_head: Dense,
    lab_dep: Dense,
    lab_head: Dense,
    arc: Biaffine,
    label: LabelBiaffine,
    aux: Option<TagHead>,
}

impl Parser {
    pub fn new(store: &mut ParameterStore, spec: &ParserSpec, key: SeedKey) -> Result<Self> {
        if spec.encoders.is_empty() {
            return Err(Error::Config("parser needs at least one encoder".into()));
        }
        if spec.relations.is_empty() {
            return Err(Error::Config("empty relation set".into()));
        }
        if spec.arc_mlp == 0 || spec.label_mlp == 0 {
            return Err(Error::Config("MLP widths must be at least 1".into()));
        }
        let mut init = Init::new(store, key);
        let encoders = spec
            .encoders
            .iter()
            .map(|e| Encoder::new(&mut init, e))
            .collect::<Result<Vec<_>>>()?;
        let widths: Vec<usize> = encoders.iter().map(Encoder::output_dim).collect();
        let mut gate = GateCombiner::new(&mut init, "gate", &widths, spec.gate)?;
        gate.set_collapse(spec.collapse_gate);
        let d = widths[0];
        let p = spec.mlp_dropout;
        let aux = match &spec.aux_task {
            Some(a) => Some(TagHead::new(&mut init, "aux", d, a.vocab.len(), p)?),
            None => None,
        };
        Ok(Parser {
            arc_dep: Dense::new(&mut init, "arc_dep", d, spec.arc_mlp, p)?,
            arc_head: Dense::new(&mut init, "arc_head", d, spec.arc_mlp, p)?,
            lab_dep: Dense::new(&mut init, "lab_dep", d, spec.label_mlp, p)?,
            lab_head: Dense::new(&mut init, "lab_head", d, spec.label_mlp, p)?,
            arc: Biaffine::new(&mut init, "arc", spec.arc_mlp)?,
            label: LabelBiaffine::new(&mut init, "label", spec.label_mlp, spec.relations.len())?,
            spec: spec.clone(),
            encoders,
            gate,
            aux,
        })
    }

    pub fn prepare(&self, sentence: &Sentence) -> Result<ParserInput> {
        let encoders = self
            .encoders
            .iter()
            .map(|e| e.prepare_sentence(sentence))
            .collect::<Result<Vec<_>>>()?;
        let aux = match &self.spec.aux_task {
            Some(a) => Some(derive_tags(sentence, a.scheme)?.labels.iter().map(|l| a.vocab.lookup(l)).collect()),
            None => None,
        };
        Ok(ParserInput {
            encoders,
            heads: sentence.heads(),
            rels: sentence.tokens.iter().map(|t| self.spec.relations.get(&t.deprel)).collect(),
            aux,
        })
    }

    /// Gated token representations `[(n+1) × d]`, ROOT row first.
    pub fn encode(&self, g: &mut Graph<'_>, input: &ParserInput, mode: &Mode) -> Result<Var> {
        let reps = self
            .encoders
            .iter()
            .zip(&input.encoders)
            .map(|(e, x)| e.forward(g, x, mode))
            .collect::<Result<Vec<_>>>()?;
        self.gate.combine(g, &reps)
    }

    /// Raw arc scores `[(n+1) × (n+1)]`, row = head, column = dependent.
    /// Column 0 and the diagonal are meaningless; see [`arc_scores_of`].
    pub fn score_arcs(&self, g: &mut Graph<'_>, encoded: Var, mode: &Mode) -> Result<Var> {
        let d = self.arc_dep.forward(g, encoded, mode)?;
        let h = self.arc_head.forward(g, encoded, mode)?;
        self.arc.scores(g, d, h)
    }

    /// Relation logits `[n × R]` for dependents `1..=n` attached to `heads`.
    pub fn score_labels(&self, g: &mut Graph<'_>, encoded: Var, heads: &[usize], mode: &Mode) -> Result<Var> {
        let rows = g.value(encoded).rows();
        if heads.len() + 1 != rows {
            return Err(Error::Contract(format!("{} heads for {} tokens", heads.len(), rows - 1)));
        }
        if let Some((i, &h)) = heads.iter().enumerate().find(|(_, &h)| h >= rows) {
            return Err(Error::Contract(format!("head {h} of token {} out of range 0..={}", i + 1, rows - 1)));
        }
        let d = self.lab_dep.forward(g, encoded, mode)?;
        let h = self.lab_head.forward(g, encoded, mode)?;
        let deps = g.slice_rows(d, 1, rows)?;
        let heads = g.select_rows(h, heads)?;
        self.label.logits(g, deps, heads)
    }

    /// Mean head cross-entropy plus mean label cross-entropy given gold
    /// heads, plus the weighted auxiliary tagging loss if configured.
    pub fn loss(&self, g: &mut Graph<'_>, input: &ParserInput, mode: &Mode) -> Result<Var> {
        if input.is_empty() {
            return Err(Error::Data("cannot train on an empty sentence".into()));
        }
        let rels = input
            .rels
            .iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| Error::Data(format!("token {}: relation outside the label set", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        let h = self.encode(g, input, mode)?;
        let s = self.score_arcs(g, h, mode)?;
        let arc = arc_loss(g, s, &input.heads)?;
        let logits = self.score_labels(g, h, &input.heads, mode)?;
        let lab = g.cross_entropy(logits, &rels)?;
        let mut total = g.add(arc, lab)?;
        if let (Some(head), Some(task), Some(tags)) = (&self.aux, &self.spec.aux_task, &input.aux) {
            let n = input.len();
            let tokens = g.slice_rows(h, 1, n + 1)?;
            let logits = head.logits(g, tokens, mode)?;
            let ce = g.cross_entropy(logits, tags)?;
            let weighted = g.affine_const(ce, task.weight, 0.0);
            total = g.add(total, weighted)?;
        }
        Ok(total)
    }

    pub fn predict(&self, store: &ParameterStore, sentence: &Sentence) -> Result<ParseTree> {
        self.predict_input(store, &self.prepare(sentence)?)
    }

    /// MST heads, then the best relation per predicted arc.
    pub fn predict_input(&self, store: &ParameterStore, input: &ParserInput) -> Result<ParseTree> {
        let n = input.len();
        if n == 0 {
            return Ok(ParseTree {
                heads: Vec::new(),
                labels: Vec::new(),
            });
        }
        let mode = Mode::eval();
        let mut g = Graph::new(store);
        let h = self.encode(&mut g, input, &mode)?;
        let s = self.score_arcs(&mut g, h, &mode)?;
        let scores = arc_scores_of(g.value(s));
        let heads = decode_mst(&scores, self.spec.single_root);
        let logits = self.score_labels(&mut g, h, &heads, &mode)?;
        let lv = g.value(logits);
        let labels = (0..n)
            .map(|i| {
                let row = lv.row(i);
                let best = (1..row.len()).fold(0, |b, r| if row[r] > row[b] { r } else { b });
                self.spec.relations.label(best).to_string()
            })
            .collect();
        Ok(ParseTree { heads, labels })
    }

    /// Tags from the auxiliary head (argmax per token).
    pub fn predict_aux(&self, store: &ParameterStore, input: &ParserInput) -> Result<Option<Vec<usize>>> {
        let Some(head) = &self.aux else {
            return Ok(None);
        };
        let mode = Mode::eval();
        let mut g = Graph::new(store);
        let h = self.encode(&mut g, input, &mode)?;
        let tokens = g.slice_rows(h, 1, input.len() + 1)?;
        let logits = head.logits(&mut g, tokens, &mode)?;
        let lv = g.value(logits);
        Ok(Some(
            (0..input.len())
                .map(|i| {
                    let row = lv.row(i);
                    (1..row.len()).fold(0, |b, r| if row[r] > row[b] { r } else { b })
                })
                .collect(),
        ))
    }

    pub fn save(&self, store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
        model_io::save(path, MODEL_KIND, &self.spec, store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Parser, ParameterStore)> {
        let path = path.as_ref();
        let spec: ParserSpec = model_io::load_spec(path, MODEL_KIND)?;
        let mut store = ParameterStore::new();
        let parser = Parser::new(&mut store, &spec, SeedKey::new(0))?;
        checkpoint::load_file(&mut store, path)?;
        Ok((parser, store))
    }
}

/// Mean cross-entropy of gold heads under column-wise softmax of the
/// `[(n+1)×(n+1)]` head-by-dependent score matrix, with self-arcs masked.
pub fn arc_loss(g: &mut Graph<'_>, scores: Var, heads: &[usize]) -> Result<Var> {
    let n = heads.len();
    let cols = g.slice_cols(scores, 1, n + 1)?;
    let by_dep = g.transpose(cols);
    let mut mask = vec![0.0; n * (n + 1)];
    for i in 0..n {
        mask[i * (n + 1) + i + 1] = f64::NEG_INFINITY;
    }
    let m = g.constant(Tensor::matrix(n, n + 1, mask)?);
    let masked = g.add(by_dep, m)?;
    g.cross_entropy(masked, heads)
}

/// Decoder view of a raw `[(n+1)×(n+1)]` score matrix.
pub fn arc_scores_of(scores: &Tensor) -> ArcScores<f64> {
    let n = scores.rows() - 1;
    ArcScores::from_matrix(n, scores.data())
}
