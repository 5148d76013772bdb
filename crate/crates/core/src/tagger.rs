//! BiLSTM sequence taggers for the auxiliary schemes, tagging metrics, and
//! the three-layer hierarchical morphological tagger.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Axis, Var};
use crate::conllu::Treebank;
use crate::error::{Error, Result};
use crate::nn::{Encoder, EncoderInput, EncoderSpec, Init, Mode, TagHead};
use crate::rng::SeedKey;
use crate::tagschemes::{derive_treebank_tags, TagScheme, TaggedSentence};
use crate::train::{fit, FitReport, TrainConfig};
use crate::vocab::Vocab;
use crate::{model_io, Graph, ParameterStore, Tensor};

pub const MODEL_KIND: &str = "tagger";
pub const HIER_MODEL_KIND: &str = "hier-morph-tagger";

/// First real label id; 0 and 1 are PAD and UNK.
const FIRST_LABEL: usize = 2;

fn argmax_label(row: &[f64]) -> usize {
    if row.len() <= FIRST_LABEL {
        return row.len() - 1;
    }
    (FIRST_LABEL + 1..row.len()).fold(FIRST_LABEL, |b, r| if row[r] > row[b] { r } else { b })
}

fn forms_of(s: &TaggedSentence) -> Vec<&str> {
    s.forms.iter().map(String::as_str).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerSpec {
    pub encoder: EncoderSpec,
    pub scheme: TagScheme,
    pub tags: Vocab,
    pub dropout: f64,
}

/// Encoder, two ReLU layers (128, 64) and a softmax over the tag vocabulary.
#[derive(Clone, Debug)]
pub struct Tagger {
    pub spec: TaggerSpec,
    pub encoder: Encoder,
    pub head: TagHead,
}

#[derive(Clone, Debug)]
pub struct TaggerInput {
    pub encoder: EncoderInput,
    pub targets: Vec<usize>,
}

impl Tagger {
    pub fn new(store: &mut ParameterStore, spec: &TaggerSpec, key: SeedKey) -> Result<Self> {
        let mut init = Init::new(store, key);
        let encoder = Encoder::new(&mut init, &spec.encoder)?;
        let head = TagHead::new(&mut init, "head", encoder.output_dim(), spec.tags.len(), spec.dropout)?;
        Ok(Tagger {
            spec: spec.clone(),
            encoder,
            head,
        })
    }

    pub fn prepare(&self, sentence: &TaggedSentence) -> Result<TaggerInput> {
        Ok(TaggerInput {
            encoder: self.encoder.prepare(&forms_of(sentence), None)?,
            targets: sentence.labels.iter().map(|l| self.spec.tags.lookup(l)).collect(),
        })
    }

    /// `[n × |tags|]` logits, ROOT row excluded.
    pub fn logits(&self, g: &mut Graph<'_>, input: &EncoderInput, mode: &Mode) -> Result<Var> {
        let h = self.encoder.forward(g, input, mode)?;
        let tokens = g.slice_rows(h, 1, input.len() + 1)?;
        self.head.logits(g, tokens, mode)
    }

    pub fn loss(&self, g: &mut Graph<'_>, input: &TaggerInput, mode: &Mode) -> Result<Var> {
        if input.targets.is_empty() {
            return Err(Error::Data("cannot train on an empty sentence".into()));
        }
        let l = self.logits(g, &input.encoder, mode)?;
        g.cross_entropy(l, &input.targets)
    }

    /// Per-token distributions over the tag vocabulary (eval mode).
    pub fn distributions(&self, store: &ParameterStore, input: &EncoderInput) -> Result<Tensor> {
        if input.is_empty() {
            return Ok(Tensor::zeros(&[0, self.spec.tags.len()]));
        }
        let mut g = Graph::new(store);
        let l = self.logits(&mut g, input, &Mode::eval())?;
        let p = g.softmax(l, Axis::Cols);
        Ok(g.value(p).clone())
    }

    /// Most likely real label per token.
    pub fn predict(&self, store: &ParameterStore, forms: &[&str]) -> Result<Vec<String>> {
        let input = self.encoder.prepare(forms, None)?;
        let p = self.distributions(store, &input)?;
        Ok((0..forms.len()).map(|i| self.spec.tags.symbol(argmax_label(p.row(i))).to_string()).collect())
    }

    pub fn save(&self, store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
        model_io::save(path, MODEL_KIND, &self.spec, store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Tagger, ParameterStore)> {
        let path = path.as_ref();
        let spec: TaggerSpec = model_io::load_spec(path, MODEL_KIND)?;
        let mut store = ParameterStore::new();
        let t = Tagger::new(&mut store, &spec, SeedKey::new(0))?;
        checkpoint::load_file(&mut store, path)?;
        Ok((t, store))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagMetrics {
    pub accuracy: f64,
    /// Unweighted mean of per-label F1 over labels present in gold.
    pub macro_f1: f64,
}

pub fn tag_metrics(pred: &[Vec<String>], gold: &[Vec<String>]) -> Result<TagMetrics> {
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!("{} predicted sequences for {} gold", pred.len(), gold.len())));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut per: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new(); // tp, predicted, gold
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Contract(format!("sequence {i}: {} predicted labels for {} gold", p.len(), g.len())));
        }
        for (a, b) in p.iter().zip(g) {
            total += 1;
            per.entry(b).or_default().2 += 1;
            per.entry(a).or_default().1 += 1;
            if a == b {
                correct += 1;
                per.entry(b).or_default().0 += 1;
            }
        }
    }
    let gold_labels: Vec<_> = per.values().filter(|c| c.2 > 0).collect();
    if gold_labels.is_empty() {
        return Err(Error::Data("gold sequences contain no labels".into()));
    }
    let f1_sum: f64 = gold_labels
        .iter()
        .map(|&&(tp, np, ng)| {
            let p = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
            let r = tp as f64 / ng as f64;
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .sum();
    Ok(TagMetrics {
        accuracy: correct as f64 / total as f64,
        macro_f1: f1_sum / gold_labels.len() as f64,
    })
}

/// Token accuracy of `tagger` on `data`.
pub fn evaluate_tagger(tagger: &Tagger, store: &ParameterStore, data: &[TaggedSentence]) -> Result<TagMetrics> {
    let pred = data
        .iter()
        .map(|s| tagger.predict(store, &forms_of(s)))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<Vec<String>> = data.iter().map(|s| s.labels.clone()).collect();
    tag_metrics(&pred, &gold)
}

/// Train a tagger for `scheme`; the model with the best dev accuracy is
/// kept (train accuracy when `dev` is empty). The encoder's parameters are
/// named under `enc/`.
pub fn train_tagger(
    train: &[TaggedSentence],
    dev: &[TaggedSentence],
    scheme: TagScheme,
    cfg: &TrainConfig,
) -> Result<(Tagger, ParameterStore, FitReport)> {
    train_tagger_with(train, dev, scheme, cfg, scheme.default_min_freq())
}

pub fn train_tagger_with(
    train: &[TaggedSentence],
    dev: &[TaggedSentence],
    scheme: TagScheme,
    cfg: &TrainConfig,
    min_freq: usize,
) -> Result<(Tagger, ParameterStore, FitReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty tagger training set".into()));
    }
    let tags = Vocab::build(train.iter().flat_map(|s| s.labels.iter().map(String::as_str)), min_freq);
    if tags.len() <= FIRST_LABEL {
        return Err(Error::Config(format!("{scheme}: tag vocabulary is empty")));
    }
    let spec = TaggerSpec {
        encoder: EncoderSpec::from_forms("enc", cfg.encoder_config(), train.iter().flat_map(forms_of)),
        scheme,
        tags,
        dropout: cfg.dropout,
    };
    let key = cfg.key().derive(&format!("tagger/{scheme}"));
    let mut store = ParameterStore::new();
    let tagger = Tagger::new(&mut store, &spec, key)?;
    let inputs = train.iter().map(|s| tagger.prepare(s)).collect::<Result<Vec<_>>>()?;
    let select = if dev.is_empty() { train } else { dev };
    let report = fit(
        &mut store,
        cfg,
        key,
        inputs.len(),
        |g, i, mode| tagger.loss(g, &inputs[i], mode),
        |s| Ok(evaluate_tagger(&tagger, s, select)?.accuracy),
        |_, _| {},
    )?;
    Ok((tagger, store, report))
}

/// Grammatical categories predicted after BiLSTM layers 1, 2 and 3.
pub const HIER_TASKS: [TagScheme; 3] = [TagScheme::NT, TagScheme::GT, TagScheme::CT];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierMorphSpec {
    /// Three-layer encoder named `enc`.
    pub encoder: EncoderSpec,
    /// Tag vocabularies for number, gender and case.
    pub tags: Vec<Vocab>,
    pub dropout: f64,
}

/// Three stacked BiLSTM layers with a number head after the first, a
/// gender head after the second and a case head after the third.
#[derive(Clone, Debug)]
pub struct HierMorphTagger {
    pub spec: HierMorphSpec,
    pub encoder: Encoder,
    pub heads: Vec<TagHead>,
}

/// Parameters of one pretrained BiLSTM layer.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub task: TagScheme,
    pub prefix: String,
    pub params: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct HierInput {
    pub encoder: EncoderInput,
    pub targets: Vec<Vec<usize>>,
}

impl HierMorphTagger {
    pub fn new(store: &mut ParameterStore, spec: &HierMorphSpec, key: SeedKey) -> Result<Self> {
        if spec.encoder.config.lstm_layers != HIER_TASKS.len() || spec.tags.len() != HIER_TASKS.len() {
            return Err(Error::Config("hierarchical tagger needs exactly 3 layers and 3 tag sets".into()));
        }
        let mut init = Init::new(store, key);
        let encoder = Encoder::new(&mut init, &spec.encoder)?;
        let heads = HIER_TASKS
            .iter()
            .zip(&spec.tags)
            .map(|(t, v)| TagHead::new(&mut init, &format!("head_{}", t.name()), encoder.output_dim(), v.len(), spec.dropout))
            .collect::<Result<Vec<_>>>()?;
        Ok(HierMorphTagger {
            spec: spec.clone(),
            encoder,
            heads,
        })
    }

    pub fn prepare(&self, forms: &[&str], labels: &[Vec<String>]) -> Result<HierInput> {
        Ok(HierInput {
            encoder: self.encoder.prepare(forms, None)?,
            targets: labels
                .iter()
                .zip(&self.spec.tags)
                .map(|(ls, v)| ls.iter().map(|l| v.lookup(l)).collect())
                .collect(),
        })
    }

    /// Logits of the three heads, bottom-up.
    pub fn logits(&self, g: &mut Graph<'_>, input: &EncoderInput, mode: &Mode) -> Result<Vec<Var>> {
        let layers = self.encoder.forward_layers(g, input, mode)?;
        let n = input.len();
        layers
            .iter()
            .zip(&self.heads)
            .map(|(&h, head)| {
                let tokens = g.slice_rows(h, 1, n + 1)?;
                head.logits(g, tokens, mode)
            })
            .collect()
    }

    /// Sum of the three per-token mean cross-entropies.
    pub fn loss(&self, g: &mut Graph<'_>, input: &HierInput, mode: &Mode) -> Result<Var> {
        if input.encoder.is_empty() {
            return Err(Error::Data("cannot train on an empty sentence".into()));
        }
        let logits = self.logits(g, &input.encoder, mode)?;
        let mut total = None;
        for (l, t) in logits.into_iter().zip(&input.targets) {
            let ce = g.cross_entropy(l, t)?;
            total = Some(match total {
                None => ce,
                Some(acc) => g.add(acc, ce)?,
            });
        }
        Ok(total.expect("three heads"))
    }

    /// Per-task distributions (eval mode).
    pub fn distributions(&self, store: &ParameterStore, input: &EncoderInput) -> Result<Vec<Tensor>> {
        let mut g = Graph::new(store);
        let logits = self.logits(&mut g, input, &Mode::eval())?;
        Ok(logits
            .into_iter()
            .map(|l| {
                let p = g.softmax(l, Axis::Cols);
                g.value(p).clone()
            })
            .collect())
    }

    pub fn predict(&self, store: &ParameterStore, forms: &[&str]) -> Result<Vec<Vec<String>>> {
        let input = self.encoder.prepare(forms, None)?;
        let dists = self.distributions(store, &input)?;
        Ok(dists
            .iter()
            .zip(&self.spec.tags)
            .map(|(p, v)| (0..forms.len()).map(|i| v.symbol(argmax_label(p.row(i))).to_string()).collect())
            .collect())
    }

    /// The three BiLSTM layers' weights in order number → gender → case.
    pub fn extract_layers(&self, store: &ParameterStore) -> Vec<LayerWeights> {
        HIER_TASKS
            .iter()
            .enumerate()
            .map(|(l, &task)| {
                let prefix = format!("{}/", self.encoder.spec.layer_prefix(l));
                let params = store
                    .ids()
                    .filter(|&id| store.name(id).starts_with(&prefix))
                    .map(|id| (store.name(id).to_string(), store.value(id).clone()))
                    .collect();
                LayerWeights { task, prefix, params }
            })
            .collect()
    }

    pub fn save(&self, store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
        model_io::save(path, HIER_MODEL_KIND, &self.spec, store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(HierMorphTagger, ParameterStore)> {
        let path = path.as_ref();
        let spec: HierMorphSpec = model_io::load_spec(path, HIER_MODEL_KIND)?;
        let mut store = ParameterStore::new();
        let t = HierMorphTagger::new(&mut store, &spec, SeedKey::new(0))?;
        checkpoint::load_file(&mut store, path)?;
        Ok((t, store))
    }
}

fn hier_labels(treebank: &Treebank) -> Result<Vec<Vec<Vec<String>>>> {
    let per_task = HIER_TASKS
        .iter()
        .map(|&t| derive_treebank_tags(treebank, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..treebank.len())
        .map(|i| per_task.iter().map(|seqs| seqs[i].labels.clone()).collect())
        .collect())
}

/// Mean token accuracy over the three tasks.
pub fn evaluate_hier(model: &HierMorphTagger, store: &ParameterStore, data: &Treebank) -> Result<[f64; 3]> {
    let gold = hier_labels(data)?;
    let mut correct = [0usize; 3];
    let mut total = 0usize;
    for (s, g) in data.sentences.iter().zip(&gold) {
        let forms: Vec<&str> = s.tokens.iter().map(|t| t.form.as_str()).collect();
        let pred = model.predict(store, &forms)?;
        total += forms.len();
        for k in 0..3 {
            correct[k] += pred[k].iter().zip(&g[k]).filter(|(a, b)| a == b).count();
        }
    }
    let t = total.max(1) as f64;
    Ok([correct[0] as f64 / t, correct[1] as f64 / t, correct[2] as f64 / t])
}

/// Jointly train the three heads; selection by mean dev accuracy (train
/// accuracy when `dev` is empty).
pub fn train_hier_morph_tagger(
    train: &Treebank,
    dev: &Treebank,
    cfg: &TrainConfig,
) -> Result<(HierMorphTagger, ParameterStore, FitReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training treebank".into()));
    }
    let labels = hier_labels(train)?;
    let tags = (0..3)
        .map(|k| Vocab::build(labels.iter().flat_map(|s| s[k].iter().map(String::as_str)), 1))
        .collect();
    let mut config = cfg.encoder_config();
    config.lstm_layers = HIER_TASKS.len();
    let forms = train.sentences.iter().flat_map(|s| s.tokens.iter().map(|t| t.form.as_str()));
    let spec = HierMorphSpec {
        encoder: EncoderSpec::from_forms("enc", config, forms),
        tags,
        dropout: cfg.dropout,
    };
    let key = cfg.key().derive("hier-morph");
    let mut store = ParameterStore::new();
    let model = HierMorphTagger::new(&mut store, &spec, key)?;
    let inputs = train
        .sentences
        .iter()
        .zip(&labels)
        .map(|(s, l)| {
            let forms: Vec<&str> = s.tokens.iter().map(|t| t.form.as_str()).collect();
            model.prepare(&forms, l)
        })
        .collect::<Result<Vec<_>>>()?;
    let select = if dev.is_empty() { train } else { dev };
    let report = fit(
        &mut store,
        cfg,
        key,
        inputs.len(),
        |g, i, mode| model.loss(g, &inputs[i], mode),
        |s| Ok(evaluate_hier(&model, s, select)?.iter().sum::<f64>() / 3.0),
        |_, _| {},
    )?;
    Ok((model, store, report))
}
