use serde::{Deserialize, Serialize};

use super::{Init, Linear, Mode, WordVectors};
use crate::autodiff::{ParamId, Var};
use crate::conllu::Sentence;
use crate::error::{Error, Result};
use crate::tagschemes::{derive_tags, TagScheme};
use crate::vocab::{Vocab, PAD_ID};
use crate::{Graph, ParameterStore};

/// Sizes of one encoder stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_filters: usize,
    pub char_kernel: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::paper()
    }
}

impl EncoderConfig {
    pub fn paper() -> Self {
        EncoderConfig {
            word_dim: 300,
            char_dim: 100,
            char_filters: 100,
            char_kernel: 3,
            lstm_hidden: 1024,
            lstm_layers: 2,
            dropout: 0.33,
        }
    }

    /// Small sizes for single-core runs.
    pub fn desk() -> Self {
        EncoderConfig {
            word_dim: 32,
            char_dim: 16,
            char_filters: 16,
            char_kernel: 3,
            lstm_hidden: 64,
            lstm_layers: 2,
            dropout: 0.33,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("word_dim", self.word_dim),
            ("char_dim", self.char_dim),
            ("char_filters", self.char_filters),
            ("char_kernel", self.char_kernel),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.lstm_hidden
    }
}

/// Optional per-token tag channel concatenated to the word input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagInput {
    pub scheme: TagScheme,
    pub vocab: Vocab,
    pub dim: usize,
}

/// Everything needed to rebuild an [`Encoder`] with the same parameter
/// names and shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// Parameter-name prefix.
    pub name: String,
    pub config: EncoderConfig,
    pub words: Vocab,
    pub chars: Vocab,
    #[serde(default)]
    pub tag_input: Option<TagInput>,
    /// Layer indices followed by an adapter.
    #[serde(default)]
    pub adapters: Vec<usize>,
    #[serde(default = "default_adapter_dim")]
    pub adapter_dim: usize,
}

fn default_adapter_dim() -> usize {
    256
}

pub const WORD_MIN_FREQ: usize = 2;

impl EncoderSpec {
    /// Word vocabulary keeps forms seen at least twice so the UNK row is
    /// trained; every character seen is kept.
    pub fn from_forms<'a>(name: &str, config: EncoderConfig, forms: impl IntoIterator<Item = &'a str>) -> Self {
        let forms: Vec<&str> = forms.into_iter().collect();
        let chars: Vec<String> = forms.iter().flat_map(|f| f.chars().map(String::from)).collect();
        EncoderSpec {
            name: name.to_string(),
            config,
            words: Vocab::build(forms.iter().copied(), WORD_MIN_FREQ),
            chars: Vocab::build(chars.iter().map(String::as_str), 1),
            tag_input: None,
            adapters: Vec::new(),
            adapter_dim: default_adapter_dim(),
        }
    }

    pub fn renamed(&self, name: &str) -> Self {
        EncoderSpec {
            name: name.to_string(),
            ..self.clone()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.config.word_dim + self.config.char_filters + self.tag_input.as_ref().map_or(0, |t| t.dim)
    }

    pub fn layer_prefix(&self, layer: usize) -> String {
        format!("{}/lstm{layer}", self.name)
    }
}

/// Index form of one sentence for an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub words: Vec<usize>,
    /// Flattened char-id windows, `char_kernel` ids each.
    pub char_windows: Vec<usize>,
    /// Number of windows per word.
    pub char_counts: Vec<usize>,
    pub tags: Option<Vec<usize>>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Character embeddings, one convolution, max-pool over positions.
#[derive(Clone, Debug)]
pub struct CharCnn {
    pub emb: ParamId,
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub char_dim: usize,
    pub filters: usize,
}

impl CharCnn {
    pub fn new(init: &mut Init<'_>, name: &str, n_chars: usize, char_dim: usize, filters: usize, kernel: usize) -> Result<Self> {
        Ok(CharCnn {
            emb: init.uniform(&format!("{name}/emb"), n_chars, char_dim, 0.1)?,
            w: init.xavier(&format!("{name}/w"), kernel * char_dim, filters)?,
            b: init.zeros(&format!("{name}/b"), 1, filters)?,
            kernel,
            char_dim,
            filters,
        })
    }

    /// Window ids for one word; words shorter than the kernel are padded
    /// with PAD on the right.
    pub fn windows(&self, char_ids: &[usize], out: &mut Vec<usize>) -> usize {
        let mut ids = char_ids.to_vec();
        while ids.len() < self.kernel {
            ids.push(PAD_ID);
        }
        let count = ids.len() - self.kernel + 1;
        for t in 0..count {
            out.extend_from_slice(&ids[t..t + self.kernel]);
        }
        count
    }

    /// `[n_words × filters]`.
    pub fn forward(&self, g: &mut Graph<'_>, windows: &[usize], counts: &[usize]) -> Result<Var> {
        let total: usize = counts.iter().sum();
        let e = g.embedding(self.emb, windows)?;
        let r = g.reshape(e, total, self.kernel * self.char_dim)?;
        let w = g.param(self.w);
        let c = g.matmul(r, w)?;
        let b = g.param(self.b);
        let c = g.add(c, b)?;
        g.max_over_segments(c, counts)
    }
}

#[derive(Clone, Debug)]
struct LstmDir {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

impl LstmDir {
    fn new(init: &mut Init<'_>, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        let w_ih = init.xavier(&format!("{name}/w_ih"), in_dim, 4 * hidden)?;
        let w_hh = init.xavier(&format!("{name}/w_hh"), hidden, 4 * hidden)?;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        let b = init.tensor(&format!("{name}/b"), crate::Tensor::matrix(1, 4 * hidden, bias)?)?;
        Ok(LstmDir { w_ih, w_hh, b })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, reverse: bool) -> Result<Var> {
        let w = g.param(self.w_ih);
        let xw = g.matmul(x, w)?;
        let b = g.param(self.b);
        let xw = g.add(xw, b)?;
        let whh = g.param(self.w_hh);
        g.lstm(xw, whh, reverse)
    }
}

/// One bidirectional LSTM layer; output rows are `[forward; backward]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    fw: LstmDir,
    bw: LstmDir,
    pub in_dim: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(BiLstm {
            fw: LstmDir::new(init, &format!("{name}/fw"), in_dim, hidden)?,
            bw: LstmDir::new(init, &format!("{name}/bw"), in_dim, hidden)?,
            in_dim,
            hidden,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let f = self.fw.forward(g, x, false)?;
        let b = self.bw.forward(g, x, true)?;
        g.concat_cols(&[f, b])
    }
}

/// Residual bottleneck: `h + Up(tanh(Down(h)))`. The up-projection starts
/// at zero so a new adapter is the identity.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, dim: usize) -> Result<Self> {
        let down = Linear::new(init, &format!("{name}/down"), width, dim, true)?;
        let up = Linear {
            w: init.zeros(&format!("{name}/up/w"), dim, width)?,
            b: Some(init.zeros(&format!("{name}/up/b"), 1, width)?),
            in_dim: dim,
            out_dim: width,
        };
        Ok(Adapter { down, up })
    }

    pub fn forward(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let d = self.down.forward(g, h)?;
        let d = g.tanh(d);
        let u = self.up.forward(g, d)?;
        g.add(h, u)
    }
}

/// Word + char (+ tag) input, learned ROOT row, stacked BiLSTMs.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub word: ParamId,
    pub tag: Option<ParamId>,
    pub root: ParamId,
    pub cnn: CharCnn,
    pub layers: Vec<BiLstm>,
    pub adapters: Vec<Option<Adapter>>,
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, spec: &EncoderSpec) -> Result<Self> {
        let c = &spec.config;
        c.validate()?;
        let n = &spec.name;
        if let Some(&bad) = spec.adapters.iter().find(|&&l| l >= c.lstm_layers) {
            return Err(Error::Config(format!("adapter after layer {bad} but encoder has {} layers", c.lstm_layers)));
        }
        let word = init.uniform(&format!("{n}/word"), spec.words.len(), c.word_dim, 0.1)?;
        let tag = match &spec.tag_input {
            Some(t) => Some(init.uniform(&format!("{n}/tag"), t.vocab.len(), t.dim, 0.1)?),
            None => None,
        };
        let root = init.uniform(&format!("{n}/root"), 1, spec.input_dim(), 0.1)?;
        let cnn = CharCnn::new(init, &format!("{n}/char"), spec.chars.len(), c.char_dim, c.char_filters, c.char_kernel)?;
        let mut layers = Vec::new();
        let mut adapters = Vec::new();
        let mut width = spec.input_dim();
        for l in 0..c.lstm_layers {
            layers.push(BiLstm::new(init, &spec.layer_prefix(l), width, c.lstm_hidden)?);
            width = c.output_dim();
            adapters.push(if spec.adapters.contains(&l) {
                Some(Adapter::new(init, &format!("{n}/adapter{l}"), width, spec.adapter_dim)?)
            } else {
                None
            });
        }
        Ok(Encoder {
            spec: spec.clone(),
            word,
            tag,
            root,
            cnn,
            layers,
            adapters,
        })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn output_dim(&self) -> usize {
        self.spec.config.output_dim()
    }

    /// Index a sentence. When the encoder has a tag channel the tags are
    /// derived from the sentence with the channel's scheme.
    pub fn prepare_sentence(&self, sentence: &Sentence) -> Result<EncoderInput> {
        let forms: Vec<&str> = sentence.tokens.iter().map(|t| t.form.as_str()).collect();
        let tags = match &self.spec.tag_input {
            Some(t) => Some(derive_tags(sentence, t.scheme)?.labels),
            None => None,
        };
        self.prepare(&forms, tags.as_deref())
    }

    pub fn prepare(&self, forms: &[&str], tags: Option<&[String]>) -> Result<EncoderInput> {
        let words = forms.iter().map(|f| self.spec.words.lookup(f)).collect();
        let mut char_windows = Vec::new();
        let mut char_counts = Vec::with_capacity(forms.len());
        for f in forms {
            let ids: Vec<usize> = f.chars().map(|c| self.spec.chars.lookup(c.encode_utf8(&mut [0; 4]))).collect();
            char_counts.push(self.cnn.windows(&ids, &mut char_windows));
        }
        let tags = match (&self.spec.tag_input, tags) {
            (Some(t), Some(labels)) => {
                if labels.len() != forms.len() {
                    return Err(Error::Contract(format!("{} tags for {} tokens", labels.len(), forms.len())));
                }
                Some(labels.iter().map(|l| t.vocab.lookup(l)).collect())
            }
            (Some(_), None) => return Err(Error::Config(format!("encoder {} needs tag input", self.spec.name))),
            (None, _) => None,
        };
        Ok(EncoderInput {
            words,
            char_windows,
            char_counts,
            tags,
        })
    }

    /// Output of every layer, each `[(n+1) × 2·hidden]` with the ROOT row
    /// first.
    pub fn forward_layers(&self, g: &mut Graph<'_>, input: &EncoderInput, mode: &Mode) -> Result<Vec<Var>> {
        let root = g.param(self.root);
        let mut x = if input.is_empty() {
            root
        } else {
            let w = g.embedding(self.word, &input.words)?;
            let c = self.cnn.forward(g, &input.char_windows, &input.char_counts)?;
            let mut parts = vec![w, c];
            if let (Some(table), Some(tags)) = (self.tag, &input.tags) {
                parts.push(g.embedding(table, tags)?);
            }
            let tokens = g.concat_cols(&parts)?;
            g.concat_rows(&[root, tokens])?
        };
        let name = &self.spec.name;
        let p = self.spec.config.dropout;
        x = mode.dropout(g, x, p, &format!("{name}/in"))?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if let Some(a) = &self.adapters[l] {
                x = a.forward(g, x)?;
            }
            x = mode.dropout(g, x, p, &format!("{name}/lstm{l}"))?;
            outs.push(x);
        }
        Ok(outs)
    }

    pub fn forward(&self, g: &mut Graph<'_>, input: &EncoderInput, mode: &Mode) -> Result<Var> {
        Ok(*self.forward_layers(g, input, mode)?.last().expect("at least one layer"))
    }

    /// Overwrite word rows that have a pretrained vector; returns how many.
    pub fn load_word_vectors(&self, store: &mut ParameterStore, vectors: &WordVectors) -> Result<usize> {
        let dim = self.spec.config.word_dim;
        if vectors.dim != dim {
            return Err(Error::Config(format!("word vectors have dimension {}, encoder expects {dim}", vectors.dim)));
        }
        let table = store.value_mut(self.word).data_mut();
        let mut hits = 0;
        for (id, sym) in self.spec.words.symbols().iter().enumerate().skip(2) {
            if let Some(v) = vectors.get(sym) {
                table[id * dim..(id + 1) * dim].copy_from_slice(v);
                hits += 1;
            }
        }
        Ok(hits)
    }
}
