//! Experiment recipes built from the parser, the taggers and the gate.
//!
//! Every variant is assembled from the same steps: optionally train a
//! base parser and parse the extra data with it, pretrain auxiliary
//! taggers, put their encoders next to the parser's own encoder behind a
//! gate, train, evaluate. A run is a pure function of its data, spec and
//! seed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conllu::{read_conllu_file, validate_tree, write_conllu_file, Treebank};
use crate::error::{Error, Result};
use crate::eval::{report, uas_las, AttachmentScore, Metrics, NamedScore, PunctPolicy};
use crate::nn::{read_word_vectors, EncoderSpec, GateVariant, TagInput, WordVectors};
use crate::parser::{AuxTaskSpec, ParseTree, Parser, ParserInput, ParserSpec};
use crate::tagger::{tag_metrics, train_tagger, HierMorphTagger, TagMetrics, Tagger};
use crate::tagschemes::{
    derive_treebank_tags, read_tag_tsv_file, tagged_sentences, write_tag_tsv, TagScheme, TaggedSentence,
};
use crate::train::{fit, FitReport, TrainConfig};
use crate::vocab::{LabelSet, Vocab};
use crate::ParameterStore;

/// Default size of the extra-data pool in the low-resource setting.
pub const PAPER_EXTRA_SENTENCES: usize = 1000;

pub const LCM_SCHEMES: [TagScheme; 3] = [TagScheme::MT, TagScheme::CT, TagScheme::LT];
pub const DCST_SCHEMES: [TagScheme; 4] = [TagScheme::RD, TagScheme::NC, TagScheme::RP, TagScheme::LM];

/// Layers taken from the hierarchical tagger; one fresh layer goes on top.
pub const TRANSFERRED_LAYERS: usize = 3;

/// Name of the parser's own encoder in every roster.
pub const PARSER_ENCODER: &str = "enc";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Base,
    /// Base with one extra layer, sized like the TranSeq encoder.
    BaseStar,
    OracleMi,
    PredictedMi,
    Mtl,
    TranseqFe,
    TranseqFea,
    TranseqUf,
    TranseqDl,
    TranseqFt,
    Lcm,
    Dcst,
    DcstLcm,
}

impl Variant {
    pub const ALL: [Variant; 13] = [
        Variant::Base,
        Variant::BaseStar,
        Variant::OracleMi,
        Variant::PredictedMi,
        Variant::Mtl,
        Variant::TranseqFe,
        Variant::TranseqFea,
        Variant::TranseqUf,
        Variant::TranseqDl,
        Variant::TranseqFt,
        Variant::Lcm,
        Variant::Dcst,
        Variant::DcstLcm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseStar => "base_star",
            Variant::OracleMi => "oracle_mi",
            Variant::PredictedMi => "predicted_mi",
            Variant::Mtl => "mtl",
            Variant::TranseqFe => "transeq_fe",
            Variant::TranseqFea => "transeq_fea",
            Variant::TranseqUf => "transeq_uf",
            Variant::TranseqDl => "transeq_dl",
            Variant::TranseqFt => "transeq_ft",
            Variant::Lcm => "lcm",
            Variant::Dcst => "dcst",
            Variant::DcstLcm => "dcst_lcm",
        }
    }

    pub fn schedule(self) -> Option<Schedule> {
        match self {
            Variant::TranseqFe => Some(Schedule::Fe),
            Variant::TranseqFea => Some(Schedule::Fea),
            Variant::TranseqUf => Some(Schedule::Uf),
            Variant::TranseqDl => Some(Schedule::Dl),
            Variant::TranseqFt => Some(Schedule::Ft),
            _ => None,
        }
    }

    /// Whether the variant reads the extra sentences.
    pub fn needs_extra(self) -> bool {
        matches!(self, Variant::Lcm | Variant::Dcst | Variant::DcstLcm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?} ({})", names.join("|")))
            })
    }
}

/// How the transferred layers are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// Frozen.
    Fe,
    /// Frozen, with adapters after the first two layers.
    Fea,
    /// Unfrozen one layer at a time, top first.
    Uf,
    /// Trainable with learning rates shrinking towards the bottom.
    Dl,
    /// Trainable at the base learning rate.
    Ft,
}

/// Which parser the variant augments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// The plain biaffine parser.
    #[default]
    Biaff,
    /// The self-training ensemble: the roster also carries RD/NC/RP/LM
    /// tagger encoders pretrained on auto-parsed extra data.
    Dcst,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "biaff" => Ok(Family::Biaff),
            "dcst" => Ok(Family::Dcst),
            _ => Err(Error::Config(format!("unknown parser family {s:?} (biaff|dcst)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSpec {
    pub variant: Variant,
    pub family: Family,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Extra sentences: morphologically tagged for LCM, raw for DCST.
    pub extra: Option<PathBuf>,
    /// Use only the first `extra_size` extra sentences.
    pub extra_size: Option<usize>,
    /// Hierarchical morphological tagger checkpoint for TranSeq.
    pub hier_tagger: Option<PathBuf>,
    /// Externally predicted morphological tags for the test set (TSV);
    /// otherwise predicted MI trains its own MT tagger.
    pub test_tags: Option<PathBuf>,
    /// Pretrained word vectors (text format) for the parser's own encoder.
    pub vectors: Option<PathBuf>,
    /// Override the auxiliary scheme list of the gated variants.
    pub schemes: Option<Vec<TagScheme>>,
    pub gate: GateVariant,
    /// Diagnostic: give every auxiliary encoder a gate score of −∞.
    pub collapse_gate: bool,
    /// Freeze pretrained tagger encoders during integration.
    pub freeze_pretrained: bool,
    /// Start the self-training ensemble's own encoder from the base parser.
    pub warm_start: bool,
    pub mtl_scheme: TagScheme,
    pub mtl_weight: f64,
    pub mi_scheme: TagScheme,
    pub tag_dim: usize,
    pub unfreeze_every: usize,
    pub lr_decay: f64,
    pub single_root: bool,
    pub punct: PunctPolicy,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        PipelineSpec {
            variant: Variant::Base,
            family: Family::Biaff,
            train: None,
            dev: None,
            test: None,
            extra: None,
            extra_size: None,
            hier_tagger: None,
            test_tags: None,
            vectors: None,
            schemes: None,
            gate: GateVariant::Softmax,
            collapse_gate: false,
            freeze_pretrained: false,
            warm_start: false,
            mtl_scheme: TagScheme::CT,
            mtl_weight: 1.0,
            mi_scheme: TagScheme::MT,
            tag_dim: 32,
            unfreeze_every: 20,
            lr_decay: 1.2,
            single_root: true,
            punct: PunctPolicy::Include,
        }
    }
}

impl PipelineSpec {
    pub fn new(variant: Variant) -> Self {
        PipelineSpec {
            variant,
            ..PipelineSpec::default()
        }
    }

    /// Auxiliary schemes gated next to the parser's encoder.
    pub fn aux_schemes(&self) -> Vec<TagScheme> {
        if let Some(s) = &self.schemes {
            return s.clone();
        }
        match (self.variant, self.family) {
            (Variant::Lcm | Variant::DcstLcm, _) => LCM_SCHEMES.to_vec(),
            (Variant::Dcst, _) => DCST_SCHEMES.to_vec(),
            (_, Family::Dcst) => DCST_SCHEMES.to_vec(),
            _ => Vec::new(),
        }
    }

    /// Whether the auxiliary taggers follow the self-training recipe
    /// (extra data only, trees from the base parser).
    pub fn self_training(&self) -> bool {
        matches!(self.variant, Variant::Dcst | Variant::DcstLcm) || (self.family == Family::Dcst && self.variant != Variant::Lcm)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.variant;
        if self.family == Family::Dcst && v.schedule().is_some() {
            return Err(Error::Config(format!("{v} is only defined for the biaff family")));
        }
        if !(self.mtl_weight >= 0.0) {
            return Err(Error::Config(format!("mtl_weight {} must be non-negative", self.mtl_weight)));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config(format!("lr_decay {} must be positive", self.lr_decay)));
        }
        if self.unfreeze_every == 0 || self.tag_dim == 0 {
            return Err(Error::Config("unfreeze_every and tag_dim must be positive".into()));
        }
        if let Some(s) = &self.schemes {
            let mut seen = s.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != s.len() {
                return Err(Error::Config("duplicate scheme in the gating list".into()));
            }
        }
        Ok(())
    }

    /// Config snapshot hashed into the metrics file.
    pub fn snapshot(&self, cfg: &TrainConfig) -> serde_json::Value {
        serde_json::json!({ "pipeline": self, "train": cfg })
    }
}

/// Inputs of one run, already in memory.
#[derive(Clone, Debug, Default)]
pub struct PipelineData {
    pub train: Treebank,
    pub dev: Treebank,
    pub test: Treebank,
    pub extra: Option<Treebank>,
    pub hier: Option<(HierMorphTagger, ParameterStore)>,
    pub test_tags: Option<Vec<TaggedSentence>>,
    /// Pretrained word vectors for the parser's own encoder.
    pub vectors: Option<WordVectors>,
}

impl PipelineData {
    pub fn new(train: Treebank, dev: Treebank, test: Treebank) -> Self {
        PipelineData {
            train,
            dev,
            test,
            ..PipelineData::default()
        }
    }

    pub fn with_extra(mut self, extra: Treebank) -> Self {
        self.extra = Some(extra);
        self
    }

    /// Read every file named in `spec`.
    pub fn load(spec: &PipelineSpec) -> Result<Self> {
        let need = |p: &Option<PathBuf>, what: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("{} needs --{what}", spec.variant)))
        };
        let train = read_conllu_file(need(&spec.train, "train")?)?;
        let dev = match &spec.dev {
            Some(p) => read_conllu_file(p)?,
            None => Treebank::default(),
        };
        let test = read_conllu_file(need(&spec.test, "test")?)?;
        let extra = spec.extra.as_ref().map(read_conllu_file).transpose()?;
        let hier = spec.hier_tagger.as_ref().map(HierMorphTagger::load).transpose()?;
        let test_tags = spec.test_tags.as_ref().map(read_tag_tsv_file).transpose()?;
        let vectors = spec.vectors.as_ref().map(read_word_vectors).transpose()?;
        Ok(PipelineData {
            train,
            dev,
            test,
            extra,
            hier,
            test_tags,
            vectors,
        })
    }
}

/// A pretrained tagger whose encoder joins the parser's roster.
#[derive(Clone, Debug)]
pub struct AuxEncoder {
    pub scheme: TagScheme,
    pub tagger: Tagger,
    pub store: ParameterStore,
    pub data: Vec<TaggedSentence>,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub parser: Parser,
    pub store: ParameterStore,
    pub score: AttachmentScore,
    pub predictions: Vec<ParseTree>,
    pub fit: FitReport,
    pub metrics: Metrics,
    /// The base parser trained on the way, when the variant needs one.
    pub base: Option<(Parser, ParameterStore, AttachmentScore)>,
    pub aux: Vec<AuxEncoder>,
    /// Extra data with trees from the base parser.
    pub auto_parsed: Option<Treebank>,
    pub log: Vec<String>,
}

struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    fn note(&mut self, msg: String) {
        log::info!("{msg}");
        self.lines.push(msg);
    }
}

fn forms(tb: &Treebank) -> impl Iterator<Item = &str> {
    tb.sentences.iter().flat_map(|s| s.tokens.iter().map(|t| t.form.as_str()))
}

fn relations(tb: &Treebank) -> LabelSet {
    LabelSet::build(tb.sentences.iter().flat_map(|s| s.tokens.iter().map(|t| t.deprel.as_str())))
}

fn check_data(spec: &PipelineSpec, data: &PipelineData) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Data("empty training treebank".into()));
    }
    if data.test.is_empty() {
        return Err(Error::Data("empty test treebank".into()));
    }
    let needs_extra = spec.variant.needs_extra() || spec.family == Family::Dcst;
    if needs_extra && data.extra.as_ref().is_none_or(Treebank::is_empty) {
        return Err(Error::Config(format!("{} needs extra sentences (--extra)", spec.variant)));
    }
    if spec.variant.schedule().is_some() && data.hier.is_none() {
        return Err(Error::Config(format!("{} needs a hierarchical tagger checkpoint (--hier-tagger)", spec.variant)));
    }
    for (name, tb) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test)] {
        for (i, s) in tb.sentences.iter().enumerate() {
            validate_tree(s).map_err(|e| Error::Data(format!("{name} {}: {e}", s.label(i))))?;
        }
    }
    Ok(())
}

/// The parser's own encoder: fresh, sized by the run's profile.
pub fn base_encoder_spec(train: &Treebank, cfg: &TrainConfig) -> EncoderSpec {
    EncoderSpec::from_forms(PARSER_ENCODER, cfg.encoder_config(), forms(train))
}

/// Plain single-encoder parser spec for `train`.
pub fn base_parser_spec(train: &Treebank, cfg: &TrainConfig) -> ParserSpec {
    ParserSpec::new(vec![base_encoder_spec(train, cfg)], relations(train))
}

/// Encoder holding the transferred layers plus one fresh layer; the
/// vocabularies and sizes are the hierarchical tagger's.
pub fn transeq_encoder_spec(hier: &HierMorphTagger, cfg: &TrainConfig, schedule: Option<Schedule>) -> EncoderSpec {
    let mut e = hier.spec.encoder.renamed(PARSER_ENCODER);
    e.config.lstm_layers = TRANSFERRED_LAYERS + 1;
    e.config.dropout = cfg.dropout;
    e.tag_input = None;
    e.adapters = if schedule == Some(Schedule::Fea) {
        (0..TRANSFERRED_LAYERS - 1).collect()
    } else {
        Vec::new()
    };
    e
}

/// Parameter-name prefixes of the transferred layers, bottom-up. The
/// embeddings travel with the bottom layer.
pub fn transferred_groups(encoder: &str) -> [Vec<String>; TRANSFERRED_LAYERS] {
    [
        vec![
            format!("{encoder}/word"),
            format!("{encoder}/char/"),
            format!("{encoder}/root"),
            format!("{encoder}/lstm0/"),
        ],
        vec![format!("{encoder}/lstm1/")],
        vec![format!("{encoder}/lstm2/")],
    ]
}

/// Learning rates of the transferred layers, top-down: `lr, lr/f, lr/f²`.
pub fn discriminative_lrs(lr: f64, factor: f64) -> [f64; TRANSFERRED_LAYERS] {
    let mut out = [lr; TRANSFERRED_LAYERS];
    for k in 1..TRANSFERRED_LAYERS {
        out[k] = out[k - 1] / factor;
    }
    out
}

/// First epoch at which transferred layer `layer` (0 = bottom) trains
/// under gradual unfreezing: the top one after `every` epochs, the next
/// after `2·every`, and so on.
pub fn unfreeze_epoch(layer: usize, every: usize) -> usize {
    every * (TRANSFERRED_LAYERS - layer)
}

fn set_group_trainable(store: &mut ParameterStore, group: &[String], on: bool) {
    for p in group {
        store.set_trainable_prefix(p, on);
    }
}

/// Train `parser` on prepared inputs, selecting on dev LAS.
#[allow(clippy::too_many_arguments)]
fn fit_parser<H>(
    parser: &Parser,
    store: &mut ParameterStore,
    cfg: &TrainConfig,
    train: &[ParserInput],
    dev_inputs: &[ParserInput],
    dev_gold: &Treebank,
    punct: PunctPolicy,
    on_epoch: H,
) -> Result<FitReport>
where
    H: FnMut(usize, &mut ParameterStore),
{
    fit(
        store,
        cfg,
        cfg.key().derive("parser"),
        train.len(),
        |g, i, mode| parser.loss(g, &train[i], mode),
        |s| {
            let pred = dev_inputs
                .iter()
                .map(|x| parser.predict_input(s, x))
                .collect::<Result<Vec<_>>>()?;
            let las = uas_las(dev_gold, &pred, punct)?.las;
            // Dev-LAS ties go to the better auxiliary tagger.
            Ok(match aux_accuracy(parser, s, dev_inputs)? {
                Some(acc) => las + AUX_TIE_BREAK * acc,
                None => las,
            })
        },
        on_epoch,
    )
}

/// Far below one token's worth of LAS on any realistic dev set.
const AUX_TIE_BREAK: f64 = 1e-6;

/// Token accuracy of the joint tagging head, if the parser has one.
fn aux_accuracy(parser: &Parser, store: &ParameterStore, inputs: &[ParserInput]) -> Result<Option<f64>> {
    if parser.spec.aux_task.is_none() {
        return Ok(None);
    }
    let mut hit = 0usize;
    let mut total = 0usize;
    for x in inputs {
        if let (Some(p), Some(g)) = (parser.predict_aux(store, x)?, &x.aux) {
            hit += p.iter().zip(g).filter(|(a, b)| a == b).count();
            total += g.len();
        }
    }
    Ok(Some(hit as f64 / total.max(1) as f64))
}

fn prepare_all(parser: &Parser, tb: &Treebank) -> Result<Vec<ParserInput>> {
    tb.sentences.iter().map(|s| parser.prepare(s)).collect()
}

fn predict_all(parser: &Parser, store: &ParameterStore, inputs: &[ParserInput]) -> Result<Vec<ParseTree>> {
    inputs.iter().map(|x| parser.predict_input(store, x)).collect()
}

/// Train the plain biaffine parser on `train`, selecting on `dev` LAS
/// (train LAS when `dev` is empty).
pub fn train_parser(
    train: &Treebank,
    dev: &Treebank,
    cfg: &TrainConfig,
    vectors: Option<&WordVectors>,
    punct: PunctPolicy,
) -> Result<(Parser, ParameterStore, FitReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training treebank".into()));
    }
    let spec = base_parser_spec(train, cfg);
    let mut store = ParameterStore::new();
    let parser = Parser::new(&mut store, &spec, cfg.key().derive("parser"))?;
    if let Some(v) = vectors {
        parser.encoders[0].load_word_vectors(&mut store, v)?;
    }
    let inputs = prepare_all(&parser, train)?;
    let dev_gold = if dev.is_empty() { train } else { dev };
    let dev_inputs = prepare_all(&parser, dev_gold)?;
    let fit = fit_parser(&parser, &mut store, cfg, &inputs, &dev_inputs, dev_gold, punct, |_, _| {})?;
    Ok((parser, store, fit))
}

fn train_base(data: &PipelineData, cfg: &TrainConfig, punct: PunctPolicy) -> Result<(Parser, ParameterStore, FitReport, AttachmentScore)> {
    let (parser, store, fit) = train_parser(&data.train, &data.dev, cfg, data.vectors.as_ref(), punct)?;
    let test = prepare_all(&parser, &data.test)?;
    let pred = predict_all(&parser, &store, &test)?;
    let score = uas_las(&data.test, &pred, punct)?;
    Ok((parser, store, fit, score))
}

/// Replace trees in `extra` with the parser's predictions. Every produced
/// tree is checked.
pub fn auto_parse(parser: &Parser, store: &ParameterStore, extra: &Treebank) -> Result<Treebank> {
    let mut out = extra.clone();
    for (i, s) in out.sentences.iter_mut().enumerate() {
        let tree = parser.predict(store, s)?;
        *s = tree.apply_to(s);
        validate_tree(s).map_err(|e| Error::Contract(format!("auto-parsed {}: {e}", s.label(i))))?;
    }
    Ok(out)
}

/// Train one tagger per scheme on `source`, selecting on `dev`.
pub fn pretrain_taggers(
    schemes: &[TagScheme],
    source: &Treebank,
    dev: &Treebank,
    cfg: &TrainConfig,
) -> Result<Vec<AuxEncoder>> {
    schemes
        .iter()
        .map(|&scheme| {
            let data = tagged_sentences(source, &derive_treebank_tags(source, scheme)?);
            let dev_data = tagged_sentences(dev, &derive_treebank_tags(dev, scheme)?);
            let (tagger, store, report) = train_tagger(&data, &dev_data, scheme, cfg)?;
            Ok(AuxEncoder {
                scheme,
                tagger,
                store,
                data,
                dev_accuracy: report.best_score,
            })
        })
        .collect()
}

/// Gated parser spec: the parser's encoder first, then one encoder per
/// pretrained tagger, named after its scheme.
pub fn gated_parser_spec(own: EncoderSpec, aux: &[AuxEncoder], relations: LabelSet, gate: GateVariant) -> ParserSpec {
    let mut encoders = vec![own];
    encoders.extend(aux.iter().map(|a| a.tagger.spec.encoder.renamed(a.scheme.name())));
    let mut spec = ParserSpec::new(encoders, relations);
    spec.gate = gate;
    spec
}

/// Copy each tagger's encoder weights into its slot of the roster.
pub fn install_aux(store: &mut ParameterStore, aux: &[AuxEncoder]) -> Result<()> {
    for a in aux {
        let dst = format!("{}/", a.scheme.name());
        let n = store.copy_from(&a.store, "enc/", &dst)?;
        if n == 0 {
            return Err(Error::Checkpoint(format!("{} tagger has no encoder parameters", a.scheme)));
        }
    }
    Ok(())
}

fn tag_vocab(tb: &Treebank, scheme: TagScheme) -> Result<Vocab> {
    let seqs = derive_treebank_tags(tb, scheme)?;
    Ok(Vocab::build(seqs.iter().flat_map(|s| s.labels.iter().map(String::as_str)), 1))
}

/// Point encoder 0's tag channel at predicted tags.
fn override_tags(parser: &Parser, inputs: &mut [ParserInput], tb: &Treebank, tags: &[Vec<String>]) -> Result<()> {
    if tags.len() != tb.len() {
        return Err(Error::Data(format!("{} tag sequences for {} sentences", tags.len(), tb.len())));
    }
    for ((x, s), t) in inputs.iter_mut().zip(&tb.sentences).zip(tags) {
        let f: Vec<&str> = s.tokens.iter().map(|t| t.form.as_str()).collect();
        x.encoders[0] = parser.encoders[0].prepare(&f, Some(t))?;
    }
    Ok(())
}

/// Run one pipeline. When `out` is given the run directory receives the
/// config snapshot, checkpoints with sidecars, metrics, derived tag
/// datasets, test predictions and a log.
pub fn run_pipeline(
    spec: &PipelineSpec,
    data: &PipelineData,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<PipelineOutcome> {
    spec.validate()?;
    cfg.validate()?;
    check_data(spec, data)?;
    let mut log = RunLog { lines: Vec::new() };
    let punct = spec.punct;
    let variant = spec.variant;
    log.note(format!(
        "{variant} ({:?} family), seed {}, {} train / {} dev / {} test sentences",
        spec.family,
        cfg.seed,
        data.train.len(),
        data.dev.len(),
        data.test.len()
    ));
    let mut extra_metrics = BTreeMap::new();

    // Base parser, needed for auto-parsing and warm starts.
    let schemes = spec.aux_schemes();
    let extra = data.extra.as_ref().map(|e| match spec.extra_size {
        Some(n) => e.prefix(n),
        None => e.clone(),
    });
    let needs_trees = !schemes.is_empty() && schemes.iter().any(|s| s.needs_tree());
    let mut base = None;
    let mut auto_parsed = None;
    if needs_trees || (spec.self_training() && spec.warm_start) {
        let (p, s, fit, score) = train_base(data, cfg, punct)?;
        log.note(format!("base parser: best dev LAS {:.2} at epoch {}; test {:.2} / {:.2}", fit.best_score, fit.best_epoch, score.uas, score.las));
        extra_metrics.insert("base_uas".to_string(), score.uas);
        extra_metrics.insert("base_las".to_string(), score.las);
        if let Some(e) = &extra {
            let parsed = auto_parse(&p, &s, e)?;
            log.note(format!("auto-parsed {} extra sentences, all trees valid", parsed.len()));
            extra_metrics.insert("auto_trees_valid".to_string(), 1.0);
            auto_parsed = Some(parsed);
        }
        base = Some((p, s, score));
    }

    // Auxiliary taggers.
    let aux = if schemes.is_empty() {
        Vec::new()
    } else {
        let extra_tb = auto_parsed.as_ref().or(extra.as_ref()).ok_or_else(|| {
            Error::Config(format!("{variant} needs extra sentences (--extra)"))
        })?;
        let source = if spec.self_training() {
            extra_tb.clone()
        } else {
            data.train.concat(extra_tb)
        };
        let aux = pretrain_taggers(&schemes, &source, &data.dev, cfg)?;
        for a in &aux {
            log.note(format!("{} tagger: {} sentences, best dev accuracy {:.4}", a.scheme, a.data.len(), a.dev_accuracy));
            extra_metrics.insert(format!("tagger_{}_dev_accuracy", a.scheme), a.dev_accuracy);
        }
        aux
    };

    // The parser's own encoder.
    let schedule = variant.schedule();
    let hier = data.hier.as_ref();
    let mut own = match (variant, hier) {
        (_, Some((h, _))) if schedule.is_some() => transeq_encoder_spec(h, cfg, schedule),
        (Variant::BaseStar, Some((h, _))) => transeq_encoder_spec(h, cfg, None),
        (Variant::BaseStar, None) => {
            let mut e = base_encoder_spec(&data.train, cfg);
            e.config.lstm_layers = TRANSFERRED_LAYERS + 1;
            e
        }
        _ => base_encoder_spec(&data.train, cfg),
    };
    if matches!(variant, Variant::OracleMi | Variant::PredictedMi) {
        own.tag_input = Some(TagInput {
            scheme: spec.mi_scheme,
            vocab: tag_vocab(&data.train, spec.mi_scheme)?,
            dim: spec.tag_dim,
        });
    }
    let mut pspec = gated_parser_spec(own, &aux, relations(&data.train), spec.gate);
    pspec.collapse_gate = spec.collapse_gate;
    pspec.single_root = spec.single_root;
    if variant == Variant::Mtl {
        pspec.aux_task = Some(AuxTaskSpec {
            scheme: spec.mtl_scheme,
            vocab: tag_vocab(&data.train, spec.mtl_scheme)?,
            weight: spec.mtl_weight,
        });
    }

    let mut store = ParameterStore::new();
    let parser = Parser::new(&mut store, &pspec, cfg.key().derive("parser"))?;
    if let (Some(v), None) = (&data.vectors, schedule) {
        parser.encoders[0].load_word_vectors(&mut store, v)?;
    }
    install_aux(&mut store, &aux)?;
    if spec.freeze_pretrained {
        for a in &aux {
            store.set_trainable_prefix(&format!("{}/", a.scheme.name()), false);
        }
    }
    if spec.self_training() && spec.warm_start {
        let (_, bs, _) = base.as_ref().expect("base parser trained for warm start");
        store.copy_from(bs, &format!("{PARSER_ENCODER}/"), &format!("{PARSER_ENCODER}/"))?;
    }
    let groups = transferred_groups(PARSER_ENCODER);
    if let (Some(sched), Some((_, hs))) = (schedule, hier) {
        let n = store.copy_from(hs, "enc/", &format!("{PARSER_ENCODER}/"))?;
        log.note(format!("transferred {n} parameter tensors from the hierarchical tagger"));
        match sched {
            Schedule::Fe | Schedule::Fea | Schedule::Uf => {
                for g in &groups {
                    set_group_trainable(&mut store, g, false);
                }
            }
            Schedule::Dl => {
                let lrs = discriminative_lrs(cfg.lr, spec.lr_decay);
                for (k, g) in groups.iter().rev().enumerate() {
                    for p in g {
                        store.set_lr_scale_prefix(p, lrs[k] / cfg.lr);
                    }
                }
            }
            Schedule::Ft => {}
        }
    }
    extra_metrics.insert("parameters".to_string(), store.num_scalars() as f64);
    extra_metrics.insert("trainable_parameters".to_string(), store.num_trainable_scalars() as f64);

    // Inputs, with predicted tags where the variant asks for them.
    let dev_gold = if data.dev.is_empty() { &data.train } else { &data.dev };
    let train_inputs = prepare_all(&parser, &data.train)?;
    let mut dev_inputs = prepare_all(&parser, dev_gold)?;
    let mut test_inputs = prepare_all(&parser, &data.test)?;
    if variant == Variant::PredictedMi {
        let scheme = spec.mi_scheme;
        let tagged = tagged_sentences(&data.train, &derive_treebank_tags(&data.train, scheme)?);
        let dev_tagged = tagged_sentences(&data.dev, &derive_treebank_tags(&data.dev, scheme)?);
        let (tagger, ts, report) = train_tagger(&tagged, &dev_tagged, scheme, cfg)?;
        let predict = |tb: &Treebank| -> Result<Vec<Vec<String>>> {
            tb.sentences
                .iter()
                .map(|s| tagger.predict(&ts, &s.tokens.iter().map(|t| t.form.as_str()).collect::<Vec<_>>()))
                .collect()
        };
        override_tags(&parser, &mut dev_inputs, dev_gold, &predict(dev_gold)?)?;
        let test_tags = match &data.test_tags {
            Some(t) => {
                log.note("test tags read from an external file".to_string());
                t.iter().map(|s| s.labels.clone()).collect()
            }
            None => predict(&data.test)?,
        };
        override_tags(&parser, &mut test_inputs, &data.test, &test_tags)?;
        let gold: Vec<Vec<String>> = derive_treebank_tags(&data.test, scheme)?.into_iter().map(|s| s.labels).collect();
        let acc: TagMetrics = tag_metrics(&test_tags, &gold)?;
        log.note(format!("{scheme} tagger: best dev accuracy {:.4}, test accuracy {:.4}", report.best_score, acc.accuracy));
        extra_metrics.insert("mi_tagger_test_accuracy".to_string(), acc.accuracy);
        if let Some(dir) = out {
            tagger.save(&ts, dir.join(format!("tagger_{scheme}.ckpt")))?;
        }
    }

    let every = spec.unfreeze_every;
    let fit = fit_parser(&parser, &mut store, cfg, &train_inputs, &dev_inputs, dev_gold, punct, |epoch, s| {
        if schedule == Some(Schedule::Uf) {
            for (l, g) in groups.iter().enumerate() {
                if epoch == unfreeze_epoch(l, every) {
                    set_group_trainable(s, g, true);
                }
            }
        }
    })?;
    log.note(format!("parser: best dev LAS {:.2} at epoch {}", fit.best_score, fit.best_epoch));
    extra_metrics.insert("best_epoch".to_string(), fit.best_epoch as f64);

    let predictions = predict_all(&parser, &store, &test_inputs)?;
    let score = uas_las(&data.test, &predictions, punct)?;
    if let Some(acc) = aux_accuracy(&parser, &store, &test_inputs)? {
        extra_metrics.insert("aux_test_accuracy".to_string(), acc);
    }
    let config = spec.snapshot(cfg);
    let mut metrics = Metrics::new(variant.name(), &score, &config);
    metrics.extra = extra_metrics;
    let rep = report(
        &[NamedScore {
            name: variant.name().to_string(),
            score,
        }],
        None,
    )?;
    log.note(format!("test: {}", rep.text.lines().last().unwrap_or_default().trim()));

    let outcome = PipelineOutcome {
        parser,
        store,
        score,
        predictions,
        fit,
        metrics,
        base,
        aux,
        auto_parsed,
        log: log.lines,
    };
    if let Some(dir) = out {
        write_run_dir(dir, &config, data, &outcome)?;
    }
    Ok(outcome)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run_dir(dir: &Path, config: &serde_json::Value, data: &PipelineData, o: &PipelineOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), config)?;
    o.parser.save(&o.store, dir.join("parser.ckpt"))?;
    if let Some((p, s, _)) = &o.base {
        p.save(s, dir.join("base_parser.ckpt"))?;
    }
    if !o.aux.is_empty() {
        let tags = dir.join("tags");
        std::fs::create_dir_all(&tags).map_err(|e| Error::io(&tags, e))?;
        for a in &o.aux {
            a.tagger.save(&a.store, dir.join(format!("tagger_{}.ckpt", a.scheme)))?;
            let p = tags.join(format!("{}.tsv", a.scheme));
            std::fs::write(&p, write_tag_tsv(&a.data)).map_err(|e| Error::io(&p, e))?;
        }
    }
    if let Some(tb) = &o.auto_parsed {
        write_conllu_file(dir.join("extra.auto.conllu"), tb)?;
    }
    let pred = Treebank::new(
        data.test.name.clone(),
        data.test
            .sentences
            .iter()
            .zip(&o.predictions)
            .map(|(s, t)| t.apply_to(s))
            .collect(),
    );
    write_conllu_file(dir.join("test.pred.conllu"), &pred)?;
    write_json(&dir.join("metrics.json"), &o.metrics)?;
    let log = dir.join("log.txt");
    std::fs::write(&log, o.log.join("\n") + "\n").map_err(|e| Error::io(&log, e))
}

pub fn run_base(spec: &PipelineSpec, data: &PipelineData, cfg: &TrainConfig, out: Option<&Path>) -> Result<PipelineOutcome> {
    run_variant(Variant::Base, spec, data, cfg, out)
}

pub fn run_lcm(spec: &PipelineSpec, data: &PipelineData, cfg: &TrainConfig, out: Option<&Path>) -> Result<PipelineOutcome> {
    run_variant(Variant::Lcm, spec, data, cfg, out)
}

pub fn run_dcst(spec: &PipelineSpec, data: &PipelineData, cfg: &TrainConfig, out: Option<&Path>) -> Result<PipelineOutcome> {
    run_variant(Variant::Dcst, spec, data, cfg, out)
}

pub fn run_mtl(spec: &PipelineSpec, data: &PipelineData, cfg: &TrainConfig, out: Option<&Path>) -> Result<PipelineOutcome> {
    run_variant(Variant::Mtl, spec, data, cfg, out)
}

pub fn run_transeq(
    spec: &PipelineSpec,
    data: &PipelineData,
    cfg: &TrainConfig,
    schedule: Schedule,
    out: Option<&Path>,
) -> Result<PipelineOutcome> {
    let v = match schedule {
        Schedule::Fe => Variant::TranseqFe,
        Schedule::Fea => Variant::TranseqFea,
        Schedule::Uf => Variant::TranseqUf,
        Schedule::Dl => Variant::TranseqDl,
        Schedule::Ft => Variant::TranseqFt,
    };
    run_variant(v, spec, data, cfg, out)
}

/// Morphological tags as parser input; `predicted` swaps gold test tags
/// for tagger output.
pub fn run_mi(
    spec: &PipelineSpec,
    data: &PipelineData,
    cfg: &TrainConfig,
    predicted: bool,
    out: Option<&Path>,
) -> Result<PipelineOutcome> {
    let v = if predicted { Variant::PredictedMi } else { Variant::OracleMi };
    run_variant(v, spec, data, cfg, out)
}

fn run_variant(
    v: Variant,
    spec: &PipelineSpec,
    data: &PipelineData,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<PipelineOutcome> {
    let spec = PipelineSpec {
        variant: v,
        ..spec.clone()
    };
    run_pipeline(&spec, data, cfg, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: usize,
    pub score: AttachmentScore,
}

/// One full run per training-set size on prefixes of the training data.
/// Sub-runs go to `out/size_<n>`; the table goes to `out/size_ablation.{txt,json}`.
pub fn run_size_ablation(
    spec: &PipelineSpec,
    data: &PipelineData,
    cfg: &TrainConfig,
    sizes: &[usize],
    out: Option<&Path>,
) -> Result<Vec<SizeRow>> {
    if sizes.is_empty() {
        return Err(Error::Config("no training-set sizes given".into()));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n == 0 || n > data.train.len()) {
        return Err(Error::Config(format!(
            "training-set size {n} outside 1..={}",
            data.train.len()
        )));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let sub = PipelineData {
            train: data.train.prefix(size),
            ..data.clone()
        };
        let dir = out.map(|d| d.join(format!("size_{size}")));
        let o = run_pipeline(spec, &sub, cfg, dir.as_deref())?;
        rows.push(SizeRow { size, score: o.score });
    }
    if let Some(dir) = out {
        let named: Vec<NamedScore> = rows
            .iter()
            .map(|r| NamedScore {
                name: r.size.to_string(),
                score: r.score,
            })
            .collect();
        let rep = report(&named, None)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("size_ablation.txt");
        std::fs::write(&p, rep.text).map_err(|e| Error::io(&p, e))?;
        write_json(&dir.join("size_ablation.json"), &rows)?;
    }
    Ok(rows)
}

/// Model families covered by [`grad_check_model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckModel {
    /// Single-encoder biaffine parser.
    Biaff,
    /// Three gated encoders, one with adapters and a tag channel, plus an
    /// auxiliary tagging head.
    Gated,
    Tagger,
    /// Hierarchical morphological tagger.
    Hier,
}

impl FromStr for CheckModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "biaff" => Ok(CheckModel::Biaff),
            "gated" => Ok(CheckModel::Gated),
            "tagger" => Ok(CheckModel::Tagger),
            "hier" => Ok(CheckModel::Hier),
            _ => Err(Error::Config(format!("unknown model {s:?} (biaff|gated|tagger|hier)"))),
        }
    }
}

/// Finite-difference check of a full training loss at the sizes of `cfg`'s
/// profile, on one synthetic sentence. Parameters are first redrawn from
/// U(−0.5, 0.5) so zero-initialised weights are exercised too.
pub fn grad_check_model(
    model: CheckModel,
    cfg: &TrainConfig,
    max_coords: usize,
) -> Result<crate::autodiff::GradCheckReport> {
    use crate::conllu::{gen_synthetic, Grammar};
    use crate::nn::Mode;
    use crate::tagger::{HierMorphSpec, TaggerSpec, HIER_TASKS};
    use rand::Rng;

    let key = cfg.key().derive("grad-check");
    let tb = gen_synthetic(cfg.seed, 1, &Grammar::default())?;
    let sentence = &tb.sentences[0];
    let forms: Vec<&str> = sentence.tokens.iter().map(|t| t.form.as_str()).collect();
    let config = EncoderSpec::from_forms(PARSER_ENCODER, cfg.encoder_config(), forms.iter().copied());
    let mut store = ParameterStore::new();
    let randomize = |store: &mut ParameterStore| {
        let mut rng = key.stream_for("values");
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            // Scaled by fan-in so wide LSTM gates stay out of saturation.
            let t = store.value_mut(id);
            let amp = if t.shape().len() == 2 { (3.0 / t.cols() as f64).sqrt().min(0.5) } else { 0.5 };
            for v in t.data_mut() {
                *v = rng.gen_range(-amp..amp);
            }
        }
    };
    let eps = 1e-5;
    let mode = Mode::eval();
    match model {
        CheckModel::Biaff | CheckModel::Gated => {
            let mut spec = ParserSpec::new(vec![config.clone()], relations(&tb));
            if model == CheckModel::Gated {
                let mut adapted = config.renamed("aux1");
                adapted.adapters = vec![0];
                adapted.adapter_dim = adapted.config.output_dim() / 2;
                let mut tagged = config.renamed("aux2");
                tagged.tag_input = Some(TagInput {
                    scheme: TagScheme::MT,
                    vocab: tag_vocab(&tb, TagScheme::MT)?,
                    dim: 4,
                });
                spec.encoders.extend([adapted, tagged]);
                spec.aux_task = Some(AuxTaskSpec {
                    scheme: TagScheme::CT,
                    vocab: tag_vocab(&tb, TagScheme::CT)?,
                    weight: 1.0,
                });
            }
            let parser = Parser::new(&mut store, &spec, key)?;
            randomize(&mut store);
            let input = parser.prepare(sentence)?;
            crate::autodiff::grad_check(&mut store, |g| parser.loss(g, &input, &mode), eps, max_coords, cfg.seed)
        }
        CheckModel::Tagger => {
            let data = tagged_sentences(&tb, &derive_treebank_tags(&tb, TagScheme::CT)?);
            let spec = TaggerSpec {
                encoder: config,
                scheme: TagScheme::CT,
                tags: tag_vocab(&tb, TagScheme::CT)?,
                dropout: cfg.dropout,
            };
            let tagger = Tagger::new(&mut store, &spec, key)?;
            randomize(&mut store);
            let input = tagger.prepare(&data[0])?;
            crate::autodiff::grad_check(&mut store, |g| tagger.loss(g, &input, &mode), eps, max_coords, cfg.seed)
        }
        CheckModel::Hier => {
            let mut encoder = config;
            encoder.config.lstm_layers = HIER_TASKS.len();
            let tags = HIER_TASKS.iter().map(|&t| tag_vocab(&tb, t)).collect::<Result<Vec<_>>>()?;
            let labels = HIER_TASKS
                .iter()
                .map(|&t| Ok(derive_treebank_tags(&tb, t)?.remove(0).labels))
                .collect::<Result<Vec<_>>>()?;
            let spec = HierMorphSpec {
                encoder,
                tags,
                dropout: cfg.dropout,
            };
            let m = HierMorphTagger::new(&mut store, &spec, key)?;
            randomize(&mut store);
            let input = m.prepare(&forms, &labels)?;
            crate::autodiff::grad_check(&mut store, |g| m.loss(g, &input, &mode), eps, max_coords, cfg.seed)
        }
    }
}
