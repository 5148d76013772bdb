//! Layering of defaults, the `--config` file and explicit flags.
//!
//! The config file has the shape of a run's `config.json`:
//! `{"train": {...}, "pipeline": {...}}`, both parts optional. Values are
//! applied over the profile defaults; explicit flags are applied last.

use std::path::{Path, PathBuf};

use clap::Args;
use lcm_core::eval::PunctPolicy;
use lcm_core::nn::GateVariant;
use lcm_core::pipelines::{Family, PipelineSpec, Variant};
use lcm_core::tagschemes::TagScheme;
use lcm_core::train::{Profile, TrainConfig};
use lcm_core::{Error, Result};
use serde_json::{Map, Value};

#[derive(Debug, Default)]
pub struct ConfigFile {
    train: Map<String, Value>,
    pipeline: Map<String, Value>,
}

pub fn load(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?;
    let Value::Object(mut top) = v else {
        return Err(Error::Config(format!("--config {}: expected a JSON object", path.display())));
    };
    let mut part = |key: &str| -> Result<Map<String, Value>> {
        match top.remove(key) {
            None | Some(Value::Null) => Ok(Map::new()),
            Some(Value::Object(m)) => Ok(m),
            Some(_) => Err(Error::Config(format!("--config {}: \"{key}\" must be an object", path.display()))),
        }
    };
    let file = ConfigFile {
        train: part("train")?,
        pipeline: part("pipeline")?,
    };
    if let Some(k) = top.keys().next() {
        return Err(Error::Config(format!("--config {}: unknown section {k:?} (train|pipeline)", path.display())));
    }
    Ok(file)
}

/// Training flags shared by every command that trains.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// Size profile (default: desk).
    #[arg(long)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

fn set(m: &mut Map<String, Value>, key: &str, v: Option<impl serde::Serialize>) {
    if let Some(v) = v {
        m.insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
    }
}

pub fn train_config(file: &ConfigFile, flags: &TrainFlags, seed: Option<u64>) -> Result<TrainConfig> {
    let profile = match (flags.profile, file.train.get("profile")) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("train.profile: {e}")))?,
        (None, None) => Profile::Desk,
    };
    let Value::Object(mut m) = serde_json::to_value(TrainConfig::for_profile(profile))? else {
        unreachable!("TrainConfig serializes to an object");
    };
    for (k, v) in &file.train {
        m.insert(k.clone(), v.clone());
    }
    set(&mut m, "profile", Some(profile));
    set(&mut m, "epochs", flags.epochs);
    set(&mut m, "batch_size", flags.batch_size);
    set(&mut m, "lr", flags.lr);
    set(&mut m, "dropout", flags.dropout);
    set(&mut m, "seed", seed);
    let cfg: TrainConfig = serde_json::from_value(Value::Object(m)).map_err(|e| Error::Config(format!("train config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args, Debug, Default)]
pub struct PipelineFlags {
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Parser being augmented: biaff or dcst.
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long, value_name = "FILE")]
    pub train: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub dev: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub test: Option<PathBuf>,
    /// Extra sentences for LCM (with morphology) or self-training (raw).
    #[arg(long, value_name = "FILE")]
    pub extra: Option<PathBuf>,
    /// Use only the first N extra sentences.
    #[arg(long, value_name = "N")]
    pub extra_size: Option<usize>,
    /// Hierarchical morphological tagger checkpoint (TranSeq variants).
    #[arg(long, value_name = "FILE")]
    pub hier_tagger: Option<PathBuf>,
    /// Predicted morphological tags for the test set (TSV).
    #[arg(long, value_name = "FILE")]
    pub test_tags: Option<PathBuf>,
    /// Pretrained word vectors (text format).
    #[arg(long, value_name = "FILE")]
    pub vectors: Option<PathBuf>,
    /// Comma-separated auxiliary schemes to gate, e.g. MT,CT,LT.
    #[arg(long, value_delimiter = ',')]
    pub schemes: Option<Vec<TagScheme>>,
    #[arg(long)]
    pub gate: Option<GateKind>,
    /// Diagnostic: send every auxiliary gate score to −∞.
    #[arg(long)]
    pub collapse_gate: bool,
    /// Keep pretrained tagger encoders fixed during integration.
    #[arg(long)]
    pub freeze_pretrained: bool,
    /// Start the self-training ensemble's encoder from the base parser.
    #[arg(long)]
    pub warm_start: bool,
    /// Weight of the auxiliary tagging loss (mtl).
    #[arg(long)]
    pub mtl_weight: Option<f64>,
    /// Epochs between unfreezing steps (transeq_uf).
    #[arg(long)]
    pub unfreeze_every: Option<usize>,
    /// Per-layer learning-rate divisor (transeq_dl).
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub punct: Option<PunctPolicy>,
}

/// Gate variants by their command-line names.
#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum GateKind {
    Softmax,
    ElementwiseSigmoid,
}

pub fn pipeline_spec(file: &ConfigFile, f: &PipelineFlags) -> Result<PipelineSpec> {
    let mut m = file.pipeline.clone();
    set(&mut m, "variant", f.variant);
    set(&mut m, "family", f.family);
    set(&mut m, "train", f.train.as_ref());
    set(&mut m, "dev", f.dev.as_ref());
    set(&mut m, "test", f.test.as_ref());
    set(&mut m, "extra", f.extra.as_ref());
    set(&mut m, "extra_size", f.extra_size);
    set(&mut m, "hier_tagger", f.hier_tagger.as_ref());
    set(&mut m, "test_tags", f.test_tags.as_ref());
    set(&mut m, "vectors", f.vectors.as_ref());
    set(&mut m, "schemes", f.schemes.as_ref());
    set(
        &mut m,
        "gate",
        f.gate.map(|g| match g {
            GateKind::Softmax => GateVariant::Softmax,
            GateKind::ElementwiseSigmoid => GateVariant::ElementwiseSigmoid,
        }),
    );
    set(&mut m, "collapse_gate", f.collapse_gate.then_some(true));
    set(&mut m, "freeze_pretrained", f.freeze_pretrained.then_some(true));
    set(&mut m, "warm_start", f.warm_start.then_some(true));
    set(&mut m, "mtl_weight", f.mtl_weight);
    set(&mut m, "unfreeze_every", f.unfreeze_every);
    set(&mut m, "lr_decay", f.lr_decay);
    set(&mut m, "punct", f.punct);
    let spec: PipelineSpec = serde_json::from_value(Value::Object(m)).map_err(|e| Error::Config(format!("pipeline config: {e}")))?;
    spec.validate()?;
    Ok(spec)
}
