//! Neural building blocks: embeddings, char-CNN, stacked BiLSTM encoders,
//! dense layers, biaffine scorers, the encoder gate and adapters.
//!
//! Every layer owns [`ParamId`]s into a shared [`ParameterStore`]; the store
//! itself is passed separately so training can borrow it mutably while the
//! architecture stays immutable.

mod encoder;
mod gate;
mod layers;
mod vectors;


pub use encoder::{Adapter, BiLstm, CharCnn, Encoder, EncoderConfig, EncoderInput, EncoderSpec, TagInput};
pub use gate::{GateCombiner, GateVariant};
pub use layers::{Biaffine, Dense, LabelBiaffine, Linear, TagHead, TAG_FC};
pub use vectors::{read_word_vectors, WordVectors};

use rand::Rng;

use crate::autodiff::{ParamId, Var};
use crate::error::{Error, Result};
use crate::rng::SeedKey;
use crate::{Graph, ParameterStore, Real, Tensor};

/// Train or eval behaviour for one forward pass.
///
/// Dropout masks are drawn from a stream keyed by the call site name, so a
/// component's noise does not depend on which other components ran first.
#[derive(Clone, Copy, Debug)]
pub struct Mode {
    training: bool,
    key: SeedKey,
}

impl Mode {
    pub fn eval() -> Self {
        Mode {
            training: false,
            key: SeedKey::new(0),
        }
    }

    pub fn train(key: SeedKey) -> Self {
        Mode { training: true, key }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn dropout(&self, g: &mut Graph<'_>, x: Var, p: f64, site: &str) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = self.key.stream_for(site);
        g.dropout(x, p, true, &mut rng)
    }
}

/// Registers freshly initialised parameters.
///
/// Each parameter's initial values come from a stream keyed by its full
/// name, so two models that share a parameter name start from the same
/// values regardless of what else they contain.
pub struct Init<'a> {
    store: &'a mut ParameterStore,
    key: SeedKey,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParameterStore, key: SeedKey) -> Self {
        Init { store, key }
    }

    pub fn store(&mut self) -> &mut ParameterStore {
        self.store
    }

    fn fill(&mut self, name: &str, rows: usize, cols: usize, a: Real) -> Result<ParamId> {
        let mut rng = self.key.stream_for(&format!("init/{name}"));
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
        self.store.add(name, Tensor::matrix(rows, cols, data)?)
    }

    /// Xavier/Glorot uniform.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as Real).sqrt();
        self.fill(name, rows, cols, a)
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, a: Real) -> Result<ParamId> {
        self.fill(name, rows, cols, a)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(&[rows, cols]))
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        self.store.add(name, t)
    }
}
