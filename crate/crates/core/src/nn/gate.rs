use serde::{Deserialize, Serialize};

use super::{Init, Linear};
use crate::autodiff::{Axis, Var};
use crate::error::{Error, Result};
use crate::{Graph, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateVariant {
    /// Per-token scalar score per encoder, normalised across encoders.
    #[default]
    Softmax,
    /// Two encoders mixed per dimension: `z⊙a + (1−z)⊙b`.
    ElementwiseSigmoid,
}

/// Fuses K encoder outputs into one representation per token.
#[derive(Clone, Debug)]
pub struct GateCombiner {
    pub variant: GateVariant,
    pub width: usize,
    scorers: Vec<Linear>,
    mixer: Option<Linear>,
    projections: Vec<Option<Linear>>,
    collapse: bool,
}

impl GateCombiner {
    /// `widths[k]` is the output width of encoder k; encoders wider or
    /// narrower than encoder 0 get a learned projection to its width.
    pub fn new(init: &mut Init<'_>, name: &str, widths: &[usize], variant: GateVariant) -> Result<Self> {
        let k = widths.len();
        if k == 0 {
            return Err(Error::Config("gate needs at least one encoder".into()));
        }
        if variant == GateVariant::ElementwiseSigmoid && k != 2 {
            return Err(Error::Config(format!("elementwise-sigmoid gate combines exactly 2 encoders, got {k}")));
        }
        let width = widths[0];
        let mut projections = Vec::with_capacity(k);
        for (i, &w) in widths.iter().enumerate() {
            projections.push(if w != width {
                Some(Linear::new(init, &format!("{name}/proj{i}"), w, width, false)?)
            } else {
                None
            });
        }
        let mut scorers = Vec::new();
        let mut mixer = None;
        if k > 1 {
            match variant {
                GateVariant::Softmax => {
                    for i in 0..k {
                        scorers.push(Linear::new(init, &format!("{name}/score{i}"), width, 1, true)?);
                    }
                }
                GateVariant::ElementwiseSigmoid => {
                    mixer = Some(Linear::new(init, &format!("{name}/mix"), 2 * width, width, true)?);
                }
            }
        }
        Ok(GateCombiner {
            variant,
            width,
            scorers,
            mixer,
            projections,
            collapse: false,
        })
    }

    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    /// Diagnostic: force every encoder but the first to gate score −∞.
    pub fn set_collapse(&mut self, on: bool) {
        self.collapse = on;
    }

    pub fn collapsed(&self) -> bool {
        self.collapse
    }

    fn project(&self, g: &mut Graph<'_>, reps: &[Var]) -> Result<Vec<Var>> {
        if reps.len() != self.len() {
            return Err(Error::shape("gate_combine", format!("{} inputs for {} encoders", reps.len(), self.len())));
        }
        reps.iter()
            .zip(&self.projections)
            .map(|(&r, p)| match p {
                Some(lin) => lin.forward(g, r),
                None => Ok(r),
            })
            .collect()
    }

    /// Per-token softmax weights `[rows × K]` (softmax variant only).
    pub fn weights(&self, g: &mut Graph<'_>, reps: &[Var]) -> Result<Var> {
        let reps = self.project(g, reps)?;
        self.alphas(g, &reps)
    }

    fn alphas(&self, g: &mut Graph<'_>, reps: &[Var]) -> Result<Var> {
        if self.variant != GateVariant::Softmax {
            return Err(Error::Contract("per-encoder weights exist only for the softmax gate".into()));
        }
        if reps.len() == 1 {
            let rows = g.value(reps[0]).rows();
            return Ok(g.constant(Tensor::full(&[rows, 1], 1.0)));
        }
        let scores = reps
            .iter()
            .zip(&self.scorers)
            .map(|(&r, s)| s.forward(g, r))
            .collect::<Result<Vec<_>>>()?;
        let mut s = g.concat_cols(&scores)?;
        if self.collapse {
            let mut mask = vec![f64::NEG_INFINITY; reps.len()];
            mask[0] = 0.0;
            let m = g.constant(Tensor::matrix(1, reps.len(), mask)?);
            s = g.add(s, m)?;
        }
        Ok(g.softmax(s, Axis::Cols))
    }

    pub fn combine(&self, g: &mut Graph<'_>, reps: &[Var]) -> Result<Var> {
        let reps = self.project(g, reps)?;
        let rows = g.value(reps[0]).dims();
        for &r in &reps[1..] {
            if g.value(r).dims() != rows {
                return Err(Error::shape(
                    "gate_combine",
                    format!("{:?} vs {:?}", g.value(reps[0]).shape(), g.value(r).shape()),
                ));
            }
        }
        if reps.len() == 1 {
            return Ok(reps[0]);
        }
        match self.variant {
            GateVariant::Softmax => {
                let alpha = self.alphas(g, &reps)?;
                let mut out = None;
                for (k, &r) in reps.iter().enumerate() {
                    let a = g.slice_cols(alpha, k, k + 1)?;
                    let term = g.mul(r, a)?;
                    out = Some(match out {
                        None => term,
                        Some(acc) => g.add(acc, term)?,
                    });
                }
                Ok(out.expect("K ≥ 2"))
            }
            GateVariant::ElementwiseSigmoid => {
                let mixer = self.mixer.as_ref().expect("mixer for sigmoid gate");
                let both = g.concat_cols(&reps)?;
                let z = mixer.forward(g, both)?;
                let z = if self.collapse {
                    g.constant(Tensor::full(g.value(z).shape(), 1.0))
                } else {
                    g.sigmoid(z)
                };
                let one_minus = g.affine_const(z, -1.0, 1.0);
                let a = g.mul(reps[0], z)?;
                let b = g.mul(reps[1], one_minus)?;
                g.add(a, b)
            }
        }
    }
}
