use super::{Init, Mode};
use crate::autodiff::{ParamId, Var};
use crate::error::{Error, Result};
use crate::Graph;

/// `x·W + b` over the rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let w = init.xavier(&format!("{name}/w"), in_dim, out_dim)?;
        let b = if bias {
            Some(init.zeros(&format!("{name}/b"), 1, out_dim)?)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Linear layer followed by ReLU and dropout.
#[derive(Clone, Debug)]
pub struct Dense {
    pub linear: Linear,
    name: String,
    dropout: f64,
}

impl Dense {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, dropout: f64) -> Result<Self> {
        Ok(Dense {
            linear: Linear::new(init, name, in_dim, out_dim, true)?,
            name: name.to_string(),
            dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mode: &Mode) -> Result<Var> {
        let y = self.linear.forward(g, x)?;
        let y = g.relu(y);
        mode.dropout(g, y, self.dropout, &self.name)
    }
}

/// Arc scorer: `score(dep, head) = depᵀ U head + u_headᵀ head + bias`.
#[derive(Clone, Debug)]
pub struct Biaffine {
    pub u: ParamId,
    pub u_head: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl Biaffine {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(Biaffine {
            u: init.zeros(&format!("{name}/u"), dim, dim)?,
            u_head: init.zeros(&format!("{name}/u_head"), dim, 1)?,
            bias: init.zeros(&format!("{name}/bias"), 1, 1)?,
            dim,
        })
    }

    /// All-pairs scores with heads on rows and dependents on columns:
    /// `S[j][i] = score(dep = deps[i], head = heads[j])`.
    pub fn scores(&self, g: &mut Graph<'_>, deps: Var, heads: Var) -> Result<Var> {
        let (u, u_head, bias) = (g.param(self.u), g.param(self.u_head), g.param(self.bias));
        let ut = g.transpose(u);
        let hu = g.matmul(heads, ut)?;
        let dt = g.transpose(deps);
        let s = g.matmul(hu, dt)?;
        let prior = g.matmul(heads, u_head)?;
        let s = g.add(s, prior)?;
        g.add(s, bias)
    }
}

/// Per-relation biaffine label scorer over aligned dependent/head rows:
/// `logit_r(d, h) = dᵀ U_r h + w_rᵀ [d; h] + b_r`.
#[derive(Clone, Debug)]
pub struct LabelBiaffine {
    pub u: ParamId,
    pub w: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub n_labels: usize,
}

impl LabelBiaffine {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, n_labels: usize) -> Result<Self> {
        if n_labels == 0 {
            return Err(Error::Config("label scorer needs at least one relation".into()));
        }
        Ok(LabelBiaffine {
            u: init.zeros(&format!("{name}/u"), dim, n_labels * dim)?,
            w: init.zeros(&format!("{name}/w"), 2 * dim, n_labels)?,
            bias: init.zeros(&format!("{name}/bias"), 1, n_labels)?,
            dim,
            n_labels,
        })
    }

    /// `deps` and `heads` are `[n×dim]` with row `i` of `heads` the head of
    /// dependent `i`; returns `[n×R]` logits.
    pub fn logits(&self, g: &mut Graph<'_>, deps: Var, heads: Var) -> Result<Var> {
        let (u, w, bias) = (g.param(self.u), g.param(self.w), g.param(self.bias));
        let du = g.matmul(deps, u)?;
        let tiled = g.concat_cols(&vec![heads; self.n_labels])?;
        let prod = g.mul(du, tiled)?;
        let bil = g.sum_col_groups(prod, self.dim)?;
        let both = g.concat_cols(&[deps, heads])?;
        let lin = g.matmul(both, w)?;
        let s = g.add(bil, lin)?;
        g.add(s, bias)
    }
}

/// Widths of the two hidden layers of every tagging head.
pub const TAG_FC: (usize, usize) = (128, 64);

/// Per-token classifier: two ReLU layers then a linear output.
#[derive(Clone, Debug)]
pub struct TagHead {
    pub fc1: Dense,
    pub fc2: Dense,
    pub out: Linear,
}

impl TagHead {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, n_tags: usize, dropout: f64) -> Result<Self> {
        if n_tags == 0 {
            return Err(Error::Config(format!("{name}: empty tag vocabulary")));
        }
        Ok(TagHead {
            fc1: Dense::new(init, &format!("{name}/fc1"), in_dim, TAG_FC.0, dropout)?,
            fc2: Dense::new(init, &format!("{name}/fc2"), TAG_FC.0, TAG_FC.1, dropout)?,
            out: Linear::new(init, &format!("{name}/out"), TAG_FC.1, n_tags, true)?,
        })
    }

    pub fn n_tags(&self) -> usize {
        self.out.out_dim
    }

    pub fn logits(&self, g: &mut Graph<'_>, x: Var, mode: &Mode) -> Result<Var> {
        let h = self.fc1.forward(g, x, mode)?;
        let h = self.fc2.forward(g, h, mode)?;
        self.out.forward(g, h)
    }
}
