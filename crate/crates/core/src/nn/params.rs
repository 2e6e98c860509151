use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{Neighborhood, EDGE_FEATURES, MEASUREMENT_NODES, WINDOW_STEPS};
use crate::rng;

/// Per-node temporal statistics fed to the spatial baselines: mean, std, min, max.
pub const SUMMARY_STATS: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Rgtn,
    Mlp,
    Gcn,
    Gat,
    Gtn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Rgtn,
        ModelKind::Mlp,
        ModelKind::Gcn,
        ModelKind::Gat,
        ModelKind::Gtn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rgtn => "rgtn",
            ModelKind::Mlp => "mlp",
            ModelKind::Gcn => "gcn",
            ModelKind::Gat => "gat",
            ModelKind::Gtn => "gtn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model kind {s:?}")))
    }
}

/// Hyperparameters that fix every tensor shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub kind: ModelKind,
    pub nodes: usize,
    pub steps: usize,
    pub features: usize,
    /// GRU hidden size H.
    pub hidden: usize,
    /// Attention heads C.
    pub heads: usize,
    /// Per-head width d.
    pub head_dim: usize,
    pub classes: usize,
    pub dropout: f64,
    pub neighborhood: Neighborhood,
    /// Width of the MLP baseline's hidden layers.
    pub mlp_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            kind: ModelKind::Rgtn,
            nodes: MEASUREMENT_NODES,
            steps: WINDOW_STEPS,
            features: 1,
            hidden: 16,
            heads: 4,
            head_dim: 16,
            classes: 10,
            dropout: 0.1,
            neighborhood: Neighborhood::Global,
            mlp_hidden: 64,
        }
    }
}

impl Architecture {
    pub fn for_kind(kind: ModelKind) -> Self {
        Architecture {
            kind,
            ..Default::default()
        }
    }

    /// Width of a graph layer's output, C·d.
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.nodes,
            self.steps,
            self.features,
            self.hidden,
            self.heads,
            self.head_dim,
            self.classes,
            self.mlp_hidden,
        ];
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("architecture has a zero size: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidDropout(self.dropout));
        }
        Ok(())
    }

    /// Name, shape and Glorot fans `(fan_in, fan_out)` of every tensor, in
    /// storage order. Biases have fans `(0, 0)` and start at zero.
    pub fn layout(&self) -> Vec<TensorSpec> {
        let (h, f, w, d) = (self.hidden, self.features, self.width(), self.head_dim);
        let mut out = Vec::new();
        let weight = |out: &mut Vec<TensorSpec>, name: &str, rows: usize, cols: usize, fans: (usize, usize)| {
            out.push(TensorSpec {
                name: name.to_string(),
                shape: vec![rows, cols],
                fans,
            })
        };
        let bias = |out: &mut Vec<TensorSpec>, name: &str, len: usize| {
            out.push(TensorSpec {
                name: name.to_string(),
                shape: vec![len],
                fans: (0, 0),
            })
        };
        let gtn = |out: &mut Vec<TensorSpec>, prefix: &str, input: usize, edges: bool| {
            for m in ["q", "k", "v"] {
                weight(out, &format!("{prefix}.w_{m}"), input, w, (input, d));
                bias(out, &format!("{prefix}.b_{m}"), w);
            }
            if edges {
                weight(out, &format!("{prefix}.w_e"), EDGE_FEATURES, w, (EDGE_FEATURES, d));
                bias(out, &format!("{prefix}.b_e"), w);
            }
        };
        let pooled = match self.kind {
            ModelKind::Rgtn => {
                for g in ["r", "z", "h"] {
                    weight(&mut out, &format!("gru.w_{g}"), h + f, h, (h + f, h));
                    bias(&mut out, &format!("gru.b_{g}"), h);
                }
                gtn(&mut out, "gtn1", h, true);
                gtn(&mut out, "gtn2", w, true);
                w
            }
            ModelKind::Gtn | ModelKind::Gat => {
                let edges = self.kind == ModelKind::Gtn;
                gtn(&mut out, "gtn1", SUMMARY_STATS * f, edges);
                gtn(&mut out, "gtn2", w, edges);
                w
            }
            ModelKind::Gcn => {
                weight(&mut out, "gcn1.w", SUMMARY_STATS * f, w, (SUMMARY_STATS * f, w));
                weight(&mut out, "gcn2.w", w, w, (w, w));
                w
            }
            ModelKind::Mlp => {
                let input = self.steps * self.nodes * f;
                let m = self.mlp_hidden;
                weight(&mut out, "mlp1.w", input, m, (input, m));
                bias(&mut out, "mlp1.b", m);
                weight(&mut out, "mlp2.w", m, m, (m, m));
                bias(&mut out, "mlp2.b", m);
                m
            }
        };
        weight(&mut out, "head.w", pooled, self.classes, (pooled, self.classes));
        bias(&mut out, "head.b", self.classes);
        out
    }
}

/// Name, shape and initialization fans of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fans: (usize, usize),
}

/// Every trainable tensor of one model, in [`Architecture::layout`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub architecture: Architecture,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl ModelParameters {
    /// Glorot-uniform weights, `U(±√(6 / (fan_in + fan_out)))`, zero biases.
    /// Attention projections use the fans of a single head's matrix.
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut r = rng::stream(seed, "init");
        let tensors = architecture
            .layout()
            .into_iter()
            .map(|spec| {
                let (fan_in, fan_out) = spec.fans;
                let tensor = if fan_in + fan_out == 0 {
                    Tensor::zeros(&spec.shape)
                } else {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| r.random_range(-limit..limit))
                };
                NamedTensor { name: spec.name, tensor }
            })
            .collect();
        Ok(ModelParameters { architecture, tensors })
    }

    /// Checks names and shapes against the architecture.
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        let layout = self.architecture.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (spec, t) in layout.iter().zip(&self.tensors) {
            let (name, shape) = (&spec.name, &spec.shape);
            if *name != t.name || shape.as_slice() != t.tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor {:?} {:?} does not match expected {name:?} {shape:?}",
                    t.name,
                    t.tensor.shape()
                )));
            }
            if !t.tensor.all_finite() {
                return Err(Error::Format(format!("tensor {name:?} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.tensor)
    }

    /// Records every tensor on `tape`, as parameters when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<BoundModel<'t>> {
        self.validate()?;
        let vars: Vec<Var<'t>> = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.tensor.clone())
                } else {
                    tape.constant(t.tensor.clone())
                }
            })
            .collect();
        BoundModel::from_vars(&self.architecture, vars)
    }
}

/// GRU weights in row-vector form: gates read `[h_{t-1}, x_t]·W + b` with
/// `W` of shape `[(H + F) × H]`.
#[derive(Clone, Copy, Debug)]
pub struct GruParams<'t> {
    pub w_r: Var<'t>,
    pub w_z: Var<'t>,
    pub w_h: Var<'t>,
    pub b_r: Var<'t>,
    pub b_z: Var<'t>,
    pub b_h: Var<'t>,
}

/// One graph-transformer layer. Projections are `[H_in × C·d]` with head `c`
/// in columns `c·d..(c+1)·d`; the edge encoder is absent for plain attention.
#[derive(Clone, Copy, Debug)]
pub struct GtnLayerParams<'t> {
    pub w_q: Var<'t>,
    pub b_q: Var<'t>,
    pub w_k: Var<'t>,
    pub b_k: Var<'t>,
    pub w_v: Var<'t>,
    pub b_v: Var<'t>,
    pub edge: Option<(Var<'t>, Var<'t>)>,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

/// A model's parameters recorded on a tape, grouped by layer.
#[derive(Clone, Debug)]
pub struct BoundModel<'t> {
    pub architecture: Architecture,
    /// All vars in storage order, for gradient lookup.
    pub vars: Vec<Var<'t>>,
    pub gru: Option<GruParams<'t>>,
    pub gtn: Vec<GtnLayerParams<'t>>,
    pub gcn: Vec<Var<'t>>,
    pub mlp: Vec<LinearParams<'t>>,
    pub head: LinearParams<'t>,
}

impl<'t> BoundModel<'t> {
    /// Groups vars laid out as in [`Architecture::layout`] into layers.
    pub fn from_vars(arch: &Architecture, vars: Vec<Var<'t>>) -> Result<Self> {
        let mut it = vars.iter().copied();
        let mut next = || it.next().ok_or_else(|| Error::Format("too few tensors".into()));
        let gtn_layer = |edges: bool, next: &mut dyn FnMut() -> Result<Var<'t>>| -> Result<GtnLayerParams<'t>> {
            Ok(GtnLayerParams {
                w_q: next()?,
                b_q: next()?,
                w_k: next()?,
                b_k: next()?,
                w_v: next()?,
                b_v: next()?,
                edge: if edges { Some((next()?, next()?)) } else { None },
                heads: arch.heads,
            })
        };
        let mut gru = None;
        let mut gtn = Vec::new();
        let mut gcn = Vec::new();
        let mut mlp = Vec::new();
        match arch.kind {
            ModelKind::Rgtn => {
                let (w_r, b_r, w_z, b_z, w_h, b_h) = (next()?, next()?, next()?, next()?, next()?, next()?);
                gru = Some(GruParams {
                    w_r,
                    w_z,
                    w_h,
                    b_r,
                    b_z,
                    b_h,
                });
                gtn.push(gtn_layer(true, &mut next)?);
                gtn.push(gtn_layer(true, &mut next)?);
            }
            ModelKind::Gtn | ModelKind::Gat => {
                let edges = arch.kind == ModelKind::Gtn;
                gtn.push(gtn_layer(edges, &mut next)?);
                gtn.push(gtn_layer(edges, &mut next)?);
            }
            ModelKind::Gcn => {
                gcn.push(next()?);
                gcn.push(next()?);
            }
            ModelKind::Mlp => {
                for _ in 0..2 {
                    let (w, b) = (next()?, next()?);
                    mlp.push(LinearParams { w, b });
                }
            }
        }
        let head = LinearParams {
            w: next()?,
            b: next()?,
        };
        if next().is_ok() {
            return Err(Error::Format("too many tensors".into()));
        }
        Ok(BoundModel {
            architecture: arch.clone(),
            vars,
            gru,
            gtn,
            gcn,
            mlp,
            head,
        })
    }
}
