//! Heteroscedastic Gaussian likelihood with masked mean and log-variance
//! networks.
//!
//! Node `j` is modelled as `x_j = m_j(a^M_j * x) + v_j(a^V_j * x) * e` with
//! standard Gaussian `e`, where `a^M_j`, `a^V_j` are the `j`-th adjacency
//! columns and `v_j = exp(s_j)` for a network output `s_j`. The per-term
//! constant `ln(2 pi) / 2` is dropped throughout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{AdjMatrix, DagPair};
use crate::ingest::Dataset;
use crate::mlp::{MlpParams, Workspace};

#[derive(Clone, Debug, PartialEq)]
pub struct HnmParams {
    d: usize,
    mean: Vec<MlpParams>,
    logv: Vec<MlpParams>,
}

impl HnmParams {
    /// One mean and one log-variance network per node, each with `hidden`
    /// leaky-ReLU layers between the `d` inputs and the scalar output.
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter("d must be at least 1".into()));
        }
        let dims = layer_dims(d, hidden);
        let mut mean = Vec::with_capacity(d);
        let mut logv = Vec::with_capacity(d);
        for _ in 0..d {
            mean.push(MlpParams::init_uniform(&dims, rng)?);
        }
        for _ in 0..d {
            logv.push(MlpParams::init_uniform(&dims, rng)?);
        }
        Ok(Self { d, mean, logv })
    }

    pub fn from_networks(mean: Vec<MlpParams>, logv: Vec<MlpParams>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || logv.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: logv.len(),
            });
        }
        for net in mean.iter().chain(&logv) {
            if net.input_dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: net.input_dim(),
                });
            }
            if net.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameter".into()));
            }
        }
        Ok(Self { d, mean, logv })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn mean_net(&self, j: usize) -> &MlpParams {
        &self.mean[j]
    }

    pub fn logv_net(&self, j: usize) -> &MlpParams {
        &self.logv[j]
    }

    pub fn mean_nets(&self) -> &[MlpParams] {
        &self.mean
    }

    pub fn logv_nets(&self) -> &[MlpParams] {
        &self.logv
    }

    pub fn mean_nets_mut(&mut self) -> &mut [MlpParams] {
        &mut self.mean
    }

    pub fn logv_nets_mut(&mut self) -> &mut [MlpParams] {
        &mut self.logv
    }

    pub fn mean_sq_norm(&self) -> f64 {
        self.mean.iter().map(MlpParams::sq_norm).sum()
    }

    pub fn logv_sq_norm(&self) -> f64 {
        self.logv.iter().map(MlpParams::sq_norm).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.mean
            .iter()
            .chain(&self.logv)
            .all(|n| n.as_slice().iter().all(|v| v.is_finite()))
    }
}

pub fn layer_dims(d: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(d);
    dims.extend_from_slice(hidden);
    dims.push(1);
    dims
}

/// Writes `x * a[., j]` (the Hadamard-masked input of node `j`) into `out`.
pub fn masked_input(x: &[f64], a: &AdjMatrix, j: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend(
        x.iter()
            .enumerate()
            .map(|(k, &v)| if a.has_edge(k, j) { v } else { 0.0 }),
    );
}

/// Which per-sample loss an evaluation differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// `(x_j - m_j)^2 / (2 v_j^2) + ln v_j` summed over nodes.
    Nll,
    /// `(x_j - m_j)^2` summed over nodes; variance networks are not used.
    Mse,
}

/// Gradients of a row-averaged loss.
#[derive(Clone, Debug, PartialEq)]
pub struct HnmGrads {
    pub value: f64,
    pub mean: Vec<Vec<f64>>,
    pub logv: Vec<Vec<f64>>,
    /// `d x d` row-major derivative with respect to the entries of the mean
    /// adjacency matrix, treated as continuous mask values.
    pub mask_m: Vec<f64>,
    pub mask_v: Vec<f64>,
}

impl HnmGrads {
    pub fn zeros(p: &HnmParams) -> Self {
        Self {
            value: 0.0,
            mean: p.mean.iter().map(|n| vec![0.0; n.n_params()]).collect(),
            logv: p.logv.iter().map(|n| vec![0.0; n.n_params()]).collect(),
            mask_m: vec![0.0; p.d * p.d],
            mask_v: vec![0.0; p.d * p.d],
        }
    }

    fn scale(&mut self, c: f64) {
        self.value *= c;
        for g in self.mean.iter_mut().chain(self.logv.iter_mut()) {
            g.iter_mut().for_each(|v| *v *= c);
        }
        self.mask_m.iter_mut().for_each(|v| *v *= c);
        self.mask_v.iter_mut().for_each(|v| *v *= c);
    }
}

/// Mean prediction, log-standard-deviation and loss term of one node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeTerm {
    pub mean: f64,
    pub log_v: f64,
    pub nll: f64,
}

fn check_shapes(x: &[f64], g: &DagPair, p: &HnmParams) -> Result<()> {
    let d = p.d;
    if g.mean().d() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: g.mean().d(),
        });
    }
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: x.len(),
        });
    }
    Ok(())
}

pub fn node_term(j: usize, x: &[f64], g: &DagPair, p: &HnmParams) -> Result<NodeTerm> {
    check_shapes(x, g, p)?;
    if j >= p.d {
        return Err(Error::OutOfRange(format!("node {j} with d = {}", p.d)));
    }
    let mut input = Vec::with_capacity(p.d);
    masked_input(x, &g.mean(), j, &mut input);
    let mean = p.mean[j].forward(&input)?;
    masked_input(x, &g.variance(), j, &mut input);
    let log_v = p.logv[j].forward(&input)?;
    let r = x[j] - mean;
    let nll = 0.5 * r * r * (-2.0 * log_v).exp() + log_v;
    if !nll.is_finite() {
        return Err(Error::NonFinite(format!("likelihood term of node {j}")));
    }
    Ok(NodeTerm { mean, log_v, nll })
}

pub fn node_nll(j: usize, x: &[f64], g: &DagPair, p: &HnmParams) -> Result<f64> {
    Ok(node_term(j, x, g, p)?.nll)
}

pub fn dataset_nll(data: &Dataset, g: &DagPair, p: &HnmParams) -> Result<f64> {
    Ok(evaluate(data.rows(), g, p, Loss::Nll, false)?.value)
}

pub fn dataset_mse(data: &Dataset, g: &DagPair, p: &HnmParams) -> Result<f64> {
    Ok(evaluate(data.rows(), g, p, Loss::Mse, false)?.value)
}

/// Exact gradients of [`dataset_nll`].
pub fn nll_gradients(data: &Dataset, g: &DagPair, p: &HnmParams) -> Result<HnmGrads> {
    evaluate(data.rows(), g, p, Loss::Nll, true)
}

pub fn mse_gradients(data: &Dataset, g: &DagPair, p: &HnmParams) -> Result<HnmGrads> {
    evaluate(data.rows(), g, p, Loss::Mse, true)
}

/// Gradients of the loss at a single observation.
pub fn point_gradients(x: &[f64], g: &DagPair, p: &HnmParams, loss: Loss) -> Result<HnmGrads> {
    evaluate(std::iter::once(x), g, p, loss, true)
}

/// Mean of the per-row loss over `rows` and, when `with_grads`, its exact
/// gradient. Rows are reduced sequentially in iteration order.
pub fn evaluate<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    g: &DagPair,
    p: &HnmParams,
    loss: Loss,
    with_grads: bool,
) -> Result<HnmGrads> {
    let d = p.d;
    let mut out = HnmGrads::zeros(p);
    let mut ws = Workspace::default();
    let mut ws_v = Workspace::default();
    let mut input = Vec::with_capacity(d);
    let mut input_v = Vec::with_capacity(d);
    let mut input_grads = vec![0.0; d];
    let mut n = 0usize;
    for x in rows {
        check_shapes(x, g, p)?;
        n += 1;
        for j in 0..d {
            masked_input(x, &g.mean(), j, &mut input);
            let m = p.mean[j].forward_with(&input, &mut ws);
            let r = x[j] - m;
            let dm = match loss {
                Loss::Mse => {
                    out.value += r * r;
                    -2.0 * r
                }
                Loss::Nll => {
                    masked_input(x, &g.variance(), j, &mut input_v);
                    let s = p.logv[j].forward_with(&input_v, &mut ws_v);
                    let inv_v2 = (-2.0 * s).exp();
                    let term = 0.5 * r * r * inv_v2 + s;
                    if !term.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "likelihood term of node {j} at row {n}"
                        )));
                    }
                    out.value += term;
                    if with_grads {
                        let ds = 1.0 - r * r * inv_v2;
                        input_grads.iter_mut().for_each(|v| *v = 0.0);
                        p.logv[j].backward_with(
                            &input_v,
                            &mut ws_v,
                            ds,
                            &mut out.logv[j],
                            Some(&mut input_grads),
                        );
                        for k in 0..d {
                            out.mask_v[k * d + j] += input_grads[k] * x[k];
                        }
                    }
                    -r * inv_v2
                }
            };
            if with_grads {
                input_grads.iter_mut().for_each(|v| *v = 0.0);
                p.mean[j].backward_with(
                    &input,
                    &mut ws,
                    dm,
                    &mut out.mean[j],
                    Some(&mut input_grads),
                );
                for k in 0..d {
                    out.mask_m[k * d + j] += input_grads[k] * x[k];
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidData("no rows to evaluate".into()));
    }
    if !out.value.is_finite() {
        return Err(Error::NonFinite("loss value".into()));
    }
    out.scale(1.0 / n as f64);
    Ok(out)
}
