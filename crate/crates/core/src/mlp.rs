//! Small leaky-ReLU perceptrons with hand-derived reverse-mode gradients.
//!
//! All parameters of a network live in one flat buffer. Layer `l` stores its
//! weight matrix (`dims[l + 1] x dims[l]`, row-major) followed by its bias.
//! Hidden layers use leaky-ReLU; the output layer is affine.

use rand::Rng;

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[inline]
fn leaky(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

// The kink at exactly zero takes the positive-side slope.
#[inline]
fn leaky_grad(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Output of a backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub value: f64,
    /// Same layout as [`MlpParams::as_slice`].
    pub grads: Vec<f64>,
    pub input_grads: Vec<f64>,
}

/// Per-call scratch space holding the activations of a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidParameter(
                "a network needs at least an input and an output layer".into(),
            ));
        }
        if dims.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter(format!("zero-width layer in {dims:?}")));
        }
        if *dims.last().unwrap() != 1 {
            return Err(Error::InvalidParameter("output width must be 1".into()));
        }
        let n = dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init_uniform<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut off = 0;
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let len = w[1] * w[0] + w[1];
            for v in &mut p.data[off..off + len] {
                *v = rng.random_range(-bound..bound);
            }
            off += len;
        }
        p.check_nonconstant()?;
        Ok(p)
    }

    pub fn from_flat(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        if data.len() != p.data.len() {
            return Err(Error::DimensionMismatch {
                expected: p.data.len(),
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        p.data = data;
        Ok(p)
    }

    /// Rejects networks in which some layer has all-zero weights; such a
    /// network is constant in its input.
    pub fn check_nonconstant(&self) -> Result<()> {
        for l in 0..self.n_layers() {
            if self.weight(l).iter().all(|&w| w == 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "layer {l} has all-zero weights; the network would be constant"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn layer_offset(&self, l: usize) -> usize {
        self.dims[..=l]
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    pub fn weight(&self, l: usize) -> &[f64] {
        let off = self.layer_offset(l);
        &self.data[off..off + self.dims[l + 1] * self.dims[l]]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let off = self.layer_offset(l) + self.dims[l + 1] * self.dims[l];
        &self.data[off..off + self.dims[l + 1]]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.forward_with(x, &mut Workspace::default()))
    }

    /// Gradients of `upstream * output` with respect to parameters and inputs.
    pub fn backward(&self, x: &[f64], upstream: f64) -> Result<GradBundle> {
        self.check_input(x)?;
        let mut ws = Workspace::default();
        let value = self.forward_with(x, &mut ws);
        let mut grads = vec![0.0; self.n_params()];
        let mut input_grads = vec![0.0; self.input_dim()];
        self.backward_with(x, &mut ws, upstream, &mut grads, Some(&mut input_grads));
        Ok(GradBundle {
            value,
            grads,
            input_grads,
        })
    }

    /// Unchecked forward pass that keeps activations in `ws` for a
    /// subsequent [`MlpParams::backward_with`].
    pub fn forward_with(&self, x: &[f64], ws: &mut Workspace) -> f64 {
        let layers = self.n_layers();
        ws.pre.resize_with(layers, Vec::new);
        ws.act.resize_with(layers, Vec::new);
        let mut off = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.data[off..off + fan_out * fan_in];
            let b = &self.data[off + fan_out * fan_in..off + fan_out * fan_in + fan_out];
            off += fan_out * fan_in + fan_out;
            let (prev_act, rest) = ws.act.split_at_mut(l);
            let input: &[f64] = if l == 0 { x } else { &prev_act[l - 1] };
            let pre = &mut ws.pre[l];
            pre.clear();
            for (row, &bias) in w.chunks_exact(fan_in).zip(b) {
                let mut z = bias;
                for (wi, xi) in row.iter().zip(input) {
                    z += wi * xi;
                }
                pre.push(z);
            }
            let act = &mut rest[0];
            act.clear();
            if l + 1 < layers {
                act.extend(pre.iter().map(|&z| leaky(z)));
            } else {
                act.extend_from_slice(pre);
            }
        }
        ws.act[layers - 1][0]
    }

    /// Accumulates (adds) gradients of `upstream * output` into `grads` and,
    /// when given, `input_grads`. Requires a preceding `forward_with` on `x`.
    pub fn backward_with(
        &self,
        x: &[f64],
        ws: &mut Workspace,
        upstream: f64,
        grads: &mut [f64],
        input_grads: Option<&mut [f64]>,
    ) {
        let layers = self.n_layers();
        ws.delta.clear();
        ws.delta.push(upstream);
        let mut end = self.data.len();
        let mut input_grads = input_grads;
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let start = end - (fan_out * fan_in + fan_out);
            let (w_range, b_start) = (start..start + fan_out * fan_in, start + fan_out * fan_in);
            let input: &[f64] = if l == 0 { x } else { &ws.act[l - 1] };
            {
                let gw = &mut grads[w_range.clone()];
                for (o, &dl) in ws.delta.iter().enumerate() {
                    if dl == 0.0 {
                        continue;
                    }
                    for (g, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                        *g += dl * xi;
                    }
                }
            }
            for (g, &dl) in grads[b_start..b_start + fan_out].iter_mut().zip(&ws.delta) {
                *g += dl;
            }
            if l == 0 && input_grads.is_none() {
                break;
            }
            let w = &self.data[w_range];
            ws.delta_prev.clear();
            ws.delta_prev.resize(fan_in, 0.0);
            for (o, &dl) in ws.delta.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                for (dp, wi) in ws.delta_prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *dp += dl * wi;
                }
            }
            if l == 0 {
                if let Some(ig) = input_grads.as_deref_mut() {
                    for (g, dp) in ig.iter_mut().zip(&ws.delta_prev) {
                        *g += dp;
                    }
                }
            } else {
                for (dp, &z) in ws.delta_prev.iter_mut().zip(&ws.pre[l - 1]) {
                    *dp *= leaky_grad(z);
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
            }
            end = start;
        }
    }
}

/// Worst per-coordinate relative error between `analytic` and a central
/// difference of `f` around `params`. The denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn fd_check_flat(
    params: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    step: f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len(), "gradient shape mismatch");
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..params.len() {
        probe[k] = params[k] + step;
        let up = f(&probe);
        probe[k] = params[k] - step;
        let down = f(&probe);
        probe[k] = params[k];
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[k].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    worst
}

/// [`fd_check_flat`] over the parameters of one network.
pub fn fd_check(
    p: &MlpParams,
    loss: impl Fn(&MlpParams) -> f64,
    analytic: &[f64],
    step: f64,
) -> f64 {
    let mut probe = p.clone();
    fd_check_flat(
        p.as_slice(),
        |theta| {
            probe.as_mut_slice().copy_from_slice(theta);
            loss(&probe)
        },
        analytic,
        step,
    )
}
