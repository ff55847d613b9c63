//! Variational objective and the alternating optimization loop.
//!
//! Each outer iteration runs a mean phase (mean networks, mean edge
//! probabilities and permutation scores, driven by the squared-error
//! gradient, which is the likelihood gradient rescaled by `2 v^2`) and a
//! variance phase (variance networks and variance edge probabilities,
//! driven by the Gaussian negative log-likelihood).

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dag_posterior::{
    backward, kl_edges, kl_side, sample_pair, EdgePrior, RelaxedSample, Temperatures, VariationalParams,
};
use crate::datagen::line_of;
use crate::error::{Error, Result};
use crate::hnm::{evaluate, HnmGrads, HnmParams, Loss};
use crate::ingest::Dataset;
use crate::optim::{Adam, Lbfgs, Optimizer};
use crate::ordering::{project, OrderingConstraints, FEASIBILITY_TOL};
use crate::rng::{substream, Rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Lbfgs,
}

/// Which gradient the permutation scores follow during the mean phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiSignal {
    /// Squared error through the mean graph only.
    Scaled,
    /// Squared error through the mean graph plus the likelihood gradient
    /// through the variance graph.
    ScaledAndVariance,
    /// Likelihood gradient through both graphs.
    Nll,
}

/// Training hyperparameters. Serialized as flat TOML with these keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Rows per minibatch (searched over 32, 64, 128, 256).
    pub batch_size: usize,
    /// Units per hidden layer (searched over 8, 16, 32, 64).
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub lambda: f64,
    pub lambda_phi: f64,
    pub lambda_theta_m: f64,
    pub lambda_theta_v: f64,
    /// Divide the regularizer by the number of rows so that it is weighed
    /// against the per-row likelihood like a prior against the full data.
    pub regularizer_per_row: bool,
    /// Signal driving the permutation scores in the mean phase.
    pub psi_signal: PsiSignal,
    pub rho_m: f64,
    pub rho_v: f64,
    pub tau_edge_m: f64,
    pub tau_edge_v: f64,
    pub tau_sort: f64,
    pub optimizer: OptimizerKind,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub lr_psi: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lbfgs_memory: usize,
    /// Longest parameter step of one quasi-Newton update.
    pub lbfgs_max_step: f64,
    pub max_outer: usize,
    pub inner_mean: usize,
    pub inner_var: usize,
    /// Relative change of the moving-average objective that stops training.
    pub tol: f64,
    pub ma_window: usize,
    /// Graph samples averaged per gradient step.
    pub graph_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            hidden_width: 16,
            hidden_layers: 2,
            lambda: 1.0,
            lambda_phi: 0.01,
            lambda_theta_m: 1e-3,
            lambda_theta_v: 1e-3,
            regularizer_per_row: false,
            psi_signal: PsiSignal::ScaledAndVariance,
            rho_m: 0.1,
            rho_v: 0.1,
            tau_edge_m: 1.0,
            tau_edge_v: 1.0,
            tau_sort: 1.0,
            optimizer: OptimizerKind::Adam,
            lr_theta: 1e-2,
            lr_phi: 5e-2,
            lr_psi: 5e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lbfgs_memory: 10,
            lbfgs_max_step: 1.0,
            max_outer: 50,
            inner_mean: 20,
            inner_var: 20,
            tol: 1e-4,
            ma_window: 5,
            graph_samples: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if self.batch_size == 0 || self.hidden_width == 0 {
            return bad("batch_size and hidden_width must be positive");
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("lambda_phi", self.lambda_phi),
            ("lambda_theta_m", self.lambda_theta_m),
            ("lambda_theta_v", self.lambda_theta_v),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be nonnegative")));
            }
        }
        for (name, v) in [
            ("lr_theta", self.lr_theta),
            ("lr_phi", self.lr_phi),
            ("lr_psi", self.lr_psi),
            ("tol", self.tol),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be nonnegative")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.max_outer == 0 || self.ma_window == 0 || self.graph_samples == 0 {
            return bad("max_outer, ma_window and graph_samples must be positive");
        }
        EdgePrior::new(self.rho_m, self.rho_v)?;
        for t in [self.tau_edge_m, self.tau_edge_v, self.tau_sort] {
            if !(t > 0.0 && t.is_finite()) {
                return bad("temperatures must be positive");
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn temperatures(&self) -> Temperatures {
        Temperatures {
            edge_m: self.tau_edge_m,
            edge_v: self.tau_edge_v,
            sort: self.tau_sort,
        }
    }

    pub fn prior(&self) -> EdgePrior {
        EdgePrior {
            rho_m: self.rho_m,
            rho_v: self.rho_v,
        }
    }

    pub fn hidden(&self) -> Vec<usize> {
        vec![self.hidden_width; self.hidden_layers]
    }

    /// Multiplier applied to the bracketed regularizer for `n` rows.
    pub fn reg_weight(&self, n: usize) -> f64 {
        if self.regularizer_per_row {
            self.lambda / n as f64
        } else {
            self.lambda
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: VariationalParams,
    pub hnm: HnmParams,
    /// Full-data objective estimate after every outer iteration.
    pub trace: Vec<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
    pub projections: usize,
    /// Largest constraint violation of the final scores (0 without
    /// constraints).
    pub max_violation: f64,
    pub wall_clock_secs: f64,
    pub seed: u64,
    pub config: TrainConfig,
}

/// Regularizer `lambda_phi KL + lambda_m |theta_m|^2 + lambda_v |theta_v|^2`
/// before the overall weight.
pub fn regularizer(hnm: &HnmParams, vp: &VariationalParams, cfg: &TrainConfig) -> f64 {
    cfg.lambda_phi * kl_edges(vp, &cfg.prior())
        + cfg.lambda_theta_m * hnm.mean_sq_norm()
        + cfg.lambda_theta_v * hnm.logv_sq_norm()
}

/// Single-sample objective: minus the mean negative log-likelihood at the
/// hard graphs of `sample`, minus the weighted regularizer.
pub fn elbo_objective(
    data: &Dataset,
    sample: &RelaxedSample,
    hnm: &HnmParams,
    vp: &VariationalParams,
    cfg: &TrainConfig,
) -> Result<f64> {
    let nll = evaluate(data.rows(), sample.pair(), hnm, Loss::Nll, false)?.value;
    Ok(-nll - cfg.reg_weight(data.n()) * regularizer(hnm, vp, cfg))
}

/// Descent directions for the mean phase.
#[derive(Clone, Debug)]
pub struct MeanStep {
    pub value: f64,
    pub theta_m: Vec<Vec<f64>>,
    pub logit_m: Vec<f64>,
    pub log_psi: Vec<f64>,
    /// Always zero: the mean phase leaves the variance networks alone.
    pub theta_v: Vec<Vec<f64>>,
}

/// Gradient of the squared error (plus regularizer) on `rows` with
/// respect to the mean networks, mean edge log-odds and permutation scores.
pub fn scaled_mean_step<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    sample: &RelaxedSample,
    hnm: &HnmParams,
    vp: &VariationalParams,
    cfg: &TrainConfig,
    n_total: usize,
) -> Result<MeanStep> {
    let rows: Vec<&[f64]> = rows.into_iter().collect();
    let g = evaluate(rows.iter().copied(), sample.pair(), hnm, Loss::Mse, true)?;
    let d = vp.d();
    let zero = vec![0.0; d * d];
    let mut vg = backward(vp, sample, &g.mask_m, &zero);
    match cfg.psi_signal {
        PsiSignal::Scaled => {}
        PsiSignal::ScaledAndVariance => {
            let nll = evaluate(rows.iter().copied(), sample.pair(), hnm, Loss::Nll, true)?;
            vg.log_psi = backward(vp, sample, &g.mask_m, &nll.mask_v).log_psi;
        }
        PsiSignal::Nll => {
            let nll = evaluate(rows.iter().copied(), sample.pair(), hnm, Loss::Nll, true)?;
            vg.log_psi = backward(vp, sample, &nll.mask_m, &nll.mask_v).log_psi;
        }
    }
    let w = cfg.reg_weight(n_total);
    let mut theta_m = g.mean;
    for (grads, net) in theta_m.iter_mut().zip(hnm.mean_nets()) {
        for (gk, pk) in grads.iter_mut().zip(net.as_slice()) {
            *gk += w * cfg.lambda_theta_m * 2.0 * pk;
        }
    }
    let (_, kl_grad) = kl_side(vp.logit_m(), cfg.rho_m, d);
    let logit_m = vg
        .logit_m
        .iter()
        .zip(&kl_grad)
        .map(|(a, b)| a + w * cfg.lambda_phi * b)
        .collect();
    Ok(MeanStep {
        value: g.value,
        theta_m,
        logit_m,
        log_psi: vg.log_psi,
        theta_v: g.logv.iter().map(|v| vec![0.0; v.len()]).collect(),
    })
}

/// Gradient of the negative log-likelihood (plus regularizer) with respect
/// to the variance networks and variance edge log-odds.
pub fn variance_step<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    sample: &RelaxedSample,
    hnm: &HnmParams,
    vp: &VariationalParams,
    cfg: &TrainConfig,
    n_total: usize,
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    let g: HnmGrads = evaluate(rows, sample.pair(), hnm, Loss::Nll, true)?;
    let d = vp.d();
    let vg = backward(vp, sample, &vec![0.0; d * d], &g.mask_v);
    let w = cfg.reg_weight(n_total);
    let mut theta_v = g.logv;
    for (grads, net) in theta_v.iter_mut().zip(hnm.logv_nets()) {
        for (gk, pk) in grads.iter_mut().zip(net.as_slice()) {
            *gk += w * cfg.lambda_theta_v * 2.0 * pk;
        }
    }
    let (_, kl_grad) = kl_side(vp.logit_v(), cfg.rho_v, d);
    let logit_v = vg
        .logit_v
        .iter()
        .zip(&kl_grad)
        .map(|(a, b)| a + w * cfg.lambda_phi * b)
        .collect();
    Ok((g.value, theta_v, logit_v))
}

/// Cycles through shuffled row indices, reshuffling every epoch.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    size: usize,
    rng: Rng,
}

impl Batches {
    fn new(n: usize, size: usize, rng: Rng) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            cursor: n,
            size: size.min(n),
            rng,
        };
        b.reshuffle_if_needed();
        b
    }

    fn reshuffle_if_needed(&mut self) {
        if self.cursor + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
    }

    fn next(&mut self) -> &[usize] {
        self.reshuffle_if_needed();
        let batch = &self.order[self.cursor..self.cursor + self.size];
        self.cursor += self.size;
        batch
    }
}

fn flatten(nets: &[Vec<f64>], extra: &[&[f64]]) -> Vec<f64> {
    let mut out: Vec<f64> = nets.iter().flatten().copied().collect();
    for e in extra {
        out.extend_from_slice(e);
    }
    out
}

fn add_scaled(acc: &mut [f64], g: &[f64], c: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += c * b;
    }
}

fn make_optimizer(cfg: &TrainConfig, n: usize) -> Optimizer {
    match cfg.optimizer {
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(n, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)),
        OptimizerKind::Lbfgs => {
            let mut l = Lbfgs::new(cfg.lbfgs_memory);
            l.max_step = cfg.lbfgs_max_step;
            Optimizer::Lbfgs(l)
        }
    }
}

/// Runs the alternating optimization. Deterministic for a fixed seed,
/// configuration and dataset.
pub fn fit(data: &Dataset, cfg: &TrainConfig, constraints: Option<&OrderingConstraints>) -> Result<FitResult> {
    cfg.validate()?;
    let (n, d) = (data.n(), data.d());
    if n < 2 || d < 2 {
        return Err(Error::InvalidData(format!(
            "fitting needs at least 2 rows and 2 columns, got {n} x {d}"
        )));
    }
    if let Some(c) = constraints {
        c.validate(d)?;
    }
    let start = Instant::now();
    let mut init_rng = substream(cfg.seed, Stream::Init);
    let mut gumbel = substream(cfg.seed, Stream::Gumbel);
    let mut batches = Batches::new(n, cfg.batch_size, substream(cfg.seed, Stream::Shuffle));
    let mut hnm = HnmParams::init(d, &cfg.hidden(), &mut init_rng)?;
    let mut vp = VariationalParams::uniform(d);
    let mut projections = 0usize;
    let project_scores = |vp: &mut VariationalParams, count: &mut usize| -> Result<()> {
        if let Some(c) = constraints.filter(|c| !c.is_empty()) {
            let r = project(vp.log_psi(), c)?;
            vp.log_psi_mut().copy_from_slice(&r.psi);
            *count += 1;
        }
        Ok(())
    };
    project_scores(&mut vp, &mut projections)?;

    let taus = cfg.temperatures();
    let mean_sizes: Vec<usize> = hnm.mean_nets().iter().map(|m| m.n_params()).collect();
    let var_sizes: Vec<usize> = hnm.logv_nets().iter().map(|m| m.n_params()).collect();
    let n_theta_m: usize = mean_sizes.iter().sum();
    let n_theta_v: usize = var_sizes.iter().sum();
    let lr_mean: Vec<f64> = std::iter::repeat_n(cfg.lr_theta, n_theta_m)
        .chain(std::iter::repeat_n(cfg.lr_phi, d * d))
        .chain(std::iter::repeat_n(cfg.lr_psi, d))
        .collect();
    let lr_var: Vec<f64> = std::iter::repeat_n(cfg.lr_theta, n_theta_v)
        .chain(std::iter::repeat_n(cfg.lr_phi, d * d))
        .collect();
    let mut opt_mean = make_optimizer(cfg, lr_mean.len());
    let mut opt_var = make_optimizer(cfg, lr_var.len());

    let mut trace = Vec::with_capacity(cfg.max_outer);
    let mut moving: Vec<f64> = Vec::new();
    let mut converged = false;
    let k = cfg.graph_samples;
    for outer in 1..=cfg.max_outer {
        let diverged = |e: Error, value: f64| match e {
            Error::NonFinite(_) => Error::Diverged {
                iteration: outer,
                value,
            },
            other => other,
        };
        for _ in 0..cfg.inner_mean {
            let rows: Vec<usize> = batches.next().to_vec();
            let mut grad = vec![0.0; lr_mean.len()];
            for _ in 0..k {
                let sample = sample_pair(&vp, taus, &mut gumbel)?;
                let step = scaled_mean_step(rows.iter().map(|&i| data.row(i)), &sample, &hnm, &vp, cfg, n)
                    .map_err(|e| diverged(e, f64::NAN))?;
                let flat = flatten(&step.theta_m, &[&step.logit_m, &step.log_psi]);
                add_scaled(&mut grad, &flat, 1.0 / k as f64);
            }
            let mut x = flatten(
                &hnm.mean_nets().iter().map(|m| m.as_slice().to_vec()).collect::<Vec<_>>(),
                &[vp.logit_m(), vp.log_psi()],
            );
            opt_mean.step(&mut x, &grad, &lr_mean);
            let mut off = 0;
            for net in hnm.mean_nets_mut() {
                let len = net.n_params();
                net.as_mut_slice().copy_from_slice(&x[off..off + len]);
                off += len;
            }
            vp.logit_m_mut().copy_from_slice(&x[off..off + d * d]);
            vp.log_psi_mut().copy_from_slice(&x[off + d * d..]);
            clear_lower(vp.logit_m_mut(), d);
            project_scores(&mut vp, &mut projections)?;
        }
        for _ in 0..cfg.inner_var {
            let rows: Vec<usize> = batches.next().to_vec();
            let mut grad = vec![0.0; lr_var.len()];
            for _ in 0..k {
                let sample = sample_pair(&vp, taus, &mut gumbel)?;
                let (_, theta_v, logit_v) =
                    variance_step(rows.iter().map(|&i| data.row(i)), &sample, &hnm, &vp, cfg, n)
                        .map_err(|e| diverged(e, f64::NAN))?;
                let flat = flatten(&theta_v, &[&logit_v]);
                add_scaled(&mut grad, &flat, 1.0 / k as f64);
            }
            let mut x = flatten(
                &hnm.logv_nets().iter().map(|m| m.as_slice().to_vec()).collect::<Vec<_>>(),
                &[vp.logit_v()],
            );
            opt_var.step(&mut x, &grad, &lr_var);
            let mut off = 0;
            for net in hnm.logv_nets_mut() {
                let len = net.n_params();
                net.as_mut_slice().copy_from_slice(&x[off..off + len]);
                off += len;
            }
            vp.logit_v_mut().copy_from_slice(&x[off..]);
            clear_lower(vp.logit_v_mut(), d);
        }
        if !hnm.is_finite() || !vp.is_finite() {
            return Err(Error::Diverged {
                iteration: outer,
                value: f64::NAN,
            });
        }
        let sample = sample_pair(&vp, taus, &mut gumbel)?;
        let objective = elbo_objective(data, &sample, &hnm, &vp, cfg).map_err(|e| diverged(e, f64::NAN))?;
        if !objective.is_finite() {
            return Err(Error::Diverged {
                iteration: outer,
                value: objective,
            });
        }
        trace.push(objective);
        if trace.len() >= cfg.ma_window {
            let w = cfg.ma_window;
            let ma = trace[trace.len() - w..].iter().sum::<f64>() / w as f64;
            if let Some(&prev) = moving.last() {
                let rel = ((ma - prev) / prev.abs().max(1e-12)).abs();
                moving.push(ma);
                if rel < cfg.tol {
                    converged = true;
                    break;
                }
            } else {
                moving.push(ma);
            }
        }
    }
    let max_violation = constraints.map(|c| c.max_violation(vp.log_psi())).unwrap_or(0.0);
    if max_violation > FEASIBILITY_TOL {
        return Err(Error::Infeasible(format!(
            "final scores violate a constraint by {max_violation}"
        )));
    }
    Ok(FitResult {
        outer_iterations: trace.len(),
        params: vp,
        hnm,
        trace,
        converged,
        projections,
        max_violation,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        config: cfg.clone(),
    })
}

// Entries on and below the diagonal carry no meaning; keep them at zero.
fn clear_lower(logits: &mut [f64], d: usize) {
    for k in 0..d {
        for l in 0..=k {
            logits[k * d + l] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenSpec, ScmFamily};
    use crate::graph::{AdjMatrix, DagPair};

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrainConfig {
            seed: 5,
            optimizer: OptimizerKind::Lbfgs,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(TrainConfig::from_toml("seed = 3\n").unwrap().seed, 3);
        assert!(TrainConfig::from_toml("seed = 3\nunknown = 1\n").is_err());
        assert!(TrainConfig::from_toml("rho_m = 1.5\n").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0\n").is_err());
    }

    #[test]
    fn objective_without_regularizer_is_negative_nll() {
        let spec = GenSpec::new(3, 40, ScmFamily::NonlinearHnm, 1);
        let data = generate(&spec).unwrap().data;
        let cfg = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = substream(2, Stream::Init);
        let hnm = HnmParams::init(3, &[4], &mut rng).unwrap();
        let vp = VariationalParams::uniform(3);
        let sample = sample_pair(&vp, cfg.temperatures(), &mut rng).unwrap();
        let obj = elbo_objective(&data, &sample, &hnm, &vp, &cfg).unwrap();
        let nll = crate::hnm::dataset_nll(&data, sample.pair(), &hnm).unwrap();
        assert_eq!(obj, -nll);
    }

    #[test]
    fn regularizer_vanishes_at_prior_and_zero_weights() {
        let cfg = TrainConfig::default();
        let d = 3;
        let phi = vec![cfg.rho_m; d * d];
        let vp = VariationalParams::from_probs(&phi, &phi, &[0.0; 3]).unwrap();
        let zero = crate::mlp::MlpParams::zeros(&[d, 2, 1]).unwrap();
        let hnm = HnmParams::from_networks(vec![zero.clone(); d], vec![zero; d]).unwrap();
        assert!(regularizer(&hnm, &vp, &cfg).abs() < 1e-12);
    }

    #[test]
    fn mean_step_leaves_variance_side_untouched() {
        let spec = GenSpec::new(3, 30, ScmFamily::MeanVarianceHnm, 4);
        let data = generate(&spec).unwrap().data;
        let cfg = TrainConfig::default();
        let mut rng = substream(4, Stream::Init);
        let hnm = HnmParams::init(3, &[4, 4], &mut rng).unwrap();
        let vp = VariationalParams::uniform(3);
        let sample = sample_pair(&vp, cfg.temperatures(), &mut rng).unwrap();
        let step = scaled_mean_step(data.rows(), &sample, &hnm, &vp, &cfg, data.n()).unwrap();
        assert!(step.theta_v.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_variance_mean_step_is_twice_nll_gradient() {
        // Log-variance networks with all-zero parameters give v = 1.
        let spec = GenSpec::new(3, 25, ScmFamily::NonlinearAnm, 8);
        let data = generate(&spec).unwrap().data;
        let cfg = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = substream(8, Stream::Init);
        let init = HnmParams::init(3, &[4], &mut rng).unwrap();
        let zero = crate::mlp::MlpParams::zeros(&[3, 4, 1]).unwrap();
        let hnm = HnmParams::from_networks(init.mean_nets().to_vec(), vec![zero; 3]).unwrap();
        let vp = VariationalParams::uniform(3);
        let sample = sample_pair(&vp, cfg.temperatures(), &mut rng).unwrap();
        let step = scaled_mean_step(data.rows(), &sample, &hnm, &vp, &cfg, data.n()).unwrap();
        let nll = crate::hnm::nll_gradients(&data, sample.pair(), &hnm).unwrap();
        for (a, b) in step.theta_m.iter().flatten().zip(nll.mean.iter().flatten()) {
            assert!((a - 2.0 * b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn fit_is_deterministic_and_respects_constraints() {
        let spec = GenSpec::new(3, 60, ScmFamily::MeanVarianceHnm, 6);
        let data = generate(&spec).unwrap().data;
        let cfg = TrainConfig {
            seed: 3,
            max_outer: 3,
            inner_mean: 5,
            inner_var: 5,
            hidden_width: 4,
            ..TrainConfig::default()
        };
        let c = OrderingConstraints::from_pairs(&[(2, 0), (0, 1)]);
        let a = fit(&data, &cfg, Some(&c)).unwrap();
        let b = fit(&data, &cfg, Some(&c)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
        assert!(a.max_violation <= FEASIBILITY_TOL);
        assert!(a.projections > 0);
        assert!(a.trace.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fit_rejects_tiny_data() {
        let data = Dataset::with_default_names(2, vec![1.0, 2.0]).unwrap();
        assert!(fit(&data, &TrainConfig::default(), None).is_err());
        let _ = DagPair::identical(AdjMatrix::empty(2));
    }
}
