//! Variational distribution over pairs of DAGs sharing one ordering.
//!
//! A sample draws two strictly upper-triangular edge matrices (mean and
//! variance) from independent Bernoulli relaxations and one permutation by
//! sorting Gumbel-perturbed log scores. Composing each edge matrix with the
//! permutation gives two DAGs with a common topological order.
//!
//! Forward passes use the hard (argmax) samples; gradients flow through the
//! continuous relaxations (straight-through).

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::error::{Error, Result};
use crate::graph::{compose, AdjMatrix, DagPair, Permutation, UpperTri};

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn standard_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Gumbel::new(0.0, 1.0).expect("valid gumbel").sample(rng)
}

/// Parameters `phi_m`, `phi_v` (edge probabilities over sorted positions) and
/// `psi` (permutation scores). Probabilities are stored as log-odds and the
/// scores as `log psi`, so every stored value is unconstrained.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    d: usize,
    logit_m: Vec<f64>,
    logit_v: Vec<f64>,
    log_psi: Vec<f64>,
}

impl VariationalParams {
    /// `phi = 0.5` on every slot and equal scores.
    pub fn uniform(d: usize) -> Self {
        Self {
            d,
            logit_m: vec![0.0; d * d],
            logit_v: vec![0.0; d * d],
            log_psi: vec![0.0; d],
        }
    }

    /// Builds parameters from probability matrices (row-major `d x d`; only
    /// the strict upper triangle is read) and log scores.
    pub fn from_probs(phi_m: &[f64], phi_v: &[f64], log_psi: &[f64]) -> Result<Self> {
        let d = log_psi.len();
        for (name, phi) in [("phi_m", phi_m), ("phi_v", phi_v)] {
            if phi.len() != d * d {
                return Err(Error::DimensionMismatch {
                    expected: d * d,
                    found: phi.len(),
                });
            }
            for k in 0..d {
                for l in (k + 1)..d {
                    let p = phi[k * d + l];
                    if !(p > 0.0 && p < 1.0) {
                        return Err(Error::InvalidParameter(format!(
                            "{name}[{k}][{l}] = {p} is outside (0, 1)"
                        )));
                    }
                }
            }
        }
        if log_psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log_psi".into()));
        }
        let to_logits = |phi: &[f64]| {
            let mut out = vec![0.0; d * d];
            for k in 0..d {
                for l in (k + 1)..d {
                    out[k * d + l] = logit(phi[k * d + l]);
                }
            }
            out
        };
        Ok(Self {
            d,
            logit_m: to_logits(phi_m),
            logit_v: to_logits(phi_v),
            log_psi: log_psi.to_vec(),
        })
    }

    pub fn from_logits(logit_m: Vec<f64>, logit_v: Vec<f64>, log_psi: Vec<f64>) -> Result<Self> {
        let d = log_psi.len();
        if logit_m.len() != d * d || logit_v.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                found: logit_m.len().min(logit_v.len()),
            });
        }
        if logit_m.iter().chain(&logit_v).chain(&log_psi).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("variational parameters".into()));
        }
        Ok(Self {
            d,
            logit_m,
            logit_v,
            log_psi,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn phi_m(&self, k: usize, l: usize) -> f64 {
        sigmoid(self.logit_m[k * self.d + l])
    }

    pub fn phi_v(&self, k: usize, l: usize) -> f64 {
        sigmoid(self.logit_v[k * self.d + l])
    }

    /// Row-major probability matrix; entries on and below the diagonal are 0.
    pub fn phi_m_matrix(&self) -> Vec<f64> {
        self.prob_matrix(&self.logit_m)
    }

    pub fn phi_v_matrix(&self) -> Vec<f64> {
        self.prob_matrix(&self.logit_v)
    }

    fn prob_matrix(&self, logits: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; d * d];
        for k in 0..d {
            for l in (k + 1)..d {
                out[k * d + l] = sigmoid(logits[k * d + l]);
            }
        }
        out
    }

    pub fn log_psi(&self) -> &[f64] {
        &self.log_psi
    }

    pub fn log_psi_mut(&mut self) -> &mut [f64] {
        &mut self.log_psi
    }

    pub fn logit_m(&self) -> &[f64] {
        &self.logit_m
    }

    pub fn logit_v(&self) -> &[f64] {
        &self.logit_v
    }

    pub fn logit_m_mut(&mut self) -> &mut [f64] {
        &mut self.logit_m
    }

    pub fn logit_v_mut(&mut self) -> &mut [f64] {
        &mut self.logit_v
    }

    pub fn is_finite(&self) -> bool {
        self.logit_m
            .iter()
            .chain(&self.logit_v)
            .chain(&self.log_psi)
            .all(|v| v.is_finite())
    }
}

/// Relaxation temperatures for the two edge matrices and the sort.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperatures {
    pub edge_m: f64,
    pub edge_v: f64,
    pub sort: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            edge_m: 1.0,
            edge_v: 1.0,
            sort: 1.0,
        }
    }
}

impl Temperatures {
    fn validate(&self) -> Result<()> {
        for (name, t) in [("edge_m", self.edge_m), ("edge_v", self.edge_v), ("sort", self.sort)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "temperature {name} = {t} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Independent Bernoulli prior on every strict upper-triangular slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgePrior {
    pub rho_m: f64,
    pub rho_v: f64,
}

impl EdgePrior {
    pub fn new(rho_m: f64, rho_v: f64) -> Result<Self> {
        for rho in [rho_m, rho_v] {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "prior probability {rho} is outside (0, 1)"
                )));
            }
        }
        Ok(Self { rho_m, rho_v })
    }
}

/// Relaxed binary sample from fixed Gumbel draws `g1` (edge) and `g0` (no edge).
#[inline]
pub fn binary_concrete(log_odds: f64, g1: f64, g0: f64, tau: f64) -> f64 {
    sigmoid((log_odds + g1 - g0) / tau)
}

pub fn sample_binary_concrete<R: Rng + ?Sized>(
    phi: f64,
    tau: f64,
    rng: &mut R,
) -> Result<(f64, bool)> {
    if !(phi > 0.0 && phi < 1.0) {
        return Err(Error::InvalidParameter(format!("phi = {phi} is outside (0, 1)")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau = {tau} must be positive")));
    }
    let (g1, g0) = (standard_gumbel(rng), standard_gumbel(rng));
    let soft = binary_concrete(logit(phi), g1, g0, tau);
    Ok((soft, soft > 0.5))
}

/// Indices of `scores` in ascending order (stable for ties).
pub fn argsort(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Row `k` is `softmax_j(-|sort(scores)_k - scores_j| / tau)`; returned
/// row-major `d x d`.
pub fn soft_sort(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("soft_sort scores".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau = {tau} must be positive")));
    }
    Ok(soft_sort_with(scores, &argsort(scores), tau))
}

fn soft_sort_with(scores: &[f64], sorted_idx: &[usize], tau: f64) -> Vec<f64> {
    let d = scores.len();
    let mut out = vec![0.0; d * d];
    for (k, &src) in sorted_idx.iter().enumerate() {
        let row = &mut out[k * d..(k + 1) * d];
        let anchor = scores[src];
        // The anchor itself has distance 0, so the row maximum is 0.
        let mut total = 0.0;
        for (j, r) in row.iter_mut().enumerate() {
            *r = (-(anchor - scores[j]).abs() / tau).exp();
            total += *r;
        }
        for r in row.iter_mut() {
            *r /= total;
        }
    }
    out
}

/// Vector-Jacobian product of [`soft_sort`] with respect to `scores`.
pub fn soft_sort_backward(scores: &[f64], tau: f64, soft: &[f64], upstream: &[f64]) -> Vec<f64> {
    let d = scores.len();
    let sorted_idx = argsort(scores);
    let mut grad = vec![0.0; d];
    for (k, &src) in sorted_idx.iter().enumerate() {
        let p = &soft[k * d..(k + 1) * d];
        let g = &upstream[k * d..(k + 1) * d];
        let mean: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..d {
            // d logits_kj = -sign(s_src - s_j) / tau * (d s_src - d s_j)
            let dz = p[j] * (g[j] - mean);
            let delta = scores[src] - scores[j];
            let s = if delta > 0.0 {
                1.0
            } else if delta < 0.0 {
                -1.0
            } else {
                0.0
            };
            let coeff = -s / tau * dz;
            grad[src] += coeff;
            grad[j] -= coeff;
        }
    }
    grad
}

/// Gumbel draws behind a [`RelaxedSample`], kept for reproducibility.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelDraws {
    pub g1_m: Vec<f64>,
    pub g0_m: Vec<f64>,
    pub g1_v: Vec<f64>,
    pub g0_v: Vec<f64>,
    pub g_sort: Vec<f64>,
}

impl GumbelDraws {
    pub fn draw<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let slots = |rng: &mut R| {
            let mut v = vec![0.0; d * d];
            for k in 0..d {
                for l in (k + 1)..d {
                    v[k * d + l] = standard_gumbel(rng);
                }
            }
            v
        };
        let g1_m = slots(rng);
        let g0_m = slots(rng);
        let g1_v = slots(rng);
        let g0_v = slots(rng);
        let g_sort = (0..d).map(|_| standard_gumbel(rng)).collect();
        Self {
            g1_m,
            g0_m,
            g1_v,
            g0_v,
            g_sort,
        }
    }
}

/// One draw from the variational distribution with its relaxations.
#[derive(Clone, Debug)]
pub struct RelaxedSample {
    pub u_m_soft: Vec<f64>,
    pub u_v_soft: Vec<f64>,
    /// Row `k` relaxes the indicator of the node at position `k`.
    pub pi_soft: Vec<f64>,
    pub u_m_hard: UpperTri,
    pub u_v_hard: UpperTri,
    pub pi_hard: Permutation,
    pub scores: Vec<f64>,
    pub gumbel_draws: GumbelDraws,
    pub taus: Temperatures,
    pair: DagPair,
}

impl RelaxedSample {
    pub fn pair(&self) -> &DagPair {
        &self.pair
    }

    pub fn d(&self) -> usize {
        self.scores.len()
    }
}

/// Deterministic part of [`sample_pair`] given fixed noise.
pub fn relax(params: &VariationalParams, taus: Temperatures, noise: GumbelDraws) -> Result<RelaxedSample> {
    taus.validate()?;
    let d = params.d();
    let edge = |logits: &[f64], g1: &[f64], g0: &[f64], tau: f64| {
        let mut soft = vec![0.0; d * d];
        for k in 0..d {
            for l in (k + 1)..d {
                let i = k * d + l;
                soft[i] = binary_concrete(logits[i], g1[i], g0[i], tau);
            }
        }
        let hard = UpperTri::from_fn(d, |k, l| soft[k * d + l] > 0.5);
        (soft, hard)
    };
    let (u_m_soft, u_m_hard) = edge(&params.logit_m, &noise.g1_m, &noise.g0_m, taus.edge_m);
    let (u_v_soft, u_v_hard) = edge(&params.logit_v, &noise.g1_v, &noise.g0_v, taus.edge_v);
    let scores: Vec<f64> = params
        .log_psi
        .iter()
        .zip(&noise.g_sort)
        .map(|(a, g)| a + g)
        .collect();
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("perturbed permutation scores".into()));
    }
    let order = argsort(&scores);
    let pi_soft = soft_sort_with(&scores, &order, taus.sort);
    let pi_hard = Permutation::from_order(order)?;
    let pair = DagPair::from_shared(&u_m_hard, &u_v_hard, &pi_hard)?;
    Ok(RelaxedSample {
        u_m_soft,
        u_v_soft,
        pi_soft,
        u_m_hard,
        u_v_hard,
        pi_hard,
        scores,
        gumbel_draws: noise,
        taus,
        pair,
    })
}

/// Draws one relaxed sample; fresh Gumbel noise for every slot and score.
pub fn sample_pair<R: Rng + ?Sized>(
    params: &VariationalParams,
    taus: Temperatures,
    rng: &mut R,
) -> Result<RelaxedSample> {
    let noise = GumbelDraws::draw(params.d(), rng);
    relax(params, taus, noise)
}

/// Hard sample only. Its law does not depend on the temperatures.
pub fn sample_hard<R: Rng + ?Sized>(params: &VariationalParams, rng: &mut R) -> Result<DagPair> {
    Ok(sample_pair(params, Temperatures::default(), rng)?.pair)
}

/// Gradients with respect to the stored (unconstrained) parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalGrads {
    pub logit_m: Vec<f64>,
    pub logit_v: Vec<f64>,
    pub log_psi: Vec<f64>,
}

impl VariationalGrads {
    pub fn zeros(d: usize) -> Self {
        Self {
            logit_m: vec![0.0; d * d],
            logit_v: vec![0.0; d * d],
            log_psi: vec![0.0; d],
        }
    }
}

/// For `A = S^T U S` with `S[k][j] = 1` iff node `j` sits at position `k`,
/// returns `(dL/dU, dL/dS)` given `G = dL/dA`. All matrices row-major.
pub fn compose_backward(u: &[f64], s: &[f64], g: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mm = |a: &[f64], b: &[f64]| {
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let aik = a[i * d + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..d {
                    c[i * d + j] += aik * b[k * d + j];
                }
            }
        }
        c
    };
    let t = |a: &[f64]| {
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                c[j * d + i] = a[i * d + j];
            }
        }
        c
    };
    let (ut, st, gt) = (t(u), t(s), t(g));
    // dL/dU = S G S^T ; dL/dS = U S G^T + U^T S G
    let grad_u = mm(&mm(s, g), &st);
    let a = mm(&mm(u, s), &gt);
    let b = mm(&mm(&ut, s), g);
    let grad_s = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    (grad_u, grad_s)
}

fn hard_matrix(u: &UpperTri) -> Vec<f64> {
    let d = u.d();
    let mut out = vec![0.0; d * d];
    for k in 0..d {
        for l in (k + 1)..d {
            if u.get(k, l) {
                out[k * d + l] = 1.0;
            }
        }
    }
    out
}

fn perm_matrix(p: &Permutation) -> Vec<f64> {
    let d = p.d();
    let mut s = vec![0.0; d * d];
    for j in 0..d {
        s[p.position(j) * d + j] = 1.0;
    }
    s
}

/// Straight-through backward pass: `grad_a_m`, `grad_a_v` are the loss
/// gradients with respect to the hard adjacency matrices (row-major).
pub fn backward(
    params: &VariationalParams,
    sample: &RelaxedSample,
    grad_a_m: &[f64],
    grad_a_v: &[f64],
) -> VariationalGrads {
    let d = params.d();
    let s = perm_matrix(&sample.pi_hard);
    let mut grads = VariationalGrads::zeros(d);
    let mut grad_s = vec![0.0; d * d];
    let sides = [
        (
            grad_a_m,
            &sample.u_m_hard,
            &sample.u_m_soft,
            sample.taus.edge_m,
            &mut grads.logit_m,
        ),
        (
            grad_a_v,
            &sample.u_v_hard,
            &sample.u_v_soft,
            sample.taus.edge_v,
            &mut grads.logit_v,
        ),
    ];
    for (g, u_hard, u_soft, tau, out) in sides {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let (gu, gs) = compose_backward(&hard_matrix(u_hard), &s, g, d);
        for k in 0..d {
            for l in (k + 1)..d {
                let i = k * d + l;
                let soft = u_soft[i];
                out[i] += gu[i] * soft * (1.0 - soft) / tau;
            }
        }
        for (a, b) in grad_s.iter_mut().zip(gs) {
            *a += b;
        }
    }
    if grad_s.iter().any(|&v| v != 0.0) {
        grads.log_psi = soft_sort_backward(&sample.scores, sample.taus.sort, &sample.pi_soft, &grad_s);
    }
    grads
}

fn bernoulli_kl(q: f64, p: f64) -> f64 {
    q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
}

/// Summed Bernoulli KL over the strict upper triangle of both edge matrices.
/// No term is placed on the permutation scores.
pub fn kl_edges(params: &VariationalParams, prior: &EdgePrior) -> f64 {
    let d = params.d();
    let mut total = 0.0;
    for k in 0..d {
        for l in (k + 1)..d {
            total += bernoulli_kl(params.phi_m(k, l), prior.rho_m);
            total += bernoulli_kl(params.phi_v(k, l), prior.rho_v);
        }
    }
    total
}

/// Per-side KL and its gradient with respect to the log-odds.
pub(crate) fn kl_side(logits: &[f64], rho: f64, d: usize) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; d * d];
    let mut total = 0.0;
    let rho_logit = logit(rho);
    for k in 0..d {
        for l in (k + 1)..d {
            let i = k * d + l;
            let q = sigmoid(logits[i]);
            total += bernoulli_kl(q, rho);
            grad[i] = q * (1.0 - q) * (logits[i] - rho_logit);
        }
    }
    (total, grad)
}

/// Monte Carlo frequency of every directed edge in hard samples.
pub fn edge_marginals<R: Rng + ?Sized>(
    params: &VariationalParams,
    n_samples: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be at least 1".into()));
    }
    let d = params.d();
    let mut mean = vec![0.0; d * d];
    let mut var = vec![0.0; d * d];
    for _ in 0..n_samples {
        let pair = sample_hard(params, rng)?;
        tally(&mut mean, pair.mean());
        tally(&mut var, pair.variance());
    }
    let n = n_samples as f64;
    mean.iter_mut().chain(var.iter_mut()).for_each(|v| *v /= n);
    Ok((mean, var))
}

fn tally(acc: &mut [f64], a: &AdjMatrix) {
    let d = a.d();
    for (i, j) in a.edges() {
        acc[i * d + j] += 1.0;
    }
}

/// Convenience for tests and callers holding a hard permutation and edges.
pub fn compose_pair(u_m: &UpperTri, u_v: &UpperTri, p: &Permutation) -> Result<(AdjMatrix, AdjMatrix)> {
    Ok((compose(u_m, p)?, compose(u_v, p)?))
}
