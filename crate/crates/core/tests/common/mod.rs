//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the routine it checks.

#![allow(dead_code)]

pub mod criteria;

use std::ops::{Add, Mul, Neg, Sub};

use momentdag::dag_posterior::VariationalParams;
use momentdag::graph::{AdjMatrix, DagPair, Permutation, UpperTri};
use momentdag::hnm::{self, HnmParams, Loss};
use momentdag::mlp::LEAKY_SLOPE;
use momentdag::ordering::{OrderingConstraints, Precedence};
use momentdag::rng::{substream, Stream};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

// ---------------------------------------------------------------------
// Double-double arithmetic (about 32 significant digits).

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    const LN2: Dd = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn new(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn div_f64(self, b: f64) -> Self {
        let q1 = self.hi / b;
        let r = self - Dd::new(q1) * Dd::new(b);
        let q2 = r.hi / b;
        quick_two_sum(q1, q2)
    }

    fn scale_pow2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    /// Range reduction by ln 2 and by 2^10, Taylor series, then squaring.
    pub fn exp(self) -> Self {
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = (self - Dd::LN2 * Dd::new(k)).scale_pow2(-10);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..14 {
            term = (term * r).div_f64(n as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale_pow2(k as i32)
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let p = self.hi * b.hi;
        let e = self.hi.mul_add(b.hi, -p);
        quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

// ---------------------------------------------------------------------
// Heteroscedastic likelihood evaluated in double-double.

/// Layer dims and parameters of one network in the flat layout: per layer
/// the row-major weights then the bias.
pub struct DdNet {
    pub dims: Vec<usize>,
    pub params: Vec<Dd>,
}

impl DdNet {
    pub fn from_f64(dims: &[usize], params: &[f64]) -> Self {
        Self {
            dims: dims.to_vec(),
            params: params.iter().map(|&v| Dd::new(v)).collect(),
        }
    }

    /// Output and the smallest |pre-activation| of any hidden unit.
    pub fn forward(&self, x: &[Dd]) -> (Dd, f64) {
        let mut act = x.to_vec();
        let mut off = 0;
        let mut closest = f64::INFINITY;
        let layers = self.dims.len() - 1;
        for l in 0..layers {
            let (fi, fo) = (self.dims[l], self.dims[l + 1]);
            let mut next = Vec::with_capacity(fo);
            for o in 0..fo {
                let mut z = self.params[off + fo * fi + o];
                for i in 0..fi {
                    z = z + self.params[off + o * fi + i] * act[i];
                }
                if l + 1 < layers {
                    closest = closest.min(z.to_f64().abs());
                    if z.hi < 0.0 {
                        z = z * Dd::new(LEAKY_SLOPE);
                    }
                }
                next.push(z);
            }
            off += fo * fi + fo;
            act = next;
        }
        (act[0], closest)
    }
}

/// `(x_j - m)^2 exp(-2 s) / 2 + s` for node `j`, with continuous mask
/// columns. Also returns the distance of the nearest hidden unit to its
/// kink.
pub fn dd_node_nll(j: usize, x: &[f64], mask_m: &[Dd], mask_v: &[Dd], mean: &DdNet, logv: &DdNet) -> (Dd, f64) {
    let xm: Vec<Dd> = x.iter().zip(mask_m).map(|(&v, &a)| Dd::new(v) * a).collect();
    let xv: Vec<Dd> = x.iter().zip(mask_v).map(|(&v, &a)| Dd::new(v) * a).collect();
    let (m, k1) = mean.forward(&xm);
    let (s, k2) = logv.forward(&xv);
    let r = Dd::new(x[j]) - m;
    let half = Dd::new(0.5);
    (half * r * r * (Dd::new(-2.0) * s).exp() + s, k1.min(k2))
}

pub fn mask_column(a: &AdjMatrix, j: usize) -> Vec<Dd> {
    (0..a.d()).map(|k| Dd::new(if a.has_edge(k, j) { 1.0 } else { 0.0 })).collect()
}

/// Central difference with Richardson extrapolation, in double-double.
/// `f(t)` evaluates the loss with the probed coordinate shifted by `t`.
pub fn dd_derivative(mut f: impl FnMut(Dd) -> Dd, h: f64) -> f64 {
    let mut central = |h: f64| (f(Dd::new(h)) - f(Dd::new(-h))).div_f64(2.0 * h);
    let d1 = central(h);
    let d2 = central(h / 2.0);
    ((Dd::new(4.0) * d2 - d1).div_f64(3.0)).to_f64()
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn random_pair<R: Rng + ?Sized>(d: usize, p: f64, rng: &mut R) -> DagPair {
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(rng);
    let perm = Permutation::from_order(order).unwrap();
    let um = UpperTri::from_fn(d, |_, _| rng.random_bool(p));
    let uv = UpperTri::from_fn(d, |_, _| rng.random_bool(p));
    DagPair::from_shared(&um, &uv, &perm).unwrap()
}

pub struct GradientInstance {
    pub x: Vec<f64>,
    pub pair: DagPair,
    pub hnm: HnmParams,
}

/// Random instance whose hidden units all sit at least `margin` away from
/// the leaky-ReLU kink (a difference quotient across the kink is not a
/// derivative).
pub fn gradient_instance<R: Rng + ?Sized>(rng: &mut R, margin: f64) -> GradientInstance {
    loop {
        let d = rng.random_range(2..=5);
        let layers = rng.random_range(1..=2);
        let hidden: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=6)).collect();
        let hnm = HnmParams::init(d, &hidden, rng).unwrap();
        let x: Vec<f64> = (0..d).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let pair = random_pair(d, 0.6, rng);
        let closest = (0..d)
            .map(|j| {
                let (mm, mv) = (mask_column(pair.mean(), j), mask_column(pair.variance(), j));
                let mean = DdNet::from_f64(hnm.mean_net(j).dims(), hnm.mean_net(j).as_slice());
                let logv = DdNet::from_f64(hnm.logv_net(j).dims(), hnm.logv_net(j).as_slice());
                dd_node_nll(j, &x, &mm, &mv, &mean, &logv).1
            })
            .fold(f64::INFINITY, f64::min);
        if closest > margin {
            return GradientInstance { x, pair, hnm };
        }
    }
}

/// Worst relative error between the analytic point gradient of the NLL
/// (network parameters and both masks) and the double-double difference
/// quotient. Also returns the number of coordinates checked.
pub fn nll_gradient_error(inst: &GradientInstance) -> (f64, usize) {
    const H: f64 = 1e-6;
    const FLOOR: f64 = 1e-12;
    let GradientInstance { x, pair, hnm } = inst;
    let d = hnm.d();
    let g = hnm::point_gradients(x, pair, hnm, Loss::Nll).unwrap();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for j in 0..d {
        let (mm, mv) = (mask_column(pair.mean(), j), mask_column(pair.variance(), j));
        let mean = DdNet::from_f64(hnm.mean_net(j).dims(), hnm.mean_net(j).as_slice());
        let logv = DdNet::from_f64(hnm.logv_net(j).dims(), hnm.logv_net(j).as_slice());
        for (which, analytic) in [(0, &g.mean[j]), (1, &g.logv[j])] {
            for (k, &a) in analytic.iter().enumerate() {
                let numeric = dd_derivative(
                    |t| {
                        let mut net = DdNet {
                            dims: if which == 0 { mean.dims.clone() } else { logv.dims.clone() },
                            params: if which == 0 { mean.params.clone() } else { logv.params.clone() },
                        };
                        net.params[k] = net.params[k] + t;
                        if which == 0 {
                            dd_node_nll(j, x, &mm, &mv, &net, &logv).0
                        } else {
                            dd_node_nll(j, x, &mm, &mv, &mean, &net).0
                        }
                    },
                    H,
                );
                worst = worst.max(rel_err(a, numeric, FLOOR));
                count += 1;
            }
        }
        for (which, analytic) in [(0, &g.mask_m), (1, &g.mask_v)] {
            for k in 0..d {
                let numeric = dd_derivative(
                    |t| {
                        let (mut a, mut b) = (mm.clone(), mv.clone());
                        if which == 0 {
                            a[k] = a[k] + t;
                        } else {
                            b[k] = b[k] + t;
                        }
                        dd_node_nll(j, x, &a, &b, &mean, &logv).0
                    },
                    H,
                );
                worst = worst.max(rel_err(analytic[k * d + j], numeric, FLOOR));
                count += 1;
            }
        }
    }
    (worst, count)
}

/// Max relative error of `grad_MSE = 2 v^2 grad_NLL` over the mean network
/// parameters of every node, for one observation.
pub fn scaled_identity_error(inst: &GradientInstance) -> f64 {
    let GradientInstance { x, pair, hnm } = inst;
    let nll = hnm::point_gradients(x, pair, hnm, Loss::Nll).unwrap();
    let mse = hnm::point_gradients(x, pair, hnm, Loss::Mse).unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..hnm.d() {
        let s = hnm::node_term(j, x, pair, hnm).unwrap().log_v;
        let v2 = (2.0 * s).exp();
        for (a, b) in mse.mean[j].iter().zip(&nll.mean[j]) {
            worst = worst.max(rel_err(*a, 2.0 * v2 * b, 1e-300));
        }
    }
    worst
}

// ---------------------------------------------------------------------
// Graph metric references.

fn state(a: &AdjMatrix, i: usize, j: usize) -> (bool, bool) {
    (a.has_edge(i, j), a.has_edge(j, i))
}

pub fn naive_shd(a: &AdjMatrix, b: &AdjMatrix) -> usize {
    let d = a.d();
    let mut n = 0;
    for i in 0..d {
        for j in i + 1..d {
            if state(a, i, j) != state(b, i, j) {
                n += 1;
            }
        }
    }
    n
}

pub fn naive_f1(est: &AdjMatrix, truth: &AdjMatrix) -> f64 {
    let d = est.d();
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for i in 0..d {
        for j in 0..d {
            match (est.has_edge(i, j), truth.has_edge(i, j)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
    }
    if tp + fp + fneg == 0.0 {
        return 1.0;
    }
    if tp == 0.0 {
        return 0.0;
    }
    let (p, r) = (tp / (tp + fp), tp / (tp + fneg));
    2.0 * p * r / (p + r)
}

/// Interventional distribution of `x_j` under `do(x_i)` in a linear
/// Gaussian SEM: (slope in x_i, variance).
fn do_distribution(b: &DMatrix<f64>, noise: &[f64], i: usize, j: usize) -> (f64, f64) {
    let d = b.nrows();
    let mut cut = b.clone();
    for k in 0..d {
        cut[(k, i)] = 0.0;
    }
    // x = (I - B^T)^{-1} e
    let m = (DMatrix::identity(d, d) - cut.transpose()).try_inverse().unwrap();
    let var = (0..d).filter(|&k| k != i).map(|k| m[(j, k)].powi(2) * noise[k]).sum();
    (m[(j, i)], var)
}

/// Distribution obtained by adjusting for `z` with observational
/// covariance `sigma`: integrate p(x_j | x_i, z) against p(z).
fn adjusted_distribution(sigma: &DMatrix<f64>, i: usize, j: usize, z: &[usize]) -> (f64, f64) {
    let w: Vec<usize> = std::iter::once(i).chain(z.iter().copied()).collect();
    let k = w.len();
    let sww = DMatrix::from_fn(k, k, |a, b| sigma[(w[a], w[b])]);
    let swj = DMatrix::from_fn(k, 1, |a, _| sigma[(w[a], j)]);
    let coef = sww.clone().try_inverse().unwrap() * &swj;
    let resid = sigma[(j, j)] - (swj.transpose() * &coef)[(0, 0)];
    let bz = coef.rows(1, k - 1).into_owned();
    let szz = sww.view((1, 1), (k - 1, k - 1)).into_owned();
    let spread = if k > 1 { (bz.transpose() * szz * &bz)[(0, 0)] } else { 0.0 };
    (coef[(0, 0)], resid.max(0.0) + spread)
}

/// Structural intervention distance computed semantically: draw generic
/// linear Gaussian parameters for `truth` and count ordered pairs whose
/// interventional distribution differs from the one obtained by adjusting
/// for the parents in `est`.
pub fn sid_by_intervention(est: &AdjMatrix, truth: &AdjMatrix, seed: u64) -> usize {
    let d = truth.d();
    let mut rng = substream(seed, Stream::Datagen);
    let b = DMatrix::from_fn(d, d, |k, l| {
        if truth.has_edge(k, l) {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(0.5..1.5)
        } else {
            0.0
        }
    });
    let noise: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
    let m = (DMatrix::identity(d, d) - b.transpose()).try_inverse().unwrap();
    let sigma = &m * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(noise.clone())) * m.transpose();
    let mut wrong = 0;
    for i in 0..d {
        let z: Vec<usize> = (0..d).filter(|&k| est.has_edge(k, i)).collect();
        for j in (0..d).filter(|&j| j != i) {
            let truth_do = do_distribution(&b, &noise, i, j);
            let adj = adjusted_distribution(&sigma, i, j, &z);
            if (truth_do.0 - adj.0).abs() > 1e-8 || (truth_do.1 - adj.1).abs() > 1e-8 {
                wrong += 1;
            }
        }
    }
    wrong
}

/// Labeled DAG counts from the inclusion-exclusion recurrence
/// a(n) = sum_k (-1)^(k+1) C(n,k) 2^(k(n-k)) a(n-k).
pub fn dag_count(n: usize) -> u64 {
    let mut a = vec![1i128; n + 1];
    for m in 1..=n {
        let mut total = 0i128;
        let mut binom = 1i128;
        for k in 1..=m {
            binom = binom * (m - k + 1) as i128 / k as i128;
            let sign = if k % 2 == 1 { 1 } else { -1 };
            total += sign * binom * (1i128 << (k * (m - k))) * a[m - k];
        }
        a[m] = total;
    }
    a[n] as u64
}

// ---------------------------------------------------------------------
// Projection reference.

/// Nearest feasible point by a shrinking dense grid (d <= 3). Each round
/// scans `steps^d` points around the incumbent and then zooms in by 8.
pub fn grid_projection(psi: &[f64], c: &OrderingConstraints) -> Vec<f64> {
    let d = psi.len();
    assert!(d <= 3);
    let feasible = |s: &[f64]| c.pairs().iter().all(|p| s[p.before] + p.margin <= s[p.after]);
    let dist = |s: &[f64]| s.iter().zip(psi).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let steps = 41i64;
    let mut center = psi.to_vec();
    let mut half = psi.iter().map(|v| v.abs()).fold(0.0, f64::max)
        + c.pairs().iter().map(|p| p.margin).sum::<f64>()
        + 1.0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..12 {
        let h = 2.0 * half / (steps - 1) as f64;
        let mut idx = vec![0i64; d];
        loop {
            let s: Vec<f64> = (0..d).map(|k| center[k] - half + h * idx[k] as f64).collect();
            if feasible(&s) {
                let v = dist(&s);
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, s));
                }
            }
            let mut k = 0;
            while k < d {
                idx[k] += 1;
                if idx[k] < steps {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == d {
                break;
            }
        }
        center = best.as_ref().expect("a feasible grid point").1.clone();
        half /= 8.0;
    }
    best.unwrap().1
}

/// Constraints consistent with a random order: each ordered pair of the
/// order is included with probability 1/2, margins in [0, 2).
pub fn random_constraints<R: Rng + ?Sized>(d: usize, rng: &mut R) -> OrderingConstraints {
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(rng);
    let mut pairs = Vec::new();
    for a in 0..d {
        for b in a + 1..d {
            if rng.random_bool(0.5) {
                pairs.push(Precedence {
                    before: order[a],
                    after: order[b],
                    margin: rng.random_range(0.0..2.0),
                });
            }
        }
    }
    OrderingConstraints::new(pairs)
}

pub fn random_variational<R: Rng + ?Sized>(d: usize, rng: &mut R) -> VariationalParams {
    let mut logits = || (0..d * d).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
    let (m, v) = (logits(), logits());
    let psi = (0..d).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    VariationalParams::from_logits(m, v, psi).unwrap()
}
