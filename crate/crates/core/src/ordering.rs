//! Pairwise node-ordering knowledge and the Euclidean projection of
//! permutation scores onto the orderings it allows.
//!
//! A constraint "i precedes j with margin c" reads `s_i + c <= s_j` on the
//! log-space scores that are perturbed and sorted when sampling a
//! permutation, so a smaller score means an earlier position.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::AdjMatrix;

pub const DEFAULT_MARGIN: f64 = 1.5;

/// Feasibility tolerance of [`project`].
pub const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precedence {
    pub before: usize,
    pub after: usize,
    pub margin: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrderingConstraints {
    pairs: Vec<Precedence>,
}

impl OrderingConstraints {
    pub fn new(pairs: Vec<Precedence>) -> Self {
        Self { pairs }
    }

    /// Pairs with the default margin.
    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self::new(
            pairs
                .iter()
                .map(|&(before, after)| Precedence {
                    before,
                    after,
                    margin: DEFAULT_MARGIN,
                })
                .collect(),
        )
    }

    pub fn pairs(&self) -> &[Precedence] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks index bounds, self-pairs, margins and acyclicity.
    pub fn validate(&self, d: usize) -> Result<()> {
        for p in &self.pairs {
            if p.before >= d || p.after >= d {
                return Err(Error::OutOfRange(format!(
                    "constraint {} < {} on {d} nodes",
                    p.before + 1,
                    p.after + 1
                )));
            }
            if p.before == p.after {
                return Err(Error::Infeasible(format!(
                    "node {} cannot precede itself",
                    p.before + 1
                )));
            }
            if !(p.margin > 0.0 && p.margin.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "margin {} must be positive",
                    p.margin
                )));
            }
        }
        let edges: Vec<(usize, usize)> = self.pairs.iter().map(|p| (p.before, p.after)).collect();
        let graph = AdjMatrix::from_edges(d, &edges)?;
        if !graph.is_acyclic() {
            return Err(Error::Infeasible("constraints form a cycle".into()));
        }
        Ok(())
    }

    pub fn is_satisfied(&self, scores: &[f64], tol: f64) -> bool {
        self.max_violation(scores) <= tol
    }

    /// Largest `s_i + c - s_j` over constraints, or 0 when all hold.
    pub fn max_violation(&self, scores: &[f64]) -> f64 {
        self.pairs
            .iter()
            .map(|p| scores[p.before] + p.margin - scores[p.after])
            .fold(0.0, f64::max)
    }

    /// Parses one `i < j [margin]` constraint per line. Nodes are given by
    /// name or by 1-based index; `#` starts a comment.
    pub fn parse(text: &str, names: &[String]) -> Result<Self> {
        let resolve = |tok: &str, line: usize| -> Result<usize> {
            if let Some(k) = names.iter().position(|n| n == tok) {
                return Ok(k);
            }
            match tok.parse::<usize>() {
                Ok(k) if k >= 1 && k <= names.len() => Ok(k - 1),
                _ => Err(Error::Parse {
                    line,
                    msg: format!("unknown node {tok:?}"),
                }),
            }
        };
        let mut pairs = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = body.split_whitespace().collect();
            if !(tokens.len() == 3 || tokens.len() == 4) || tokens[1] != "<" {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected `i < j [margin]`, found {body:?}"),
                });
            }
            let margin = match tokens.get(3) {
                Some(m) => m.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad margin {m:?}"),
                })?,
                None => DEFAULT_MARGIN,
            };
            pairs.push(Precedence {
                before: resolve(tokens[0], line)?,
                after: resolve(tokens[2], line)?,
                margin,
            });
        }
        let out = Self { pairs };
        out.validate(names.len())?;
        Ok(out)
    }

    pub fn to_text(&self, names: &[String]) -> String {
        self.pairs
            .iter()
            .map(|p| format!("{} < {} {}\n", names[p.before], names[p.after], p.margin))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionResult {
    pub psi: Vec<f64>,
    /// Indices of the constraints that hold with equality at the solution.
    pub active_set: Vec<usize>,
    pub iterations: usize,
}

/// Union-find used to keep the working set's constraint rows linearly
/// independent (rows `e_i - e_j` are independent iff they form a forest).
struct Forest(Vec<usize>);

impl Forest {
    fn new(d: usize) -> Self {
        Self((0..d).collect())
    }

    fn root(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }

    fn join(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.root(a), self.root(b));
        if ra == rb {
            return false;
        }
        self.0[ra] = rb;
        true
    }
}

/// Euclidean projection of `psi` onto `{s : s_i + c <= s_j}` by a primal
/// active-set method started from a feasible point. Feasible input is
/// returned unchanged.
pub fn project(psi: &[f64], c: &OrderingConstraints) -> Result<ProjectionResult> {
    let d = psi.len();
    c.validate(d)?;
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scores to project".into()));
    }
    let pairs = c.pairs();
    if c.is_satisfied(psi, 0.0) {
        return Ok(ProjectionResult {
            psi: psi.to_vec(),
            active_set: tight(psi, pairs),
            iterations: 0,
        });
    }

    // Feasible start: push every node past its constrained predecessors in
    // topological order.
    let edges: Vec<(usize, usize)> = pairs.iter().map(|p| (p.before, p.after)).collect();
    let order = AdjMatrix::from_edges(d, &edges)?.topological_order()?.order();
    let mut x = psi.to_vec();
    for &j in &order {
        for p in pairs.iter().filter(|p| p.after == j) {
            x[j] = x[j].max(x[p.before] + p.margin);
        }
    }

    let mut working: Vec<usize> = Vec::new();
    let mut forest = Forest::new(d);
    for (k, p) in pairs.iter().enumerate() {
        if (x[p.before] + p.margin - x[p.after]).abs() <= 1e-12 && forest.join(p.before, p.after) {
            working.push(k);
        }
    }

    let max_iter = 10 * (pairs.len() + d) + 100;
    for iter in 1..=max_iter {
        let (target, mu) = equality_solution(psi, pairs, &working);
        let step: Vec<f64> = target.iter().zip(&x).map(|(t, xi)| t - xi).collect();
        let step_norm = step.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if step_norm <= 1e-13 * (1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            // Stationary on the working set; drop the most negative multiplier.
            let worst = mu
                .iter()
                .enumerate()
                .filter(|(_, &m)| m < -1e-12)
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k);
            match worst {
                None => {
                    x = target;
                    if c.max_violation(&x) > FEASIBILITY_TOL {
                        return Err(Error::NonConvergence { iterations: iter });
                    }
                    return Ok(ProjectionResult {
                        active_set: tight(&x, pairs),
                        psi: x,
                        iterations: iter,
                    });
                }
                Some(k) => {
                    working.remove(k);
                }
            }
            continue;
        }
        // Longest feasible step along `step`. Rows dependent on the working
        // set have zero slope up to roundoff and are skipped.
        let mut forest = Forest::new(d);
        for &k in &working {
            forest.join(pairs[k].before, pairs[k].after);
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for (k, p) in pairs.iter().enumerate() {
            if working.contains(&k) || forest.root(p.before) == forest.root(p.after) {
                continue;
            }
            let slope = step[p.before] - step[p.after];
            if slope > 0.0 {
                let slack = x[p.after] - x[p.before] - p.margin;
                let a = (slack.max(0.0)) / slope;
                if a < alpha {
                    alpha = a;
                    blocking = Some(k);
                }
            }
        }
        for (xi, s) in x.iter_mut().zip(&step) {
            *xi += alpha * s;
        }
        if let Some(k) = blocking {
            working.push(k);
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
    })
}

/// Minimiser of `|s - psi|^2` with the working-set constraints held as
/// equalities, and the multipliers of those constraints.
fn equality_solution(psi: &[f64], pairs: &[Precedence], working: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let m = working.len();
    if m == 0 {
        return (psi.to_vec(), Vec::new());
    }
    // Rows a_k = e_before - e_after, right-hand side b_k = -margin.
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for (r, &kr) in working.iter().enumerate() {
        let pr = &pairs[kr];
        rhs[r] = psi[pr.before] - psi[pr.after] + pr.margin;
        for (s, &ks) in working.iter().enumerate() {
            let ps = &pairs[ks];
            gram[(r, s)] = coef(ps, pr.before) - coef(ps, pr.after);
        }
    }
    let mu = gram
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(|| gram.lu().solve(&rhs).unwrap_or(DVector::zeros(m)));
    let mut x = psi.to_vec();
    for (r, &k) in working.iter().enumerate() {
        x[pairs[k].before] -= mu[r];
        x[pairs[k].after] += mu[r];
    }
    (x, mu.iter().copied().collect())
}

fn coef(p: &Precedence, node: usize) -> f64 {
    if node == p.before {
        1.0
    } else if node == p.after {
        -1.0
    } else {
        0.0
    }
}

fn tight(x: &[f64], pairs: &[Precedence]) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| (x[p.before] + p.margin - x[p.after]).abs() <= FEASIBILITY_TOL)
        .map(|(k, _)| k)
        .collect()
}

/// Nodes in order of ascending score (ties by index).
pub fn noise_free_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}
