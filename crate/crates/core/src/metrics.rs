//! Structure-learning metrics, Monte Carlo posterior summaries and exact
//! posterior enumeration for small graphs.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::graph::{check_dims, enumerate_dags, AdjMatrix, DagPair, GraphSlot, MAX_ENUMERATION_NODES};
use crate::ingest::Dataset;

/// Number of node pairs whose connection (absent, forward or backward)
/// differs. A reversal counts once.
pub fn shd(a: &AdjMatrix, b: &AdjMatrix) -> Result<usize> {
    check_dims(a.d(), b.d())?;
    let d = a.d();
    let mut count = 0;
    for i in 0..d {
        for j in (i + 1)..d {
            if (a.has_edge(i, j), a.has_edge(j, i)) != (b.has_edge(i, j), b.has_edge(j, i)) {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// SHD divided by the number of node pairs.
pub fn shd_rate(a: &AdjMatrix, b: &AdjMatrix) -> Result<f64> {
    let d = a.d();
    if d < 2 {
        return Err(Error::InvalidParameter("SHD rate needs at least 2 nodes".into()));
    }
    Ok(shd(a, b)? as f64 / (d * (d - 1) / 2) as f64)
}

/// Directed-edge F1 of `est` against `truth`. Both empty gives 1; exactly
/// one empty gives 0.
pub fn f1(est: &AdjMatrix, truth: &AdjMatrix) -> Result<f64> {
    check_dims(est.d(), truth.d())?;
    let (ne, nt) = (est.n_edges(), truth.n_edges());
    if ne == 0 && nt == 0 {
        return Ok(1.0);
    }
    let tp = est.edges().filter(|&(i, j)| truth.has_edge(i, j)).count();
    Ok(2.0 * tp as f64 / (ne + nt) as f64)
}

/// Whether `z` d-separates `x` and `y` in `g` (reachability with the
/// active-trail rules).
pub fn d_separated(g: &AdjMatrix, x: usize, y: usize, z: &[bool]) -> bool {
    let d = g.d();
    // Ancestors of the conditioning set, including itself.
    let mut anc = z.to_vec();
    let mut stack: Vec<usize> = (0..d).filter(|&v| z[v]).collect();
    while let Some(v) = stack.pop() {
        for p in g.parents(v) {
            if !anc[p] {
                anc[p] = true;
                stack.push(p);
            }
        }
    }
    // States: (node, arrived from a child = going up).
    let mut seen = vec![[false; 2]; d];
    let mut queue = vec![(x, true)];
    while let Some((v, up)) = queue.pop() {
        if seen[v][up as usize] {
            continue;
        }
        seen[v][up as usize] = true;
        if v == y && !z[v] {
            return false;
        }
        if up {
            if !z[v] {
                queue.extend(g.parents(v).map(|p| (p, true)));
                queue.extend(g.children(v).map(|c| (c, false)));
            }
        } else {
            if !z[v] {
                queue.extend(g.children(v).map(|c| (c, false)));
            }
            if anc[v] {
                queue.extend(g.parents(v).map(|p| (p, true)));
            }
        }
    }
    true
}

/// Structural intervention distance: ordered pairs `(i, j)` whose
/// interventional distribution `p(x_j | do(x_i))` is misstated when
/// adjusting for the parents of `i` in `est`, judged against `truth`.
pub fn sid(est: &AdjMatrix, truth: &AdjMatrix) -> Result<usize> {
    check_dims(est.d(), truth.d())?;
    if !est.is_acyclic() || !truth.is_acyclic() {
        return Err(Error::Cycle);
    }
    let d = truth.d();
    let desc: Vec<Vec<bool>> = (0..d).map(|v| truth.descendants(v)).collect();
    let mut wrong = 0;
    for i in 0..d {
        let mut z = vec![false; d];
        for p in est.parents(i) {
            z[p] = true;
        }
        for j in (0..d).filter(|&j| j != i) {
            if z[j] {
                if desc[i][j] {
                    wrong += 1;
                }
                continue;
            }
            if !valid_adjustment(truth, &desc, i, j, &z) {
                wrong += 1;
            }
        }
    }
    Ok(wrong)
}

fn valid_adjustment(g: &AdjMatrix, desc: &[Vec<bool>], i: usize, j: usize, z: &[bool]) -> bool {
    let d = g.d();
    // Nodes other than i on a directed path from i to j.
    let on_path: Vec<usize> = (0..d)
        .filter(|&w| w != i && desc[i][w] && (w == j || desc[w][j]))
        .collect();
    for &w in &on_path {
        if (0..d).any(|v| z[v] && (v == w || desc[w][v])) {
            return false;
        }
    }
    let mut cut = g.clone();
    for &c in on_path.iter().filter(|&&c| g.has_edge(i, c)) {
        cut.set_edge(i, c, false);
    }
    d_separated(&cut, i, j, z)
}

/// A mean with its Monte Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        if n == 0 {
            return Err(Error::InvalidData("no samples".into()));
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { value: mean, se, n })
    }
}

/// Hard graph pairs drawn from a fitted posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    pub seed: u64,
    pub samples: Vec<DagPair>,
}

impl PosteriorSamples {
    pub fn new(names: Vec<String>, seed: u64, samples: Vec<DagPair>) -> Result<Self> {
        let d = names.len();
        if let Some(s) = samples.iter().find(|s| s.d() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: s.d(),
            });
        }
        Ok(Self { names, seed, samples })
    }

    pub fn d(&self) -> usize {
        self.names.len()
    }

    pub fn n_mc(&self) -> usize {
        self.samples.len()
    }

    pub fn slot(&self, slot: GraphSlot) -> impl Iterator<Item = AdjMatrix> + '_ {
        self.samples.iter().map(move |s| s.slot(slot))
    }

    /// Text form: `# nodes:` and `# seed:` headers, then one line per
    /// sample holding the mean and variance adjacency bitstrings.
    pub fn to_text(&self) -> String {
        let mut out = format!("# nodes: {}\n# seed: {}\n", self.names.join(","), self.seed);
        for s in &self.samples {
            let _ = writeln!(out, "{} {}", s.mean().to_bitstring(), s.variance().to_bitstring());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Option<Vec<String>> = None;
        let mut seed = None;
        let mut samples = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let body = raw.trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("nodes:") {
                    names = Some(v.split(',').map(|s| s.trim().to_string()).collect());
                } else if let Some(v) = rest.strip_prefix("seed:") {
                    seed = Some(v.trim().parse::<u64>().map_err(|_| Error::Parse {
                        line,
                        msg: format!("bad seed {:?}", v.trim()),
                    })?);
                }
                continue;
            }
            let d = names
                .as_ref()
                .ok_or(Error::Parse {
                    line,
                    msg: "sample before `# nodes:` header".into(),
                })?
                .len();
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(Error::Parse {
                    line,
                    msg: "expected mean and variance bitstrings".into(),
                });
            }
            let parse = |s: &str| {
                AdjMatrix::from_bitstring(d, s).map_err(|e| Error::Parse {
                    line,
                    msg: e.to_string(),
                })
            };
            let pair = DagPair::new(parse(fields[0])?, parse(fields[1])?).map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
            samples.push(pair);
        }
        let names = names.ok_or(Error::Parse {
            line: 1,
            msg: "missing `# nodes:` header".into(),
        })?;
        Self::new(names, seed.unwrap_or(0), samples)
    }
}

/// Expected SHD of the selected slot against `truth`, with standard error.
pub fn e_shd(samples: &PosteriorSamples, truth: &AdjMatrix, slot: GraphSlot) -> Result<Estimate> {
    check_dims(samples.d(), truth.d())?;
    let values: Result<Vec<f64>> = samples.slot(slot).map(|g| shd(&g, truth).map(|v| v as f64)).collect();
    Estimate::from_values(values?)
}

/// A structural statement about one graph slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Feature {
    Edge { from: usize, to: usize, slot: GraphSlot },
    Path { from: usize, to: usize, slot: GraphSlot },
    Subgraph { edges: Vec<(usize, usize)>, slot: GraphSlot },
}

impl Feature {
    pub fn slot(&self) -> GraphSlot {
        match self {
            Feature::Edge { slot, .. } | Feature::Path { slot, .. } | Feature::Subgraph { slot, .. } => *slot,
        }
    }

    fn nodes(&self) -> Vec<usize> {
        match self {
            Feature::Edge { from, to, .. } | Feature::Path { from, to, .. } => vec![*from, *to],
            Feature::Subgraph { edges, .. } => edges.iter().flat_map(|&(a, b)| [a, b]).collect(),
        }
    }

    pub fn holds(&self, g: &AdjMatrix) -> bool {
        match self {
            Feature::Edge { from, to, .. } => g.has_edge(*from, *to),
            Feature::Path { from, to, .. } => g.has_path(*from, *to),
            Feature::Subgraph { edges, .. } => edges.iter().all(|&(a, b)| g.has_edge(a, b)),
        }
    }

    /// Parses `<edge|path|subgraph> <mean|variance|union> A->B[,C->D...]`
    /// with node names.
    pub fn parse(expr: &str, names: &[String]) -> Result<Self> {
        let bad = |msg: String| Error::Parse { line: 1, msg };
        let mut parts = expr.split_whitespace();
        let (kind, slot, rest) = match (parts.next(), parts.next()) {
            (Some(k), Some(s)) => (k, s, parts.collect::<Vec<_>>().join("")),
            _ => return Err(bad(format!("malformed feature expression {expr:?}"))),
        };
        let slot = GraphSlot::parse(slot).map_err(|_| bad(format!("unknown graph {slot:?}")))?;
        let node = |s: &str| -> Result<usize> {
            names
                .iter()
                .position(|n| n == s.trim())
                .ok_or_else(|| bad(format!("unknown node {:?}", s.trim())))
        };
        let mut edges = Vec::new();
        for item in rest.split(',').filter(|s| !s.is_empty()) {
            let (a, b) = item
                .split_once("->")
                .ok_or_else(|| bad(format!("expected A->B, found {item:?}")))?;
            edges.push((node(a)?, node(b)?));
        }
        match (kind, edges.as_slice()) {
            ("edge", &[(from, to)]) => Ok(Feature::Edge { from, to, slot }),
            ("path", &[(from, to)]) => Ok(Feature::Path { from, to, slot }),
            ("subgraph", e) if !e.is_empty() => Ok(Feature::Subgraph { edges: e.to_vec(), slot }),
            _ => Err(bad(format!("malformed feature expression {expr:?}"))),
        }
    }
}

/// Monte Carlo probability that `feature` holds, with standard error.
pub fn feature_probability(samples: &PosteriorSamples, feature: &Feature) -> Result<Estimate> {
    if let Some(&k) = feature.nodes().iter().find(|&&k| k >= samples.d()) {
        return Err(Error::OutOfRange(format!("node {k} with d = {}", samples.d())));
    }
    let slot = feature.slot();
    Estimate::from_values(samples.slot(slot).map(|g| f64::from(u8::from(feature.holds(&g)))))
}

/// Prior hyperparameters of the conjugate node score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScorePrior {
    pub a0: f64,
    pub b0: f64,
    /// Prior precision of the regression weights (in units of the noise
    /// variance).
    pub g: f64,
}

impl Default for ScorePrior {
    fn default() -> Self {
        Self {
            a0: 1.0,
            b0: 1.0,
            g: 1.0,
        }
    }
}

/// Normalized posterior over every DAG on `d <= 4` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactPosterior {
    pub graphs: Vec<AdjMatrix>,
    pub log_weights: Vec<f64>,
    index: HashMap<AdjMatrix, usize>,
}

impl ExactPosterior {
    pub fn from_log_scores(graphs: Vec<AdjMatrix>, log_scores: Vec<f64>) -> Result<Self> {
        if graphs.len() != log_scores.len() || graphs.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: graphs.len(),
                found: log_scores.len(),
            });
        }
        let max = log_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + log_scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let log_weights = log_scores.iter().map(|s| s - lse).collect();
        let index = graphs.iter().enumerate().map(|(k, g)| (g.clone(), k)).collect();
        Ok(Self {
            graphs,
            log_weights,
            index,
        })
    }

    pub fn d(&self) -> usize {
        self.graphs[0].d()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn index_of(&self, g: &AdjMatrix) -> Option<usize> {
        self.index.get(g).copied()
    }
}

/// Log marginal likelihood of regressing column `j` on `parents` under a
/// normal-inverse-gamma prior, columns centered, no intercept.
pub fn node_log_marginal(data: &Dataset, j: usize, parents: &[usize], prior: ScorePrior) -> f64 {
    let n = data.n();
    let center = |k: usize| -> Vec<f64> {
        let col = data.column(k);
        let mean = col.iter().sum::<f64>() / n as f64;
        col.iter().map(|v| v - mean).collect()
    };
    let y = DVector::from_vec(center(j));
    let p = parents.len();
    let yty = y.dot(&y);
    let (quad, logdet_ratio) = if p == 0 {
        (0.0, 0.0)
    } else {
        let cols: Vec<f64> = parents.iter().flat_map(|&k| center(k)).collect();
        let x = DMatrix::from_column_slice(n, p, &cols);
        let precision = x.transpose() * &x + DMatrix::identity(p, p) * prior.g;
        let xty = x.transpose() * &y;
        let chol = precision.cholesky().expect("prior precision keeps the system positive definite");
        let sol = chol.solve(&xty);
        let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        (xty.dot(&sol), p as f64 * prior.g.ln() - logdet)
    };
    let a_n = prior.a0 + n as f64 / 2.0;
    let b_n = prior.b0 + 0.5 * (yty - quad);
    0.5 * logdet_ratio + prior.a0 * prior.b0.ln() - a_n * b_n.ln() + ln_gamma(a_n) - ln_gamma(prior.a0)
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Normal-Wishart hyperparameters of the BGe score: prior mean zero,
/// precision scale `alpha_mu`, `alpha_w` degrees of freedom (defaults to
/// `d + 2`) and scale matrix `t I` with `t = alpha_mu (alpha_w - d - 1) /
/// (alpha_mu + 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BgePrior {
    pub alpha_mu: f64,
    pub alpha_w: Option<f64>,
}

impl Default for BgePrior {
    fn default() -> Self {
        Self {
            alpha_mu: 1.0,
            alpha_w: None,
        }
    }
}

/// Node score used for exact enumeration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Score {
    /// Score-equivalent: Markov-equivalent graphs get equal weight.
    Bge(BgePrior),
    Regression(ScorePrior),
}

impl Default for Score {
    fn default() -> Self {
        Score::Bge(BgePrior::default())
    }
}

fn ln_multigamma(l: usize, a: f64) -> f64 {
    let pi = std::f64::consts::PI;
    0.25 * (l * l.saturating_sub(1)) as f64 * pi.ln() + (0..l).map(|k| ln_gamma(a - 0.5 * k as f64)).sum::<f64>()
}

/// BGe log marginal likelihood of the columns `subset` alone.
fn bge_subset(data: &Dataset, subset: &[usize], prior: BgePrior) -> f64 {
    let l = subset.len();
    if l == 0 {
        return 0.0;
    }
    let (n, d) = (data.n() as f64, data.d() as f64);
    let alpha_mu = prior.alpha_mu;
    let alpha_w = prior.alpha_w.unwrap_or(d + 2.0);
    let t = alpha_mu * (alpha_w - d - 1.0) / (alpha_mu + 1.0);
    let means: Vec<f64> = subset
        .iter()
        .map(|&k| data.column(k).iter().sum::<f64>() / n)
        .collect();
    let mut r = DMatrix::<f64>::identity(l, l) * t;
    for row in data.rows() {
        for a in 0..l {
            let da = row[subset[a]] - means[a];
            for b in 0..l {
                r[(a, b)] += da * (row[subset[b]] - means[b]);
            }
        }
    }
    let shrink = n * alpha_mu / (n + alpha_mu);
    for a in 0..l {
        for b in 0..l {
            r[(a, b)] += shrink * means[a] * means[b];
        }
    }
    let chol = r.cholesky().expect("scale matrix keeps the system positive definite");
    let logdet_r: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let lf = l as f64;
    let a_post = 0.5 * (n + alpha_w - d + lf);
    let a_prior = 0.5 * (alpha_w - d + lf);
    -0.5 * n * lf * std::f64::consts::PI.ln() + 0.5 * lf * (alpha_mu / (n + alpha_mu)).ln()
        + ln_multigamma(l, a_post)
        - ln_multigamma(l, a_prior)
        + a_prior * lf * t.ln()
        - a_post * logdet_r
}

/// BGe local score of column `j` given `parents`.
pub fn bge_log_marginal(data: &Dataset, j: usize, parents: &[usize], prior: BgePrior) -> f64 {
    let mut family = parents.to_vec();
    family.push(j);
    bge_subset(data, &family, prior) - bge_subset(data, parents, prior)
}

pub fn node_score(data: &Dataset, j: usize, parents: &[usize], score: Score) -> f64 {
    match score {
        Score::Bge(p) => bge_log_marginal(data, j, parents, p),
        Score::Regression(p) => node_log_marginal(data, j, parents, p),
    }
}

/// Exact posterior under a uniform graph prior and the BGe score.
pub fn exact_posterior(data: &Dataset) -> Result<ExactPosterior> {
    exact_posterior_with(data, Score::default())
}

pub fn exact_posterior_with(data: &Dataset, score: Score) -> Result<ExactPosterior> {
    let d = data.d();
    if d > MAX_ENUMERATION_NODES {
        return Err(Error::OutOfRange(format!(
            "exact posterior supports at most {MAX_ENUMERATION_NODES} nodes, got {d}"
        )));
    }
    let mut cache: HashMap<(usize, Vec<usize>), f64> = HashMap::new();
    let graphs = enumerate_dags(d)?;
    let mut scores = Vec::with_capacity(graphs.len());
    for g in &graphs {
        let mut total = 0.0;
        for j in 0..d {
            let parents: Vec<usize> = g.parents(j).collect();
            total += *cache
                .entry((j, parents.clone()))
                .or_insert_with(|| node_score(data, j, &parents, score));
        }
        scores.push(total);
    }
    ExactPosterior::from_log_scores(graphs, scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Divergence {
    pub tv: f64,
    pub kl: f64,
}

/// Distances between the empirical distribution of the union graphs of
/// `samples` and `exact`. TV uses raw frequencies; KL(exact || empirical)
/// adds `1 / (10 n_mc)` to every frequency and renormalizes first.
pub fn posterior_divergence(samples: &PosteriorSamples, exact: &ExactPosterior) -> Result<Divergence> {
    check_dims(samples.d(), exact.d())?;
    let k = exact.graphs.len();
    let n = samples.n_mc();
    if n == 0 {
        return Err(Error::InvalidData("no samples".into()));
    }
    let mut counts = vec![0usize; k];
    for g in samples.slot(GraphSlot::Union) {
        let idx = exact
            .index_of(&g)
            .ok_or_else(|| Error::InvalidData("sampled graph is not a DAG".into()))?;
        counts[idx] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(divergence_from_frequencies(&freq, &exact.weights(), n))
}

pub fn divergence_from_frequencies(freq: &[f64], exact: &[f64], n_mc: usize) -> Divergence {
    let eps = 1.0 / (10.0 * n_mc as f64);
    let norm = 1.0 + eps * freq.len() as f64;
    let tv = 0.5 * freq.iter().zip(exact).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let kl = exact
        .iter()
        .zip(freq)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / ((q + eps) / norm)).ln())
        .sum::<f64>()
        .max(0.0);
    Divergence { tv, kl }
}
