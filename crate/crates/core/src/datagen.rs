//! Seeded simulators for the synthetic dataset families: random graph
//! pairs, structural equations and noise laws.

use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{enumerate_dags, DagPair, Permutation, UpperTri, MAX_ENUMERATION_NODES};
use crate::ingest::{default_names, Dataset};
use crate::rng::{substream, Stream};

/// Hidden width of the generating networks.
pub const GEN_HIDDEN: usize = 100;

/// Output-weight multiplier of the log-scale networks. With unit output
/// weights the log-scale of a node spans tens of nats and the simulated
/// values overflow or collapse.
pub const LOG_SCALE_OUT: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphModel {
    /// Erdos-Renyi: independent slots.
    Er,
    /// Scale-free: preferential attachment.
    Sf,
    /// Uniform over labeled DAGs (small `d`, single-graph families only).
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScmFamily {
    MeanVarianceHnm,
    LinearGaussianAnm,
    NonlinearAnm,
    NonlinearHnm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    /// Location 0, scale 1 (variance 2).
    Laplace,
    /// Three degrees of freedom (variance 3).
    StudentT,
}

impl fmt::Display for ScmFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScmFamily::MeanVarianceHnm => "mean_variance_hnm",
            ScmFamily::LinearGaussianAnm => "linear_gaussian_anm",
            ScmFamily::NonlinearAnm => "nonlinear_anm",
            ScmFamily::NonlinearHnm => "nonlinear_hnm",
        })
    }
}

fn default_graph() -> GraphModel {
    GraphModel::Er
}

fn default_edges() -> f64 {
    1.0
}

fn default_noise() -> NoiseFamily {
    NoiseFamily::Gaussian
}

/// What to simulate. Serialized as flat TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub d: usize,
    pub n: usize,
    #[serde(default = "default_graph")]
    pub graph: GraphModel,
    /// Expected edges per node (ER) or edges added per new node (SF).
    #[serde(default = "default_edges")]
    pub edges_per_node: f64,
    pub family: ScmFamily,
    #[serde(default = "default_noise")]
    pub noise: NoiseFamily,
    pub seed: u64,
}

impl GenSpec {
    pub fn new(d: usize, n: usize, family: ScmFamily, seed: u64) -> Self {
        Self {
            d,
            n,
            graph: GraphModel::Er,
            edges_per_node: 1.0,
            family,
            noise: NoiseFamily::Gaussian,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidParameter(format!("d = {} but at least 2 nodes are required", self.d)));
        }
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        if !(self.edges_per_node >= 0.0 && self.edges_per_node.is_finite()) {
            return Err(Error::InvalidParameter("edges_per_node must be nonnegative".into()));
        }
        if self.graph == GraphModel::Er && self.er_slot_probability() > 1.0 {
            return Err(Error::InvalidParameter(format!(
                "{} expected edges per node exceed the {} slots of a {}-node DAG",
                self.edges_per_node,
                self.d * (self.d - 1) / 2,
                self.d
            )));
        }
        if self.graph == GraphModel::Uniform {
            if self.d > MAX_ENUMERATION_NODES {
                return Err(Error::InvalidParameter(format!(
                    "uniform DAG sampling supports at most {MAX_ENUMERATION_NODES} nodes, got {}",
                    self.d
                )));
            }
            if self.has_distinct_graphs() {
                return Err(Error::InvalidParameter(
                    "uniform DAG sampling draws a single graph; use er or sf for mean_variance_hnm".into(),
                ));
            }
        }
        if self.noise != NoiseFamily::Gaussian && self.family != ScmFamily::NonlinearHnm {
            return Err(Error::InvalidParameter(
                "non-Gaussian noise is only defined for the nonlinear_hnm family".into(),
            ));
        }
        Ok(())
    }

    /// Probability of each upper-triangular slot so that the expected edge
    /// count is `edges_per_node * d`.
    pub fn er_slot_probability(&self) -> f64 {
        2.0 * self.edges_per_node / (self.d as f64 - 1.0)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: GenSpec = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Two distinct graphs only for the mean-variance family.
    pub fn has_distinct_graphs(&self) -> bool {
        self.family == ScmFamily::MeanVarianceHnm
    }
}

pub(crate) fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn sample_upper<R: Rng + ?Sized>(spec: &GenSpec, rng: &mut R) -> UpperTri {
    let d = spec.d;
    match spec.graph {
        GraphModel::Er => {
            let p = spec.er_slot_probability().clamp(0.0, 1.0);
            let mut entries = Vec::new();
            for k in 0..d {
                for l in (k + 1)..d {
                    if rng.random_bool(p) {
                        entries.push((k, l));
                    }
                }
            }
            UpperTri::from_entries(d, &entries).expect("upper-triangular by construction")
        }
        GraphModel::Sf => {
            // Node t links from up to m earlier nodes, drawn without
            // replacement with probability proportional to degree + 1.
            let m = spec.edges_per_node.round() as usize;
            let mut degree = vec![0usize; d];
            let mut entries = Vec::new();
            for t in 1..d {
                let mut chosen: Vec<usize> = Vec::new();
                while chosen.len() < m.min(t) {
                    let candidates: Vec<usize> = (0..t).filter(|s| !chosen.contains(s)).collect();
                    let weights = candidates.iter().map(|&s| degree[s] + 1);
                    let pick = WeightedIndex::new(weights).expect("positive weights").sample(rng);
                    chosen.push(candidates[pick]);
                }
                for &s in &chosen {
                    degree[s] += 1;
                    degree[t] += 1;
                    entries.push((s, t));
                }
            }
            UpperTri::from_entries(d, &entries).expect("upper-triangular by construction")
        }
        GraphModel::Uniform => unreachable!("uniform graphs are drawn whole"),
    }
}

fn random_permutation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Permutation {
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(rng);
    Permutation::from_order(order).expect("shuffled indices form a permutation")
}

/// Samples the ground-truth graphs: two independent upper-triangular
/// graphs (one for single-graph families) under one shared random
/// permutation.
pub fn sample_graph_pair<R: Rng + ?Sized>(spec: &GenSpec, rng: &mut R) -> Result<DagPair> {
    spec.validate()?;
    if spec.graph == GraphModel::Uniform {
        let all = enumerate_dags(spec.d)?;
        let a = all[rng.random_range(0..all.len())].clone();
        return DagPair::identical(a);
    }
    let u_mean = sample_upper(spec, rng);
    let u_var = if spec.has_distinct_graphs() {
        sample_upper(spec, rng)
    } else {
        u_mean.clone()
    };
    let perm = random_permutation(spec.d, rng);
    DagPair::from_shared(&u_mean, &u_var, &perm)
}

/// One-hidden-layer sigmoid network over a node's parent values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenMlp {
    /// `GEN_HIDDEN x p`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl GenMlp {
    /// Standard normal weights and biases, except that the output weights
    /// are multiplied by `out_scale`.
    pub fn random<R: Rng + ?Sized>(p: usize, out_scale: f64, rng: &mut R) -> Self {
        let mut normal = |scale: f64| -> f64 { scale * rng.sample::<f64, _>(StandardNormal) };
        let w1 = (0..GEN_HIDDEN * p).map(|_| normal(1.0)).collect();
        let b1 = (0..GEN_HIDDEN).map(|_| normal(1.0)).collect();
        let w2 = (0..GEN_HIDDEN).map(|_| normal(out_scale)).collect();
        let b2 = normal(1.0);
        Self { w1, b1, w2, b2 }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let p = x.len();
        let mut out = self.b2;
        for (h, (&b, &w)) in self.b1.iter().zip(&self.w2).enumerate() {
            let mut z = b;
            for (wi, xi) in self.w1[h * p..(h + 1) * p].iter().zip(x) {
                z += wi * xi;
            }
            out += w / (1.0 + (-z).exp());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFn {
    Linear(Vec<f64>),
    Mlp(GenMlp),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleFn {
    /// Constant noise standard deviation.
    Constant(f64),
    /// `exp(net(parents))`.
    ExpMlp(GenMlp),
}

/// Structural equation of one node: `x = mean(pa_m) + scale(pa_v) * e`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mechanism {
    pub mean_parents: Vec<usize>,
    pub var_parents: Vec<usize>,
    pub mean: MeanFn,
    pub scale: ScaleFn,
}

impl Mechanism {
    pub fn mean_at(&self, row: &[f64]) -> f64 {
        let pa: Vec<f64> = self.mean_parents.iter().map(|&k| row[k]).collect();
        match &self.mean {
            MeanFn::Linear(w) => w.iter().zip(&pa).map(|(a, b)| a * b).sum(),
            MeanFn::Mlp(net) => net.eval(&pa),
        }
    }

    pub fn scale_at(&self, row: &[f64]) -> f64 {
        match &self.scale {
            ScaleFn::Constant(s) => *s,
            ScaleFn::ExpMlp(net) => {
                let pa: Vec<f64> = self.var_parents.iter().map(|&k| row[k]).collect();
                net.eval(&pa).exp()
            }
        }
    }

    /// Value of the node given the other coordinates of `row` and the
    /// noise draw `e`.
    pub fn value(&self, row: &[f64], e: f64) -> f64 {
        self.mean_at(row) + self.scale_at(row) * e
    }
}

#[derive(Clone, Debug)]
pub struct GenOutput {
    pub spec: GenSpec,
    pub data: Dataset,
    pub truth: DagPair,
    pub mechanisms: Vec<Mechanism>,
    /// Noise draws, `n x d` row-major.
    pub noise: Vec<f64>,
}

pub fn sample_noise<R: Rng + ?Sized>(family: NoiseFamily, rng: &mut R) -> f64 {
    match family {
        NoiseFamily::Gaussian => rng.sample(StandardNormal),
        NoiseFamily::Laplace => {
            // Inverse CDF on u in (-1/2, 1/2).
            let u: f64 = rng.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        }
        NoiseFamily::StudentT => StudentT::new(3.0).expect("valid degrees of freedom").sample(rng),
    }
}

fn make_mechanisms<R: Rng + ?Sized>(spec: &GenSpec, truth: &DagPair, rng: &mut R) -> Vec<Mechanism> {
    let d = spec.d;
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    (0..d)
        .map(|j| {
            let mean_parents: Vec<usize> = truth.mean().parents(j).collect();
            let var_parents: Vec<usize> = truth.variance().parents(j).collect();
            let (mean, scale) = match spec.family {
                ScmFamily::LinearGaussianAnm => {
                    let w = mean_parents
                        .iter()
                        .map(|_| {
                            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                            sign * (0.5 + 0.8 * unit.sample(rng))
                        })
                        .collect();
                    (MeanFn::Linear(w), ScaleFn::Constant(1.0))
                }
                ScmFamily::NonlinearAnm => {
                    let m = GenMlp::random(mean_parents.len(), 1.0, rng);
                    let var: f64 = 0.5 + 1.5 * unit.sample(rng);
                    (MeanFn::Mlp(m), ScaleFn::Constant(var.sqrt()))
                }
                ScmFamily::MeanVarianceHnm | ScmFamily::NonlinearHnm => {
                    let m = GenMlp::random(mean_parents.len(), 1.0, rng);
                    let v = GenMlp::random(var_parents.len(), LOG_SCALE_OUT, rng);
                    (MeanFn::Mlp(m), ScaleFn::ExpMlp(v))
                }
            };
            Mechanism {
                mean_parents,
                var_parents,
                mean,
                scale,
            }
        })
        .collect()
}

/// Simulates a dataset for `spec` from its own seed.
pub fn generate(spec: &GenSpec) -> Result<GenOutput> {
    spec.validate()?;
    let mut rng = substream(spec.seed, Stream::Datagen);
    let truth = sample_graph_pair(spec, &mut rng)?;
    let mechanisms = make_mechanisms(spec, &truth, &mut rng);
    let (n, d) = (spec.n, spec.d);
    let mut noise = vec![0.0; n * d];
    let mut rows = vec![0.0; n * d];
    let order = truth.union().topological_order()?.order();
    for &j in &order {
        for i in 0..n {
            let e = sample_noise(spec.noise, &mut rng);
            noise[i * d + j] = e;
            let value = mechanisms[j].value(&rows[i * d..(i + 1) * d], e);
            rows[i * d + j] = value;
        }
    }
    if let Some(k) = rows.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "simulated value at row {}, node {}",
            k / d + 1,
            k % d + 1
        )));
    }
    let data = Dataset::new(default_names(d), rows)?;
    Ok(GenOutput {
        spec: spec.clone(),
        data,
        truth,
        mechanisms,
        noise,
    })
}

/// Generation log: the seed and spec needed to regenerate, followed by the
/// audited generator parameters as JSON.
pub fn genlog(out: &GenOutput) -> String {
    let mut s = String::new();
    s.push_str(&format!("# seed: {}\n", out.spec.seed));
    s.push_str(&out.spec.to_toml());
    s.push_str("\n# mechanisms\n");
    s.push_str(&serde_json::to_string(&out.mechanisms).expect("mechanisms serialize"));
    s.push('\n');
    s
}
