//! One function per acceptance criterion. Each returns whether it passed
//! and a one-line summary of the measured numbers.

use std::time::Instant;

use momentdag::cli::{self, EvalArgs, FitArgs, GenArgs};
use momentdag::dag_posterior::{relax, sample_hard, GumbelDraws, Temperatures};
use momentdag::datagen::{self, GenSpec, GraphModel, MeanFn, NoiseFamily, ScmFamily};
use momentdag::graph::{enumerate_dags, AdjMatrix, DagPair, GraphSlot};
use momentdag::ingest::Dataset;
use momentdag::metrics::{self, PosteriorSamples};
use momentdag::ordering::{project, OrderingConstraints, Precedence};
use momentdag::rng::{substream, Stream};
use momentdag::trainer::{fit, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

pub fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(11, Stream::Init);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for _ in 0..100 {
        let inst = gradient_instance(&mut rng, 1e-4);
        let (e, n) = nll_gradient_error(&inst);
        worst = worst.max(e);
        coords += n;
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst < 1e-4 && secs < 60.0,
        format!("100 instances, {coords} coordinates, max rel err {worst:.2e}, {secs:.1}s"),
    )
}

pub fn scaled_gradient_identity() -> Outcome {
    let mut rng = substream(12, Stream::Init);
    let worst = (0..200)
        .map(|_| scaled_identity_error(&gradient_instance(&mut rng, 0.0)))
        .fold(0.0, f64::max);
    Outcome::new(worst < 1e-10, format!("200 points, max rel err {worst:.2e}"))
}

/// Every edge must point forward in the order obtained by sorting the
/// perturbed scores; that alone proves acyclicity.
fn forward_in_sorted_scores(g: &AdjMatrix, scores: &[f64]) -> bool {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos = vec![0; scores.len()];
    for (k, &v) in order.iter().enumerate() {
        pos[v] = k;
    }
    g.edges().all(|(i, j)| pos[i] < pos[j])
}

pub fn sampling_validity() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(13, Stream::Gumbel);
    let mut bad = 0;
    let mut draws = 0;
    for _ in 0..100 {
        let d = rng.random_range(2..=8);
        let params = random_variational(d, &mut rng);
        for _ in 0..100 {
            let noise = GumbelDraws::draw(d, &mut rng);
            let s = relax(&params, Temperatures::default(), noise).unwrap();
            let p = s.pair();
            let ok = [p.mean().clone(), p.variance().clone(), p.union()]
                .iter()
                .all(|g| forward_in_sorted_scores(g, &s.scores) && s.pi_hard.is_consistent_with(g))
                && p.shared_order() == &s.pi_hard;
            if !ok {
                bad += 1;
            }
            draws += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        bad == 0 && secs < 60.0,
        format!("{draws} draws, {bad} invalid, {secs:.1}s"),
    )
}

pub fn projection_exactness() -> Outcome {
    let mut rng = substream(14, Stream::Init);
    let mut worst_dist: f64 = 0.0;
    let mut worst_violation: f64 = 0.0;
    for _ in 0..60 {
        let d = rng.random_range(2..=3);
        let c = random_constraints(d, &mut rng);
        let psi: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = project(&psi, &c).unwrap().psi;
        let grid = grid_projection(&psi, &c);
        let dist = got.iter().zip(&grid).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_dist = worst_dist.max(dist);
        worst_violation = worst_violation.max(c.max_violation(&got));
    }
    let kkt = OrderingConstraints::new(vec![Precedence {
        before: 0,
        after: 1,
        margin: 1.5,
    }]);
    let p = project(&[1.0, 0.0], &kkt).unwrap().psi;
    let kkt_ok = (p[0] + 0.25).abs() < 1e-12 && (p[1] - 1.25).abs() < 1e-12;
    Outcome::new(
        worst_dist <= 1e-3 && worst_violation <= 1e-8 && kkt_ok,
        format!(
            "60 instances: max grid distance {worst_dist:.1e}, max violation {worst_violation:.1e}; (1,0) -> ({:.4}, {:.4})",
            p[0], p[1]
        ),
    )
}

pub fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let dags = enumerate_dags(3).unwrap();
    let mut mismatches = 0;
    for (a_idx, a) in dags.iter().enumerate() {
        for (b_idx, b) in dags.iter().enumerate() {
            let shd_ok = metrics::shd(a, b).unwrap() == naive_shd(a, b);
            let f1_ok = (metrics::f1(a, b).unwrap() - naive_f1(a, b)).abs() < 1e-12;
            let sid_ok = metrics::sid(a, b).unwrap() == sid_by_intervention(a, b, (a_idx * 25 + b_idx) as u64);
            if !(shd_ok && f1_ok && sid_ok) {
                mismatches += 1;
            }
        }
    }
    let e = AdjMatrix::from_edges(2, &[(0, 1)]).unwrap();
    let t = AdjMatrix::from_edges(2, &[(1, 0)]).unwrap();
    let sid_example = metrics::sid(&e, &t).unwrap();
    let counts: Vec<usize> = (1..=4).map(|d| enumerate_dags(d).unwrap().len()).collect();
    let reference: Vec<usize> = (1..=4).map(|d| dag_count(d) as usize).collect();
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        mismatches == 0 && sid_example == 2 && counts == [1, 3, 25, 543] && counts == reference && secs < 60.0,
        format!(
            "{} pairs, {mismatches} mismatches; sid example {sid_example}; counts {counts:?}; {secs:.1}s",
            dags.len() * dags.len()
        ),
    )
}

fn single_edge_variance() -> (f64, f64) {
    let mut spec = GenSpec::new(2, 100_000, ScmFamily::LinearGaussianAnm, 21);
    spec.edges_per_node = 0.5;
    let out = datagen::generate(&spec).unwrap();
    let (_, child) = out.truth.mean().edges().next().expect("slot probability 1");
    let w = match &out.mechanisms[child].mean {
        MeanFn::Linear(w) => w[0],
        _ => unreachable!("linear family"),
    };
    let col = out.data.column(child);
    (sample_variance(&col), 1.0 + w * w)
}

pub fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

fn laplace_variance() -> f64 {
    let mut rng = substream(22, Stream::Datagen);
    let draws: Vec<f64> = (0..1_000_000)
        .map(|_| datagen::sample_noise(NoiseFamily::Laplace, &mut rng))
        .collect();
    sample_variance(&draws)
}

/// Worst relative gap between the residual standard deviation and the
/// root-mean-square generator scale over ten bins of the scale.
fn conditional_std_gap() -> f64 {
    let out = (30u64..)
        .map(|seed| {
            let mut spec = GenSpec::new(3, 100_000, ScmFamily::MeanVarianceHnm, seed);
            spec.edges_per_node = 1.0;
            datagen::generate(&spec).unwrap()
        })
        .find(|o| o.truth.variance().n_edges() > 0)
        .unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..3 {
        let mech = &out.mechanisms[j];
        if mech.var_parents.is_empty() {
            continue;
        }
        let mut rows: Vec<(f64, f64)> = out
            .data
            .rows()
            .map(|r| (mech.scale_at(r), r[j] - mech.mean_at(r)))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for bin in rows.chunks(rows.len() / 10) {
            let rms = (bin.iter().map(|(s, _)| s * s).sum::<f64>() / bin.len() as f64).sqrt();
            let resid: Vec<f64> = bin.iter().map(|(_, r)| *r).collect();
            let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
            worst = worst.max((sd - rms).abs() / rms);
        }
    }
    worst
}

pub fn generator_moments() -> Outcome {
    let (v, want) = single_edge_variance();
    let lap = laplace_variance();
    let gap = conditional_std_gap();
    let e1 = (v - want).abs() / want;
    let e2 = (lap - 2.0).abs() / 2.0;
    Outcome::new(
        e1 < 0.02 && e2 < 0.02 && gap < 0.05,
        format!(
            "single-edge var {v:.4} vs {want:.4} ({:.2}%); Laplace var {lap:.4} ({:.2}%); binned std gap {:.2}%",
            100.0 * e1,
            100.0 * e2,
            100.0 * gap
        ),
    )
}

fn read_all(dir: &std::path::Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| std::fs::read(dir.join(n)).unwrap()).collect()
}

pub fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec_path = root.join("hnm5.toml");
    let spec = GenSpec::new(5, 500, ScmFamily::MeanVarianceHnm, 7);
    std::fs::write(&spec_path, spec.to_toml()).unwrap();
    let cfg_path = root.join("fit.toml");
    std::fs::write(&cfg_path, TrainConfig::default().to_toml()).unwrap();
    let mut same = true;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(run);
        cli::cmd_gen(&GenArgs {
            spec: spec_path.clone(),
            out: out.clone(),
            replicates: 1,
            jobs: 1,
        })
        .unwrap();
        cli::cmd_fit(&FitArgs {
            data: out.join("hnm5.csv"),
            config: cfg_path.clone(),
            constraints: None,
            out: out.join("fit"),
            seed: Some(3),
            standardize: true,
            n_samples: cli::DEFAULT_N_MC,
            replicates: 1,
            jobs: 1,
        })
        .unwrap();
        let report = cli::cmd_eval(&EvalArgs {
            samples: out.join("fit"),
            truth: out.join("hnm5.truth"),
            exact_linear: false,
            data: None,
            out: Some(out.join("metrics.json")),
        })
        .unwrap();
        let _ = report;
        let mut files = read_all(&out, &["hnm5.csv", "hnm5.truth", "hnm5.genlog", "metrics.json"]);
        files.extend(read_all(&out.join("fit"), &[cli::CHECKPOINT_FILE, cli::SAMPLES_FILE, cli::TRACE_FILE]));
        outputs.push(files);
    }
    same &= outputs[0] == outputs[1];
    Outcome::new(same, format!("gen/fit/eval twice: {} primary files identical: {same}", outputs[0].len()))
}

fn draw_samples(data: &Dataset, cfg: &TrainConfig, constraints: Option<&OrderingConstraints>) -> PosteriorSamples {
    let res = fit(data, cfg, constraints).unwrap();
    let mut rng = substream(cfg.seed, Stream::Posterior);
    let s = (0..cli::DEFAULT_N_MC).map(|_| sample_hard(&res.params, &mut rng).unwrap()).collect();
    PosteriorSamples::new(data.names().to_vec(), cfg.seed, s).unwrap()
}

pub fn posterior_approximation() -> Outcome {
    let start = Instant::now();
    let mut means = Vec::new();
    let mut detail = Vec::new();
    for (d, band) in [(2usize, 0.40), (3, 0.35)] {
        let (mut tv, mut kl) = (Vec::new(), Vec::new());
        for rep in 0..20u64 {
            let mut spec = GenSpec::new(d, 500, ScmFamily::LinearGaussianAnm, 4000 + 100 * d as u64 + rep);
            spec.graph = GraphModel::Uniform;
            let data = datagen::generate(&spec).unwrap().data;
            let exact = metrics::exact_posterior(&data).unwrap();
            let cfg = TrainConfig {
                seed: rep,
                ..TrainConfig::default()
            };
            let samples = draw_samples(&data, &cfg, None);
            let div = metrics::posterior_divergence(&samples, &exact).unwrap();
            tv.push(div.tv);
            kl.push(div.kl);
        }
        let (m, s) = mean_sd(&tv);
        means.push((m, band));
        detail.push(format!(
            "d={d}: TV {m:.3}+-{s:.3} (band {band}), KL {:.3}",
            mean_sd(&kl).0
        ));
    }
    let pass = means.iter().all(|(m, band)| m <= band);
    detail.push(format!("{:.0}s", start.elapsed().as_secs_f64()));
    Outcome::new(pass, detail.join("; "))
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    (m, s)
}

pub fn mean_variance_recovery() -> Outcome {
    let start = Instant::now();
    let (mut em, mut ev, mut zm, mut zv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rep in 0..20u64 {
        let spec = GenSpec::new(5, 500, ScmFamily::MeanVarianceHnm, 5000 + rep);
        let out = datagen::generate(&spec).unwrap();
        let data = out.data.standardized().unwrap();
        let cfg = TrainConfig {
            seed: rep,
            ..TrainConfig::default()
        };
        let samples = draw_samples(&data, &cfg, None);
        em.push(metrics::e_shd(&samples, out.truth.mean(), GraphSlot::Mean).unwrap().value);
        ev.push(metrics::e_shd(&samples, out.truth.variance(), GraphSlot::Variance).unwrap().value);
        zm.push(out.truth.mean().n_edges() as f64);
        zv.push(out.truth.variance().n_edges() as f64);
    }
    let (m, ms) = mean_sd(&em);
    let (v, vs) = mean_sd(&ev);
    let (z1, z2) = (mean_sd(&zm).0, mean_sd(&zv).0);
    Outcome::new(
        m <= 3.5 && v <= 4.5 && m < z1 && v < z2,
        format!(
            "mean E-SHD {m:.2}+-{ms:.2} (band 3.5, empty {z1:.2}); variance E-SHD {v:.2}+-{vs:.2} (band 4.5, empty {z2:.2}); {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

/// Half of the ordered pairs of the generator's true ordering, chosen at
/// random, with the default margin.
pub fn half_true_orderings<R: Rng + ?Sized>(truth: &DagPair, rng: &mut R) -> OrderingConstraints {
    let order = truth.shared_order().order();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for a in 0..order.len() {
        for b in a + 1..order.len() {
            pairs.push((order[a], order[b]));
        }
    }
    pairs.shuffle(rng);
    pairs.truncate(pairs.len() / 2);
    OrderingConstraints::from_pairs(&pairs)
}

/// P(Binomial(n, 1/2) >= k).
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for i in k..=n {
        let mut c = 1.0;
        for t in 0..i {
            c = c * (n - t) as f64 / (t + 1) as f64;
        }
        total += c;
    }
    total / 2f64.powi(n as i32)
}

pub fn prior_knowledge_benefit() -> Outcome {
    let start = Instant::now();
    let (mut free, mut constrained) = (Vec::new(), Vec::new());
    for rep in 0..10u64 {
        let mut spec = GenSpec::new(10, 200, ScmFamily::MeanVarianceHnm, 6000 + rep);
        spec.edges_per_node = 2.0;
        let out = datagen::generate(&spec).unwrap();
        let data = out.data.standardized().unwrap();
        let mut rng = substream(6000 + rep, Stream::Shuffle);
        let c = half_true_orderings(&out.truth, &mut rng);
        let cfg = TrainConfig {
            seed: rep,
            ..TrainConfig::default()
        };
        let union = out.truth.union();
        let a = draw_samples(&data, &cfg, None);
        let b = draw_samples(&data, &cfg, Some(&c));
        free.push(metrics::e_shd(&a, &union, GraphSlot::Union).unwrap().value);
        constrained.push(metrics::e_shd(&b, &union, GraphSlot::Union).unwrap().value);
    }
    let wins = free.iter().zip(&constrained).filter(|(f, c)| c < f).count();
    let losses = free.iter().zip(&constrained).filter(|(f, c)| c > f).count();
    let p = sign_test_p(wins, wins + losses);
    let (f, _) = mean_sd(&free);
    let (c, _) = mean_sd(&constrained);
    Outcome::new(
        c < f && p <= 0.10,
        format!(
            "union E-SHD free {f:.2}, 50% orderings {c:.2}; {wins} better / {losses} worse, sign test p = {p:.3}; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}
