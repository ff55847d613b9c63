//! Command-line workflow: `gen`, `fit`, `eval`, `query` and `rerun`.
//!
//! Every command is a plain function so that tests can drive it without a
//! subprocess. Commands that write files also write a JSON manifest that
//! records everything needed to run them again (see [`cmd_rerun`]).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dag_posterior::sample_hard;
use crate::datagen::{self, GenSpec};
use crate::error::{Error, Result};
use crate::graph::{parse_pair, write_pair, AdjMatrix, GraphSlot};
use crate::ingest::{self, sha256_hex, Dataset};
use crate::metrics::{self, Estimate, Feature, PosteriorSamples};
use crate::ordering::OrderingConstraints;
use crate::rng::{substream, Stream};
use crate::trainer::{self, TrainConfig};

/// Posterior samples drawn after a fit unless overridden.
pub const DEFAULT_N_MC: usize = 2000;

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const SAMPLES_FILE: &str = "samples.txt";
pub const TRACE_FILE: &str = "trace.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "momentdag", version, about = "Mean and variance causal graph discovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset and its true graphs from a spec file.
    Gen(GenArgs),
    /// Fit the variational posterior and draw posterior samples.
    Fit(FitArgs),
    /// Score posterior samples against true graphs.
    Eval(EvalArgs),
    /// Posterior probability of a structural feature.
    Query(QueryArgs),
    /// Repeat a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Clone, Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Independent datasets with seeds `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed of the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Center and scale every column before fitting.
    #[arg(long)]
    pub standardize: bool,
    #[arg(long, default_value_t = DEFAULT_N_MC)]
    pub n_samples: usize,
    /// Independent fits with seeds `seed, seed + 1, ...`, written to
    /// `out/rep_<k>`.
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    /// Directory holding `samples.txt` (and the fit manifest).
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Also compare against the exact linear-Gaussian posterior (d <= 4).
    #[arg(long)]
    pub exact_linear: bool,
    /// Data for the exact posterior; defaults to the data in the manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub samples: PathBuf,
    /// e.g. `edge variance X3->X1` or `path union X2->X5`.
    #[arg(long)]
    pub expr: String,
}

#[derive(Clone, Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; defaults to the one recorded in the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&fs::read(path)?),
        })
    }
}

/// Everything needed to repeat a `gen` or `fit` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunSpec {
    Gen {
        name: String,
        spec: GenSpec,
        replicates: usize,
    },
    Fit {
        data: FileRecord,
        standardize: bool,
        /// Config as TOML, with the effective seed.
        config: String,
        constraints: Option<String>,
        n_samples: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub run: RunSpec,
    pub out_dir: String,
    pub outputs: Vec<FileRecord>,
    pub wall_clock_secs: f64,
    /// Command-specific results (fit: convergence and projection counts).
    #[serde(default)]
    pub details: serde_json::Value,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// Writes through a temporary file in the same directory and renames, so a
/// reader never sees a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs `f(0..count)` on up to `jobs` threads and returns results in index
/// order.
fn run_parallel<T: Send>(count: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, count.max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= count {
                    break;
                }
                let r = f(k);
                slots.lock().expect("no poisoned lock")[k] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .map(|r| r.expect("every replicate ran"))
        .collect()
}

fn check_replicates(replicates: usize) -> Result<()> {
    if replicates == 0 {
        return Err(Error::InvalidParameter("replicates must be at least 1".into()));
    }
    Ok(())
}

fn version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

pub fn cmd_gen(args: &GenArgs) -> Result<RunManifest> {
    let text = fs::read_to_string(&args.spec)?;
    let spec = GenSpec::from_toml(&text)?;
    let name = args
        .spec
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    gen_into(&name, &spec, args.replicates, args.jobs, &args.out)
}

fn gen_into(name: &str, spec: &GenSpec, replicates: usize, jobs: usize, out: &Path) -> Result<RunManifest> {
    check_replicates(replicates)?;
    spec.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out)?;
    let files = run_parallel(replicates, jobs, |r| {
        let mut s = spec.clone();
        s.seed = spec.seed.wrapping_add(r as u64);
        let stem = if replicates == 1 {
            name.to_string()
        } else {
            format!("{name}_r{r}")
        };
        let g = datagen::generate(&s)?;
        let mut written = Vec::new();
        for (ext, body) in [
            ("csv", ingest::write_csv(&g.data)),
            ("truth", write_pair(g.data.names(), &g.truth)),
            ("genlog", datagen::genlog(&g)),
        ] {
            let path = out.join(format!("{stem}.{ext}"));
            write_atomic(&path, body.as_bytes())?;
            written.push(FileRecord::of(&path)?);
        }
        Ok(written)
    })?;
    let manifest = RunManifest {
        version: version(),
        seed: spec.seed,
        run: RunSpec::Gen {
            name: name.to_string(),
            spec: spec.clone(),
            replicates,
        },
        out_dir: out.display().to_string(),
        outputs: files.into_iter().flatten().collect(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        details: serde_json::Value::Null,
    };
    write_manifest(&out.join(format!("{name}.manifest.json")), &manifest)?;
    Ok(manifest)
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    write_atomic(path, text.as_bytes())
}

/// Results of one fit, as stored in the manifest `details`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDetails {
    pub outer_iterations: usize,
    pub converged: bool,
    pub final_objective: Option<f64>,
    pub projections: usize,
    pub max_violation: f64,
    pub constraints_satisfied: Option<bool>,
    pub n_samples: usize,
    pub standardized: bool,
    pub fit_wall_clock_secs: f64,
}

struct FitJob {
    data: FileRecord,
    standardize: bool,
    config: TrainConfig,
    constraints: Option<String>,
    n_samples: usize,
}

pub fn cmd_fit(args: &FitArgs) -> Result<Vec<RunManifest>> {
    check_replicates(args.replicates)?;
    let mut config = TrainConfig::from_toml(&fs::read_to_string(&args.config)?)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let constraints = match &args.constraints {
        Some(p) => Some(fs::read_to_string(p)?),
        None => None,
    };
    let data = FileRecord::of(&args.data)?;
    if args.replicates == 1 {
        let job = FitJob {
            data,
            standardize: args.standardize,
            config,
            constraints,
            n_samples: args.n_samples,
        };
        return Ok(vec![fit_into(&job, &args.out)?]);
    }
    run_parallel(args.replicates, args.jobs, |r| {
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(r as u64);
        let job = FitJob {
            data: data.clone(),
            standardize: args.standardize,
            config: cfg,
            constraints: constraints.clone(),
            n_samples: args.n_samples,
        };
        fit_into(&job, &args.out.join(format!("rep_{r}")))
    })
}

fn load_checked(rec: &FileRecord, standardize: bool) -> Result<Dataset> {
    let path = Path::new(&rec.path);
    let data = ingest::load_csv(path, standardize)?;
    let hash = data.provenance().sha256.clone().unwrap_or_default();
    if hash != rec.sha256 {
        return Err(Error::InvalidData(format!(
            "{} changed since it was recorded (sha256 {hash}, expected {})",
            rec.path, rec.sha256
        )));
    }
    Ok(data)
}

fn fit_into(job: &FitJob, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    if job.n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be at least 1".into()));
    }
    let data = load_checked(&job.data, job.standardize)?;
    let constraints = match &job.constraints {
        Some(text) => Some(OrderingConstraints::parse(text, data.names())?),
        None => None,
    };
    let res = trainer::fit(&data, &job.config, constraints.as_ref())?;
    let mut rng = substream(job.config.seed, Stream::Posterior);
    let draws: Result<Vec<_>> = (0..job.n_samples).map(|_| sample_hard(&res.params, &mut rng)).collect();
    let samples = PosteriorSamples::new(data.names().to_vec(), job.config.seed, draws?)?;

    fs::create_dir_all(out)?;
    let mut trace = String::from("iteration,objective\n");
    for (k, v) in res.trace.iter().enumerate() {
        trace.push_str(&format!("{},{v:?}\n", k + 1));
    }
    let mut outputs = Vec::new();
    for (file, body) in [
        (CHECKPOINT_FILE, checkpoint::to_text(&res.params, Some(&res.hnm))),
        (SAMPLES_FILE, samples.to_text()),
        (TRACE_FILE, trace),
    ] {
        let path = out.join(file);
        write_atomic(&path, body.as_bytes())?;
        outputs.push(FileRecord::of(&path)?);
    }
    let details = FitDetails {
        outer_iterations: res.outer_iterations,
        converged: res.converged,
        final_objective: res.trace.last().copied(),
        projections: res.projections,
        max_violation: res.max_violation,
        constraints_satisfied: constraints
            .as_ref()
            .map(|c| c.is_satisfied(res.params.log_psi(), crate::ordering::FEASIBILITY_TOL)),
        n_samples: job.n_samples,
        standardized: job.standardize,
        fit_wall_clock_secs: res.wall_clock_secs,
    };
    let manifest = RunManifest {
        version: version(),
        seed: job.config.seed,
        run: RunSpec::Fit {
            data: job.data.clone(),
            standardize: job.standardize,
            config: job.config.to_toml(),
            constraints: job.constraints.clone(),
            n_samples: job.n_samples,
        },
        out_dir: out.display().to_string(),
        outputs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        details: serde_json::to_value(details).expect("details serialize"),
    };
    write_manifest(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn cmd_rerun(args: &RerunArgs) -> Result<RunManifest> {
    let m = RunManifest::load(&args.manifest)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&m.out_dir));
    match m.run {
        RunSpec::Gen {
            name,
            spec,
            replicates,
        } => gen_into(&name, &spec, replicates, 1, &out),
        RunSpec::Fit {
            data,
            standardize,
            config,
            constraints,
            n_samples,
        } => {
            let job = FitJob {
                data,
                standardize,
                config: TrainConfig::from_toml(&config)?,
                constraints,
                n_samples,
            };
            fit_into(&job, &out)
        }
    }
}

/// Expected value of each metric over the posterior samples, per graph.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlotMetrics {
    pub mean: Estimate,
    pub variance: Estimate,
    pub union: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub d: usize,
    pub n_mc: usize,
    pub e_shd: SlotMetrics,
    pub shd_rate: SlotMetrics,
    pub f1: SlotMetrics,
    pub sid: SlotMetrics,
    pub tv: Option<f64>,
    pub kl: Option<f64>,
}

/// Exact enumeration is limited to this many nodes.
pub const MAX_EXACT_D: usize = 4;

pub fn load_samples(dir: &Path) -> Result<PosteriorSamples> {
    let path = if dir.is_dir() { dir.join(SAMPLES_FILE) } else { dir.to_path_buf() };
    PosteriorSamples::parse(&fs::read_to_string(path)?)
}

type MetricFn = fn(&AdjMatrix, &AdjMatrix) -> Result<f64>;

fn slot_metric(samples: &PosteriorSamples, truth: &crate::graph::DagPair, f: MetricFn) -> Result<SlotMetrics> {
    let mut per_slot = Vec::with_capacity(3);
    for slot in [GraphSlot::Mean, GraphSlot::Variance, GraphSlot::Union] {
        let t = truth.slot(slot);
        // Posterior samples repeat heavily; score each distinct graph once.
        let mut cache: HashMap<AdjMatrix, f64> = HashMap::new();
        let mut values = Vec::with_capacity(samples.n_mc());
        for g in samples.slot(slot) {
            let v = match cache.get(&g) {
                Some(v) => *v,
                None => {
                    let v = f(&g, &t)?;
                    cache.insert(g, v);
                    v
                }
            };
            values.push(v);
        }
        per_slot.push(Estimate::from_values(values)?);
    }
    Ok(SlotMetrics {
        mean: per_slot[0],
        variance: per_slot[1],
        union: per_slot[2],
    })
}

pub fn evaluate(samples: &PosteriorSamples, truth: &crate::graph::DagPair, exact_data: Option<&Dataset>) -> Result<EvalReport> {
    if truth.d() != samples.d() {
        return Err(Error::DimensionMismatch {
            expected: samples.d(),
            found: truth.d(),
        });
    }
    let (tv, kl) = match exact_data {
        Some(data) => {
            if samples.d() > MAX_EXACT_D {
                return Err(Error::InvalidParameter(format!(
                    "exact posterior needs d <= {MAX_EXACT_D}, got {}",
                    samples.d()
                )));
            }
            if data.d() != samples.d() {
                return Err(Error::DimensionMismatch {
                    expected: samples.d(),
                    found: data.d(),
                });
            }
            let exact = metrics::exact_posterior(data)?;
            let div = metrics::posterior_divergence(samples, &exact)?;
            (Some(div.tv), Some(div.kl))
        }
        None => (None, None),
    };
    Ok(EvalReport {
        d: samples.d(),
        n_mc: samples.n_mc(),
        e_shd: slot_metric(samples, truth, |a, b| metrics::shd(a, b).map(|v| v as f64))?,
        shd_rate: slot_metric(samples, truth, metrics::shd_rate)?,
        f1: slot_metric(samples, truth, metrics::f1)?,
        sid: slot_metric(samples, truth, |a, b| metrics::sid(a, b).map(|v| v as f64))?,
        tv,
        kl,
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let samples = load_samples(&args.samples)?;
    let (names, truth) = parse_pair(&fs::read_to_string(&args.truth)?)?;
    if names != samples.names {
        return Err(Error::InvalidData(format!(
            "truth nodes {names:?} differ from sample nodes {:?}",
            samples.names
        )));
    }
    let data = if args.exact_linear {
        Some(match &args.data {
            Some(p) => ingest::load_csv(p, false)?,
            None => {
                let dir = if args.samples.is_dir() {
                    args.samples.clone()
                } else {
                    args.samples.parent().map(Path::to_path_buf).unwrap_or_default()
                };
                let m = RunManifest::load(&dir.join(MANIFEST_FILE))?;
                match m.run {
                    RunSpec::Fit { data, standardize, .. } => load_checked(&data, standardize)?,
                    RunSpec::Gen { .. } => {
                        return Err(Error::InvalidData("manifest does not describe a fit".into()))
                    }
                }
            }
        })
    } else {
        None
    };
    let report = evaluate(&samples, &truth, data.as_ref())?;
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        write_atomic(out, text.as_bytes())?;
    }
    Ok(report)
}

pub fn cmd_query(args: &QueryArgs) -> Result<Estimate> {
    let samples = load_samples(&args.samples)?;
    let feature = Feature::parse(&args.expr, &samples.names)?;
    metrics::feature_probability(&samples, &feature)
}

/// Runs a parsed command line, printing results to stdout and errors to
/// stderr. Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result: Result<String> = match cli.command {
        Command::Gen(a) => cmd_gen(&a).map(|m| {
            m.outputs
                .iter()
                .map(|f| format!("wrote {}\n", f.path))
                .collect()
        }),
        Command::Fit(a) => cmd_fit(&a).map(|ms| {
            ms.iter()
                .map(|m| format!("wrote {}\n", Path::new(&m.out_dir).join(MANIFEST_FILE).display()))
                .collect()
        }),
        Command::Eval(a) => cmd_eval(&a).map(|r| serde_json::to_string_pretty(&r).expect("report serializes") + "\n"),
        Command::Query(a) => {
            cmd_query(&a).map(|e| format!("probability {:.4} se {:.4} n {}\n", e.value, e.se, e.n))
        }
        Command::Rerun(a) => cmd_rerun(&a).map(|m| format!("reran into {}\n", m.out_dir)),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DagPair;

    fn pair(d: usize, m: &[(usize, usize)], v: &[(usize, usize)]) -> DagPair {
        DagPair::new(AdjMatrix::from_edges(d, m).unwrap(), AdjMatrix::from_edges(d, v).unwrap()).unwrap()
    }

    #[test]
    fn perfect_samples_score_perfectly() {
        let truth = pair(3, &[(0, 1)], &[(1, 2)]);
        let s = PosteriorSamples::new(ingest::default_names(3), 0, vec![truth.clone(); 5]).unwrap();
        let r = evaluate(&s, &truth, None).unwrap();
        for m in [&r.e_shd, &r.sid] {
            assert_eq!((m.mean.value, m.variance.value, m.union.value), (0.0, 0.0, 0.0));
        }
        assert_eq!(r.f1.union.value, 1.0);
        assert!(r.tv.is_none() && r.kl.is_none());
    }

    #[test]
    fn report_keys_are_stable() {
        let truth = pair(2, &[(0, 1)], &[]);
        let s = PosteriorSamples::new(ingest::default_names(2), 0, vec![truth.clone()]).unwrap();
        let v = serde_json::to_value(evaluate(&s, &truth, None).unwrap()).unwrap();
        let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        keys.sort();
        assert_eq!(keys, ["d", "e_shd", "f1", "kl", "n_mc", "shd_rate", "sid", "tv"]);
        let slot: Vec<&String> = v["e_shd"].as_object().unwrap().keys().collect();
        assert_eq!(slot.len(), 3);
        assert!(v["e_shd"]["variance"]["se"].is_number());
    }

    #[test]
    fn exact_comparison_is_limited_to_small_graphs() {
        let d = 5;
        let truth = pair(d, &[], &[]);
        let s = PosteriorSamples::new(ingest::default_names(d), 0, vec![truth.clone()]).unwrap();
        let data = Dataset::with_default_names(d, vec![0.5; 2 * d]).unwrap();
        assert!(matches!(evaluate(&s, &truth, Some(&data)), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn parallel_results_keep_order() {
        let out = run_parallel(7, 3, |k| Ok(k * k)).unwrap();
        assert_eq!(out, vec![0, 1, 4, 9, 16, 25, 36]);
        assert!(run_parallel(3, 2, |k| if k == 1 { Err(Error::Cycle) } else { Ok(k) }).is_err());
    }
}
