//! Subcommands of the `ksgm` command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ksgm::estimator::{fit, EstimatorConfig, FitResult, PhaseTimings, PriorSpec, Priors};
use ksgm::io::{
    read_dataset, read_f64s, read_matrix_bin, read_square_matrix, write_dataset, write_f64s,
    write_matrix_bin,
};
use ksgm::preprocess::{prepared_gram, PreprocessPlan};
use ksgm::sparsify::{
    covariance_partition, partitioned_fit, read_graph, threshold_top_k_rows, write_graph,
    PartitionPlan, ThresholdMethod, ThresholdSpec,
};
use ksgm::synth::{
    assortativity, bench_sweep, pr_curve, BenchRecord, BenchScenario, Distribution, GroundTruth,
};
use ksgm::tensor::{Dataset, Modality};
use ksgm::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub const REPORT_FILE: &str = "report.json";
pub const PARTITION_FILE: &str = "partition.json";
pub const TRUTH_DIR: &str = "truth";
pub const SPECTRA_DIR: &str = "spectra";
pub const GRAPHS_DIR: &str = "graphs";
pub const DENSE_DIR: &str = "dense";
pub const ASSORTATIVITY_MAX_K: usize = 40;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 3,
        Error::NonConvergence { .. }
        | Error::NotPositiveDefinite(_)
        | Error::Singular(_)
        | Error::Degenerate(_) => 2,
        _ => 1,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_row<I: IntoIterator<Item = String>>(
    w: &mut csv::Writer<fs::File>,
    path: &Path,
    row: I,
) -> Result<()> {
    w.write_record(row).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn csv_finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| io_error(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioAxis {
    pub name: String,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioModality {
    pub name: String,
    pub axes: Vec<String>,
}

/// Synthetic dataset description for `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub axes: Vec<ScenarioAxis>,
    pub modalities: Vec<ScenarioModality>,
    #[serde(default)]
    pub distribution: Distribution,
    #[serde(default = "one")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Scenario {
    /// One modality spanning every axis.
    pub fn single(sizes: &[usize], distribution: Distribution, seed: u64) -> Self {
        let axes: Vec<ScenarioAxis> = sizes
            .iter()
            .enumerate()
            .map(|(i, &size)| ScenarioAxis {
                name: format!("axis{i}"),
                size,
            })
            .collect();
        Self {
            modalities: vec![ScenarioModality {
                name: "data".into(),
                axes: axes.iter().map(|a| a.name.clone()).collect(),
            }],
            axes,
            distribution,
            samples: 1,
            seed,
        }
    }

    /// Ground truth (axis `ℓ` uses seed `seed + ℓ`) and sampled dataset;
    /// modality `m` draws its samples with seed `seed + 1000·(m + 1)`.
    pub fn realize(&self) -> Result<(GroundTruth, Dataset)> {
        let sizes: Vec<usize> = self.axes.iter().map(|a| a.size).collect();
        let precisions = self.distribution.truth(&sizes, self.seed)?;
        let truth = GroundTruth::new(
            self.axes.iter().map(|a| a.name.clone()).collect(),
            precisions,
        )?;
        let mut ds = Dataset::new();
        for a in &self.axes {
            ds.add_axis(&a.name, a.size)?;
        }
        for (m, spec) in self.modalities.iter().enumerate() {
            let factors = spec
                .axes
                .iter()
                .map(|a| {
                    truth.precision(a).cloned().ok_or_else(|| {
                        Error::Argument(format!("modality `{}` uses unknown axis `{a}`", spec.name))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let seed = self.seed.wrapping_add(1000 * (m as u64 + 1));
            let samples = self.distribution.sample(&factors, self.samples, seed)?;
            ds.add_modality(Modality::new(&spec.name, spec.axes.clone(), samples)?)?;
        }
        ds.structure()?;
        Ok((truth, ds))
    }
}

/// Writes the dataset, its ground-truth graphs and the scenario itself.
pub fn cmd_generate(scenario: &Scenario, out: &Path) -> Result<PathBuf> {
    let (truth, ds) = scenario.realize()?;
    let manifest = write_dataset(&ds, out)?;
    let truth_dir = out.join(TRUTH_DIR);
    create_dir(&truth_dir)?;
    for (ax, name) in truth.axes.iter().enumerate() {
        write_graph(&truth.graph(ax)?, &truth_dir, name)?;
        write_matrix_bin(
            &truth_dir.join(format!("{name}.precision.bin")),
            &truth.precisions[ax],
        )?;
    }
    write_json(&out.join("scenario.json"), scenario)?;
    Ok(manifest)
}

/// Prior reference in a run config; the scale is a matrix file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorRef {
    None,
    Wishart { scale: PathBuf, dof: f64 },
}

fn default_threshold() -> ThresholdSpec {
    ThresholdSpec {
        method: ThresholdMethod::Global,
        parameter: 0.05,
    }
}

/// Everything `estimate` and `partition` need; relative paths are resolved
/// against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub preprocess: PreprocessPlan,
    #[serde(default)]
    pub priors: BTreeMap<String, PriorRef>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default = "default_threshold")]
    pub threshold: ThresholdSpec,
    #[serde(default)]
    pub partition_rho: Option<Vec<f64>>,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dense: bool,
}

/// Command-line overrides applied on top of a [`RunConfig`].
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    pub l1_strength: Option<f64>,
    pub dense: bool,
    pub partition_rho: Option<Vec<f64>>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.dataset = resolve(base, &config.dataset);
        config.output = resolve(base, &config.output);
        for p in config.priors.values_mut() {
            if let PriorRef::Wishart { scale, .. } = p {
                *scale = resolve(base, scale);
            }
        }
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(t) = o.tolerance {
            self.estimator.tolerance = t;
        }
        if let Some(m) = o.max_iterations {
            self.estimator.max_iterations = m;
        }
        if let Some(r) = o.l1_strength {
            self.estimator.l1_strength = r;
        }
        self.dense |= o.dense;
        if o.partition_rho.is_some() {
            self.partition_rho = o.partition_rho.clone();
        }
        if let Some(out) = &o.output {
            self.output = out.clone();
        }
    }

    /// Loads the dataset and priors and checks that every name resolves.
    pub fn load_inputs(&self) -> Result<(Dataset, Priors)> {
        self.estimator.validate()?;
        let ds = read_dataset(&self.dataset)?;
        for name in self.preprocess.keys() {
            if !ds.modalities().iter().any(|m| m.name() == name) {
                return Err(Error::Argument(format!(
                    "preprocessing names unknown modality `{name}`"
                )));
            }
        }
        let mut priors = Priors::new();
        for (axis, p) in &self.priors {
            if ds.axis(axis).is_none() {
                return Err(Error::Argument(format!(
                    "prior names unknown axis `{axis}`"
                )));
            }
            let spec = match p {
                PriorRef::None => PriorSpec::None,
                PriorRef::Wishart { scale, dof } => PriorSpec::Wishart {
                    scale: read_square_matrix(scale)?,
                    dof: *dof,
                },
            };
            priors.insert(axis.clone(), spec);
        }
        Ok((ds, priors))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisReport {
    pub name: String,
    pub size: usize,
    pub rank_deficient: bool,
    pub edges: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub plan: PartitionPlan,
    pub groups: usize,
    pub heuristic: bool,
}

/// Summary written as `report.json` next to the estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub axes: Vec<AxisReport>,
    pub converged: bool,
    pub iterations: usize,
    pub l1_iterations: usize,
    pub objective: Option<f64>,
    pub objective_trace: Vec<f64>,
    pub max_gradient: Option<f64>,
    pub timings: PhaseTimings,
    pub threshold: ThresholdSpec,
    pub estimator: EstimatorConfig,
    pub partition: Option<PartitionReport>,
    pub dense: bool,
    pub seed: u64,
    pub error: Option<String>,
}

/// Fits the configured dataset and writes spectra, edge lists, optional
/// dense precisions and `report.json`. A non-converged fit still writes
/// every artifact and is reported through the returned report.
pub fn cmd_estimate(config: &RunConfig) -> Result<RunReport> {
    let (ds, priors) = config.load_inputs()?;
    create_dir(&config.output)?;
    let outcome = match &config.partition_rho {
        Some(rho) => {
            partitioned_fit(&ds, &config.preprocess, &priors, rho, &config.estimator).map(|p| {
                let partition = PartitionReport {
                    plan: p.plan,
                    groups: p.groups,
                    heuristic: p.heuristic,
                };
                (p.fit, Some(partition))
            })
        }
        None => fit(&ds, &config.preprocess, &priors, &config.estimator).map(|f| (f, None)),
    };
    let mut report = RunReport {
        axes: ds
            .axes()
            .iter()
            .map(|a| AxisReport {
                name: a.name.clone(),
                size: a.size,
                rank_deficient: false,
                edges: 0,
            })
            .collect(),
        converged: false,
        iterations: 0,
        l1_iterations: 0,
        objective: None,
        objective_trace: vec![],
        max_gradient: None,
        timings: PhaseTimings::default(),
        threshold: config.threshold,
        estimator: config.estimator.clone(),
        partition: None,
        dense: config.dense,
        seed: config.seed,
        error: None,
    };
    match outcome {
        Ok((result, partition)) => {
            write_estimate(config, &result, &mut report)?;
            report.partition = partition;
        }
        Err(e @ Error::NonConvergence { .. }) => report.error = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    write_json(&config.output.join(REPORT_FILE), &report)?;
    if !report.converged {
        log::warn!(
            "estimate did not converge; artifacts written to {}",
            config.output.display()
        );
    }
    Ok(report)
}

fn write_estimate(config: &RunConfig, result: &FitResult, report: &mut RunReport) -> Result<()> {
    let spectra = config.output.join(SPECTRA_DIR);
    let graphs = config.output.join(GRAPHS_DIR);
    create_dir(&spectra)?;
    create_dir(&graphs)?;
    if config.dense {
        create_dir(&config.output.join(DENSE_DIR))?;
    }
    for (spec, axis) in result.spectra.iter().zip(report.axes.iter_mut()) {
        let name = &spec.axis;
        write_matrix_bin(
            &spectra.join(format!("{name}.eigenvectors.bin")),
            &spec.eigenvectors,
        )?;
        write_f64s(
            &spectra.join(format!("{name}.eigenvalues.bin")),
            &spec.precision_eigenvalues,
        )?;
        write_f64s(
            &spectra.join(format!("{name}.gram_eigenvalues.bin")),
            &spec.gram_eigenvalues,
        )?;
        let psi = spec.precision();
        let graph = config.threshold.apply(name, &psi)?;
        write_graph(&graph, &graphs, name)?;
        if config.dense {
            write_matrix_bin(
                &config.output.join(DENSE_DIR).join(format!("{name}.bin")),
                &psi,
            )?;
        }
        axis.rank_deficient = spec.rank_deficient;
        axis.edges = graph.edges.len();
    }
    report.converged = result.converged;
    report.iterations = result.iterations;
    report.l1_iterations = result.l1_iterations;
    report.objective = Some(result.objective);
    report.objective_trace = result.objective_trace.clone();
    report.max_gradient = Some(result.max_gradient);
    report.timings = result.timings.clone();
    Ok(())
}

/// Computes and writes only the covariance-thresholding partition.
pub fn cmd_partition(config: &RunConfig) -> Result<PartitionPlan> {
    let rho = config.partition_rho.as_ref().ok_or_else(|| {
        Error::Argument("partitioning needs a threshold (partition_rho or --partition-rho)".into())
    })?;
    let (ds, _) = config.load_inputs()?;
    let grams = prepared_gram(&ds, &config.preprocess)?;
    let plan = covariance_partition(&grams, &ds.structure()?, rho)?;
    create_dir(&config.output)?;
    write_json(&config.output.join(PARTITION_FILE), &plan)?;
    Ok(plan)
}

/// Precision estimate of one axis rebuilt from an estimate directory.
pub fn load_precision(estimate: &Path, axis: &str, size: usize) -> Result<DMatrix<f64>> {
    let dir = estimate.join(SPECTRA_DIR);
    let v = read_matrix_bin(&dir.join(format!("{axis}.eigenvectors.bin")), size, size)?;
    let lam = read_f64s(&dir.join(format!("{axis}.eigenvalues.bin")))?;
    if lam.len() != size {
        return Err(Error::Format {
            path: dir.display().to_string(),
            message: format!(
                "axis `{axis}` has {} eigenvalues, expected {size}",
                lam.len()
            ),
        });
    }
    Ok(ksgm::estimator::recompose(&v, &lam))
}

/// What `eval` compares an estimate against.
#[derive(Clone, Debug)]
pub enum EvalTarget {
    /// A directory holding `<axis>.tsv`/`.json` true graphs.
    Truth(PathBuf),
    /// A JSON object mapping axis names to per-vertex category labels.
    Labels(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisAupr {
    pub axis: String,
    pub aupr: f64,
    pub prevalence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssortativityRow {
    pub axis: String,
    pub k: usize,
    pub edges: usize,
    pub assortativity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalOutcome {
    Pr(Vec<AxisAupr>),
    Assortativity(Vec<AssortativityRow>),
}

/// Scores an estimate directory. PR mode writes `pr_curve.csv` and
/// `aupr.csv` for every axis with a true graph; assortativity mode writes
/// `assortativity.csv` for every labeled axis over k = 1..=40.
pub fn cmd_eval(estimate: &Path, target: &EvalTarget, out: &Path) -> Result<EvalOutcome> {
    let report: RunReport = read_json(&estimate.join(REPORT_FILE))?;
    if report.objective.is_none() {
        return Err(Error::Argument(format!(
            "{} holds no estimate",
            estimate.display()
        )));
    }
    create_dir(out)?;
    match target {
        EvalTarget::Truth(dir) => {
            let curves_path = out.join("pr_curve.csv");
            let mut curves = csv_writer(&curves_path)?;
            csv_row(
                &mut curves,
                &curves_path,
                ["axis", "threshold", "recall", "precision"].map(String::from),
            )?;
            let mut rows = Vec::new();
            for axis in &report.axes {
                if !dir.join(format!("{}.json", axis.name)).exists() {
                    continue;
                }
                let truth = read_graph(dir, &axis.name)?;
                if truth.vertices != axis.size {
                    return Err(Error::Argument(format!(
                        "axis `{}` has {} vertices in the truth but {} in the estimate",
                        axis.name, truth.vertices, axis.size
                    )));
                }
                if truth.edges.is_empty() {
                    log::warn!("axis `{}` has no true edges; skipping", axis.name);
                    continue;
                }
                let psi = load_precision(estimate, &axis.name, axis.size)?;
                let curve = pr_curve(&psi, &truth.adjacency())?;
                for p in &curve.points {
                    csv_row(
                        &mut curves,
                        &curves_path,
                        [
                            axis.name.clone(),
                            p.threshold.to_string(),
                            p.recall.to_string(),
                            p.precision.to_string(),
                        ],
                    )?;
                }
                rows.push(AxisAupr {
                    axis: axis.name.clone(),
                    aupr: curve.area,
                    prevalence: curve.prevalence,
                });
            }
            csv_finish(curves, &curves_path)?;
            if rows.is_empty() {
                return Err(Error::Argument(format!(
                    "no true graph with edges in {} matches an estimated axis",
                    dir.display()
                )));
            }
            let path = out.join("aupr.csv");
            let mut w = csv_writer(&path)?;
            csv_row(
                &mut w,
                &path,
                ["axis", "aupr", "prevalence"].map(String::from),
            )?;
            for r in &rows {
                csv_row(
                    &mut w,
                    &path,
                    [r.axis.clone(), r.aupr.to_string(), r.prevalence.to_string()],
                )?;
            }
            csv_finish(w, &path)?;
            Ok(EvalOutcome::Pr(rows))
        }
        EvalTarget::Labels(file) => {
            let labels: BTreeMap<String, Vec<String>> = read_json(file)?;
            let mut rows = Vec::new();
            for (name, labels) in &labels {
                let axis = report
                    .axes
                    .iter()
                    .find(|a| &a.name == name)
                    .ok_or_else(|| Error::Argument(format!("labels name unknown axis `{name}`")))?;
                if labels.len() != axis.size {
                    return Err(Error::Argument(format!(
                        "axis `{name}` has {} vertices but {} labels",
                        axis.size,
                        labels.len()
                    )));
                }
                let psi = load_precision(estimate, name, axis.size)?;
                for k in 1..=ASSORTATIVITY_MAX_K {
                    let graph = threshold_top_k_rows(&psi, k)?;
                    rows.push(AssortativityRow {
                        axis: name.clone(),
                        k,
                        edges: graph.edges.len(),
                        assortativity: assortativity(&graph, labels).ok(),
                    });
                }
            }
            let path = out.join("assortativity.csv");
            let mut w = csv_writer(&path)?;
            csv_row(
                &mut w,
                &path,
                ["axis", "k", "edges", "assortativity"].map(String::from),
            )?;
            for r in &rows {
                let value = r
                    .assortativity
                    .map_or_else(|| "NaN".to_string(), |v| v.to_string());
                csv_row(
                    &mut w,
                    &path,
                    [r.axis.clone(), r.k.to_string(), r.edges.to_string(), value],
                )?;
            }
            csv_finish(w, &path)?;
            Ok(EvalOutcome::Assortativity(rows))
        }
    }
}

/// Benchmark input: one scenario or a list run in order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BenchInput {
    One(BenchScenario),
    Many(Vec<BenchScenario>),
}

impl BenchInput {
    pub fn into_vec(self) -> Vec<BenchScenario> {
        match self {
            BenchInput::One(s) => vec![s],
            BenchInput::Many(v) => v,
        }
    }
}

#[derive(Serialize)]
struct BenchMeta<'a> {
    scenarios: &'a [BenchScenario],
    max_seconds: Option<f64>,
    records: usize,
}

/// Runs the sweep and writes `bench.csv` plus `bench.json` metadata.
pub fn cmd_bench(
    scenarios: &[BenchScenario],
    max_seconds: Option<f64>,
    out: &Path,
) -> Result<Vec<BenchRecord>> {
    let records = bench_sweep(scenarios, max_seconds)?;
    create_dir(out)?;
    let path = out.join("bench.csv");
    let mut w = csv_writer(&path)?;
    let header = [
        "sizes",
        "axes",
        "seed",
        "samples",
        "threads",
        "gram_seconds",
        "decompose_seconds",
        "iterate_seconds",
        "refine_seconds",
        "iterations",
        "converged",
    ];
    csv_row(&mut w, &path, header.map(String::from))?;
    for r in &records {
        let sizes: Vec<String> = r.sizes.iter().map(usize::to_string).collect();
        csv_row(
            &mut w,
            &path,
            [
                sizes.join("x"),
                r.axes.to_string(),
                r.seed.to_string(),
                r.samples.to_string(),
                r.threads.to_string(),
                r.gram_seconds.to_string(),
                r.decompose_seconds.to_string(),
                r.iterate_seconds.to_string(),
                r.refine_seconds.to_string(),
                r.iterations.to_string(),
                r.converged.to_string(),
            ],
        )?;
    }
    csv_finish(w, &path)?;
    write_json(
        &out.join("bench.json"),
        &BenchMeta {
            scenarios,
            max_seconds,
            records: records.len(),
        },
    )?;
    Ok(records)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    read_json(path)
}

pub fn load_bench(path: &Path) -> Result<Vec<BenchScenario>> {
    Ok(read_json::<BenchInput>(path)?.into_vec())
}

/// Configures the global worker pool from `--threads` or `GMGM_THREADS`.
pub fn init_threads(threads: Option<usize>) -> Result<usize> {
    let from_env = std::env::var("GMGM_THREADS").ok();
    let n = match (threads, from_env) {
        (Some(n), _) => n,
        (None, Some(v)) => v.trim().parse().map_err(|_| {
            Error::Argument(format!(
                "GMGM_THREADS must be a positive integer, got `{v}`"
            ))
        })?,
        (None, None) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Argument(e.to_string()))?;
    Ok(rayon::current_num_threads())
}
