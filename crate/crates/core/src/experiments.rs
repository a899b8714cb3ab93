//! Replicated synthetic experiments: a grid of missingness models times a
//! roster of methods, averaged over seeded replications and written out as
//! CSV traces.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{impute, solve_imputed, ImputeMethod};
use crate::error::{Error, Result};
use crate::missingness::{MaskMatrix, TupleMissingModel};
use crate::par::par_map;
use crate::rng::{derive_seed, rng_from_seed};
use crate::solvers::{run_solver, trace_csv, ErrorTrace, Method, SolverConfig, StepSchedule};
use crate::system::generate_gaussian_system;

/// Fraction of the averaged trace (from the end) that [`CellResult::horizon`]
/// averages over.
pub const HORIZON_TAIL: f64 = 0.1;

/// One entry of a method roster: a solver run on masked data, or an
/// imputation baseline followed by plain SGD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Approach {
    Solver(Method),
    Imputed(ImputeMethod),
}

impl Approach {
    pub fn label(self) -> &'static str {
        match self {
            Approach::Solver(m) => m.as_str(),
            Approach::Imputed(i) => i.as_str(),
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(m) = s.parse::<Method>() {
            return Ok(Approach::Solver(m));
        }
        s.parse::<ImputeMethod>().map(Approach::Imputed).map_err(|_| {
            Error::invalid(
                "methods",
                format!("unknown method `{s}` (expected sgd, msgd, tuple-msgd, column-mean or knn)"),
            )
        })
    }
}

impl TryFrom<String> for Approach {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Approach> for String {
    fn from(a: Approach) -> String {
        a.label().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelCell {
    pub ell: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub models: Vec<ModelCell>,
    pub methods: Vec<Approach>,
    pub schedule: StepSchedule,
    /// Iteration budget `K`; `5·m` when absent.
    #[serde(default)]
    pub iterations: Option<u64>,
    pub replications: usize,
    #[serde(default = "one")]
    pub record_every: u64,
}

fn one() -> u64 {
    1
}

impl ExperimentSpec {
    pub fn iterations(&self) -> u64 {
        self.iterations.unwrap_or(5 * self.m as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::invalid("name", format!("`{}` is not a usable directory name", self.name)));
        }
        if self.m == 0 || self.n == 0 {
            return Err(Error::invalid("m, n", "system dimensions must be at least 1"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications", "must be at least 1"));
        }
        if self.models.is_empty() || self.methods.is_empty() {
            return Err(Error::invalid("models, methods", "the grid must not be empty"));
        }
        if self.iterations() == 0 || self.record_every == 0 {
            return Err(Error::invalid("iterations", "iterations and record_every must be at least 1"));
        }
        for cell in &self.models {
            TupleMissingModel::new(self.n, cell.ell, cell.p)?;
        }
        self.schedule.validate()
    }

    pub fn with_replications(mut self, replications: usize) -> Self {
        self.replications = replications;
        self
    }

    pub fn cell_name(approach: Approach, cell: &ModelCell) -> String {
        format!("{}_ell{}_p{}", approach, cell.ell, cell.p)
    }

    pub fn system_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, &[0, rep as u64])
    }

    /// Shared by every method of a model cell, so methods are compared on
    /// identical row and mask sequences.
    pub fn solver_seed(&self, model_index: usize, rep: usize) -> u64 {
        derive_seed(self.seed, &[1, model_index as u64, rep as u64])
    }

    pub fn baseline_mask_seed(&self, model_index: usize, rep: usize) -> u64 {
        derive_seed(self.seed, &[2, model_index as u64, rep as u64])
    }
}

fn preset(
    name: &str,
    m: usize,
    n: usize,
    models: Vec<ModelCell>,
    methods: Vec<Approach>,
    alpha: f64,
) -> ExperimentSpec {
    ExperimentSpec {
        name: name.to_string(),
        m,
        n,
        seed: 1,
        models,
        methods,
        schedule: StepSchedule::Fixed { alpha },
        iterations: Some(5 * m as u64),
        replications: 20,
        record_every: 1,
    }
}

/// Step size of the `fig2` presets. The source experiment does not state
/// one. With Gaussian data, plain SGD on masked rows is only weakly biased
/// and has the smallest variance, so at larger steps it settles below the
/// corrected methods within `K = 5·m`; its disadvantage is the slower
/// (`p`-damped) contraction, which this step keeps visible at `K`.
pub const FIG2_ALPHA: f64 = 1e-4;

/// The three synthetic experiments plus `-mini` variants.
///
/// Full presets run `K = 5·m` iterations. A `-mini` variant has `m/10` rows
/// and otherwise the same parameters, including `K`.
pub fn preset_specs() -> Vec<ExperimentSpec> {
    use Approach::{Imputed, Solver};
    let fig1 = preset(
        "fig1",
        10_000,
        25,
        [0.8, 0.95, 0.999].iter().map(|&p| ModelCell { ell: 1, p }).collect(),
        vec![Solver(Method::Msgd), Solver(Method::TupleMsgd)],
        1e-3,
    );
    let fig2 = preset(
        "fig2",
        8_000,
        30,
        [2, 15].iter().map(|&ell| ModelCell { ell, p: 0.6 }).collect(),
        vec![Solver(Method::Sgd), Solver(Method::Msgd), Solver(Method::TupleMsgd)],
        FIG2_ALPHA,
    );
    let fig3 = preset(
        "fig3",
        10_000,
        100,
        vec![ModelCell { ell: 50, p: 0.95 }],
        vec![
            Solver(Method::Sgd),
            Solver(Method::Msgd),
            Solver(Method::TupleMsgd),
            Imputed(ImputeMethod::ColumnMean),
            Imputed(ImputeMethod::Knn),
        ],
        8e-4,
    );
    let mut out = Vec::new();
    for full in [fig1, fig2, fig3] {
        let mini = ExperimentSpec {
            name: format!("{}-mini", full.name),
            m: full.m / 10,
            ..full.clone()
        };
        out.push(full);
        out.push(mini);
    }
    out
}

pub fn preset_by_name(name: &str) -> Result<ExperimentSpec> {
    preset_specs().into_iter().find(|s| s.name == name).ok_or_else(|| {
        let names: Vec<String> = preset_specs().into_iter().map(|s| s.name).collect();
        Error::invalid("preset", format!("unknown preset `{name}` (known: {})", names.join(", ")))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AveragedTrace {
    pub iterations: Vec<u64>,
    pub mean_errors: Vec<f64>,
    pub per_replicate_final: Vec<f64>,
}

impl AveragedTrace {
    pub fn final_mean(&self) -> f64 {
        *self.mean_errors.last().expect("averaged traces are never empty")
    }

    /// Mean of the last [`HORIZON_TAIL`] of the averaged trace.
    pub fn horizon(&self) -> f64 {
        let len = self.mean_errors.len();
        let tail = ((len as f64 * HORIZON_TAIL).ceil() as usize).clamp(1, len);
        self.mean_errors[len - tail..].iter().sum::<f64>() / tail as f64
    }

    pub fn to_csv(&self) -> String {
        trace_csv(&self.iterations, &self.mean_errors)
    }
}

/// Pointwise arithmetic mean of equally long traces, summed in input order.
pub fn average_traces(traces: &[ErrorTrace]) -> Result<AveragedTrace> {
    let first = traces
        .first()
        .ok_or_else(|| Error::invalid("traces", "need at least one trace to average"))?;
    for t in traces {
        if t.len() != first.len() {
            return Err(Error::TraceLengthMismatch(first.len(), t.len()));
        }
        if t.iterations != first.iterations {
            return Err(Error::invalid("traces", "traces are recorded at different iterations"));
        }
    }
    let r = traces.len() as f64;
    let mean_errors = (0..first.len())
        .map(|k| traces.iter().map(|t| t.errors[k]).sum::<f64>() / r)
        .collect();
    Ok(AveragedTrace {
        iterations: first.iterations.clone(),
        mean_errors,
        per_replicate_final: traces.iter().map(ErrorTrace::final_error).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub name: String,
    pub approach: Approach,
    pub model: ModelCell,
    pub averaged: AveragedTrace,
    #[serde(skip)]
    pub replicates: Vec<ErrorTrace>,
    /// Summed solver wall time over replications, in seconds.
    pub wall_time: f64,
}

impl CellResult {
    pub fn final_mean(&self) -> f64 {
        self.averaged.final_mean()
    }

    pub fn horizon(&self) -> f64 {
        self.averaged.horizon()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellFailure {
    pub cell: String,
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    pub wall_time: f64,
}

impl ExperimentResult {
    pub fn cell(&self, approach: Approach, model: &ModelCell) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.approach == approach && c.model == *model)
    }

    /// For every model cell, the approach with the lowest final mean error.
    pub fn ordering(&self) -> Vec<CellOrdering> {
        self.spec
            .models
            .iter()
            .map(|model| {
                let mut ranked: Vec<(Approach, f64)> = self
                    .cells
                    .iter()
                    .filter(|c| c.model == *model)
                    .map(|c| (c.approach, c.final_mean()))
                    .collect();
                ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
                CellOrdering { model: *model, ranked }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellOrdering {
    pub model: ModelCell,
    /// Approaches sorted by increasing final mean error.
    pub ranked: Vec<(Approach, f64)>,
}

impl CellOrdering {
    pub fn best(&self) -> Option<Approach> {
        self.ranked.first().map(|r| r.0)
    }
}

type Job = (usize, usize);

fn run_job(spec: &ExperimentSpec, (mi, rep): Job) -> Vec<(Approach, Result<ErrorTrace>)> {
    let cell = spec.models[mi];
    let prepared = generate_gaussian_system(spec.m, spec.n, spec.system_seed(rep)).and_then(|sys| {
        let model = TupleMissingModel::new(spec.n, cell.ell, cell.p)?;
        let base = SolverConfig::new(Method::Sgd, model, spec.schedule, spec.iterations(), spec.solver_seed(mi, rep))
            .with_record_every(spec.record_every);
        Ok((sys, model, base))
    });
    let (sys, model, base) = match prepared {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            return spec
                .methods
                .iter()
                .map(|&a| (a, Err(Error::invalid("system", msg.clone()))))
                .collect();
        }
    };
    let mut baseline_input = None;
    spec.methods
        .iter()
        .map(|&approach| {
            let trace = match approach {
                Approach::Solver(method) => run_solver(&sys, &base.with_method(method)),
                Approach::Imputed(how) => {
                    let (mask, masked) = baseline_input.get_or_insert_with(|| {
                        let mut rng = rng_from_seed(spec.baseline_mask_seed(mi, rep));
                        let mask = MaskMatrix::sample(&model, spec.m, &mut rng);
                        let masked = mask.apply(&sys.a);
                        (mask, masked)
                    });
                    masked
                        .as_ref()
                        .map_err(|e| Error::invalid("mask", e.to_string()))
                        .and_then(|masked| impute(how, masked, mask))
                        .and_then(|imp| solve_imputed(&imp, &sys.y, sys.x_star()?, &base))
                }
            };
            (approach, trace)
        })
        .collect()
}

/// Runs every (model, method) cell for `spec.replications` replications.
///
/// Replications run in parallel on the current rayon pool. Results do not
/// depend on scheduling: each replicate's system, row sequence and baseline
/// mask come from seeds derived from `(spec.seed, model index, replicate)`.
/// Failed replicates are reported in `failures` and left out of the averages.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let start = Instant::now();
    let jobs: Vec<Job> = (0..spec.models.len())
        .flat_map(|mi| (0..spec.replications).map(move |rep| (mi, rep)))
        .collect();
    let outputs = par_map(&jobs, |_, &job| run_job(spec, job));

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for (mi, model) in spec.models.iter().enumerate() {
        for (ai, &approach) in spec.methods.iter().enumerate() {
            let name = ExperimentSpec::cell_name(approach, model);
            let mut replicates = Vec::with_capacity(spec.replications);
            for (ji, &(jm, rep)) in jobs.iter().enumerate() {
                if jm != mi {
                    continue;
                }
                match &outputs[ji][ai].1 {
                    Ok(t) => replicates.push(t.clone()),
                    Err(e) => failures.push(CellFailure {
                        cell: name.clone(),
                        replicate: rep,
                        error: e.to_string(),
                    }),
                }
            }
            if replicates.is_empty() {
                continue;
            }
            let averaged = average_traces(&replicates)?;
            cells.push(CellResult {
                name,
                approach,
                model: *model,
                averaged,
                wall_time: replicates.iter().map(|t| t.wall_time).sum(),
                replicates,
            });
        }
    }
    Ok(ExperimentResult {
        spec: spec.clone(),
        cells,
        failures,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputManifest {
    pub name: String,
    /// Command line that produced the directory.
    pub invocation: Vec<String>,
    /// SHA-256 of input files, keyed by path as given.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every written file, keyed by path relative to the
    /// experiment directory.
    pub checksums: BTreeMap<String, String>,
    pub wall_times: BTreeMap<String, f64>,
    pub total_wall_time: f64,
    pub failures: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `<root>/<name>/{spec.json, <cell>/rep<r>.csv, <cell>/mean.csv,
/// manifest.json}` and returns the experiment directory and its manifest.
pub fn write_experiment(
    result: &ExperimentResult,
    root: &Path,
    invocation: &[String],
    inputs: &BTreeMap<String, String>,
) -> Result<(PathBuf, OutputManifest)> {
    let dir = root.join(&result.spec.name);
    let mut checksums = BTreeMap::new();
    let mut emit = |rel: String, contents: &str| -> Result<()> {
        crate::textio::write_string(&dir.join(&rel), contents)?;
        checksums.insert(rel, sha256_hex(contents.as_bytes()));
        Ok(())
    };
    emit("spec.json".into(), &(serde_json::to_string_pretty(&result.spec)? + "\n"))?;
    let mut wall_times = BTreeMap::new();
    for cell in &result.cells {
        for (r, trace) in cell.replicates.iter().enumerate() {
            emit(format!("{}/rep{r}.csv", cell.name), &trace.to_csv())?;
        }
        emit(format!("{}/mean.csv", cell.name), &cell.averaged.to_csv())?;
        wall_times.insert(cell.name.clone(), cell.wall_time);
    }
    let manifest = OutputManifest {
        name: result.spec.name.clone(),
        invocation: invocation.to_vec(),
        inputs: inputs.clone(),
        checksums,
        wall_times,
        total_wall_time: result.wall_time,
        failures: result
            .failures
            .iter()
            .map(|f| format!("{} rep{}: {}", f.cell, f.replicate, f.error))
            .collect(),
    };
    crate::textio::write_string(
        &dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )?;
    Ok((dir, manifest))
}
