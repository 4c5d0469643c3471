//! Experiment driver: the ssd metric, noise sweeps over (method, d, e, seed)
//! cells, stage timing, and CSV export.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::field::{Dataset, FieldGrid};
use crate::generative::{GenerativeModel, LatentVector, ModelError, ModelKind};
use crate::inverse::{
    fit_regression_rcond, inverse_predict, FullspaceInverter, InverseError, InverseProblem,
    Inverter, LatentInverter, RecoverOptions, Space,
};
use crate::nn::OptimizerKind;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("grid mismatch: {0}")]
    Grid(String),
    #[error("no trained model for {0}")]
    MissingModel(Method),
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error("timing needs at least {min} repetitions, got {got}")]
    TooFewRepetitions { min: usize, got: usize },
    #[error("malformed results file: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Inverse(#[from] InverseError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Sum of squared node differences between two grids of equal size and unit.
pub fn ssd(v: &FieldGrid, v_hat: &FieldGrid) -> Result<f64> {
    if v.n() != v_hat.n() {
        return Err(HarnessError::Grid(format!(
            "{}x{0} vs {}x{1}",
            v.n(),
            v_hat.n()
        )));
    }
    if v.unit() != v_hat.unit() {
        return Err(HarnessError::Grid(format!(
            "{} vs {}",
            v.unit(),
            v_hat.unit()
        )));
    }
    Ok(v.values()
        .iter()
        .zip(v_hat.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Approach {
    Fullspace,
    Ae,
    Vae,
}

/// An approach plus the learner its model was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Method {
    pub approach: Approach,
    pub optimizer: Option<OptimizerKind>,
}

impl Method {
    pub const FULLSPACE: Method = Method {
        approach: Approach::Fullspace,
        optimizer: None,
    };

    pub fn latent(kind: ModelKind, optimizer: OptimizerKind) -> Self {
        Self {
            approach: match kind {
                ModelKind::Ae => Approach::Ae,
                ModelKind::Vae => Approach::Vae,
            },
            optimizer: Some(optimizer),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.approach {
            Approach::Fullspace => "fullspace",
            Approach::Ae => "ae",
            Approach::Vae => "vae",
        };
        match self.optimizer {
            Some(o) => write!(f, "{name}-{o}"),
            None => f.write_str(name),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "fullspace" {
            return Ok(Method::FULLSPACE);
        }
        let (kind, opt) = s
            .split_once('-')
            .ok_or_else(|| format!("method `{s}` must be fullspace or <ae|vae>-<optimizer>"))?;
        Ok(Method::latent(kind.parse()?, opt.parse()?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub noise_levels: Vec<f64>,
    pub test_d: Vec<f64>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub recover: RecoverOptions,
    /// Separation whose reconstructed fields are exported as grids.
    pub fig6_d: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            noise_levels: vec![0.01, 0.1, 0.5, 1.0],
            test_d: crate::field::test_d_values(),
            seeds: (0..5).collect(),
            methods: vec![
                Method::FULLSPACE,
                Method::latent(ModelKind::Ae, OptimizerKind::Momentum),
                Method::latent(ModelKind::Vae, OptimizerKind::Momentum),
                Method::latent(ModelKind::Vae, OptimizerKind::Adam),
            ],
            recover: RecoverOptions::default(),
            fig6_d: 0.36,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.noise_levels.iter().find(|e| !(**e >= 0.0)) {
            return Err(HarnessError::Config(format!("negative noise level {e}")));
        }
        if let Some(d) = self.test_d.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(HarnessError::Config(format!("test d {d} outside [0,1]")));
        }
        Ok(())
    }
}

/// Everything a sweep reads: training fields, groundtruth fields at the
/// test separations, and the trained generative models.
#[derive(Debug, Clone)]
pub struct SweepInputs {
    pub train: Dataset,
    pub test: Dataset,
    pub models: Vec<GenerativeModel>,
}

impl SweepInputs {
    /// Fits one inverter per requested method.
    pub fn inverters(&self, config: &SweepConfig) -> Result<BTreeMap<Method, Inverter>> {
        let mut out = BTreeMap::new();
        for &method in &config.methods {
            if out.contains_key(&method) {
                continue;
            }
            let inv = match method.approach {
                Approach::Fullspace => {
                    Inverter::Fullspace(FullspaceInverter::fit(&self.train, &config.recover)?)
                }
                _ => {
                    let model = self
                        .models
                        .iter()
                        .find(|m| {
                            m.optimizer().is_some()
                                && Method::latent(m.kind(), m.optimizer().unwrap()) == method
                        })
                        .ok_or(HarnessError::MissingModel(method))?;
                    Inverter::Latent(LatentInverter::fit(
                        model.clone(),
                        &self.train,
                        &config.recover,
                    )?)
                }
            };
            out.insert(method, inv);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub d: f64,
    pub e: f64,
    pub seed: u64,
    /// ssd against groundtruth, or the failure message.
    pub outcome: std::result::Result<f64, String>,
}

fn cell_order(a: &(Method, f64, f64, u64), b: &(Method, f64, f64, u64)) -> std::cmp::Ordering {
    a.0.cmp(&b.0)
        .then(a.1.total_cmp(&b.1))
        .then(a.2.total_cmp(&b.2))
        .then(a.3.cmp(&b.3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: Method,
    pub d: f64,
    pub e: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub succeeded: usize,
    pub failed: usize,
}

impl Aggregate {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedField {
    pub method: Method,
    pub d: f64,
    pub e: f64,
    pub seed: u64,
    pub field: FieldGrid,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    /// Sorted by (method, d, e, seed).
    pub cells: Vec<Cell>,
    /// Reconstructions at the exported separation, first seed only.
    pub fields: Vec<ReconstructedField>,
    pub timing: Option<TimingTable>,
}

impl SweepResult {
    pub fn cell(&self, method: Method, d: f64, e: f64, seed: u64) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.d == d && c.e == e && c.seed == seed)
    }

    /// Median and quartiles over seeds for every (method, d, e).
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut groups: Vec<((Method, f64, f64), Vec<&Cell>)> = Vec::new();
        for c in &self.cells {
            match groups.last_mut() {
                Some((k, v)) if *k == (c.method, c.d, c.e) => v.push(c),
                _ => groups.push(((c.method, c.d, c.e), vec![c])),
            }
        }
        groups
            .into_iter()
            .map(|((method, d, e), cells)| {
                let mut ok: Vec<f64> = cells
                    .iter()
                    .filter_map(|c| c.outcome.clone().ok())
                    .collect();
                ok.sort_by(f64::total_cmp);
                Aggregate {
                    method,
                    d,
                    e,
                    median: quantile(&ok, 0.5),
                    q1: quantile(&ok, 0.25),
                    q3: quantile(&ok, 0.75),
                    succeeded: ok.len(),
                    failed: cells.len() - ok.len(),
                }
            })
            .collect()
    }

    pub fn aggregate(&self, method: Method, d: f64, e: f64) -> Option<Aggregate> {
        self.aggregates()
            .into_iter()
            .find(|a| a.method == method && a.d == d && a.e == e)
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }
}

/// Runs every (method, d, e, seed) cell in parallel. Failures are recorded
/// in the cell; the sweep itself only fails on setup errors.
pub fn run_noise_sweep(config: &SweepConfig, inputs: &SweepInputs) -> Result<SweepResult> {
    config.validate()?;
    let inverters = inputs.inverters(config)?;
    let mut methods = config.methods.clone();
    methods.sort();
    methods.dedup();

    let mut keys = Vec::new();
    for &m in &methods {
        for &d in &config.test_d {
            for &e in &config.noise_levels {
                for &s in &config.seeds {
                    keys.push((m, d, e, s));
                }
            }
        }
    }
    keys.sort_by(cell_order);
    keys.dedup();
    let first_seed = config.seeds.iter().min().copied();

    let outputs: Vec<(Cell, Option<ReconstructedField>)> = keys
        .par_iter()
        .map(|&(method, d, e, seed)| {
            let outcome = run_cell(&inverters[&method], inputs, config, d, e, seed);
            let keep = Some(seed) == first_seed && d == config.fig6_d;
            let field = match (&outcome, keep) {
                (Ok((_, f)), true) => Some(ReconstructedField {
                    method,
                    d,
                    e,
                    seed,
                    field: f.clone(),
                }),
                _ => None,
            };
            let cell = Cell {
                method,
                d,
                e,
                seed,
                outcome: outcome.map(|(s, _)| s),
            };
            (cell, field)
        })
        .collect();

    let mut result = SweepResult::default();
    for (cell, field) in outputs {
        result.cells.push(cell);
        result.fields.extend(field);
    }
    Ok(result)
}

fn run_cell(
    inverter: &Inverter,
    inputs: &SweepInputs,
    config: &SweepConfig,
    d: f64,
    e: f64,
    seed: u64,
) -> std::result::Result<(f64, FieldGrid), String> {
    let truth = inputs
        .test
        .records
        .iter()
        .find(|r| (r.d - d).abs() < 1e-12)
        .ok_or_else(|| format!("no groundtruth field for d = {d}"))?
        .grid(inputs.test.grid);
    let field = inverter
        .recover_field(d, e, seed, &config.recover)
        .map_err(|err| err.to_string())?;
    let value = ssd(&truth, &field).map_err(|err| err.to_string())?;
    Ok((value, field))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Encoder,
    Regression,
    Inverse,
    Decoder,
    Total,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Encoder,
        Stage::Regression,
        Stage::Inverse,
        Stage::Decoder,
        Stage::Total,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Encoder => "encoder",
            Stage::Regression => "regression",
            Stage::Inverse => "inverse",
            Stage::Decoder => "decoder",
            Stage::Total => "total",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub method: Method,
    /// Coefficients searched by regression and inverse prediction.
    pub dim: usize,
    /// Median milliseconds per stage; `None` where the stage does not apply.
    pub median_ms: BTreeMap<Stage, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimingTable {
    pub repetitions: usize,
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    pub fn median_ms(&self, method: Method, stage: Stage) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method)
            .and_then(|r| r.median_ms.get(&stage).copied().flatten())
    }
}

pub const TIMING_WARMUP: usize = 10;
pub const MIN_TIMING_REPETITIONS: usize = 100;

fn median_ms(repetitions: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..TIMING_WARMUP {
        f();
    }
    let mut samples: Vec<f64> = (0..repetitions)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    quantile(&samples, 0.5)
}

/// Median wall-clock per pipeline stage after [`TIMING_WARMUP`] untimed calls.
///
/// * encoder / decoder: one field / one code (latent methods only);
/// * regression: fitting `d` on the whole training set;
/// * inverse: one clean inverse prediction, cycling through `test_d`;
/// * total: encode the training set, fit, then invert (and decode) every
///   test separation.
pub fn run_timing(
    inverters: &BTreeMap<Method, Inverter>,
    train: &Dataset,
    test_d: &[f64],
    options: &RecoverOptions,
    repetitions: usize,
) -> Result<TimingTable> {
    if repetitions < MIN_TIMING_REPETITIONS {
        return Err(HarnessError::TooFewRepetitions {
            min: MIN_TIMING_REPETITIONS,
            got: repetitions,
        });
    }
    if test_d.is_empty() {
        return Err(HarnessError::Config(
            "timing needs at least one test d".into(),
        ));
    }
    let fields = DMatrix::from_fn(train.len(), train.width(), |i, j| train.records[i].field[j]);
    let d_values = train.d_values();
    let probe = train
        .records
        .first()
        .ok_or_else(|| HarnessError::Config("empty training set".into()))?
        .field
        .clone();

    let mut rows = Vec::new();
    for (&method, inverter) in inverters {
        let space = inverter.space();
        let regression = inverter.regression();
        let x0 = inverter.initial_estimate().to_vec();
        let problem = |target: f64| InverseProblem {
            space,
            target_d: target,
            initial_estimate: x0.clone(),
            options: options.inverse,
        };
        let mut k = 0usize;
        let inverse = median_ms(repetitions, || {
            let p = problem(test_d[k % test_d.len()]);
            k += 1;
            std::hint::black_box(inverse_predict(regression, &p).ok());
        });

        let mut median = BTreeMap::new();
        median.insert(Stage::Inverse, Some(inverse));
        match inverter {
            Inverter::Fullspace(_) => {
                median.insert(Stage::Encoder, None);
                median.insert(Stage::Decoder, None);
                median.insert(
                    Stage::Regression,
                    Some(median_ms(repetitions, || {
                        std::hint::black_box(
                            fit_regression_rcond(
                                Space::Fullspace,
                                &fields,
                                &d_values,
                                options.rcond,
                            )
                            .ok(),
                        );
                    })),
                );
                median.insert(
                    Stage::Total,
                    Some(median_ms(repetitions, || {
                        let reg = fit_regression_rcond(
                            Space::Fullspace,
                            &fields,
                            &d_values,
                            options.rcond,
                        )
                        .unwrap();
                        for &d in test_d {
                            std::hint::black_box(inverse_predict(&reg, &problem(d)).ok());
                        }
                    })),
                );
            }
            Inverter::Latent(l) => {
                let model = &l.model;
                let codes = model.encode_means(&fields)?;
                let z = LatentVector(x0.clone());
                median.insert(
                    Stage::Encoder,
                    Some(median_ms(repetitions, || {
                        std::hint::black_box(model.encode(&probe).ok());
                    })),
                );
                median.insert(
                    Stage::Decoder,
                    Some(median_ms(repetitions, || {
                        std::hint::black_box(model.decode(&z).ok());
                    })),
                );
                median.insert(
                    Stage::Regression,
                    Some(median_ms(repetitions, || {
                        std::hint::black_box(
                            fit_regression_rcond(Space::Latent, &codes, &d_values, options.rcond)
                                .ok(),
                        );
                    })),
                );
                median.insert(
                    Stage::Total,
                    Some(median_ms(repetitions, || {
                        let codes = model.encode_means(&fields).unwrap();
                        let reg =
                            fit_regression_rcond(Space::Latent, &codes, &d_values, options.rcond)
                                .unwrap();
                        for &d in test_d {
                            let sol = inverse_predict(&reg, &problem(d)).unwrap();
                            std::hint::black_box(model.decode(&LatentVector(sol.x)).ok());
                        }
                    })),
                );
            }
        }
        rows.push(TimingRow {
            method,
            dim: inverter.search_dim(),
            median_ms: median,
        });
    }
    Ok(TimingTable { repetitions, rows })
}

pub const CELLS_FILE: &str = "sweep_cells.csv";
pub const FIG6_FILE: &str = "fig6_fields.csv";
pub const FIG8_FILE: &str = "fig8_ssd.csv";
pub const FIG9_FILE: &str = "fig9_ssd.csv";
pub const TABLE2_FILE: &str = "table2_timing.csv";

const CELLS_HEADER: &str = "method,d,e,seed,ssd,error";
const AGG_HEADER: &str = "method,d,e,median_ssd,q1_ssd,q3_ssd,iqr_ssd,succeeded,failed";

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|source| HarnessError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn aggregate_csv<'a>(aggs: impl Iterator<Item = &'a Aggregate>) -> String {
    let mut out = format!("{AGG_HEADER}\n");
    for a in aggs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            a.method,
            a.d,
            a.e,
            a.median,
            a.q1,
            a.q3,
            a.iqr(),
            a.succeeded,
            a.failed
        ));
    }
    out
}

/// `stage,<method>...` in milliseconds, `-` where a stage does not apply,
/// plus a `dim` row. Header only when `table` is `None`.
pub fn timing_csv(table: Option<&TimingTable>) -> String {
    let mut out = String::from("stage");
    if let Some(t) = table {
        for r in &t.rows {
            out.push_str(&format!(",{}", r.method));
        }
        out.push('\n');
        for stage in Stage::ALL {
            out.push_str(&stage.to_string());
            for r in &t.rows {
                match r.median_ms.get(&stage).copied().flatten() {
                    Some(ms) => out.push_str(&format!(",{ms}")),
                    None => out.push_str(",-"),
                }
            }
            out.push('\n');
        }
        out.push_str("dim");
        for r in &t.rows {
            out.push_str(&format!(",{}", r.dim));
        }
    }
    out.push('\n');
    out
}

/// Writes the per-cell table and one CSV per figure/table analogue into
/// `dir` and returns the paths written.
///
/// * `sweep_cells.csv`: `method,d,e,seed,ssd,error` (one row per cell);
/// * `fig8_ssd.csv`: aggregates for fullspace and Momentum-trained models;
/// * `fig9_ssd.csv`: aggregates for Adam-trained models;
/// * `fig6_fields.csv`: `method,d,e,seed,row,v_0..v_{n-1}`, one line per grid row;
/// * `table2_timing.csv`: see [`timing_csv`].
pub fn export_results(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();

    let mut cells = format!("{CELLS_HEADER}\n");
    for c in &result.cells {
        let (ssd, err) = match &c.outcome {
            Ok(v) => (v.to_string(), String::new()),
            Err(msg) => (String::new(), msg.replace([',', '\n'], ";")),
        };
        cells.push_str(&format!(
            "{},{},{},{},{ssd},{err}\n",
            c.method, c.d, c.e, c.seed
        ));
    }
    written.push(write(dir.join(CELLS_FILE), &cells)?);

    let aggs = result.aggregates();
    let is_adam = |a: &&Aggregate| a.method.optimizer == Some(OptimizerKind::Adam);
    written.push(write(
        dir.join(FIG8_FILE),
        &aggregate_csv(aggs.iter().filter(|a| !is_adam(a))),
    )?);
    written.push(write(
        dir.join(FIG9_FILE),
        &aggregate_csv(aggs.iter().filter(is_adam)),
    )?);

    let width = result.fields.first().map_or(21, |f| f.field.n());
    let mut fig6 = String::from("method,d,e,seed,row");
    for j in 0..width {
        fig6.push_str(&format!(",v_{j}"));
    }
    fig6.push('\n');
    for f in &result.fields {
        for row in 0..f.field.n() {
            fig6.push_str(&format!("{},{},{},{},{row}", f.method, f.d, f.e, f.seed));
            for v in f.field.row(row) {
                fig6.push_str(&format!(",{v}"));
            }
            fig6.push('\n');
        }
    }
    written.push(write(dir.join(FIG6_FILE), &fig6)?);

    written.push(write(
        dir.join(TABLE2_FILE),
        &timing_csv(result.timing.as_ref()),
    )?);
    Ok(written)
}

/// Reads a `sweep_cells.csv` written by [`export_results`].
pub fn read_cells(path: &Path) -> Result<Vec<Cell>> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(CELLS_HEADER) {
        return Err(HarnessError::Parse("missing cells header".into()));
    }
    let bad = |m: String| HarnessError::Parse(m);
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let parts: Vec<&str> = line.splitn(6, ',').collect();
            if parts.len() != 6 {
                return Err(bad(format!("bad cell line `{line}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
            let outcome = if parts[5].is_empty() {
                Ok(num(parts[4])?)
            } else {
                Err(parts[5].to_string())
            };
            Ok(Cell {
                method: parts[0].parse().map_err(bad)?,
                d: num(parts[1])?,
                e: num(parts[2])?,
                seed: parts[3]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                outcome,
            })
        })
        .collect()
}
