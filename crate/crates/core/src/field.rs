//! Parametric air-filled capacitor: boundary geometry, SOR solution of the
//! discrete Laplace equation, downsampling to the model grid and dataset
//! generation.
//!
//! The unit box `[0,1]²` is sampled on an `n × n` node grid with row `i` at
//! `y = i/(n-1)` and column `j` at `x = j/(n-1)`. The outer walls are grounded.
//! Two horizontal plates at `y = 0.5 ± d/2` span `x ∈ [a, b]` and are held at
//! `±v0`.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid capacitor config: {0}")]
    InvalidConfig(String),
    #[error("plate row snaps onto the outer wall (row {row}) while d = {d} < 1")]
    DegenerateGeometry { d: f64, row: usize },
    #[error("plates collapse onto the same grid row {row} for d = {d}; refine the grid")]
    Resolution { d: f64, row: usize },
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("SOR did not converge in {sweeps} sweeps (last max update {residual:e})")]
    NotConverged { sweeps: usize, residual: f64 },
    #[error(
        "cannot downsample {fine} nodes to {coarse}: (fine-1) must be a multiple of (coarse-1)"
    )]
    Divisibility { fine: usize, coarse: usize },
    #[error("sample d = {d}: {source}")]
    Sample {
        d: f64,
        #[source]
        source: Box<SolverError>,
    },
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// Geometry and boundary parameters of the capacitor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacitorConfig {
    /// Left plate edge, dimensionless x.
    pub a: f64,
    /// Right plate edge, dimensionless x.
    pub b: f64,
    /// Plate separation (the dynamic parameter).
    pub d: f64,
    /// Plate potential magnitude.
    pub v0: f64,
    /// Nodes per side of the solve grid.
    pub fine_n: usize,
    /// Nodes per side of the model grid.
    pub coarse_n: usize,
}

impl Default for CapacitorConfig {
    fn default() -> Self {
        Self {
            a: 0.25,
            b: 0.75,
            d: 0.5,
            v0: 1.0,
            fine_n: 401,
            coarse_n: 21,
        }
    }
}

impl CapacitorConfig {
    pub fn with_d(mut self, d: f64) -> Self {
        self.d = d;
        self
    }

    pub fn with_fine_n(mut self, fine_n: usize) -> Self {
        self.fine_n = fine_n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SolverError::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.a) || !(0.0..=1.0).contains(&self.b) || self.a >= self.b {
            return bad(format!(
                "need 0 <= a < b <= 1, got a={}, b={}",
                self.a, self.b
            ));
        }
        if !(0.0..=1.0).contains(&self.d) {
            return bad(format!("d must lie in [0,1], got {}", self.d));
        }
        if !(self.v0 > 0.0 && self.v0.is_finite()) {
            return bad(format!("v0 must be positive, got {}", self.v0));
        }
        if self.fine_n < 3 || self.coarse_n < 2 {
            return bad(format!(
                "grid too small: fine_n={}, coarse_n={}",
                self.fine_n, self.coarse_n
            ));
        }
        if (self.fine_n - 1) % (self.coarse_n - 1) != 0 {
            return Err(SolverError::Divisibility {
                fine: self.fine_n,
                coarse: self.coarse_n,
            });
        }
        Ok(())
    }
}

/// Dirichlet data on an `n × n` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMask {
    n: usize,
    fixed: Vec<bool>,
    value: Vec<f64>,
    plate_rows: Option<(usize, usize)>,
}

impl BoundaryMask {
    /// Grounded box with no plates.
    pub fn grounded(n: usize) -> Self {
        let mut fixed = vec![false; n * n];
        for k in 0..n {
            fixed[k] = true;
            fixed[(n - 1) * n + k] = true;
            fixed[k * n] = true;
            fixed[k * n + n - 1] = true;
        }
        Self {
            n,
            fixed,
            value: vec![0.0; n * n],
            plate_rows: None,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_fixed(&self, row: usize, col: usize) -> bool {
        self.fixed[row * self.n + col]
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.value[row * self.n + col]
    }

    /// `(upper, lower)` plate rows, if plates are present.
    pub fn plate_rows(&self) -> Option<(usize, usize)> {
        self.plate_rows
    }

    fn set(&mut self, row: usize, col: usize, v: f64) {
        let k = row * self.n + col;
        self.fixed[k] = true;
        self.value[k] = v;
    }
}

/// Fixes the grounded walls and the two plates of `config` on its fine grid.
///
/// The upper plate row is `round((0.5 + d/2)(n-1))`; the lower row is its
/// mirror `(n-1) - upper`, so the mask is exactly antisymmetric about
/// `y = 0.5`. Plate columns are the nodes with `x ∈ [a, b]`. At `d = 1` the
/// plates lie on the top and bottom walls and override the ground there.
pub fn build_boundary_mask(config: &CapacitorConfig) -> Result<BoundaryMask> {
    config.validate()?;
    let n = config.fine_n;
    let last = (n - 1) as f64;
    let upper = ((0.5 + 0.5 * config.d) * last).round() as usize;
    let lower = n - 1 - upper;
    if upper == lower {
        return Err(SolverError::Resolution {
            d: config.d,
            row: upper,
        });
    }
    if config.d < 1.0 && upper == n - 1 {
        return Err(SolverError::DegenerateGeometry {
            d: config.d,
            row: upper,
        });
    }

    // Nodes within 1e-9 of a plate edge count as on the plate.
    let col_lo = (config.a * last - 1e-9).ceil().max(0.0) as usize;
    let col_hi = ((config.b * last + 1e-9).floor() as usize).min(n - 1);

    let mut mask = BoundaryMask::grounded(n);
    for col in col_lo..=col_hi {
        mask.set(upper, col, config.v0);
        mask.set(lower, col, -config.v0);
    }
    mask.plate_rows = Some((upper, lower));
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldUnit {
    Volts,
    /// Divided by the plate potential, so values lie in `[-1, 1]`.
    Normalized,
}

impl fmt::Display for FieldUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldUnit::Volts => f.write_str("volts"),
            FieldUnit::Normalized => f.write_str("normalized"),
        }
    }
}

/// Square grid of potentials, row-major, row 0 at `y = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    n: usize,
    values: Vec<f64>,
    unit: FieldUnit,
}

impl FieldGrid {
    pub fn new(n: usize, values: Vec<f64>, unit: FieldUnit) -> Result<Self> {
        if values.len() != n * n {
            return Err(SolverError::InvalidConfig(format!(
                "field of {} values is not {n}x{n}",
                values.len()
            )));
        }
        Ok(Self { n, values, unit })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn unit(&self) -> FieldUnit {
        self.unit
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.n..(row + 1) * self.n]
    }

    /// Divides a volts field by `v0`.
    pub fn normalized(&self, v0: f64) -> FieldGrid {
        match self.unit {
            FieldUnit::Normalized => self.clone(),
            FieldUnit::Volts => FieldGrid {
                n: self.n,
                values: self.values.iter().map(|v| v / v0).collect(),
                unit: FieldUnit::Normalized,
            },
        }
    }

    /// Multiplies a normalized field by `v0`.
    pub fn in_volts(&self, v0: f64) -> FieldGrid {
        match self.unit {
            FieldUnit::Volts => self.clone(),
            FieldUnit::Normalized => FieldGrid {
                n: self.n,
                values: self.values.iter().map(|v| v * v0).collect(),
                unit: FieldUnit::Volts,
            },
        }
    }

    /// Max-abs 5-point Laplacian residual over free nodes.
    pub fn laplace_residual(&self, mask: &BoundaryMask) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                if mask.is_fixed(i, j) {
                    continue;
                }
                let k = i * n + j;
                let v = &self.values;
                let r = v[k + n] + v[k - n] + v[k - 1] + v[k + 1] - 4.0 * v[k];
                worst = worst.max(r.abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SorOptions {
    pub omega: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl SorOptions {
    /// `omega = 2/(1 + sin(π/n))`, `tol = 1e-6·v0`, 100k sweeps.
    pub fn for_grid(n: usize, v0: f64) -> Self {
        Self {
            omega: 2.0 / (1.0 + (std::f64::consts::PI / n as f64).sin()),
            tol: 1e-6 * v0,
            max_sweeps: 100_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1.0..2.0).contains(&self.omega) {
            return Err(SolverError::InvalidOptions(format!(
                "omega must lie in [1,2), got {}",
                self.omega
            )));
        }
        if !(self.tol > 0.0) {
            return Err(SolverError::InvalidOptions(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Red-black successive over-relaxation from a zero initial guess (Dirichlet
/// nodes start at their prescribed values).
///
/// Stops after the first sweep whose largest absolute node update is below
/// `tol`. Within one colour the updates are independent, so the result does
/// not depend on traversal order and mirror-symmetric data gives an exactly
/// mirror-symmetric field.
pub fn solve_sor(mask: &BoundaryMask, options: &SorOptions) -> Result<FieldGrid> {
    options.validate()?;
    let n = mask.n;
    let mut v = mask.value.clone();
    let omega = options.omega;
    let mut last = f64::INFINITY;
    for _sweep in 0..options.max_sweeps {
        let mut max_update = 0.0f64;
        for colour in 0..2 {
            for i in 1..n - 1 {
                let start = 1 + (i + 1 + colour) % 2;
                let row = i * n;
                for j in (start..n - 1).step_by(2) {
                    let k = row + j;
                    if mask.fixed[k] {
                        continue;
                    }
                    let avg = ((v[k + n] + v[k - n]) + (v[k - 1] + v[k + 1])) * 0.25;
                    let delta = omega * (avg - v[k]);
                    v[k] += delta;
                    max_update = max_update.max(delta.abs());
                }
            }
        }
        last = max_update;
        if max_update < options.tol {
            return Ok(FieldGrid {
                n,
                values: v,
                unit: FieldUnit::Volts,
            });
        }
    }
    Err(SolverError::NotConverged {
        sweeps: options.max_sweeps,
        residual: last,
    })
}

/// Keeps every k-th node, `k = (n-1)/(coarse_n-1)`.
pub fn downsample(fine: &FieldGrid, coarse_n: usize) -> Result<FieldGrid> {
    let n = fine.n;
    if coarse_n < 2 || n < 2 || (n - 1) % (coarse_n - 1) != 0 {
        return Err(SolverError::Divisibility {
            fine: n,
            coarse: coarse_n,
        });
    }
    let k = (n - 1) / (coarse_n - 1);
    let mut values = Vec::with_capacity(coarse_n * coarse_n);
    for i in 0..coarse_n {
        for j in 0..coarse_n {
            values.push(fine.get(i * k, j * k));
        }
    }
    Ok(FieldGrid {
        n: coarse_n,
        values,
        unit: fine.unit,
    })
}

/// One `(d, field)` pair; the field is flattened row-major and normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub d: f64,
    pub field: Vec<f64>,
}

impl Record {
    pub fn grid(&self, n: usize) -> FieldGrid {
        FieldGrid {
            n,
            values: self.field.clone(),
            unit: FieldUnit::Normalized,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: usize,
    pub v0: f64,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn width(&self) -> usize {
        self.grid * self.grid
    }

    pub fn d_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.d).collect()
    }

    pub fn fields(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.field.as_slice()).collect()
    }

    /// Record whose `d` is closest to `target` (first on ties).
    pub fn nearest(&self, target: f64) -> Option<&Record> {
        self.records.iter().min_by(|x, y| {
            (x.d - target)
                .abs()
                .partial_cmp(&(y.d - target).abs())
                .unwrap()
        })
    }

    /// Plain-text CSV: `grid=N,count=M,v0=V` header then `d,v_0,...` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("grid={},count={},v0={}\n", self.grid, self.len(), self.v0);
        for r in &self.records {
            out.push_str(&r.d.to_string());
            for v in &r.field {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or("empty dataset file")?;
        let (mut grid, mut count, mut v0) = (None, None, None);
        for part in header.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("malformed header field `{part}`"))?;
            match key.trim() {
                "grid" => grid = value.trim().parse::<usize>().ok(),
                "count" => count = value.trim().parse::<usize>().ok(),
                "v0" => v0 = value.trim().parse::<f64>().ok(),
                other => return Err(format!("unknown header key `{other}`")),
            }
        }
        let grid = grid.ok_or("header missing grid")?;
        let count = count.ok_or("header missing count")?;
        let v0 = v0.ok_or("header missing v0")?;
        let mut records = Vec::with_capacity(count);
        for (lineno, line) in lines.enumerate() {
            let nums = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format!("record {lineno}: {e}"))?;
            if nums.len() != grid * grid + 1 {
                return Err(format!(
                    "record {lineno}: expected {} values, got {}",
                    grid * grid + 1,
                    nums.len()
                ));
            }
            records.push(Record {
                d: nums[0],
                field: nums[1..].to_vec(),
            });
        }
        if records.len() != count {
            return Err(format!(
                "header says {count} records, found {}",
                records.len()
            ));
        }
        Ok(Self { grid, v0, records })
    }
}

/// Solves one configuration and returns its normalized coarse field.
pub fn solve_config(config: &CapacitorConfig, options: &SorOptions) -> Result<FieldGrid> {
    let mask = build_boundary_mask(config)?;
    let fine = solve_sor(&mask, options)?;
    Ok(downsample(&fine, config.coarse_n)?.normalized(config.v0))
}

/// Solves every `d` in parallel; records come back sorted by ascending `d`.
/// `options = None` picks [`SorOptions::for_grid`] for the base fine grid.
pub fn generate_dataset(
    d_values: &[f64],
    base: &CapacitorConfig,
    options: Option<SorOptions>,
) -> Result<Dataset> {
    let options = options.unwrap_or_else(|| SorOptions::for_grid(base.fine_n, base.v0));
    let mut records = d_values
        .par_iter()
        .map(|&d| {
            solve_config(&base.with_d(d), &options)
                .map(|grid| Record {
                    d,
                    field: grid.into_values(),
                })
                .map_err(|e| SolverError::Sample {
                    d,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|x, y| x.d.total_cmp(&y.d));
    Ok(Dataset {
        grid: base.coarse_n,
        v0: base.v0,
        records,
    })
}

/// `count` points evenly spaced on `[lo, hi]`, endpoints included.
pub fn uniform_d_values(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Default training separations: 120 points on `[0.1, 0.9]`.
pub fn training_d_values() -> Vec<f64> {
    uniform_d_values(0.1, 0.9, 120)
}

/// Groundtruth panel separations plus the 0.36 reconstruction case.
pub fn test_d_values() -> Vec<f64> {
    vec![0.3, 0.36, 0.4, 0.5, 0.6, 0.7, 0.8]
}
