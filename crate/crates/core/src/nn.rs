//! Dense tanh networks with exact backpropagation, the Momentum and Adam
//! learners, and a seeded minibatch training loop.
//!
//! Activations are stored batch-major: one row per sample. A layer maps
//! `a · W + b` with `W` shaped `fan_in × fan_out` and `b` a `1 × fan_out` row.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// The one generator type used for init, shuffling and noise.
pub type SeededRng = ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("activations do not belong to this network: {0}")]
    StaleActivations(String),
    #[error("non-finite gradient in parameter block {block}")]
    NonFiniteGradient { block: usize },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid training schedule: {0}")]
    Schedule(String),
    #[error("malformed model text: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, z: &mut DMatrix<f64>) {
        if self == Activation::Tanh {
            z.apply(|v| *v = v.tanh());
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the output `a`.
    fn backprop(self, grad: &mut DMatrix<f64>, a: &DMatrix<f64>) {
        if self == Activation::Tanh {
            grad.zip_apply(a, |g, a| *g *= 1.0 - a * a);
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Tanh => f.write_str("tanh"),
            Activation::Linear => f.write_str("linear"),
        }
    }
}

impl FromStr for Activation {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            other => Err(NetError::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DMatrix<f64>>,
    activations: Vec<Activation>,
}

/// Every layer's output for one batch; `layers[0]` is the input.
#[derive(Debug, Clone)]
pub struct Activations {
    pub layers: Vec<DMatrix<f64>>,
}

impl Activations {
    pub fn output(&self) -> &DMatrix<f64> {
        self.layers
            .last()
            .expect("activations always hold the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DMatrix<f64>>,
    /// Gradient with respect to the network input.
    pub input: DMatrix<f64>,
}

impl Gradients {
    /// Interleaved `[W0, b0, W1, b1, ...]`, matching [`Mlp::params_mut`].
    pub fn into_blocks(self) -> Vec<DMatrix<f64>> {
        self.weights
            .into_iter()
            .zip(self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

impl Mlp {
    /// All-zero network. `activations[l]` applies to the output of layer `l`.
    pub fn zeros(layer_sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(NetError::Shape("need at least one layer".into()));
        }
        if activations.len() != layer_sizes.len() - 1 {
            return Err(NetError::Shape(format!(
                "{} layers but {} activations",
                layer_sizes.len() - 1,
                activations.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(NetError::Shape("zero-width layer".into()));
        }
        let weights = layer_sizes
            .windows(2)
            .map(|w| DMatrix::zeros(w[0], w[1]))
            .collect();
        let biases = layer_sizes[1..]
            .iter()
            .map(|&n| DMatrix::zeros(1, n))
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activations: activations.to_vec(),
        })
    }

    /// Hidden layers tanh, output layer `output`.
    pub fn with_output(layer_sizes: &[usize], output: Activation) -> Result<Self> {
        let n = layer_sizes.len().saturating_sub(1);
        let mut acts = vec![Activation::Tanh; n];
        if let Some(last) = acts.last_mut() {
            *last = output;
        }
        Self::zeros(layer_sizes, &acts)
    }

    /// Glorot-uniform weights for every layer, in layer order.
    pub fn init_glorot(&mut self, rng: &mut SeededRng) {
        for layer in 0..self.num_layers() {
            let cols = self.layer_sizes[layer + 1];
            self.init_columns(layer, 0..cols, rng);
        }
    }

    /// Glorot-uniform fill of `columns` of one weight matrix, bound
    /// `sqrt(6/(fan_in + columns.len()))`, drawn row by row.
    pub fn init_columns(
        &mut self,
        layer: usize,
        columns: std::ops::Range<usize>,
        rng: &mut SeededRng,
    ) {
        let fan_in = self.layer_sizes[layer];
        let limit = (6.0 / (fan_in + columns.len()) as f64).sqrt();
        let w = &mut self.weights[layer];
        for i in 0..fan_in {
            for j in columns.clone() {
                w[(i, j)] = rng.random_range(-limit..limit);
            }
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn weights(&self, layer: usize) -> &DMatrix<f64> {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut DMatrix<f64> {
        &mut self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &DMatrix<f64> {
        &self.biases[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut DMatrix<f64> {
        &mut self.biases[layer]
    }

    /// Interleaved `[W0, b0, W1, b1, ...]`.
    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, batch: &DMatrix<f64>) -> Result<Activations> {
        if batch.ncols() != self.input_width() {
            return Err(NetError::Shape(format!(
                "batch width {} but network expects {}",
                batch.ncols(),
                self.input_width()
            )));
        }
        let mut layers = Vec::with_capacity(self.num_layers() + 1);
        layers.push(batch.clone());
        for l in 0..self.num_layers() {
            let mut z = &layers[l] * &self.weights[l];
            for (j, mut col) in z.column_iter_mut().enumerate() {
                col.add_scalar_mut(self.biases[l][(0, j)]);
            }
            self.activations[l].apply(&mut z);
            layers.push(z);
        }
        Ok(Activations { layers })
    }

    /// Convenience forward returning only the output.
    pub fn predict(&self, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(batch)?.layers.pop().unwrap())
    }

    /// Gradients of a scalar loss given `output_grad = ∂loss/∂output`.
    pub fn backward(&self, acts: &Activations, output_grad: &DMatrix<f64>) -> Result<Gradients> {
        if acts.layers.len() != self.num_layers() + 1 {
            return Err(NetError::StaleActivations(format!(
                "{} activation layers for a {}-layer network",
                acts.layers.len(),
                self.num_layers()
            )));
        }
        let rows = acts.layers[0].nrows();
        for (l, a) in acts.layers.iter().enumerate() {
            if a.ncols() != self.layer_sizes[l] || a.nrows() != rows {
                return Err(NetError::StaleActivations(format!(
                    "layer {l} activation is {}x{}",
                    a.nrows(),
                    a.ncols()
                )));
            }
        }
        if output_grad.shape() != acts.output().shape() {
            return Err(NetError::Shape(format!(
                "output gradient {:?} vs output {:?}",
                output_grad.shape(),
                acts.output().shape()
            )));
        }

        let n = self.num_layers();
        let mut weights = vec![DMatrix::zeros(0, 0); n];
        let mut biases = vec![DMatrix::zeros(0, 0); n];
        let mut delta = output_grad.clone();
        self.activations[n - 1].backprop(&mut delta, &acts.layers[n]);
        for l in (0..n).rev() {
            weights[l] = acts.layers[l].tr_mul(&delta);
            biases[l] =
                DMatrix::from_iterator(1, delta.ncols(), delta.column_iter().map(|c| c.sum()));
            let mut upstream = &delta * self.weights[l].transpose();
            if l > 0 {
                self.activations[l - 1].backprop(&mut upstream, &acts.layers[l]);
            }
            delta = upstream;
        }
        Ok(Gradients {
            weights,
            biases,
            input: delta,
        })
    }

    /// Text block: `mlp layers=.. activations=..`, then each layer's weights
    /// (one row per line) and bias, shortest round-trip decimals.
    pub fn write_text(&self, out: &mut String) {
        let sizes: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        let acts: Vec<String> = self.activations.iter().map(|a| a.to_string()).collect();
        out.push_str(&format!(
            "mlp layers={} activations={}\n",
            sizes.join(","),
            acts.join(",")
        ));
        for l in 0..self.num_layers() {
            let w = &self.weights[l];
            out.push_str(&format!("weights {l} {}x{}\n", w.nrows(), w.ncols()));
            for row in w.row_iter() {
                push_row(out, row.iter());
            }
            out.push_str(&format!("bias {l} {}\n", self.biases[l].len()));
            push_row(out, self.biases[l].iter());
        }
    }

    /// Parses one block written by [`Mlp::write_text`].
    pub fn read_text<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<Self> {
        let header = next_line(lines)?;
        let rest = header
            .strip_prefix("mlp ")
            .ok_or_else(|| NetError::Parse(format!("expected mlp header, got `{header}`")))?;
        let mut sizes = None;
        let mut acts = None;
        for part in rest.split_whitespace() {
            match part.split_once('=') {
                Some(("layers", v)) => {
                    sizes = Some(
                        v.split(',')
                            .map(|s| s.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| NetError::Parse(e.to_string()))?,
                    )
                }
                Some(("activations", v)) => {
                    acts = Some(
                        v.split(',')
                            .map(str::parse)
                            .collect::<Result<Vec<Activation>>>()?,
                    )
                }
                _ => return Err(NetError::Parse(format!("unknown mlp field `{part}`"))),
            }
        }
        let sizes = sizes.ok_or_else(|| NetError::Parse("missing layers".into()))?;
        let acts = acts.ok_or_else(|| NetError::Parse("missing activations".into()))?;
        let mut net = Mlp::zeros(&sizes, &acts)?;
        for l in 0..net.num_layers() {
            let (rows, cols) = (sizes[l], sizes[l + 1]);
            expect_line(lines, &format!("weights {l} {rows}x{cols}"))?;
            for i in 0..rows {
                let vals = parse_row(next_line(lines)?, cols)?;
                for (j, v) in vals.into_iter().enumerate() {
                    net.weights[l][(i, j)] = v;
                }
            }
            expect_line(lines, &format!("bias {l} {cols}"))?;
            let vals = parse_row(next_line(lines)?, cols)?;
            net.biases[l] = DMatrix::from_row_slice(1, cols, &vals);
        }
        Ok(net)
    }
}

fn push_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(',');
        }
        first = false;
        out.push_str(&v.to_string());
    }
    out.push('\n');
}

pub(crate) fn next_line<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<&'a str> {
    lines
        .next()
        .map(str::trim)
        .ok_or_else(|| NetError::Parse("unexpected end of file".into()))
}

fn expect_line<'a>(lines: &mut impl Iterator<Item = &'a str>, want: &str) -> Result<()> {
    let got = next_line(lines)?;
    if got != want {
        return Err(NetError::Parse(format!("expected `{want}`, got `{got}`")));
    }
    Ok(())
}

fn parse_row(line: &str, expected: usize) -> Result<Vec<f64>> {
    let vals = line
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| NetError::Parse(e.to_string()))?;
    if vals.len() != expected {
        return Err(NetError::Parse(format!(
            "expected {expected} values, got {}",
            vals.len()
        )));
    }
    Ok(vals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OptimizerKind {
    Momentum,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Momentum => f.write_str("momentum"),
            OptimizerKind::Adam => f.write_str("adam"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "momentum" => Ok(OptimizerKind::Momentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Momentum coefficient γ.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn momentum(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Momentum,
            learning_rate,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::momentum(learning_rate)
        }
    }

    /// Learning rate paired with each learner by default: Adam 1e-3,
    /// Momentum 1e-5.
    pub fn default_for(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Momentum => Self::momentum(1e-5),
            OptimizerKind::Adam => Self::adam(1e-3),
        }
    }
}

/// Learner state. Buffers are allocated on the first step and must stay
/// shape-congruent with the parameter blocks afterwards.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    /// Velocity (Momentum) or first moment (Adam).
    first: Vec<DMatrix<f64>>,
    /// Second moment (Adam only).
    second: Vec<DMatrix<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn velocity(&self) -> &[DMatrix<f64>] {
        &self.first
    }

    pub fn step(&mut self, params: &mut [&mut DMatrix<f64>], grads: &[DMatrix<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NetError::Shape(format!(
                "{} parameter blocks but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(NetError::Shape(format!(
                    "block {k}: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(NetError::NonFiniteGradient { block: k });
            }
        }
        if self.first.is_empty() {
            self.first = grads
                .iter()
                .map(|g| DMatrix::zeros(g.nrows(), g.ncols()))
                .collect();
            if self.config.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        } else if self.first.len() != grads.len()
            || self
                .first
                .iter()
                .zip(grads)
                .any(|(b, g)| b.shape() != g.shape())
        {
            return Err(NetError::Shape(
                "parameter blocks changed between steps".into(),
            ));
        }

        self.steps += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::Momentum => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    v.zip_apply(g, |v, g| *v = c.momentum * *v - c.learning_rate * g);
                    **p += &*v;
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((p, g), m), s) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    m.zip_apply(g, |m, g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
                    s.zip_apply(g, |s, g| *s = c.beta2 * *s + (1.0 - c.beta2) * g * g);
                    for ((p, m), s) in p.iter_mut().zip(m.iter()).zip(s.iter()) {
                        let m_hat = m / bc1;
                        let s_hat = s / bc2;
                        *p -= c.learning_rate * m_hat / (s_hat.sqrt() + c.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-iteration loss; `rec` and `kld` are zero where not applicable.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossRecord {
    pub total: f64,
    pub rec: f64,
    pub kld: f64,
}

/// Something trainable by [`train`]: parameters plus a minibatch loss with
/// gradients in the same block order as `params_mut`.
pub trait Objective {
    fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>>;

    fn loss_and_grads(
        &self,
        batch: &DMatrix<f64>,
        rng: &mut SeededRng,
    ) -> Result<(LossRecord, Vec<DMatrix<f64>>)>;
}

/// `½Σ(V−V′)²` summed over coordinates, averaged over the batch.
pub fn half_sse_mean(output: &DMatrix<f64>, target: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let rows = output.nrows().max(1) as f64;
    let diff = output - target;
    let loss = 0.5 * diff.norm_squared() / rows;
    (loss, diff / rows)
}

/// An MLP trained to reproduce its input.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub net: Mlp,
}

impl Objective for Reconstruction {
    fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.net.params_mut()
    }

    fn loss_and_grads(
        &self,
        batch: &DMatrix<f64>,
        _rng: &mut SeededRng,
    ) -> Result<(LossRecord, Vec<DMatrix<f64>>)> {
        let acts = self.net.forward(batch)?;
        let (loss, grad) = half_sse_mean(acts.output(), batch);
        let grads = self.net.backward(&acts, &grad)?;
        Ok((
            LossRecord {
                total: loss,
                rec: loss,
                kld: 0.0,
            },
            grads.into_blocks(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub max_iterations: usize,
    pub minibatch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            minibatch_size: 20,
        }
    }
}

/// Runs exactly `max_iterations` minibatch steps over the rows of `data`.
///
/// Minibatches are consecutive slices of a shuffled index permutation; a
/// fresh permutation is drawn whenever fewer than `minibatch_size` indices
/// remain. All randomness comes from `rng`.
pub fn train<O: Objective>(
    objective: &mut O,
    data: &DMatrix<f64>,
    optimizer: &mut Optimizer,
    schedule: &Schedule,
    rng: &mut SeededRng,
) -> Result<Vec<LossRecord>> {
    let m = data.nrows();
    if m == 0 {
        return Err(NetError::Schedule("empty dataset".into()));
    }
    if schedule.minibatch_size == 0 || schedule.minibatch_size > m {
        return Err(NetError::Schedule(format!(
            "minibatch size {} for {m} samples",
            schedule.minibatch_size
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    let mut cursor = m;
    let mut history = Vec::with_capacity(schedule.max_iterations);
    for iteration in 0..schedule.max_iterations {
        if cursor + schedule.minibatch_size > m {
            order.shuffle(rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + schedule.minibatch_size];
        cursor += schedule.minibatch_size;
        let batch = data.select_rows(idx);
        let (loss, grads) = objective.loss_and_grads(&batch, rng)?;
        if !loss.total.is_finite() {
            return Err(NetError::NonFiniteLoss { iteration });
        }
        optimizer.step(&mut objective.params_mut(), &grads)?;
        history.push(loss);
    }
    Ok(history)
}

/// Stacks equal-length rows into a batch matrix.
pub fn rows_to_matrix(rows: &[&[f64]]) -> Result<DMatrix<f64>> {
    let width = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != width) {
        return Err(NetError::Shape("ragged rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}
