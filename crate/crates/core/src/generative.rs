//! Autoencoder and variational autoencoder over flattened fields.
//!
//! The encoder maps a field to `Z` linear outputs (AE: the code `μ`) or `2Z`
//! linear outputs (VAE: `μ` followed by the log-variance `lv`, with
//! `σ = exp(lv/2)`). The decoder maps a `Z`-vector back to a field through a
//! tanh output layer. Training minimizes
//! `½Σ(V−V′)² + β·½Σ(σ² + μ² − ln σ² − 1)`, summed over coordinates and
//! averaged over the minibatch.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::field::{FieldGrid, FieldUnit};
use crate::nn::{
    self, half_sse_mean, Activation, LossRecord, Mlp, NetError, Objective, Optimizer,
    OptimizerConfig, OptimizerKind, Schedule, SeededRng,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("sigma must be positive (index {index}, value {value})")]
    NonPositiveSigma { index: usize, value: f64 },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Ae,
    Vae,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Ae => f.write_str("ae"),
            ModelKind::Vae => f.write_str("vae"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(ModelKind::Ae),
            "vae" => Ok(ModelKind::Vae),
            other => Err(format!("unknown model kind `{other}`")),
        }
    }
}

/// A `Z`-dimensional latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Deterministic encoder output. `sigma` is present for VAE only.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub mu: LatentVector,
    pub sigma: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeModel {
    kind: ModelKind,
    latent_dim: usize,
    encoder: Mlp,
    decoder: Mlp,
    /// Learner the model was trained with, if known.
    optimizer: Option<OptimizerKind>,
}

impl GenerativeModel {
    /// Untrained model `input-hidden..-Z-..hidden-input` with zero weights.
    pub fn zeros(
        kind: ModelKind,
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
    ) -> Result<Self> {
        let heads = match kind {
            ModelKind::Ae => latent_dim,
            ModelKind::Vae => 2 * latent_dim,
        };
        let mut enc_sizes = vec![input_dim];
        enc_sizes.extend_from_slice(hidden);
        enc_sizes.push(heads);
        let mut dec_sizes = vec![latent_dim];
        dec_sizes.extend(hidden.iter().rev());
        dec_sizes.push(input_dim);
        Ok(Self {
            kind,
            latent_dim,
            encoder: Mlp::with_output(&enc_sizes, Activation::Linear)?,
            decoder: Mlp::with_output(&dec_sizes, Activation::Tanh)?,
            optimizer: None,
        })
    }

    /// Glorot-initialized model.
    ///
    /// Draw order: encoder hidden layers, the `μ` head, then the decoder. The
    /// VAE `lv` head comes from a separate stream of a copy of `rng`, so an AE
    /// and a VAE built from the same generator share every other parameter
    /// and leave `rng` in the same state.
    pub fn initialized(
        kind: ModelKind,
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut model = Self::zeros(kind, input_dim, hidden, latent_dim)?;
        let head = model.encoder.num_layers() - 1;
        for l in 0..head {
            let cols = model.encoder.layer_sizes()[l + 1];
            model.encoder.init_columns(l, 0..cols, rng);
        }
        model.encoder.init_columns(head, 0..latent_dim, rng);
        model.decoder.init_glorot(rng);
        if kind == ModelKind::Vae {
            let mut side = rng.clone();
            side.set_stream(rng.get_stream().wrapping_add(1));
            model
                .encoder
                .init_columns(head, latent_dim..2 * latent_dim, &mut side);
        }
        Ok(model)
    }

    pub fn from_parts(kind: ModelKind, encoder: Mlp, decoder: Mlp) -> Result<Self> {
        let latent_dim = decoder.input_width();
        let heads = match kind {
            ModelKind::Ae => latent_dim,
            ModelKind::Vae => 2 * latent_dim,
        };
        if encoder.output_width() != heads {
            return Err(ModelError::Invalid(format!(
                "{kind} encoder must output {heads} values, has {}",
                encoder.output_width()
            )));
        }
        if encoder.input_width() != decoder.output_width() {
            return Err(ModelError::Invalid(format!(
                "encoder input {} differs from decoder output {}",
                encoder.input_width(),
                decoder.output_width()
            )));
        }
        Ok(Self {
            kind,
            latent_dim,
            encoder,
            decoder,
            optimizer: None,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    pub fn optimizer(&self) -> Option<OptimizerKind> {
        self.optimizer
    }

    pub fn set_optimizer(&mut self, optimizer: Option<OptimizerKind>) {
        self.optimizer = optimizer;
    }

    pub fn encode(&self, field: &[f64]) -> Result<Encoding> {
        check_len(self.input_dim(), field.len())?;
        let out = self
            .encoder
            .predict(&DMatrix::from_row_slice(1, field.len(), field))?;
        let z = self.latent_dim;
        let mu = LatentVector(out.iter().take(z).copied().collect());
        let sigma = match self.kind {
            ModelKind::Ae => None,
            ModelKind::Vae => Some(out.iter().skip(z).map(|lv| (0.5 * lv).exp()).collect()),
        };
        Ok(Encoding { mu, sigma })
    }

    /// `μ` codes for a batch of fields, one row per field.
    pub fn encode_means(&self, fields: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let out = self.encoder.predict(fields)?;
        Ok(out.columns(0, self.latent_dim).into_owned())
    }

    pub fn decode(&self, z: &LatentVector) -> Result<Vec<f64>> {
        check_len(self.latent_dim, z.len())?;
        let out = self
            .decoder
            .predict(&DMatrix::from_row_slice(1, z.len(), z.as_slice()))?;
        Ok(out.iter().copied().collect())
    }

    /// Decodes to an `n × n` grid; `v0 = Some(..)` converts back to volts.
    pub fn decode_field(&self, z: &LatentVector, v0: Option<f64>) -> Result<FieldGrid> {
        let values = self.decode(z)?;
        let n = (values.len() as f64).sqrt().round() as usize;
        let grid = FieldGrid::new(n, values, FieldUnit::Normalized)
            .map_err(|e| ModelError::Invalid(e.to_string()))?;
        Ok(match v0 {
            Some(v0) => grid.in_volts(v0),
            None => grid,
        })
    }

    /// Self-describing text: a `capinv-model` header, then the encoder and
    /// decoder blocks. Decimal values round-trip bit-exactly.
    pub fn to_text(&self) -> String {
        let opt = self.optimizer.map_or("none".to_string(), |o| o.to_string());
        let mut out = format!(
            "capinv-model kind={} latent={} optimizer={}\nencoder\n",
            self.kind, self.latent_dim, opt
        );
        self.encoder.write_text(&mut out);
        out.push_str("decoder\n");
        self.decoder.write_text(&mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = nn::next_line(&mut lines)?;
        let rest = header
            .strip_prefix("capinv-model ")
            .ok_or_else(|| ModelError::Invalid(format!("bad model header `{header}`")))?;
        let (mut kind, mut latent, mut optimizer) = (None, None, None);
        for part in rest.split_whitespace() {
            match part.split_once('=') {
                Some(("kind", v)) => {
                    kind = Some(v.parse::<ModelKind>().map_err(ModelError::Invalid)?)
                }
                Some(("latent", v)) => {
                    latent = Some(
                        v.parse::<usize>()
                            .map_err(|e| ModelError::Invalid(e.to_string()))?,
                    )
                }
                Some(("optimizer", "none")) => optimizer = None,
                Some(("optimizer", v)) => {
                    optimizer = Some(v.parse::<OptimizerKind>().map_err(ModelError::Invalid)?)
                }
                _ => {
                    return Err(ModelError::Invalid(format!(
                        "unknown header field `{part}`"
                    )))
                }
            }
        }
        let kind = kind.ok_or_else(|| ModelError::Invalid("missing kind".into()))?;
        let latent = latent.ok_or_else(|| ModelError::Invalid("missing latent".into()))?;
        expect(&mut lines, "encoder")?;
        let encoder = Mlp::read_text(&mut lines)?;
        expect(&mut lines, "decoder")?;
        let decoder = Mlp::read_text(&mut lines)?;
        let mut model = Self::from_parts(kind, encoder, decoder)?;
        if model.latent_dim != latent {
            return Err(ModelError::Invalid(format!(
                "header latent {latent} but decoder takes {}",
                model.latent_dim
            )));
        }
        model.optimizer = optimizer;
        Ok(model)
    }
}

fn expect<'a>(lines: &mut impl Iterator<Item = &'a str>, want: &str) -> Result<()> {
    let got = nn::next_line(lines)?;
    if got != want {
        return Err(ModelError::Invalid(format!(
            "expected `{want}`, got `{got}`"
        )));
    }
    Ok(())
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(ModelError::Length { expected, got });
    }
    Ok(())
}

/// `z = μ + σ⊙ε`. `σ = 0` is accepted.
pub fn sample_latent(mu: &LatentVector, sigma: &[f64], noise_draw: &[f64]) -> Result<LatentVector> {
    check_len(mu.len(), sigma.len())?;
    check_len(mu.len(), noise_draw.len())?;
    if let Some((index, &value)) = sigma.iter().enumerate().find(|(_, s)| !(**s >= 0.0)) {
        return Err(ModelError::NonPositiveSigma { index, value });
    }
    Ok(LatentVector(
        mu.0.iter()
            .zip(sigma)
            .zip(noise_draw)
            .map(|((m, s), e)| m + s * e)
            .collect(),
    ))
}

/// `½Σ(V−V′)²`.
pub fn rec_loss(v: &[f64], reconstructed: &[f64]) -> Result<f64> {
    check_len(v.len(), reconstructed.len())?;
    Ok(0.5
        * v.iter()
            .zip(reconstructed)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

/// `½Σ(σ² + μ² − ln σ² − 1)`.
pub fn kld_loss(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    check_len(mu.len(), sigma.len())?;
    let mut total = 0.0;
    for (index, (&m, &s)) in mu.iter().zip(sigma).enumerate() {
        if !(s > 0.0) {
            return Err(ModelError::NonPositiveSigma { index, value: s });
        }
        let s2 = s * s;
        total += s2 + m * m - s2.ln() - 1.0;
    }
    Ok(0.5 * total)
}

/// How the VAE draws `ε` during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// One standard-normal draw per sample per step.
    Sample,
    /// `ε = 0`; consumes no randomness.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub beta: f64,
    pub noise: NoiseMode,
}

impl TrainConfig {
    /// 441-200-20-200-441, 20k iterations, minibatch 20, β = 1, with the
    /// learner's default learning rate.
    pub fn standard(kind: ModelKind, optimizer: OptimizerKind) -> Self {
        Self {
            kind,
            hidden: vec![200],
            latent_dim: 20,
            optimizer: OptimizerConfig::default_for(optimizer),
            schedule: Schedule::default(),
            beta: 1.0,
            noise: NoiseMode::Sample,
        }
    }
}

/// Training objective wrapping a model; block order is encoder then decoder.
#[derive(Debug, Clone)]
pub struct GenerativeObjective {
    pub model: GenerativeModel,
    pub beta: f64,
    pub noise: NoiseMode,
}

/// Loss and gradients with an explicit `ε` (ignored for AE).
pub fn loss_with_noise(
    model: &GenerativeModel,
    beta: f64,
    batch: &DMatrix<f64>,
    eps: &DMatrix<f64>,
) -> Result<(LossRecord, Vec<DMatrix<f64>>)> {
    let rows = batch.nrows() as f64;
    let z_dim = model.latent_dim;
    let enc = model.encoder.forward(batch)?;
    let head = enc.output();

    let (z, mu, lv, sigma) = match model.kind {
        ModelKind::Ae => (head.clone(), None, None, None),
        ModelKind::Vae => {
            if eps.shape() != (batch.nrows(), z_dim) {
                return Err(ModelError::Invalid(format!(
                    "noise draw {:?} for batch of {} with Z = {z_dim}",
                    eps.shape(),
                    batch.nrows()
                )));
            }
            let mu = head.columns(0, z_dim).into_owned();
            let lv = head.columns(z_dim, z_dim).into_owned();
            let sigma = lv.map(|v| (0.5 * v).exp());
            let z = &mu + sigma.component_mul(eps);
            (z, Some(mu), Some(lv), Some(sigma))
        }
    };

    let dec = model.decoder.forward(&z)?;
    let (rec, out_grad) = half_sse_mean(dec.output(), batch);
    let dec_grads = model.decoder.backward(&dec, &out_grad)?;
    let gz = &dec_grads.input;

    let (kld, head_grad) = match (mu, lv, sigma) {
        (Some(mu), Some(lv), Some(sigma)) => {
            let mut kld = 0.0;
            for ((m, l), s) in mu.iter().zip(lv.iter()).zip(sigma.iter()) {
                kld += s * s + m * m - l - 1.0;
            }
            let kld = 0.5 * kld / rows;
            let g_mu = gz + &mu * (beta / rows);
            let mut g_lv = gz.component_mul(eps).component_mul(&sigma) * 0.5;
            g_lv.zip_apply(&sigma, |g, s| *g += beta * 0.5 * (s * s - 1.0) / rows);
            let mut head_grad = DMatrix::zeros(batch.nrows(), 2 * z_dim);
            head_grad.columns_mut(0, z_dim).copy_from(&g_mu);
            head_grad.columns_mut(z_dim, z_dim).copy_from(&g_lv);
            (kld, head_grad)
        }
        _ => (0.0, gz.clone()),
    };

    let enc_grads = model.encoder.backward(&enc, &head_grad)?;
    let mut blocks = enc_grads.into_blocks();
    blocks.extend(dec_grads.into_blocks());
    Ok((
        LossRecord {
            total: rec + beta * kld,
            rec,
            kld,
        },
        blocks,
    ))
}

impl Objective for GenerativeObjective {
    fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut p = self.model.encoder.params_mut();
        p.extend(self.model.decoder.params_mut());
        p
    }

    fn loss_and_grads(
        &self,
        batch: &DMatrix<f64>,
        rng: &mut SeededRng,
    ) -> std::result::Result<(LossRecord, Vec<DMatrix<f64>>), NetError> {
        let z = self.model.latent_dim;
        let eps = match (self.model.kind, self.noise) {
            (ModelKind::Vae, NoiseMode::Sample) => {
                let mut eps = DMatrix::zeros(batch.nrows(), z);
                for i in 0..batch.nrows() {
                    for j in 0..z {
                        eps[(i, j)] = StandardNormal.sample(rng);
                    }
                }
                eps
            }
            _ => DMatrix::zeros(batch.nrows(), z),
        };
        loss_with_noise(&self.model, self.beta, batch, &eps).map_err(|e| match e {
            ModelError::Net(n) => n,
            other => NetError::Shape(other.to_string()),
        })
    }
}

/// Trains a fresh model on `fields` (one row per normalized field).
///
/// A single generator seeded from `seed` drives initialization, minibatch
/// order and the VAE noise draws.
pub fn train_generative(
    fields: &DMatrix<f64>,
    config: &TrainConfig,
    seed: u64,
) -> Result<(GenerativeModel, Vec<LossRecord>)> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let model = GenerativeModel::initialized(
        config.kind,
        fields.ncols(),
        &config.hidden,
        config.latent_dim,
        &mut rng,
    )?;
    let mut objective = GenerativeObjective {
        model,
        beta: config.beta,
        noise: config.noise,
    };
    let mut optimizer = Optimizer::new(config.optimizer);
    let history = nn::train(
        &mut objective,
        fields,
        &mut optimizer,
        &config.schedule,
        &mut rng,
    )?;
    let mut model = objective.model;
    model.optimizer = Some(config.optimizer.kind);
    Ok((model, history))
}

/// Loss history as CSV: `iteration,total,rec,kld`.
pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("iteration,total,rec,kld\n");
    for (i, r) in history.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{}\n", r.total, r.rec, r.kld));
    }
    out
}
