//! The growth model: parameter-free cosine attention over all rows, a
//! two-layer update network, K-step growing with asynchronous row skipping,
//! the recovering/observed/missing losses, Adam training across corruption
//! variants, and splice imputation.
//!
//! Training is deterministic for a given `(data, config, seed)`: every random
//! draw comes from seeds derived up front, and the per-variant forward and
//! backward passes run on independent tapes whose gradients are combined in a
//! fixed order, so the result does not depend on worker scheduling.

mod adam;
mod gradcheck;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{draw_dropout_weights, row_dropout_mask, NodeId, Tape};
use crate::data::{corrupt, write_matrix_csv, DataError, Mask};
use crate::matrix::Matrix;
use crate::math::mix_seed;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite state at growth step {step}")]
    Diverged { step: usize },
    #[error("non-finite loss at training iteration {iteration}")]
    DivergedAt { iteration: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("input has {got} features but the model was trained for {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Hyperparameters. The defaults are the reference configuration the
/// benchmarks run with.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NicaConfig {
    /// Number of growth steps K per forward pass.
    pub growth_steps: usize,
    /// Number of independently corrupted training variants.
    pub variants: usize,
    /// Fraction of observed cells zeroed in each variant.
    pub corruption_rate: f64,
    /// Training iterations.
    pub iterations: usize,
    /// Rows per batch (capped at the dataset size).
    pub batch_rows: usize,
    /// Hidden width of the update network, as a multiple of the feature count.
    pub hidden_multiplier: usize,
    /// Dropout rate inside the update network.
    pub fnn_dropout: f64,
    /// Fraction of rows whose update is skipped at each step.
    pub row_skip_rate: f64,
    /// Weight of the recovering loss.
    pub alpha_recovering: f64,
    /// Weight of the observed loss.
    pub alpha_observed: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for NicaConfig {
    fn default() -> Self {
        NicaConfig {
            growth_steps: 10,
            variants: 8,
            corruption_rate: 0.2,
            iterations: 1000,
            batch_rows: 1024,
            hidden_multiplier: 5,
            fnn_dropout: 0.5,
            row_skip_rate: 0.1,
            alpha_recovering: 10.0,
            alpha_observed: 10.0,
            learning_rate: 0.001,
            seed: 0,
        }
    }
}

impl NicaConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.growth_steps < 1 {
            return err("growth_steps must be >= 1");
        }
        if self.variants < 1 {
            return err("variants must be >= 1");
        }
        for (name, rate) in [
            ("corruption_rate", self.corruption_rate),
            ("fnn_dropout", self.fnn_dropout),
            ("row_skip_rate", self.row_skip_rate),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(ModelError::InvalidConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.alpha_recovering < 0.0 || self.alpha_observed < 0.0 {
            return err("loss weights must be non-negative");
        }
        if self.batch_rows < 2 {
            return err("batch_rows must be >= 2");
        }
        if self.hidden_multiplier < 1 {
            return err("hidden_multiplier must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be positive and finite");
        }
        Ok(())
    }
}

/// Update-network parameters. The attention itself has none.
#[derive(Debug, Clone)]
pub struct NicaModel<S> {
    pub w1: Matrix<S>,
    pub b1: Matrix<S>,
    pub w2: Matrix<S>,
    pub b2: Matrix<S>,
    pub feature_dim: usize,
    pub config: NicaConfig,
}

/// Parameter handles registered on a tape, in the fixed order used everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Per-parameter gradients (or any parameter-shaped accumulator).
#[derive(Debug, Clone)]
pub struct ModelGrads<S> {
    pub w1: Matrix<S>,
    pub b1: Matrix<S>,
    pub w2: Matrix<S>,
    pub b2: Matrix<S>,
}

impl<S: Scalar> ModelGrads<S> {
    fn zeros_like(model: &NicaModel<S>) -> Self {
        ModelGrads {
            w1: Matrix::zeros(model.w1.rows(), model.w1.cols()),
            b1: Matrix::zeros(model.b1.rows(), model.b1.cols()),
            w2: Matrix::zeros(model.w2.rows(), model.w2.cols()),
            b2: Matrix::zeros(model.b2.rows(), model.b2.cols()),
        }
    }

    fn add_scaled(&mut self, other: &ModelGrads<S>, factor: S) {
        for (dst, src) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
        ] {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += factor * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.w1.all_finite() && self.b1.all_finite() && self.w2.all_finite() && self.b2.all_finite()
    }
}

impl<S: Scalar> NicaModel<S> {
    /// Fresh parameters: the first layer fan-based uniform, biases zero, and
    /// the update head zero so the initial automaton is exactly the identity.
    pub fn init(feature_dim: usize, config: NicaConfig, rng: &mut ChaCha8Rng) -> Self {
        let input = 2 * feature_dim;
        let hidden = config.hidden_multiplier * feature_dim;
        let bound = (6.0 / (input + hidden) as f64).sqrt();
        let mut w1 = Matrix::zeros(input, hidden);
        for v in w1.data_mut() {
            *v = S::from_f64(rng.random_range(-bound..bound)).unwrap();
        }
        NicaModel {
            w1,
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, feature_dim),
            b2: Matrix::zeros(1, feature_dim),
            feature_dim,
            config,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_multiplier * self.feature_dim
    }

    pub fn all_finite(&self) -> bool {
        self.w1.all_finite() && self.b1.all_finite() && self.w2.all_finite() && self.b2.all_finite()
    }

    /// Register the parameters as differentiable tape inputs.
    pub fn register(&self, tape: &mut Tape<S>) -> ParamNodes {
        ParamNodes {
            w1: tape.var(self.w1.clone()),
            b1: tape.var(self.b1.clone()),
            w2: tape.var(self.w2.clone()),
            b2: tape.var(self.b2.clone()),
        }
    }
}

/// Scalar loss components of one forward pass; `total` is
/// `alpha_recovering * recovering + alpha_observed * observed + missing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recovering: f64,
    pub observed: f64,
    pub missing: f64,
    pub total: f64,
}

/// Loss nodes still on the tape, for callers that need to differentiate.
pub struct LossNodes {
    pub recovering: NodeId,
    pub observed: NodeId,
    pub missing: NodeId,
    pub total: NodeId,
}

/// Intermediate states X^(0..K) of one growth run.
#[derive(Debug, Clone)]
pub struct GrowthTrace<S> {
    pub states: Vec<Matrix<S>>,
    pub step_skip_masks: Option<Vec<Vec<S>>>,
}

/// Stochastic masks for one growth step; `None` means identity.
#[derive(Debug, Clone)]
pub struct StepMasks<S> {
    pub dropout: Option<Matrix<S>>,
    pub skip: Option<Vec<S>>,
}

impl<S> Default for StepMasks<S> {
    fn default() -> Self {
        StepMasks { dropout: None, skip: None }
    }
}

/// Draw the per-step masks for `steps` growth steps. Order per step: dropout
/// weights first, then the row-skip mask.
pub fn draw_step_masks<S: Scalar>(
    rows: usize,
    hidden: usize,
    cfg: &NicaConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
    steps: usize,
) -> Vec<StepMasks<S>> {
    (0..steps)
        .map(|_| {
            if !training {
                return StepMasks::default();
            }
            let dropout = if cfg.fnn_dropout > 0.0 {
                Some(draw_dropout_weights(rows, hidden, cfg.fnn_dropout, rng))
            } else {
                None
            };
            let skip = if cfg.row_skip_rate > 0.0 {
                Some(row_dropout_mask(rows, cfg.row_skip_rate, rng))
            } else {
                None
            };
            StepMasks { dropout, skip }
        })
        .collect()
}

/// Single-head attention with cosine scores scaled by sqrt(d) and no learned
/// projections: `softmax_rows(sqrt(d) * cosine(x, x)) . x`.
pub fn cosine_attention<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> Result<NodeId> {
    Ok(cosine_attention_nodes(tape, x)?.0)
}

/// Attention output together with the row-stochastic weight node.
pub fn cosine_attention_nodes<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> Result<(NodeId, NodeId)> {
    let d = tape.value(x).cols();
    let scale = S::from_usize(d).unwrap().sqrt();
    let scores = tape.cosine_matrix(x, x)?;
    let weights = tape.softmax_rows_scaled(scores, scale);
    let out = tape.matmul(weights, x)?;
    Ok((out, weights))
}

/// One growth step: the attention output is stacked with the current state,
/// passed through the update network, and added back as a residual. Rows
/// masked out by `skip` keep their state but still serve as attention
/// context.
pub fn growth_step<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    params: &ParamNodes,
    masks: &StepMasks<S>,
) -> Result<NodeId> {
    let attended = cosine_attention(tape, x)?;
    let stacked = tape.concat_cols(attended, x)?;
    let pre = tape.matmul(stacked, params.w1)?;
    let pre = tape.add_bias_row(pre, params.b1)?;
    let mut hidden = tape.relu(pre);
    if let Some(weights) = &masks.dropout {
        hidden = tape.mul_mask(hidden, weights.clone())?;
    }
    let delta = tape.matmul(hidden, params.w2)?;
    let mut delta = tape.add_bias_row(delta, params.b2)?;
    if let Some(skip) = &masks.skip {
        delta = tape.scale_rows(delta, skip.clone())?;
    }
    Ok(tape.add(x, delta)?)
}

/// Run `steps` growth steps on one tape and return the final node plus each
/// intermediate state node. States are checked for divergence as they appear.
pub(crate) fn grow_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x0: NodeId,
    params: &ParamNodes,
    step_masks: &[StepMasks<S>],
) -> Result<(NodeId, Vec<NodeId>)> {
    let mut state = x0;
    let mut states = vec![state];
    for (step, masks) in step_masks.iter().enumerate() {
        state = growth_step(tape, state, params, masks)?;
        if !tape.value(state).all_finite() {
            return Err(ModelError::Diverged { step: step + 1 });
        }
        states.push(state);
    }
    Ok((state, states))
}

/// Grow a matrix for `steps` steps. In training mode fresh dropout and
/// row-skip masks are drawn from `rng` each step; in evaluation mode both are
/// disabled. Uses a throwaway tape per step, so memory stays at a few
/// attention matrices regardless of K.
pub fn grow<S: Scalar>(
    x0: &Matrix<S>,
    model: &NicaModel<S>,
    steps: usize,
    training: bool,
    rng: &mut ChaCha8Rng,
    capture_trace: bool,
) -> Result<(Matrix<S>, Option<GrowthTrace<S>>)> {
    let mut state = x0.clone();
    let mut trace = capture_trace.then(|| GrowthTrace {
        states: vec![state.clone()],
        step_skip_masks: training.then(Vec::new),
    });
    for step in 0..steps {
        let masks = draw_step_masks(state.rows(), model.hidden_dim(), &model.config, training, rng, 1)
            .pop()
            .unwrap();
        let mut tape = Tape::new(0);
        let x = tape.constant(state);
        let params = model.register(&mut tape);
        let next = growth_step(&mut tape, x, &params, &masks)?;
        state = tape.value(next).clone();
        if !state.all_finite() {
            return Err(ModelError::Diverged { step: step + 1 });
        }
        if let Some(trace) = trace.as_mut() {
            trace.states.push(state.clone());
            if let (Some(skips), Some(skip)) = (trace.step_skip_masks.as_mut(), masks.skip) {
                skips.push(skip);
            }
        }
    }
    Ok((state, trace))
}

/// The three loss terms against the zero-filled reference: recovering on the
/// corrupted cells, observed on the observed cells, and the negated term on
/// the missing cells that pushes grown values away from their initialization.
pub fn losses<S: Scalar>(
    tape: &mut Tape<S>,
    grown: NodeId,
    reference: &Matrix<S>,
    observed: &Mask,
    corrupted: &Mask,
    alpha_recovering: f64,
    alpha_observed: f64,
) -> Result<LossNodes> {
    let recovering = tape.masked_sq_mean(grown, reference, &corrupted.to_weights())?;
    let observed_loss = tape.masked_sq_mean(grown, reference, &observed.to_weights())?;
    let missing_raw = tape.masked_sq_mean(grown, reference, &observed.complement().to_weights())?;
    let missing = tape.scale(missing_raw, -S::one());
    let total = tape.linear_comb(&[
        (recovering, S::from_f64(alpha_recovering).unwrap()),
        (observed_loss, S::from_f64(alpha_observed).unwrap()),
        (missing, S::one()),
    ])?;
    Ok(LossNodes { recovering, observed: observed_loss, missing, total })
}

impl LossBreakdown {
    pub fn from_nodes<S: Scalar>(tape: &Tape<S>, nodes: &LossNodes) -> LossBreakdown {
        let get = |id: NodeId| tape.value(id).get(0, 0).to_f64().unwrap();
        LossBreakdown {
            recovering: get(nodes.recovering),
            observed: get(nodes.observed),
            missing: get(nodes.missing),
            total: get(nodes.total),
        }
    }

    fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len() as f64;
        LossBreakdown {
            recovering: items.iter().map(|l| l.recovering).sum::<f64>() / n,
            observed: items.iter().map(|l| l.observed).sum::<f64>() / n,
            missing: items.iter().map(|l| l.missing).sum::<f64>() / n,
            total: items.iter().map(|l| l.total).sum::<f64>() / n,
        }
    }
}

/// One variant's forward/backward pass on its own tape.
struct VariantJob<S> {
    seed: u64,
    variant_rows: Matrix<S>,
    reference_rows: Matrix<S>,
    observed_rows: Mask,
    corrupted_rows: Mask,
}

fn run_variant<S: Scalar>(
    job: &VariantJob<S>,
    model: &NicaModel<S>,
) -> Result<(LossBreakdown, ModelGrads<S>)> {
    let cfg = &model.config;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(job.seed);
    let step_masks = draw_step_masks(
        job.variant_rows.rows(),
        model.hidden_dim(),
        cfg,
        true,
        &mut mask_rng,
        cfg.growth_steps,
    );
    let mut tape = Tape::new(job.seed);
    let x0 = tape.constant(job.variant_rows.clone());
    let params = model.register(&mut tape);
    let (grown, _) = grow_on_tape(&mut tape, x0, &params, &step_masks)?;
    let loss_nodes = losses(
        &mut tape,
        grown,
        &job.reference_rows,
        &job.observed_rows,
        &job.corrupted_rows,
        cfg.alpha_recovering,
        cfg.alpha_observed,
    )?;
    let breakdown = LossBreakdown::from_nodes(&tape, &loss_nodes);
    tape.backward(loss_nodes.total)?;
    let grad = |id: NodeId, like: &Matrix<S>| {
        tape.grad(id).cloned().unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    };
    let grads = ModelGrads {
        w1: grad(params.w1, &model.w1),
        b1: grad(params.b1, &model.b1),
        w2: grad(params.w2, &model.w2),
        b2: grad(params.b2, &model.b2),
    };
    Ok((breakdown, grads))
}

/// Train on zero-filled standardized data. Builds the corruption set once,
/// then per iteration: sample a row batch, grow every variant's batch for K
/// steps, average the three-term losses across variants, and take one Adam
/// step on the averaged gradient. Returns the model and the per-iteration
/// loss history.
pub fn train<S: Scalar>(
    reference: &Matrix<S>,
    observed: &Mask,
    cfg: &NicaConfig,
) -> Result<(NicaModel<S>, Vec<LossBreakdown>)> {
    cfg.validate()?;
    let n = reference.rows();
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = NicaModel::init(reference.cols(), cfg.clone(), &mut master);
    let corruption_seed: u64 = master.random();
    let mut corruption_rng = ChaCha8Rng::seed_from_u64(corruption_seed);
    let corruption = corrupt(reference, observed, cfg.corruption_rate, cfg.variants, &mut corruption_rng)?;

    let mut adam = AdamState::new(&model);
    let mut history = Vec::with_capacity(cfg.iterations);
    let batch_size = cfg.batch_rows.min(n);
    let inv_variants = S::one() / S::from_usize(cfg.variants).unwrap();

    for iteration in 0..cfg.iterations {
        let mut batch: Vec<usize> = rand::seq::index::sample(&mut master, n, batch_size).into_vec();
        batch.sort_unstable();
        let variant_seeds: Vec<u64> = (0..cfg.variants).map(|_| master.random()).collect();

        let reference_rows = reference.gather_rows(&batch);
        let observed_rows = observed.gather_rows(&batch);
        let jobs: Vec<VariantJob<S>> = (0..cfg.variants)
            .map(|v| VariantJob {
                seed: variant_seeds[v],
                variant_rows: corruption.variants[v].gather_rows(&batch),
                reference_rows: reference_rows.clone(),
                observed_rows: observed_rows.clone(),
                corrupted_rows: corruption.masks[v].gather_rows(&batch),
            })
            .collect();

        let results: std::result::Result<Vec<_>, ModelError> =
            jobs.par_iter().map(|job| run_variant(job, &model)).collect();
        let results = results.map_err(|e| match e {
            ModelError::Diverged { .. } => ModelError::DivergedAt { iteration },
            other => other,
        })?;

        let mut grads = ModelGrads::zeros_like(&model);
        let mut breakdowns = Vec::with_capacity(cfg.variants);
        for (breakdown, g) in &results {
            grads.add_scaled(g, inv_variants);
            breakdowns.push(*breakdown);
        }
        let mean = LossBreakdown::mean(&breakdowns);
        if !mean.total.is_finite() {
            return Err(ModelError::DivergedAt { iteration });
        }
        adam_step(&mut model, &grads, &mut adam, cfg.learning_rate)?;
        history.push(mean);
    }
    Ok((model, history))
}

/// Attention context is the whole dataset up to this many rows; above it,
/// inference falls back to contiguous chunks that act as both queries and
/// context, mirroring the training-time context size.
pub const FULL_ATTENTION_LIMIT: usize = 8192;
pub const INFERENCE_CHUNK_ROWS: usize = 1024;

/// Grow the zero-filled data in evaluation mode (no dropout, no row skips)
/// and splice: observed cells come verbatim from the input, missing cells
/// from the grown matrix.
pub fn impute<S: Scalar>(
    model: &NicaModel<S>,
    reference: &Matrix<S>,
    observed: &Mask,
) -> Result<Matrix<S>> {
    if reference.cols() != model.feature_dim {
        return Err(ModelError::DimensionMismatch {
            expected: model.feature_dim,
            got: reference.cols(),
        });
    }
    let n = reference.rows();
    let steps = model.config.growth_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let grown = if n <= FULL_ATTENTION_LIMIT {
        grow(reference, model, steps, false, &mut rng, false)?.0
    } else {
        let mut grown = Matrix::zeros(n, reference.cols());
        let mut start = 0;
        while start < n {
            let end = (start + INFERENCE_CHUNK_ROWS).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = reference.gather_rows(&idx);
            let grown_chunk = grow(&chunk, model, steps, false, &mut rng, false)?.0;
            for (j, r) in (start..end).enumerate() {
                grown.row_mut(r).copy_from_slice(grown_chunk.row(j));
            }
            start = end;
        }
        grown
    };
    let mut out = reference.clone();
    for r in 0..n {
        for c in 0..reference.cols() {
            if !observed.get(r, c) {
                out.set(r, c, grown.get(r, c));
            }
        }
    }
    Ok(out)
}

/// Write one full-precision CSV per growth step, `step_000.csv` upward.
pub fn export_trace<S: Scalar>(trace: &GrowthTrace<S>, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(trace.states.len());
    for (i, state) in trace.states.iter().enumerate() {
        let path = dir.join(format!("step_{i:03}.csv"));
        write_matrix_csv(state, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Derive the training seed for a given context, so independent runs in a
/// sweep get decorrelated but reproducible streams.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    mix_seed(base, parts)
}

// --- checkpoint -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixJson {
    fn from<S: Scalar>(m: &Matrix<S>) -> Self {
        MatrixJson {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|v| v.to_f64().unwrap()).collect(),
        }
    }

    fn to_matrix<S: Scalar>(&self) -> std::result::Result<Matrix<S>, ModelError> {
        if self.data.len() != self.rows * self.cols {
            return Err(ModelError::Checkpoint("matrix payload length mismatch".into()));
        }
        Ok(Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| S::from_f64(v).unwrap()).collect(),
        ))
    }
}

/// On-disk model format: version marker, feature count, full configuration,
/// and the four parameter tensors as row-major 64-bit arrays.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    format_version: u32,
    feature_dim: usize,
    config: NicaConfig,
    w1: MatrixJson,
    b1: MatrixJson,
    w2: MatrixJson,
    b2: MatrixJson,
}

const CHECKPOINT_FORMAT: &str = "nica-model";
const CHECKPOINT_VERSION: u32 = 1;

impl<S: Scalar> NicaModel<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            feature_dim: self.feature_dim,
            config: self.config.clone(),
            w1: MatrixJson::from(&self.w1),
            b1: MatrixJson::from(&self.b1),
            w2: MatrixJson::from(&self.w2),
            b2: MatrixJson::from(&self.b2),
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &ckpt)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NicaModel<S>> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format '{}'", ckpt.format)));
        }
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {}",
                ckpt.format_version
            )));
        }
        Ok(NicaModel {
            w1: ckpt.w1.to_matrix()?,
            b1: ckpt.b1.to_matrix()?,
            w2: ckpt.w2.to_matrix()?,
            b2: ckpt.b2.to_matrix()?,
            feature_dim: ckpt.feature_dim,
            config: ckpt.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{standardize, zero_fill};

    fn mat(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows)
    }

    fn small_cfg() -> NicaConfig {
        NicaConfig {
            growth_steps: 3,
            variants: 2,
            iterations: 5,
            batch_rows: 16,
            seed: 3,
            ..NicaConfig::default()
        }
    }

    fn random_model(d: usize, cfg: NicaConfig, seed: u64) -> NicaModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = NicaModel::init(d, cfg, &mut rng);
        for m in [&mut model.w2, &mut model.b1, &mut model.b2] {
            for v in m.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        model
    }

    #[test]
    fn attention_identical_rows_are_fixed_points() {
        let mut t = Tape::new(0);
        let row = vec![0.7, -1.3, 0.4];
        let x = t.constant(mat(&[row.clone(), row.clone(), row.clone()]));
        let xv = t.var(mat(&[row.clone(), row.clone(), row.clone()]));
        let _ = x;
        let out = cosine_attention(&mut t, xv).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let diff: f64 = t.value(out).get(r, c) - row[c];
                assert!(diff.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_hand_case_identity_matrix() {
        // x = I2, scale sqrt(2): weights are softmax([sqrt 2, 0]).
        let mut t = Tape::new(0);
        let x = t.var(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let (out, weights) = cosine_attention_nodes(&mut t, x).unwrap();
        let hi = (2.0f64.sqrt()).exp() / ((2.0f64.sqrt()).exp() + 1.0);
        let lo = 1.0 - hi;
        assert!((hi - 0.80444).abs() < 1e-4);
        for (r, expect) in [(0, [hi, lo]), (1, [lo, hi])] {
            for c in 0..2 {
                assert!((t.value(out).get(r, c) - expect[c]).abs() < 1e-12);
                assert!((t.value(weights).get(r, c) - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_row_is_identity() {
        let mut t = Tape::new(0);
        let x = t.var(mat(&[vec![2.5, -1.0, 0.3]]));
        let out = cosine_attention(&mut t, x).unwrap();
        assert_eq!(t.value(out).row(0), &[2.5, -1.0, 0.3]);
    }

    #[test]
    fn growth_step_zero_head_is_identity() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model: NicaModel<f64> = NicaModel::init(3, cfg.clone(), &mut rng);
        let x0 = mat(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.0, -0.5]]);
        let mut tape = Tape::new(0);
        let x = tape.constant(x0.clone());
        let params = model.register(&mut tape);
        let masks = StepMasks::default();
        let next = growth_step(&mut tape, x, &params, &masks).unwrap();
        assert_eq!(tape.value(next), &x0);
    }

    #[test]
    fn growth_step_all_rows_skipped_is_identity() {
        let cfg = small_cfg();
        let model = random_model(3, cfg.clone(), 5);
        let x0 = mat(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.2, -0.5]]);
        let mut tape = Tape::new(0);
        let x = tape.constant(x0.clone());
        let params = model.register(&mut tape);
        let masks = StepMasks { dropout: None, skip: Some(vec![0.0, 0.0]) };
        let next = growth_step(&mut tape, x, &params, &masks).unwrap();
        assert_eq!(tape.value(next), &x0);
    }

    #[test]
    fn growth_step_matches_straight_line_reimplementation() {
        // Single row, hand-set weights, dropout off: attention returns the row
        // itself, so the update is FNN(stack[row, row]).
        let cfg = NicaConfig { hidden_multiplier: 5, ..small_cfg() };
        let d = 2;
        let mut model: NicaModel<f64> =
            NicaModel::init(d, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(2));
        for v in model.w1.data_mut() {
            *v = 1.0;
        }
        for v in model.w2.data_mut() {
            *v = 1.0;
        }
        let row = [0.3, -0.8];
        let mut tape = Tape::new(0);
        let x = tape.constant(mat(&[row.to_vec()]));
        let params = model.register(&mut tape);
        let next = growth_step(&mut tape, x, &params, &StepMasks::default()).unwrap();

        // Independent straight-line forward.
        let stacked = [row[0], row[1], row[0], row[1]];
        let pre: f64 = stacked.iter().sum(); // every hidden unit sees weight 1
        let hidden = pre.max(0.0);
        let delta = hidden * (cfg.hidden_multiplier * d) as f64; // all-ones W2
        let expect = [row[0] + delta, row[1] + delta];
        for c in 0..d {
            let diff: f64 = tape.value(next).get(0, c) - expect[c];
            assert!(diff.abs() < 1e-12, "col {c}");
        }
    }

    #[test]
    fn grow_zero_model_is_identity_and_trace_shapes() {
        let cfg = small_cfg();
        let model: NicaModel<f64> = NicaModel::init(3, cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let x0 = mat(&[vec![0.1, 0.2, 0.3], vec![-0.5, 0.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (grown, trace) = grow(&x0, &model, 4, false, &mut rng, true).unwrap();
        assert_eq!(grown, x0);
        let trace = trace.unwrap();
        assert_eq!(trace.states.len(), 5);
        assert_eq!(trace.states[0], x0);
    }

    #[test]
    fn grow_one_step_equals_growth_step() {
        let cfg = small_cfg();
        let model = random_model(3, cfg.clone(), 6);
        let x0 = mat(&[vec![0.4, -0.2, 0.9], vec![1.1, 0.5, -0.7]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (one, _) = grow(&x0, &model, 1, false, &mut rng, false).unwrap();

        let mut tape = Tape::new(0);
        let x = tape.constant(x0);
        let params = model.register(&mut tape);
        let next = growth_step(&mut tape, x, &params, &StepMasks::default()).unwrap();
        assert_eq!(&one, tape.value(next));
    }

    #[test]
    fn losses_zero_when_grown_equals_reference() {
        let x0 = mat(&[vec![0.5, 0.0], vec![-1.0, 2.0]]);
        let mut observed = Mask::filled(2, 2, true);
        observed.set(0, 1, false);
        let mut corrupted = Mask::filled(2, 2, false);
        corrupted.set(1, 0, true);

        let mut tape = Tape::new(0);
        let grown = tape.var(x0.clone());
        let nodes = losses(&mut tape, grown, &x0, &observed, &corrupted, 10.0, 10.0).unwrap();
        let b = LossBreakdown::from_nodes(&tape, &nodes);
        assert_eq!((b.recovering, b.observed, b.missing, b.total), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn losses_separate_by_mask_membership() {
        // Differ only at one missing cell by delta.
        let x0 = mat(&[vec![0.5, 0.0], vec![-1.0, 2.0]]);
        let mut grown_values = x0.clone();
        let delta = 0.7;
        grown_values.set(0, 1, x0.get(0, 1) + delta);
        let mut observed = Mask::filled(2, 2, true);
        observed.set(0, 1, false);
        let corrupted = Mask::filled(2, 2, false);

        let mut tape = Tape::new(0);
        let grown = tape.var(grown_values);
        let nodes = losses(&mut tape, grown, &x0, &observed, &corrupted, 10.0, 10.0).unwrap();
        let b = LossBreakdown::from_nodes(&tape, &nodes);
        assert_eq!(b.recovering, 0.0);
        assert_eq!(b.observed, 0.0);
        assert!((b.missing + delta * delta).abs() < 1e-15);
        assert!((b.total + delta * delta).abs() < 1e-15);
    }

    #[test]
    fn loss_combination_identity() {
        let x0 = mat(&[vec![0.5, 0.0], vec![-1.0, 2.0]]);
        let grown_values = mat(&[vec![0.9, -0.3], vec![-1.4, 2.5]]);
        let mut observed = Mask::filled(2, 2, true);
        observed.set(1, 1, false);
        let mut corrupted = Mask::filled(2, 2, false);
        corrupted.set(0, 0, true);
        let (a1, a2) = (3.5, 7.25);

        let mut tape = Tape::new(0);
        let grown = tape.var(grown_values);
        let nodes = losses(&mut tape, grown, &x0, &observed, &corrupted, a1, a2).unwrap();
        let b = LossBreakdown::from_nodes(&tape, &nodes);
        assert!((b.total - (a1 * b.recovering + a2 * b.observed + b.missing)).abs() < 1e-12);

        // Stated arithmetic example: 10*0.1 + 10*0.2 - 0.05 = 2.95.
        assert!((10.0 * 0.1 + 10.0 * 0.2 + (-0.05) - 2.95f64).abs() < 1e-15);
    }

    #[test]
    fn train_zero_iterations_returns_init() {
        let x0 = mat(&[vec![0.1, 0.2], vec![0.3, 0.4], vec![-0.2, 0.0]]);
        let observed = Mask::filled(3, 2, true);
        let cfg = NicaConfig { iterations: 0, ..small_cfg() };
        let (model, history) = train(&x0, &observed, &cfg).unwrap();
        assert!(history.is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fresh: NicaModel<f64> = NicaModel::init(2, cfg, &mut rng);
        assert_eq!(model.w1, fresh.w1);
        assert_eq!(model.w2, fresh.w2);
    }

    #[test]
    fn train_same_seed_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values = Matrix::from_vec(
            24,
            3,
            (0..72).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>(),
        );
        let observed = crate::data::ampute_mcar(&Mask::filled(24, 3, true), 0.3, &mut rng).unwrap();
        let (std_m, _) = standardize(&values, &observed).unwrap();
        let x0 = zero_fill(&std_m, &observed);
        let cfg = NicaConfig { iterations: 8, batch_rows: 16, ..small_cfg() };

        let (m1, h1) = train(&x0, &observed, &cfg).unwrap();
        let (m2, h2) = train(&x0, &observed, &cfg).unwrap();
        assert_eq!(m1.w1, m2.w1);
        assert_eq!(m1.b1, m2.b1);
        assert_eq!(m1.w2, m2.w2);
        assert_eq!(m1.b2, m2.b2);
        let totals1: Vec<u64> = h1.iter().map(|l| l.total.to_bits()).collect();
        let totals2: Vec<u64> = h2.iter().map(|l| l.total.to_bits()).collect();
        assert_eq!(totals1, totals2);
    }

    #[test]
    fn impute_splice_keeps_observed_verbatim() {
        let cfg = small_cfg();
        let model = random_model(2, cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values = Matrix::from_vec(
            10,
            2,
            (0..20).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>(),
        );
        let observed = crate::data::ampute_mcar(&Mask::filled(10, 2, true), 0.4, &mut rng).unwrap();
        let x0 = zero_fill(&values, &observed);
        let out = impute(&model, &x0, &observed).unwrap();
        for r in 0..10 {
            for c in 0..2 {
                if observed.get(r, c) {
                    assert_eq!(out.get(r, c).to_bits(), x0.get(r, c).to_bits());
                }
            }
        }
    }

    #[test]
    fn impute_zero_model_leaves_missing_at_zero() {
        let cfg = small_cfg();
        let model: NicaModel<f64> = NicaModel::init(2, cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let mut observed = Mask::filled(3, 2, true);
        observed.set(1, 0, false);
        let x0 = mat(&[vec![0.5, 0.1], vec![0.0, -0.4], vec![0.2, 0.3]]);
        let out = impute(&model, &x0, &observed).unwrap();
        assert_eq!(out.get(1, 0), 0.0);
    }

    #[test]
    fn impute_rejects_dimension_mismatch() {
        let cfg = small_cfg();
        let model: NicaModel<f64> = NicaModel::init(3, cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let x0 = Matrix::zeros(4, 2);
        let observed = Mask::filled(4, 2, true);
        assert!(matches!(
            impute(&model, &x0, &observed),
            Err(ModelError::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn trace_export_round_trips() {
        let cfg = small_cfg();
        let model = random_model(2, cfg, 9);
        let x0 = mat(&[vec![0.5, -0.5], vec![1.0, 0.25]]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, trace) = grow(&x0, &model, 3, false, &mut rng, true).unwrap();
        let trace = trace.unwrap();

        let dir = tempfile::tempdir().unwrap();
        let paths = export_trace(&trace, dir.path()).unwrap();
        assert_eq!(paths.len(), 4);
        for (i, path) in paths.iter().enumerate() {
            let back: Matrix<f64> = crate::data::read_matrix_csv(path).unwrap();
            assert_eq!(&back, &trace.states[i], "step {i}");
        }
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let cfg = small_cfg();
        let model = random_model(3, cfg, 10);
        let file = tempfile::NamedTempFile::new().unwrap();
        model.save(file.path()).unwrap();
        let back: NicaModel<f64> = NicaModel::load(file.path()).unwrap();
        assert_eq!(model.w1, back.w1);
        assert_eq!(model.b1, back.b1);
        assert_eq!(model.w2, back.w2);
        assert_eq!(model.b2, back.b2);
        assert_eq!(model.config, back.config);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let cfg = NicaConfig { fnn_dropout: 1.0, ..NicaConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = NicaConfig { batch_rows: 1, ..NicaConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = NicaConfig { growth_steps: 0, ..NicaConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(NicaConfig::default().validate().is_ok());
    }
}
