//! Mini-batch training of the occupancy loss with Adam, held-out
//! validation on frozen points, early stopping and resumable state.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::kernels::bce_with_logit;
use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::codec::{DecodeError, Reader, Writer};
use crate::geometry::Vec3;
use crate::model::{decode, encode, extract_features_batch, ModelError, ModelParams, TapeModel};
use crate::sampler::{make_batch, BatchItem, SamplerError, ShapeRecord};

/// Mixed into the seed for the frozen validation subsample.
const VALIDATION_STREAM: u64 = 0x7661_6c69_6400_0001;
const APPENDIX_MAGIC: &[u8; 4] = b"OPTS";
const APPENDIX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error("dataset does not fit the model: {0}")]
    Mismatch(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NumericalAbort { step: u64, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    /// Shapes per mini-batch.
    pub batch_shapes: usize,
    /// Points subsampled per shape and step.
    pub r_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub max_steps: u64,
    /// Steps between validations.
    pub val_interval: u64,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Frozen validation points per held-out shape.
    pub val_points: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_shapes: 4,
            r_size: 1024,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            max_steps: 5000,
            val_interval: 100,
            patience: 10,
            val_points: 2048,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_shapes == 0 || self.r_size == 0 || self.val_points == 0 {
            return bad("batch size, subsample size and validation points must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("moment coefficients must lie in [0, 1)");
        }
        if self.adam_epsilon <= 0.0 {
            return bad("adam epsilon must be positive");
        }
        if self.max_steps == 0 || self.val_interval == 0 || self.patience == 0 {
            return bad("max steps, validation interval and patience must be positive");
        }
        Ok(())
    }
}

/// Mean and unnormalized sum of the point-wise cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub mean: f64,
    pub sum: f64,
}

/// Loss of `params` on a mini-batch, with gradients per parameter tensor.
pub fn loss_and_gradients(
    params: &ModelParams,
    records: &[ShapeRecord],
    batch: &[BatchItem],
) -> Result<(LossValue, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let model = TapeModel::register(&mut tape, params);
    let mut rows = Vec::with_capacity(batch.len());
    let mut labels = Vec::new();
    for item in batch {
        let rec = records
            .get(item.record)
            .ok_or(SamplerError::UnknownRecord(item.record))?;
        let grids = model.encode(&mut tape, &rec.voxels)?;
        rows.push(model.features(&mut tape, &grids, &item.points)?);
        labels.extend_from_slice(&item.labels);
    }
    let features = tape.concat(&rows, 0).map_err(ModelError::from)?;
    let logits = model.decode(&mut tape, features)?;
    let loss = tape.bce_loss(logits, &labels).map_err(ModelError::from)?;
    let mean = tape.value(loss).item();
    let mut grads = tape.backward(loss).map_err(ModelError::from)?;
    let grads = model
        .vars()
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    Ok((
        LossValue {
            mean,
            sum: mean * labels.len() as f64,
        },
        grads,
    ))
}

/// Loss of `params` on a mini-batch.
pub fn loss_minibatch(params: &ModelParams, records: &[ShapeRecord], batch: &[BatchItem]) -> Result<LossValue> {
    let mut total = 0.0;
    let mut count = 0usize;
    for item in batch {
        let rec = records
            .get(item.record)
            .ok_or(SamplerError::UnknownRecord(item.record))?;
        let logits = point_logits(params, rec, &item.points)?;
        total += logits
            .iter()
            .zip(&item.labels)
            .map(|(&x, &y)| bce_with_logit(x, y))
            .sum::<f64>();
        count += item.labels.len();
    }
    Ok(LossValue {
        mean: total / count.max(1) as f64,
        sum: total,
    })
}

fn point_logits(params: &ModelParams, rec: &ShapeRecord, points: &[Vec3]) -> Result<Vec<f64>> {
    let grids = encode(params, &rec.voxels)?;
    let f = extract_features_batch(&grids, points, &params.config().query)?;
    Ok(decode(params, &f)?.1)
}

/// Frozen validation points: for each record, the first `per_shape`
/// indices of a seeded permutation. Labels ride along.
pub fn validation_points(records: &[ShapeRecord], per_shape: usize, seed: u64) -> Vec<BatchItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VALIDATION_STREAM);
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let n = per_shape.min(rec.samples.len());
            let mut idx = sample(&mut rng, rec.samples.len(), n).into_vec();
            idx.sort_unstable();
            BatchItem {
                record: i,
                points: idx.iter().map(|&j| rec.samples[j].p).collect(),
                labels: idx.iter().map(|&j| rec.samples[j].occupied as u8 as f64).collect(),
            }
        })
        .collect()
}

/// Mean cross-entropy on fixed validation points. Consumes no randomness.
pub fn validate(params: &ModelParams, val_records: &[ShapeRecord], fixed: &[BatchItem]) -> Result<f64> {
    Ok(loss_minibatch(params, val_records, fixed)?.mean)
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], cfg: &TrainerConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.tensor_mut(i).data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                p[j] -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_epsilon);
            }
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: Adam,
    pub step: u64,
    pub best_val: f64,
    pub best_params: ModelParams,
    /// Validations since the last improvement.
    pub stale: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        Self {
            adam: Adam::new(&params),
            best_params: params.clone(),
            params,
            step: 0,
            best_val: f64::INFINITY,
            stale: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Checkpoint bytes: the model section followed by the optimizer appendix.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.params.encode(&mut w);
        w.magic(APPENDIX_MAGIC);
        w.u32(APPENDIX_VERSION);
        w.u64(self.step);
        w.f64(self.best_val);
        w.u64(self.stale as u64);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.u128(self.rng.get_word_pos());
        w.u64(self.adam.t);
        for t in self.adam.m.iter().chain(&self.adam.v) {
            w.f64s(t.data());
        }
        self.best_params.encode(&mut w);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let params = ModelParams::decode(&mut r)?;
        r.expect_magic(APPENDIX_MAGIC)?;
        r.expect_version(APPENDIX_VERSION)?;
        let step = r.u64()?;
        let best_val = r.f64()?;
        let stale = r.u64()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let t = r.u64()?;
        let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut moments = Vec::with_capacity(2 * shapes.len());
        for s in shapes.iter().chain(&shapes) {
            let n = s.iter().product();
            moments.push(Tensor::new(s.clone(), r.f64s(n)?).map_err(|e| r.invalid(e.to_string()))?);
        }
        let v = moments.split_off(shapes.len());
        let best_params = ModelParams::decode(&mut r)?;
        if !r.is_empty() {
            return Err(r.invalid("trailing bytes after checkpoint").into());
        }
        Ok(Self {
            params,
            adam: Adam { m: moments, v, t },
            step,
            best_val,
            best_params,
            stale,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub train_loss_mean: f64,
    pub train_loss_sum: f64,
    pub val_loss: Option<f64>,
    pub elapsed_s: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,train_loss_mean,train_loss_sum,val_loss,elapsed_s";

pub fn write_loss_csv(mut out: impl std::io::Write, rows: &[LossRow]) -> std::io::Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for r in rows {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{:.3}",
            r.step, r.train_loss_mean, r.train_loss_sum, val, r.elapsed_s
        )?;
    }
    Ok(())
}

pub fn save_loss_csv(path: impl AsRef<Path>, rows: &[LossRow]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_loss_csv(&mut f, rows)?;
    f.flush()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    Patience,
    /// The requested step budget of this call ran out first.
    Paused,
}

fn check_records(params: &ModelParams, records: &[ShapeRecord], cfg: &TrainerConfig) -> Result<()> {
    let n = params.config().encoder.resolution;
    for r in records {
        if r.voxels.resolution() != n {
            return Err(TrainError::Mismatch(format!(
                "shape {} has input resolution {}, model expects {n}",
                r.id,
                r.voxels.resolution()
            )));
        }
        if r.samples.len() < cfg.r_size {
            return Err(TrainError::Mismatch(format!(
                "shape {} has {} samples, fewer than the subsample size {}",
                r.id,
                r.samples.len(),
                cfg.r_size
            )));
        }
    }
    Ok(())
}

/// Non-finite values anywhere in the graph abort the run.
fn as_abort(e: TrainError, step: u64) -> TrainError {
    match e {
        TrainError::Model(ModelError::Autodiff(AutodiffError::NonFinite { op })) => TrainError::NumericalAbort {
            step,
            detail: format!("non-finite output of {op}"),
        },
        e => e,
    }
}

/// Runs optimization steps until `max_steps`, patience exhaustion or
/// `pause_at` (a step count at which to return early, for checkpointing).
/// `on_step` sees each logged row as it is produced.
pub fn train_steps(
    state: &mut TrainState,
    train: &[ShapeRecord],
    val: &[ShapeRecord],
    cfg: &TrainerConfig,
    pause_at: Option<u64>,
    mut on_step: impl FnMut(&LossRow, &TrainState),
) -> Result<(StopReason, Vec<LossRow>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Mismatch("no training shapes".into()));
    }
    check_records(&state.params, train, cfg)?;
    check_records(
        &state.params,
        val,
        &TrainerConfig {
            r_size: 0,
            ..cfg.clone()
        },
    )?;
    let fixed = validation_points(val, cfg.val_points, cfg.seed);
    let start = Instant::now();
    let mut rows = Vec::new();
    let per_batch = cfg.batch_shapes.min(train.len());
    loop {
        if state.step >= cfg.max_steps {
            return Ok((StopReason::MaxSteps, rows));
        }
        if state.stale >= cfg.patience {
            return Ok((StopReason::Patience, rows));
        }
        if pause_at.is_some_and(|p| state.step >= p) {
            return Ok((StopReason::Paused, rows));
        }
        let mut ids = sample(&mut state.rng, train.len(), per_batch).into_vec();
        ids.sort_unstable();
        let batch = make_batch(train, &ids, cfg.r_size, &mut state.rng)?;
        let (loss, grads) = loss_and_gradients(&state.params, train, &batch).map_err(|e| as_abort(e, state.step))?;
        if !loss.mean.is_finite() {
            return Err(TrainError::NumericalAbort {
                step: state.step,
                detail: format!("mean loss {}", loss.mean),
            });
        }
        state.adam.step(&mut state.params, &grads, cfg);
        state.step += 1;

        let mut val_loss = None;
        if !val.is_empty() && (state.step.is_multiple_of(cfg.val_interval) || state.step == cfg.max_steps) {
            let v = validate(&state.params, val, &fixed).map_err(|e| as_abort(e, state.step))?;
            if !v.is_finite() {
                return Err(TrainError::NumericalAbort {
                    step: state.step,
                    detail: format!("validation loss {v}"),
                });
            }
            if v < state.best_val {
                state.best_val = v;
                state.best_params = state.params.clone();
                state.stale = 0;
            } else {
                state.stale += 1;
            }
            val_loss = Some(v);
        } else if val.is_empty() {
            state.best_params = state.params.clone();
        }
        let row = LossRow {
            step: state.step,
            train_loss_mean: loss.mean,
            train_loss_sum: loss.sum,
            val_loss,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        on_step(&row, state);
        rows.push(row);
    }
}

/// Trains from `params` to completion; the returned state holds the
/// best-validation parameters in `best_params`.
pub fn train(
    params: ModelParams,
    train: &[ShapeRecord],
    val: &[ShapeRecord],
    cfg: &TrainerConfig,
) -> Result<(TrainState, Vec<LossRow>)> {
    let mut state = TrainState::new(params, cfg.seed);
    let (_, rows) = train_steps(&mut state, train, val, cfg, None, |_, _| {})?;
    Ok((state, rows))
}
