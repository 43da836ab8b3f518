//! Desk-scale training: Huber objective reported as MAE, hand-rolled Adam,
//! deterministic splits and shuffles, finite-difference gradient auditing,
//! and fusion-weight reporting.

use nalgebra::Matrix3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::lattice::CrystalStructure;
use crate::model::{
    bind_params, forward_on_tape, rotate_structure, AugmentationPolicy, ModelConfig, ModelError,
    PrismModel, PrismParams, StaticGraphs,
};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("length mismatch: {preds} predictions vs {targets} targets")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("loss diverged (non-finite) at epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("models disagree on layer count")]
    LayerMismatch,
    #[error("structure '{0}' has no target")]
    MissingTarget(String),
    #[error("eps {0} outside [1e-6, 1e-3]")]
    BadEpsilon(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean absolute error.
pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64, TrainError> {
    if preds.len() != targets.len() {
        return Err(TrainError::LengthMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    let total: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives the train/validation split, epoch shuffles and augmentation.
    pub seed: u64,
    /// Width of the quadratic region of the training loss (target units).
    pub huber_delta: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            learning_rate: 3e-3,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            huber_delta: 0.01,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidConfig(
                "epochs and batch size must be >= 1".into(),
            ));
        }
        if !(self.huber_delta > 0.0) {
            return Err(ModelError::InvalidConfig(
                "huber delta must be positive".into(),
            ));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(ModelError::InvalidConfig(
                "validation fraction must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mae: f64,
    pub val_mae: f64,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: PrismModel,
    pub log: Vec<EpochRecord>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Epoch log as CSV. `include_timings` off writes zero wall seconds so the
/// file is byte-identical across repeated runs.
pub fn epoch_log_csv(log: &[EpochRecord], include_timings: bool) -> String {
    let mut out = String::from("epoch,train_loss,train_mae,val_mae,wall_seconds\n");
    for r in log {
        let wall = if include_timings { r.wall_seconds } else { 0.0 };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.train_mae, r.val_mae, wall
        ));
    }
    out
}

struct Sample {
    structure: CrystalStructure,
    graphs: StaticGraphs,
    target: f64,
}

fn prepare_samples(
    dataset: &[CrystalStructure],
    config: &ModelConfig,
) -> Result<Vec<Sample>, TrainError> {
    dataset
        .iter()
        .map(|s| {
            let target = s
                .target
                .ok_or_else(|| TrainError::MissingTarget(s.id.clone()))?;
            Ok(Sample {
                structure: s.clone(),
                graphs: StaticGraphs::build(s, config)?,
                target,
            })
        })
        .collect()
}

/// Loss and prediction of one structure, with its gradient accumulated into
/// `grad_out`. The similarity topology is whatever the forward pass builds;
/// gradients flow through edge features, never through edge existence.
fn structure_grad(
    model: &PrismModel,
    target: f64,
    structure: &CrystalStructure,
    graphs: &StaticGraphs,
    huber_delta: f64,
    grad_out: &mut [f64],
) -> Result<(f64, f64), TrainError> {
    let mut tape = Tape::new();
    let (traced, binding) = bind_params(&mut tape, &model.params);
    let out = forward_on_tape(&mut tape, &traced, &model.config, structure, graphs, None)?;
    let loss = tape.huber_loss(out.prediction, target, huber_delta);
    let prediction = tape.scalar_value(out.prediction);
    let loss_value = tape.scalar_value(loss);
    let grads = tape.backward(loss);
    let mut offset = 0;
    for (_, var) in &binding {
        match grads.get(*var) {
            Some(g) => {
                for &v in g.iter() {
                    grad_out[offset] += v;
                    offset += 1;
                }
            }
            None => {
                offset += tape.value(*var).len();
            }
        }
    }
    debug_assert_eq!(offset, grad_out.len());
    Ok((loss_value, prediction))
}

/// Uniformly random rotation matrix (Shoemake quaternion construction).
pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let u1: f64 = rng.random_range(0.0..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    let u3: f64 = rng.random_range(0.0..1.0);
    let tau = std::f64::consts::TAU;
    let (x, y, z, w) = (
        (1.0 - u1).sqrt() * (tau * u2).sin(),
        (1.0 - u1).sqrt() * (tau * u2).cos(),
        u1.sqrt() * (tau * u3).sin(),
        u1.sqrt() * (tau * u3).cos(),
    );
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    )
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Trains a fresh model on the dataset. Fixed seeds give identical epoch
/// logs and identical final parameters on repeated runs.
pub fn train(
    dataset: &[CrystalStructure],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    let samples = prepare_samples(dataset, &config.model)?;

    // Deterministic split: shuffle indices with the training seed, carve the
    // validation block off the front.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    shuffle(&mut indices, &mut rng);
    let n_val = if samples.len() >= 2 {
        ((samples.len() as f64 * config.val_fraction).round() as usize).clamp(1, samples.len() - 1)
    } else {
        0
    };
    let (val_idx, rest) = indices.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = rest.to_vec();
    // A singleton dataset validates on its only structure.
    let val_view: Vec<usize> = if val_idx.is_empty() {
        train_idx.clone()
    } else {
        val_idx
    };

    let mut model = PrismModel::new(config.model.clone())?;
    let mut flat = model.params.flatten();
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        shuffle(&mut train_idx, &mut rng);
        let mut loss_sum = 0.0;
        let mut train_preds = Vec::with_capacity(train_idx.len());
        let mut train_targets = Vec::with_capacity(train_idx.len());
        for batch in train_idx.chunks(config.batch_size) {
            let mut grad = vec![0.0; flat.len()];
            for &i in batch {
                let sample = &samples[i];
                let (loss, pred) = match config.model.augmentation {
                    AugmentationPolicy::None => structure_grad(
                        &model,
                        sample.target,
                        &sample.structure,
                        &sample.graphs,
                        config.huber_delta,
                        &mut grad,
                    )?,
                    AugmentationPolicy::RandomRotation => {
                        let rot = random_rotation(&mut rng);
                        let structure = rotate_structure(&sample.structure, &rot)?;
                        let graphs = sample.graphs.rotated(&rot);
                        structure_grad(
                            &model,
                            sample.target,
                            &structure,
                            &graphs,
                            config.huber_delta,
                            &mut grad,
                        )?
                    }
                };
                if !loss.is_finite() {
                    return Err(TrainError::DivergenceDetected { epoch });
                }
                loss_sum += loss;
                train_preds.push(pred);
                train_targets.push(sample.target);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad {
                *g *= scale;
            }
            adam.step(&mut flat, &grad);
            model.params.assign_flat(&flat);
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let train_mae = mae(&train_preds, &train_targets)?;
        let mut val_preds = Vec::with_capacity(val_view.len());
        let mut val_targets = Vec::with_capacity(val_view.len());
        for &i in &val_view {
            let sample = &samples[i];
            let out = model.forward(&sample.structure, &sample.graphs)?;
            val_preds.push(out.prediction);
            val_targets.push(sample.target);
        }
        let val_mae = mae(&val_preds, &val_targets)?;
        if !(train_loss.is_finite() && val_mae.is_finite()) {
            return Err(TrainError::DivergenceDetected { epoch });
        }
        log.push(EpochRecord {
            epoch,
            train_loss,
            train_mae,
            val_mae,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome {
        model,
        log,
        train_ids: train_idx
            .iter()
            .map(|&i| samples[i].structure.id.clone())
            .collect(),
        val_ids: val_view
            .iter()
            .map(|&i| samples[i].structure.id.clone())
            .collect(),
    })
}

/// Fisher-Yates with the supplied generator.
fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// MAE of the model over a dataset; parameters are untouched.
pub fn evaluate(model: &PrismModel, dataset: &[CrystalStructure]) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    let mut preds = Vec::with_capacity(dataset.len());
    let mut targets = Vec::with_capacity(dataset.len());
    for s in dataset {
        let target = s
            .target
            .ok_or_else(|| TrainError::MissingTarget(s.id.clone()))?;
        let graphs = StaticGraphs::build(s, &model.config)?;
        preds.push(model.forward(s, &graphs)?.prediction);
        targets.push(target);
    }
    mae(&preds, &targets)
}

/// Compares the analytic gradient of the per-structure training loss with
/// central finite differences over every parameter, returning the maximum
/// relative error. The per-layer similarity topology is frozen to the
/// unperturbed forward pass so the comparison is between smooth functions.
pub fn grad_check(
    model: &PrismModel,
    structure: &CrystalStructure,
    eps: f64,
) -> Result<f64, TrainError> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(TrainError::BadEpsilon(eps));
    }
    let target = structure.target.unwrap_or(0.0);
    let huber_delta = 0.01;
    let graphs = StaticGraphs::build(structure, &model.config)?;
    let base = model.forward(structure, &graphs)?;
    let frozen = base.similarity_graphs.clone();

    // Analytic gradient at the base point with pinned topology.
    let mut tape = Tape::new();
    let (traced, binding) = bind_params(&mut tape, &model.params);
    let out = forward_on_tape(
        &mut tape,
        &traced,
        &model.config,
        structure,
        &graphs,
        Some(&frozen),
    )?;
    let loss = tape.huber_loss(out.prediction, target, huber_delta);
    let grads = tape.backward(loss);
    let mut analytic = Vec::new();
    for (_, var) in &binding {
        match grads.get(*var) {
            Some(g) => analytic.extend(g.iter().cloned()),
            None => analytic.extend(std::iter::repeat(0.0).take(tape.value(*var).len())),
        }
    }

    let mut probe = model.clone();
    let mut flat = probe.params.flatten();
    let mut worst: f64 = 0.0;
    for k in 0..flat.len() {
        let original = flat[k];
        let eval = |value: f64, probe: &mut PrismModel, flat: &mut Vec<f64>| {
            flat[k] = value;
            probe.params.assign_flat(flat);
            let out = probe.forward_frozen(structure, &graphs, &frozen)?;
            let x = out.prediction - target;
            let loss = if x.abs() <= huber_delta {
                0.5 * x * x
            } else {
                huber_delta * (x.abs() - 0.5 * huber_delta)
            };
            Ok::<f64, TrainError>(loss)
        };
        let plus = eval(original + eps, &mut probe, &mut flat)?;
        let minus = eval(original - eps, &mut probe, &mut flat)?;
        flat[k] = original;
        let fd = (plus - minus) / (2.0 * eps);
        let a = analytic[k];
        if !fd.is_finite() || !a.is_finite() {
            return Err(TrainError::DivergenceDetected { epoch: 0 });
        }
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    // Leave the probe parameters exactly as found.
    probe.params.assign_flat(&flat);
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Fusion-weight reporting
// ---------------------------------------------------------------------------

/// Fusion weights of one layer: the superatom gate split and the softmax
/// over the three atom-level experts.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionRow {
    pub layer: usize,
    pub gate_cell: f64,
    pub gate_multi: f64,
    pub w_atomistic: f64,
    pub w_similarity: f64,
    pub w_multiscale: f64,
}

impl FusionRow {
    fn from_params(layer: usize, params: &PrismParams) -> FusionRow {
        let fusion = &params.layers[layer].fusion;
        let gate = fusion.superatom_gate();
        let [beta, gamma, delta] = fusion.atom_weights();
        FusionRow {
            layer,
            gate_cell: gate,
            gate_multi: 1.0 - gate,
            w_atomistic: beta,
            w_similarity: gamma,
            w_multiscale: delta,
        }
    }
}

/// Per-layer fusion weights for each model plus across-model mean and
/// standard deviation (population).
#[derive(Debug, Clone)]
pub struct FusionReport {
    pub per_model: Vec<Vec<FusionRow>>,
    pub mean: Vec<FusionRow>,
    pub std: Vec<FusionRow>,
}

pub fn fusion_report(models: &[&PrismParams]) -> Result<FusionReport, TrainError> {
    if models.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    let layers = models[0].layers.len();
    if models.iter().any(|m| m.layers.len() != layers) {
        return Err(TrainError::LayerMismatch);
    }
    let per_model: Vec<Vec<FusionRow>> = models
        .iter()
        .map(|m| (0..layers).map(|l| FusionRow::from_params(l, m)).collect())
        .collect();
    let n = models.len() as f64;
    let mut mean = Vec::with_capacity(layers);
    let mut std = Vec::with_capacity(layers);
    for l in 0..layers {
        let column = |f: &dyn Fn(&FusionRow) -> f64| -> (f64, f64) {
            let values: Vec<f64> = per_model.iter().map(|rows| f(&rows[l])).collect();
            let mu = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            (mu, var.sqrt())
        };
        let (gc, gc_s) = column(&|r| r.gate_cell);
        let (gm, gm_s) = column(&|r| r.gate_multi);
        let (wa, wa_s) = column(&|r| r.w_atomistic);
        let (ws, ws_s) = column(&|r| r.w_similarity);
        let (wm, wm_s) = column(&|r| r.w_multiscale);
        mean.push(FusionRow {
            layer: l,
            gate_cell: gc,
            gate_multi: gm,
            w_atomistic: wa,
            w_similarity: ws,
            w_multiscale: wm,
        });
        std.push(FusionRow {
            layer: l,
            gate_cell: gc_s,
            gate_multi: gm_s,
            w_atomistic: wa_s,
            w_similarity: ws_s,
            w_multiscale: wm_s,
        });
    }
    Ok(FusionReport {
        per_model,
        mean,
        std,
    })
}

/// CSV emission: one row per model and layer (`seed_mean = 0`), then one
/// across-model mean row per layer (`seed_mean = 1`).
pub fn fusion_report_csv(report: &FusionReport) -> String {
    let mut out =
        String::from("layer,gate_cell,gate_multi,w_atomistic,w_similarity,w_multiscale,seed_mean\n");
    let mut push = |row: &FusionRow, seed_mean: u8| {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.layer,
            row.gate_cell,
            row.gate_multi,
            row.w_atomistic,
            row.w_similarity,
            row.w_multiscale,
            seed_mean
        ));
    };
    for rows in &report.per_model {
        for row in rows {
            push(row, 0);
        }
    }
    for row in &report.mean {
        push(row, 1);
    }
    out
}
