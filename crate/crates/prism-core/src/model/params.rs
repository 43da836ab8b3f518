//! Parameter containers, seeded initialization, and the JSON checkpoint
//! format (`prism-checkpoint-v1`): a flat map from hierarchical parameter
//! names to shape-tagged float arrays.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::ModelError;

pub const NUM_ELEMENTS: usize = 118;
pub const CHECKPOINT_FORMAT: &str = "prism-checkpoint-v1";

/// Two-layer perceptron `w2 * silu(w1 * x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl MlpParams {
    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        MlpParams {
            w1: xavier(rng, input, hidden),
            b1: Array2::zeros((1, hidden)),
            w2: xavier(rng, hidden, output),
            b2: Array2::zeros((1, output)),
        }
    }
}

/// Single linear map plus activation applied to raw edge features.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEncoderParams {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl EdgeEncoderParams {
    fn init(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        EdgeEncoderParams {
            w: xavier(rng, input, output),
            b: Array2::zeros((1, output)),
        }
    }
}

/// Message and update networks of one message-passing expert.
#[derive(Debug, Clone, PartialEq)]
pub struct MpParams {
    pub msg: MlpParams,
    pub upd: MlpParams,
}

impl MpParams {
    fn init(rng: &mut ChaCha8Rng, dim: usize, dim_e: usize) -> Self {
        MpParams {
            msg: MlpParams::init(rng, 2 * dim + dim_e, dim, dim),
            upd: MlpParams::init(rng, 2 * dim, dim, dim),
        }
    }
}

/// Shared transformation applied in both the aggregation and distribution
/// steps of the multiscale expert; consumes embeddings only.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleParams {
    pub msg_w: Array2<f64>,
    pub msg_b: Array2<f64>,
    pub upd: MlpParams,
}

impl MultiscaleParams {
    fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        MultiscaleParams {
            msg_w: xavier(rng, dim, dim),
            msg_b: Array2::zeros((1, dim)),
            upd: MlpParams::init(rng, dim, dim, dim),
        }
    }
}

/// Learned fusion state of one layer: superatom gate logit `alpha` and the
/// three atom-level logits (atomistic, similarity, multiscale).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub alpha: Array2<f64>,
    pub logits: Array2<f64>,
}

impl FusionParams {
    fn init() -> Self {
        // Zero logits: balanced gate, uniform softmax; no expert privileged.
        FusionParams {
            alpha: Array2::zeros((1, 1)),
            logits: Array2::zeros((1, 3)),
        }
    }

    pub fn alpha_value(&self) -> f64 {
        self.alpha[[0, 0]]
    }

    pub fn logit_values(&self) -> [f64; 3] {
        [self.logits[[0, 0]], self.logits[[0, 1]], self.logits[[0, 2]]]
    }

    /// Sigmoid gate on the cell pathway.
    pub fn superatom_gate(&self) -> f64 {
        1.0 / (1.0 + (-self.alpha_value()).exp())
    }

    /// Softmax of the three atom-level logits.
    pub fn atom_weights(&self) -> [f64; 3] {
        softmax3(self.logit_values())
    }
}

pub fn softmax3(logits: [f64; 3]) -> [f64; 3] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = [
        (logits[0] - max).exp(),
        (logits[1] - max).exp(),
        (logits[2] - max).exp(),
    ];
    let total: f64 = exps.iter().sum();
    [exps[0] / total, exps[1] / total, exps[2] / total]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub atomistic: MpParams,
    pub similarity: MpParams,
    /// Feature-edge encoder, re-instantiated per layer because the
    /// similarity graph is rebuilt from the evolving embeddings.
    pub sim_enc: EdgeEncoderParams,
    pub multiscale: MultiscaleParams,
    pub cell: MpParams,
    pub fusion: FusionParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrismParams {
    pub embed: Array2<f64>,
    pub super_score: Array2<f64>,
    pub atom_enc: EdgeEncoderParams,
    pub cell_enc: EdgeEncoderParams,
    pub layers: Vec<LayerParams>,
    pub readout: MlpParams,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Array2::from_shape_vec((rows, cols), data).unwrap()
}

impl PrismParams {
    /// Seeded initialization; identical seeds yield identical parameters.
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dim = config.dim;
        let dim_e = dim;
        let edge_in = config.edge_input_width();
        let embed_data: Vec<f64> = (0..NUM_ELEMENTS * dim)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let embed = Array2::from_shape_vec((NUM_ELEMENTS, dim), embed_data).unwrap();
        let super_score = xavier(&mut rng, dim, 1);
        let atom_enc = EdgeEncoderParams::init(&mut rng, edge_in, dim_e);
        let cell_enc = EdgeEncoderParams::init(&mut rng, edge_in, dim_e);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                atomistic: MpParams::init(&mut rng, dim, dim_e),
                similarity: MpParams::init(&mut rng, dim, dim_e),
                sim_enc: EdgeEncoderParams::init(&mut rng, edge_in, dim_e),
                multiscale: MultiscaleParams::init(&mut rng, dim),
                cell: MpParams::init(&mut rng, dim, dim_e),
                fusion: FusionParams::init(),
            })
            .collect();
        let readout = MlpParams::init(&mut rng, dim, dim, 1);
        PrismParams {
            embed,
            super_score,
            atom_enc,
            cell_enc,
            layers,
            readout,
        }
    }

    /// Visits every parameter array with its hierarchical name, in a fixed
    /// order shared by flattening, checkpointing and gradient collection.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Array2<f64>)) {
        f("embed.table", &self.embed);
        f("super_init.score", &self.super_score);
        visit_enc("enc.atomistic", &self.atom_enc, f);
        visit_enc("enc.cell", &self.cell_enc, f);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            visit_mp(&format!("{p}.atomistic"), &layer.atomistic, f);
            visit_mp(&format!("{p}.similarity"), &layer.similarity, f);
            visit_enc(&format!("{p}.sim_enc"), &layer.sim_enc, f);
            f(&format!("{p}.multiscale.msg.w"), &layer.multiscale.msg_w);
            f(&format!("{p}.multiscale.msg.b"), &layer.multiscale.msg_b);
            visit_mlp(&format!("{p}.multiscale.upd"), &layer.multiscale.upd, f);
            visit_mp(&format!("{p}.cell"), &layer.cell, f);
            f(&format!("{p}.fusion.alpha"), &layer.fusion.alpha);
            f(&format!("{p}.fusion.logits"), &layer.fusion.logits);
        }
        visit_mlp("readout", &self.readout, f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Array2<f64>)) {
        f("embed.table", &mut self.embed);
        f("super_init.score", &mut self.super_score);
        visit_enc_mut("enc.atomistic", &mut self.atom_enc, f);
        visit_enc_mut("enc.cell", &mut self.cell_enc, f);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{l}");
            visit_mp_mut(&format!("{p}.atomistic"), &mut layer.atomistic, f);
            visit_mp_mut(&format!("{p}.similarity"), &mut layer.similarity, f);
            visit_enc_mut(&format!("{p}.sim_enc"), &mut layer.sim_enc, f);
            f(&format!("{p}.multiscale.msg.w"), &mut layer.multiscale.msg_w);
            f(&format!("{p}.multiscale.msg.b"), &mut layer.multiscale.msg_b);
            visit_mlp_mut(&format!("{p}.multiscale.upd"), &mut layer.multiscale.upd, f);
            visit_mp_mut(&format!("{p}.cell"), &mut layer.cell, f);
            f(&format!("{p}.fusion.alpha"), &mut layer.fusion.alpha);
            f(&format!("{p}.fusion.logits"), &mut layer.fusion.logits);
        }
        visit_mlp_mut("readout", &mut self.readout, f);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }

    /// Concatenates all parameters in visit order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, a| flat.extend(a.iter().cloned()));
        flat
    }

    /// Names aligned with [`PrismParams::flatten`], one per scalar entry.
    pub fn flat_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, a| {
            for k in 0..a.len() {
                names.push(format!("{name}[{k}]"));
            }
        });
        names
    }

    /// Embedding rows for a list of atomic numbers; the layer-zero input to
    /// the similarity graph.
    pub fn embed_rows(&self, numbers: &[u8]) -> Vec<Vec<f64>> {
        numbers
            .iter()
            .map(|&z| self.embed.row(z as usize - 1).to_vec())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, a| {
            for v in a.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }
}

fn visit_mlp(prefix: &str, mlp: &MlpParams, f: &mut impl FnMut(&str, &Array2<f64>)) {
    f(&format!("{prefix}.w1"), &mlp.w1);
    f(&format!("{prefix}.b1"), &mlp.b1);
    f(&format!("{prefix}.w2"), &mlp.w2);
    f(&format!("{prefix}.b2"), &mlp.b2);
}

fn visit_mlp_mut(prefix: &str, mlp: &mut MlpParams, f: &mut impl FnMut(&str, &mut Array2<f64>)) {
    f(&format!("{prefix}.w1"), &mut mlp.w1);
    f(&format!("{prefix}.b1"), &mut mlp.b1);
    f(&format!("{prefix}.w2"), &mut mlp.w2);
    f(&format!("{prefix}.b2"), &mut mlp.b2);
}

fn visit_mp(prefix: &str, mp: &MpParams, f: &mut impl FnMut(&str, &Array2<f64>)) {
    visit_mlp(&format!("{prefix}.msg"), &mp.msg, f);
    visit_mlp(&format!("{prefix}.upd"), &mp.upd, f);
}

fn visit_mp_mut(prefix: &str, mp: &mut MpParams, f: &mut impl FnMut(&str, &mut Array2<f64>)) {
    visit_mlp_mut(&format!("{prefix}.msg"), &mut mp.msg, f);
    visit_mlp_mut(&format!("{prefix}.upd"), &mut mp.upd, f);
}

fn visit_enc(prefix: &str, enc: &EdgeEncoderParams, f: &mut impl FnMut(&str, &Array2<f64>)) {
    f(&format!("{prefix}.w"), &enc.w);
    f(&format!("{prefix}.b"), &enc.b);
}

fn visit_enc_mut(
    prefix: &str,
    enc: &mut EdgeEncoderParams,
    f: &mut impl FnMut(&str, &mut Array2<f64>),
) {
    f(&format!("{prefix}.w"), &mut enc.w);
    f(&format!("{prefix}.b"), &mut enc.b);
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: ModelConfig,
    params: BTreeMap<String, CheckpointTensor>,
}

/// Serializes config plus parameters; key order is sorted, floats keep
/// full round-trip precision, so identical models produce identical bytes.
pub fn checkpoint_to_json(config: &ModelConfig, params: &PrismParams) -> String {
    let mut map = BTreeMap::new();
    params.visit(&mut |name, a| {
        map.insert(
            name.to_string(),
            CheckpointTensor {
                shape: [a.nrows(), a.ncols()],
                data: a.iter().cloned().collect(),
            },
        );
    });
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        config: config.clone(),
        params: map,
    };
    serde_json::to_string_pretty(&ckpt).expect("checkpoint serialization cannot fail")
}

pub fn checkpoint_from_json(json: &str) -> Result<(ModelConfig, PrismParams), ModelError> {
    let ckpt: Checkpoint =
        serde_json::from_str(json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format '{}'",
            ckpt.format
        )));
    }
    ckpt.config.validate()?;
    let mut params = PrismParams::init(&ckpt.config);
    let mut missing = Vec::new();
    params.visit_mut(&mut |name, a| match ckpt.params.get(name) {
        Some(t) if t.shape == [a.nrows(), a.ncols()] => {
            for (dst, src) in a.iter_mut().zip(&t.data) {
                *dst = *src;
            }
        }
        Some(t) => missing.push(format!(
            "{name}: shape {:?} != expected {:?}",
            t.shape,
            [a.nrows(), a.ncols()]
        )),
        None => missing.push(format!("{name}: missing")),
    });
    if !missing.is_empty() {
        return Err(ModelError::Checkpoint(missing.join("; ")));
    }
    let expected: usize = params.num_params();
    let provided: usize = ckpt.params.values().map(|t| t.data.len()).sum();
    if provided != expected {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint holds {provided} scalars, model needs {expected}"
        )));
    }
    Ok((ckpt.config, params))
}
