//! Expert forward passes and their fusion.
//!
//! Every numeric path runs through the autodiff [`Tape`], so inference and
//! training share one implementation; the public functions below wrap the
//! traced builders on a throwaway tape.

use nalgebra::Matrix3;
use ndarray::Array2;
use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::params::{
    EdgeEncoderParams, MlpParams, MpParams, MultiscaleParams, PrismParams,
};
use super::ModelError;
use crate::autodiff::{Tape, Var};
use crate::graph::{
    build_atomistic_graph, build_cell_graph, build_multiscale_graph, build_similarity_graph,
    GraphKind, PeriodicGraph,
};
use crate::lattice::{CrystalStructure, LatticeMatrix};

/// Per-layer embedding state: one row per atom plus the superatom row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub atoms: Array2<f64>,
    pub superatom: Array2<f64>,
}

/// Graphs that do not depend on the evolving embeddings; built once per
/// structure and reused across layers and epochs.
#[derive(Debug, Clone)]
pub struct StaticGraphs {
    pub atomistic: PeriodicGraph,
    pub cell: PeriodicGraph,
    pub multiscale: PeriodicGraph,
}

impl StaticGraphs {
    pub fn build(s: &CrystalStructure, config: &ModelConfig) -> Result<Self, ModelError> {
        Ok(StaticGraphs {
            atomistic: build_atomistic_graph(s, config.atomistic_cutoff)?,
            cell: build_cell_graph(s, config.cell_cutoff)?,
            multiscale: build_multiscale_graph(s),
        })
    }

    /// Applies a global rotation to every stored displacement. Distances
    /// are kept bit-identical; only direction features can change.
    pub fn rotated(&self, rot: &Matrix3<f64>) -> StaticGraphs {
        let rotate = |g: &PeriodicGraph| {
            let mut out = g.clone();
            for e in &mut out.edges {
                if let Some(geom) = &mut e.geometry {
                    geom.disp = rot * geom.disp;
                }
            }
            out
        };
        StaticGraphs {
            atomistic: rotate(&self.atomistic),
            cell: rotate(&self.cell),
            multiscale: self.multiscale.clone(),
        }
    }
}

/// Rotates a structure in place: columns of the lattice rotate, fractional
/// coordinates are untouched.
pub fn rotate_structure(
    s: &CrystalStructure,
    rot: &Matrix3<f64>,
) -> Result<CrystalStructure, ModelError> {
    let lattice = LatticeMatrix::new(rot * s.lattice.matrix())
        .map_err(|e| ModelError::InvalidConfig(format!("rotation produced a bad cell: {e}")))?;
    Ok(CrystalStructure {
        lattice,
        sites: s.sites.clone(),
        id: s.id.clone(),
        target: s.target,
    })
}

// ---------------------------------------------------------------------------
// Radial basis expansion of edge geometry
// ---------------------------------------------------------------------------

/// Gaussian radial basis: `count` centers evenly spanning `[0, span]`,
/// width equal to the center spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfConfig {
    pub span: f64,
    pub count: usize,
}

impl RbfConfig {
    pub fn expand(&self, dist: f64) -> Vec<f64> {
        let spacing = self.span / (self.count - 1) as f64;
        let denom = 2.0 * spacing * spacing;
        (0..self.count)
            .map(|k| {
                let center = spacing * k as f64;
                (-(dist - center) * (dist - center) / denom).exp()
            })
            .collect()
    }
}

/// Basis geometry for one graph kind. Similarity edges span in-cell
/// minimum-image distances, which the large cell cutoff covers.
pub fn rbf_for_kind(config: &ModelConfig, kind: GraphKind) -> Result<RbfConfig, ModelError> {
    let span = match kind {
        GraphKind::Atomistic => config.atomistic_cutoff,
        GraphKind::Cell => config.cell_cutoff,
        GraphKind::Similarity => config.cell_cutoff,
        GraphKind::Multiscale => return Err(ModelError::KindMismatch(kind)),
    };
    Ok(RbfConfig {
        span,
        count: config.rbf_size,
    })
}

/// Raw (pre-encoder) edge features: radial basis of the distance, with the
/// unit direction appended when enabled. Zero-length edges get a zero
/// direction instead of dividing by zero.
pub fn edge_raw_features(
    graph: &PeriodicGraph,
    rbf: &RbfConfig,
    direction: bool,
) -> Result<Array2<f64>, ModelError> {
    if graph.kind == GraphKind::Multiscale {
        return Err(ModelError::KindMismatch(graph.kind));
    }
    let width = rbf.count + if direction { 3 } else { 0 };
    let mut out = Array2::zeros((graph.num_edges(), width));
    for (k, e) in graph.edges.iter().enumerate() {
        let geom = e.geometry.as_ref().ok_or(ModelError::ShapeMismatch(
            "geometric graph edge missing displacement".into(),
        ))?;
        for (j, v) in rbf.expand(geom.dist).into_iter().enumerate() {
            out[[k, j]] = v;
        }
        if direction && geom.dist > 1e-12 {
            for j in 0..3 {
                out[[k, rbf.count + j]] = geom.disp[j] / geom.dist;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Traced parameter bindings
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub(crate) struct TracedMlp {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

#[derive(Clone, Copy)]
pub(crate) struct TracedEnc {
    w: Var,
    b: Var,
}

#[derive(Clone, Copy)]
pub(crate) struct TracedMp {
    msg: TracedMlp,
    upd: TracedMlp,
}

#[derive(Clone, Copy)]
pub(crate) struct TracedMulti {
    msg_w: Var,
    msg_b: Var,
    upd: TracedMlp,
}

#[derive(Clone, Copy)]
pub(crate) struct TracedFusion {
    alpha: Var,
    logits: Var,
}

pub(crate) struct TracedLayer {
    atomistic: TracedMp,
    similarity: TracedMp,
    sim_enc: TracedEnc,
    multiscale: TracedMulti,
    cell: TracedMp,
    fusion: TracedFusion,
}

pub(crate) struct TracedPrism {
    embed: Var,
    super_score: Var,
    atom_enc: TracedEnc,
    cell_enc: TracedEnc,
    layers: Vec<TracedLayer>,
    readout: TracedMlp,
}

/// Loads every parameter onto the tape. The returned name/var pairs follow
/// [`PrismParams::visit`] order, which gradient collection relies on.
pub(crate) fn bind_params(tape: &mut Tape, p: &PrismParams) -> (TracedPrism, Vec<(String, Var)>) {
    let mut order: Vec<(String, Var)> = Vec::new();
    let mut map: BTreeMap<String, Var> = BTreeMap::new();
    p.visit(&mut |name, a| {
        let v = tape.input(a.clone());
        order.push((name.to_string(), v));
        map.insert(name.to_string(), v);
    });
    let get = |name: &str| -> Var { *map.get(name).expect("bound parameter") };
    let mlp = |prefix: &str| TracedMlp {
        w1: get(&format!("{prefix}.w1")),
        b1: get(&format!("{prefix}.b1")),
        w2: get(&format!("{prefix}.w2")),
        b2: get(&format!("{prefix}.b2")),
    };
    let enc = |prefix: &str| TracedEnc {
        w: get(&format!("{prefix}.w")),
        b: get(&format!("{prefix}.b")),
    };
    let mp = |prefix: &str| TracedMp {
        msg: mlp(&format!("{prefix}.msg")),
        upd: mlp(&format!("{prefix}.upd")),
    };
    let layers = (0..p.layers.len())
        .map(|l| {
            let pre = format!("layers.{l}");
            TracedLayer {
                atomistic: mp(&format!("{pre}.atomistic")),
                similarity: mp(&format!("{pre}.similarity")),
                sim_enc: enc(&format!("{pre}.sim_enc")),
                multiscale: TracedMulti {
                    msg_w: get(&format!("{pre}.multiscale.msg.w")),
                    msg_b: get(&format!("{pre}.multiscale.msg.b")),
                    upd: mlp(&format!("{pre}.multiscale.upd")),
                },
                cell: mp(&format!("{pre}.cell")),
                fusion: TracedFusion {
                    alpha: get(&format!("{pre}.fusion.alpha")),
                    logits: get(&format!("{pre}.fusion.logits")),
                },
            }
        })
        .collect();
    let traced = TracedPrism {
        embed: get("embed.table"),
        super_score: get("super_init.score"),
        atom_enc: enc("enc.atomistic"),
        cell_enc: enc("enc.cell"),
        layers,
        readout: mlp("readout"),
    };
    (traced, order)
}

fn bind_mlp(tape: &mut Tape, p: &MlpParams) -> TracedMlp {
    TracedMlp {
        w1: tape.input(p.w1.clone()),
        b1: tape.input(p.b1.clone()),
        w2: tape.input(p.w2.clone()),
        b2: tape.input(p.b2.clone()),
    }
}

fn bind_mp(tape: &mut Tape, p: &MpParams) -> TracedMp {
    TracedMp {
        msg: bind_mlp(tape, &p.msg),
        upd: bind_mlp(tape, &p.upd),
    }
}

fn bind_enc(tape: &mut Tape, p: &EdgeEncoderParams) -> TracedEnc {
    TracedEnc {
        w: tape.input(p.w.clone()),
        b: tape.input(p.b.clone()),
    }
}

fn bind_multi(tape: &mut Tape, p: &MultiscaleParams) -> TracedMulti {
    TracedMulti {
        msg_w: tape.input(p.msg_w.clone()),
        msg_b: tape.input(p.msg_b.clone()),
        upd: bind_mlp(tape, &p.upd),
    }
}

// ---------------------------------------------------------------------------
// Traced building blocks
// ---------------------------------------------------------------------------

fn t_linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row_broadcast(y, b)
}

fn t_mlp(tape: &mut Tape, x: Var, m: &TracedMlp) -> Var {
    let h = t_linear(tape, x, m.w1, m.b1);
    let h = tape.silu(h);
    t_linear(tape, h, m.w2, m.b2)
}

fn t_encoder(tape: &mut Tape, raw: Var, e: &TracedEnc) -> Var {
    let h = t_linear(tape, raw, e.w, e.b);
    tape.silu(h)
}

fn t_encode_atoms(tape: &mut Tape, embed: Var, numbers: &[u8]) -> Var {
    let rows: Vec<usize> = numbers.iter().map(|&z| (z as usize) - 1).collect();
    tape.gather_rows(embed, rows)
}

/// Attention-weighted sum of the atom embeddings.
fn t_super_init(tape: &mut Tape, atoms: Var, score: Var) -> Var {
    let scores = tape.matmul(atoms, score);
    let weights = tape.softmax_flat(scores);
    let weights_t = tape.transpose(weights);
    tape.matmul(weights_t, atoms)
}

/// Gated residual message passing:
/// `h'_i = h_i + U([h_i || sum_{j->i} M([h_j || h_i || e_ji])])`.
/// The sum runs in canonical edge order.
fn t_mp(tape: &mut Tape, h: Var, graph: &PeriodicGraph, efeat: Var, p: &TracedMp) -> Var {
    let srcs: Vec<usize> = graph.edges.iter().map(|e| e.src).collect();
    let dsts: Vec<usize> = graph.edges.iter().map(|e| e.dst).collect();
    let h_src = tape.gather_rows(h, srcs);
    let h_dst = tape.gather_rows(h, dsts.clone());
    let msg_in = tape.concat_cols(&[h_src, h_dst, efeat]);
    let msgs = t_mlp(tape, msg_in, &p.msg);
    let agg = tape.scatter_add_rows(msgs, dsts, graph.num_nodes);
    let upd_in = tape.concat_cols(&[h, agg]);
    let delta = t_mlp(tape, upd_in, &p.upd);
    tape.add(h, delta)
}

/// Applies the shared set transformation `phi(S) = U(sum_x M(x))` of the
/// multiscale expert: first aggregation onto the superatom, then feature-only
/// distribution of the updated superatom back to every atom.
fn t_multiscale(tape: &mut Tape, atoms: Var, superatom: Var, p: &TracedMulti) -> (Var, Var) {
    let phi = |tape: &mut Tape, x: Var| {
        let m = t_linear(tape, x, p.msg_w, p.msg_b);
        let m = tape.silu(m);
        let pooled = tape.sum_rows(m);
        t_mlp(tape, pooled, &p.upd)
    };
    let up = phi(tape, atoms);
    let new_super = tape.add(superatom, up);
    let down = phi(tape, new_super);
    let new_atoms = tape.add_row_broadcast(atoms, down);
    (new_super, new_atoms)
}

/// `sigma(alpha) * h_cell + (1 - sigma(alpha)) * h_multi`.
fn t_fuse_super(tape: &mut Tape, h_cell: Var, h_multi: Var, alpha: Var) -> Var {
    let gate = tape.sigmoid(alpha);
    let complement = tape.affine(gate, -1.0, 1.0);
    let a = tape.mul_scalar(gate, h_cell);
    let b = tape.mul_scalar(complement, h_multi);
    tape.add(a, b)
}

/// Convex combination of the enabled atom-level expert outputs; logit
/// entries of disabled experts are excluded before the softmax.
fn t_fuse_atoms(tape: &mut Tape, entries: &[(Var, usize)], logits: Var) -> Var {
    assert!(!entries.is_empty(), "config validation enforces >= 1 expert");
    if entries.len() == 1 {
        return entries[0].0;
    }
    let slices: Vec<Var> = entries
        .iter()
        .map(|&(_, idx)| tape.slice_col(logits, idx))
        .collect();
    let active = tape.concat_cols(&slices);
    let weights = tape.softmax_flat(active);
    let mut total: Option<Var> = None;
    for (k, &(h, _)) in entries.iter().enumerate() {
        let w = tape.slice_col(weights, k);
        let term = tape.mul_scalar(w, h);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    total.unwrap()
}

fn t_readout(tape: &mut Tape, atoms: Var, p: &TracedMlp) -> Var {
    let pooled = tape.mean_rows(atoms);
    t_mlp(tape, pooled, p)
}

/// One full layer. All four experts read the same input state; the fused
/// state becomes the next layer's input.
#[allow(clippy::too_many_arguments)]
fn t_layer(
    tape: &mut Tape,
    config: &ModelConfig,
    structure: &CrystalStructure,
    graphs: &StaticGraphs,
    e_atom: Var,
    e_cell: Var,
    layer: &TracedLayer,
    atoms: Var,
    superatom: Var,
    frozen_similarity: Option<&PeriodicGraph>,
) -> Result<(Var, Var, Option<PeriodicGraph>), ModelError> {
    let experts = &config.experts;

    let mut sim_graph = None;
    let h_feat = if experts.similarity {
        let graph = match frozen_similarity {
            Some(g) => g.clone(),
            None => {
                let values = tape.value(atoms);
                let embeddings: Vec<Vec<f64>> =
                    values.rows().into_iter().map(|r| r.to_vec()).collect();
                build_similarity_graph(
                    structure,
                    &embeddings,
                    config.feature_cutoff,
                    config.max_degree,
                )?
            }
        };
        let raw = edge_raw_features(
            &graph,
            &rbf_for_kind(config, GraphKind::Similarity)?,
            config.direction_features,
        )?;
        let raw = tape.input(raw);
        let encoded = t_encoder(tape, raw, &layer.sim_enc);
        let out = t_mp(tape, atoms, &graph, encoded, &layer.similarity);
        sim_graph = Some(graph);
        Some(out)
    } else {
        None
    };

    let h_atomistic = if experts.atomistic {
        Some(t_mp(tape, atoms, &graphs.atomistic, e_atom, &layer.atomistic))
    } else {
        None
    };

    let multi = if experts.multiscale {
        Some(t_multiscale(tape, atoms, superatom, &layer.multiscale))
    } else {
        None
    };

    let h_super_cell = if experts.cell {
        Some(t_mp(tape, superatom, &graphs.cell, e_cell, &layer.cell))
    } else {
        None
    };

    let mut entries: Vec<(Var, usize)> = Vec::new();
    if let Some(h) = h_atomistic {
        entries.push((h, 0));
    }
    if let Some(h) = h_feat {
        entries.push((h, 1));
    }
    if let Some((_, h_atoms_multi)) = multi {
        entries.push((h_atoms_multi, 2));
    }
    let new_atoms = t_fuse_atoms(tape, &entries, layer.fusion.logits);

    let new_super = match (h_super_cell, multi) {
        (Some(cell), Some((multi_super, _))) => {
            t_fuse_super(tape, cell, multi_super, layer.fusion.alpha)
        }
        (Some(cell), None) => cell,
        (None, Some((multi_super, _))) => multi_super,
        (None, None) => superatom,
    };

    Ok((new_atoms, new_super, sim_graph))
}

pub(crate) struct TracedOutput {
    pub prediction: Var,
    pub atoms: Var,
    pub superatom: Var,
    pub similarity_graphs: Vec<PeriodicGraph>,
}

pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    traced: &TracedPrism,
    config: &ModelConfig,
    structure: &CrystalStructure,
    graphs: &StaticGraphs,
    frozen_similarity: Option<&[PeriodicGraph]>,
) -> Result<TracedOutput, ModelError> {
    if let Some(frozen) = frozen_similarity {
        if frozen.len() != config.layers {
            return Err(ModelError::ShapeMismatch(format!(
                "{} frozen similarity graphs for {} layers",
                frozen.len(),
                config.layers
            )));
        }
    }
    let numbers = structure.atomic_numbers();
    let mut atoms = t_encode_atoms(tape, traced.embed, &numbers);
    let mut superatom = t_super_init(tape, atoms, traced.super_score);

    // Static experts share one encoding across layers.
    let raw_atom = edge_raw_features(
        &graphs.atomistic,
        &rbf_for_kind(config, GraphKind::Atomistic)?,
        config.direction_features,
    )?;
    let raw_atom = tape.input(raw_atom);
    let e_atom = t_encoder(tape, raw_atom, &traced.atom_enc);
    let raw_cell = edge_raw_features(
        &graphs.cell,
        &rbf_for_kind(config, GraphKind::Cell)?,
        config.direction_features,
    )?;
    let raw_cell = tape.input(raw_cell);
    let e_cell = t_encoder(tape, raw_cell, &traced.cell_enc);

    let mut similarity_graphs = Vec::new();
    for (l, layer) in traced.layers.iter().enumerate() {
        let frozen = frozen_similarity.map(|f| &f[l]);
        let (new_atoms, new_super, sim) = t_layer(
            tape, config, structure, graphs, e_atom, e_cell, layer, atoms, superatom, frozen,
        )?;
        atoms = new_atoms;
        superatom = new_super;
        if let Some(g) = sim {
            similarity_graphs.push(g);
        } else if let Some(f) = frozen {
            similarity_graphs.push(f.clone());
        }
    }

    let prediction = t_readout(tape, atoms, &traced.readout);
    Ok(TracedOutput {
        prediction,
        atoms,
        superatom,
        similarity_graphs,
    })
}

// ---------------------------------------------------------------------------
// Model façade
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub prediction: f64,
    pub atom_embeddings: Array2<f64>,
    pub superatom_embedding: Array2<f64>,
    /// Similarity graphs actually used, one per layer (empty if the
    /// similarity expert is disabled).
    pub similarity_graphs: Vec<PeriodicGraph>,
}

#[derive(Debug, Clone)]
pub struct PrismModel {
    pub config: ModelConfig,
    pub params: PrismParams,
}

impl PrismModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = PrismParams::init(&config);
        Ok(PrismModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: PrismParams) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(PrismModel { config, params })
    }

    pub fn forward(
        &self,
        structure: &CrystalStructure,
        graphs: &StaticGraphs,
    ) -> Result<ForwardOutput, ModelError> {
        self.forward_inner(structure, graphs, None)
    }

    /// Forward pass with the per-layer similarity topology pinned; used by
    /// finite-difference checks where rebuilding could flip edges.
    pub fn forward_frozen(
        &self,
        structure: &CrystalStructure,
        graphs: &StaticGraphs,
        similarity: &[PeriodicGraph],
    ) -> Result<ForwardOutput, ModelError> {
        self.forward_inner(structure, graphs, Some(similarity))
    }

    fn forward_inner(
        &self,
        structure: &CrystalStructure,
        graphs: &StaticGraphs,
        frozen: Option<&[PeriodicGraph]>,
    ) -> Result<ForwardOutput, ModelError> {
        let mut tape = Tape::new();
        let (traced, _) = bind_params(&mut tape, &self.params);
        let out = forward_on_tape(&mut tape, &traced, &self.config, structure, graphs, frozen)?;
        Ok(ForwardOutput {
            prediction: tape.scalar_value(out.prediction),
            atom_embeddings: tape.value(out.atoms).clone(),
            superatom_embedding: tape.value(out.superatom).clone(),
            similarity_graphs: out.similarity_graphs,
        })
    }
}

// ---------------------------------------------------------------------------
// Stand-alone operations
// ---------------------------------------------------------------------------

/// Embedding-table lookup, one row per atom.
pub fn encode_atoms(numbers: &[i64], table: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
    let mut out = Array2::zeros((numbers.len(), table.ncols()));
    for (k, &z) in numbers.iter().enumerate() {
        if !(1..=table.nrows() as i64).contains(&z) {
            return Err(ModelError::UnknownElement(z));
        }
        out.row_mut(k).assign(&table.row(z as usize - 1));
    }
    Ok(out)
}

/// Attention-weighted sum of atom embeddings with learned score vector.
pub fn init_superatom(h_atoms: &Array2<f64>, score: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
    if h_atoms.ncols() != score.nrows() || score.ncols() != 1 {
        return Err(ModelError::ShapeMismatch(format!(
            "score shape {:?} incompatible with atoms {:?}",
            score.dim(),
            h_atoms.dim()
        )));
    }
    let mut tape = Tape::new();
    let atoms = tape.input(h_atoms.clone());
    let score = tape.input(score.clone());
    let out = t_super_init(&mut tape, atoms, score);
    Ok(tape.value(out).clone())
}

/// Radial-basis expansion followed by the learned edge map.
pub fn encode_edges(
    graph: &PeriodicGraph,
    enc: &EdgeEncoderParams,
    rbf: &RbfConfig,
    direction: bool,
) -> Result<Array2<f64>, ModelError> {
    let raw = edge_raw_features(graph, rbf, direction)?;
    if raw.ncols() != enc.w.nrows() {
        return Err(ModelError::ShapeMismatch(format!(
            "edge features width {} != encoder input {}",
            raw.ncols(),
            enc.w.nrows()
        )));
    }
    let mut tape = Tape::new();
    let raw = tape.input(raw);
    let traced = bind_enc(&mut tape, enc);
    let out = t_encoder(&mut tape, raw, &traced);
    Ok(tape.value(out).clone())
}

/// One residual message-passing sweep over an explicit graph.
pub fn mp_expert_forward(
    h_in: &Array2<f64>,
    graph: &PeriodicGraph,
    edge_feats: &Array2<f64>,
    params: &MpParams,
) -> Result<Array2<f64>, ModelError> {
    if h_in.nrows() != graph.num_nodes {
        return Err(ModelError::ShapeMismatch(format!(
            "{} embedding rows for {} nodes",
            h_in.nrows(),
            graph.num_nodes
        )));
    }
    if edge_feats.nrows() != graph.num_edges() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} feature rows for {} edges",
            edge_feats.nrows(),
            graph.num_edges()
        )));
    }
    if graph.edges.iter().any(|e| e.src >= graph.num_nodes || e.dst >= graph.num_nodes) {
        return Err(ModelError::ShapeMismatch(
            "edge endpoint out of range".into(),
        ));
    }
    let mut tape = Tape::new();
    let h = tape.input(h_in.clone());
    let ef = tape.input(edge_feats.clone());
    let traced = bind_mp(&mut tape, params);
    let out = t_mp(&mut tape, h, graph, ef, &traced);
    Ok(tape.value(out).clone())
}

/// Aggregation onto the superatom followed by broadcast distribution, with
/// shared parameters and no geometric input.
pub fn multiscale_forward(
    state: &LayerState,
    params: &MultiscaleParams,
) -> Result<LayerState, ModelError> {
    if state.atoms.ncols() != state.superatom.ncols() || state.superatom.nrows() != 1 {
        return Err(ModelError::ShapeMismatch(format!(
            "atoms {:?} vs superatom {:?}",
            state.atoms.dim(),
            state.superatom.dim()
        )));
    }
    let mut tape = Tape::new();
    let atoms = tape.input(state.atoms.clone());
    let superatom = tape.input(state.superatom.clone());
    let traced = bind_multi(&mut tape, params);
    let (new_super, new_atoms) = t_multiscale(&mut tape, atoms, superatom, &traced);
    Ok(LayerState {
        atoms: tape.value(new_atoms).clone(),
        superatom: tape.value(new_super).clone(),
    })
}

/// `sigma(alpha) * h_cell + (1 - sigma(alpha)) * h_multi`.
pub fn fuse_superatom(
    h_cell: &Array2<f64>,
    h_multi: &Array2<f64>,
    alpha: f64,
) -> Result<Array2<f64>, ModelError> {
    if h_cell.dim() != h_multi.dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            h_cell.dim(),
            h_multi.dim()
        )));
    }
    let gate = 1.0 / (1.0 + (-alpha).exp());
    Ok(h_cell * gate + h_multi * (1.0 - gate))
}

/// Softmax-weighted convex combination of the three atom-level experts.
pub fn fuse_atoms(
    h_atomistic: &Array2<f64>,
    h_feat: &Array2<f64>,
    h_multi: &Array2<f64>,
    logits: [f64; 3],
) -> Result<Array2<f64>, ModelError> {
    if h_atomistic.dim() != h_feat.dim() || h_feat.dim() != h_multi.dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "{:?} vs {:?} vs {:?}",
            h_atomistic.dim(),
            h_feat.dim(),
            h_multi.dim()
        )));
    }
    let [beta, gamma, delta] = super::params::softmax3(logits);
    Ok(h_atomistic * beta + h_feat * gamma + h_multi * delta)
}

/// One full layer update as used inside the model, returning the fused
/// state and the similarity graph built from the input embeddings.
pub fn prism_layer(
    state: &LayerState,
    structure: &CrystalStructure,
    graphs: &StaticGraphs,
    config: &ModelConfig,
    layer_params: &super::params::LayerParams,
    atom_enc: &EdgeEncoderParams,
    cell_enc: &EdgeEncoderParams,
) -> Result<(LayerState, Option<PeriodicGraph>), ModelError> {
    let mut tape = Tape::new();
    let atoms = tape.input(state.atoms.clone());
    let superatom = tape.input(state.superatom.clone());
    let raw_atom = edge_raw_features(
        &graphs.atomistic,
        &rbf_for_kind(config, GraphKind::Atomistic)?,
        config.direction_features,
    )?;
    let raw_atom = tape.input(raw_atom);
    let raw_cell = edge_raw_features(
        &graphs.cell,
        &rbf_for_kind(config, GraphKind::Cell)?,
        config.direction_features,
    )?;
    let raw_cell = tape.input(raw_cell);
    let atom_enc = bind_enc(&mut tape, atom_enc);
    let cell_enc = bind_enc(&mut tape, cell_enc);
    let e_atom = t_encoder(&mut tape, raw_atom, &atom_enc);
    let e_cell = t_encoder(&mut tape, raw_cell, &cell_enc);
    let traced = TracedLayer {
        atomistic: bind_mp(&mut tape, &layer_params.atomistic),
        similarity: bind_mp(&mut tape, &layer_params.similarity),
        sim_enc: bind_enc(&mut tape, &layer_params.sim_enc),
        multiscale: bind_multi(&mut tape, &layer_params.multiscale),
        cell: bind_mp(&mut tape, &layer_params.cell),
        fusion: TracedFusion {
            alpha: tape.input(layer_params.fusion.alpha.clone()),
            logits: tape.input(layer_params.fusion.logits.clone()),
        },
    };
    let (new_atoms, new_super, sim) = t_layer(
        &mut tape, config, structure, graphs, e_atom, e_cell, &traced, atoms, superatom, None,
    )?;
    Ok((
        LayerState {
            atoms: tape.value(new_atoms).clone(),
            superatom: tape.value(new_super).clone(),
        },
        sim,
    ))
}

/// Mean-pool over atoms followed by a two-layer perceptron.
pub fn readout(h_atoms: &Array2<f64>, params: &MlpParams) -> Result<f64, ModelError> {
    if h_atoms.nrows() == 0 {
        return Err(ModelError::ShapeMismatch("readout of zero atoms".into()));
    }
    let mut tape = Tape::new();
    let atoms = tape.input(h_atoms.clone());
    let traced = bind_mlp(&mut tape, params);
    let out = t_readout(&mut tape, atoms, &traced);
    Ok(tape.scalar_value(out))
}
