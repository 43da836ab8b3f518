//! The periodic multigraph model: four expert modules per layer (atomistic,
//! similarity, multiscale, cell) updated in parallel from the same input
//! state and combined by a learned sigmoid gate and softmax fusion.

mod config;
mod forward;
mod params;

pub use config::{AugmentationPolicy, ExpertFlags, ModelConfig};
pub use forward::{
    edge_raw_features, encode_atoms, encode_edges, fuse_atoms, fuse_superatom, init_superatom,
    mp_expert_forward, multiscale_forward, prism_layer, readout, rbf_for_kind, rotate_structure,
    ForwardOutput, LayerState, PrismModel, RbfConfig, StaticGraphs,
};
pub use params::{
    checkpoint_from_json, checkpoint_to_json, softmax3, EdgeEncoderParams, FusionParams,
    LayerParams, MlpParams, MpParams, MultiscaleParams, PrismParams, CHECKPOINT_FORMAT,
    NUM_ELEMENTS,
};

pub(crate) use forward::{bind_params, forward_on_tape};

use thiserror::Error;

use crate::graph::{GraphError, GraphKind};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown element: atomic number {0}")]
    UnknownElement(i64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("operation undefined for graph kind {0:?}")]
    KindMismatch(GraphKind),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_multiscale_graph, build_similarity_graph, PeriodicGraph};
    use crate::lattice::{AtomSite, CrystalStructure, LatticeMatrix};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector3};
    use ndarray::{array, Array2};

    fn small_config() -> ModelConfig {
        ModelConfig {
            dim: 8,
            layers: 2,
            atomistic_cutoff: 4.0,
            cell_cutoff: 12.0,
            feature_cutoff: 1.5,
            seed: 42,
            ..ModelConfig::default()
        }
    }

    fn nacl_like() -> CrystalStructure {
        CrystalStructure::new(
            LatticeMatrix::cubic(4.0).unwrap(),
            vec![
                AtomSite::new(Vector3::new(0.0, 0.0, 0.0), 11).unwrap(),
                AtomSite::new(Vector3::new(0.5, 0.5, 0.5), 17).unwrap(),
            ],
            "nacl-like",
            None,
        )
        .unwrap()
    }

    fn four_atom() -> CrystalStructure {
        CrystalStructure::new(
            LatticeMatrix::cubic(5.0).unwrap(),
            vec![
                AtomSite::new(Vector3::new(0.0, 0.0, 0.0), 11).unwrap(),
                AtomSite::new(Vector3::new(0.5, 0.5, 0.0), 17).unwrap(),
                AtomSite::new(Vector3::new(0.5, 0.0, 0.5), 11).unwrap(),
                AtomSite::new(Vector3::new(0.0, 0.5, 0.5), 17).unwrap(),
            ],
            "four-atom",
            None,
        )
        .unwrap()
    }

    #[test]
    fn encode_atoms_is_table_lookup() {
        let table = {
            let mut t = Array2::zeros((118, 3));
            for z in 0..118 {
                for c in 0..3 {
                    t[[z, c]] = (z + 1) as f64 + c as f64 * 0.1;
                }
            }
            t
        };
        let h = encode_atoms(&[6, 6, 8], &table).unwrap();
        assert_eq!(h.row(0), h.row(1));
        assert_eq!(h[[2, 0]], 8.0);
        // Permuting the list permutes the rows.
        let p = encode_atoms(&[8, 6, 6], &table).unwrap();
        assert_eq!(p.row(0), h.row(2));
        assert!(matches!(
            encode_atoms(&[0], &table),
            Err(ModelError::UnknownElement(0))
        ));
        assert!(matches!(
            encode_atoms(&[119], &table),
            Err(ModelError::UnknownElement(119))
        ));
    }

    #[test]
    fn init_superatom_singleton_and_symmetry() {
        let score = array![[0.3], [-0.2], [0.5]];
        let single = array![[1.0, 2.0, 3.0]];
        let h = init_superatom(&single, &score).unwrap();
        assert_eq!(h, single);

        let same = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]];
        let h = init_superatom(&same, &score).unwrap();
        for c in 0..3 {
            assert_relative_eq!(h[[0, c]], same[[0, c]], epsilon = 1e-12);
        }

        let mixed = array![[1.0, 0.0, 2.0], [0.5, 1.5, -1.0], [2.0, 0.3, 0.7]];
        let a = init_superatom(&mixed, &score).unwrap();
        let permuted = array![[2.0, 0.3, 0.7], [1.0, 0.0, 2.0], [0.5, 1.5, -1.0]];
        let b = init_superatom(&permuted, &score).unwrap();
        for c in 0..3 {
            assert_relative_eq!(a[[0, c]], b[[0, c]], epsilon = 1e-12);
        }
    }

    #[test]
    fn encode_edges_zero_distance_and_equal_distances() {
        let cfg = small_config();
        let s = nacl_like();
        let graphs = StaticGraphs::build(&s, &cfg).unwrap();
        let params = PrismParams::init(&cfg);
        let rbf = rbf_for_kind(&cfg, crate::graph::GraphKind::Atomistic).unwrap();
        let feats = encode_edges(&graphs.atomistic, &params.atom_enc, &rbf, false).unwrap();
        assert_eq!(feats.nrows(), graphs.atomistic.num_edges());
        // All first-shell edges share one distance, hence one feature row.
        for k in 1..feats.nrows() {
            for c in 0..feats.ncols() {
                assert_relative_eq!(feats[[k, c]], feats[[0, c]], epsilon = 1e-12);
            }
        }
        // Zero distance stays finite.
        assert!(rbf.expand(0.0).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_edges_rejects_multiscale() {
        let cfg = small_config();
        let s = nacl_like();
        let params = PrismParams::init(&cfg);
        let g = build_multiscale_graph(&s);
        let rbf = RbfConfig { span: 4.0, count: 16 };
        let err = encode_edges(&g, &params.atom_enc, &rbf, false).unwrap_err();
        assert!(matches!(err, ModelError::KindMismatch(_)));
    }

    #[test]
    fn mp_forward_zero_edges_matches_formula() {
        let cfg = small_config();
        let params = PrismParams::init(&cfg);
        let mp = &params.layers[0].atomistic;
        let h = Array2::from_shape_fn((3, 8), |(i, j)| 0.1 * (i as f64 + 1.0) - 0.03 * j as f64);
        let empty = PeriodicGraph {
            kind: crate::graph::GraphKind::Atomistic,
            num_nodes: 3,
            edges: vec![],
        };
        let out = mp_expert_forward(&h, &empty, &Array2::zeros((0, 8)), mp).unwrap();
        // Independent evaluation of h + U([h || 0]).
        let silu = |x: f64| x / (1.0 + (-x).exp());
        let mut concat = Array2::zeros((3, 16));
        for i in 0..3 {
            for j in 0..8 {
                concat[[i, j]] = h[[i, j]];
            }
        }
        let hidden = (concat.dot(&mp.upd.w1) + &mp.upd.b1).mapv(silu);
        let expected = &h + &(hidden.dot(&mp.upd.w2) + &mp.upd.b2);
        for i in 0..3 {
            for j in 0..8 {
                assert_relative_eq!(out[[i, j]], expected[[i, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mp_forward_duplicated_edge_doubles_message() {
        let cfg = small_config();
        let params = PrismParams::init(&cfg);
        let mp = &params.layers[0].atomistic;
        let h = Array2::from_shape_fn((2, 8), |(i, j)| 0.2 * (i as f64) + 0.05 * j as f64);
        let mk_graph = |shifts: Vec<[i32; 3]>| {
            let s = nacl_like();
            let mut edges = Vec::new();
            for n in shifts {
                let shift = crate::lattice::ShiftVector(n);
                let disp = s.position(1) - s.position(0) + s.lattice.shift_translation(shift);
                edges.push(crate::graph::PeriodicEdge {
                    src: 0,
                    dst: 1,
                    shift,
                    geometry: Some(crate::graph::EdgeGeometry {
                        disp,
                        dist: disp.norm(),
                    }),
                });
            }
            PeriodicGraph {
                kind: crate::graph::GraphKind::Atomistic,
                num_nodes: 2,
                edges,
            }
        };
        // Same geometric edge via two different image labels with equal
        // distance: contribution must be the explicit two-term sum.
        let g1 = mk_graph(vec![[0, 0, 0]]);
        let g2 = mk_graph(vec![[0, 0, 0], [0, 0, 0]]);
        let rbf = RbfConfig { span: 4.0, count: 16 };
        let e1 = encode_edges(&g1, &params.atom_enc, &rbf, false).unwrap();
        let e2 = encode_edges(&g2, &params.atom_enc, &rbf, false).unwrap();
        let out1 = mp_expert_forward(&h, &g1, &e1, mp).unwrap();
        let out2 = mp_expert_forward(&h, &g2, &e2, mp).unwrap();
        // Recover aggregated message before the update MLP by comparing
        // against a manual evaluation.
        let silu = |x: f64| x / (1.0 + (-x).exp());
        let msg_in = {
            let mut m = Array2::zeros((1, 8 + 8 + e1.ncols()));
            for j in 0..8 {
                m[[0, j]] = h[[0, j]];
                m[[0, 8 + j]] = h[[1, j]];
            }
            for j in 0..e1.ncols() {
                m[[0, 16 + j]] = e1[[0, j]];
            }
            m
        };
        let msg = {
            let hid = (msg_in.dot(&mp.msg.w1) + &mp.msg.b1).mapv(silu);
            hid.dot(&mp.msg.w2) + &mp.msg.b2
        };
        let expected_row = |agg: &Array2<f64>, i: usize| {
            let mut concat = Array2::zeros((1, 16));
            for j in 0..8 {
                concat[[0, j]] = h[[i, j]];
                concat[[0, 8 + j]] = agg[[0, j]];
            }
            let hid = (concat.dot(&mp.upd.w1) + &mp.upd.b1).mapv(silu);
            let delta = hid.dot(&mp.upd.w2) + &mp.upd.b2;
            (0..8).map(|j| h[[i, j]] + delta[[0, j]]).collect::<Vec<_>>()
        };
        let single = expected_row(&msg, 1);
        let double = expected_row(&(&msg * 2.0), 1);
        for j in 0..8 {
            assert_relative_eq!(out1[[1, j]], single[j], epsilon = 1e-10);
            assert_relative_eq!(out2[[1, j]], double[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn mp_forward_permutation_equivariance() {
        let cfg = small_config();
        let s = four_atom();
        let graphs = StaticGraphs::build(&s, &cfg).unwrap();
        let params = PrismParams::init(&cfg);
        let mp = &params.layers[0].atomistic;
        let rbf = rbf_for_kind(&cfg, crate::graph::GraphKind::Atomistic).unwrap();
        let h = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin());
        let e = encode_edges(&graphs.atomistic, &params.atom_enc, &rbf, false).unwrap();
        let out = mp_expert_forward(&h, &graphs.atomistic, &e, mp).unwrap();

        // Relabel nodes by the permutation [2, 0, 3, 1].
        let perm = [2usize, 0, 3, 1];
        let mut g2 = graphs.atomistic.clone();
        for edge in &mut g2.edges {
            edge.src = perm[edge.src];
            edge.dst = perm[edge.dst];
        }
        g2.edges.sort_by_key(|e| (e.src, e.dst, e.shift));
        let mut h2 = Array2::zeros((4, 8));
        for i in 0..4 {
            h2.row_mut(perm[i]).assign(&h.row(i));
        }
        let e2 = encode_edges(&g2, &params.atom_enc, &rbf, false).unwrap();
        let out2 = mp_expert_forward(&h2, &g2, &e2, mp).unwrap();
        for i in 0..4 {
            for j in 0..8 {
                assert_relative_eq!(out2[[perm[i], j]], out[[i, j]], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn multiscale_permutation_invariance_and_broadcast() {
        let cfg = small_config();
        let params = PrismParams::init(&cfg);
        let p = &params.layers[0].multiscale;
        let atoms = array![
            [0.1, 0.2, -0.3, 0.4, 0.0, 0.6, -0.7, 0.8],
            [0.9, -1.0, 1.1, 0.2, 1.3, -0.4, 1.5, 0.6],
            [0.7, 0.8, -0.9, 1.0, 0.1, 1.2, -0.3, 1.4]
        ];
        let superatom = Array2::from_shape_fn((1, 8), |(_, j)| 0.05 * j as f64);
        let state = LayerState {
            atoms: atoms.clone(),
            superatom: superatom.clone(),
        };
        let out = multiscale_forward(&state, p).unwrap();

        let mut permuted = atoms.clone();
        permuted.row_mut(0).assign(&atoms.row(2));
        permuted.row_mut(2).assign(&atoms.row(0));
        let out_p = multiscale_forward(
            &LayerState {
                atoms: permuted,
                superatom,
            },
            p,
        )
        .unwrap();
        for c in 0..8 {
            assert_relative_eq!(
                out.superatom[[0, c]],
                out_p.superatom[[0, c]],
                epsilon = 1e-10
            );
            assert_relative_eq!(out.atoms[[0, c]], out_p.atoms[[2, c]], epsilon = 1e-10);
        }
        // Every atom receives the same broadcast increment.
        let delta0 = &out.atoms.row(0) - &atoms.row(0);
        let delta1 = &out.atoms.row(1) - &atoms.row(1);
        for c in 0..8 {
            assert_relative_eq!(delta0[c], delta1[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn fuse_superatom_examples() {
        let a = array![[1.0, 2.0]];
        let b = array![[3.0, -2.0]];
        let mid = fuse_superatom(&a, &b, 0.0).unwrap();
        assert_relative_eq!(mid[[0, 0]], 2.0, epsilon = 1e-12);
        assert_relative_eq!(mid[[0, 1]], 0.0, epsilon = 1e-12);

        let saturated = fuse_superatom(&a, &b, 50.0).unwrap();
        for c in 0..2 {
            assert_relative_eq!(saturated[[0, c]], a[[0, c]], epsilon = 1e-12);
        }
        let same = fuse_superatom(&a, &a, -3.7).unwrap();
        for c in 0..2 {
            assert_relative_eq!(same[[0, c]], a[[0, c]], epsilon = 1e-12);
        }
    }

    #[test]
    fn fuse_atoms_examples() {
        let a = array![[1.0, 0.0]];
        let f = array![[0.0, 1.0]];
        let m = array![[1.0, 1.0]];
        let out = fuse_atoms(&a, &f, &m, [0.0, 0.0, 0.0]).unwrap();
        for c in 0..2 {
            assert_relative_eq!(out[[0, c]], 2.0 / 3.0, epsilon = 1e-12);
        }
        let out = fuse_atoms(&a, &f, &m, [2.0f64.ln(), 0.0, 0.0]).unwrap();
        assert_relative_eq!(out[[0, 0]], 0.5 + 0.25, epsilon = 1e-12);
        assert_relative_eq!(out[[0, 1]], 0.25 + 0.25, epsilon = 1e-12);
        let w = softmax3([2.0f64.ln(), 0.0, 0.0]);
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(w[1], 0.25, epsilon = 1e-12);

        let same = fuse_atoms(&a, &a, &a, [3.0, -1.0, 0.4]).unwrap();
        for c in 0..2 {
            assert_relative_eq!(same[[0, c]], a[[0, c]], epsilon = 1e-12);
        }
    }

    #[test]
    fn readout_examples() {
        let cfg = small_config();
        let params = PrismParams::init(&cfg);
        let row = Array2::from_shape_fn((1, 8), |(_, j)| 0.3 - 0.07 * j as f64);
        let mut stacked = Array2::zeros((4, 8));
        for i in 0..4 {
            stacked.row_mut(i).assign(&row.row(0));
        }
        let single = readout(&row, &params.readout).unwrap();
        let pooled = readout(&stacked, &params.readout).unwrap();
        assert_relative_eq!(single, pooled, epsilon = 1e-12);

        // Zero final weights leave only the bias.
        let mut zeroed = params.readout.clone();
        zeroed.w2.fill(0.0);
        zeroed.b2[[0, 0]] = 1.25;
        assert_relative_eq!(readout(&row, &zeroed).unwrap(), 1.25, epsilon = 1e-12);
    }

    #[test]
    fn saturated_gates_reduce_to_atomistic_expert() {
        let mut cfg = small_config();
        cfg.layers = 1;
        let s = four_atom();
        let graphs = StaticGraphs::build(&s, &cfg).unwrap();
        let mut model = PrismModel::new(cfg.clone()).unwrap();
        // beta -> 1, gamma, delta -> 0; alpha -> cell side.
        model.params.layers[0].fusion.logits = array![[0.0, -50.0, -50.0]];
        model.params.layers[0].fusion.alpha = array![[50.0]];
        let out = model.forward(&s, &graphs).unwrap();

        let h0 = encode_atoms(
            &s.atomic_numbers().iter().map(|&z| z as i64).collect::<Vec<_>>(),
            &model.params.embed,
        )
        .unwrap();
        let rbf = rbf_for_kind(&cfg, crate::graph::GraphKind::Atomistic).unwrap();
        let e = encode_edges(&graphs.atomistic, &model.params.atom_enc, &rbf, false).unwrap();
        let expert =
            mp_expert_forward(&h0, &graphs.atomistic, &e, &model.params.layers[0].atomistic)
                .unwrap();
        for i in 0..4 {
            for j in 0..8 {
                assert_relative_eq!(out.atom_embeddings[[i, j]], expert[[i, j]], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn full_forward_permutation_invariant_readout() {
        let cfg = small_config();
        let s = four_atom();
        let graphs = StaticGraphs::build(&s, &cfg).unwrap();
        let model = PrismModel::new(cfg.clone()).unwrap();
        let out = model.forward(&s, &graphs).unwrap();

        let perm = [3usize, 1, 0, 2];
        let mut sites = vec![s.sites[0].clone(); 4];
        for (i, site) in s.sites.iter().enumerate() {
            sites[perm[i]] = site.clone();
        }
        let sp = CrystalStructure::new(s.lattice.clone(), sites, "permuted", None).unwrap();
        let graphs_p = StaticGraphs::build(&sp, &cfg).unwrap();
        let out_p = model.forward(&sp, &graphs_p).unwrap();
        assert_relative_eq!(out.prediction, out_p.prediction, epsilon = 1e-10);
        for i in 0..4 {
            for j in 0..8 {
                assert_relative_eq!(
                    out_p.atom_embeddings[[perm[i], j]],
                    out.atom_embeddings[[i, j]],
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn distance_only_readout_rotation_invariant() {
        let cfg = small_config();
        let s = four_atom();
        let graphs = StaticGraphs::build(&s, &cfg).unwrap();
        let model = PrismModel::new(cfg.clone()).unwrap();
        let before = model.forward(&s, &graphs).unwrap().prediction;

        let angle: f64 = 0.7;
        let rot = Matrix3::new(
            angle.cos(),
            -angle.sin(),
            0.0,
            angle.sin(),
            angle.cos(),
            0.0,
            0.0,
            0.0,
            1.0,
        );
        let rotated = rotate_structure(&s, &rot).unwrap();
        let graphs_r = StaticGraphs::build(&rotated, &cfg).unwrap();
        let after = model.forward(&rotated, &graphs_r).unwrap().prediction;
        assert_relative_eq!(before, after, epsilon = 1e-9);
    }

    #[test]
    fn direction_features_break_raw_rotation_invariance() {
        let cfg = ModelConfig {
            direction_features: true,
            ..small_config()
        };
        let s = four_atom();
        let graphs = StaticGraphs::build(&s, &cfg).unwrap();
        let model = PrismModel::new(cfg.clone()).unwrap();
        let before = model.forward(&s, &graphs).unwrap().prediction;
        let angle: f64 = 0.9;
        let rot = Matrix3::new(
            angle.cos(),
            0.0,
            angle.sin(),
            0.0,
            1.0,
            0.0,
            -angle.sin(),
            0.0,
            angle.cos(),
        );
        let rotated = rotate_structure(&s, &rot).unwrap();
        let graphs_r = StaticGraphs::build(&rotated, &cfg).unwrap();
        let after = model.forward(&rotated, &graphs_r).unwrap().prediction;
        assert!((before - after).abs() > 1e-9);
    }

    #[test]
    fn expert_evaluation_order_does_not_matter() {
        // Parallel semantics: every expert consumes the same input state, so
        // a one-layer output equals recombining independently computed
        // expert outputs.
        let mut cfg = small_config();
        cfg.layers = 1;
        let s = nacl_like();
        let graphs = StaticGraphs::build(&s, &cfg).unwrap();
        let model = PrismModel::new(cfg.clone()).unwrap();
        let out = model.forward(&s, &graphs).unwrap();

        let p = &model.params;
        let z: Vec<i64> = s.atomic_numbers().iter().map(|&v| v as i64).collect();
        let h0 = encode_atoms(&z, &p.embed).unwrap();
        let s0 = init_superatom(&h0, &p.super_score).unwrap();
        let layer = &p.layers[0];

        let rbf_a = rbf_for_kind(&cfg, crate::graph::GraphKind::Atomistic).unwrap();
        let e_a = encode_edges(&graphs.atomistic, &p.atom_enc, &rbf_a, false).unwrap();
        let h_a = mp_expert_forward(&h0, &graphs.atomistic, &e_a, &layer.atomistic).unwrap();

        let embeddings: Vec<Vec<f64>> = h0.rows().into_iter().map(|r| r.to_vec()).collect();
        let sim = build_similarity_graph(&s, &embeddings, cfg.feature_cutoff, cfg.max_degree)
            .unwrap();
        let rbf_s = rbf_for_kind(&cfg, crate::graph::GraphKind::Similarity).unwrap();
        let e_s = encode_edges(&sim, &layer.sim_enc, &rbf_s, false).unwrap();
        let h_f = mp_expert_forward(&h0, &sim, &e_s, &layer.similarity).unwrap();

        let multi = multiscale_forward(
            &LayerState {
                atoms: h0.clone(),
                superatom: s0.clone(),
            },
            &layer.multiscale,
        )
        .unwrap();

        let rbf_c = rbf_for_kind(&cfg, crate::graph::GraphKind::Cell).unwrap();
        let e_c = encode_edges(&graphs.cell, &p.cell_enc, &rbf_c, false).unwrap();
        let s_cell = mp_expert_forward(&s0, &graphs.cell, &e_c, &layer.cell).unwrap();

        let fused_atoms =
            fuse_atoms(&h_a, &h_f, &multi.atoms, layer.fusion.logit_values()).unwrap();
        let fused_super =
            fuse_superatom(&s_cell, &multi.superatom, layer.fusion.alpha_value()).unwrap();
        let pred = readout(&fused_atoms, &p.readout).unwrap();

        assert_relative_eq!(out.prediction, pred, epsilon = 1e-10);
        for c in 0..cfg.dim {
            assert_relative_eq!(
                out.superatom_embedding[[0, c]],
                fused_super[[0, c]],
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn prism_layer_matches_forward_composition() {
        let mut cfg = small_config();
        cfg.layers = 1;
        let s = nacl_like();
        let graphs = StaticGraphs::build(&s, &cfg).unwrap();
        let model = PrismModel::new(cfg.clone()).unwrap();
        let z: Vec<i64> = s.atomic_numbers().iter().map(|&v| v as i64).collect();
        let h0 = encode_atoms(&z, &model.params.embed).unwrap();
        let s0 = init_superatom(&h0, &model.params.super_score).unwrap();
        let (state, sim) = prism_layer(
            &LayerState {
                atoms: h0,
                superatom: s0,
            },
            &s,
            &graphs,
            &cfg,
            &model.params.layers[0],
            &model.params.atom_enc,
            &model.params.cell_enc,
        )
        .unwrap();
        assert!(sim.is_some());
        let out = model.forward(&s, &graphs).unwrap();
        for i in 0..2 {
            for j in 0..cfg.dim {
                assert_relative_eq!(
                    state.atoms[[i, j]],
                    out.atom_embeddings[[i, j]],
                    epsilon = 1e-12
                );
            }
        }
        let pred = readout(&state.atoms, &model.params.readout).unwrap();
        assert_relative_eq!(pred, out.prediction, epsilon = 1e-12);
    }
}
