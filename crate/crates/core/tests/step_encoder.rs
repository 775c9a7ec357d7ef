//! Tokenizer, graph assembly, message passing and aggregation against
//! hand computations and enumeration oracles.

use std::collections::BTreeSet;

use kgicu::encoder::{
    aggregate_matrix, aggregate_nodes, assemble_step_graph, build_vsn_edges, feature_tokenize, gnn_forward,
    gnn_forward_step, init_gnn, init_tokenizer, step_roles, Aggregation, Connectivity, EdgeSet, GnnSpec, GraphBatch,
    LayerKind, StepGraph, FT_BIAS, FT_MISSING, FT_WEIGHT,
};
use kgicu::knowledge::KGSubgraph;
use kgicu::numeric::{grad_check, ParameterSet, Tape, Tensor};
use kgicu::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tokenizer_params(n: usize, d: usize, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    init_tokenizer(&mut p, n, d, &mut rng).unwrap();
    // Non-zero biases so the checks below can tell them apart from zero.
    *p.get_mut(FT_BIAS).unwrap() = random_tensor(&mut rng, n, d);
    p
}

fn tokenize(p: &ParameterSet, x: &[f64], missing: &[bool]) -> kgicu::Result<Tensor> {
    let mut tape = Tape::new();
    let out = feature_tokenize(&mut tape, p, x, missing)?;
    Ok(tape.tensor(out))
}

#[test]
fn tokenizer_edge_cases() {
    let p = tokenizer_params(3, 4, 1);
    let zero = tokenize(&p, &[0.0; 3], &[false; 3]).unwrap();
    assert_eq!(zero.values(), p.get(FT_BIAS).unwrap().values());
    let masked = tokenize(&p, &[5.0, -2.0, f64::NAN], &[true; 3]).unwrap();
    assert_eq!(masked.values(), p.get(FT_MISSING).unwrap().values());
    assert!(matches!(tokenize(&p, &[1.0, f64::INFINITY, 0.0], &[false; 3]), Err(Error::Input(_))));
    assert!(matches!(tokenize(&p, &[1.0, 2.0], &[false; 3]), Err(Error::Shape { .. })));
}

#[test]
fn tokenizer_matches_hand_affine_map() {
    let p = tokenizer_params(2, 2, 42);
    let w = p.get(FT_WEIGHT).unwrap();
    let b = p.get(FT_BIAS).unwrap();
    let out = tokenize(&p, &[1.5, -0.5], &[false, false]).unwrap();
    let want = [
        1.5 * w.get(0, 0) + b.get(0, 0),
        1.5 * w.get(0, 1) + b.get(0, 1),
        -0.5 * w.get(1, 0) + b.get(1, 0),
        -0.5 * w.get(1, 1) + b.get(1, 1),
    ];
    assert_eq!(out.values(), want);
}

fn enumerate_vsn(n: usize, groups: Option<&[usize]>) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for a in 0..=n {
        for b in 0..=n {
            let linked = if a == n || b == n {
                a != b
            } else {
                a != b && groups.is_none_or(|g| g[a] == g[b])
            };
            if linked && a < b {
                out.insert((a, b));
            }
        }
    }
    out
}

#[test]
fn vsn_edge_counts() {
    assert_eq!(build_vsn_edges(3, Connectivity::Full, None).unwrap().len(), 6);
    let grouped = build_vsn_edges(4, Connectivity::Grouped, Some(&[1, 1, 2, 2])).unwrap();
    assert_eq!(grouped.len(), 6);
    assert_eq!(grouped, enumerate_vsn(4, Some(&[1, 1, 2, 2])));
    let ten = build_vsn_edges(10, Connectivity::Full, None).unwrap();
    assert_eq!(ten.len(), 55);
    assert_eq!(ten, enumerate_vsn(10, None));
    assert!(matches!(build_vsn_edges(4, Connectivity::Grouped, None), Err(Error::Config(_))));
    assert!(matches!(build_vsn_edges(4, Connectivity::Grouped, Some(&[1, 2])), Err(Error::Config(_))));
}

fn subgraph(rng: &mut ChaCha8Rng, k: usize, d: usize, edge_p: f64) -> KGSubgraph {
    let ids = (0..k).map(|i| format!("C{i:03}")).collect();
    let mut edges = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            if rng.random::<f64>() < edge_p {
                edges.push((a, b));
            }
        }
    }
    let feats = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    KGSubgraph::new(d, ids, edges, feats).unwrap()
}

#[test]
fn assembled_graph_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vsn = build_vsn_edges(3, Connectivity::Full, None).unwrap();
    let feats = random_tensor(&mut rng, 4, 5);
    let g0 = assemble_step_graph(&feats, &vsn, &KGSubgraph::empty(5)).unwrap();
    assert_eq!(g0.edges, vsn);
    assert_eq!(g0.node_features, feats);

    let kg = KGSubgraph::new(5, vec!["A".into(), "B".into(), "C".into()], vec![(0, 2)], vec![0.5; 15]).unwrap();
    let g = assemble_step_graph(&feats, &vsn, &kg).unwrap();
    assert_eq!(g.edges.len(), 19);
    assert_eq!(g.num_nodes(), 7);
    assert!(g.edges.contains(&(4, 6)));
    assert_eq!(g.node_roles, step_roles(3, &kg.concept_ids));

    let wrong = KGSubgraph::new(4, vec!["A".into()], vec![], vec![0.0; 4]).unwrap();
    assert!(matches!(assemble_step_graph(&feats, &vsn, &wrong), Err(Error::Contract(_))));
}

#[test]
fn assembled_edges_follow_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(0..=10);
        let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let vsn = if rng.random::<bool>() {
            build_vsn_edges(n, Connectivity::Full, None).unwrap()
        } else {
            build_vsn_edges(n, Connectivity::Grouped, Some(&groups)).unwrap()
        };
        let kg = subgraph(&mut rng, k, 3, 0.3);
        let g = assemble_step_graph(&random_tensor(&mut rng, n + 1, 3), &vsn, &kg).unwrap();
        assert_eq!(g.edges.len(), vsn.len() + kg.edges.len() + (n + 1) * k);

        let base = n + 1;
        let mut oracle = BTreeSet::new();
        for a in 0..base + k {
            for b in a + 1..base + k {
                let keep = if b < base {
                    vsn.contains(&(a, b))
                } else if a >= base {
                    kg.edges.contains(&(a - base, b - base))
                } else {
                    true
                };
                if keep {
                    oracle.insert((a, b));
                }
            }
        }
        assert_eq!(g.edges, oracle);
    }
}

fn layer_params(kind: LayerKind, depth: usize, d: usize, seed: u64) -> (ParameterSet, GnnSpec) {
    let spec = GnnSpec { kind, depth, dim: d };
    let mut p = ParameterSet::new();
    init_gnn(&mut p, spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (p, spec)
}

fn path_graph(features: Tensor) -> StepGraph {
    StepGraph {
        node_roles: step_roles(features.rows() - 1, &[]),
        node_features: features,
        edges: [(0, 1), (1, 2)].into_iter().collect(),
    }
}

#[test]
fn depth_zero_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = path_graph(random_tensor(&mut rng, 3, 4));
    for kind in [LayerKind::Gcn, LayerKind::Attention, LayerKind::SampleAggregate] {
        let (p, spec) = layer_params(kind, 0, 4, 0);
        let (out, records) = gnn_forward_step(&p, spec, &g, 0).unwrap();
        assert_eq!(out, g.node_features);
        assert!(records.is_empty());
    }
}

#[test]
fn single_node_attention_is_one() {
    let g = StepGraph {
        node_features: Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap(),
        node_roles: step_roles(0, &[]),
        edges: EdgeSet::new(),
    };
    let (p, spec) = layer_params(LayerKind::Attention, 2, 3, 9);
    let (_, records) = gnn_forward_step(&p, spec, &g, 4).unwrap();
    assert_eq!(records.len(), 2);
    for r in records {
        assert_eq!((r.size, r.timestep), (1, 4));
        assert_eq!(r.alpha, vec![1.0]);
    }
}

#[test]
fn gcn_on_path_matches_hand_product() {
    let x = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
    let w = [[1.0, 0.5], [-0.5, 1.0]];
    let bias = [0.1, -0.2];
    let mut p = ParameterSet::new();
    p.insert("gnn.0.weight", Tensor::from_rows(&[w[0].to_vec(), w[1].to_vec()]).unwrap()).unwrap();
    p.insert("gnn.0.bias", Tensor::row(bias.to_vec()).unwrap()).unwrap();
    let spec = GnnSpec {
        kind: LayerKind::Gcn,
        depth: 1,
        dim: 2,
    };
    let g = path_graph(Tensor::from_rows(&x.map(|r| r.to_vec())).unwrap());
    let (out, _) = gnn_forward_step(&p, spec, &g, 0).unwrap();

    // With self-loops the degrees are 2, 3, 2.
    let a_hat = [
        [1.0 / 2.0, 1.0 / 6f64.sqrt(), 0.0],
        [1.0 / 6f64.sqrt(), 1.0 / 3.0, 1.0 / 6f64.sqrt()],
        [0.0, 1.0 / 6f64.sqrt(), 1.0 / 2.0],
    ];
    for u in 0..3 {
        let mut mixed = [0.0; 2];
        for v in 0..3 {
            for c in 0..2 {
                mixed[c] += a_hat[u][v] * x[v][c];
            }
        }
        for c in 0..2 {
            let z = mixed[0] * w[0][c] + mixed[1] * w[1][c] + bias[c];
            assert!((out.get(u, c) - z.max(0.0)).abs() < 1e-12, "node {u} col {c}");
        }
    }
}

#[test]
fn sample_aggregate_isolated_node_uses_zero_mean() {
    let d = 2;
    let (p, spec) = layer_params(LayerKind::SampleAggregate, 1, d, 4);
    let g = StepGraph {
        node_features: Tensor::matrix(1, d, vec![0.7, -0.4]).unwrap(),
        node_roles: step_roles(0, &[]),
        edges: EdgeSet::new(),
    };
    let (out, _) = gnn_forward_step(&p, spec, &g, 0).unwrap();
    let w = p.get("gnn.0.weight").unwrap();
    for c in 0..d {
        let z = 0.7 * w.get(0, c) - 0.4 * w.get(1, c);
        assert!((out.get(0, c) - z.max(0.0)).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vsn = build_vsn_edges(5, Connectivity::Full, None).unwrap();
    let kg = subgraph(&mut rng, 6, 8, 0.4);
    let g = assemble_step_graph(&random_tensor(&mut rng, 6, 8), &vsn, &kg).unwrap();
    let (p, spec) = layer_params(LayerKind::Attention, 2, 8, 1);
    let (_, records) = gnn_forward_step(&p, spec, &g, 0).unwrap();
    assert_eq!(records.len(), 2);
    for r in &records {
        for s in r.row_sums() {
            assert!((s - 1.0).abs() < 1e-6);
        }
        for u in 0..r.size {
            for v in 0..r.size {
                let a = r.get(u, v);
                assert!(a >= 0.0);
                let linked = u == v || g.edges.contains(&(u.min(v), u.max(v)));
                assert!(linked || a == 0.0, "weight on non-edge ({u}, {v})");
            }
        }
    }
}

#[test]
fn aggregation_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let one = random_tensor(&mut rng, 1, 4);
    for mode in [Aggregation::Sum, Aggregation::Mean, Aggregation::Max] {
        assert_eq!(aggregate_matrix(&one, mode).unwrap(), one.values());
    }
    let u: Vec<f64> = one.values().to_vec();
    let neg: Vec<f64> = u.iter().map(|x| -x).collect();
    let pair = Tensor::from_rows(&[u, neg]).unwrap();
    assert!(aggregate_matrix(&pair, Aggregation::Sum).unwrap().iter().all(|&x| x == 0.0));
    let m = random_tensor(&mut rng, 5, 4);
    let mean = aggregate_matrix(&m, Aggregation::Mean).unwrap();
    let max = aggregate_matrix(&m, Aggregation::Max).unwrap();
    for c in 0..4 {
        let col: Vec<f64> = (0..5).map(|r| m.get(r, c)).collect();
        assert!((mean[c] - col.iter().sum::<f64>() / 5.0).abs() < 1e-15);
        assert_eq!(max[c], col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    assert!(matches!(aggregate_matrix(&Tensor::zeros(0, 4), Aggregation::Sum), Err(Error::Contract(_))));
}

fn step_embedding(g: &StepGraph, p: &ParameterSet, spec: GnnSpec, mode: Aggregation) -> Vec<f64> {
    let batch = GraphBatch::single(g).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(&g.node_features);
    let out = gnn_forward(&mut tape, p, spec, &batch, x).unwrap();
    let agg = aggregate_nodes(&mut tape, &batch, out.features, mode).unwrap();
    tape.values(agg).to_vec()
}

#[test]
fn knowledge_node_order_does_not_change_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, k, d) = (4, 5, 6);
    let vsn = build_vsn_edges(n, Connectivity::Full, None).unwrap();
    let vsn_feats = random_tensor(&mut rng, n + 1, d);
    let kg = subgraph(&mut rng, k, d, 0.5);
    // perm[new] = old
    let perm = [3, 0, 4, 1, 2];
    let inv: Vec<usize> = (0..k).map(|old| perm.iter().position(|&p| p == old).unwrap()).collect();
    let shuffled = KGSubgraph::new(
        d,
        perm.iter().map(|&o| kg.concept_ids[o].clone()).collect(),
        kg.edges
            .iter()
            .map(|&(a, b)| (inv[a].min(inv[b]), inv[a].max(inv[b])))
            .collect(),
        perm.iter().flat_map(|&o| kg.feature_row(o).to_vec()).collect(),
    )
    .unwrap();
    let g1 = assemble_step_graph(&vsn_feats, &vsn, &kg).unwrap();
    let g2 = assemble_step_graph(&vsn_feats, &vsn, &shuffled).unwrap();
    for kind in [LayerKind::Gcn, LayerKind::Attention, LayerKind::SampleAggregate] {
        let (p, spec) = layer_params(kind, 2, d, 6);
        for mode in [Aggregation::Sum, Aggregation::Mean, Aggregation::Max] {
            let a = step_embedding(&g1, &p, spec, mode);
            let b = step_embedding(&g2, &p, spec, mode);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "{kind} {mode}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn step_encoder_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, d) = (3, 4);
    let vsn = build_vsn_edges(n, Connectivity::Full, None).unwrap();
    let kg = subgraph(&mut rng, 3, d, 0.5);
    let text = random_tensor(&mut rng, 1, d);
    let kg_feats = Tensor::matrix(kg.len(), d, kg.features.clone()).unwrap();
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let missing = [false, true, false];
    let proj = random_tensor(&mut rng, 1, d);
    let graph_edges = kgicu::encoder::step_edges(n, &vsn, &kg.edges, kg.len());
    let batch = GraphBatch::new(&[(n + 1 + kg.len(), &graph_edges)]).unwrap();
    for kind in [LayerKind::Gcn, LayerKind::Attention, LayerKind::SampleAggregate] {
        for mode in [Aggregation::Sum, Aggregation::Mean, Aggregation::Max] {
            let (mut p, spec) = layer_params(kind, 2, d, 3);
            init_tokenizer(&mut p, n, d, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            *p.get_mut(FT_BIAS).unwrap() = random_tensor(&mut rng, n, d);
            for i in 0..2 {
                *p.get_mut(&format!("gnn.{i}.bias")).unwrap() = random_tensor(&mut rng, 1, d);
            }
            let err = grad_check(
                |tape, p| {
                    let tokens = feature_tokenize(tape, p, &x, &missing)?;
                    let t = tape.constant(&text);
                    let k = tape.constant(&kg_feats);
                    let nodes = tape.concat_rows(&[tokens, t, k])?;
                    let out = gnn_forward(tape, p, spec, &batch, nodes)?;
                    let agg = aggregate_nodes(tape, &batch, out.features, mode)?;
                    let w = tape.constant(&proj);
                    let y = tape.mul(agg, w)?;
                    tape.sum_all(y)
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind} {mode}: {err}");
        }
    }
}
