//! Recurrent cell, task heads and the composed model.

use std::collections::{BTreeMap, BTreeSet};

use kgicu::encoder::{Aggregation, Connectivity, LayerKind};
use kgicu::knowledge::{ConceptPair, GlobalKnowledgeGraph, HashedGaussian};
use kgicu::model::{prepare_with_targets, Modalities, Model, ModelSpec, StepInputs};
use kgicu::numeric::{grad_check, ParameterSet, Tape, Tensor};
use kgicu::sequence::{
    head_forward, init_head, init_recurrent, predict, recurrent_forward, TaskKind, LSTM_BIAS, LSTM_W_HIDDEN,
    LSTM_W_INPUT,
};
use kgicu::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn run_cell(p: &ParameterSet, steps: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(steps);
    let h = recurrent_forward(&mut tape, p, x).unwrap();
    tape.tensor(h)
}

fn cell_params(d: usize, h: usize, seed: u64) -> ParameterSet {
    let mut p = ParameterSet::new();
    init_recurrent(&mut p, d, h, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    p
}

#[test]
fn zero_inputs_stay_at_origin() {
    let p = cell_params(3, 5, 1);
    let out = run_cell(&p, &Tensor::zeros(4, 3));
    assert!(out.values().iter().all(|&v| v == 0.0));
}

#[test]
fn prefix_states_are_shared() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = cell_params(3, 4, 2);
    let two = random_tensor(&mut rng, 2, 3, 1.0);
    let one = Tensor::matrix(1, 3, two.row_slice(0).to_vec()).unwrap();
    assert_eq!(run_cell(&p, &one).row_slice(0), run_cell(&p, &two).row_slice(0));
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn cell_matches_scalar_gate_oracle() {
    let (d, h) = (2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let wx = random_tensor(&mut rng, d, 4 * h, 0.5);
    let wh = random_tensor(&mut rng, h, 4 * h, 0.5);
    let b = random_tensor(&mut rng, 1, 4 * h, 0.1);
    let mut p = ParameterSet::new();
    p.insert(LSTM_W_INPUT, wx.clone()).unwrap();
    p.insert(LSTM_W_HIDDEN, wh.clone()).unwrap();
    p.insert(LSTM_BIAS, b.clone()).unwrap();
    let xs = [[0.3, -1.2], [0.8, 0.1], [-0.5, 0.6]];
    let out = run_cell(&p, &Tensor::from_rows(&xs.map(|r| r.to_vec())).unwrap());

    let (mut hs, mut cs) = ([0.0; 2], [0.0; 2]);
    for (t, x) in xs.iter().enumerate() {
        let pre = |gate: usize, k: usize| {
            let col = gate * h + k;
            b.get(0, col) + x[0] * wx.get(0, col) + x[1] * wx.get(1, col) + hs[0] * wh.get(0, col) + hs[1] * wh.get(1, col)
        };
        let mut next_h = [0.0; 2];
        for k in 0..h {
            let i = sigmoid(pre(0, k));
            let f = sigmoid(pre(1, k));
            let g = pre(2, k).tanh();
            let o = sigmoid(pre(3, k));
            cs[k] = f * cs[k] + i * g;
            next_h[k] = o * cs[k].tanh();
        }
        hs = next_h;
        for k in 0..h {
            assert!((out.get(t, k) - hs[k]).abs() < 1e-14, "step {t} unit {k}");
        }
    }
}

#[test]
fn cell_rejects_wrong_input_width() {
    let p = cell_params(3, 2, 0);
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(2, 4));
    assert!(matches!(recurrent_forward(&mut tape, &p, x), Err(Error::Contract(_))));
}

fn head_params(h: usize, out: usize, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    init_head(&mut p, h, out, &mut rng).unwrap();
    *p.get_mut("head.0.bias").unwrap() = random_tensor(&mut rng, 1, h / 2, 0.3);
    *p.get_mut("head.1.bias").unwrap() = random_tensor(&mut rng, 1, out, 0.3);
    p
}

fn run_predict(task: TaskKind, p: &ParameterSet, hiddens: &Tensor) -> kgicu::Result<Vec<f64>> {
    let mut tape = Tape::new();
    let hv = tape.constant(hiddens);
    let out = predict(&mut tape, task, p, hv)?;
    Ok(tape.values(out).to_vec())
}

#[test]
fn task_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 6;
    let hiddens = random_tensor(&mut rng, 50, h, 1.0);

    let pheno = run_predict(TaskKind::Phenotyping, &head_params(h, 25, 1), &hiddens).unwrap();
    assert_eq!(pheno.len(), 25);
    let decomp_params = head_params(h, 1, 2);
    let decomp = run_predict(TaskKind::Decompensation, &decomp_params, &hiddens).unwrap();
    assert_eq!(decomp.len(), 50);
    let mort = run_predict(TaskKind::Mortality, &decomp_params, &hiddens).unwrap();
    assert_eq!(mort, vec![decomp[47]]);
    assert!(pheno.iter().chain(&decomp).all(|&p| p > 0.0 && p < 1.0));

    let short = random_tensor(&mut rng, 47, h, 1.0);
    assert!(matches!(run_predict(TaskKind::Mortality, &decomp_params, &short), Err(Error::Eligibility(_))));
    assert!(matches!(run_predict(TaskKind::Mortality, &head_params(h, 25, 1), &hiddens), Err(Error::Contract(_))));

    // Affine, relu, affine, sigmoid by hand.
    let w0 = decomp_params.get("head.0.weight").unwrap();
    let b0 = decomp_params.get("head.0.bias").unwrap();
    let w1 = decomp_params.get("head.1.weight").unwrap();
    let b1 = decomp_params.get("head.1.bias").unwrap();
    for t in [0, 17, 49] {
        let mut z = b1.get(0, 0);
        for m in 0..h / 2 {
            let a: f64 = (0..h).map(|k| hiddens.get(t, k) * w0.get(k, m)).sum::<f64>() + b0.get(0, m);
            z += a.max(0.0) * w1.get(m, 0);
        }
        assert!((decomp[t] - sigmoid(z)).abs() < 1e-14);
    }
}

fn toy_inputs(steps: usize, n: usize, d: usize, seed: u64) -> StepInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let concepts = (0..steps)
        .map(|t| {
            let mut m = BTreeMap::new();
            if t % 2 == 0 {
                m.insert("C1".to_string(), 1 + t % 3);
            }
            if t > 0 {
                m.insert("C2".to_string(), 1);
            }
            if t == 2 {
                m.insert("C3".to_string(), 2);
            }
            m
        })
        .collect();
    StepInputs {
        steps,
        n_vs: n,
        vitals: (0..steps * n).map(|_| rng.random_range(-1.5..1.5)).collect(),
        missing: (0..steps * n).map(|_| rng.random::<f64>() < 0.2).collect(),
        text: (0..steps * d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        text_dim: d,
        concepts,
    }
}

fn toy_kg(d: usize) -> GlobalKnowledgeGraph {
    let sets: Vec<BTreeSet<String>> = vec![["C1", "C2", "C3"].iter().map(|s| s.to_string()).collect()];
    let edges: BTreeSet<ConceptPair> = [ConceptPair::new("C1", "C2").unwrap()].into_iter().collect();
    GlobalKnowledgeGraph::build(sets.iter(), &edges, &HashedGaussian { dim: d, seed: 7 }).unwrap()
}

fn toy_spec(task: TaskKind, kind: LayerKind, m: Modalities, n: usize, d: usize, h: usize) -> ModelSpec {
    ModelSpec {
        task,
        n_vs: n,
        dim: d,
        hidden: h,
        layer_kind: kind,
        depth: 2,
        aggregation: Aggregation::Sum,
        max_kg_nodes: 30,
        modalities: m,
        connectivity: Connectivity::Full,
        groups: None,
        carry_concepts: false,
    }
}

fn toy_model(spec: ModelSpec, seed: u64) -> Model {
    let d = spec.dim;
    let params = spec.init_params(seed).unwrap();
    Model::new(spec, params, toy_kg(d)).unwrap()
}

#[test]
fn full_model_gradients_on_three_steps() {
    let (n, d, h) = (3, 4, 4);
    let inputs = toy_inputs(3, n, d, 9);
    for kind in [LayerKind::Gcn, LayerKind::Attention, LayerKind::SampleAggregate] {
        let model = toy_model(toy_spec(TaskKind::Decompensation, kind, Modalities::FULL, n, d, h), 5);
        let prep = prepare_with_targets(&model, "toy".into(), &inputs, vec![0.0, 1.0, 1.0]).unwrap();
        let err = grad_check(
            |tape, p| {
                let f = model.forward(tape, p, &prep)?;
                tape.bce(f.probs, prep.targets.clone())
            },
            &model.params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{kind}: {err}");
    }
}

#[test]
fn online_predictions_ignore_the_future() {
    let (n, d, h) = (3, 8, 8);
    let model = toy_model(
        toy_spec(TaskKind::Decompensation, LayerKind::Attention, Modalities::FULL, n, d, h),
        3,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let base = toy_inputs(6, n, d, 1);
    let p0 = model.predict(&prepare_with_targets(&model, "a".into(), &base, vec![0.0; 6]).unwrap()).unwrap();
    assert_eq!(p0.len(), 6);
    for cut in 0..5 {
        let mut changed = base.clone();
        for i in (cut + 1) * n..6 * n {
            changed.vitals[i] += rng.random_range(-3.0..3.0);
            changed.missing[i] = rng.random::<bool>();
        }
        for i in (cut + 1) * d..6 * d {
            changed.text[i] = rng.random_range(-1.0..1.0);
        }
        for t in cut + 1..6 {
            changed.concepts[t].insert("C3".into(), 4);
        }
        let p1 = model
            .predict(&prepare_with_targets(&model, "a".into(), &changed, vec![0.0; 6]).unwrap())
            .unwrap();
        assert_eq!(p0[..=cut], p1[..=cut], "cut {cut}");
        assert_ne!(p0[cut + 1..], p1[cut + 1..]);
    }
}

#[test]
fn bare_rung_is_a_plain_recurrent_model() {
    let (n, d, h) = (3, 4, 5);
    let mut inputs = toy_inputs(5, n, d, 2);
    inputs.vitals[4] = 123.0;
    inputs.missing[4] = true;
    let model = toy_model(
        toy_spec(TaskKind::Decompensation, LayerKind::SampleAggregate, Modalities::new(false, false, false, false), n, d, h),
        8,
    );
    let got = model.predict(&prepare_with_targets(&model, "a".into(), &inputs, vec![0.0; 5]).unwrap()).unwrap();
    let raw: Vec<f64> = inputs
        .vitals
        .iter()
        .zip(&inputs.missing)
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect();
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::matrix(5, n, raw).unwrap());
    let hs = recurrent_forward(&mut tape, &model.params, x).unwrap();
    let probs = head_forward(&mut tape, &model.params, hs).unwrap();
    assert_eq!(got, tape.values(probs));
}

#[test]
fn empty_text_and_knowledge_reduce_to_vitals_only() {
    let (n, d, h) = (3, 4, 5);
    let mut inputs = toy_inputs(4, n, d, 6);
    inputs.text.iter_mut().for_each(|v| *v = 0.0);
    inputs.concepts.iter_mut().for_each(BTreeMap::clear);
    let full = toy_model(toy_spec(TaskKind::Decompensation, LayerKind::Gcn, Modalities::FULL, n, d, h), 4);
    let vitals = toy_model(
        toy_spec(TaskKind::Decompensation, LayerKind::Gcn, Modalities::new(true, true, false, false), n, d, h),
        4,
    );
    assert_eq!(full.params, vitals.params);
    let a = full.predict(&prepare_with_targets(&full, "a".into(), &inputs, vec![0.0; 4]).unwrap()).unwrap();
    let b = vitals.predict(&prepare_with_targets(&vitals, "a".into(), &inputs, vec![0.0; 4]).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ladder_constraints() {
    assert!(Modalities::new(true, false, true, true).validate().is_err());
    assert!(Modalities::new(false, true, true, false).validate().is_err());
    for (_, m) in kgicu::model::ABLATION_LADDER {
        m.validate().unwrap();
    }
}
