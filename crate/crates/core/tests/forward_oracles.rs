//! Encoder forwards against plain-f64 straight-line evaluations.

use hmp_core::admission::{AdmissionEncoder, Modality};
use hmp_core::data::{generate_dataset, Dims, GenConfig, ItemRef};
use hmp_core::nn::{Initializer, ParamStore, LAYER_NORM_EPS};
use hmp_core::stay::{StayEncoder, StayInput};
use hmp_core::tensor::{perturb_params, Tape, Tensor};

const TOL: f64 = 1e-12;

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.get(name).unwrap().data()
}

/// `W x` for row-major `W: [rows, x.len()]`.
fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn lstm_final_h(store: &ParamStore, name: &str, seq: &[Vec<f64>], hidden: usize) -> Vec<f64> {
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    for x in seq {
        let gate = |g: &str| {
            let wx = matvec(p(store, &format!("{name}.w_{g}")), x);
            let uh = matvec(p(store, &format!("{name}.u_{g}")), &h);
            add(&add(&wx, &uh), p(store, &format!("{name}.b_{g}")))
        };
        let (i, f, o, cand) = (gate("i"), gate("f"), gate("o"), gate("c"));
        for k in 0..hidden {
            c[k] = sigmoid(f[k]) * c[k] + sigmoid(i[k]) * cand[k].tanh();
            h[k] = sigmoid(o[k]) * c[k].tanh();
        }
    }
    h
}

fn relu_affine(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let y = add(&matvec(p(store, &format!("{name}.weight")), x), p(store, &format!("{name}.bias")));
    y.into_iter().map(|v| v.max(0.0)).collect()
}

fn fuse(store: &ParamStore, name: &str, tokens: &[Vec<f64>]) -> Vec<f64> {
    let d = tokens[0].len();
    let proj = |w: &str| -> Vec<Vec<f64>> {
        tokens.iter().map(|t| matvec(p(store, &format!("{name}.{w}")), t)).collect()
    };
    let (q, k, v) = (proj("w_q"), proj("w_k"), proj("w_v"));
    let gamma = p(store, &format!("{name}.ln_gamma"));
    let beta = p(store, &format!("{name}.ln_beta"));
    let mut pooled = vec![f64::NEG_INFINITY; d];
    for (i, tok) in tokens.iter().enumerate() {
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| q[i].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let r: Vec<f64> = (0..d)
            .map(|c| tok[c] + (0..tokens.len()).map(|j| e[j] / z * v[j][c]).sum::<f64>())
            .collect();
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            let y = gamma[c] * (r[c] - mean) / (var + LAYER_NORM_EPS).sqrt() + beta[c];
            pooled[c] = pooled[c].max(y);
        }
    }
    pooled
}

fn assert_close(got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= TOL, "element {i}: {g} vs {w}");
    }
}

fn stay_dims() -> Dims {
    Dims {
        t: 2,
        d_f: 4,
        d_dem: 3,
        n_icd: 6,
        n_drug: 5,
        max_stays: 2,
    }
}

#[test]
fn stay_encoder_matches_straight_line() {
    let dims = stay_dims();
    let enc = StayEncoder::new(dims, 4);
    let mut store = ParamStore::new();
    enc.init(&mut store, &Initializer::new(11));
    perturb_params(&mut store, 0.2, 11);
    let rows = vec![vec![0.2, -0.4, 0.7, 0.1], vec![-0.3, 0.5, 0.0, 0.9]];
    let features = Tensor::matrix(2, 4, rows.concat()).unwrap();
    let demo = Tensor::vector(vec![1.0, 0.0, 1.0]).unwrap();

    let mut tape = Tape::new();
    let b = enc
        .encode_stay(&mut tape, &store, StayInput { features: &features, demographics: &demo })
        .unwrap();

    let h = lstm_final_h(&store, &enc.lstm_enc.name, &rows, 4);
    let d = relu_affine(&store, &enc.demo_mlp.name, demo.data());
    let want = fuse(&store, &enc.fusion.name, &[h, d]);
    assert_close(tape.value(b).data(), &want);
}

#[test]
fn stay_aggregation_matches_straight_line() {
    let dims = stay_dims();
    let d_r = 4;
    let ds = generate_dataset(&GenConfig {
        n_patients: 20,
        max_admissions: 2,
        dims,
        d_note: 3,
        latent_dim: 3,
        sparsity: 1.0,
        seed: 5,
    })
    .unwrap();
    let (patient, admission) = ds
        .patients
        .iter()
        .enumerate()
        .flat_map(|(pi, pt)| pt.admissions.iter().enumerate().map(move |(ai, a)| (pi, ai, a.stays.len())))
        .find(|&(_, _, n)| n == 1)
        .map(|(pi, ai, _)| (pi, ai))
        .expect("an admission with a single stay");

    let enc = AdmissionEncoder::new(dims, d_r, 3);
    let mut store = ParamStore::new();
    enc.init(&mut store, &Initializer::new(3));
    perturb_params(&mut store, 0.2, 3);
    let mut tape = Tape::new();
    let s = enc
        .aggregate_stays(&mut tape, &store, &ds, ItemRef::Admission { patient, admission })
        .unwrap();

    let stay = &ds.patients[patient].admissions[admission].stays[0];
    let rows: Vec<Vec<f64>> = stay.features.data().chunks(dims.d_f).map(<[f64]>::to_vec).collect();
    let h = lstm_final_h(&store, &enc.stay.lstm_enc.name, &rows, d_r);
    let d = relu_affine(&store, &enc.stay.demo_mlp.name, ds.patients[patient].demographics.data());
    let b = fuse(&store, &enc.stay.fusion.name, &[h, d]);
    let slots: Vec<f64> = b.iter().copied().chain(std::iter::repeat_n(0.0, d_r)).collect();
    let agg = &enc.stay_agg.name;
    let want = add(&matvec(p(&store, &format!("{agg}.weight")), &slots), p(&store, &format!("{agg}.bias")));
    assert_close(tape.value(s).data(), &want);
}

#[test]
fn admission_fusion_matches_straight_line() {
    let enc = AdmissionEncoder::new(stay_dims(), 4, 3);
    let mut store = ParamStore::new();
    enc.init(&mut store, &Initializer::new(8));
    perturb_params(&mut store, 0.2, 8);
    let toks = [
        vec![0.3, -0.2, 0.5, 0.1],
        vec![-0.7, 0.4, 0.0, 0.2],
        vec![0.9, 0.1, -0.4, -0.6],
        vec![0.05, -0.35, 0.25, 0.8],
    ];
    let mut tape = Tape::new();
    let vars: Vec<_> = toks
        .iter()
        .map(|t| tape.constant(Tensor::vector(t.clone()).unwrap()))
        .collect();
    let given = [
        (Modality::Note, vars[3]),
        (Modality::Icd, vars[1]),
        (Modality::Stays, vars[0]),
        (Modality::Drugs, vars[2]),
    ];
    let a = enc.admission_fuse(&mut tape, &store, &given).unwrap();
    let want = fuse(&store, &enc.fusion.name, &toks);
    assert_close(tape.value(a).data(), &want);
}
