use cecil::autodiff::{
    grad_check, Activation, GradCheckOptions, Mlp, MlpSpec, Mode, ParamId, ParamStore, Tape, Var, BN_EPSILON,
};
use cecil::rng::seeded;
use ndarray::Array2;
use rand::Rng;

fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = seeded(seed);
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-2.0..2.0))
}

/// `z = W x + b` for one sample, written out with plain loops.
fn affine_by_hand(store: &ParamStore, w: ParamId, b: Option<ParamId>, x: &[f64]) -> Vec<f64> {
    let w = store.get(w);
    (0..w.nrows())
        .map(|o| {
            let mut z = b.map_or(0.0, |b| store.get(b)[[0, o]]);
            for (i, xi) in x.iter().enumerate() {
                z += w[[o, i]] * xi;
            }
            z
        })
        .collect()
}

#[test]
fn two_layer_forward_matches_a_loop_evaluation() {
    let spec = MlpSpec::new(3)
        .layer(4, Activation::Relu, false)
        .layer(2, Activation::ScaledSigmoid(10.0), false);
    let mut store = ParamStore::new();
    let mlp = Mlp::new("net", spec, &mut store, &mut seeded(5)).unwrap();
    // nonzero biases so they are exercised
    for layer in mlp.dense_layers() {
        let b = layer.bias.unwrap();
        store.get_mut(b).mapv_inplace(|_| 0.3);
    }
    let input = random_input(6, 3, 8);
    let out = mlp.predict(&mut store, input.clone()).unwrap();

    let [l0, l1] = mlp.dense_layers() else { panic!() };
    for (k, row) in input.rows().into_iter().enumerate() {
        let x: Vec<f64> = row.to_vec();
        let h: Vec<f64> = affine_by_hand(&store, l0.weight, l0.bias, &x)
            .into_iter()
            .map(|z| if z > 0.0 { z } else { 0.0 })
            .collect();
        let y: Vec<f64> = affine_by_hand(&store, l1.weight, l1.bias, &h)
            .into_iter()
            .map(|z| 10.0 / (1.0 + (-z).exp()))
            .collect();
        for (o, yo) in y.iter().enumerate() {
            assert!((out[[k, o]] - yo).abs() < 1e-12, "sample {k}, output {o}");
        }
    }
}

#[test]
fn train_mode_batch_norm_matches_batch_statistics_by_hand() {
    let spec = MlpSpec::new(2).layer(3, Activation::Relu, true);
    let mut store = ParamStore::new();
    let mlp = Mlp::new("bn", spec, &mut store, &mut seeded(2)).unwrap();
    let norm = mlp.norm_layers()[0].clone().unwrap();
    store.get_mut(norm.gamma).fill(1.5);
    store.get_mut(norm.beta).fill(-0.2);
    let input = random_input(8, 2, 3);

    let mut tape = Tape::new(Mode::Train);
    let x = tape.input(input.clone());
    let y = mlp.forward(&mut tape, &mut store, x).unwrap();
    let out = tape.value(y).clone();

    let w = mlp.dense_layers()[0].weight;
    let z: Vec<Vec<f64>> = input
        .rows()
        .into_iter()
        .map(|r| affine_by_hand(&store, w, None, &r.to_vec()))
        .collect();
    for o in 0..3 {
        let col: Vec<f64> = z.iter().map(|r| r[o]).collect();
        let mean = col.iter().sum::<f64>() / 8.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for (k, v) in col.iter().enumerate() {
            let expected = (1.5 * (v - mean) / (var + BN_EPSILON).sqrt() - 0.2).max(0.0);
            assert!((out[[k, o]] - expected).abs() < 1e-12);
        }
    }
}

/// `−mean tanh(net(x))` over a fixed input, redrawn until no ReLU input is
/// within 1e-3 of its kink.
fn check(spec: MlpSpec, batch: usize, options: &GradCheckOptions) -> f64 {
    let mut store = ParamStore::new();
    let mlp = Mlp::new("probe", spec.clone(), &mut store, &mut seeded(11)).unwrap();
    let loss = |s: &mut ParamStore, input: &Array2<f64>| {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.input(input.clone());
        let y = mlp.forward(&mut tape, s, x)?;
        let t = tape.activation(y, Activation::Tanh);
        let m = tape.mean(t);
        let l = tape.scale(m, -1.0);
        Ok::<(Tape, Var), cecil::Error>((tape, l))
    };
    let input = (0..)
        .map(|seed| random_input(batch, spec.input_width, seed))
        .find(|x| loss(&mut store.clone(), x).unwrap().0.relu_margin() >= 1e-3)
        .unwrap();
    let params = mlp.param_ids();
    grad_check(&mut store, &params, |s| loss(s, &input), options)
        .unwrap()
        .max_rel_error
}

#[test]
fn random_three_layer_mlp_matches_central_differences() {
    let spec = MlpSpec::new(4)
        .layer(6, Activation::Relu, false)
        .layer(5, Activation::Tanh, false)
        .layer(2, Activation::Sigmoid, false);
    let err = check(spec, 5, &GradCheckOptions::default());
    assert!(err < 1e-5, "{err}");
}

#[test]
fn linear_net_is_exact() {
    let spec = MlpSpec::new(3).layer(2, Activation::Linear, false);
    let err = check(spec, 4, &GradCheckOptions::default());
    assert!(err < 1e-9, "{err}");
}

#[test]
fn relu_net_away_from_kinks() {
    let spec = MlpSpec::new(3)
        .layer(5, Activation::Relu, false)
        .layer(4, Activation::Relu, false)
        .layer(1, Activation::Linear, false);
    let err = check(spec, 6, &GradCheckOptions::default());
    assert!(err < 1e-5, "{err}");
}

#[test]
fn batch_norm_net_in_train_mode() {
    let spec = MlpSpec::new(3)
        .layer(5, Activation::Relu, true)
        .layer(2, Activation::Sigmoid, false);
    let err = check(spec, 8, &GradCheckOptions::default());
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_suite_covers_the_full_pipeline() {
    let cases = cecil::diagnostics::gradcheck_suite(7).unwrap();
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
    for needle in ["noma perfect", "oma snr", "B=2", "gain="] {
        assert!(cases.iter().any(|c| c.name.contains(needle)), "{needle}");
    }
}
