//! Backward vs central differences for every differentiable op.

use attend_affect::tensor::{
    finite_diff_check, GradCheckOptions, Graph, ParamId, ParamStore, RngState, Tensor, Var,
};
use attend_affect::Result;

fn random(store: &mut ParamStore, rng: &mut RngState, name: &str, shape: &[usize]) -> ParamId {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
    store.insert(name, Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
}

/// Weighted sum so that every output coordinate carries a distinct gradient.
fn project(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = RngState::new(seed ^ 0xdead);
    let w = Tensor::new(shape, (0..n).map(|_| rng.normal(0.0, 1.0)).collect())?;
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn check<F>(store: &mut ParamStore, f: F) -> f64
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    finite_diff_check(store, &GradCheckOptions::default(), f)
        .unwrap()
        .max_rel_error
}

const SEEDS: std::ops::Range<u64> = 0..10;
const TOL: f64 = 1e-4;

#[test]
fn matmul_add_sub_mul() {
    for seed in SEEDS {
        let mut rng = RngState::new(seed);
        let mut s = ParamStore::new();
        let a = random(&mut s, &mut rng, "a", &[3, 4]);
        let b = random(&mut s, &mut rng, "b", &[4, 2]);
        let c = random(&mut s, &mut rng, "c", &[3, 2]);
        let err = check(&mut s, |g| {
            let (a, b, c) = (g.param(a), g.param(b), g.param(c));
            let ab = g.matmul(a, b)?;
            let d = g.sub(ab, c)?;
            let e = g.mul(d, c)?;
            let f = g.add(e, ab)?;
            project(g, f, seed)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn activations_and_affine() {
    for seed in SEEDS {
        let mut rng = RngState::new(seed);
        let mut s = ParamStore::new();
        let x = random(&mut s, &mut rng, "x", &[2, 5]);
        let bias = random(&mut s, &mut rng, "b", &[5]);
        let err = check(&mut s, |g| {
            let x = g.param(x);
            let b = g.param(bias);
            let y = g.add_row(x, b)?;
            let t = g.tanh(y);
            let sg = g.sigmoid(y);
            let r = g.relu(y);
            let om = g.one_minus(sg);
            let m = g.mul(t, om)?;
            let m = g.add(m, r)?;
            let m = g.affine(m, 0.7, -0.2);
            project(g, m, seed)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn softmax_both_axes() {
    for seed in SEEDS {
        let mut rng = RngState::new(seed);
        let mut s = ParamStore::new();
        let x = random(&mut s, &mut rng, "x", &[3, 4]);
        let err = check(&mut s, |g| {
            let x = g.param(x);
            let a = g.softmax(x, 1)?;
            let b = g.softmax(x, 0)?;
            let c = g.add(a, b)?;
            project(g, c, seed)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in SEEDS {
        let mut rng = RngState::new(seed);
        let mut s = ParamStore::new();
        let x = random(&mut s, &mut rng, "x", &[3, 6]);
        let gain = random(&mut s, &mut rng, "g", &[6]);
        let bias = random(&mut s, &mut rng, "b", &[6]);
        let err = check(&mut s, |g| {
            let (x, gn, b) = (g.param(x), g.param(gain), g.param(bias));
            let y = g.layer_norm(x, gn, b)?;
            project(g, y, seed)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn conv_and_maxpool() {
    for seed in SEEDS {
        let mut rng = RngState::new(seed);
        let mut s = ParamStore::new();
        let x = random(&mut s, &mut rng, "x", &[2, 3, 5]);
        let w = random(&mut s, &mut rng, "w", &[4, 3, 2]);
        let b = random(&mut s, &mut rng, "b", &[4]);
        let err = check(&mut s, |g| {
            let (x, w, b) = (g.param(x), g.param(w), g.param(b));
            let c = g.conv1d(x, w, b)?;
            let p = g.maxpool_time(c)?;
            let p2 = g.mul(p, p)?;
            let c2 = g.tanh(c);
            let a = project(g, p2, seed)?;
            let bsum = project(g, c2, seed + 1)?;
            g.add(a, bsum)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn shape_ops() {
    for seed in SEEDS {
        let mut rng = RngState::new(seed);
        let mut s = ParamStore::new();
        let x = random(&mut s, &mut rng, "x", &[3, 4]);
        let y = random(&mut s, &mut rng, "y", &[3, 2]);
        let err = check(&mut s, |g| {
            let (x, y) = (g.param(x), g.param(y));
            let c = g.concat(&[x, y, x], 1)?;
            let sl = g.slice_last(c, 2, 5)?;
            let t = g.transpose(sl)?;
            let r = g.gather_rows(t, &[4, 0, 0, 2])?;
            let rs = g.reshape(r, &[2, 6])?;
            let rows = g.concat(&[rs, rs], 0)?;
            let m = g.mean(rows);
            let p = project(g, rows, seed)?;
            g.add(m, p)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn three_layer_network() {
    for seed in SEEDS {
        let mut rng = RngState::new(seed);
        let mut s = ParamStore::new();
        let x = Tensor::new(vec![4, 3], (0..12).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let target = Tensor::new(vec![4, 1], (0..4).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let w1 = random(&mut s, &mut rng, "w1", &[3, 5]);
        let b1 = random(&mut s, &mut rng, "b1", &[5]);
        let w2 = random(&mut s, &mut rng, "w2", &[5, 4]);
        let w3 = random(&mut s, &mut rng, "w3", &[4, 1]);
        let err = check(&mut s, |g| {
            let xv = g.constant(x.clone());
            let tv = g.constant(target.clone());
            let (w1, b1, w2, w3) = (g.param(w1), g.param(b1), g.param(w2), g.param(w3));
            let h = g.matmul(xv, w1)?;
            let h = g.add_row(h, b1)?;
            let h = g.tanh(h);
            let h = g.matmul(h, w2)?;
            let h = g.sigmoid(h);
            let out = g.matmul(h, w3)?;
            g.mse(out, tv)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn forward_backward_bit_identical() {
    let run = || {
        let mut rng = RngState::new(42);
        let mut s = ParamStore::new();
        let w = random(&mut s, &mut rng, "w", &[4, 4]);
        let mut g = Graph::train(&s, RngState::new(9));
        let wv = g.param(w);
        let d = g.dropout(wv, 0.3);
        let sm = g.softmax_last(d).unwrap();
        let loss = g.sum(sm);
        let loss = g.mul(loss, loss).unwrap();
        g.backward(loss).unwrap();
        let out = g.value(loss).data().to_vec();
        let grads = g.into_param_grads();
        (out, grads.get(w).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let x = Tensor::new(vec![3, 4], data).unwrap();
            let s = attend_affect::tensor::softmax(&x, 1).unwrap();
            for r in 0..3 {
                let row = s.row(r);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
