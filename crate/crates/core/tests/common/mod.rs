#![allow(dead_code)]

use tumorseg::{ParamStore, Rng, Tape, Tensor};

pub fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
}

/// Like `rand_tensor` but bounded away from zero, for ops with a kink at 0.
pub fn rand_away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.uniform_in(0.05, 1.0);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    })
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Compares the tape gradient of `build` against central finite differences
/// for every element of every input. `build` maps input vars to a scalar loss.
/// Returns the worst norm-wise relative error over the inputs.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[tumorseg::Var]) -> tumorseg::Var,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs.iter().enumerate().map(|(i, t)| store.add(format!("in{i}"), t.clone())).collect();
    let eval = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let vars: Vec<_> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<_> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss, &mut store).unwrap();

    let mut worst: f64 = 0.0;
    for &id in &ids {
        let analytic = store.grad(id).data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(&store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(&store);
            store.value_mut(id).data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(vec_rel_err(&analytic, &numeric));
    }
    worst
}

/// Finite-difference check of every parameter in `store` for the scalar built by `build`.
/// Returns the worst norm-wise relative error over the parameters.
pub fn check_store_gradients<F>(store: &mut ParamStore<f64>, h: f64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> tumorseg::Var,
{
    let eval = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        tape.value(loss).item().unwrap()
    };
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.backward(loss, store).unwrap();
    let ids: Vec<_> = store.iter().map(|p| p.id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = store.grad(id).data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(vec_rel_err(&analytic, &numeric));
    }
    worst
}

/// Projects an output onto fixed random weights so the loss is a generic
/// linear functional of every output element.
pub fn project(tape: &mut Tape<f64>, y: tumorseg::Var, seed: u64) -> tumorseg::Var {
    let mut rng = Rng::new(seed ^ 0xABCD);
    let w = rand_tensor(tape.shape(y), &mut rng);
    let wv = tape.constant(w);
    let prod = tape.mul(y, wv).unwrap();
    tape.sum(prod)
}

/// Triple-loop matrix product.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Direct nested-sum cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[co, ho, wo]);
    for o in 0..co {
        for y in 0..ho {
            for xx in 0..wo {
                let mut s = b[o];
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w.at(&[o, c, dy, dx]) * x.at(&[c, iy as usize, ix as usize]);
                        }
                    }
                }
                out.data_mut()[(o * ho + y) * wo + xx] = s;
            }
        }
    }
    out
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-9)).fold(0.0, f64::max)
}
