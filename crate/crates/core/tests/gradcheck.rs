use std::cell::Cell;

use hpk_core::tensor::{finite_difference_check, ParamStore, Tape, Tensor, FD_STEP};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let u = Uniform::new(-1.0, 1.0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| u.sample(rng)).collect()).unwrap()
}

#[test]
fn squared_norm_of_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&mut rng, &[3, 4]));
    let x = random(&mut rng, &[4, 1]);
    let f = |s: &ParamStore, tape: &mut Tape| {
        let wv = tape.param(s, w).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.matmul(wv, xv).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.sum(sq)
    };
    let mut tape = Tape::new();
    let out = f(&store, &mut tape);
    let grads = tape.backward(out).unwrap().param_grads(&store);
    let report = finite_difference_check(&store, &grads, &[w], FD_STEP, |s| {
        let mut t = Tape::new();
        let o = f(s, &mut t);
        Ok(t.value(o).item())
    })
    .unwrap();
    assert!(report.reliable);
    assert!(report.max_rel_err <= 1e-7, "{}", report.max_rel_err);
}

#[test]
fn constant_function_has_zero_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::full(&[2, 2], 0.3));
    let mut tape = Tape::new();
    let _ = tape.param(&store, w).unwrap();
    let c = tape.constant(Tensor::scalar(4.2)).unwrap();
    let grads = tape.backward(c).unwrap().param_grads(&store);
    assert!(grads.get(w).data().iter().all(|&g| g == 0.0));
    let report = finite_difference_check(&store, &grads, &[w], FD_STEP, |_| Ok(4.2)).unwrap();
    assert!(report.entries[0].max_abs_err <= 1e-9);
}

#[test]
fn nondeterministic_function_is_flagged() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(1.0));
    let grads = store.zero_grads();
    let calls = Cell::new(0.0);
    let report = finite_difference_check(&store, &grads, &[w], FD_STEP, |_| {
        calls.set(calls.get() + 1.0);
        Ok(calls.get())
    })
    .unwrap();
    assert!(!report.reliable);
    assert!(!report.passes(1.0));
}

#[test]
fn three_layer_network() {
    let mut checked = 0;
    for seed in 0.. {
        if checked == 20 {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = [3, 6, 5, 4];
        let layers: Vec<_> = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| {
                (
                    store.add(format!("w{k}"), random(&mut rng, &[d[0], d[1]])),
                    store.add(format!("b{k}"), random(&mut rng, &[d[1]])),
                )
            })
            .collect();
        let x = random(&mut rng, &[7, 3]);
        let label: Vec<usize> = (0..7).map(|i| i % 4).collect();
        let forward = |s: &ParamStore, tape: &mut Tape| {
            let mut h = tape.constant(x.clone()).unwrap();
            for (k, &(w, b)) in layers.iter().enumerate() {
                let wv = tape.param(s, w).unwrap();
                let bv = tape.param(s, b).unwrap();
                let y = tape.matmul(h, wv).unwrap();
                h = tape.add_bias(y, bv).unwrap();
                if k + 1 < layers.len() {
                    h = tape.relu(h);
                }
            }
            let p = tape.softmax(h).unwrap();
            let py = tape.pick(p, &label).unwrap();
            let l = tape.ln(py).unwrap();
            tape.mean(l)
        };
        let mut tape = Tape::new();
        let out = forward(&store, &mut tape);
        if tape.relu_margin() < 1e-3 {
            continue;
        }
        checked += 1;
        let grads = tape.backward(out).unwrap().param_grads(&store);
        let ids: Vec<_> = store.ids().collect();
        let report = finite_difference_check(&store, &grads, &ids, FD_STEP, |s| {
            let mut t = Tape::new();
            let o = forward(s, &mut t);
            Ok(t.value(o).item())
        })
        .unwrap();
        assert!(report.passes(1e-5), "seed {seed}: {:?}", report.entries);
    }
}
