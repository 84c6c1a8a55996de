//! Central finite-difference checks for every tape primitive.
//!
//! Each primitive is wrapped in a scalar probe loss and its reverse-mode
//! gradient is compared against central differences (h = 1e-5) over seeded
//! random inputs. Coordinates whose analytic gradient is below 1e-8 in
//! magnitude are compared absolutely instead of relatively.

use driftlab_core::autodiff::{AttentionMask, Tape, Tensor, VarId};
use driftlab_core::rng::derive_rng_indexed;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-8;

/// Builds a scalar loss from a set of input tensors on a fresh tape.
type Probe = dyn Fn(&mut Tape, &[Tensor]) -> VarId;

fn loss_value(probe: &Probe, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let out = probe(&mut tape, inputs);
    tape.value(out).scalar_value()
}

fn check_gradients(name: &str, probe: &Probe, inputs: &[Tensor]) {
    let mut tape = Tape::new();
    let out = probe(&mut tape, inputs);
    tape.backward_scalar(out).unwrap();
    let params = tape.params().to_vec();
    assert_eq!(params.len(), inputs.len(), "{name}: probe must param() every input");

    for (pi, &pid) in params.iter().enumerate() {
        let analytic = tape
            .grad(pid)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[pi].len()]);
        for coord in 0..inputs[pi].len() {
            let mut plus = inputs.to_vec();
            plus[pi].values_mut()[coord] += H;
            let mut minus = inputs.to_vec();
            minus[pi].values_mut()[coord] -= H;
            let fd = (loss_value(probe, &plus) - loss_value(probe, &minus)) / (2.0 * H);
            let a = analytic[coord];
            if a.abs() < ABS_FLOOR {
                assert!(
                    (fd - a).abs() < ABS_FLOOR,
                    "{name}: input {pi} coord {coord}: analytic {a}, fd {fd}"
                );
            } else {
                let rel = (fd - a).abs() / a.abs();
                assert!(
                    rel < REL_TOL,
                    "{name}: input {pi} coord {coord}: analytic {a}, fd {fd}, rel {rel}"
                );
            }
        }
    }
}

fn randn(shape: Vec<usize>, seed: u64, idx: u64) -> Tensor {
    let mut rng = derive_rng_indexed(seed, "gradcheck", idx);
    Tensor::randn(shape, 1.0, &mut rng)
}

#[test]
fn add_mul_scale_sum() {
    for trial in 0..100u64 {
        let a = randn(vec![2, 3], 100, trial * 2);
        let b = randn(vec![2, 3], 100, trial * 2 + 1);
        check_gradients(
            "add+mul+scale",
            &move |tape, ins| {
                let x = tape.param(ins[0].clone());
                let y = tape.param(ins[1].clone());
                let s = tape.add(x, y).unwrap();
                let p = tape.mul(s, y).unwrap();
                let sc = tape.scale(p, 0.7).unwrap();
                tape.sum(sc).unwrap()
            },
            &[a, b],
        );
    }
}

#[test]
fn matmul() {
    for trial in 0..100u64 {
        let a = randn(vec![3, 2], 200, trial * 2);
        let b = randn(vec![2, 4], 200, trial * 2 + 1);
        check_gradients(
            "matmul",
            &move |tape, ins| {
                let x = tape.param(ins[0].clone());
                let y = tape.param(ins[1].clone());
                let c = tape.matmul(x, y).unwrap();
                // Square to make the probe non-linear in the output.
                let sq = tape.mul(c, c).unwrap();
                tape.sum(sq).unwrap()
            },
            &[a, b],
        );
    }
}

#[test]
fn softmax_and_log_softmax() {
    for trial in 0..100u64 {
        let x = randn(vec![3, 5], 300, trial);
        let w = randn(vec![3, 5], 301, trial);
        check_gradients(
            "softmax",
            &move |tape, ins| {
                let xi = tape.param(ins[0].clone());
                let wi = tape.param(ins[1].clone());
                let s = tape.softmax_rows(xi).unwrap();
                let p = tape.mul(s, wi).unwrap();
                tape.sum(p).unwrap()
            },
            &[x.clone(), w.clone()],
        );
        check_gradients(
            "log_softmax",
            &move |tape, ins| {
                let xi = tape.param(ins[0].clone());
                let wi = tape.param(ins[1].clone());
                let s = tape.log_softmax_rows(xi).unwrap();
                let p = tape.mul(s, wi).unwrap();
                tape.sum(p).unwrap()
            },
            &[x, w],
        );
    }
}

#[test]
fn masked_attention() {
    for trial in 0..100u64 {
        let q = randn(vec![4, 3], 400, trial * 3);
        let k = randn(vec![4, 3], 400, trial * 3 + 1);
        let v = randn(vec![4, 3], 400, trial * 3 + 2);
        // Mix of causal structure and a fully masked row to cover the
        // zero-output convention.
        let mask = AttentionMask::from_fn(4, 4, move |i, j| {
            if i == (trial % 4) as usize {
                false
            } else {
                j <= i || (trial % 2 == 0 && j == 3)
            }
        });
        check_gradients(
            "masked_attention",
            &move |tape, ins| {
                let qi = tape.param(ins[0].clone());
                let ki = tape.param(ins[1].clone());
                let vi = tape.param(ins[2].clone());
                let o = tape.masked_attention(qi, ki, vi, &mask).unwrap();
                let sq = tape.mul(o, o).unwrap();
                tape.sum(sq).unwrap()
            },
            &[q, k, v],
        );
    }
}

#[test]
fn embedding_and_gather() {
    for trial in 0..100u64 {
        let table = randn(vec![6, 3], 500, trial);
        let indices = {
            let mut rng = derive_rng_indexed(501, "gradcheck-idx", trial);
            use rand::Rng;
            (0..5).map(|_| rng.random_range(0..6usize)).collect::<Vec<_>>()
        };
        let picks = vec![(0usize, 1usize), (2, 0), (4, 2), (2, 0)];
        let idx = indices.clone();
        check_gradients(
            "embedding+gather",
            &move |tape, ins| {
                let t = tape.param(ins[0].clone());
                let e = tape.embedding(t, &idx).unwrap();
                let sq = tape.mul(e, e).unwrap();
                tape.gather_weighted_sum(sq, &picks, 1.0 / 0.3).unwrap()
            },
            &[table],
        );
    }
}
