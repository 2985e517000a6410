use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(&[-1.0, 0.0, 2.0]), false);
    let y = tape.apply(OpKind::Relu, &[x]).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn ones_kernel_sums_inputs() {
    let mut tape = Tape::new();
    let vals: Vec<f64> = (1..=9).map(f64::from).collect();
    let x = tape.leaf(Tensor::new(vec![1, 1, 3, 3], vals).unwrap(), false);
    let w = tape.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0), false);
    let y = tape.apply("conv2d".parse().unwrap(), &[x, w]).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[45.0]);
}

#[test]
fn identity_dense_passes_through() {
    let mut tape = Tape::new();
    let w = tape.leaf(
        Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        false,
    );
    let x = tape.leaf(Tensor::vector(&[3.0, 5.0]), false);
    let y = tape.dense(x, w, None).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
}

#[test]
fn unknown_op_kind_is_rejected() {
    let err = "batch_norm".parse::<OpKind>().unwrap_err();
    assert_eq!(err, TensorError::UnsupportedOp("batch_norm".into()));
}

#[test]
fn conv_shape_mismatch_names_dimensions() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![1, 3, 4, 4]), false);
    let w = tape.leaf(Tensor::zeros(vec![2, 2, 3, 3]), false);
    let err = tape.conv2d(x, w, None, 1, 0).unwrap_err();
    assert!(
        err.to_string()
            .contains("input channels 3 != kernel input channels 2"),
        "{err}"
    );
}

#[test]
fn wrong_arity_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![2]), false);
    assert!(tape.apply(OpKind::Add, &[x]).is_err());
}

#[test]
fn grad_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(&[1.0, -2.0, 3.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let root = tape.sum(sq);
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
}

#[test]
fn grad_of_linear_map_is_weight() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap(), false);
    let x = tape.leaf(Tensor::vector(&[4.0, 7.0]), true);
    let y = tape.dense(x, w, None).unwrap();
    let root = tape.sum(y);
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.5, -1.0]);
}

#[test]
fn non_scalar_root_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(&[1.0, 2.0]), true);
    assert_eq!(
        tape.backward(x).unwrap_err(),
        TensorError::NonScalarRoot(vec![2])
    );
}

#[test]
fn empty_tape_backward_is_noop() {
    let mut tape = Tape::new();
    assert!(tape.backward(Var(0)).is_ok());
}

#[test]
fn leaf_used_twice_accumulates_both_paths() {
    // root = sum(x + 3x) written with x consumed twice, vs the single-use 4x.
    let x0 = Tensor::vector(&[0.3, -1.2, 2.5]);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let tripled = tape.scale(x, 3.0).unwrap();
    let both = tape.add(x, tripled).unwrap();
    let root = tape.sum(both);
    tape.backward(root).unwrap();

    let mut single = Tape::new();
    let y = single.leaf(x0, true);
    let quad = single.scale(y, 4.0).unwrap();
    let root = single.sum(quad);
    single.backward(root).unwrap();
    assert_eq!(tape.grad(x), single.grad(y));
}

#[test]
fn fd_of_sum_is_ones() {
    let x = Tensor::vector(&[0.1, -4.0, 17.0, 2.0]);
    let g = finite_difference_gradient(|t: &Tensor| Ok::<_, ()>(t.sum()), &x, 1e-3).unwrap();
    for v in g.data() {
        assert!((v - 1.0).abs() < 1e-9);
    }
}

#[test]
fn fd_of_product_rule() {
    let x = Tensor::vector(&[2.0, 3.0]);
    let g = finite_difference_gradient(
        |t: &Tensor| Ok::<_, ()>(t.data()[0] * t.data()[1]),
        &x,
        1e-3,
    )
    .unwrap();
    assert!((g.data()[0] - 3.0).abs() < 1e-6);
    assert!((g.data()[1] - 2.0).abs() < 1e-6);
}

fn log_softmax_component0(t: &Tensor) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let x = tape.leaf(t.clone(), false);
    let y = tape.log_softmax(x)?;
    Ok(tape.value(y).data()[0])
}

#[test]
fn log_softmax_fd_agrees_with_backward() {
    let x0 = Tensor::vector(&[0.0, 0.0]);
    let fd = finite_difference_gradient(log_softmax_component0, &x0, 1e-3).unwrap();

    let mut tape = Tape::new();
    let x = tape.leaf(x0, true);
    let y = tape.log_softmax(x).unwrap();
    tape.backward_with_seed(y, &Tensor::vector(&[1.0, 0.0]))
        .unwrap();
    let ad = tape.grad(x).unwrap();
    // d/dx0 = 1 - 0.5, d/dx1 = -0.5
    assert!((ad[0] - 0.5).abs() < 1e-12 && (ad[1] + 0.5).abs() < 1e-12);
    for (a, b) in ad.iter().zip(fd.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn log_softmax_is_stable_for_large_logits() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(&[1000.0, 0.0, -1000.0]), false);
    let y = tape.log_softmax(x).unwrap();
    assert!(tape.value(y).is_finite());
    assert!(tape.value(y).data()[0].abs() < 1e-12);
}

/// conv -> relu -> pool -> conv -> relu -> gap -> dense -> log_softmax, on a tape.
struct TinyCnn {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

impl TinyCnn {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TinyCnn {
            w1: random_tensor(&mut rng, &[4, 2, 3, 3], 0.5),
            b1: random_tensor(&mut rng, &[4], 0.1),
            w2: random_tensor(&mut rng, &[5, 4, 3, 3], 0.3),
            b2: random_tensor(&mut rng, &[5], 0.1),
            w3: random_tensor(&mut rng, &[3, 5], 0.5),
            b3: random_tensor(&mut rng, &[3], 0.1),
        }
    }

    fn params(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    /// Returns the root and the leaf handles for (input, params...).
    fn record(&self, tape: &mut Tape, x: &Tensor, grads: bool) -> (Var, Vec<Var>) {
        let leaves: Vec<Var> = std::iter::once(x)
            .chain(self.params())
            .map(|t| tape.leaf(t.clone(), grads))
            .collect();
        let h = tape
            .conv2d(leaves[0], leaves[1], Some(leaves[2]), 1, 1)
            .unwrap();
        let h = tape.relu(h).unwrap();
        let h = tape.max_pool2d(h, 2, 2).unwrap();
        let h = tape.conv2d(h, leaves[3], Some(leaves[4]), 1, 0).unwrap();
        let h = tape.relu(h).unwrap();
        let h = tape.global_avg_pool(h).unwrap();
        let h = tape.dense(h, leaves[5], Some(leaves[6])).unwrap();
        let h = tape.log_softmax(h).unwrap();
        // weighted pick of log-probabilities keeps the root smooth
        let pick = tape.leaf(
            Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            false,
        );
        let h = tape.mul(h, pick).unwrap();
        (tape.sum(h), leaves)
    }
}

impl TinyCnn {
    fn from_slots(all: &[Tensor]) -> Self {
        TinyCnn {
            w1: all[1].clone(),
            b1: all[2].clone(),
            w2: all[3].clone(),
            b2: all[4].clone(),
            w3: all[5].clone(),
            b3: all[6].clone(),
        }
    }
}

/// Root value and branch pattern with `slots[slot][coord]` shifted by `delta`.
fn probe(slots: &[Tensor], slot: usize, coord: usize, delta: f64) -> (f64, Vec<usize>) {
    let mut all = slots.to_vec();
    all[slot].data_mut()[coord] += delta;
    let mut tape = Tape::new();
    let (r, _) = TinyCnn::from_slots(&all).record(&mut tape, &all[0], false);
    (tape.value(r).data()[0], tape.branch_pattern())
}

#[test]
fn tiny_cnn_gradients_match_finite_differences() {
    let eps = 1e-3;
    for seed in 0..5 {
        let net = TinyCnn::random(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random_tensor(&mut rng, &[2, 2, 6, 6], 1.0);
        let mut tape = Tape::new();
        let (root, leaves) = net.record(&mut tape, &x, true);
        tape.backward(root).unwrap();
        let center = tape.branch_pattern();

        let slots: Vec<Tensor> = std::iter::once(&x).chain(net.params()).cloned().collect();
        for (slot, base) in slots.iter().enumerate() {
            let ad = tape.grad(leaves[slot]).unwrap().to_vec();
            let mut checked = 0;
            while checked < 4 {
                let c = rng.random_range(0..base.len());
                let (hi, p_hi) = probe(&slots, slot, c, eps);
                let (lo, p_lo) = probe(&slots, slot, c, -eps);
                if p_hi != center || p_lo != center {
                    continue;
                }
                let fd = (hi - lo) / (2.0 * eps);
                let a = ad[c];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    rel < 1e-4 || (a - fd).abs() < 1e-9,
                    "seed {seed} slot {slot} coord {c}: ad {a} fd {fd}"
                );
                checked += 1;
            }
        }
    }
}

#[test]
fn forward_is_bit_identical_across_calls() {
    let net = TinyCnn::random(9);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[2, 2, 6, 6], 1.0);
    let run = || {
        let mut tape = Tape::new();
        let (r, _) = net.record(&mut tape, &x, false);
        tape.value(r).data()[0].to_bits()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn backward_is_linear(
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        xs in proptest::collection::vec(-2.0f64..2.0, 4),
    ) {
        // f = sum(x*x), g = sum(relu(x))
        let x0 = Tensor::vector(&xs);
        let grad = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let sq = tape.mul(x, x).unwrap();
            let f = tape.scale(sq, ca).unwrap();
            let r = tape.relu(x).unwrap();
            let g = tape.scale(r, cb).unwrap();
            let s = tape.add(f, g).unwrap();
            let root = tape.sum(s);
            tape.backward(root).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let combined = grad(a, b);
        let gf = grad(1.0, 0.0);
        let gg = grad(0.0, 1.0);
        for i in 0..xs.len() {
            prop_assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-10);
        }
    }
}
