//! Central finite-difference checks for every differentiable op.
//!
//! Each op is exercised in f64 over randomized small shapes. The oracle
//! below recomputes the loss under per-element perturbations and never
//! touches the backward pass it is checking.

use fusenet_core::rng::Rng;
use fusenet_core::tensor::{NodeId, Tape, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

/// Loss builder: wires leaves into a scalar loss on the given tape.
type Build = dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId;

fn loss_value(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = build(&mut tape, &ids);
    tape.value(loss).data()[0]
}

/// Central finite differences w.r.t. every element of `inputs[which]`.
fn fd_grad(build: &Build, inputs: &[Tensor<f64>], which: usize) -> Vec<f64> {
    let base = inputs[which].to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut perturbed = inputs.to_vec();
        let mut plus = base.clone();
        plus[i] += H;
        perturbed[which] = Tensor::from_vec(inputs[which].shape().to_vec(), plus).unwrap();
        let up = loss_value(build, &perturbed);

        let mut minus = base.clone();
        minus[i] -= H;
        perturbed[which] = Tensor::from_vec(inputs[which].shape().to_vec(), minus).unwrap();
        let down = loss_value(build, &perturbed);

        grad[i] = (up - down) / (2.0 * H);
    }
    grad
}

/// Runs analytic backward and compares against the oracle for every input.
fn check(name: &str, inputs: &[Tensor<f64>], build: &Build) {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).unwrap();

    for (which, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("leaf gradient").to_vec();
        let numeric = fd_grad(build, inputs, which);
        for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
            assert!(
                rel < TOL,
                "{name}: input {which} element {i}: analytic {a} vs fd {n} (rel {rel:.2e})"
            );
        }
    }
}

/// Random tensor with entries kept away from zero (for kinked ops).
fn randn_offset(shape: &[usize], seed: u64) -> Tensor<f64> {
    let t = Tensor::<f64>::randn(shape, seed, 1.0).unwrap();
    t.map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

/// Fixed random projection so the scalar loss weights every output element.
fn project(tape: &mut Tape<f64>, out: NodeId, seed: u64) -> NodeId {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.leaf(Tensor::randn(&shape, seed ^ 0xabcd, 1.0).unwrap(), false);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

#[test]
fn grad_matmul() {
    for seed in 0..SEEDS {
        let mut dims = Rng::new(seed);
        let (m, k, n) = (
            1 + dims.next_below(4) as usize,
            1 + dims.next_below(4) as usize,
            1 + dims.next_below(4) as usize,
        );
        let inputs = vec![
            Tensor::randn(&[m, k], seed * 3 + 1, 1.0).unwrap(),
            Tensor::randn(&[k, n], seed * 3 + 2, 1.0).unwrap(),
        ];
        check("matmul", &inputs, &move |tape, ids| {
            let out = tape.matmul(ids[0], ids[1]).unwrap();
            project(tape, out, seed)
        });
    }
}

#[test]
fn grad_conv2d() {
    for seed in 0..SEEDS {
        let mut dims = Rng::new(seed + 100);
        let b = 1 + dims.next_below(2) as usize;
        let c = 1 + dims.next_below(3) as usize;
        let f = 1 + dims.next_below(3) as usize;
        let hw = 3 + dims.next_below(4) as usize;
        let k = [1, 3][dims.next_below(2) as usize];
        let inputs = vec![
            Tensor::randn(&[b, c, hw, hw], seed * 5 + 1, 1.0).unwrap(),
            Tensor::randn(&[f, c, k, k], seed * 5 + 2, 1.0).unwrap(),
            Tensor::randn(&[f], seed * 5 + 3, 1.0).unwrap(),
        ];
        check("conv2d", &inputs, &move |tape, ids| {
            let out = tape.conv2d(ids[0], ids[1], ids[2]).unwrap();
            project(tape, out, seed)
        });
    }
}

#[test]
fn grad_relu() {
    for seed in 0..SEEDS {
        let inputs = vec![randn_offset(&[3, 7], seed + 300)];
        check("relu", &inputs, &move |tape, ids| {
            let out = tape.relu(ids[0]);
            project(tape, out, seed)
        });
    }
}

#[test]
fn grad_maxpool2d() {
    for seed in 0..SEEDS {
        let mut dims = Rng::new(seed + 400);
        let b = 1 + dims.next_below(2) as usize;
        let c = 1 + dims.next_below(3) as usize;
        let hw = 2 * (1 + dims.next_below(3) as usize);
        // Spread values so no window has a near-tie at the FD step scale.
        let inputs = vec![Tensor::<f64>::randn(&[b, c, hw, hw], seed * 7 + 1, 1.0)
            .unwrap()
            .map(|x| x * 3.0)];
        check("maxpool2d", &inputs, &move |tape, ids| {
            let out = tape.maxpool2d(ids[0], 2).unwrap();
            project(tape, out, seed)
        });
    }
}

#[test]
fn grad_batchnorm_train() {
    for seed in 0..SEEDS {
        let mut dims = Rng::new(seed + 500);
        let b = 2 + dims.next_below(2) as usize;
        let c = 1 + dims.next_below(3) as usize;
        let hw = 1 + dims.next_below(3) as usize;
        let inputs = vec![
            Tensor::randn(&[b, c, hw, hw], seed * 11 + 1, 1.0).unwrap(),
            Tensor::<f64>::randn(&[c], seed * 11 + 2, 1.0).unwrap().map(|x| x + 2.0),
            Tensor::randn(&[c], seed * 11 + 3, 1.0).unwrap(),
        ];
        check("batchnorm_train", &inputs, &move |tape, ids| {
            let (out, _, _) = tape.batchnorm_train(ids[0], ids[1], ids[2], 1e-5).unwrap();
            project(tape, out, seed)
        });
    }
}

#[test]
fn grad_batchnorm_eval() {
    for seed in 0..SEEDS {
        let mut dims = Rng::new(seed + 600);
        let b = 1 + dims.next_below(3) as usize;
        let c = 1 + dims.next_below(3) as usize;
        let hw = 1 + dims.next_below(3) as usize;
        let running_mean = Tensor::<f64>::randn(&[c], seed * 13 + 4, 1.0).unwrap();
        let running_var = Tensor::<f64>::randn(&[c], seed * 13 + 5, 1.0)
            .unwrap()
            .map(|x| x.abs() + 0.5);
        let inputs = vec![
            Tensor::randn(&[b, c, hw, hw], seed * 13 + 1, 1.0).unwrap(),
            Tensor::randn(&[c], seed * 13 + 2, 1.0).unwrap(),
            Tensor::randn(&[c], seed * 13 + 3, 1.0).unwrap(),
        ];
        check("batchnorm_eval", &inputs, &move |tape, ids| {
            let out = tape
                .batchnorm_eval(ids[0], ids[1], ids[2], &running_mean, &running_var, 1e-5)
                .unwrap();
            project(tape, out, seed)
        });
    }
}

#[test]
fn grad_dropout() {
    for seed in 0..SEEDS {
        let inputs = vec![Tensor::randn(&[4, 9], seed * 17 + 1, 1.0).unwrap()];
        // The mask is redrawn identically on every FD evaluation.
        check("dropout", &inputs, &move |tape, ids| {
            let mut rng = Rng::new(seed + 12345);
            let out = tape.dropout(ids[0], 0.4, &mut rng).unwrap();
            project(tape, out, seed)
        });
    }
}

#[test]
fn grad_softmax() {
    for seed in 0..SEEDS {
        let mut dims = Rng::new(seed + 700);
        let b = 1 + dims.next_below(3) as usize;
        let k = 2 + dims.next_below(4) as usize;
        let inputs = vec![Tensor::randn(&[b, k], seed * 19 + 1, 1.0).unwrap()];
        check("softmax", &inputs, &move |tape, ids| {
            let out = tape.softmax(ids[0]).unwrap();
            project(tape, out, seed)
        });
    }
}

#[test]
fn grad_cross_entropy() {
    for seed in 0..SEEDS {
        let mut dims = Rng::new(seed + 800);
        let b = 1 + dims.next_below(3) as usize;
        let k = 2 + dims.next_below(4) as usize;
        // Strictly positive pseudo-probabilities away from the clamp floor.
        let probs = Tensor::<f64>::randn(&[b, k], seed * 23 + 1, 1.0)
            .unwrap()
            .map(|x| x.abs() + 0.05);
        let labels: Vec<usize> = (0..b).map(|i| (i + seed as usize) % k).collect();
        check("cross_entropy", &[probs], &move |tape, ids| {
            tape.cross_entropy_mean(ids[0], &labels).unwrap()
        });
    }
}

#[test]
fn grad_softmax_cross_entropy_chain() {
    for seed in 0..SEEDS {
        let mut dims = Rng::new(seed + 900);
        let b = 1 + dims.next_below(3) as usize;
        let k = 2 + dims.next_below(4) as usize;
        let logits = Tensor::randn(&[b, k], seed * 29 + 1, 1.0).unwrap();
        let labels: Vec<usize> = (0..b).map(|i| (i * 2 + seed as usize) % k).collect();
        check("softmax+ce", &[logits], &move |tape, ids| {
            let probs = tape.softmax(ids[0]).unwrap();
            tape.cross_entropy_mean(probs, &labels).unwrap()
        });
    }
}

#[test]
fn grad_elementwise_and_structural() {
    for seed in 0..SEEDS {
        let a = Tensor::randn(&[2, 6], seed * 31 + 1, 1.0).unwrap();
        let b = Tensor::randn(&[2, 6], seed * 31 + 2, 1.0).unwrap();
        check("add", &[a.clone(), b.clone()], &move |tape, ids| {
            let out = tape.add(ids[0], ids[1]).unwrap();
            project(tape, out, seed)
        });
        check("mul", &[a.clone(), b.clone()], &move |tape, ids| {
            let out = tape.mul(ids[0], ids[1]).unwrap();
            project(tape, out, seed)
        });
        check("scale", &[a.clone()], &move |tape, ids| {
            let out = tape.scale(ids[0], 2.5);
            project(tape, out, seed)
        });
        check("reshape", &[a.clone()], &move |tape, ids| {
            let out = tape.reshape(ids[0], &[3, 4]).unwrap();
            project(tape, out, seed)
        });
        check("sum", &[a.clone()], &|tape, ids| tape.sum(ids[0]));
    }
}

#[test]
fn grad_add_row_bias() {
    for seed in 0..SEEDS {
        let mut dims = Rng::new(seed + 1000);
        let b = 1 + dims.next_below(4) as usize;
        let n = 1 + dims.next_below(5) as usize;
        let inputs = vec![
            Tensor::randn(&[b, n], seed * 37 + 1, 1.0).unwrap(),
            Tensor::randn(&[n], seed * 37 + 2, 1.0).unwrap(),
        ];
        check("add_row_bias", &inputs, &move |tape, ids| {
            let out = tape.add_row_bias(ids[0], ids[1]).unwrap();
            project(tape, out, seed)
        });
    }
}

#[test]
fn grad_concat_features() {
    for seed in 0..SEEDS {
        let mut dims = Rng::new(seed + 1100);
        let b = 1 + dims.next_below(3) as usize;
        let widths = [
            1 + dims.next_below(4) as usize,
            1 + dims.next_below(4) as usize,
            1 + dims.next_below(4) as usize,
        ];
        let inputs: Vec<Tensor<f64>> = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Tensor::randn(&[b, w], seed * 41 + i as u64, 1.0).unwrap())
            .collect();
        check("concat", &inputs, &move |tape, ids| {
            let out = tape.concat_features(ids).unwrap();
            project(tape, out, seed)
        });
    }
}

#[test]
fn grad_global_avg_pool() {
    for seed in 0..SEEDS {
        let mut dims = Rng::new(seed + 1200);
        let b = 1 + dims.next_below(3) as usize;
        let c = 1 + dims.next_below(4) as usize;
        let hw = 1 + dims.next_below(4) as usize;
        let inputs = vec![Tensor::randn(&[b, c, hw, hw], seed * 43 + 1, 1.0).unwrap()];
        check("global_avg_pool", &inputs, &move |tape, ids| {
            let out = tape.global_avg_pool(ids[0]).unwrap();
            project(tape, out, seed)
        });
    }
}
