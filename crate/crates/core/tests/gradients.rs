use aadl_core::models::{Activation, GradientModel, LossKind, Mlp, MlpSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn random_sizes(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let depth = rng.random_range(2..=4);
    (0..depth).map(|_| rng.random_range(1..=6)).collect()
}

/// Largest entry-wise relative gap between backprop and central differences.
/// Entries smaller than `floor` are compared on an absolute scale of `floor`.
fn max_relative_gap(model: &Mlp, w: &[f64], xs: &[f64], ys: &[f64], h: f64, floor: f64) -> f64 {
    let (_, grad) = model.loss_grad(w, xs, ys).unwrap();
    let mut probe = w.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..w.len() {
        probe[i] = w[i] + h;
        let up = model.loss(&probe, xs, ys).unwrap();
        probe[i] = w[i] - h;
        let down = model.loss(&probe, xs, ys).unwrap();
        probe[i] = w[i];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(floor));
    }
    worst
}

#[test]
fn tanh_mse_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..10 {
        let mut sizes = random_sizes(&mut rng);
        sizes.insert(0, rng.random_range(1..=5));
        let spec = MlpSpec { layer_sizes: sizes.clone(), activation: Activation::Tanh, init_seed: trial };
        let model = Mlp::new(spec, LossKind::Mse).unwrap();
        let w = model.init_params();
        let rows = rng.random_range(1..=8);
        let xs = random_batch(&mut rng, rows, sizes[0]);
        let ys = random_batch(&mut rng, rows, *sizes.last().unwrap());
        let gap = max_relative_gap(&model, &w, &xs, &ys, 1e-6, 1e-3);
        assert!(gap <= 1e-5, "trial {trial} sizes {sizes:?}: gap {gap:e}");
    }
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..10 {
        let spec = MlpSpec { layer_sizes: vec![3, 5, 2], activation: Activation::Tanh, init_seed: trial };
        let model = Mlp::new(spec, LossKind::LogisticCrossEntropy).unwrap();
        let w = model.init_params();
        let xs = random_batch(&mut rng, 6, 3);
        let ys: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..=1.0)).collect();
        let gap = max_relative_gap(&model, &w, &xs, &ys, 1e-6, 1e-3);
        assert!(gap <= 1e-5, "trial {trial}: gap {gap:e}");
    }
}

#[test]
fn relu_gradient_matches_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0;
    let mut trial = 0;
    while checked < 10 {
        trial += 1;
        let spec = MlpSpec { layer_sizes: vec![4, 6, 6, 1], activation: Activation::Relu, init_seed: trial };
        let model = Mlp::new(spec, LossKind::Mse).unwrap();
        let w = model.init_params();
        let xs = random_batch(&mut rng, 5, 4);
        let ys = random_batch(&mut rng, 5, 1);
        // Skip configurations with a hidden pre-activation within 1e-4 of a kink.
        if near_kink(&w, &xs, &[4, 6, 6, 1], 1e-4) {
            continue;
        }
        let gap = max_relative_gap(&model, &w, &xs, &ys, 1e-6, 1e-3);
        assert!(gap <= 1e-5, "trial {trial}: gap {gap:e}");
        checked += 1;
    }
}

/// Independent forward pass over nested per-layer matrices.
fn oracle_forward(w: &[f64], sizes: &[usize], x: &[f64], act: fn(f64) -> f64) -> Vec<f64> {
    let mut offset = 0;
    let mut a = x.to_vec();
    for (l, pair) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let weights: Vec<Vec<f64>> =
            (0..fan_out).map(|o| w[offset + o * fan_in..offset + (o + 1) * fan_in].to_vec()).collect();
        let biases = &w[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        offset += (fan_in + 1) * fan_out;
        let last = l + 2 == sizes.len();
        a = weights
            .iter()
            .zip(biases)
            .map(|(row, b)| {
                let mut z = 0.0;
                for j in (0..fan_in).rev() {
                    z += row[j] * a[j];
                }
                z += b;
                if last {
                    z
                } else {
                    act(z)
                }
            })
            .collect();
    }
    a
}

fn near_kink(w: &[f64], xs: &[f64], sizes: &[usize], margin: f64) -> bool {
    // Replays the forward pass and reports any hidden pre-activation near zero.
    let rows = xs.len() / sizes[0];
    for i in 0..rows {
        let mut offset = 0;
        let mut a = xs[i * sizes[0]..(i + 1) * sizes[0]].to_vec();
        for pair in sizes.windows(2).take(sizes.len() - 2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut next = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let z: f64 = w[offset + fan_in * fan_out + o]
                    + (0..fan_in).map(|j| w[offset + o * fan_in + j] * a[j]).sum::<f64>();
                if z.abs() < margin {
                    return true;
                }
                next.push(z.max(0.0));
            }
            offset += (fan_in + 1) * fan_out;
            a = next;
        }
    }
    false
}

#[test]
fn forward_matches_independent_oracle() {
    let sizes = vec![2, 8, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (act, f) in
        [(Activation::Relu, (|z: f64| z.max(0.0)) as fn(f64) -> f64), (Activation::Tanh, f64::tanh)]
    {
        for seed in 0..5 {
            let model = Mlp::new(
                MlpSpec { layer_sizes: sizes.clone(), activation: act, init_seed: seed },
                LossKind::Mse,
            )
            .unwrap();
            let w = model.init_params();
            let xs = random_batch(&mut rng, 16, 2);
            let got = model.forward(&w, &xs).unwrap();
            for i in 0..16 {
                let want = oracle_forward(&w, &sizes, &xs[2 * i..2 * i + 2], f);
                assert!((got[i] - want[0]).abs() <= 1e-14, "{} vs {}", got[i], want[0]);
            }
        }
    }
}
