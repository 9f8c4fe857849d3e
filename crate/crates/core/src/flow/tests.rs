use super::*;
use crate::gradengine::grad_check_store;
use ndarray::array;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_stack(m: usize, d_c: usize, d_f: usize, blocks: usize, scale: f64, seed: u64) -> FlowStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stack = FlowStack::identity(m, d_c, d_f, blocks);
    let mut fill = |a: &mut Array2<f64>| a.mapv_inplace(|_| rng.random_range(-scale..scale));
    for b in &mut stack.blocks {
        fill(&mut b.w_x);
        fill(&mut b.w_c);
        fill(&mut b.b_h);
        fill(&mut b.w_out);
        fill(&mut b.b_mu);
        fill(&mut b.b_alpha);
    }
    stack
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn random_cond(m: usize, d_c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((m, d_c), || rng.random_range(-1.0..1.0))
}

/// Central-difference Jacobian of the forward map.
fn jacobian(x: &[f64], cond: ArrayView2<'_, f64>, stack: &FlowStack) -> Array2<f64> {
    let m = x.len();
    let h = 1e-6;
    let mut jac = Array2::zeros((m, m));
    for j in 0..m {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (zp, _) = forward_transform(&xp, cond, stack).unwrap();
        let (zm, _) = forward_transform(&xm, cond, stack).unwrap();
        for i in 0..m {
            jac[[i, j]] = (zp[i] - zm[i]) / (2.0 * h);
        }
    }
    jac
}

/// log|det| by Gaussian elimination with partial pivoting.
fn log_abs_det(mut a: Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut total = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| a[[r, col]].abs().total_cmp(&a[[s, col]].abs()))
            .unwrap();
        for c in 0..n {
            a.swap([col, c], [pivot, c]);
        }
        let p = a[[col, col]];
        total += p.abs().ln();
        for r in col + 1..n {
            let f = a[[r, col]] / p;
            for c in col..n {
                a[[r, c]] -= f * a[[col, c]];
            }
        }
    }
    total
}

#[test]
fn identity_stack_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stack = FlowStack::identity(5, 3, 4, 2);
    let x = random_vec(5, &mut rng);
    let cond = random_cond(5, 3, &mut rng);
    let (z, logdet) = forward_transform(&x, cond.view(), &stack).unwrap();
    assert_eq!(z, x);
    assert_eq!(logdet, 0.0);
    assert_eq!(inverse_transform(&x, cond.view(), &stack).unwrap(), x);
}

/// μ = (0.5, x₀), α = 0: hidden units 0 and 1 carry relu(x₀) and relu(−x₀).
fn hand_block() -> FlowStack {
    let mut block = MafBlock::identity(2, 1, 2, false);
    block.w_x = array![[1.0, -1.0], [0.0, 0.0]];
    block.w_out = array![[1.0, 0.0], [-1.0, 0.0]];
    block.b_mu = array![[0.5, 0.0]];
    FlowStack { blocks: vec![block] }
}

#[test]
fn hand_evaluated_two_coordinate_block() {
    let stack = hand_block();
    let cond = Array2::zeros((2, 1));
    for x in [[1.3, -0.4], [-2.0, 0.7]] {
        let (z, logdet) = forward_transform(&x, cond.view(), &stack).unwrap();
        assert!((z[0] - (x[0] - 0.5)).abs() < 1e-15);
        assert!((z[1] - (x[1] - x[0])).abs() < 1e-15);
        assert_eq!(logdet, 0.0);
        // closed-form inverse: x₀ = z₀ + 0.5, x₁ = z₁ + x₀
        let back = inverse_transform(&z, cond.view(), &stack).unwrap();
        assert!((back[0] - (z[0] + 0.5)).abs() < 1e-15);
        assert!((back[1] - (z[1] + back[0])).abs() < 1e-15);
    }
}

#[test]
fn logdet_matches_finite_difference_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in [2, 3, 4] {
        for blocks in [1, 2, 3] {
            let stack = random_stack(m, 3, 8, blocks, 0.8, 10 + m as u64);
            let x = random_vec(m, &mut rng);
            let cond = random_cond(m, 3, &mut rng);
            let (_, logdet) = forward_transform(&x, cond.view(), &stack).unwrap();
            let fd = log_abs_det(jacobian(&x, cond.view(), &stack));
            assert!((logdet - fd).abs() < 1e-3, "M={m} B={blocks}: {logdet} vs {fd}");
        }
    }
}

#[test]
fn jacobian_is_triangular_in_block_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = 5;
    for reverse in [false, true] {
        let mut stack = random_stack(m, 2, 6, 1, 0.8, 3);
        stack.blocks[0].reverse = reverse;
        for _ in 0..5 {
            let x = random_vec(m, &mut rng);
            let cond = random_cond(m, 2, &mut rng);
            let jac = jacobian(&x, cond.view(), &stack);
            let (_, alpha) = stack.blocks[0].conditioner(&x, cond.view());
            let order = stack.blocks[0].order();
            for (pi, &i) in order.iter().enumerate() {
                for (pj, &j) in order.iter().enumerate() {
                    if pj > pi {
                        assert!(jac[[i, j]].abs() < 1e-6, "dz{i}/dx{j} = {}", jac[[i, j]]);
                    }
                }
                assert!((jac[[i, i]] - (-alpha[i]).exp()).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn conditioner_outputs_ignore_current_and_later_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let stack = random_stack(6, 2, 8, 2, 0.8, 4);
    let cond = random_cond(6, 2, &mut rng);
    for block in &stack.blocks {
        let order = block.order();
        let x = random_vec(6, &mut rng);
        let (mu, alpha) = block.conditioner(&x, cond.view());
        for (p, &i) in order.iter().enumerate() {
            let mut y = x.clone();
            for &j in &order[p..] {
                y[j] += 1.7;
            }
            let (mu2, alpha2) = block.conditioner(&y, cond.view());
            assert_eq!(mu[i], mu2[i]);
            assert_eq!(alpha[i], alpha2[i]);
        }
    }
}

#[test]
fn round_trip_at_window_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // initialisation-scale hidden weights with sizeable output layers
    let store = random_store(60, 8, 16, 2, 5);
    let stack = FlowStack::from_store(&store, 2).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = random_vec(60, &mut rng);
        let cond = random_cond(60, 8, &mut rng);
        let (z, _) = forward_transform(&x, cond.view(), &stack).unwrap();
        let back = inverse_transform(&z, cond.view(), &stack).unwrap();
        for (a, b) in x.iter().zip(&back) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-5, "round-trip error {worst}");
}

#[test]
fn alpha_is_clamped() {
    let mut stack = FlowStack::identity(4, 1, 2, 1);
    stack.blocks[0].b_alpha.fill(50.0);
    let cond = Array2::zeros((4, 1));
    let (z, logdet) = forward_transform(&[1.0; 4], cond.view(), &stack).unwrap();
    assert_eq!(logdet, -28.0);
    assert!((z[0] - (-7f64).exp()).abs() < 1e-18);
}

#[test]
fn gaussian_at_its_mean() {
    let stack = FlowStack::identity(60, 2, 4, 1);
    let cond = Array2::zeros((60, 2));
    let mu = vec![0.37; 60];
    let lp = log_prob(&mu, cond.view(), &stack, &mu).unwrap();
    assert!((lp - (-30.0 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-10);
    assert!((lp + 55.1363).abs() < 1e-4);

    let stack = FlowStack::identity(1, 2, 4, 1);
    let cond = Array2::zeros((1, 2));
    let lp = log_prob(&[1.25], cond.view(), &stack, &[0.25]).unwrap();
    assert!((lp - (-0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    let stack = random_stack(1, 3, 8, 2, 1.0, 6);
    let cond = array![[0.3, -0.8, 0.5]];
    let step = 1e-3;
    let mut total = 0.0;
    let mut x = -10.0;
    while x <= 10.0 {
        total += log_prob(&[x], cond.view(), &stack, &[0.4]).unwrap().exp() * step;
        x += step;
    }
    assert!((total - 1.0).abs() < 1e-2, "integral {total}");
}

#[test]
fn two_dimensional_density_integrates_to_one() {
    // nonlinear in x through the masked hidden layer
    let stack = random_stack(2, 2, 8, 2, 0.4, 7);
    let cond = array![[0.2, -0.1], [0.5, 0.3]];
    let step = 0.02;
    let n = (20.0 / step) as usize;
    let mut total = 0.0;
    for a in 0..=n {
        for b in 0..=n {
            let x = [-10.0 + a as f64 * step, -10.0 + b as f64 * step];
            total += log_prob(&x, cond.view(), &stack, &[-0.3, -0.3]).unwrap().exp();
        }
    }
    total *= step * step;
    assert!((total - 1.0).abs() < 1e-2, "integral {total}");
}

#[test]
fn non_finite_input_is_reported() {
    let stack = FlowStack::identity(3, 1, 2, 1);
    let cond = Array2::zeros((3, 1));
    let err = forward_transform(&[0.0, f64::NAN, 1.0], cond.view(), &stack).unwrap_err();
    assert!(matches!(err, Error::NonFinite(ref s) if s.contains("block")));
}

#[test]
fn shape_mismatch_is_an_error() {
    let stack = FlowStack::identity(3, 2, 2, 1);
    assert!(forward_transform(&[0.0; 4], Array2::zeros((4, 2)).view(), &stack).is_err());
    assert!(forward_transform(&[0.0; 3], Array2::zeros((3, 1)).view(), &stack).is_err());
    assert!(log_prob(&[0.0; 3], Array2::zeros((3, 2)).view(), &stack, &[0.0; 2]).is_err());
}

fn random_store(m: usize, d_c: usize, d_f: usize, blocks: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    register(&mut store, m, d_c, d_f, blocks, &mut rng);
    // make the output layers large enough to matter
    for b in 0..blocks {
        for part in ["w_out", "b_mu", "b_alpha"] {
            let v = store.value_mut(&name(b, part)).unwrap();
            v.mapv_inplace(|_| rng.random_range(-0.7..0.7));
        }
    }
    store
}

#[test]
fn tape_matches_sequential_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (m, d_c, d_f, blocks, rows) = (5, 3, 6, 3, 4);
    let store = random_store(m, d_c, d_f, blocks, 9);
    let stack = FlowStack::from_store(&store, blocks).unwrap();
    let x = Array2::from_shape_simple_fn((rows, m), || rng.random_range(-2.0..2.0));
    let cond = random_cond(rows * m, d_c, &mut rng);
    let means = Array2::from_shape_fn((rows, m), |(r, _)| r as f64 * 0.3 - 0.5);

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let cv = g.constant(cond.clone());
    let (z, logdet) = flow_graph(&mut g, &store, xv, cv, blocks).unwrap();
    let lp = log_prob_graph(&mut g, z, logdet, means.clone()).unwrap();
    for r in 0..rows {
        let xr: Vec<f64> = x.row(r).to_vec();
        let cr = cond.slice(ndarray::s![r * m..(r + 1) * m, ..]);
        let (zr, ldr) = forward_transform(&xr, cr, &stack).unwrap();
        for i in 0..m {
            assert!((g.value(z)[[r, i]] - zr[i]).abs() < 1e-12);
        }
        assert!((g.value(logdet)[[r, 0]] - ldr).abs() < 1e-12);
        let expected = log_prob(&xr, cr, &stack, &means.row(r).to_vec()).unwrap();
        assert!((g.value(lp)[[r, 0]] - expected).abs() < 1e-10);
    }
}

#[test]
fn tape_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (m, d_c, d_f, blocks, rows) = (4, 2, 5, 2, 3);
    let store = random_store(m, d_c, d_f, blocks, 11);
    let x = Array2::from_shape_simple_fn((rows, m), || rng.random_range(-2.0..2.0));
    let cond = random_cond(rows * m, d_c, &mut rng);
    let err = grad_check_store(
        &store,
        |s, g| {
            let xv = g.constant(x.clone());
            let cv = g.constant(cond.clone());
            let (z, ld) = flow_graph(g, s, xv, cv, blocks)?;
            let lp = log_prob_graph(g, z, ld, Array2::from_elem((rows, m), 0.2))?;
            let mean = g.mean(lp)?;
            g.scale(mean, -1.0)
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "relative gradient error {err}");
}

#[test]
fn fresh_store_is_near_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    register(&mut store, 6, 2, 4, 2, &mut rng);
    let stack = FlowStack::from_store(&store, 2).unwrap();
    let x = random_vec(6, &mut rng);
    let cond = random_cond(6, 2, &mut rng);
    let (z, _) = forward_transform(&x, cond.view(), &stack).unwrap();
    for (a, b) in x.iter().zip(&z) {
        assert!((a - b).abs() < 0.1);
    }
    assert!(FlowStack::from_store(&store, 0).is_err());
    assert!(FlowStack::from_store(&store, 3).is_err());
}

#[test]
fn target_banks() {
    let entity = init_targets(TargetMode::Entity, None, 3, 7, 42).unwrap();
    assert_eq!(entity.means.len(), 3);
    for k in 0..3 {
        let v = entity.mean_vector(k);
        assert_eq!(v.len(), 7);
        assert!(v.iter().all(|&e| e == v[0]));
    }
    assert_eq!(entity, init_targets(TargetMode::Entity, None, 3, 7, 42).unwrap());
    assert_ne!(entity.means, init_targets(TargetMode::Entity, None, 3, 7, 43).unwrap().means);

    let singletons = init_targets(TargetMode::Cluster, Some(&[0, 1, 2]), 3, 7, 42).unwrap();
    for k in 0..3 {
        assert_eq!(singletons.mean_vector(k), entity.mean_vector(k));
    }

    let grouped = init_targets(TargetMode::Cluster, Some(&[1, 0, 1]), 3, 7, 42).unwrap();
    assert_eq!(grouped.means.len(), 2);
    assert_eq!(grouped.mean_value(0), grouped.mean_value(2));

    assert!(matches!(init_targets(TargetMode::Cluster, None, 3, 7, 0), Err(Error::Config(_))));
    assert!(matches!(
        init_targets(TargetMode::Cluster, Some(&[0, 1]), 3, 7, 0),
        Err(Error::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bijective_for_any_parameters(seed in 0u64..10_000, scale in 0.05f64..1.0, m in 1usize..9) {
        let mut stack = random_stack(m, 2, 6, 2, scale, seed);
        // push some log-scales onto the clamp
        stack.blocks[0].b_alpha.mapv_inplace(|v| v * 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let x = random_vec(m, &mut rng);
        let cond = random_cond(m, 2, &mut rng);
        let (z, _) = forward_transform(&x, cond.view(), &stack).unwrap();
        let back = inverse_transform(&z, cond.view(), &stack).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}
