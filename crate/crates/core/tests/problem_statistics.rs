use nadamw_core::problems::{
    FiniteSumSpec, NoisyQuadratic, Problem, ProblemSpec, QuadraticSpec, Toy1D,
};
use nadamw_core::rng::{substream, Purpose};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn toy_mixture_mean_is_the_gradient_at_random_points() {
    let t = Toy1D::default();
    let mut rng = substream(5, Purpose::Audit);
    for _ in 0..100 {
        let x: f64 = rng.random_range(-100.0..100.0);
        let grad = (x - t.x_star) / 100.0;
        let mean = t.oracle_mean(x);
        assert!((mean - grad).abs() <= 1e-12 * grad.abs().max(1e-12), "x = {x}");
    }
}

#[test]
fn toy_sampler_is_unbiased_within_four_stderr() {
    let p = Problem::Toy1D(Toy1D::default());
    let mut s = p.training_sampler(2024);
    for &x in &[6.0, 5.0, 3.0] {
        let n = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let g = s.stoch_grad(&p, &[x]).unwrap()[0];
            sum += g;
            sq += g * g;
        }
        let mean = sum / n as f64;
        let var = (sq - n as f64 * mean * mean) / (n - 1) as f64;
        let stderr = (var / n as f64).sqrt();
        let grad = p.full_grad(&[x]).unwrap()[0];
        assert!((mean - grad).abs() <= 4.0 * stderr, "x = {x}: {mean} vs {grad}");
        let expected_var = p.conditional_variance(&[x]).unwrap()[0];
        assert!((var - expected_var).abs() <= 0.01 * expected_var);
    }
}

#[test]
fn quadratic_noise_variance_within_five_percent() {
    let sigma = vec![0.1, 0.5, 1.0, 3.0];
    let p = Problem::NoisyQuadratic(NoisyQuadratic {
        curvatures: vec![1.0, 2.0, 3.0, 4.0],
        x_star: vec![0.0; 4],
        sigma: sigma.clone(),
    });
    let x = [0.3, -0.7, 1.1, 2.0];
    let grad = p.full_grad(&x).unwrap();
    let mut s = p.training_sampler(8);
    let n = 100_000;
    let mut sq = vec![0.0; 4];
    for _ in 0..n {
        let g = s.stoch_grad(&p, &x).unwrap();
        for i in 0..4 {
            sq[i] += (g[i] - grad[i]).powi(2);
        }
    }
    for i in 0..4 {
        let var = sq[i] / n as f64;
        let target = sigma[i] * sigma[i];
        assert!((var - target).abs() <= 0.05 * target, "coordinate {i}: {var} vs {target}");
    }
}

#[test]
fn finite_sum_epochs_cover_every_sample() {
    let spec = ProblemSpec::FiniteSumQuadratic(FiniteSumSpec {
        d: 2,
        n: 10,
        batch: 3,
        curvature_min: 1.0,
        curvature_max: None,
        x_star: 0.0,
        shift_scale: 2.0,
        x1_offset: 1.0,
        problem_seed: 4,
    });
    let (p, x1) = spec.build().unwrap();
    let mut s = p.training_sampler(0);
    // batches of 3, 3, 3, 1 per epoch, weighted back to the full mean
    for _epoch in 0..3 {
        let mut acc = [0.0; 2];
        for size in [3.0, 3.0, 3.0, 1.0] {
            let g = s.stoch_grad(&p, &x1).unwrap();
            for i in 0..2 {
                acc[i] += g[i] * size / 10.0;
            }
        }
        let full = p.full_grad(&x1).unwrap();
        for i in 0..2 {
            assert!((acc[i] - full[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn same_seed_same_samples() {
    let spec = ProblemSpec::NoisyQuadratic(QuadraticSpec {
        d: 3,
        curvature_min: 1.0,
        curvature_max: Some(2.0),
        x_star: 0.0,
        sigma: Some(1.0),
        sigma_total: None,
        x1_offset: None,
        x1_offset_total: None,
    });
    let (p, x1) = spec.build().unwrap();
    let draw = |seed| {
        let mut s = p.training_sampler(seed);
        (0..50).map(|_| s.stoch_grad(&p, &x1).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(1), draw(1));
    assert_ne!(draw(1), draw(2));
}

proptest! {
    #[test]
    fn quadratic_gradient_is_l_lipschitz(
        c in prop::collection::vec(0.1..10.0f64, 5),
        x in prop::collection::vec(-10.0..10.0f64, 5),
        y in prop::collection::vec(-10.0..10.0f64, 5),
    ) {
        let p = Problem::NoisyQuadratic(NoisyQuadratic {
            curvatures: c,
            x_star: vec![0.0; 5],
            sigma: vec![0.0; 5],
        });
        let l = p.constants(&x).l;
        let gx = p.full_grad(&x).unwrap();
        let gy = p.full_grad(&y).unwrap();
        let dg: f64 = gx.iter().zip(&gy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let dx: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(dg <= l * dx * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn toy_gradient_is_l_lipschitz(x in -1e3..1e3f64, y in -1e3..1e3f64) {
        let p = Problem::Toy1D(Toy1D::default());
        let dg = (p.full_grad(&[x]).unwrap()[0] - p.full_grad(&[y]).unwrap()[0]).abs();
        prop_assert!(dg <= 0.01 * (x - y).abs() * (1.0 + 1e-12) + 1e-15);
    }
}

#[test]
fn lipschitz_constant_is_attained_for_quadratics() {
    let p = Problem::NoisyQuadratic(NoisyQuadratic {
        curvatures: vec![1.0, 4.0],
        x_star: vec![0.0; 2],
        sigma: vec![0.0; 2],
    });
    let gx = p.full_grad(&[0.0, 0.0]).unwrap();
    let gy = p.full_grad(&[0.0, 1.0]).unwrap();
    assert_eq!((gy[1] - gx[1]).abs(), p.constants(&[0.0, 0.0]).l);
}
