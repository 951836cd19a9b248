//! Geometry identities over 1000 seeded random cases: projection bound,
//! Möbius identities against scalar oracles, and the exp/log round trip.

use hyperssm_core::hyperbolic::{
    exp_map_zero, log_map_zero, mobius_add, project_to_ball, Curvature,
};
use hyperssm_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 1000;

fn random_curvature(rng: &mut ChaCha8Rng) -> Curvature<f64> {
    let k = -rng.gen_range(0.05..2.0);
    Curvature::new(k, -0.1).unwrap()
}

#[test]
fn projection_norm_bound_and_direction_preservation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..CASES {
        let c = random_curvature(&mut rng);
        let dim = rng.gen_range(2..8);
        // Scale spans well inside to far outside the ball.
        let scale = rng.gen_range(0.1..4.0) * c.radius();
        let x = Tensor::<f64>::from_fn(vec![1, dim], |_| rng.gen_range(-1.0..1.0) * scale).unwrap();
        let p = project_to_ball(&x, &c).unwrap();

        let norm_in = x.norm();
        let norm_out = p.coords().norm();
        assert!(
            norm_out <= c.max_norm() * (1.0 + 1e-15),
            "case {case}: projected norm {norm_out} exceeds bound {}",
            c.max_norm()
        );
        if norm_in <= c.max_norm() {
            assert_eq!(p.coords(), &x, "case {case}: interior point must be unchanged");
        } else if norm_in > 0.0 {
            for (a, b) in x.data().iter().zip(p.coords().data()) {
                let dir_in = a / norm_in;
                let dir_out = b / norm_out;
                assert!(
                    (dir_in - dir_out).abs() < 1e-12,
                    "case {case}: clipping changed direction"
                );
            }
        }
    }
}

#[test]
fn mobius_zero_identity_inverse_and_collinear_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    for case in 0..CASES {
        let c = random_curvature(&mut rng);
        let dim = rng.gen_range(2..8);
        let inside = |rng: &mut ChaCha8Rng| {
            // Uniform direction scaled to at most 90% of the ball radius.
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            let target = rng.gen_range(0.0..0.9) * (1.0 / c.sqrt_abs_k());
            v.iter_mut().for_each(|x| *x *= target / n);
            Tensor::new(vec![1, dim], v).unwrap()
        };

        let x = project_to_ball(&inside(&mut rng), &c).unwrap();
        let zero = project_to_ball(&Tensor::zeros(vec![1, dim]), &c).unwrap();

        // 0 (+) x = x exactly.
        let sum = mobius_add(&zero, &x).unwrap();
        assert_eq!(sum.coords(), x.coords(), "case {case}: left identity failed");

        // x (+) (-x) vanishes.
        let cancel = mobius_add(&x, &x.negate()).unwrap();
        assert!(
            cancel.coords().norm() < 1e-9,
            "case {case}: additive inverse norm {}",
            cancel.coords().norm()
        );

        // Collinear points follow the scalar oracle (a+b)/(1+|k|ab).
        let radius = 1.0 / c.sqrt_abs_k();
        let alpha = rng.gen_range(-0.85..0.85) * radius;
        let beta = rng.gen_range(-0.85..0.85) * radius;
        let mut unit: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = unit.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        unit.iter_mut().for_each(|x| *x /= n);
        let za = Tensor::new(vec![1, dim], unit.iter().map(|u| u * alpha).collect()).unwrap();
        let xb = Tensor::new(vec![1, dim], unit.iter().map(|u| u * beta).collect()).unwrap();
        let za = project_to_ball(&za, &c).unwrap();
        let xb = project_to_ball(&xb, &c).unwrap();
        let sum = mobius_add(&za, &xb).unwrap();
        let expected = (alpha + beta) / (1.0 + c.abs_k() * alpha * beta);
        for (i, u) in unit.iter().enumerate() {
            let got = sum.coords().data()[i];
            assert!(
                (got - expected * u).abs() < 1e-9,
                "case {case}: collinear oracle off at dim {i}: {got} vs {}",
                expected * u
            );
        }
    }
}

#[test]
fn exp_log_round_trip_inside_ninety_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2026);
    for case in 0..CASES {
        let c = random_curvature(&mut rng);
        let dim = rng.gen_range(2..8);
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        let target = rng.gen_range(0.0..0.9) / c.sqrt_abs_k();
        v.iter_mut().for_each(|x| *x *= target / n);
        let x = project_to_ball(&Tensor::new(vec![1, dim], v).unwrap(), &c).unwrap();

        let rt = exp_map_zero(&log_map_zero(&x).unwrap()).unwrap();
        let diff = rt.coords().max_abs_diff(x.coords()).unwrap();
        assert!(diff < 1e-9, "case {case}: round trip drift {diff}");
    }
}
