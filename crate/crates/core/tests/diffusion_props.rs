use guidelab::diffusion::{
    cfg_combine, ddim_step, forward_diffuse, predict_x0, visit_timesteps, NoiseKind, NoiseSchedule,
    SamplerSpec,
};
use guidelab::rng::{normal_vec, seeded};
use proptest::prelude::*;

fn noise_kind() -> impl Strategy<Value = NoiseKind> {
    prop_oneof![Just(NoiseKind::LinearBeta), Just(NoiseKind::CosineAlpha)]
}

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

proptest! {
    #[test]
    fn gamma_decreases_from_one(kind in noise_kind(), horizon in 10u32..2000) {
        let ns = NoiseSchedule::new(kind, horizon).unwrap();
        prop_assert!(ns.gamma(0) <= 1.0);
        prop_assert!(ns.gamma(horizon) > 0.0);
        prop_assert!(ns.gammas().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn guidance_is_affine_in_weight(c in vector(6), u in vector(6), w in -2.0f64..60.0) {
        let out = cfg_combine(&c, &u, w).unwrap();
        let none = cfg_combine(&c, &u, 0.0).unwrap();
        prop_assert_eq!(&none, &c);
        for i in 0..6 {
            let expected = c[i] + w * (c[i] - u[i]);
            prop_assert!((out[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
        let same = cfg_combine(&c, &c, w).unwrap();
        prop_assert_eq!(same, c);
    }

    #[test]
    fn true_noise_recovers_clean_sample(kind in noise_kind(), t in 0u32..=1000, x0 in vector(5), eps in vector(5)) {
        let ns = NoiseSchedule::new(kind, 1000).unwrap();
        let xt = forward_diffuse(&x0, t, &eps, &ns).unwrap();
        let rec = predict_x0(&xt, &eps, t, &ns, None).unwrap();
        let tol = 1e-9 / ns.gamma(t).sqrt();
        for (a, b) in rec.iter().zip(&x0) {
            prop_assert!((a - b).abs() <= tol, "t={} {} vs {}", t, a, b);
        }
    }

    #[test]
    fn slack_clip_matches_unclipped_step(t in 1u32..=1000, back in 1u32..200, x0 in vector(4), eps in vector(4)) {
        let ns = NoiseSchedule::new(NoiseKind::LinearBeta, 1000).unwrap();
        let t_prev = t.saturating_sub(back);
        let xt = forward_diffuse(&x0, t, &eps, &ns).unwrap();
        let clipped = ddim_step(&xt, &eps, t, t_prev, &ns, Some(3.0)).unwrap();
        let plain = ddim_step(&xt, &eps, t, t_prev, &ns, None).unwrap();
        for (a, b) in clipped.iter().zip(&plain) {
            prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn ddim_visits_descend_from_horizon(horizon in 10u32..2000, frac in 0.0f64..=1.0) {
        let steps = 1 + ((horizon - 1) as f64 * frac) as u32;
        let v = visit_timesteps(&SamplerSpec::ddim(steps), horizon).unwrap();
        prop_assert_eq!(v.len() as u32, steps + 1);
        prop_assert_eq!(v[0], horizon);
        prop_assert_eq!(*v.last().unwrap(), 0);
        prop_assert!(v.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn forward_marginal_moments() {
    let ns = NoiseSchedule::new(NoiseKind::LinearBeta, 1000).unwrap();
    let x0 = [1.5, -0.5, 0.0];
    let n = 40_000;
    let mut rng = seeded(11);
    for t in [1u32, 250, 700, 1000] {
        let g = ns.gamma(t);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let eps = normal_vec(&mut rng, 3);
            let x = forward_diffuse(&x0, t, &eps, &ns).unwrap();
            for j in 0..3 {
                sum[j] += x[j];
                sq[j] += x[j] * x[j];
            }
        }
        for j in 0..3 {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            let sd = (1.0 - g).sqrt();
            // five standard errors
            assert!(
                (mean - g.sqrt() * x0[j]).abs() <= 5.0 * sd / (n as f64).sqrt() + 1e-12,
                "t={t} mean {mean}"
            );
            assert!(
                (var - (1.0 - g)).abs() <= 5.0 * (1.0 - g) * (2.0 / n as f64).sqrt() + 1e-12,
                "t={t} var {var}"
            );
        }
    }
}
