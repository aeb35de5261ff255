use nadamw_core::theorem::{bound_rhs, prescribe, validate_prescription, Rule, TheoremInputs};
use proptest::prelude::*;

fn inputs() -> impl Strategy<Value = TheoremInputs> {
    (
        1u64..10_000_000,
        1usize..100_000,
        -3.0..3.0f64,
        -3.0..3.0f64,
        -6.0..3.0f64,
        0.01..=1.0f64,
        any::<bool>(),
    )
        .prop_map(|(k, d, ll, ld, ls, gamma, zero_noise)| TheoremInputs {
            k,
            d,
            l: 10f64.powf(ll),
            delta: 10f64.powf(ld),
            sigma_s_sq: if zero_noise { 0.0 } else { 10f64.powf(ls) },
            gamma,
        })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

proptest! {
    #[test]
    fn lambda_max_forms_agree(i in inputs()) {
        let p = prescribe(&i, Rule::Theorem1).unwrap();
        let k = i.k as f64;
        let via_nu = p.nu.sqrt() / (5.0 * k.powf(1.25) * p.eta);
        prop_assert!(rel(via_nu, p.lambda_max.unwrap()) <= 1e-12);
    }

    #[test]
    fn x1_bound_forms_agree(i in inputs()) {
        let p = prescribe(&i, Rule::Theorem2).unwrap();
        let k = i.k as f64;
        let x1_max = p.x1_inf_max.unwrap();
        prop_assert!(rel(1.25 * k * p.eta, x1_max) <= 1e-12);
        let from_lambda = p.nu.sqrt() / (4.0 * k.powf(0.25) * p.lambda_max.unwrap());
        prop_assert!(x1_max <= from_lambda * (1.0 + 1e-12));
    }

    #[test]
    fn in_regime_lambda_x1_product(i in inputs(), frac in 0.0..=1.0f64) {
        let p = prescribe(&i, Rule::Theorem1).unwrap();
        let lambda = frac * p.lambda_max.unwrap();
        let env = p.lambda_x_envelope(i.k);
        prop_assert!(lambda * p.x1_inf_max.unwrap() <= env * (1.0 + 1e-12));
    }

    #[test]
    fn prescription_passes_constraints_when_nu_condition_holds(i in inputs()) {
        let p = prescribe(&i, Rule::Theorem1).unwrap();
        let hp = p.hyper_params_at_lambda_max();
        let x1 = vec![p.x1_inf_max.unwrap(); 1];
        let report = validate_prescription(&p, &hp, &x1, &i);
        let nu_ok = p.nu / (i.k as f64).sqrt() <= 0.125 && p.lambda_x_envelope(i.k) < 1.0;
        for c in &report.constraints {
            if c.name != "nu" && c.name != "sqrt_nu" {
                prop_assert!(c.outcome != nadamw_core::theorem::Outcome::Fail, "{c:?}");
            }
        }
        prop_assert_eq!(report.pass, nu_ok);
    }

    #[test]
    fn beta_and_tau_ranges_are_ordered(i in inputs()) {
        let p = prescribe(&i, Rule::Theorem2).unwrap();
        prop_assert!(p.beta_range.lo <= p.beta_range.hi);
        prop_assert!(p.beta_range.contains(p.beta));
        prop_assert!(p.tau_range.contains(p.tau));
        prop_assert!((0.0..1.0).contains(&p.theta));
    }

    #[test]
    fn bounds_scale_with_sqrt_d(i in inputs()) {
        let b1 = bound_rhs(&i).unwrap();
        let b4 = bound_rhs(&TheoremInputs { d: 4 * i.d, ..i }).unwrap();
        prop_assert!(rel(b4.rhs_general, 2.0 * b1.rhs_general) <= 1e-12);
        prop_assert!(rel(b4.rhs_small_noise, 2.0 * b1.rhs_small_noise) <= 1e-12);
        prop_assert!(rel(b4.rhs_corollary, 2.0 * b1.rhs_corollary) <= 1e-12);
        prop_assert!(b1.rhs_general > 0.0 && b1.rhs_small_noise > 0.0);
    }

    #[test]
    fn regime_boundary_is_continuous(i in inputs()) {
        let at = TheoremInputs { sigma_s_sq: i.noise_threshold(), ..i };
        let p = prescribe(&at, Rule::Theorem1).unwrap();
        prop_assert!(rel(1.0 - p.theta, at.gamma) <= 1e-9);
        let below = prescribe(&TheoremInputs { sigma_s_sq: 0.0, ..i }, Rule::Theorem1).unwrap();
        prop_assert!(rel(p.theta, below.theta) <= 1e-9 || (p.theta - below.theta).abs() <= 1e-12);
        prop_assert!(rel(p.eps, below.eps) <= 1e-12);
    }
}
