use jumplora::adapter::{init_threshold, jump_update, BoundGate, LayerId};
use jumplora::autodiff::Tape;
use jumplora::config::{ExperimentConfig, Method};
use jumplora::ella::ella_penalty;
use jumplora::metrics::{jaccard_overlap, sparsity, SupportMask};
use jumplora::schedule::Schedule;
use jumplora::Tensor;
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..12, 1usize..12).prop_flat_map(|(r, c)| {
        prop::collection::vec(-2.0f64..2.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

fn gate(dw: &Tensor<f64>, tau: f64) -> Tensor<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(dw.clone());
    let t = tape.constant(Tensor::scalar(tau));
    let y = jump_update(&mut tape, x, BoundGate { tau: t, epsilon: 1e-3 }).unwrap();
    tape.value(y).clone()
}

fn zero_fraction(t: &Tensor<f64>) -> f64 {
    t.data().iter().filter(|v| **v == 0.0).count() as f64 / t.numel() as f64
}

fn mask_pair() -> impl Strategy<Value = (SupportMask, SupportMask)> {
    (1usize..64).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(a, b)| {
                (
                    SupportMask::new(LayerId::query(0), 0, vec![n], a).unwrap(),
                    SupportMask::new(LayerId::query(0), 1, vec![n], b).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn gate_keeps_exactly_entries_above_threshold(dw in matrix(), tau in 1e-6f64..2.0) {
        let y = gate(&dw, tau);
        for (&g, &d) in y.data().iter().zip(dw.data()) {
            prop_assert_eq!(g, if d.abs() > tau { d } else { 0.0 });
        }
    }

    #[test]
    fn gate_is_sign_equivariant(dw in matrix(), tau in 1e-6f64..2.0) {
        let neg = dw.map(|v| -v);
        let a = gate(&neg, tau);
        let b = gate(&dw, tau).map(|v| -v);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert_eq!(*x, *y);
        }
    }

    #[test]
    fn sparsity_is_monotone_in_threshold(dw in matrix(), t1 in 1e-6f64..2.0, t2 in 1e-6f64..2.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(zero_fraction(&gate(&dw, lo)) <= zero_fraction(&gate(&dw, hi)));
    }

    #[test]
    fn initialized_threshold_respects_budget(dw in matrix(), frac in 0.0f64..1.2) {
        let n = dw.numel();
        let budget = ((frac * n as f64) as usize).max(1);
        let tau = init_threshold(&[&dw], budget, 1e-8).unwrap();
        let above = dw.data().iter().filter(|v| v.abs() > tau).count();
        prop_assert!(above <= budget);
        // Without ties at τ the count is exact.
        let at = dw.data().iter().filter(|v| v.abs() == tau).count();
        if at <= 1 && tau > 1e-8 {
            prop_assert_eq!(above, budget.min(n));
        }
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let ab = jaccard_overlap(&a, &b).unwrap();
        prop_assert_eq!(ab, jaccard_overlap(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        let self_overlap = jaccard_overlap(&a, &a).unwrap();
        prop_assert_eq!(self_overlap, if a.ones() == 0 { 0.0 } else { 1.0 });
        prop_assert!((0.0..=1.0).contains(&sparsity(&a)));
    }

    #[test]
    fn penalty_is_linear_in_weight(dw in matrix(), lambda in 0.0f64..1e4, k in 0.0f64..8.0) {
        let past = dw.map(|v| v * 0.5 + 0.1);
        let eval = |l: f64| {
            let mut tape = Tape::new();
            let u = tape.constant(dw.clone());
            let p = tape.constant(past.clone());
            let pen = ella_penalty(&mut tape, u, p, l).unwrap();
            tape.value(pen).item()
        };
        let (one, scaled) = (eval(lambda), eval(lambda * k));
        prop_assert!((scaled - k * one).abs() <= 1e-12 * scaled.abs().max(1.0));
        prop_assert_eq!(eval(0.0), 0.0);
    }

    #[test]
    fn schedule_stays_in_unit_interval(total in 1usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let s = Schedule::from_fractions(total, lo, hi).unwrap();
        let mut prev = 0.0;
        for step in 0..=total {
            let g = s.gamma(step);
            prop_assert!((0.0..=1.0).contains(&g) && g >= prev);
            prev = g;
        }
    }

    #[test]
    fn config_round_trips(
        method in prop::sample::select(vec![Method::IncLora, Method::JumpIncLora, Method::Ella, Method::JumpElla]),
        rank in 1usize..16,
        lr in 1e-5f64..1e-1,
        lambda in prop::collection::vec(0.0f64..1e4, 1..4),
    ) {
        let cfg = ExperimentConfig { method, rank, learning_rate: lr, lambda, ..ExperimentConfig::default() };
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
