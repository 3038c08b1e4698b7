use proptest::prelude::*;

use licprune::eval::{bd_rate, RDCurve, RDPoint};

fn curve(label: &str, pts: &[(f64, f64)]) -> RDCurve {
    RDCurve::new(label, pts.iter().enumerate().map(|(i, &(bpp, psnr_db))| RDPoint { lambda: i as f64, bpp, psnr_db }).collect())
        .unwrap()
}

fn base(start: f64, step: f64, r0: f64, growth: f64) -> Vec<(f64, f64)> {
    (0..5).map(|i| (r0 * growth.powi(i), start + step * i as f64)).collect()
}

proptest! {
    #[test]
    fn constant_rate_factor_gives_that_factor(r0 in 0.05f64..0.5, g in 1.3f64..2.0, k in 0.3f64..3.0) {
        let a = base(28.0, 2.0, r0, g);
        let b: Vec<_> = a.iter().map(|&(r, d)| (r * k, d)).collect();
        let v = bd_rate(&curve("a", &a), &curve("b", &b)).unwrap();
        prop_assert!((v - (k - 1.0) * 100.0).abs() < 1e-6 * (1.0 + v.abs()));
    }

    #[test]
    fn swapping_curves_inverts_the_rate_ratio(r0 in 0.05f64..0.5, g in 1.3f64..2.0, shift in -1.0f64..1.0) {
        let a = base(28.0, 2.0, r0, g);
        let b = base(28.0 + shift, 2.1, r0 * 1.1, g);
        let ab = bd_rate(&curve("a", &a), &curve("b", &b)).unwrap() / 100.0 + 1.0;
        let ba = bd_rate(&curve("b", &b), &curve("a", &a)).unwrap() / 100.0 + 1.0;
        prop_assert!((ab * ba - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_rate_scaling_of_both_curves_changes_nothing(r0 in 0.05f64..0.5, g in 1.3f64..2.0, k in 0.2f64..5.0) {
        let a = base(28.0, 2.0, r0, g);
        let b = base(28.5, 1.9, r0 * 0.9, g);
        let v = bd_rate(&curve("a", &a), &curve("b", &b)).unwrap();
        let scale = |c: &[(f64, f64)]| c.iter().map(|&(r, d)| (r * k, d)).collect::<Vec<_>>();
        let w = bd_rate(&curve("a", &scale(&a)), &curve("b", &scale(&b))).unwrap();
        prop_assert!((v - w).abs() < 1e-7);
    }
}

#[test]
fn disjoint_quality_ranges_are_an_error() {
    let a = curve("a", &base(20.0, 1.0, 0.1, 1.5));
    let b = curve("b", &base(40.0, 1.0, 0.1, 1.5));
    assert!(bd_rate(&a, &b).is_err());
}

#[test]
fn fewer_than_four_points_is_an_error() {
    let a = curve("a", &base(28.0, 2.0, 0.1, 1.5)[..3]);
    let b = curve("b", &base(28.0, 2.0, 0.1, 1.5));
    assert!(bd_rate(&a, &b).is_err());
}
