use std::collections::BTreeMap;

use proptest::prelude::*;

use licprune::criteria::Direction;
use licprune::nas::{
    adaptive_step, alpha_outer_search, assign_ratios, candidate_counts, layer_ratio_search, select_count,
    InjectedLandscape, SearchConfig, Termination,
};
use licprune::pruner::{min_keep, sparsity_from_counts, LayerShape};

fn shape(id: &str, out_ch: usize, in_ch: usize) -> LayerShape {
    LayerShape { layer_id: id.into(), out_ch, in_ch, kernel_area: 9 }
}

proptest! {
    #[test]
    fn candidates_are_group_multiples_within_the_keep_limit(channels in 1usize..300, group in 1usize..17) {
        let c = candidate_counts(channels, group);
        let limit = channels - min_keep(channels);
        prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(c.iter().all(|&n| n <= limit && n > 0));
        prop_assert!(c.iter().all(|&n| n % group == 0 || n == limit));
        if limit > 0 {
            prop_assert_eq!(*c.last().unwrap(), limit);
        }
    }

    #[test]
    fn chosen_count_is_the_largest_admissible(tested in prop::collection::vec((1usize..500, -0.1f64..0.5), 0..20), alpha in 0.0f64..0.4) {
        let n = select_count(&tested, alpha);
        let want = tested.iter().filter(|(_, d)| *d <= alpha).map(|(n, _)| *n).max().unwrap_or(0);
        prop_assert_eq!(n, want);
    }

    #[test]
    fn larger_tolerance_never_prunes_less(table in prop::collection::vec(-0.05f64..0.3, 65), a in 0.0f64..0.3, b in 0.0f64..0.3) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let cfg = SearchConfig { group_size: 4, ..SearchConfig::default() };
        let pick = |alpha: f64| {
            let t = table.clone();
            let mut target = InjectedLandscape { shapes: vec![shape("l", 64, 8)], delta: move |_: &str, _: Direction, _: usize, n: usize| t[n] };
            layer_ratio_search(&mut target, "l", Direction::OutputMaps, 0, alpha, &cfg).unwrap().chosen_pruned
        };
        prop_assert!(pick(lo) <= pick(hi));
    }

    #[test]
    fn step_moves_towards_the_target(alpha in 1e-4f64..1.0, achieved in 0.0f64..1.0, target in 0.05f64..0.9) {
        let next = adaptive_step(alpha, achieved, target, &[(alpha, achieved)]);
        prop_assert!(next > 0.0 && next.is_finite());
        if achieved < target {
            prop_assert!(next > alpha);
        } else if achieved > target {
            prop_assert!(next < alpha);
        }
    }

    #[test]
    fn reported_sparsity_matches_the_plan(seed in 0u64..1000) {
        let shapes = vec![shape("a", 32, 16), shape("b", 48, 32), shape("c", 24, 48)];
        let mut target = InjectedLandscape {
            shapes: shapes.clone(),
            delta: move |id: &str, d: Direction, _: usize, n: usize| {
                let w = (id.as_bytes()[0] as u64 + seed) % 7 + 1;
                let k = if d == Direction::OutputMaps { 1.0 } else { 0.5 };
                k * w as f64 * n as f64 / 200.0
            },
        };
        let (plan, s) = assign_ratios(&mut target, 0.05, &SearchConfig::default()).unwrap();
        let report = sparsity_from_counts(&shapes, &plan.kept_counts(&shapes).unwrap());
        prop_assert_eq!(report.s, s);
    }
}

#[test]
fn filters_only_search_leaves_input_ratios_at_zero() {
    let mut target = InjectedLandscape {
        shapes: vec![shape("a", 32, 16), shape("b", 16, 32)],
        delta: |_: &str, _: Direction, _: usize, n: usize| n as f64 / 100.0,
    };
    let cfg = SearchConfig { channels: false, ..SearchConfig::default() };
    let (plan, _) = assign_ratios(&mut target, 0.1, &cfg).unwrap();
    assert!(plan.entries.values().all(|e| e.kappa_in == 0.0));
    assert!(plan.entries.values().any(|e| e.kappa_out > 0.0));
}

#[test]
fn unreachable_target_stops_at_the_iteration_cap() {
    let mut target = InjectedLandscape {
        shapes: vec![shape("a", 32, 32)],
        delta: |_: &str, _: Direction, _: usize, _: usize| 1.0,
    };
    let cfg = SearchConfig { s_target: 0.5, max_outer_iters: 12, ..SearchConfig::default() };
    let (_, trace) = alpha_outer_search(&mut target, &cfg).unwrap();
    assert_eq!(trace.terminated, Termination::MaxIters);
    assert_eq!(trace.outer_iters.len(), 12);
    assert!(trace.to_log().ends_with("terminated=max_iters\n") || trace.to_log().contains("terminated=max_iters"));
}

#[test]
fn search_records_every_outer_iteration() {
    let widths: BTreeMap<&str, usize> = [("a", 64), ("b", 96)].into_iter().collect();
    let mut target = InjectedLandscape {
        shapes: vec![shape("a", 64, 32), shape("b", 96, 64)],
        delta: move |id: &str, _: Direction, _: usize, n: usize| (n as f64 / widths[id] as f64).powi(2),
    };
    let cfg = SearchConfig { s_target: 0.4, ..SearchConfig::default() };
    let (plan, trace) = alpha_outer_search(&mut target, &cfg).unwrap();
    assert_eq!(trace.terminated, Termination::Converged);
    let last = trace.outer_iters.last().unwrap();
    assert!((last.achieved_s - 0.4).abs() <= cfg.delta);
    assert_eq!(&last.plan, &plan);
    assert_eq!(trace.to_log().lines().filter(|l| l.starts_with("iter=")).count(), trace.outer_iters.len());
}
