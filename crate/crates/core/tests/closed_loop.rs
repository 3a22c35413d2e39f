use mame_core::adaptive::{AbOrder, PlanLayout, StaircaseConfig, TrialSpec};
use mame_core::analysis::{difference_image, rms_contrast, ssim, to_grayscale, SsimConfig};
use mame_core::observer::{perceptual_distance, DistanceMetric, ObserverModel, TRACKED_ACCURACY};
use mame_core::session::Session;
use mame_core::simulate::{run_session, simulation_header};
use mame_core::{ImageTensor, Result, TapId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pool() -> Vec<String> {
    (0..7).map(|i| format!("ref{i}")).collect()
}

fn first_trial(seed: u64) -> TrialSpec {
    let header = simulation_header("obs", seed, PlanLayout::default(), StaircaseConfig::desk_default(), pool());
    Session::new(header).unwrap().current_trial().unwrap()
}

fn accuracy(obs: &ObserverModel, d: f64, n: usize) -> f64 {
    let spec = first_trial(1);
    let correct = (0..n)
        .filter(|&i| obs.respond_at_distance(&spec, d, &mut obs.trial_rng(9, i)).correct)
        .count();
    correct as f64 / n as f64
}

#[test]
fn zero_distance_is_chance() {
    let acc = accuracy(&ObserverModel::default(), 0.0, 20_000);
    assert!((acc - 0.5).abs() < 0.02, "{acc}");
}

#[test]
fn large_distance_hits_lapse_ceiling() {
    let acc = accuracy(&ObserverModel::default(), 10.0, 20_000);
    assert!((acc - 0.98).abs() < 0.01, "{acc}");
}

#[test]
fn psychometric_function_is_monotone() {
    let obs = ObserverModel {
        alpha: 0.5,
        beta: 2.5,
        lapse: 0.03,
        ..Default::default()
    };
    let mut last = obs.p_correct(0.0);
    for i in 1..200 {
        let p = obs.p_correct(i as f64 * 0.01);
        assert!(p >= last && p < 1.0 - obs.lapse + 1e-12);
        last = p;
    }
}

#[test]
fn responses_are_reproducible_per_trial() {
    let obs = ObserverModel {
        seed: 42,
        ..Default::default()
    };
    let spec = first_trial(3);
    let a: Vec<_> = (0..50)
        .map(|i| obs.respond_at_distance(&spec, 0.015, &mut obs.trial_rng(7, i)))
        .collect();
    let b: Vec<_> = (0..50)
        .rev()
        .map(|i| obs.respond_at_distance(&spec, 0.015, &mut obs.trial_rng(7, i)))
        .collect();
    assert!(a.iter().eq(b.iter().rev()));
    let other = ObserverModel { seed: 43, ..obs };
    let c: Vec<_> = (0..50)
        .map(|i| other.respond_at_distance(&spec, 0.015, &mut other.trial_rng(7, i)))
        .collect();
    assert_ne!(a, c);
}

#[test]
fn responses_report_x_consistently() {
    let obs = ObserverModel::default();
    let spec = first_trial(5);
    for i in 0..200 {
        let out = obs.respond_at_distance(&spec, 0.01, &mut obs.trial_rng(1, i));
        assert_eq!(out.correct, out.response == spec.x_is);
    }
}

#[test]
fn perceptual_distance_matches_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = ImageTensor::new(16, 16, 3, (0..768).map(|_| rng.gen()).collect()).unwrap();
    let b = ImageTensor::new(16, 16, 3, a.data().iter().map(|v| (v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)).collect())
        .unwrap();
    let rms = perceptual_distance(&a, &b, DistanceMetric::RmsDiff).unwrap();
    assert!((rms - rms_contrast(&difference_image(&b, &a).unwrap()).unwrap()).abs() < 1e-15);
    let s = perceptual_distance(&a, &b, DistanceMetric::OneMinusSsim).unwrap();
    let expected = 1.0 - ssim(&to_grayscale(&a), &to_grayscale(&b), &SsimConfig::default()).unwrap();
    assert!((s - expected).abs() < 1e-15);
}

/// Linear stimulus: distance grows by `slope` per unit target on every axis
/// of a tap.
fn linear(slopes: [f64; 3]) -> impl FnMut(&TrialSpec) -> Result<f64> {
    move |spec| {
        let i = TapId::ALL.iter().position(|&t| t == spec.condition.tap).unwrap();
        Ok(slopes[i] * spec.target)
    }
}

struct LoopStats {
    mean: [f64; 3],
    cells: usize,
    /// Correct rate split by A/B order.
    by_order: [(usize, usize); 2],
}

fn closed_loop(replications: usize, staircase: StaircaseConfig, slopes: [f64; 3], seed_base: u64) -> LoopStats {
    let observer = ObserverModel::default();
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    let mut by_order = [(0, 0); 2];
    for r in 0..replications {
        let header = simulation_header(
            "mc",
            seed_base + r as u64,
            PlanLayout::default(),
            staircase.clone(),
            pool(),
        );
        let obs = ObserverModel {
            seed: 1000 + r as u64,
            ..observer.clone()
        };
        let (session, log) = run_session(header, &obs, linear(slopes)).unwrap();
        for rec in session.results() {
            let i = TapId::ALL.iter().position(|&t| t == rec.condition.tap).unwrap();
            sums[i] += rec.threshold_value;
            counts[i] += 1;
        }
        for t in &log {
            let k = usize::from(t.spec.ab_order == AbOrder::PerturbedFirst);
            by_order[k].0 += usize::from(t.outcome.correct);
            by_order[k].1 += 1;
        }
    }
    LoopStats {
        mean: [0, 1, 2].map(|i| sums[i] / counts[i] as f64),
        cells: counts.iter().sum(),
        by_order,
    }
}

#[test]
fn staircase_recovers_observer_threshold() {
    let d_star = ObserverModel::default().threshold_distance().unwrap();
    assert!((ObserverModel::default().p_correct(d_star) - TRACKED_ACCURACY).abs() < 1e-12);
    let slopes = [0.0016, 0.0022, 0.0013];
    let stats = closed_loop(200, StaircaseConfig::desk_default(), slopes, 500);
    assert!(stats.cells > 200 * 54 * 9 / 10, "only {} converged cells", stats.cells);
    for (i, tap) in TapId::ALL.iter().enumerate() {
        let t_star = d_star / slopes[i];
        let rel = (stats.mean[i] - t_star).abs() / t_star;
        assert!(rel < 0.15, "{tap}: mean {} vs {t_star} ({rel:.3})", stats.mean[i]);
    }
}

#[test]
fn staircase_recovers_threshold_on_reference_scales() {
    let d_star = ObserverModel::default().threshold_distance().unwrap();
    // Targets of roughly 60, 0.6 and 0.16 on the reference step grids.
    let slopes = [d_star / 60.0, d_star / 0.6, d_star / 0.16];
    let stats = closed_loop(50, StaircaseConfig::paper_defaults(), slopes, 900);
    for (i, t_star) in [60.0, 0.6, 0.16].into_iter().enumerate() {
        let rel = (stats.mean[i] - t_star).abs() / t_star;
        assert!(rel < 0.15, "tap {i}: mean {} vs {t_star}", stats.mean[i]);
    }
}

#[test]
fn accuracy_does_not_depend_on_presentation_order() {
    let stats = closed_loop(40, StaircaseConfig::desk_default(), [0.0016, 0.0022, 0.0013], 77);
    let rate = |(c, n): (usize, usize)| c as f64 / n as f64;
    let (a, b) = (rate(stats.by_order[0]), rate(stats.by_order[1]));
    assert!(stats.by_order[0].1 > 10_000 && stats.by_order[1].1 > 10_000);
    assert!((a - b).abs() < 0.02, "{a} vs {b}");
}

#[test]
fn threshold_estimates_do_not_depend_on_plan_seed() {
    let slopes = [0.0016, 0.0022, 0.0013];
    let a = closed_loop(100, StaircaseConfig::desk_default(), slopes, 10_000);
    let b = closed_loop(100, StaircaseConfig::desk_default(), slopes, 20_000);
    for i in 0..3 {
        let rel = (a.mean[i] - b.mean[i]).abs() / a.mean[i];
        assert!(rel < 0.08, "tap {i}: {} vs {}", a.mean[i], b.mean[i]);
    }
}

#[test]
fn simulated_session_is_deterministic() {
    let run = || {
        let header = simulation_header("det", 3, PlanLayout::default(), StaircaseConfig::desk_default(), pool());
        run_session(header, &ObserverModel::default(), linear([0.0016, 0.0022, 0.0013])).unwrap()
    };
    let (s1, l1) = run();
    let (s2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(s1.results(), s2.results());
}

