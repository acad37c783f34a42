use egoloc_core::config::RunConfig;
use egoloc_core::dataset::Split;
use egoloc_core::eval::*;
use egoloc_core::numerics::Tensor;
use egoloc_core::pipeline::build_report;
use egoloc_core::world::SegmentGrid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pts(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|_| [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)]).collect()
}

#[test]
fn success_rate_cases_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truth = pts(&mut rng, 30);
    for th in [0.2, 0.4, 0.6] {
        assert_eq!(success_rate(&truth, &truth, th).unwrap(), 1.0);
    }
    let (p, t) = ([[1.0, 1.0]], [[1.3, 1.4]]);
    assert_eq!(success_rate(&p, &t, 0.2).unwrap(), 0.0);
    assert_eq!(success_rate(&p, &t, 0.4).unwrap(), 0.0);
    assert_eq!(success_rate(&p, &t, 0.6).unwrap(), 1.0);
    assert!(success_rate(&truth[..3], &truth[..4], 0.4).is_err());

    for _ in 0..100 {
        let n = rng.random_range(1..50);
        let (a, b) = (pts(&mut rng, n), pts(&mut rng, n));
        let th = rng.random_range(0.1..3.0);
        let mut hits = 0;
        for i in 0..n {
            if ((a[i][0] - b[i][0]).powi(2) + (a[i][1] - b[i][1]).powi(2)).sqrt() <= th {
                hits += 1;
            }
        }
        assert!((success_rate(&a, &b, th).unwrap() - hits as f64 / n as f64).abs() < 1e-9);
    }
}

#[test]
fn relative_score_cases_and_oracle() {
    let mut delta = vec![0.0; 400];
    delta[37] = 1.0;
    assert_eq!(relative_score(&delta, 37).unwrap(), 1.0);
    assert_eq!(relative_score(&[0.25; 4], 2).unwrap(), 0.5);
    assert_eq!(relative_score(&[0.3, 0.1, 0.6], 1).unwrap(), 0.0);
    assert!(relative_score(&[0.5, 0.5], 2).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let s = rng.random_range(2..40);
        // coarse values create ties
        let h: Vec<f64> = (0..s).map(|_| rng.random_range(0..6) as f64).collect();
        let t = rng.random_range(0..s);
        let mut score = 0.0;
        for j in (0..s).filter(|&j| j != t) {
            score += if h[j] < h[t] { 1.0 } else if h[j] == h[t] { 0.5 } else { 0.0 };
        }
        assert!((relative_score(&h, t).unwrap() - score / (s - 1) as f64).abs() < 1e-9);
    }
}

#[test]
fn topk_cases_and_oracle() {
    let labels = [2usize, 0, 4];
    let mut perfect = Tensor::zeros(&[3, 5]);
    for (i, &l) in labels.iter().enumerate() {
        perfect.data_mut()[i * 5 + l] = 1.0;
    }
    assert_eq!(topk_accuracy(&perfect, &labels, 1).unwrap(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noisy = Tensor::new(vec![3, 5], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    assert_eq!(topk_accuracy(&noisy, &labels, 5).unwrap(), 1.0);
    assert!(topk_accuracy(&noisy, &labels, 6).is_err());
    // equal logits rank the lower index first
    let flat = Tensor::zeros(&[2, 4]);
    assert_eq!(topk_accuracy(&flat, &[0, 3], 1).unwrap(), 0.5);

    for _ in 0..100 {
        let (n, c) = (rng.random_range(1..20), rng.random_range(2..10));
        let k = rng.random_range(1..=c);
        let logits = Tensor::new(vec![n, c], (0..n * c).map(|_| rng.random_range(0..4) as f64).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let hits = (0..n)
            .filter(|&i| {
                let row = logits.row(i);
                let mut order: Vec<usize> = (0..c).collect();
                order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                order[..k].contains(&labels[i])
            })
            .count();
        assert!((topk_accuracy(&logits, &labels, k).unwrap() - hits as f64 / n as f64).abs() < 1e-9);
    }
}

#[test]
fn random_logits_hit_one_in_eight() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let logits = Tensor::new(vec![n, 8], (0..n * 8).map(|_| rng.random::<f64>()).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..8)).collect();
    let acc = topk_accuracy(&logits, &labels, 1).unwrap();
    assert!((acc - 0.125).abs() < 0.01, "{acc}");
}

#[test]
fn random_cell_predictor_matches_chance() {
    let grid = SegmentGrid::new(4.0, 20);
    let chance = chance_success(&grid, 0.4, 1_000_000, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers = grid.centers();
    let truth = pts(&mut rng, 200_000);
    let pred: Vec<[f64; 2]> = truth.iter().map(|_| centers[rng.random_range(0..400)]).collect();
    let rate = success_rate(&pred, &truth, 0.4).unwrap();
    assert!((rate - chance).abs() < 0.01, "{rate} vs {chance}");
    assert!(chance > 0.0 && chance < 0.1);
}

fn sample_report() -> EvalReport {
    let cfg = RunConfig { eval: EvalConfig { chance_draws: 1000, ..Default::default() }, ..Default::default() };
    let results = vec![
        MethodReport {
            method: "stage2".into(),
            split: Split::TestSeen,
            seconds: 120,
            success: vec![ThresholdRate { threshold_m: 0.2, rate: 0.1 / 3.0 }, ThresholdRate { threshold_m: 0.4, rate: 0.7 }],
            relative_score: Some(0.9123456789012345),
            action_topk: Some(vec![TopK { k: 1, accuracy: 0.5 }, TopK { k: 5, accuracy: 0.99 }]),
            drift_m: vec![0.1, 0.2, 0.3],
        },
        MethodReport {
            method: "dead-reckoning".into(),
            split: Split::TestUnseen,
            seconds: 120,
            success: vec![ThresholdRate { threshold_m: 0.2, rate: 0.0 }],
            relative_score: None,
            action_topk: None,
            drift_m: vec![0.0, 0.5],
        },
    ];
    build_report(&cfg, "abc", results).unwrap()
}

#[test]
fn report_round_trips_and_is_stable() {
    let report = sample_report();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    report.write(&path).unwrap();
    let back = EvalReport::read(&path).unwrap();
    assert_eq!(back, report);
    assert_eq!(sample_report().to_json().unwrap(), std::fs::read_to_string(&path).unwrap());
    let v: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    for key in ["format", "seeds", "config_hash", "dataset_config_hash", "config", "conventions", "chance", "results"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["results"][0]["split"], "test-seen");
    assert!(report.write(&dir.path().join("missing/r.json")).is_err());
    let csv = report.drift_csv();
    assert_eq!(csv.lines().next().unwrap(), "t,stage2_test-seen,dead-reckoning_test-unseen");
    assert_eq!(csv.lines().nth(3).unwrap(), "2,0.3,");
}

#[test]
fn out_of_range_rates_are_rejected() {
    let mut report = sample_report();
    report.results[0].success[0].rate = 1.5;
    assert!(report.validate().is_err());
}

#[test]
fn eval_config_validation() {
    assert!(EvalConfig::default().validate().is_ok());
    assert!(EvalConfig { thresholds_m: vec![0.4, 0.2], ..Default::default() }.validate().is_err());
    assert!(EvalConfig { thresholds_m: vec![-0.1, 0.2], ..Default::default() }.validate().is_err());
}

proptest! {
    #[test]
    fn success_is_monotone_in_threshold(seed in 0u64..10_000, a in 0.01f64..2.0, b in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, t) = (pts(&mut rng, 40), pts(&mut rng, 40));
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(success_rate(&p, &t, lo).unwrap() <= success_rate(&p, &t, hi).unwrap());
    }

    #[test]
    fn relative_score_ignores_monotone_transforms(seed in 0u64..10_000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h: Vec<f64> = (0..25).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let t = rng.random_range(0..25);
        let g: Vec<f64> = h.iter().map(|v| (scale * v).exp() + shift).collect();
        let cube: Vec<f64> = h.iter().map(|v| v.powi(3)).collect();
        let r = relative_score(&h, t).unwrap();
        prop_assert_eq!(r, relative_score(&g, t).unwrap());
        prop_assert_eq!(r, relative_score(&cube, t).unwrap());
        prop_assert!((0.0..=1.0).contains(&r));
    }
}
