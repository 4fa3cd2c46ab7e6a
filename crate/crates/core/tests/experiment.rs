use tcil_core::calib::{collect_logits, ece, score, Temperature};
use tcil_core::experiment::*;
use tcil_core::Sample;

fn quick(calibrators: Vec<Calibrator>, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        seeds,
        calibrators,
        num_tasks: 3,
        epochs: 3,
        ..ExperimentConfig::default()
    }
}

#[test]
fn records_form_the_full_cross_product_in_order() {
    let cals = vec![
        Calibrator::Tcil,
        Calibrator::Vanilla,
        Calibrator::OptimalTsOracle,
    ];
    let cfg = quick(cals.clone(), vec![4, 2]);
    let recs = run_experiment(&cfg).unwrap();
    assert_eq!(recs.len(), 2 * 3 * 3);
    let mut i = 0;
    for seed in [4, 2] {
        for t in 1..=3 {
            for &c in &cals {
                assert_eq!(
                    (recs[i].seed, recs[i].task_index, recs[i].calibrator),
                    (seed, t, c)
                );
                i += 1;
            }
        }
    }
    for r in &recs {
        assert!((0.0..=100.0).contains(&r.ece_percent));
        assert!((0.0..=100.0).contains(&r.aece_percent));
        assert_eq!(r.eps_adv.is_some(), r.calibrator == Calibrator::Tcil);
    }
}

#[test]
fn vanilla_records_use_unit_temperature() {
    let recs = run_experiment(&quick(vec![Calibrator::Vanilla], vec![0])).unwrap();
    assert!(recs.iter().all(|r| r.temperature == 1.0));
}

#[test]
fn ece_column_matches_recomputation() {
    let cfg = quick(vec![Calibrator::Vanilla, Calibrator::TsNewValid], vec![1]);
    let mut recomputed = Vec::new();
    let recs = run_seed(&cfg, 1, |o| {
        let test: Vec<&Sample> = o.stream.cumulative_test(o.task);
        recomputed.push(collect_logits(
            &o.state.model,
            test.iter().map(|s| s.pair()),
        )?);
        Ok(())
    })
    .unwrap();
    for r in &recs {
        let logits = &recomputed[r.task_index - 1];
        let scored = score(logits, Temperature::new(r.temperature).unwrap()).unwrap();
        assert_eq!(r.ece_percent, 100.0 * ece(&scored, cfg.bins).unwrap());
    }
}

#[test]
fn summary_matches_hand_aggregation() {
    let cals = vec![Calibrator::TsNewValid, Calibrator::Vanilla];
    let recs = run_experiment(&quick(cals.clone(), vec![0, 1, 2])).unwrap();
    let summary = summarize(&recs).unwrap();
    let order: Vec<Calibrator> = summary.rows.iter().map(|r| r.calibrator).collect();
    assert_eq!(order, cals);
    for &c in &cals {
        let per_seed: Vec<f64> = [0u64, 1, 2]
            .iter()
            .map(|&s| {
                let v: Vec<f64> = recs
                    .iter()
                    .filter(|r| r.seed == s && r.calibrator == c)
                    .map(|r| r.ece_percent)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        let mean = per_seed.iter().sum::<f64>() / 3.0;
        let row = summary.row(c).unwrap();
        assert!((row.avg_ece.mean - mean).abs() <= 1e-12);
        assert_eq!(row.seeds, 3);
    }
}

#[test]
fn metrics_survive_a_text_round_trip() {
    let recs = run_experiment(&quick(vec![Calibrator::Tcil], vec![0])).unwrap();
    let text = write_metrics(&recs);
    assert_eq!(read_metrics(&text).unwrap(), recs);
    let csv = bins_csv(&recs);
    assert_eq!(csv.lines().count(), 1 + recs.len() * 10);
}
