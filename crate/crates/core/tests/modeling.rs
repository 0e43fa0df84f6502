use longpred::data::split_by_subject;
use longpred::evaluation::{longitudinal_metrics, per_subject_mean_metrics, Variant};
use longpred::imputation::{imputation_sweep, ImputationConfig};
use longpred::pipeline::{fit_imputed, screen, train_model, ModelConfig, SelectionConfig};
use longpred::prediction::{forecast_dataset, PredictOptions};
use longpred::selection::apply_mask;
use longpred::stats;
use longpred::synthetic::{generate, GeneratorConfig};
use rayon::prelude::*;

fn small_model(m: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        imputation: ImputationConfig {
            m_imputations: m,
            n_cycles: 5,
            seed,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn screening_recovers_the_signal_features() {
    let hits: usize = (0..200u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = GeneratorConfig {
                n_subjects: 76,
                p_signal: 4,
                p_noise: 49,
                true_feature_coefs: vec![2.0, -1.5, 1.5, 1.0],
                missing_rate: 0.0142,
                seed,
                ..Default::default()
            };
            let (ds, _) = generate(&cfg).unwrap();
            let mask = screen(&ds, &SelectionConfig::default()).unwrap();
            let mut got: Vec<&str> = mask.selected_feature_names();
            got.sort_unstable();
            usize::from(got == ["x1", "x2", "x3", "x4"])
        })
        .sum();
    let rate = hits as f64 / 200.0;
    assert!(rate >= 0.95, "signal set selected in {rate}");
}

#[test]
fn mask_from_train_matches_test_columns_by_name() {
    let cfg = GeneratorConfig {
        missing_rate: 0.02,
        ..Default::default()
    };
    let (ds, _) = generate(&cfg).unwrap();
    let split = split_by_subject(&ds, 0.7, 4).unwrap();
    let mask = screen(&split.train(&ds), &SelectionConfig::default()).unwrap();
    let train = apply_mask(&split.train(&ds), &mask).unwrap();
    let test = apply_mask(&split.test(&ds), &mask).unwrap();
    assert_eq!(train.feature_names(), test.feature_names());
    assert_eq!(train.covariate_names(), test.covariate_names());
    let names: Vec<&str> = train.feature_names().iter().map(String::as_str).collect();
    assert_eq!(names, mask.selected_feature_names());
}

/// Test-set Pearson r for every `m`, using one fixed split and mask.
fn sweep_accuracy(ds: &longpred::data::LongitudinalDataset, m_values: &[usize], seed: u64) -> Vec<f64> {
    let split = split_by_subject(ds, 0.7, 0).unwrap();
    let (train, test) = (split.train(ds), split.test(ds));
    let cfg = small_model(1, seed);
    let mask = screen(&train, &cfg.selection).unwrap();
    imputation_sweep(&train, &cfg.imputation, m_values, |set| {
        let model = fit_imputed(set, &mask, &cfg.gee, &cfg.ensemble)?;
        let f = forecast_dataset(&model, &test, false, &PredictOptions::default());
        Ok(longitudinal_metrics(&f, Variant::Raw, false)?.pearson_r.unwrap())
    })
    .unwrap()
    .into_iter()
    .map(|r| r.accuracy)
    .collect()
}

#[test]
fn sweep_on_complete_data_is_flat() {
    let (ds, _) = generate(&GeneratorConfig::default()).unwrap();
    let acc = sweep_accuracy(&ds, &[1, 5, 15, 25], 3);
    // Pooling M identical fits may differ from one fit in the last bit.
    assert!(acc.iter().all(|&a| (a - acc[0]).abs() < 1e-12), "{acc:?}");
}

#[test]
fn sweep_spread_shrinks_with_more_imputations() {
    let cfg = GeneratorConfig {
        n_subjects: 60,
        missing_rate: 0.05,
        seed: 21,
        ..Default::default()
    };
    let (ds, _) = generate(&cfg).unwrap();
    let m_values = [1, 5, 15, 25];
    let runs: Vec<Vec<f64>> = (0..50u64).into_par_iter().map(|s| sweep_accuracy(&ds, &m_values, s)).collect();
    let sd: Vec<f64> = (0..m_values.len())
        .map(|j| {
            let col: Vec<f64> = runs.iter().map(|r| r[j]).collect();
            stats::sample_sd(&col).unwrap()
        })
        .collect();
    println!("sweep sd by m {m_values:?}: {sd:?}");
    assert!(sd[0] > sd[1] && sd[1] > sd[3], "{sd:?}");
    assert!(sd[0] > sd[2], "{sd:?}");
}

#[test]
fn forecasts_track_the_true_mean_structure() {
    let rs: Vec<f64> = (0..200u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = GeneratorConfig {
                n_subjects: 60,
                missing_rate: 0.02,
                seed,
                ..Default::default()
            };
            let (ds, truth) = generate(&cfg).unwrap();
            let split = split_by_subject(&ds, 0.7, seed).unwrap();
            let model = train_model(&split.train(&ds), &small_model(5, seed)).unwrap();
            let forecasts = forecast_dataset(&model, &split.test(&ds), false, &PredictOptions::default());
            let (mut hat, mut mean) = (Vec::new(), Vec::new());
            for f in &forecasts {
                for e in &f.entries {
                    if let Some(h) = e.y_hat_raw {
                        hat.push(h);
                        mean.push(truth.mean_structure(&f.subject_id, e.time).unwrap());
                    }
                }
            }
            stats::pearson(&hat, &mean).unwrap()
        })
        .collect();
    let mean = stats::mean(&rs).unwrap();
    let share = rs.iter().filter(|&&r| r > 0.9).count() as f64 / rs.len() as f64;
    println!("r(yhat, mean structure): mean {mean:.4}, share above 0.9 {share}");
    assert!(mean > 0.9, "mean r {mean}");
    assert!(share >= 0.9, "share {share}");
}

#[test]
fn subject_means_usually_correlate_better_than_rows() {
    let wins: usize = (0..200u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = GeneratorConfig {
                n_subjects: 60,
                // Within-subject noise dominates and the covariates carry
                // between-subject signal, which averaging keeps.
                subject_intercept_sd: 0.5,
                noise_sd: 5.0,
                true_covariate_coefs: vec![0.3, 3.0],
                missing_rate: 0.02,
                seed,
                ..Default::default()
            };
            let (ds, _) = generate(&cfg).unwrap();
            let split = split_by_subject(&ds, 0.7, seed).unwrap();
            let model = train_model(&split.train(&ds), &small_model(5, seed)).unwrap();
            let f = forecast_dataset(&model, &split.test(&ds), false, &PredictOptions::default());
            let rows = longitudinal_metrics(&f, Variant::Raw, false).unwrap().pearson_r.unwrap();
            let means = per_subject_mean_metrics(&f, Variant::Raw, false).unwrap().pearson_r.unwrap();
            usize::from(means >= rows)
        })
        .sum();
    let share = wins as f64 / 200.0;
    println!("per-subject mean r >= longitudinal r in {share}");
    assert!(share >= 0.6, "share {share}");
}
