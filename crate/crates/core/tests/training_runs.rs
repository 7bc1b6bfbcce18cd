use mtmm_core::checkpoint;
use mtmm_core::data::{synthesize_dataset, SynthSpec};
use mtmm_core::metrics::Thresholds;
use mtmm_core::model::{infer, ModelConfig, TaskMode};
use mtmm_core::training::{evaluate, train, TrainOptions};

fn tiny_overfit_set() -> mtmm_core::data::Dataset {
    synthesize_dataset(&SynthSpec::default(), 4).unwrap()
}

#[test]
fn tiny_set_loss_drops_ninety_percent_and_fits_exactly() {
    let ds = tiny_overfit_set();
    let config = ModelConfig::new(ds.dims);
    let opts = TrainOptions {
        epochs: 200,
        seed: 1,
        ..TrainOptions::default()
    };
    let (params, history) = train(&config, &ds, None, &opts).unwrap();
    let first = history.epochs[0].train_loss;
    let last = history.epochs.last().unwrap().train_loss;
    assert!(last <= 0.1 * first, "loss {first} -> {last}");
    assert!(history.epochs.iter().all(|e| e.train_loss.is_finite()));
    assert_eq!(history.total_steps, 200);

    let report = evaluate(&params, &config, &ds, Thresholds::default()).unwrap();
    assert_eq!(report.sentiment.unwrap().f1, 1.0);
    assert_eq!(report.emotion.unwrap().average_f1, 1.0);
}

#[test]
fn default_learning_rate_stays_finite_for_fifty_epochs() {
    let spec = SynthSpec {
        n_videos: 40,
        noise_scale: 0.5,
        ..SynthSpec::default()
    };
    let ds = synthesize_dataset(&spec, 9).unwrap();
    let config = ModelConfig {
        d: 8,
        dense_units: 8,
        ..ModelConfig::new(ds.dims)
    };
    let (_, history) = train(&config, &ds, None, &TrainOptions::default()).unwrap();
    assert_eq!(history.epochs.len(), 50);
    // 40 videos in batches of 16
    assert_eq!(history.total_steps, 50 * 3);
    assert!(history.epochs.iter().all(|e| e.train_loss.is_finite()));
}

#[test]
fn dev_selection_returns_the_best_recorded_epoch() {
    let spec = SynthSpec {
        n_videos: 30,
        noise_scale: 1.0,
        ..SynthSpec::default()
    };
    let (train_set, dev_set) = synthesize_dataset(&spec, 2)
        .unwrap()
        .train_dev_split(0.3, 0);
    for mode in [TaskMode::StlSentiment, TaskMode::StlEmotion, TaskMode::Mtl] {
        let config = ModelConfig {
            d: 4,
            dense_units: 4,
            mode,
            ..ModelConfig::new(train_set.dims)
        };
        let opts = TrainOptions {
            epochs: 6,
            ..TrainOptions::default()
        };
        let (params, history) = train(&config, &train_set, Some(&dev_set), &opts).unwrap();
        let best = history.best_epoch.unwrap();
        let scores: Vec<f64> = history
            .epochs
            .iter()
            .map(|e| e.dev_score.unwrap())
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(scores[best - 1], top, "{mode}");
        // the first epoch reaching the top score wins ties
        assert!(scores[..best - 1].iter().all(|&s| s < top));
        let recorded = history.epochs[best - 1].dev_metrics.clone().unwrap();
        assert_eq!(
            evaluate(&params, &config, &dev_set, Thresholds::default()).unwrap(),
            recorded
        );
    }
}

#[test]
fn checkpoint_reload_reproduces_predictions() {
    let ds = tiny_overfit_set();
    let config = ModelConfig {
        d: 5,
        dense_units: 6,
        modalities: "a,v".parse().unwrap(),
        ..ModelConfig::new(ds.dims)
    };
    let opts = TrainOptions {
        epochs: 3,
        ..TrainOptions::default()
    };
    let (params, _) = train(&config, &ds, None, &opts).unwrap();
    let (loaded, loaded_config) =
        checkpoint::from_str(&checkpoint::to_string(&params, &config)).unwrap();
    assert_eq!(loaded_config, config);
    for v in &ds.videos {
        assert_eq!(
            infer(v, &params, &config).unwrap(),
            infer(v, &loaded, &loaded_config).unwrap()
        );
    }
}
