//! Adam optimisation over whole-video mini-batches, evaluation, and
//! best-on-dev model selection.

use crate::data::{batch_videos, Dataset, NUM_EMOTIONS};
use crate::metrics::{binary_prf, multilabel_report, MetricsError, MetricsReport, Thresholds};
use crate::model::{
    build_model, infer, loss, loss_and_grads, Gradients, ModelConfig, ModelError, ModelParams,
    Objective, TaskMode,
};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("no gradient for parameter {0}")]
    MissingGrad(String),
    #[error("gradient for {name} has shape {got:?}, parameter is {want:?}")]
    GradShape {
        name: String,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("dataset dims {dataset:?} do not match model dims {model:?}")]
    DimsMismatch {
        dataset: [usize; 3],
        model: [usize; 3],
    },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamConfig,
    pub t: u64,
    pub moments: IndexMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(hyper: AdamConfig, params: &ModelParams) -> Self {
        let moments = params
            .iter()
            .map(|(n, t)| {
                let z = Tensor::zeros(t.rows(), t.cols());
                (n.to_string(), (z.clone(), z))
            })
            .collect();
        Self {
            hyper,
            t: 0,
            moments,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::MissingGrad(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(TrainError::GradShape {
                name: name.to_string(),
                got: g.shape(),
                want: p.shape(),
            });
        }
    }
    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let (m, v) = state.moments.entry(name.to_string()).or_insert_with(|| {
            let z = Tensor::zeros(p.rows(), p.cols());
            (z.clone(), z)
        });
        for (((theta, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Rescale the batch gradient to this global L2 norm when exceeded.
    pub clip_grad_norm: Option<f64>,
    pub thresholds: Thresholds,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
            clip_grad_norm: None,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-video training loss over the epoch (dropout active).
    pub train_loss: f64,
    /// Optimizer steps taken so far.
    pub steps: usize,
    pub dev_loss: Option<f64>,
    pub dev_score: Option<f64>,
    pub dev_metrics: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub total_steps: usize,
    /// Epoch whose parameters were returned, when a dev set drove selection.
    pub best_epoch: Option<usize>,
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ p))
}

pub fn check_dims(config: &ModelConfig, ds: &Dataset) -> Result<()> {
    if config.dims() != ds.dims {
        return Err(TrainError::DimsMismatch {
            dataset: ds.dims.into(),
            model: config.dims().into(),
        });
    }
    Ok(())
}

/// Model-selection score: sentiment accuracy, emotion average weighted
/// accuracy, or their mean under MTL.
pub fn selection_score(report: &MetricsReport, mode: TaskMode) -> Option<f64> {
    let sent = report.sentiment.as_ref().map(|s| s.accuracy);
    let emo = report
        .emotion
        .as_ref()
        .and_then(|e| e.average_weighted_accuracy);
    match mode {
        TaskMode::StlSentiment => sent,
        TaskMode::StlEmotion => emo,
        TaskMode::Mtl => Some((sent? + emo?) / 2.0),
    }
}

fn global_norm(grads: &Gradients) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Trains from a fresh `build_model(config, opts.seed)`.
///
/// Each epoch shuffles the videos with a seed derived from `opts.seed`,
/// averages per-video losses and gradients over each batch, and takes one
/// Adam step per batch. With a dev set the best-scoring epoch's parameters
/// are returned; otherwise the final ones.
pub fn train(
    config: &ModelConfig,
    train_set: &Dataset,
    dev_set: Option<&Dataset>,
    opts: &TrainOptions,
) -> Result<(ModelParams, TrainHistory)> {
    check_dims(config, train_set)?;
    if let Some(dev) = dev_set {
        check_dims(config, dev)?;
    }
    let mut params = build_model(config, opts.seed)?;
    let mut state = AdamState::new(opts.adam, &params);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 1..=opts.epochs {
        let order_seed = derive_seed(opts.seed, &[epoch as u64]);
        let batches = batch_videos(train_set, opts.batch_size, order_seed);
        let mut loss_sum = 0.0;
        let mut videos_seen = 0usize;
        for batch in &batches {
            let step = history.total_steps;
            // per-video work in parallel; reduction below runs in batch order
            let results: Vec<_> = batch
                .par_iter()
                .map(|&vi| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        opts.seed,
                        &[epoch as u64, vi as u64, 0xD0],
                    ));
                    loss_and_grads(
                        &train_set.videos[vi],
                        &params,
                        config,
                        Objective::Configured,
                        true,
                        &mut rng,
                    )
                })
                .collect();
            let n = batch.len() as f64;
            let mut grads: Option<Gradients> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (name, t) in acc.iter_mut() {
                            t.add_scaled(&g[name], 1.0).map_err(ModelError::from)?;
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, step });
            }
            let mut grads = grads.unwrap_or_default();
            for t in grads.values_mut() {
                *t = t.scale(1.0 / n);
            }
            if let Some(max) = opts.clip_grad_norm {
                let norm = global_norm(&grads);
                if norm > max {
                    for t in grads.values_mut() {
                        *t = t.scale(max / norm);
                    }
                }
            }
            adam_step(&mut params, &grads, &mut state)?;
            history.total_steps += 1;
            loss_sum += batch_loss;
            videos_seen += batch.len();
        }

        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / videos_seen.max(1) as f64,
            steps: history.total_steps,
            dev_loss: None,
            dev_score: None,
            dev_metrics: None,
        };
        if let Some(dev) = dev_set {
            let (report, dev_loss) = evaluate_with_loss(&params, config, dev, opts.thresholds)?;
            let score = selection_score(&report, config.mode);
            if let Some(s) = score {
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, params.clone()));
                    history.best_epoch = Some(epoch);
                }
            }
            record.dev_loss = Some(dev_loss);
            record.dev_score = score;
            record.dev_metrics = Some(report);
        }
        history.epochs.push(record);
    }

    let params = match (dev_set, best) {
        (Some(_), Some((_, p))) => p,
        _ => params,
    };
    Ok((params, history))
}

/// Per-video inference outputs, collected in dataset order.
fn infer_all(
    params: &ModelParams,
    config: &ModelConfig,
    ds: &Dataset,
) -> Result<Vec<crate::model::ForwardOutput>> {
    check_dims(config, ds)?;
    ds.videos
        .par_iter()
        .map(|v| infer(v, params, config).map_err(TrainError::from))
        .collect()
}

fn report_from_outputs(
    outs: &[crate::model::ForwardOutput],
    ds: &Dataset,
    thresholds: Thresholds,
) -> Result<MetricsReport> {
    let mut sent_pred = Vec::new();
    let mut sent_gold = Vec::new();
    let mut emo_probs = Vec::new();
    let mut emo_gold = Vec::new();
    for (out, video) in outs.iter().zip(&ds.videos) {
        if let Some(p) = &out.sentiment_probs {
            for r in 0..p.rows() {
                sent_pred.push(p.get(r, 1) >= p.get(r, 0));
            }
            sent_gold.extend(video.utterances.iter().map(|u| u.sentiment == 1));
        }
        if let Some(p) = &out.emotion_probs {
            for r in 0..p.rows() {
                let row: [f64; NUM_EMOTIONS] = p.row(r).try_into().expect("7 emotion columns");
                emo_probs.push(row);
            }
            emo_gold.extend(video.utterances.iter().map(|u| u.emotions));
        }
    }
    Ok(MetricsReport {
        utterances: ds.num_utterances(),
        sentiment: if sent_pred.is_empty() {
            None
        } else {
            Some(binary_prf(&sent_pred, &sent_gold)?.into())
        },
        emotion: if emo_probs.is_empty() {
            None
        } else {
            Some(multilabel_report(&emo_probs, &emo_gold, thresholds)?)
        },
    })
}

/// Inference-mode metrics over a dataset. Emotion probabilities are
/// thresholded once per metric family.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    ds: &Dataset,
    thresholds: Thresholds,
) -> Result<MetricsReport> {
    let outs = infer_all(params, config, ds)?;
    report_from_outputs(&outs, ds, thresholds)
}

/// [`evaluate`] plus the mean per-video loss.
pub fn evaluate_with_loss(
    params: &ModelParams,
    config: &ModelConfig,
    ds: &Dataset,
    thresholds: Thresholds,
) -> Result<(MetricsReport, f64)> {
    let outs = infer_all(params, config, ds)?;
    let mut total = 0.0;
    for (o, v) in outs.iter().zip(&ds.videos) {
        total += loss(o, v, config)?;
    }
    let report = report_from_outputs(&outs, ds, thresholds)?;
    Ok((report, total / ds.len().max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, Dims, SynthSpec};

    fn scalar_params(v: f64) -> (ModelParams, ModelConfig) {
        // smallest real model, with one entry overwritten for the scalar case
        let c = ModelConfig {
            d: 1,
            dense_units: 1,
            modalities: "t".parse().unwrap(),
            ..ModelConfig::new(Dims::new(1, 1, 1))
        };
        let mut p = build_model(&c, 0).unwrap();
        p.get_mut("dense.bias").unwrap().set(0, 0, v);
        (p, c)
    }

    fn zero_grads(p: &ModelParams) -> Gradients {
        p.iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.rows(), t.cols())))
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut p, _) = scalar_params(0.5);
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let g = zero_grads(&p);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut p, _) = scalar_params(0.5);
        let mut g = zero_grads(&p);
        g.get_mut("dense.bias").unwrap().set(0, 0, 1.0);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &g, &mut st).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let moved = 0.5 - p.get("dense.bias").unwrap().get(0, 0);
        assert!((moved - 0.001 / (1.0 + 1e-8)).abs() < 1e-15, "{moved}");
    }

    #[test]
    fn missing_gradient_rejected() {
        let (mut p, _) = scalar_params(0.0);
        let mut g = zero_grads(&p);
        g.shift_remove("dense.weight");
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert_eq!(
            adam_step(&mut p, &g, &mut st),
            Err(TrainError::MissingGrad("dense.weight".into()))
        );
        assert_eq!(st.t, 0);
    }

    fn tiny() -> (Dataset, ModelConfig) {
        let ds = synthesize_dataset(
            &SynthSpec {
                n_videos: 6,
                dims: Dims::new(6, 5, 4),
                ..SynthSpec::default()
            },
            1,
        )
        .unwrap();
        let c = ModelConfig {
            d: 4,
            dense_units: 8,
            ..ModelConfig::new(ds.dims)
        };
        (ds, c)
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (ds, c) = tiny();
        let opts = TrainOptions {
            epochs: 0,
            seed: 3,
            ..TrainOptions::default()
        };
        let (p, h) = train(&c, &ds, None, &opts).unwrap();
        assert_eq!(p, build_model(&c, 3).unwrap());
        assert!(h.epochs.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_counts_steps() {
        let (ds, c) = tiny();
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 4,
            seed: 9,
            ..TrainOptions::default()
        };
        let (dev, _) = tiny();
        let a = train(&c, &ds, Some(&dev), &opts).unwrap();
        let b = train(&c, &ds, Some(&dev), &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.total_steps, 3 * 2);
        assert_eq!(
            a.1.epochs.iter().map(|e| e.steps).collect::<Vec<_>>(),
            [2, 4, 6]
        );
        assert!(a.1.best_epoch.is_some());
        assert!(a.1.epochs.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn dims_mismatch_rejected() {
        let (ds, c) = tiny();
        let c = ModelConfig { d_text: 7, ..c };
        assert!(matches!(
            train(&c, &ds, None, &TrainOptions::default()),
            Err(TrainError::DimsMismatch { .. })
        ));
    }

    #[test]
    fn evaluation_is_repeatable() {
        let (ds, c) = tiny();
        let p = build_model(&c, 0).unwrap();
        let a = evaluate(&p, &c, &ds, Thresholds::default()).unwrap();
        assert_eq!(a, evaluate(&p, &c, &ds, Thresholds::default()).unwrap());
        assert_eq!(a.utterances, ds.num_utterances());
        assert!(a.sentiment.is_some() && a.emotion.is_some());
    }

    #[test]
    fn selection_score_by_mode() {
        let (ds, c) = tiny();
        let p = build_model(&c, 0).unwrap();
        let r = evaluate(&p, &c, &ds, Thresholds::default()).unwrap();
        let s = r.sentiment.as_ref().unwrap().accuracy;
        let e = r
            .emotion
            .as_ref()
            .unwrap()
            .average_weighted_accuracy
            .unwrap();
        assert_eq!(selection_score(&r, TaskMode::StlSentiment), Some(s));
        assert_eq!(selection_score(&r, TaskMode::StlEmotion), Some(e));
        assert_eq!(selection_score(&r, TaskMode::Mtl), Some((s + e) / 2.0));
    }

    #[test]
    fn training_with_clipping_stays_finite() {
        let (ds, c) = tiny();
        let opts = TrainOptions {
            epochs: 1,
            clip_grad_norm: Some(1e-3),
            ..TrainOptions::default()
        };
        let (p, _) = train(&c, &ds, None, &opts).unwrap();
        assert!(p.iter().all(|(_, t)| t.is_finite()));
    }
}
