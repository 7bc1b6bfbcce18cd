use mtmm_core::data::{
    synthesize_dataset, Dataset, Dims, Modality, SynthSpec, NO_EMOTION, NUM_EMOTIONS,
};
use proptest::prelude::*;
use serde_json::Value;

fn small_spec(n_videos: usize) -> SynthSpec {
    SynthSpec {
        n_videos,
        u_min: 1,
        u_max: 4,
        dims: Dims::new(3, 2, 2),
        ..SynthSpec::default()
    }
}

/// One documented invariant violation applied to a parsed file.
#[derive(Clone, Copy, Debug)]
enum Mutation {
    ShortFeature(usize),
    LongFeature(usize),
    NoEmotionWithEmotion,
    SentimentOutOfRange,
    EmotionBitOutOfRange,
    ShortEmotionVector,
    EmptyVideo,
    DuplicateVideoId,
    WrongFormatTag,
    WrongHeaderDims,
    MissingHeader,
    MissingField,
}

fn mutation() -> impl Strategy<Value = Mutation> {
    prop_oneof![
        (0..3usize).prop_map(Mutation::ShortFeature),
        (0..3usize).prop_map(Mutation::LongFeature),
        Just(Mutation::NoEmotionWithEmotion),
        Just(Mutation::SentimentOutOfRange),
        Just(Mutation::EmotionBitOutOfRange),
        Just(Mutation::ShortEmotionVector),
        Just(Mutation::EmptyVideo),
        Just(Mutation::DuplicateVideoId),
        Just(Mutation::WrongFormatTag),
        Just(Mutation::WrongHeaderDims),
        Just(Mutation::MissingHeader),
        Just(Mutation::MissingField),
    ]
}

fn apply(text: &str, m: Mutation, video: usize, utt: usize) -> String {
    let mut lines: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let n_videos = lines.len() - 1;
    let vi = 1 + video % n_videos;
    let n_utts = lines[vi]["utterances"].as_array().unwrap().len();
    let u = &mut lines[vi]["utterances"][utt % n_utts];
    let key = |k: usize| Modality::ALL[k].to_string();
    match m {
        Mutation::ShortFeature(k) => {
            u[key(k)].as_array_mut().unwrap().pop();
        }
        Mutation::LongFeature(k) => u[key(k)].as_array_mut().unwrap().push(0.5.into()),
        Mutation::NoEmotionWithEmotion => {
            u["emotions"][NO_EMOTION] = 1.into();
            u["emotions"][0] = 1.into();
        }
        Mutation::SentimentOutOfRange => u["sentiment"] = 2.into(),
        Mutation::EmotionBitOutOfRange => u["emotions"][utt % NUM_EMOTIONS] = 3.into(),
        Mutation::ShortEmotionVector => {
            u["emotions"].as_array_mut().unwrap().pop();
        }
        Mutation::EmptyVideo => lines[vi]["utterances"] = Value::Array(vec![]),
        Mutation::DuplicateVideoId => {
            let dup = lines[vi].clone();
            lines.push(dup);
        }
        Mutation::WrongFormatTag => lines[0]["format"] = "mtmm-es/0".into(),
        Mutation::WrongHeaderDims => lines[0]["dims"][0] = 4.into(),
        Mutation::MissingHeader => {
            lines.remove(0);
        }
        Mutation::MissingField => {
            u.as_object_mut().unwrap().remove("sentiment");
        }
    }
    lines.iter().map(|l| format!("{l}\n")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn loader_rejects_every_documented_violation(
        seed in 0u64..1000,
        m in mutation(),
        video in 0usize..100,
        utt in 0usize..100,
    ) {
        let text = synthesize_dataset(&small_spec(3), seed).unwrap().to_jsonl();
        prop_assert!(Dataset::from_jsonl_str(&text).is_ok());
        let bad = apply(&text, m, video, utt);
        prop_assert!(Dataset::from_jsonl_str(&bad).is_err(), "{:?} accepted", m);
    }

    #[test]
    fn save_load_round_trip(seed in 0u64..1000) {
        let ds = synthesize_dataset(&small_spec(4), seed).unwrap();
        let back = Dataset::from_jsonl_str(&ds.to_jsonl()).unwrap();
        prop_assert_eq!(back.to_jsonl(), ds.to_jsonl());
        prop_assert_eq!(back.videos, ds.videos);
    }
}

#[test]
fn class_proportions_match_the_spec() {
    for seed in 0..5 {
        let spec = SynthSpec {
            n_videos: 200,
            ..SynthSpec::default()
        };
        let ds = synthesize_dataset(&spec, seed).unwrap();
        let n = ds.num_utterances() as f64;
        let utts = || ds.videos.iter().flat_map(|v| &v.utterances);
        let positive = utts().filter(|u| u.sentiment == 1).count() as f64 / n;
        assert!(
            (positive - spec.class_proportions.positive).abs() <= 0.05,
            "seed {seed}: positive rate {positive}"
        );
        for c in 0..6 {
            let rate = utts().filter(|u| u.emotions[c] == 1).count() as f64 / n;
            let want = spec.class_proportions.emotions[c];
            assert!(
                (rate - want).abs() <= 0.05,
                "seed {seed}: emotion {c} rate {rate} vs {want}"
            );
        }
    }
}

/// Full-batch gradient descent on the logistic loss; returns train accuracy.
fn logistic_probe(x: &[Vec<f64>], y: &[bool]) -> f64 {
    let d = x[0].len();
    let mut w = vec![0.0; d + 1];
    let score = |w: &[f64], xi: &[f64]| w[d] + xi.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    let lr = 0.5;
    for _ in 0..3000 {
        let mut g = vec![0.0; d + 1];
        for (xi, &yi) in x.iter().zip(y) {
            let p = 1.0 / (1.0 + (-score(&w, xi)).exp());
            let r = p - f64::from(u8::from(yi));
            for (gj, xj) in g.iter_mut().zip(xi) {
                *gj += r * xj;
            }
            g[d] += r;
        }
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= lr * gj / x.len() as f64;
        }
    }
    let hits = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| (score(&w, xi) > 0.0) == yi)
        .count();
    hits as f64 / x.len() as f64
}

#[test]
fn low_noise_data_is_linearly_separable() {
    for (seed, noise) in [(0, 0.05), (1, 0.1), (2, 0.1)] {
        let spec = SynthSpec {
            noise_scale: noise,
            ..SynthSpec::default()
        };
        let ds = synthesize_dataset(&spec, seed).unwrap();
        let utts: Vec<_> = ds.videos.iter().flat_map(|v| &v.utterances).collect();
        let x: Vec<Vec<f64>> = utts
            .iter()
            .map(|u| [&u.text[..], &u.acoustic, &u.visual].concat())
            .collect();
        let mut labels: Vec<Vec<bool>> = vec![utts.iter().map(|u| u.sentiment == 1).collect()];
        for c in 0..NUM_EMOTIONS {
            labels.push(utts.iter().map(|u| u.emotions[c] == 1).collect());
        }
        for (k, y) in labels.iter().enumerate() {
            if y.iter().all(|&b| b == y[0]) {
                continue;
            }
            let acc = logistic_probe(&x, y);
            assert_eq!(
                acc, 1.0,
                "seed {seed}, noise {noise}, label {k}: accuracy {acc}"
            );
        }
    }
}
