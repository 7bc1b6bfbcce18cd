//! Utterance-level feature datasets: schema, JSON Lines loader, synthetic
//! generator, and per-video batching.
//!
//! Features arrive already averaged to utterance level. A dataset file
//! starts with a header line followed by one video per line:
//!
//! ```text
//! {"format":"mtmm-es/1","dims":[d_t,d_a,d_v]}
//! {"video_id":"v1","utterances":[{"utterance_id":"v1_0","text":[..],"acoustic":[..],"visual":[..],"sentiment":1,"emotions":[0,0,0,1,0,0,0]}]}
//! ```
//!
//! The header may carry an optional `"split"` of `train`, `dev` or `test`.

use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

pub const FORMAT_TAG: &str = "mtmm-es/1";
pub const NUM_EMOTIONS: usize = 7;
/// Index of the "no emotion" class in emotion vectors.
pub const NO_EMOTION: usize = 6;
pub const EMOTION_NAMES: [&str; NUM_EMOTIONS] = [
    "anger",
    "disgust",
    "fear",
    "happy",
    "sad",
    "surprise",
    "no_emotion",
];
pub const SENTIMENT_NAMES: [&str; 2] = ["negative", "positive"];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("header: {0}")]
    Header(String),
    #[error("utterance {utterance_id} of video {video_id}: {modality} vector has {got} values, expected {expected}")]
    Dimension {
        video_id: String,
        utterance_id: String,
        modality: Modality,
        expected: usize,
        got: usize,
    },
    #[error("video {video_id}: {msg}")]
    Invariant { video_id: String, msg: String },
    #[error("invalid synthesis spec: {0}")]
    Spec(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Acoustic,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Acoustic, Modality::Visual];

    /// Single-letter key used in parameter names and CLI flags.
    pub fn key(self) -> char {
        match self {
            Modality::Text => 't',
            Modality::Acoustic => 'a',
            Modality::Visual => 'v',
        }
    }

    pub fn from_key(c: char) -> Option<Self> {
        match c.to_ascii_lowercase() {
            't' => Some(Modality::Text),
            'a' => Some(Modality::Acoustic),
            'v' => Some(Modality::Visual),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Acoustic => "acoustic",
            Modality::Visual => "visual",
        })
    }
}

/// Feature sizes per modality, serialized as `[d_t, d_a, d_v]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims {
    pub text: usize,
    pub acoustic: usize,
    pub visual: usize,
}

impl Dims {
    pub fn new(text: usize, acoustic: usize, visual: usize) -> Self {
        Self {
            text,
            acoustic,
            visual,
        }
    }

    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Acoustic => self.acoustic,
            Modality::Visual => self.visual,
        }
    }
}

impl From<[usize; 3]> for Dims {
    fn from([t, a, v]: [usize; 3]) -> Self {
        Self::new(t, a, v)
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        [d.text, d.acoustic, d.visual]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: String,
    pub text: Vec<f64>,
    pub acoustic: Vec<f64>,
    pub visual: Vec<f64>,
    /// 0 = negative, 1 = positive.
    pub sentiment: u8,
    /// Presence flags in [`EMOTION_NAMES`] order.
    pub emotions: [u8; NUM_EMOTIONS],
}

impl Utterance {
    pub fn features(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Text => &self.text,
            Modality::Acoustic => &self.acoustic,
            Modality::Visual => &self.visual,
        }
    }

    pub fn features_mut(&mut self, m: Modality) -> &mut Vec<f64> {
        match m {
            Modality::Text => &mut self.text,
            Modality::Acoustic => &mut self.acoustic,
            Modality::Visual => &mut self.visual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub video_id: String,
    pub utterances: Vec<Utterance>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Stacks one modality into a `u x d` tensor.
    pub fn feature_matrix(&self, m: Modality) -> Tensor {
        let rows: Vec<&[f64]> = self.utterances.iter().map(|u| u.features(m)).collect();
        Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(rows.len(), 0))
    }

    /// One-hot `u x 2` sentiment targets.
    pub fn sentiment_targets(&self) -> Tensor {
        let mut t = Tensor::zeros(self.len(), 2);
        for (i, u) in self.utterances.iter().enumerate() {
            t.set(i, usize::from(u.sentiment.min(1)), 1.0);
        }
        t
    }

    /// `u x 7` emotion presence targets.
    pub fn emotion_targets(&self) -> Tensor {
        let mut t = Tensor::zeros(self.len(), NUM_EMOTIONS);
        for (i, u) in self.utterances.iter().enumerate() {
            for (c, &b) in u.emotions.iter().enumerate() {
                t.set(i, c, f64::from(b));
            }
        }
        t
    }

    /// Checks every per-video invariant against the expected dims.
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        let invariant = |msg: String| DataError::Invariant {
            video_id: self.video_id.clone(),
            msg,
        };
        if self.utterances.is_empty() {
            return Err(invariant("video has no utterances".into()));
        }
        let mut ids = HashSet::new();
        for u in &self.utterances {
            if !ids.insert(u.utterance_id.as_str()) {
                return Err(invariant(format!(
                    "duplicate utterance_id {}",
                    u.utterance_id
                )));
            }
            for m in Modality::ALL {
                let got = u.features(m).len();
                if got != dims.get(m) {
                    return Err(DataError::Dimension {
                        video_id: self.video_id.clone(),
                        utterance_id: u.utterance_id.clone(),
                        modality: m,
                        expected: dims.get(m),
                        got,
                    });
                }
                if u.features(m).iter().any(|v| !v.is_finite()) {
                    return Err(invariant(format!(
                        "utterance {}: non-finite {m} feature",
                        u.utterance_id
                    )));
                }
            }
            if u.sentiment > 1 {
                return Err(invariant(format!(
                    "utterance {}: sentiment {} is not 0 or 1",
                    u.utterance_id, u.sentiment
                )));
            }
            if let Some(b) = u.emotions.iter().find(|&&b| b > 1) {
                return Err(invariant(format!(
                    "utterance {}: emotion flag {b} is not 0 or 1",
                    u.utterance_id
                )));
            }
            if u.emotions[NO_EMOTION] == 1 && u.emotions[..NO_EMOTION].contains(&1) {
                return Err(invariant(format!(
                    "utterance {}: no_emotion set together with an emotion",
                    u.utterance_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    dims: Dims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoSample>,
    pub dims: Dims,
    pub split: Split,
}

impl Dataset {
    pub fn new(videos: Vec<VideoSample>, dims: Dims, split: Split) -> Result<Self> {
        let ds = Self {
            videos,
            dims,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for v in &self.videos {
            if !ids.insert(v.video_id.as_str()) {
                return Err(DataError::Invariant {
                    video_id: v.video_id.clone(),
                    msg: "duplicate video_id".into(),
                });
            }
            v.validate(&self.dims)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn num_utterances(&self) -> usize {
        self.videos.iter().map(VideoSample::len).sum()
    }

    pub fn video(&self, id: &str) -> Option<&VideoSample> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    /// Deterministically moves `fraction` of the videos into a dev split.
    pub fn train_dev_split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_dev = ((self.len() as f64) * fraction).round() as usize;
        let n_dev = n_dev.min(self.len().saturating_sub(1));
        let mut dev_idx = idx[..n_dev].to_vec();
        let mut train_idx = idx[n_dev..].to_vec();
        dev_idx.sort_unstable();
        train_idx.sort_unstable();
        let pick = |ix: &[usize], split| Dataset {
            videos: ix.iter().map(|&i| self.videos[i].clone()).collect(),
            dims: self.dims,
            split,
        };
        (pick(&train_idx, Split::Train), pick(&dev_idx, Split::Dev))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header {
            format: FORMAT_TAG.into(),
            dims: self.dims,
            split: Some(self.split),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for v in &self.videos {
            writeln!(w, "{}", serde_json::to_string(v)?)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Parses and validates a JSON Lines dataset.
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
            Ok(s) if s.trim().is_empty() => None,
            other => Some((i + 1, other)),
        });
        let (line, header) = lines
            .next()
            .ok_or_else(|| DataError::Header("file is empty".into()))?;
        let header = header.map_err(|e| DataError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let header: Header = serde_json::from_str(&header)
            .map_err(|e| DataError::Header(format!("line {line}: {e}")))?;
        if header.format != FORMAT_TAG {
            return Err(DataError::Header(format!(
                "unsupported format {:?}, expected {FORMAT_TAG:?}",
                header.format
            )));
        }
        let mut videos = Vec::new();
        let mut ids = HashSet::new();
        for (line, text) in lines {
            let text = text.map_err(|e| DataError::Parse {
                line,
                msg: e.to_string(),
            })?;
            let video: VideoSample = serde_json::from_str(&text).map_err(|e| DataError::Parse {
                line,
                msg: e.to_string(),
            })?;
            if !ids.insert(video.video_id.clone()) {
                return Err(DataError::Invariant {
                    video_id: video.video_id,
                    msg: format!("duplicate video_id on line {line}"),
                });
            }
            video.validate(&header.dims)?;
            videos.push(video);
        }
        Ok(Self {
            videos,
            dims: header.dims,
            split: header.split.unwrap_or_default(),
        })
    }

    pub fn from_jsonl_str(s: &str) -> Result<Self> {
        Self::read_jsonl(s.as_bytes())
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Dataset::read_jsonl(BufReader::new(file))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    ds.write_jsonl(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

/// Label marginals for synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProportions {
    /// P(sentiment = positive).
    pub positive: f64,
    /// Marginal presence rate of each of the six emotions. "No emotion" is
    /// set exactly when none of them is.
    pub emotions: [f64; 6],
}

impl Default for ClassProportions {
    /// Ratios of the CMU-MOSEI training split: 11499 positive of 16216
    /// utterances; anger 3506, disgust 2946, fear 1306, happy 8673,
    /// sad 4233, surprise 1631.
    fn default() -> Self {
        let n = 16216.0;
        Self {
            positive: 11499.0 / n,
            emotions: [
                3506.0 / n,
                2946.0 / n,
                1306.0 / n,
                8673.0 / n,
                4233.0 / n,
                1631.0 / n,
            ],
        }
    }
}

/// Emotions whose rate rises with positive sentiment; the rest rise with
/// negative sentiment.
const POSITIVE_LEANING: [bool; 6] = [false, false, false, true, false, true];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub u_min: usize,
    pub u_max: usize,
    pub dims: Dims,
    pub class_proportions: ClassProportions,
    /// Strength in `[0, 1]` of the dependence of emotions on sentiment.
    /// Marginal emotion rates are unaffected.
    pub sentiment_coupling: f64,
    pub noise_scale: f64,
    pub split: Split,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_videos: 8,
            u_min: 3,
            u_max: 8,
            dims: Dims::new(16, 12, 10),
            class_proportions: ClassProportions::default(),
            sentiment_coupling: 0.5,
            noise_scale: 0.05,
            split: Split::Train,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Spec(m.into()));
        if self.n_videos == 0 {
            return bad("n_videos must be at least 1");
        }
        if self.u_min == 0 || self.u_min > self.u_max {
            return bad("u range must satisfy 1 <= u_min <= u_max");
        }
        if self.dims.text == 0 || self.dims.acoustic == 0 || self.dims.visual == 0 {
            return bad("feature dims must be positive");
        }
        let p = &self.class_proportions;
        if !(0.0..=1.0).contains(&p.positive) || p.emotions.iter().any(|e| !(0.0..=1.0).contains(e))
        {
            return bad("class proportions must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.sentiment_coupling) {
            return bad("sentiment_coupling must lie in [0, 1]");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative");
        }
        Ok(())
    }

    /// P(emotion c | sentiment) for c in 0..6, keeping the marginals fixed.
    pub fn conditional_emotion_rates(&self, positive: bool) -> [f64; 6] {
        let pp = self.class_proportions.positive;
        let pn = 1.0 - pp;
        let rho = self.sentiment_coupling;
        let mut out = [0.0; 6];
        for (c, o) in out.iter_mut().enumerate() {
            let p = self.class_proportions.emotions[c];
            // shift s.t. pp * P(c|pos) + pn * P(c|neg) == p stays in [0, 1]
            let (up, down) = if POSITIVE_LEANING[c] {
                (pn, pp)
            } else {
                (pp, pn)
            };
            let favoured = positive == POSITIVE_LEANING[c];
            let mut m = f64::INFINITY;
            if up > 0.0 {
                m = m.min((1.0 - p) / up);
            }
            if down > 0.0 {
                m = m.min(p / down);
            }
            if !m.is_finite() {
                m = 0.0;
            }
            *o = if favoured {
                p + rho * m * up
            } else {
                p - rho * m * down
            }
            .clamp(0.0, 1.0);
        }
        out
    }
}

/// Latent class prototypes the synthetic features are built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    /// `[modality][sentiment]` vectors.
    pub sentiment: [[Vec<f64>; 2]; 3],
    /// `[modality][emotion class]` vectors.
    pub emotion: [Vec<Vec<f64>>; 3],
}

impl Prototypes {
    /// Noise-free feature vector for a label combination.
    pub fn combine(&self, m: Modality, sentiment: u8, emotions: &[u8; NUM_EMOTIONS]) -> Vec<f64> {
        let mi = m as usize;
        let mut v = self.sentiment[mi][usize::from(sentiment)].clone();
        for (c, &b) in emotions.iter().enumerate() {
            if b == 1 {
                for (x, p) in v.iter_mut().zip(&self.emotion[mi][c]) {
                    *x += p;
                }
            }
        }
        v
    }
}

fn gaussian_vec<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Generates a dataset whose labels are a learnable function of features.
///
/// Each modality has one prototype per sentiment and per emotion class.
/// An utterance's features are its sentiment prototype plus the prototypes
/// of every active emotion class, plus Gaussian noise times `noise_scale`.
pub fn synthesize_with_prototypes(spec: &SynthSpec, seed: u64) -> Result<(Dataset, Prototypes)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = |m: Modality| spec.dims.get(m);
    let sentiment = Modality::ALL.map(|m| {
        [
            gaussian_vec(dim(m), &mut rng),
            gaussian_vec(dim(m), &mut rng),
        ]
    });
    let emotion = Modality::ALL.map(|m| {
        (0..NUM_EMOTIONS)
            .map(|_| gaussian_vec(dim(m), &mut rng))
            .collect::<Vec<_>>()
    });
    let protos = Prototypes { sentiment, emotion };
    let rates = [
        spec.conditional_emotion_rates(false),
        spec.conditional_emotion_rates(true),
    ];

    let mut videos = Vec::with_capacity(spec.n_videos);
    for vi in 0..spec.n_videos {
        let video_id = format!("vid{vi:04}");
        let u = rng.random_range(spec.u_min..=spec.u_max);
        let mut utterances = Vec::with_capacity(u);
        for ui in 0..u {
            let sentiment = u8::from(rng.random::<f64>() < spec.class_proportions.positive);
            let mut emotions = [0u8; NUM_EMOTIONS];
            for c in 0..6 {
                emotions[c] = u8::from(rng.random::<f64>() < rates[usize::from(sentiment)][c]);
            }
            if emotions[..6].iter().all(|&b| b == 0) {
                emotions[NO_EMOTION] = 1;
            }
            let mut feats = Modality::ALL.map(|m| protos.combine(m, sentiment, &emotions));
            for f in feats.iter_mut() {
                for x in f.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *x += spec.noise_scale * n;
                }
            }
            let [text, acoustic, visual] = feats;
            utterances.push(Utterance {
                utterance_id: format!("{video_id}_u{ui:02}"),
                text,
                acoustic,
                visual,
                sentiment,
                emotions,
            });
        }
        videos.push(VideoSample {
            video_id,
            utterances,
        });
    }
    Ok((Dataset::new(videos, spec.dims, spec.split)?, protos))
}

pub fn synthesize_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    synthesize_with_prototypes(spec, seed).map(|(ds, _)| ds)
}

/// Seeded shuffle of video indices, cut into batches of `batch_size`
/// (a size of 0 is treated as 1). Every video stays a separate sequence.
pub fn batch_videos(ds: &Dataset, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
