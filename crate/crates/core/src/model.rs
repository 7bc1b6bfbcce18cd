//! The full network: per-modality bi-GRU encoders, pairwise inter-modal
//! attention, residual concatenation, a shared dense layer and the two task
//! heads.
//!
//! Tri-modal representation, for encodings `T`, `V`, `A` (each `u x 2d`):
//!
//! ```text
//! Rep = [Atn(T,V), Atn(A,V), Atn(T,A), T, V, A]      (u x 18d)
//! ```
//!
//! Bi-modal models use the one available pair plus both encodings (`u x 8d`);
//! uni-modal models use the self-attention output alone (`u x 4d`).
//! `Rep -> dropout -> dense(ReLU) -> {softmax(2), sigmoid(7)}`.

use crate::attention::{cim_attention_graph, self_attention_graph, AttentionPair, AttentionVars};
use crate::data::{Dims, Modality, VideoSample, NUM_EMOTIONS};
use crate::encoders::{bigru_graph, BiGruParams, BiGruVars, GruParams, GruVars, GRU_PARAM_NAMES};
use crate::metrics::threshold_labels;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("video {video_id}: {modality} features have width {got}, model expects {expected}")]
    Dimension {
        video_id: String,
        modality: Modality,
        expected: usize,
        got: usize,
    },
    #[error("video {0} has no utterances")]
    EmptyVideo(String),
    #[error("parameter {0}: {1}")]
    Param(String, String),
    #[error("label out of range: {0}")]
    Label(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Which losses drive training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskMode {
    #[serde(rename = "stl-sent")]
    StlSentiment,
    #[serde(rename = "stl-emo")]
    StlEmotion,
    #[default]
    #[serde(rename = "mtl")]
    Mtl,
}

impl TaskMode {
    pub fn has_sentiment(self) -> bool {
        self != TaskMode::StlEmotion
    }

    pub fn has_emotion(self) -> bool {
        self != TaskMode::StlSentiment
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::StlSentiment => "stl-sent",
            TaskMode::StlEmotion => "stl-emo",
            TaskMode::Mtl => "mtl",
        }
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stl-sent" => Ok(TaskMode::StlSentiment),
            "stl-emo" => Ok(TaskMode::StlEmotion),
            "mtl" => Ok(TaskMode::Mtl),
            _ => Err(ModelError::Config(format!(
                "unknown mode {s:?} (expected stl-sent, stl-emo or mtl)"
            ))),
        }
    }
}

/// Non-empty subset of {text, acoustic, visual}; written as e.g. `t,a,v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Modalities {
    pub text: bool,
    pub acoustic: bool,
    pub visual: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities {
        text: true,
        acoustic: true,
        visual: true,
    };

    /// The seven input combinations in results-table column order:
    /// T, A, V, T+V, T+A, A+V, T+A+V.
    pub const GRID: [Modalities; 7] = [
        Modalities::of(true, false, false),
        Modalities::of(false, true, false),
        Modalities::of(false, false, true),
        Modalities::of(true, false, true),
        Modalities::of(true, true, false),
        Modalities::of(false, true, true),
        Modalities::of(true, true, true),
    ];

    pub const fn of(text: bool, acoustic: bool, visual: bool) -> Self {
        Self {
            text,
            acoustic,
            visual,
        }
    }

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Text => self.text,
            Modality::Acoustic => self.acoustic,
            Modality::Visual => self.visual,
        }
    }

    pub fn count(&self) -> usize {
        usize::from(self.text) + usize::from(self.acoustic) + usize::from(self.visual)
    }

    /// Encodings in representation order: T, V, A.
    pub fn encoding_order(&self) -> Vec<Modality> {
        [Modality::Text, Modality::Visual, Modality::Acoustic]
            .into_iter()
            .filter(|&m| self.contains(m))
            .collect()
    }

    /// Attention pairs in representation order: (T,V), (A,V), (T,A).
    pub fn pairs(&self) -> Vec<(Modality, Modality)> {
        [
            (Modality::Text, Modality::Visual),
            (Modality::Acoustic, Modality::Visual),
            (Modality::Text, Modality::Acoustic),
        ]
        .into_iter()
        .filter(|&(a, b)| self.contains(a) && self.contains(b))
        .collect()
    }

    /// Column label such as `T+A+V`.
    pub fn label(&self) -> String {
        [(self.text, "T"), (self.acoustic, "A"), (self.visual, "V")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, l)| *l)
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let keys: Vec<String> = Modality::ALL
            .iter()
            .filter(|&&m| self.contains(m))
            .map(|m| m.key().to_string())
            .collect();
        f.write_str(&keys.join(","))
    }
}

impl FromStr for Modalities {
    type Err = ModelError;

    /// Accepts `t,a,v`, `tav`, `T+A+V` and similar spellings.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Modalities::of(false, false, false);
        for c in s.chars().filter(|c| !matches!(c, ',' | '+' | ' ')) {
            match Modality::from_key(c) {
                Some(Modality::Text) => out.text = true,
                Some(Modality::Acoustic) => out.acoustic = true,
                Some(Modality::Visual) => out.visual = true,
                None => {
                    return Err(ModelError::Config(format!(
                        "unknown modality {c:?} in {s:?}"
                    )))
                }
            }
        }
        if out.count() == 0 {
            return Err(ModelError::Config("modalities must not be empty".into()));
        }
        Ok(out)
    }
}

impl TryFrom<String> for Modalities {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Modalities> for String {
    fn from(m: Modalities) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden size of each GRU direction.
    pub d: usize,
    pub d_text: usize,
    pub d_acoustic: usize,
    pub d_visual: usize,
    pub dense_units: usize,
    pub dropout_rate: f64,
    pub mode: TaskMode,
    pub modalities: Modalities,
    /// Weight of the sentiment loss under MTL.
    pub loss_weight_lambda: f64,
}

impl ModelConfig {
    pub fn new(dims: Dims) -> Self {
        Self {
            d: 100,
            d_text: dims.text,
            d_acoustic: dims.acoustic,
            d_visual: dims.visual,
            dense_units: 100,
            dropout_rate: 0.3,
            mode: TaskMode::Mtl,
            modalities: Modalities::ALL,
            loss_weight_lambda: 0.5,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.d_text, self.d_acoustic, self.d_visual)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.dense_units == 0 {
            return bad("d and dense_units must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(0.0..=1.0).contains(&self.loss_weight_lambda) {
            return bad(format!(
                "loss_weight_lambda {} outside [0, 1]",
                self.loss_weight_lambda
            ));
        }
        if self.modalities.count() == 0 {
            return bad("modalities must not be empty".into());
        }
        for m in Modality::ALL {
            if self.modalities.contains(m) && self.dims().get(m) == 0 {
                return bad(format!("{m} feature size must be positive"));
            }
        }
        Ok(())
    }

    /// Width of the concatenated representation.
    pub fn rep_width(&self) -> usize {
        let enc = 2 * self.d;
        match self.modalities.count() {
            1 => 2 * enc,
            _ => self.modalities.pairs().len() * 2 * enc + self.modalities.count() * enc,
        }
    }
}

/// All trainable tensors, addressed by stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor>,
}

fn encoder_prefix(m: Modality, dir: &str) -> String {
    format!("encoder.{}.{dir}", m.key())
}

impl ModelParams {
    /// Expected `(name, shape)` list for a config, in registry order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let d = config.d;
        let mut out = Vec::new();
        for m in Modality::ALL {
            if !config.modalities.contains(m) {
                continue;
            }
            let d_in = config.dims().get(m);
            for dir in ["fwd", "bwd"] {
                let prefix = encoder_prefix(m, dir);
                let shapes = [
                    (d_in, d),
                    (d_in, d),
                    (d_in, d),
                    (d, d),
                    (d, d),
                    (d, d),
                    (1, d),
                    (1, d),
                    (1, d),
                ];
                for (n, s) in GRU_PARAM_NAMES.iter().zip(shapes) {
                    out.push((format!("{prefix}.{n}"), s));
                }
            }
        }
        let h = config.dense_units;
        out.push(("dense.weight".into(), (config.rep_width(), h)));
        out.push(("dense.bias".into(), (1, h)));
        if config.mode.has_sentiment() {
            out.push(("sentiment.weight".into(), (h, 2)));
            out.push(("sentiment.bias".into(), (1, 2)));
        }
        if config.mode.has_emotion() {
            out.push(("emotion.weight".into(), (h, NUM_EMOTIONS)));
            out.push(("emotion.bias".into(), (1, NUM_EMOTIONS)));
        }
        out
    }

    /// Builds params from named tensors, checking them against the layout.
    pub fn from_named(config: &ModelConfig, tensors: IndexMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(config);
        if layout.len() != tensors.len() {
            return Err(ModelError::Param(
                "*".into(),
                format!("expected {} tensors, got {}", layout.len(), tensors.len()),
            ));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&tensors) {
            if name != got_name {
                return Err(ModelError::Param(
                    got_name.clone(),
                    format!("expected {name} at this position"),
                ));
            }
            if t.shape() != *shape {
                return Err(ModelError::Param(
                    name.clone(),
                    format!("shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn bigru(&self, m: Modality) -> Option<BiGruParams> {
        let dir = |d: &str| {
            let prefix = encoder_prefix(m, d);
            let ts = GRU_PARAM_NAMES.map(|n| self.tensors.get(&format!("{prefix}.{n}")).cloned());
            if ts.iter().any(Option::is_none) {
                return None;
            }
            GruParams::from_tensors(ts.map(Option::unwrap)).ok()
        };
        Some(BiGruParams {
            forward: dir("fwd")?,
            backward: dir("bwd")?,
        })
    }
}

/// Deterministic parameter initialisation for `(config, seed)`.
///
/// GRU weights follow [`GruParams::init`]; dense and head weights are uniform
/// in `±1/sqrt(fan_in)`; all biases start at zero.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = IndexMap::new();
    for m in Modality::ALL {
        if !config.modalities.contains(m) {
            continue;
        }
        let p = BiGruParams::init(config.dims().get(m), config.d, &mut rng);
        for (dir, gp) in [("fwd", &p.forward), ("bwd", &p.backward)] {
            for (n, t) in GRU_PARAM_NAMES.iter().zip(gp.tensors()) {
                tensors.insert(format!("{}.{n}", encoder_prefix(m, dir)), t.clone());
            }
        }
    }
    let mut dense = |name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
        let k = 1.0 / (fan_in as f64).sqrt();
        tensors.insert(
            format!("{name}.weight"),
            Tensor::uniform(fan_in, fan_out, k, rng),
        );
        tensors.insert(format!("{name}.bias"), Tensor::zeros(1, fan_out));
    };
    dense("dense", config.rep_width(), config.dense_units, &mut rng);
    if config.mode.has_sentiment() {
        dense("sentiment", config.dense_units, 2, &mut rng);
    }
    if config.mode.has_emotion() {
        dense("emotion", config.dense_units, NUM_EMOTIONS, &mut rng);
    }
    ModelParams::from_named(config, tensors)
}

/// Which attention block a record came from, e.g. `TV` or `T` for
/// self-attention.
pub type PairLabel = String;

fn pair_label(a: Modality, b: Option<Modality>) -> PairLabel {
    let mut s = a.key().to_ascii_uppercase().to_string();
    if let Some(b) = b {
        s.push(b.key().to_ascii_uppercase());
    }
    s
}

/// Graph handles produced by [`forward_graph`].
#[derive(Clone, Debug)]
pub struct ForwardGraph {
    /// One leaf per registry entry, in registry order.
    pub params: Vec<(String, Var)>,
    pub rep: Var,
    pub sentiment: Option<Var>,
    pub emotion: Option<Var>,
    pub attention: Vec<(PairLabel, AttentionVars)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `u x 2`, columns `[negative, positive]`.
    pub sentiment_probs: Option<Tensor>,
    /// `u x 7` independent sigmoids.
    pub emotion_probs: Option<Tensor>,
    pub attention: Vec<(PairLabel, AttentionPair)>,
    pub rep_width: usize,
}

pub fn check_video(video: &VideoSample, config: &ModelConfig) -> Result<()> {
    if video.is_empty() {
        return Err(ModelError::EmptyVideo(video.video_id.clone()));
    }
    for m in Modality::ALL {
        if !config.modalities.contains(m) {
            continue;
        }
        let expected = config.dims().get(m);
        for u in &video.utterances {
            let got = u.features(m).len();
            if got != expected {
                return Err(ModelError::Dimension {
                    video_id: video.video_id.clone(),
                    modality: m,
                    expected,
                    got,
                });
            }
        }
    }
    Ok(())
}

fn gru_vars(lookup: &IndexMap<&str, Var>, prefix: &str) -> Result<GruVars> {
    let get = |n: &str| {
        let key = format!("{prefix}.{n}");
        lookup
            .get(key.as_str())
            .copied()
            .ok_or_else(|| ModelError::Param(key, "missing".into()))
    };
    Ok(GruVars {
        w_z: get("w_z")?,
        w_r: get("w_r")?,
        w_h: get("w_h")?,
        u_z: get("u_z")?,
        u_r: get("u_r")?,
        u_h: get("u_h")?,
        b_z: get("b_z")?,
        b_r: get("b_r")?,
        b_h: get("b_h")?,
    })
}

/// Adds every parameter to `g` as a trainable leaf, in registry order.
pub fn register_params(g: &mut Graph, params: &ModelParams) -> Vec<(String, Var)> {
    params
        .iter()
        .map(|(n, t)| (n.to_string(), g.param(t.clone())))
        .collect()
}

/// Builds the forward computation for one video on `g`.
pub fn forward_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    video: &VideoSample,
    params: &ModelParams,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<ForwardGraph> {
    let vars = register_params(g, params);
    forward_graph_with_params(g, video, vars, config, training, rng)
}

/// Like [`forward_graph`], with parameter leaves already on the graph.
pub fn forward_graph_with_params<R: Rng + ?Sized>(
    g: &mut Graph,
    video: &VideoSample,
    vars: Vec<(String, Var)>,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<ForwardGraph> {
    config.validate()?;
    check_video(video, config)?;
    let lookup: IndexMap<&str, Var> = vars.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let param = |name: &str| {
        lookup
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Param(name.into(), "missing".into()))
    };

    let mut enc = IndexMap::new();
    for m in config.modalities.encoding_order() {
        let bi = BiGruVars {
            forward: gru_vars(&lookup, &encoder_prefix(m, "fwd"))?,
            backward: gru_vars(&lookup, &encoder_prefix(m, "bwd"))?,
        };
        let x = g.constant(video.feature_matrix(m));
        enc.insert(m, bigru_graph(g, x, &bi)?);
    }

    let mut attention = Vec::new();
    let mut parts = Vec::new();
    if config.modalities.count() == 1 {
        let (&m, &x) = enc.first().expect("one modality");
        let a = self_attention_graph(g, x)?;
        parts.push(a.output);
        attention.push((pair_label(m, None), a));
    } else {
        for (a, b) in config.modalities.pairs() {
            let att = cim_attention_graph(g, enc[&a], enc[&b])?;
            parts.push(att.output);
            attention.push((pair_label(a, Some(b)), att));
        }
        parts.extend(enc.values().copied());
    }
    let rep = g.concat_cols(&parts)?;

    let mut h = if training {
        g.dropout(rep, config.dropout_rate, rng)?
    } else {
        rep
    };
    h = g.matmul(h, param("dense.weight")?)?;
    h = g.add_row(h, param("dense.bias")?)?;
    h = g.relu(h);

    let sentiment = if config.mode.has_sentiment() {
        let z = g.matmul(h, param("sentiment.weight")?)?;
        let z = g.add_row(z, param("sentiment.bias")?)?;
        Some(g.row_softmax(z)?)
    } else {
        None
    };
    let emotion = if config.mode.has_emotion() {
        let z = g.matmul(h, param("emotion.weight")?)?;
        let z = g.add_row(z, param("emotion.bias")?)?;
        Some(g.sigmoid(z))
    } else {
        None
    };
    Ok(ForwardGraph {
        params: vars,
        rep,
        sentiment,
        emotion,
        attention,
    })
}

impl ForwardGraph {
    pub fn output(&self, g: &Graph) -> ForwardOutput {
        ForwardOutput {
            sentiment_probs: self.sentiment.map(|v| g.value(v).clone()),
            emotion_probs: self.emotion.map(|v| g.value(v).clone()),
            attention: self
                .attention
                .iter()
                .map(|(l, a)| (l.clone(), a.record(g)))
                .collect(),
            rep_width: g.shape(self.rep).1,
        }
    }
}

pub fn forward<R: Rng + ?Sized>(
    video: &VideoSample,
    params: &ModelParams,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let fg = forward_graph(&mut g, video, params, config, training, rng)?;
    Ok(fg.output(&g))
}

/// Deterministic inference-mode forward pass.
pub fn infer(
    video: &VideoSample,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ForwardOutput> {
    // dropout is inactive, so the rng is never drawn from
    forward(
        video,
        params,
        config,
        false,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
}

/// Selects which task losses enter the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Objective {
    /// The loss implied by the config mode.
    #[default]
    Configured,
    SentimentOnly,
    EmotionOnly,
}

fn check_labels(video: &VideoSample) -> Result<()> {
    for u in &video.utterances {
        if u.sentiment > 1 || u.emotions.iter().any(|&b| b > 1) {
            return Err(ModelError::Label(format!(
                "utterance {} of video {}",
                u.utterance_id, video.video_id
            )));
        }
    }
    Ok(())
}

/// Adds the training loss for `video` to the graph.
///
/// Sentiment: mean categorical cross-entropy over utterances. Emotion: mean
/// binary cross-entropy over utterances and the seven classes. MTL:
/// `lambda * L_sent + (1 - lambda) * L_emo`.
pub fn loss_graph(
    g: &mut Graph,
    fg: &ForwardGraph,
    video: &VideoSample,
    config: &ModelConfig,
    objective: Objective,
) -> Result<Var> {
    check_labels(video)?;
    let sent = |g: &mut Graph| -> Result<Var> {
        let p = fg
            .sentiment
            .ok_or_else(|| ModelError::Config("model has no sentiment head".into()))?;
        Ok(g.cross_entropy(p, video.sentiment_targets())?)
    };
    let emo = |g: &mut Graph| -> Result<Var> {
        let p = fg
            .emotion
            .ok_or_else(|| ModelError::Config("model has no emotion head".into()))?;
        Ok(g.binary_cross_entropy(p, video.emotion_targets())?)
    };
    match (objective, config.mode) {
        (Objective::SentimentOnly, _) | (Objective::Configured, TaskMode::StlSentiment) => sent(g),
        (Objective::EmotionOnly, _) | (Objective::Configured, TaskMode::StlEmotion) => emo(g),
        (Objective::Configured, TaskMode::Mtl) => {
            let lambda = config.loss_weight_lambda;
            let ls = sent(g)?;
            let le = emo(g)?;
            let ls = g.scale(ls, lambda);
            let le = g.scale(le, 1.0 - lambda);
            Ok(g.add(ls, le)?)
        }
    }
}

/// Loss value of an already computed forward output.
pub fn loss(out: &ForwardOutput, video: &VideoSample, config: &ModelConfig) -> Result<f64> {
    check_labels(video)?;
    let mut g = Graph::new();
    let fg = ForwardGraph {
        params: Vec::new(),
        rep: g.constant(Tensor::zeros(0, 0)),
        sentiment: out.sentiment_probs.clone().map(|t| g.constant(t)),
        emotion: out.emotion_probs.clone().map(|t| g.constant(t)),
        attention: Vec::new(),
    };
    let l = loss_graph(&mut g, &fg, video, config, Objective::Configured)?;
    Ok(g.value(l).get(0, 0))
}

/// Per-parameter gradients keyed by registry name.
pub type Gradients = IndexMap<String, Tensor>;

/// Forward, loss and backward for one video.
pub fn loss_and_grads<R: Rng + ?Sized>(
    video: &VideoSample,
    params: &ModelParams,
    config: &ModelConfig,
    objective: Objective,
    training: bool,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let fg = forward_graph(&mut g, video, params, config, training, rng)?;
    let l = loss_graph(&mut g, &fg, video, config, objective)?;
    g.backward(l)?;
    let grads = fg
        .params
        .iter()
        .map(|(n, v)| {
            let grad = g.grad(*v).cloned().unwrap_or_else(|| {
                let (r, c) = g.shape(*v);
                Tensor::zeros(r, c)
            });
            (n.clone(), grad)
        })
        .collect();
    Ok((g.value(l).get(0, 0), grads))
}

/// Finite-difference check of the loss gradient with respect to every
/// parameter, in inference mode. Returns the worst relative error.
pub fn model_grad_check(
    video: &VideoSample,
    params: &ModelParams,
    config: &ModelConfig,
    objective: Objective,
    eps: f64,
) -> Result<f64> {
    let names: Vec<String> = params.names().map(String::from).collect();
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let as_tensor_err = |e: ModelError| match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "model",
            msg: other.to_string(),
        },
    };
    let err = crate::tensor::grad_check(
        |g, xs| {
            let vars = names.iter().cloned().zip(xs.iter().copied()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let fg = forward_graph_with_params(g, video, vars, config, false, &mut rng)
                .map_err(as_tensor_err)?;
            loss_graph(g, &fg, video, config, objective).map_err(as_tensor_err)
        },
        &inputs,
        eps,
    )?;
    Ok(err)
}

/// Thresholded predictions for one video.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predictions {
    /// 0 = negative, 1 = positive.
    pub sentiment: Option<Vec<u8>>,
    /// Emotion class indices per utterance; may be empty.
    pub emotions: Option<Vec<Vec<usize>>>,
}

/// Sentiment argmax (ties go to positive) and emotion sets
/// `{c : prob_c > threshold}`.
pub fn predict(out: &ForwardOutput, threshold: f64) -> Predictions {
    let sentiment = out.sentiment_probs.as_ref().map(|p| {
        (0..p.rows())
            .map(|r| u8::from(p.get(r, 1) >= p.get(r, 0)))
            .collect()
    });
    let emotions = out.emotion_probs.as_ref().map(|p| {
        (0..p.rows())
            .map(|r| {
                let row: [f64; NUM_EMOTIONS] = p.row(r).try_into().expect("7 emotion columns");
                threshold_labels(&row, threshold)
                    .iter()
                    .enumerate()
                    .filter_map(|(c, &on)| on.then_some(c))
                    .collect()
            })
            .collect()
    });
    Predictions {
        sentiment,
        emotions,
    }
}
