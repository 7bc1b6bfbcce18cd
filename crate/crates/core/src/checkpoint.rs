//! Textual parameter checkpoints.
//!
//! ```text
//! mtmm-es-checkpoint 1
//! config {"d":100,...}
//! tensors <count>
//! tensor <name> <rows> <cols>
//! <row 0 values, space separated>
//! ...
//! end
//! ```
//!
//! Values are written with 17 significant digits (`{:.16e}`), which
//! round-trips every `f64` exactly.

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const MAGIC: &str = "mtmm-es-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint or unsupported version: {0}")]
    Version(String),
    #[error("checkpoint line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

pub fn to_string(params: &ModelParams, config: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} {VERSION}");
    let _ = writeln!(
        s,
        "config {}",
        serde_json::to_string(config).expect("config serializes")
    );
    let _ = writeln!(s, "tensors {}", params.len());
    for (name, t) in params.iter() {
        let _ = writeln!(s, "tensor {name} {} {}", t.rows(), t.cols());
        for r in 0..t.rows() {
            let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
    }
    s.push_str("end\n");
    s
}

pub fn from_str(text: &str) -> Result<(ModelParams, ModelConfig)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| CheckpointError::Format {
            line: 0,
            msg: format!("unexpected end of file, expected {what}"),
        })
    };
    let fmt_err = |line: usize, msg: String| CheckpointError::Format { line, msg };

    let (_, head) = next("header").map_err(|_| CheckpointError::Version("empty file".into()))?;
    let mut parts = head.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(CheckpointError::Version(format!("bad header {head:?}")));
    }
    match parts.next().map(str::parse::<u32>) {
        Some(Ok(VERSION)) => {}
        _ => return Err(CheckpointError::Version(format!("bad header {head:?}"))),
    }

    let (ln, cfg) = next("config")?;
    let cfg = cfg
        .strip_prefix("config ")
        .ok_or_else(|| fmt_err(ln, "expected config line".into()))?;
    let config: ModelConfig =
        serde_json::from_str(cfg).map_err(|e| fmt_err(ln, format!("config: {e}")))?;

    let (ln, count) = next("tensor count")?;
    let count: usize = count
        .strip_prefix("tensors ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| fmt_err(ln, "expected `tensors <count>`".into()))?;

    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let (ln, head) = next("tensor header")?;
        let fields: Vec<&str> = head.split_whitespace().collect();
        let (name, rows, cols) = match fields.as_slice() {
            ["tensor", name, r, c] => match (r.parse::<usize>(), c.parse::<usize>()) {
                (Ok(r), Ok(c)) => (name.to_string(), r, c),
                _ => return Err(fmt_err(ln, format!("bad tensor shape in {head:?}"))),
            },
            _ => return Err(fmt_err(ln, format!("expected tensor header, got {head:?}"))),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, row) = next("tensor row")?;
            let before = data.len();
            for tok in row.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| fmt_err(ln, format!("bad number {tok:?}")))?;
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(fmt_err(
                    ln,
                    format!(
                        "{name}: expected {cols} values, got {}",
                        data.len() - before
                    ),
                ));
            }
        }
        let t = Tensor::new(rows, cols, data).map_err(|e| fmt_err(ln, e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(fmt_err(ln, format!("duplicate tensor {name}")));
        }
    }
    let (ln, end) = next("end")?;
    if end.trim() != "end" {
        return Err(fmt_err(ln, format!("expected `end`, got {end:?}")));
    }
    let params = ModelParams::from_named(&config, tensors)?;
    Ok((params, config))
}

pub fn save(params: &ModelParams, config: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_string(params, config)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelParams, ModelConfig)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dims;
    use crate::model::{build_model, TaskMode};
    use proptest::prelude::*;

    fn config() -> ModelConfig {
        ModelConfig {
            d: 3,
            dense_units: 4,
            modalities: "t,v".parse().unwrap(),
            ..ModelConfig::new(Dims::new(5, 4, 3))
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = config();
        let p = build_model(&c, 3).unwrap();
        let text = to_string(&p, &c);
        let (p2, c2) = from_str(&text).unwrap();
        assert_eq!(c2, c);
        for ((n1, a), (n2, b)) in p.iter().zip(p2.iter()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(to_string(&p2, &c2), text);
    }

    #[test]
    fn rejects_wrong_version_and_corruption() {
        let c = config();
        let text = to_string(&build_model(&c, 0).unwrap(), &c);
        let v2 = text.replacen("mtmm-es-checkpoint 1", "mtmm-es-checkpoint 2", 1);
        assert!(matches!(from_str(&v2), Err(CheckpointError::Version(_))));
        assert!(matches!(
            from_str("garbage"),
            Err(CheckpointError::Version(_))
        ));
        assert!(matches!(from_str(""), Err(CheckpointError::Version(_))));

        let truncated = &text[..text.len() / 2];
        assert!(from_str(truncated).is_err());
        let renamed = text.replace("dense.weight", "dense.w");
        assert!(matches!(from_str(&renamed), Err(CheckpointError::Model(_))));
        let mode = text.replace("\"mode\":\"mtl\"", "\"mode\":\"stl-sent\"");
        assert!(from_str(&mode).is_err());
    }

    #[test]
    fn stl_checkpoint_round_trip() {
        let c = ModelConfig {
            mode: TaskMode::StlEmotion,
            ..config()
        };
        let p = build_model(&c, 1).unwrap();
        let (p2, _) = from_str(&to_string(&p, &c)).unwrap();
        assert_eq!(p, p2);
    }

    proptest! {
        #[test]
        fn any_finite_value_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let c = config();
            let mut p = build_model(&c, 0).unwrap();
            p.get_mut("dense.bias").unwrap().set(0, 1, v);
            let (p2, _) = from_str(&to_string(&p, &c)).unwrap();
            prop_assert_eq!(p2.get("dense.bias").unwrap().get(0, 1).to_bits(), v.to_bits());
        }
    }
}
