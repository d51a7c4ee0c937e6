//! Checkpoint files: a text header followed by raw little-endian `f32`
//! parameter buffers in header order.
//!
//! ```text
//! symreg-checkpoint 1
//! step=300
//! net={"channels":[8,16,16],...}
//! config={...}
//! param=enc.0.conv.weight 8,1,3,3,3
//! ...
//!
//! <raw bytes>
//! ```

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{NetConfig, Parameters};
use crate::tensor::Tensor;

const MAGIC: &str = "symreg-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub net: NetConfig,
    /// Resolved run configuration, echoed for provenance.
    pub config: Option<serde_json::Value>,
    pub params: Parameters<f32>,
}

impl Checkpoint {
    pub fn new(
        step: u64,
        net: NetConfig,
        config: Option<&impl Serialize>,
        params: Parameters<f32>,
    ) -> Self {
        Self {
            step,
            net,
            config: config.and_then(|c| serde_json::to_value(c).ok()),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\nstep={}\n", self.step);
        head += &format!(
            "net={}\n",
            serde_json::to_string(&self.net).expect("net config serializes")
        );
        if let Some(c) = &self.config {
            head += &format!("config={c}\n");
        }
        for (name, t) in self.params.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head += &format!("param={name} {}\n", shape.join(","));
        }
        head.push('\n');
        let mut out = head.into_bytes();
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::MalformedHeader(m);
        let end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("missing blank line after header".into()))?;
        let head =
            std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let payload = &bytes[end + 2..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint file".into()));
        }
        let (mut step, mut net, mut config) = (None, None, None);
        let mut layout: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line `{line}`")))?;
            match key {
                "step" => {
                    step = Some(
                        value
                            .parse::<u64>()
                            .map_err(|e| bad(format!("step: {e}")))?,
                    )
                }
                "net" => {
                    net = Some(
                        serde_json::from_str::<NetConfig>(value)
                            .map_err(|e| bad(format!("net: {e}")))?,
                    )
                }
                "config" => {
                    config =
                        Some(serde_json::from_str(value).map_err(|e| bad(format!("config: {e}")))?)
                }
                "param" => {
                    let (name, shape) = value
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("param `{value}`")))?;
                    let shape = shape
                        .split(',')
                        .map(|s| s.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| bad(format!("shape of `{name}`: {e}")))?;
                    layout.push((name.to_string(), shape));
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        let expected: usize = layout
            .iter()
            .map(|(_, s)| 4 * s.iter().product::<usize>())
            .sum();
        if payload.len() < expected {
            return Err(Error::TruncatedBuffer {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::ByteCountMismatch {
                expected,
                found: payload.len(),
            });
        }
        let mut params = Parameters::default();
        let mut offset = 0;
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let data = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset += 4 * n;
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            step: step.ok_or_else(|| bad("missing step".into()))?,
            net: net.ok_or_else(|| bad("missing net".into()))?,
            config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Outcome of restoring weights by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RestoreReport {
    pub restored: Vec<String>,
    /// Checkpoint tensors with no same-named, same-shaped model parameter.
    pub unmatched: Vec<String>,
    /// Model parameters the checkpoint did not provide.
    pub missing: Vec<String>,
}

/// Copies every name- and shape-matched tensor from `source` into `params`.
pub fn restore(params: &mut Parameters<f32>, source: &Parameters<f32>) -> RestoreReport {
    let mut report = RestoreReport::default();
    for (name, t) in source.iter() {
        match params.get_mut(name) {
            Some(p) if p.shape() == t.shape() => {
                *p = t.clone();
                report.restored.push(name.clone());
            }
            _ => report.unmatched.push(name.clone()),
        }
    }
    report.missing = params
        .names()
        .filter(|n| {
            source
                .get(n)
                .is_none_or(|t| Some(t.shape()) != params.get(n).map(Tensor::shape))
        })
        .cloned()
        .collect();
    report
}

/// Restores matching weights from the checkpoint at `path`.
pub fn load_pretrained(
    params: &mut Parameters<f32>,
    path: impl AsRef<Path>,
) -> Result<RestoreReport> {
    let ckpt = Checkpoint::load(path)?;
    Ok(restore(params, &ckpt.params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_parameters;

    fn cfg() -> NetConfig {
        NetConfig::desk(&[4, 8])
    }

    #[test]
    fn round_trip_is_bitwise() {
        let params = init_parameters(&cfg(), 3).unwrap();
        let ckpt = Checkpoint::new(17, cfg(), Some(&serde_json::json!({"lr": 0.001})), params);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.config.unwrap()["lr"], 0.001);
    }

    #[test]
    fn truncated_payload_rejected() {
        let ckpt = Checkpoint::new(0, cfg(), None::<&()>, init_parameters(&cfg(), 0).unwrap());
        let mut bytes = ckpt.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::TruncatedBuffer { .. })
        ));
    }

    #[test]
    fn partial_restore_reports_extra_head() {
        let small = init_parameters(&cfg(), 1).unwrap();
        let big_cfg = NetConfig {
            ds_levels: 3,
            ..cfg()
        };
        let mut big = init_parameters(
            &NetConfig {
                ds_levels: 2,
                ..cfg()
            },
            2,
        )
        .unwrap();
        let src = init_parameters(&big_cfg, 5).unwrap();
        let report = restore(&mut big, &src);
        assert_eq!(
            report.unmatched,
            vec!["head.2.bias".to_string(), "head.2.weight".to_string()]
        );
        assert!(report.missing.is_empty());
        assert_eq!(big.get("enc.0.conv.weight"), src.get("enc.0.conv.weight"));
        let mut same = init_parameters(&cfg(), 9).unwrap();
        let r = restore(&mut same, &small);
        assert!(r.unmatched.is_empty() && r.missing.is_empty());
        assert_eq!(same, small);
    }
}
