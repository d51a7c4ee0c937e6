//! `.gvol` container: a line-oriented UTF-8 header terminated by a blank line,
//! followed by a raw little-endian buffer in `[C,] D, H, W` order (W fastest).
//!
//! ```text
//! shape=1,32,32,32
//! spacing=1,1,1
//! dtype=f32
//! modality=SYNTH
//!
//! <raw bytes>
//! ```
//!
//! Label maps use `dtype=u8` and carry `num_classes` (and optionally an
//! `available` mask); deformation fields are `f32` images with `C = 3` and
//! `field=phi`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelMap, Modality, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub shape: Vec<usize>,
    pub spacing: [f64; 3],
    pub dtype: Dtype,
    pub modality: Modality,
    pub num_classes: Option<usize>,
    pub available: Option<Vec<bool>>,
    pub field: Option<String>,
}

impl Header {
    fn payload_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.size()
    }

    fn render(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let mut s = String::new();
        let shape: Vec<String> = self.shape.iter().map(|v| v.to_string()).collect();
        let spacing: Vec<String> = self.spacing.iter().map(|v| v.to_string()).collect();
        writeln!(s, "shape={}", join(&shape)).unwrap();
        writeln!(s, "spacing={}", join(&spacing)).unwrap();
        let dtype = match self.dtype {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        };
        writeln!(s, "dtype={dtype}").unwrap();
        writeln!(s, "modality={}", self.modality).unwrap();
        if let Some(k) = self.num_classes {
            writeln!(s, "num_classes={k}").unwrap();
        }
        if let Some(av) = &self.available {
            let av: Vec<String> = av.iter().map(|&b| u8::from(b).to_string()).collect();
            writeln!(s, "available={}", join(&av)).unwrap();
        }
        if let Some(f) = &self.field {
            writeln!(s, "field={f}").unwrap();
        }
        s.push('\n');
        s
    }

    fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::MalformedHeader(m);
        let mut shape = None;
        let mut spacing = None;
        let mut dtype = None;
        let mut modality = None;
        let mut num_classes = None;
        let mut available = None;
        let mut field = None;
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::MalformedHeader(format!("bad {key} entry `{p}`")))
                })
                .collect()
        }
        for line in text.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line without `=`: `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "shape" => shape = Some(list::<usize>(key, value)?),
                "spacing" => {
                    let s = list::<f64>(key, value)?;
                    let s: [f64; 3] = s
                        .try_into()
                        .map_err(|_| bad("spacing needs three entries".into()))?;
                    spacing = Some(s);
                }
                "dtype" => {
                    dtype = Some(match value {
                        "f32" => Dtype::F32,
                        "u8" => Dtype::U8,
                        other => return Err(bad(format!("unknown dtype `{other}`"))),
                    })
                }
                "modality" => {
                    modality = Some(
                        value
                            .parse()
                            .map_err(|_| bad(format!("unknown modality `{value}`")))?,
                    )
                }
                "num_classes" => {
                    num_classes = Some(
                        value
                            .parse()
                            .map_err(|_| bad(format!("bad num_classes `{value}`")))?,
                    )
                }
                "available" => {
                    available = Some(
                        list::<u8>(key, value)?
                            .into_iter()
                            .map(|b| b != 0)
                            .collect(),
                    )
                }
                "field" => field = Some(value.to_string()),
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        let shape: Vec<usize> = shape.ok_or_else(|| bad("missing `shape`".into()))?;
        if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
            return Err(bad(format!("invalid shape {shape:?}")));
        }
        Ok(Header {
            shape,
            spacing: spacing.ok_or_else(|| bad("missing `spacing`".into()))?,
            dtype: dtype.ok_or_else(|| bad("missing `dtype`".into()))?,
            modality: modality.ok_or_else(|| bad("missing `modality`".into()))?,
            num_classes,
            available,
            field,
        })
    }
}

/// Contents of a `.gvol` file.
#[derive(Clone, Debug, PartialEq)]
pub enum Gvol {
    Image(Volume),
    Labels(LabelMap),
}

pub fn encode(header: &Header, payload: &[u8]) -> Vec<u8> {
    let mut out = header.render().into_bytes();
    out.extend_from_slice(payload);
    out
}

/// Splits raw file bytes into a parsed header and the exact-length payload.
pub fn decode(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::MalformedHeader("no blank line terminating the header".into()))?;
    let text = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
    let header = Header::parse(text)?;
    let payload = &bytes[split + 2..];
    let expected = header.payload_len();
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
    Ok((header, payload))
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_from(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn volume_bytes(v: &Volume, field: Option<&str>) -> Vec<u8> {
    let header = Header {
        shape: v.data.shape().to_vec(),
        spacing: v.spacing,
        dtype: Dtype::F32,
        modality: v.modality,
        num_classes: None,
        available: None,
        field: field.map(str::to_string),
    };
    encode(&header, &f32_bytes(v.data.data()))
}

pub fn labels_bytes(l: &LabelMap, modality: Modality) -> Vec<u8> {
    let header = Header {
        shape: l.shape().to_vec(),
        spacing: l.spacing,
        dtype: Dtype::U8,
        modality,
        num_classes: Some(l.num_classes()),
        available: l
            .available()
            .iter()
            .any(|a| !a)
            .then(|| l.available().to_vec()),
        field: None,
    };
    encode(&header, l.labels())
}

pub fn parse_gvol(bytes: &[u8]) -> Result<Gvol> {
    let (h, payload) = decode(bytes)?;
    match h.dtype {
        Dtype::F32 => {
            let data = f32_from(payload);
            let shape = match h.shape.len() {
                4 => h.shape.clone(),
                3 => [&[1][..], &h.shape].concat(),
                _ => return Err(Error::MalformedHeader(format!("image shape {:?}", h.shape))),
            };
            let t = Tensor::new(shape, data)?;
            Ok(Gvol::Image(Volume::new(t, h.spacing, h.modality)?))
        }
        Dtype::U8 => {
            let k = h
                .num_classes
                .ok_or_else(|| Error::MalformedHeader("label map without `num_classes`".into()))?;
            let shape: [usize; 3] = h
                .shape
                .as_slice()
                .try_into()
                .map_err(|_| Error::MalformedHeader(format!("label shape {:?}", h.shape)))?;
            let available = h.available.unwrap_or_else(|| vec![true; k]);
            Ok(Gvol::Labels(LabelMap::with_availability(
                payload.to_vec(),
                shape,
                k,
                available,
                h.spacing,
            )?))
        }
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<Gvol> {
    parse_gvol(&read(path.as_ref())?)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &volume_bytes(v, None))
}

pub fn save_labels(l: &LabelMap, modality: Modality, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &labels_bytes(l, modality))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match load(path.as_ref())? {
        Gvol::Image(v) => Ok(v),
        Gvol::Labels(_) => Err(Error::Invalid(format!(
            "{} holds a label map, expected an image",
            path.as_ref().display()
        ))),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    match load(path.as_ref())? {
        Gvol::Labels(l) => Ok(l),
        Gvol::Image(_) => Err(Error::Invalid(format!(
            "{} holds an image, expected a label map",
            path.as_ref().display()
        ))),
    }
}

/// Saves a `[3, D, H, W]` sampling field with the `field=phi` marker.
pub fn save_field(phi: &Tensor<f32>, spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    let v = Volume::new(phi.clone(), spacing, Modality::Synth)?;
    write(path.as_ref(), &volume_bytes(&v, Some("phi")))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let bytes = read(path.as_ref())?;
    let (h, _) = decode(&bytes)?;
    if h.field.as_deref() != Some("phi") || h.shape.first() != Some(&3) || h.shape.len() != 4 {
        return Err(Error::Invalid(format!(
            "{} is not a deformation field",
            path.as_ref().display()
        )));
    }
    match parse_gvol(&bytes)? {
        Gvol::Image(v) => Ok(v.data),
        Gvol::Labels(_) => unreachable!("field header is f32"),
    }
}
