//! The `UAOM` weight container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 0..4  | magic `UAOM` |
//! | 4..8  | version, `u32` (= 1) |
//! | 8..16 | header length `N`, `u64` |
//! | 16..16+N | UTF-8 JSON header |
//! | ... | padding to a multiple of 4 (the writer pads the JSON with spaces instead) |
//! | ... | `f32` payloads in manifest order |
//! | optional | `u64` length `M`, then `M` bytes of JSON `{"reference_activations": [...]}` |
//!
//! The header lists, in order, `input_spec`, `layers`, `taps`, an optional
//! `output` marker, an optional `fixture_seed`, and the `tensors` manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uaom_core::network::{InputSpec, Layer, NetworkModel};
use uaom_core::{ConvLayerSpec, Tensor};

use crate::error::{ContainerError, Error, Result};

pub const MAGIC: &[u8; 4] = b"UAOM";
pub const VERSION: u32 = 1;
/// Absolute tolerance of the load-time self-check.
pub const SELF_CHECK_TOLERANCE: f32 = 1e-4;
/// Reference output name for the end-to-end (post-normalization) result.
pub const OUTPUT_TAP: &str = "output";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpecJson {
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LayerJson {
    #[serde(rename = "conv")]
    Conv {
        name: String,
        /// `[out, in, kh, kw]`.
        shape: [usize; 4],
        has_relu: bool,
        stride: usize,
        padding: usize,
        weight: String,
        bias: String,
    },
    #[serde(rename = "max_pool2")]
    MaxPool2 { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputJson {
    pub unit_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub input_spec: InputSpecJson,
    pub layers: Vec<LayerJson>,
    pub taps: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_seed: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayJson {
    /// `[height, width, channels]`.
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl ArrayJson {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: [t.height(), t.width(), t.channels()],
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> std::result::Result<Tensor, ContainerError> {
        let [h, w, c] = self.shape;
        Tensor::new(h, w, c, self.data.clone()).map_err(|e| ContainerError::Header(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapOutput {
    /// A tap label, or [`OUTPUT_TAP`] for the full forward pass.
    pub tap: String,
    #[serde(flatten)]
    pub value: ArrayJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceActivation {
    /// Raw input, before the container's normalization.
    pub input: ArrayJson,
    pub outputs: Vec<TapOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReferenceBlock {
    reference_activations: Vec<ReferenceActivation>,
}

/// A decoded container.
#[derive(Debug, Clone)]
pub struct Container {
    pub header: Header,
    pub model: NetworkModel,
    pub references: Vec<ReferenceActivation>,
}

fn align4(n: u64) -> u64 {
    n.div_ceil(4) * 4
}

/// Builds the header and payload for `model`.
pub fn encode(
    model: &NetworkModel,
    references: &[ReferenceActivation],
    fixture_seed: Option<u64>,
) -> Result<Vec<u8>> {
    let spec = model.input_spec();
    let mut layers = Vec::new();
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for layer in model.layers() {
        match layer {
            Layer::Conv { name, spec } => {
                let shape = [spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w];
                let (wname, bname) = (format!("{name}.weight"), format!("{name}.bias"));
                layers.push(LayerJson::Conv {
                    name: name.clone(),
                    shape,
                    has_relu: spec.has_relu,
                    stride: spec.stride,
                    padding: spec.padding,
                    weight: wname.clone(),
                    bias: bname.clone(),
                });
                tensors.push(TensorEntry {
                    name: wname,
                    dtype: "f32".into(),
                    shape: shape.to_vec(),
                });
                tensors.push(TensorEntry {
                    name: bname,
                    dtype: "f32".into(),
                    shape: vec![spec.out_channels],
                });
                for v in spec.weights().iter().chain(spec.bias()) {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            Layer::MaxPool { name } => layers.push(LayerJson::MaxPool2 { name: name.clone() }),
        }
    }
    let header = Header {
        input_spec: InputSpecJson {
            channels: spec.channels,
            height: spec.height,
            width: spec.width,
            mean: spec.mean.clone(),
            std: spec.std.clone(),
        },
        layers,
        taps: model.taps().iter().map(|t| t.label.clone()).collect(),
        output: Some(OutputJson {
            unit_norm: model.unit_norm_output(),
        }),
        fixture_seed,
        tensors,
    };
    let mut json = serde_json::to_vec(&header)?;
    while (16 + json.len()) % 4 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    if !references.is_empty() {
        let block = serde_json::to_vec(&ReferenceBlock {
            reference_activations: references.to_vec(),
        })?;
        out.extend_from_slice(&(block.len() as u64).to_le_bytes());
        out.extend_from_slice(&block);
    }
    Ok(out)
}

fn read_u64(bytes: &[u8], at: usize, what: &str) -> std::result::Result<u64, ContainerError> {
    let slice = bytes.get(at..at + 8).ok_or_else(|| ContainerError::ByteLength {
        what: what.into(),
        expected: (at + 8) as u64,
        found: bytes.len() as u64,
    })?;
    Ok(u64::from_le_bytes(slice.try_into().expect("8 bytes")))
}

/// Parses container bytes and builds the model. Does not run the
/// self-check; see [`self_check`].
pub fn decode(bytes: &[u8]) -> std::result::Result<Container, ContainerError> {
    if bytes.len() < 4 {
        return Err(ContainerError::ByteLength {
            what: "preamble".into(),
            expected: 16,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    if bytes.len() < 16 {
        return Err(ContainerError::ByteLength {
            what: "preamble".into(),
            expected: 16,
            found: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let n = read_u64(bytes, 8, "header length")?;
    let header_end = 16u64.checked_add(n).filter(|e| *e <= bytes.len() as u64).ok_or(
        ContainerError::ByteLength {
            what: "header".into(),
            expected: 16u64.saturating_add(n),
            found: bytes.len() as u64,
        },
    )?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end as usize])
        .map_err(|e| ContainerError::Header(e.to_string()))?;

    let mut offset = align4(header_end);
    let mut payloads: Vec<(String, Vec<f32>)> = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        if t.dtype != "f32" {
            return Err(ContainerError::UnknownDtype {
                tensor: t.name.clone(),
                dtype: t.dtype.clone(),
            });
        }
        let count: usize = t.shape.iter().product();
        let len = count as u64 * 4;
        let end = offset + len;
        if end > bytes.len() as u64 {
            return Err(ContainerError::ByteLength {
                what: format!("tensor {}", t.name),
                expected: len,
                found: (bytes.len() as u64).saturating_sub(offset),
            });
        }
        let data = bytes[offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        payloads.push((t.name.clone(), data));
        offset = end;
    }

    let mut references = Vec::new();
    let rest = bytes.len() as u64 - offset;
    if rest > 0 {
        let m = read_u64(bytes, offset as usize, "reference block length")?;
        if rest != 8 + m {
            return Err(ContainerError::ByteLength {
                what: "reference block".into(),
                expected: m,
                found: rest.saturating_sub(8),
            });
        }
        let start = offset as usize + 8;
        let block: ReferenceBlock = serde_json::from_slice(&bytes[start..])
            .map_err(|e| ContainerError::Header(format!("reference block: {e}")))?;
        references = block.reference_activations;
    }

    let model = build_model(&header, &payloads)?;
    Ok(Container {
        header,
        model,
        references,
    })
}

fn build_model(
    header: &Header,
    payloads: &[(String, Vec<f32>)],
) -> std::result::Result<NetworkModel, ContainerError> {
    let find = |name: &str, shape: &[usize]| -> std::result::Result<Vec<f32>, ContainerError> {
        let idx = header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| ContainerError::Header(format!("tensor {name} is not in the manifest")))?;
        let entry = &header.tensors[idx];
        if entry.shape != shape {
            let declared: usize = entry.shape.iter().product();
            let wanted: usize = shape.iter().product();
            return Err(ContainerError::ByteLength {
                what: format!("tensor {name} (shape {:?} vs layer {:?})", entry.shape, shape),
                expected: wanted as u64 * 4,
                found: declared as u64 * 4,
            });
        }
        Ok(payloads[idx].1.clone())
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    for l in &header.layers {
        layers.push(match l {
            LayerJson::Conv {
                name,
                shape,
                has_relu,
                stride,
                padding,
                weight,
                bias,
            } => {
                let w = find(weight, shape)?;
                let b = find(bias, &[shape[0]])?;
                let spec = ConvLayerSpec::new(
                    shape[0], shape[1], shape[2], shape[3], *stride, *padding, *has_relu, w, b,
                )
                .map_err(ContainerError::Model)?;
                Layer::Conv {
                    name: name.clone(),
                    spec,
                }
            }
            LayerJson::MaxPool2 { name } => Layer::MaxPool { name: name.clone() },
        });
    }
    for tap in &header.taps {
        if !header.layers.iter().any(|l| match l {
            LayerJson::Conv { name, .. } | LayerJson::MaxPool2 { name } => name == tap,
        }) {
            return Err(ContainerError::MissingTap(tap.clone()));
        }
    }
    let s = &header.input_spec;
    let input = InputSpec {
        channels: s.channels,
        height: s.height,
        width: s.width,
        mean: s.mean.clone(),
        std: s.std.clone(),
    };
    let unit_norm = header.output.as_ref().is_some_and(|o| o.unit_norm);
    NetworkModel::new(input, layers, &header.taps, unit_norm).map_err(ContainerError::Model)
}

/// Runs the model on `input` and returns the outputs named in `taps`.
pub fn evaluate_taps(model: &NetworkModel, input: &Tensor, taps: &[&str]) -> Result<Vec<Tensor>> {
    let prepared = model.prepare_input(input)?;
    let tapped = model.forward_taps(&prepared)?;
    let mut out = Vec::with_capacity(taps.len());
    for name in taps {
        if *name == OUTPUT_TAP {
            let mut y = model.run_layers(&prepared, 0..model.layers().len())?;
            if model.unit_norm_output() {
                let (h, w, c) = (y.height(), y.width(), y.channels());
                let set = uaom_core::features::DescriptorSet::from_raw_rows(c, y.into_data())?;
                y = Tensor::new(h, w, c, set.data().to_vec())?;
            }
            out.push(y);
        } else {
            let idx = model
                .taps()
                .iter()
                .position(|t| t.label == *name)
                .ok_or_else(|| Error::Config(format!("missing tap {name}")))?;
            out.push(tapped[idx].clone());
        }
    }
    Ok(out)
}

/// Re-runs every stored reference and compares within
/// [`SELF_CHECK_TOLERANCE`]. Returns the largest absolute error seen.
pub fn self_check(c: &Container) -> std::result::Result<f32, ContainerError> {
    let mut worst = 0.0f32;
    for r in &c.references {
        let input = r.input.to_tensor()?;
        let names: Vec<&str> = r.outputs.iter().map(|o| o.tap.as_str()).collect();
        let got = evaluate_taps(&c.model, &input, &names)
            .map_err(|e| ContainerError::Header(format!("reference input rejected: {e}")))?;
        for (o, g) in r.outputs.iter().zip(&got) {
            let want = o.value.to_tensor()?;
            if want.data().len() != g.data().len() {
                return Err(ContainerError::SelfCheck {
                    output: o.tap.clone(),
                    max_err: f32::INFINITY,
                    tolerance: SELF_CHECK_TOLERANCE,
                });
            }
            let err = want
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            if err > SELF_CHECK_TOLERANCE {
                return Err(ContainerError::SelfCheck {
                    output: o.tap.clone(),
                    max_err: err,
                    tolerance: SELF_CHECK_TOLERANCE,
                });
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Reads, decodes and self-checks a container file.
pub fn load_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let wrap = |source| Error::Container {
        path: path.to_path_buf(),
        source,
    };
    let c = decode(&bytes).map_err(wrap)?;
    self_check(&c).map_err(wrap)?;
    Ok(c)
}

/// Loads the network from a container file, running its self-check.
pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    Ok(load_container(path)?.model)
}

pub fn write_container(
    path: impl AsRef<Path>,
    model: &NetworkModel,
    references: &[ReferenceActivation],
    fixture_seed: Option<u64>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model, references, fixture_seed)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
