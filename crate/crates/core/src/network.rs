//! Linear conv/pool networks with named activation taps.
//!
//! A [`NetworkModel`] is a validated chain of convolution and 2x2 max-pool
//! layers. Backbones expose five taps (shallow to deep) that form a
//! [`FeaturePyramid`]; descriptor networks are run end to end and optionally
//! L2-normalize their flattened output.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_backward_input, max_pool2_backward, max_pool2_with_indices, ConvLayerSpec,
    Tensor,
};

/// Number of pyramid levels a backbone must expose.
pub const PYRAMID_LEVELS: usize = 5;

/// Smallest image side a five-level pyramid accepts.
pub const MIN_PYRAMID_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { name: String, spec: ConvLayerSpec },
    MaxPool { name: String },
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv { name, .. } | Layer::MaxPool { name } => name,
        }
    }

    fn apply(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv { spec, .. } => conv2d(input, spec),
            Layer::MaxPool { .. } => crate::tensor::max_pool2(input),
        }
    }
}

/// Expected input layout and per-channel normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub channels: usize,
    /// Fixed input height, when the network requires one (descriptors).
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub label: String,
    pub layer_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    input: InputSpec,
    layers: Vec<Layer>,
    taps: Vec<Tap>,
    unit_norm_output: bool,
}

/// Five tapped activations of one image, level 1 (shallow) first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub source_dims: (usize, usize),
}

impl FeaturePyramid {
    /// Feature map at `level` (1-based).
    pub fn level(&self, level: usize) -> &Tensor {
        &self.levels[level - 1]
    }
}

impl NetworkModel {
    /// Validates and assembles a model. `tap_labels` name layers by their
    /// `name`; taps must resolve to distinct layers in increasing depth.
    pub fn new(
        input: InputSpec,
        layers: Vec<Layer>,
        tap_labels: &[String],
        unit_norm_output: bool,
    ) -> Result<Self> {
        if input.channels == 0 {
            return Err(Error::InvalidModel("input must have at least one channel".into()));
        }
        if input.mean.len() != input.channels || input.std.len() != input.channels {
            return Err(Error::InvalidModel(
                "input normalization needs one mean and std per channel".into(),
            ));
        }
        if input.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || input.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidModel("input std must be positive and finite".into()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        let mut channels = input.channels;
        for layer in &layers {
            if let Layer::Conv { name, spec } = layer {
                if spec.in_channels != channels {
                    return Err(Error::InvalidModel(alloc::format!(
                        "layer {name} expects {} input channels but receives {channels}",
                        spec.in_channels
                    )));
                }
                channels = spec.out_channels;
            }
        }
        let mut taps = Vec::with_capacity(tap_labels.len());
        for label in tap_labels {
            let idx = layers
                .iter()
                .position(|l| l.name() == label)
                .ok_or_else(|| Error::InvalidModel(alloc::format!("missing tap {label}")))?;
            if let Some(prev) = taps.last() {
                let prev: &Tap = prev;
                if idx <= prev.layer_index {
                    return Err(Error::InvalidModel(alloc::format!(
                        "tap {label} is not deeper than tap {}",
                        prev.label
                    )));
                }
            }
            taps.push(Tap {
                label: label.clone(),
                layer_index: idx,
            });
        }
        Ok(Self {
            input,
            layers,
            taps,
            unit_norm_output,
        })
    }

    pub fn input_spec(&self) -> &InputSpec {
        &self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn unit_norm_output(&self) -> bool {
        self.unit_norm_output
    }

    /// Channel count produced by layer `index`.
    pub fn channels_after(&self, index: usize) -> usize {
        self.layers[..=index]
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv { spec, .. } => Some(spec.out_channels),
                Layer::MaxPool { .. } => None,
            })
            .unwrap_or(self.input.channels)
    }

    /// Channel count of the final layer.
    pub fn output_channels(&self) -> usize {
        self.channels_after(self.layers.len() - 1)
    }

    /// Replicates grayscale input when the model wants more channels and
    /// applies the per-channel normalization.
    pub fn prepare_input(&self, image: &Tensor) -> Result<Tensor> {
        let img = if image.channels() == self.input.channels {
            image.clone()
        } else if image.channels() == 1 {
            image.replicate_channels(self.input.channels)
        } else {
            return Err(Error::ChannelMismatch {
                expected: self.input.channels,
                got: image.channels(),
            });
        };
        if let (Some(h), Some(w)) = (self.input.height, self.input.width) {
            if img.dims() != (h, w) {
                return Err(Error::DimensionMismatch {
                    context: "network input",
                    expected: (h, w),
                    got: img.dims(),
                });
            }
        }
        let c = self.input.channels;
        let mut out = img;
        for px in out.data_mut().chunks_mut(c) {
            for (i, v) in px.iter_mut().enumerate() {
                *v = (*v - self.input.mean[i]) / self.input.std[i];
            }
        }
        Ok(out)
    }

    /// Runs layers `range` on an already prepared tensor.
    pub fn run_layers(&self, input: &Tensor, range: core::ops::Range<usize>) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers[range] {
            x = layer.apply(&x)?;
        }
        Ok(x)
    }

    /// Full forward pass on a prepared input, returning the output of every
    /// tap in tap order.
    pub fn forward_taps(&self, prepared: &Tensor) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(self.taps.len());
        let mut x = prepared.clone();
        let mut next_tap = 0;
        let last = self.taps.last().map(|t| t.layer_index).unwrap_or(0);
        for (i, layer) in self.layers.iter().enumerate().take(last + 1) {
            x = layer.apply(&x)?;
            if next_tap < self.taps.len() && self.taps[next_tap].layer_index == i {
                outs.push(x.clone());
                next_tap += 1;
            }
        }
        Ok(outs)
    }

    /// Prepares `image` and runs the whole network.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let x = self.prepare_input(image)?;
        self.run_layers(&x, 0..self.layers.len())
    }

    /// Runs the backbone and collects the five tapped feature maps.
    pub fn extract_pyramid(&self, image: &Tensor) -> Result<FeaturePyramid> {
        if self.taps.len() != PYRAMID_LEVELS {
            return Err(Error::InvalidModel(alloc::format!(
                "pyramid extraction needs {PYRAMID_LEVELS} taps, model has {}",
                self.taps.len()
            )));
        }
        let (h, w) = image.dims();
        if h < MIN_PYRAMID_SIDE || w < MIN_PYRAMID_SIDE {
            return Err(Error::Degenerate(alloc::format!(
                "image {h}x{w} is smaller than {MIN_PYRAMID_SIDE} px on a side"
            )));
        }
        let prepared = self.prepare_input(image)?;
        let levels = self.forward_taps(&prepared)?;
        for pair in levels.windows(2) {
            let (h0, w0) = pair[0].dims();
            if pair[1].dims() != (h0 / 2, w0 / 2) {
                return Err(Error::InvalidModel(alloc::format!(
                    "pyramid levels must halve: {:?} followed by {:?}",
                    pair[0].dims(),
                    pair[1].dims()
                )));
            }
        }
        if levels.iter().any(|t| !t.is_finite()) {
            return Err(Error::Degenerate("non-finite activations in pyramid".into()));
        }
        Ok(FeaturePyramid {
            levels,
            source_dims: (h, w),
        })
    }

    fn segment_bounds(&self, from_level: usize, to_level: usize) -> Result<(usize, usize)> {
        if self.taps.len() != PYRAMID_LEVELS {
            return Err(Error::InvalidModel("segments need a five-tap backbone".into()));
        }
        if !(1..PYRAMID_LEVELS).contains(&from_level) || to_level != from_level + 1 {
            return Err(Error::InvalidConfig(alloc::format!(
                "segment must go from level L to L+1 within 1..=5, got {from_level}->{to_level}"
            )));
        }
        Ok((
            self.taps[from_level - 1].layer_index + 1,
            self.taps[to_level - 1].layer_index + 1,
        ))
    }

    /// Maps a level-`from_level` feature map to level `to_level` by running
    /// the layers after the `from_level` tap up to and including the next tap.
    pub fn forward_segment(&self, input: &Tensor, from_level: usize, to_level: usize) -> Result<Tensor> {
        let (start, end) = self.segment_bounds(from_level, to_level)?;
        let expected = self.channels_after(start - 1);
        if input.channels() != expected {
            return Err(Error::ChannelMismatch {
                expected,
                got: input.channels(),
            });
        }
        self.run_layers(input, start..end)
    }

    /// Objective `||segment(input) - target||^2` and its gradient with respect to `input`.
    pub fn segment_objective_grad(
        &self,
        input: &Tensor,
        target: &Tensor,
        from_level: usize,
    ) -> Result<(f64, Tensor)> {
        let (start, end) = self.segment_bounds(from_level, from_level + 1)?;
        // forward with caches
        let mut acts: Vec<Tensor> = Vec::with_capacity(end - start + 1);
        let mut pool_idx: Vec<Option<Vec<u32>>> = Vec::with_capacity(end - start);
        acts.push(input.clone());
        for layer in &self.layers[start..end] {
            let x = acts.last().expect("non-empty");
            match layer {
                Layer::Conv { spec, .. } => {
                    let y = conv2d(x, spec)?;
                    acts.push(y);
                    pool_idx.push(None);
                }
                Layer::MaxPool { .. } => {
                    let (y, idx) = max_pool2_with_indices(x)?;
                    acts.push(y);
                    pool_idx.push(Some(idx));
                }
            }
        }
        let out = acts.last().expect("non-empty");
        if !out.same_shape(target) {
            return Err(Error::DimensionMismatch {
                context: "segment target",
                expected: out.dims(),
                got: target.dims(),
            });
        }
        let mut objective = 0.0f64;
        let mut grad_data = Vec::with_capacity(out.data().len());
        for (o, t) in out.data().iter().zip(target.data()) {
            let r = (*o as f64) - (*t as f64);
            objective += r * r;
            grad_data.push((2.0 * r) as f32);
        }
        let mut grad = Tensor::new(out.height(), out.width(), out.channels(), grad_data)?;
        for (k, layer) in self.layers[start..end].iter().enumerate().rev() {
            let x_in = &acts[k];
            let y_out = &acts[k + 1];
            grad = match layer {
                Layer::Conv { spec, .. } => {
                    if spec.has_relu {
                        for (g, y) in grad.data_mut().iter_mut().zip(y_out.data()) {
                            if *y <= 0.0 {
                                *g = 0.0;
                            }
                        }
                    }
                    conv2d_backward_input(&grad, spec, x_in.height(), x_in.width())?
                }
                Layer::MaxPool { .. } => max_pool2_backward(
                    &grad,
                    pool_idx[k].as_ref().expect("pool indices"),
                    x_in.height(),
                    x_in.width(),
                ),
            };
        }
        Ok((objective, grad))
    }

    /// Conv layers of the segment ending at `to_level`, in forward order.
    pub fn segment_convs(&self, from_level: usize) -> Result<Vec<&ConvLayerSpec>> {
        let (start, end) = self.segment_bounds(from_level, from_level + 1)?;
        Ok(self.layers[start..end]
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { spec, .. } => Some(spec),
                Layer::MaxPool { .. } => None,
            })
            .collect())
    }
}


#[cfg(test)]
mod tests {
    use super::test_models::tiny_backbone;
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(h, w, 1, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn pyramid_dims_halve() {
        let m = tiny_backbone(1);
        let p = m.extract_pyramid(&random_image(2, 64, 64)).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|t| t.dims()).collect();
        assert_eq!(dims, vec![(64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]);
        let p2 = m.extract_pyramid(&random_image(2, 64, 64)).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn pyramid_rejects_small_images() {
        let m = tiny_backbone(1);
        assert!(m.extract_pyramid(&random_image(2, 31, 64)).is_err());
    }

    #[test]
    fn segments_compose_to_pyramid() {
        let m = tiny_backbone(3);
        let p = m.extract_pyramid(&random_image(5, 48, 40)).unwrap();
        for l in 2..=5 {
            let s = m.forward_segment(p.level(l - 1), l - 1, l).unwrap();
            assert_eq!(&s, p.level(l));
        }
    }

    #[test]
    fn segment_errors() {
        let m = tiny_backbone(3);
        assert!(m.forward_segment(&Tensor::zeros(8, 8, 4), 1, 3).is_err());
        assert!(matches!(
            m.forward_segment(&Tensor::zeros(8, 8, 5), 1, 2),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn missing_or_unordered_taps() {
        let m = tiny_backbone(1);
        let input = m.input_spec().clone();
        let layers = m.layers().to_vec();
        let err = NetworkModel::new(input.clone(), layers.clone(), &["nope".into()], false).unwrap_err();
        assert!(alloc::format!("{err}").contains("nope"));
        assert!(NetworkModel::new(input, layers, &["relu2_1".into(), "relu1_1".into()], false).is_err());
    }

    #[test]
    fn channel_chain_is_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = vec![
            test_models::conv(&mut rng, "a", 3, 4, true),
            test_models::conv(&mut rng, "b", 5, 4, true),
        ];
        let input = InputSpec {
            channels: 3,
            height: None,
            width: None,
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        assert!(NetworkModel::new(input, layers, &[], false).is_err());
    }

    #[test]
    fn objective_grad_matches_finite_differences() {
        let m = tiny_backbone(7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(8, 8, 4, |_, _, _| rng.random_range(0.0..1.0));
        let target = Tensor::from_fn(4, 4, 6, |_, _, _| rng.random_range(0.0..0.5));
        let (_, g) = m.segment_objective_grad(&x, &target, 1).unwrap();
        let h = 1e-3f32;
        for _ in 0..10 {
            let i = rng.random_range(0..x.data().len());
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let (fp, _) = m.segment_objective_grad(&xp, &target, 1).unwrap();
            let (fm, _) = m.segment_objective_grad(&xm, &target, 1).unwrap();
            let fd = (fp - fm) / (2.0 * h as f64);
            let an = g.data()[i] as f64;
            assert!((fd - an).abs() <= 2e-2 * an.abs().max(fd.abs()).max(1e-2), "{fd} vs {an}");
        }
    }
}
