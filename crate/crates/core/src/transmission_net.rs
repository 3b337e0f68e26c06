//! Pyramid densely-connected encoder-decoder estimating the transmission map.
//!
//! Encoder: 7×7/2 stem conv, 2× pool, then three dense blocks each followed by
//! a halving transition, ending at 1/32 resolution. Decoder: five dense blocks,
//! each followed by an up-sampling transition, with encoder features
//! concatenated in at matching resolutions. A four-level pyramid pooling module
//! feeds global context into the final 3×3 estimation conv.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::nn::{Bound, Conv, DenseBlock, DenseBlockSpec, Norm, ParamBuilder, ParameterSet};
use crate::physics::{ImageTensor, TransmissionMap};

/// Spatial reduction between input and bottleneck.
pub const BOTTLENECK_FACTOR: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmissionNetConfig {
    pub stem_channels: usize,
    pub encoder_blocks: Vec<DenseBlockSpec>,
    pub decoder_blocks: Vec<DenseBlockSpec>,
    /// Output channels of each decoder up-sampling transition.
    pub decoder_channels: Vec<usize>,
    /// Pooled-map sizes as fractions `1/d` of the decoder output; empty disables the pyramid.
    pub pyramid_scales: Vec<usize>,
    /// Resolutions (as `1/d`) at which encoder features are concatenated into the decoder.
    pub skip_connections: Vec<usize>,
}

impl Default for TransmissionNetConfig {
    fn default() -> Self {
        let block = DenseBlockSpec {
            num_layers: 4,
            growth_rate: 12,
        };
        TransmissionNetConfig {
            stem_channels: 16,
            encoder_blocks: vec![block; 3],
            decoder_blocks: vec![block; 5],
            decoder_channels: vec![64, 48, 32, 16, 16],
            pyramid_scales: vec![32, 16, 8, 4],
            skip_connections: vec![16, 8, 4, 2],
        }
    }
}

impl TransmissionNetConfig {
    /// Same network without the pyramid pooling module.
    pub fn without_pyramid(mut self) -> Self {
        self.pyramid_scales.clear();
        self
    }

    pub fn has_pyramid(&self) -> bool {
        !self.pyramid_scales.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 {
            return Err(Error::Config("stem_channels must be positive".into()));
        }
        if self.encoder_blocks.len() != 3 {
            return Err(Error::Config(format!(
                "encoder needs exactly 3 dense blocks, got {}",
                self.encoder_blocks.len()
            )));
        }
        if self.decoder_blocks.len() != 5 || self.decoder_channels.len() != 5 {
            return Err(Error::Config(
                "decoder needs exactly 5 dense blocks and 5 transition widths".into(),
            ));
        }
        if self.decoder_channels.contains(&0) {
            return Err(Error::Config("decoder_channels must be positive".into()));
        }
        for s in &self.pyramid_scales {
            if !s.is_power_of_two() || *s < 2 || *s > BOTTLENECK_FACTOR {
                return Err(Error::Config(format!(
                    "pyramid scale 1/{s} must be a power of two between 1/32 and 1/2"
                )));
            }
        }
        for s in &self.skip_connections {
            // Encoder features exist at 1/2 (stem), 1/4, 1/8 and 1/16.
            if ![2, 4, 8, 16].contains(s) {
                return Err(Error::Config(format!(
                    "skip connection at 1/{s} has no equal-resolution encoder feature"
                )));
            }
        }
        Ok(())
    }
}

/// Norm → ReLU → 1×1 conv → 2× average pool.
#[derive(Clone, Debug)]
struct DownTransition {
    norm: Norm,
    conv: Conv,
}

/// Norm → ReLU → 1×1 conv → 2× bilinear up-sampling → 3×3 conv.
#[derive(Clone, Debug)]
struct UpTransition {
    norm: Norm,
    squeeze: Conv,
    refine: Conv,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    /// Denominator of this stage's resolution.
    scale: usize,
    skip: bool,
    block: DenseBlock,
    up: UpTransition,
}

/// Multi-level average pooling with one-channel mixing per level.
#[derive(Clone, Debug)]
pub struct PyramidPool {
    scales: Vec<usize>,
    mixers: Vec<Conv>,
    pub in_channels: usize,
}

impl PyramidPool {
    pub fn new(b: &mut ParamBuilder, name: &str, in_channels: usize, scales: &[usize]) -> Result<Self> {
        let mixers = scales
            .iter()
            .map(|s| b.conv(&format!("{name}.mix{s}"), in_channels, 1, ConvGeom::new(1, 1, 0), true))
            .collect::<Result<Vec<_>>>()?;
        Ok(PyramidPool {
            scales: scales.to_vec(),
            mixers,
            in_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.scales.len()
    }

    /// Pooled-map extents `(h, w)` per level for a `h × w` feature map.
    pub fn level_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.scales.iter().map(|s| (h / s, w / s)).collect()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(x);
        let largest = self.scales.iter().copied().max().unwrap_or(1);
        if h < largest || w < largest || h % largest != 0 || w % largest != 0 {
            return Err(Error::Config(format!(
                "pyramid pooling needs feature maps divisible by {largest}, got {h}x{w}"
            )));
        }
        let mut parts = vec![x];
        for (scale, mixer) in self.scales.iter().zip(&self.mixers) {
            let pooled = g.avg_pool(x, *scale);
            let mixed = mixer.forward(g, p, pooled);
            let mixed = g.relu(mixed);
            parts.push(g.resize(mixed, h, w));
        }
        Ok(g.concat(&parts))
    }
}

#[derive(Clone, Debug)]
pub struct TransmissionNet {
    config: TransmissionNetConfig,
    stem: Conv,
    stem_norm: Norm,
    encoder: Vec<(DenseBlock, DownTransition)>,
    decoder: Vec<DecoderStage>,
    pyramid: Option<PyramidPool>,
    head: Conv,
}

/// Intermediate tensors of a forward pass, for shape introspection.
pub struct TransmissionForward {
    pub bottleneck: Var,
    pub decoder_features: Var,
    pub logits: Var,
    pub output: Var,
}

pub fn build_transmission_net(
    config: &TransmissionNetConfig,
    init_seed: u64,
) -> Result<(TransmissionNet, ParameterSet)> {
    config.validate()?;
    let mut b = ParamBuilder::new(init_seed);
    let stem = b.conv("stem.conv", 3, config.stem_channels, ConvGeom::new(7, 2, 3), false)?;
    let stem_norm = b.norm("stem.norm", config.stem_channels)?;

    // Channel count of encoder features at each resolution denominator.
    let mut skip_channels = vec![(2usize, config.stem_channels)];
    let mut c = config.stem_channels;
    let mut encoder = Vec::new();
    for (i, spec) in config.encoder_blocks.iter().enumerate() {
        let block = DenseBlock::new(&mut b, &format!("enc{i}.block"), c, *spec)?;
        skip_channels.push((4 << i, block.out_channels));
        let out = (block.out_channels / 2).max(1);
        let norm = b.norm(&format!("enc{i}.down.norm"), block.out_channels)?;
        let conv = b.conv(
            &format!("enc{i}.down.conv"),
            block.out_channels,
            out,
            ConvGeom::new(1, 1, 0),
            false,
        )?;
        encoder.push((block, DownTransition { norm, conv }));
        c = out;
    }

    let mut decoder = Vec::new();
    let mut scale = BOTTLENECK_FACTOR;
    for (i, (spec, &width)) in config
        .decoder_blocks
        .iter()
        .zip(&config.decoder_channels)
        .enumerate()
    {
        let skip = config.skip_connections.contains(&scale);
        if skip {
            let extra = skip_channels
                .iter()
                .find(|(s, _)| *s == scale)
                .map(|(_, ch)| *ch)
                .ok_or_else(|| Error::Config(format!("no encoder feature at 1/{scale}")))?;
            c += extra;
        }
        let block = DenseBlock::new(&mut b, &format!("dec{i}.block"), c, *spec)?;
        let norm = b.norm(&format!("dec{i}.up.norm"), block.out_channels)?;
        let squeeze = b.conv(
            &format!("dec{i}.up.squeeze"),
            block.out_channels,
            width,
            ConvGeom::new(1, 1, 0),
            false,
        )?;
        let refine = b.conv(&format!("dec{i}.up.refine"), width, width, ConvGeom::new(3, 1, 1), true)?;
        decoder.push(DecoderStage {
            scale,
            skip,
            block,
            up: UpTransition {
                norm,
                squeeze,
                refine,
            },
        });
        c = width;
        scale /= 2;
    }

    let pyramid = if config.has_pyramid() {
        let pp = PyramidPool::new(&mut b, "pyramid", c, &config.pyramid_scales)?;
        c = pp.out_channels();
        Some(pp)
    } else {
        None
    };
    let head = b.conv("head", c, 1, ConvGeom::new(3, 1, 1), true)?;

    let net = TransmissionNet {
        config: config.clone(),
        stem,
        stem_norm,
        encoder,
        decoder,
        pyramid,
        head,
    };
    Ok((net, b.finish()))
}

impl TransmissionNet {
    pub fn config(&self) -> &TransmissionNetConfig {
        &self.config
    }

    pub fn encoder_blocks(&self) -> impl Iterator<Item = &DenseBlock> {
        self.encoder.iter().map(|(b, _)| b)
    }

    pub fn decoder_blocks(&self) -> impl Iterator<Item = &DenseBlock> {
        self.decoder.iter().map(|s| &s.block)
    }

    pub fn pyramid(&self) -> Option<&PyramidPool> {
        self.pyramid.as_ref()
    }

    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % BOTTLENECK_FACTOR != 0 || w % BOTTLENECK_FACTOR != 0 {
            return Err(shape_err!(
                "transmission net input must be divisible by {BOTTLENECK_FACTOR}, got {h}x{w}"
            ));
        }
        Ok(())
    }

    /// Full forward pass on a `[N, 3, H, W]` node; output is `[N, 1, H, W]` in (0, 1).
    pub fn forward(&self, g: &mut Graph, p: &Bound, hazy: Var) -> Result<Var> {
        Ok(self.forward_detailed(g, p, hazy)?.output)
    }

    pub fn forward_detailed(&self, g: &mut Graph, p: &Bound, hazy: Var) -> Result<TransmissionForward> {
        let [_, c, h, w] = g.shape(hazy);
        if c != 3 {
            return Err(shape_err!("transmission net expects 3 channels, got {c}"));
        }
        Self::check_input(h, w)?;

        let x = self.stem.forward(g, p, hazy);
        let x = self.stem_norm.forward(g, p, x);
        let stem_out = g.relu(x);
        let mut skips = vec![(2usize, stem_out)];
        let mut x = g.avg_pool(stem_out, 2);
        for (i, (block, down)) in self.encoder.iter().enumerate() {
            x = block.forward(g, p, x);
            skips.push((4 << i, x));
            let y = down.norm.forward(g, p, x);
            let y = g.relu(y);
            let y = down.conv.forward(g, p, y);
            x = g.avg_pool(y, 2);
        }
        let bottleneck = x;

        for stage in &self.decoder {
            if stage.skip {
                let (_, feat) = skips
                    .iter()
                    .find(|(s, _)| *s == stage.scale)
                    .copied()
                    .expect("validated skip");
                x = g.concat(&[x, feat]);
            }
            x = stage.block.forward(g, p, x);
            let y = stage.up.norm.forward(g, p, x);
            let y = g.relu(y);
            let y = stage.up.squeeze.forward(g, p, y);
            let [_, _, sh, sw] = g.shape(y);
            let y = g.resize(y, sh * 2, sw * 2);
            x = stage.up.refine.forward(g, p, y);
        }
        let decoder_features = g.relu(x);
        let features = match &self.pyramid {
            Some(pp) => pp.forward(g, p, decoder_features)?,
            None => decoder_features,
        };
        let logits = self.head.forward(g, p, features);
        let output = g.sigmoid(logits);
        Ok(TransmissionForward {
            bottleneck,
            decoder_features,
            logits,
            output,
        })
    }
}

/// Runs the frozen network on one image.
pub fn estimate_transmission(
    net: &TransmissionNet,
    params: &ParameterSet,
    hazy: &ImageTensor,
) -> Result<TransmissionMap> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(hazy.tensor().clone());
    let y = net.forward(&mut g, &p, x)?;
    // Pulls exact 0 and 1 from a saturated logistic back inside (0, 1).
    let t = g.value(y).map(|v| v.clamp(1e-12, 1.0 - 1e-12));
    TransmissionMap::new(t)
}

/// Applies the pyramid module alone, with freshly built mixers, to a feature tensor.
pub fn pyramid_pool(
    features: &crate::tensor::Tensor,
    scales: &[usize],
    seed: u64,
) -> Result<crate::tensor::Tensor> {
    let mut b = ParamBuilder::new(seed);
    let pp = PyramidPool::new(&mut b, "pyramid", features.channels(), scales)?;
    let params = b.finish();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(features.clone());
    let y = pp.forward(&mut g, &bound, x)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny_config() -> TransmissionNetConfig {
        let block = DenseBlockSpec {
            num_layers: 2,
            growth_rate: 4,
        };
        TransmissionNetConfig {
            stem_channels: 8,
            encoder_blocks: vec![block; 3],
            decoder_blocks: vec![block; 5],
            decoder_channels: vec![16, 12, 8, 8, 8],
            ..TransmissionNetConfig::default()
        }
    }

    #[test]
    fn output_restores_resolution() {
        let (net, params) = build_transmission_net(&TransmissionNetConfig::default(), 1).unwrap();
        let hazy = ImageTensor::filled(64, 64, 0.4).unwrap();
        let t = estimate_transmission(&net, &params, &hazy).unwrap();
        assert_eq!(t.tensor().shape(), [1, 1, 64, 64]);
        assert!(t.tensor().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn bottleneck_is_one_thirty_second() {
        let (net, params) = build_transmission_net(&tiny_config(), 2).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(Tensor::full([1, 3, 256, 256], 0.5));
        let fwd = net.forward_detailed(&mut g, &p, x).unwrap();
        let [_, _, h, w] = g.shape(fwd.bottleneck);
        assert_eq!((h, w), (8, 8));
        assert_eq!(g.shape(fwd.output), [1, 1, 256, 256]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let (net, params) = build_transmission_net(&tiny_config(), 3).unwrap();
        let hazy = ImageTensor::filled(48, 64, 0.4).unwrap();
        assert!(matches!(
            estimate_transmission(&net, &params, &hazy),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = build_transmission_net(&tiny_config(), 9).unwrap();
        let (_, b) = build_transmission_net(&tiny_config(), 9).unwrap();
        let (_, c) = build_transmission_net(&tiny_config(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_skip_resolution_is_config_error() {
        let cfg = TransmissionNetConfig {
            skip_connections: vec![32],
            ..tiny_config()
        };
        assert!(matches!(build_transmission_net(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn pyramid_adds_four_channels() {
        let feats = Tensor::from_fn([1, 5, 64, 64], |_, c, y, x| (c + y + x) as f64 / 100.0);
        let out = pyramid_pool(&feats, &[32, 16, 8, 4], 0).unwrap();
        assert_eq!(out.shape(), [1, 9, 64, 64]);
    }

    #[test]
    fn pyramid_levels_for_32px() {
        let mut b = ParamBuilder::new(0);
        let pp = PyramidPool::new(&mut b, "p", 3, &[32, 16, 8, 4]).unwrap();
        assert_eq!(pp.level_sizes(32, 32), vec![(1, 1), (2, 2), (4, 4), (8, 8)]);
    }

    #[test]
    fn pyramid_of_constant_is_constant_per_branch() {
        let feats = Tensor::full([1, 2, 32, 32], 0.7);
        let out = pyramid_pool(&feats, &[32, 16, 8, 4], 5).unwrap();
        for c in 0..out.channels() {
            let plane = out.channel(0, c);
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn pyramid_rejects_small_maps() {
        let feats = Tensor::full([1, 2, 16, 16], 0.7);
        assert!(matches!(
            pyramid_pool(&feats, &[32, 16, 8, 4], 5),
            Err(Error::Config(_))
        ));
    }
}
