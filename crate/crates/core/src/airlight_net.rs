//! 8-block U-net estimating the atmospheric light map.
//!
//! Four conv → norm → ReLU blocks halve the resolution; four symmetric
//! transposed-conv → norm → ReLU blocks restore it, concatenating the mirror
//! encoder features. A 1×1 head with a logistic output yields three channels.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::nn::{Bound, Conv, ConvTranspose, Norm, ParamBuilder, ParameterSet};
use crate::physics::{AirlightMap, ImageTensor};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AirlightNetConfig {
    /// Number of down blocks; the decoder mirrors it.
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for AirlightNetConfig {
    fn default() -> Self {
        AirlightNetConfig {
            depth: 4,
            base_channels: 16,
        }
    }
}

impl AirlightNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::Config(format!("airlight depth must be in 1..=8, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("airlight base_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn divisor(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Debug)]
struct DownBlock {
    conv: Conv,
    norm: Norm,
}

#[derive(Clone, Debug)]
struct UpBlock {
    deconv: ConvTranspose,
    norm: Norm,
}

#[derive(Clone, Debug)]
pub struct AirlightNet {
    config: AirlightNetConfig,
    down: Vec<DownBlock>,
    up: Vec<UpBlock>,
    head: Conv,
}

pub fn build_airlight_net(config: &AirlightNetConfig, init_seed: u64) -> Result<(AirlightNet, ParameterSet)> {
    config.validate()?;
    let mut b = ParamBuilder::new(init_seed);
    let down_geom = ConvGeom::new(4, 2, 1);
    let widths: Vec<usize> = (0..config.depth).map(|i| config.base_channels << i).collect();

    let mut down = Vec::with_capacity(config.depth);
    let mut c = 3;
    for (i, &w) in widths.iter().enumerate() {
        down.push(DownBlock {
            conv: b.conv(&format!("down{i}.conv"), c, w, down_geom, false)?,
            norm: b.norm(&format!("down{i}.norm"), w)?,
        });
        c = w;
    }

    // Up block i takes the previous output (plus the mirror skip for all but
    // the first) and emits the width of the next-shallower level.
    let mut up = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        let level = config.depth - 1 - i;
        let cin = if i == 0 { widths[level] } else { c + widths[level] };
        let cout = if level == 0 { config.base_channels } else { widths[level - 1] };
        up.push(UpBlock {
            deconv: b.conv_transpose(&format!("up{i}.deconv"), cin, cout, down_geom, false)?,
            norm: b.norm(&format!("up{i}.norm"), cout)?,
        });
        c = cout;
    }
    let head = b.conv("head", c, 3, ConvGeom::new(1, 1, 0), true)?;
    Ok((
        AirlightNet {
            config: config.clone(),
            down,
            up,
            head,
        },
        b.finish(),
    ))
}

impl AirlightNet {
    pub fn config(&self) -> &AirlightNetConfig {
        &self.config
    }

    /// Down plus up blocks; the 1×1 head is not counted.
    pub fn block_count(&self) -> usize {
        self.down.len() + self.up.len()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.config.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(shape_err!("airlight net input must be divisible by {d}, got {h}x{w}"));
        }
        Ok(())
    }

    /// `[N, 3, H, W]` → `[N, 3, H, W]` in (0, 1).
    pub fn forward(&self, g: &mut Graph, p: &Bound, hazy: Var) -> Result<Var> {
        let [_, c, h, w] = g.shape(hazy);
        if c != 3 {
            return Err(shape_err!("airlight net expects 3 channels, got {c}"));
        }
        self.check_input(h, w)?;
        let mut skips = Vec::with_capacity(self.down.len());
        let mut x = hazy;
        for blk in &self.down {
            x = blk.conv.forward(g, p, x);
            x = blk.norm.forward(g, p, x);
            x = g.relu(x);
            skips.push(x);
        }
        for (i, blk) in self.up.iter().enumerate() {
            if i > 0 {
                let skip = skips[self.down.len() - 1 - i];
                x = g.concat(&[x, skip]);
            }
            x = blk.deconv.forward(g, p, x);
            x = blk.norm.forward(g, p, x);
            x = g.relu(x);
        }
        let logits = self.head.forward(g, p, x);
        Ok(g.sigmoid(logits))
    }
}

/// Runs the frozen network; the raw (not yet homogenised) prediction.
pub fn estimate_airlight(net: &AirlightNet, params: &ParameterSet, hazy: &ImageTensor) -> Result<ImageTensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(hazy.tensor().clone());
    let y = net.forward(&mut g, &p, x)?;
    ImageTensor::new(g.value(y).clone())
}

/// Projects a prediction onto a homogeneous map: per-channel spatial mean, broadcast.
pub fn homogenize(airlight_pred: &ImageTensor) -> AirlightMap {
    let t = airlight_pred.tensor();
    let mut constants = [0.0; 3];
    for (c, slot) in constants.iter_mut().enumerate() {
        let ch = t.channel(0, c);
        let mean = if ch.iter().all(|v| *v == ch[0]) {
            ch[0]
        } else {
            ch.iter().sum::<f64>() / t.plane() as f64
        };
        *slot = mean.clamp(0.0, 1.0);
    }
    AirlightMap::from_constants(constants, t.height(), t.width()).expect("means of [0,1] values")
}

/// Spatial standard deviation of each channel, averaged over channels.
pub fn spatial_std(pred: &Tensor) -> f64 {
    let mut acc = 0.0;
    let mut n = 0;
    for b in 0..pred.batch() {
        for c in 0..pred.channels() {
            let ch = pred.channel(b, c);
            let m = ch.iter().sum::<f64>() / ch.len() as f64;
            acc += (ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / ch.len() as f64).sqrt();
            n += 1;
        }
    }
    acc / n as f64
}
