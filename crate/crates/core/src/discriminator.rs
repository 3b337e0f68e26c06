//! Joint patch discriminator over stacked (dehazed image, transmission) pairs.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::nn::{Bound, Conv, Norm, ParamBuilder, ParameterSet};
use crate::physics::{ImageTensor, TransmissionMap};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// A 4-channel stack ordered `[R, G, B, t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPair {
    stacked: Tensor,
}

impl JointPair {
    pub fn stacked(&self) -> &Tensor {
        &self.stacked
    }
}

pub fn make_pair(t: &TransmissionMap, img: &ImageTensor) -> Result<JointPair> {
    Ok(JointPair {
        stacked: stack_pair(img.tensor(), t.tensor())?,
    })
}

/// Raw-tensor form of [`make_pair`] for batched `[N,3,H,W]` + `[N,1,H,W]` inputs.
pub fn stack_pair(img: &Tensor, t: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = img.shape();
    if c != 3 {
        return Err(shape_err!("pair image must have 3 channels, got {c}"));
    }
    if t.shape() != [n, 1, h, w] {
        return Err(shape_err!(
            "pair transmission {:?} does not match image {:?}",
            t.shape(),
            img.shape()
        ));
    }
    Ok(Tensor::from_fn([n, 4, h, w], |b, ch, y, x| {
        if ch < 3 {
            img.get(b, ch, y, x)
        } else {
            t.get(b, 0, y, x)
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    pub num_down_blocks: usize,
    pub base_channels: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            num_down_blocks: 4,
            base_channels: 16,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_down_blocks == 0 || self.base_channels == 0 {
            return Err(Error::Config("discriminator needs positive blocks and channels".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DiscBlock {
    conv: Conv,
    norm: Norm,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscConfig,
    blocks: Vec<DiscBlock>,
    head: Conv,
}

pub fn build_discriminator(config: &DiscConfig, init_seed: u64) -> Result<(Discriminator, ParameterSet)> {
    config.validate()?;
    let mut b = ParamBuilder::new(init_seed);
    let mut blocks = Vec::new();
    let mut c = 4;
    for i in 0..config.num_down_blocks {
        // Width doubles per block, capped at 4× base.
        let w = config.base_channels << i.min(2);
        blocks.push(DiscBlock {
            conv: b.conv(&format!("block{i}.conv"), c, w, ConvGeom::new(4, 2, 1), false)?,
            norm: b.norm(&format!("block{i}.norm"), w)?,
        });
        c = w;
    }
    let head = b.conv("head", c, 1, ConvGeom::new(3, 1, 1), true)?;
    Ok((
        Discriminator {
            config: config.clone(),
            blocks,
            head,
        },
        b.finish(),
    ))
}

impl Discriminator {
    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    /// Scores a `[N, 4, H, W]` stack; returns per-patch probabilities.
    pub fn forward(&self, g: &mut Graph, p: &Bound, pair: Var) -> Result<Var> {
        let [_, c, h, w] = g.shape(pair);
        if c != 4 {
            return Err(shape_err!("discriminator expects 4 channels, got {c}"));
        }
        let d = 1usize << self.blocks.len();
        if h % d != 0 || w % d != 0 || h < d || w < d {
            return Err(shape_err!("discriminator input must be divisible by {d}, got {h}x{w}"));
        }
        let mut x = pair;
        for blk in &self.blocks {
            x = blk.conv.forward(g, p, x);
            x = blk.norm.forward(g, p, x);
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
        let logits = self.head.forward(g, p, x);
        Ok(g.sigmoid(logits))
    }

    /// Concatenates the two modalities on the tape and scores them.
    pub fn score_pair(&self, g: &mut Graph, p: &Bound, image: Var, transmission: Var) -> Result<Var> {
        if g.shape(image)[1] != 3 || g.shape(transmission)[1] != 1 {
            return Err(shape_err!("pair needs a 3-channel image and a 1-channel map"));
        }
        let stacked = g.concat(&[image, transmission]);
        self.forward(g, p, stacked)
    }
}

/// Frozen-parameter scoring of one pair.
pub fn discriminate(disc: &Discriminator, params: &ParameterSet, pair: &JointPair) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(pair.stacked().clone());
    let y = disc.forward(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}
