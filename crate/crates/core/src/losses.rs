//! Edge-preserving transmission loss, L2 task losses, adversarial losses and
//! the total objective.
//!
//! Every squared-error term is a mean over elements so the default weights do
//! not depend on resolution. Each loss exists in two forms: a tape form that
//! returns a scalar [`Var`] for training, and a value form on plain tensors.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{self, Graph, Var};
use crate::kernels::ConvGeom;
use crate::nn::{Bound, Conv, ParamBuilder, ParameterSet};
use crate::tensor::Tensor;

/// Clamp applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-7;

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l2: f64,
    pub lambda_grad: f64,
    pub lambda_feat: f64,
    pub lambda_joint: f64,
    /// Unit coefficients on the three task losses of the total objective.
    #[serde(default = "one")]
    pub lambda_transmission: f64,
    #[serde(default = "one")]
    pub lambda_airlight: f64,
    #[serde(default = "one")]
    pub lambda_dehaze: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_l2: 1.0,
            lambda_grad: 0.5,
            lambda_feat: 0.8,
            lambda_joint: 0.25,
            lambda_transmission: 1.0,
            lambda_airlight: 1.0,
            lambda_dehaze: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_l2", self.lambda_l2),
            ("lambda_grad", self.lambda_grad),
            ("lambda_feat", self.lambda_feat),
            ("lambda_joint", self.lambda_joint),
            ("lambda_transmission", self.lambda_transmission),
            ("lambda_airlight", self.lambda_airlight),
            ("lambda_dehaze", self.lambda_dehaze),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            lambda_l2: self.lambda_l2 * k,
            lambda_grad: self.lambda_grad * k,
            lambda_feat: self.lambda_feat * k,
            lambda_joint: self.lambda_joint * k,
            lambda_transmission: self.lambda_transmission * k,
            lambda_airlight: self.lambda_airlight * k,
            lambda_dehaze: self.lambda_dehaze * k,
        }
    }
}

/// Per-pixel norm used in the gradient and feature terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelNorm {
    #[default]
    Squared,
    Absolute,
}

/// Channel/height/width of one extractor's output for a given input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeExtractorSpec {
    /// Width of the first-stage convs (stand-in for the 64 maps before relu1-1).
    pub stage1_channels: usize,
    /// Width of the second-stage convs (before relu2-1).
    pub stage2_channels: usize,
    pub seed: u64,
}

impl Default for EdgeExtractorSpec {
    fn default() -> Self {
        EdgeExtractorSpec {
            stage1_channels: 8,
            stage2_channels: 16,
            seed: 0x5eed_ed9e,
        }
    }
}

/// Two frozen shallow conv stacks.
///
/// `V1`: conv → ReLU → conv. `V2`: conv → ReLU → conv → ReLU → 2× pool → conv
/// → ReLU → conv. Both take single-channel maps.
#[derive(Clone, Debug)]
pub struct EdgeExtractors {
    spec: EdgeExtractorSpec,
    v1: [Conv; 2],
    v2: [Conv; 4],
    params: ParameterSet,
}

impl EdgeExtractors {
    pub fn new(spec: EdgeExtractorSpec) -> Result<Self> {
        if spec.stage1_channels == 0 || spec.stage2_channels == 0 {
            return Err(Error::Config("edge extractor widths must be positive".into()));
        }
        let g3 = ConvGeom::new(3, 1, 1);
        let (c1, c2) = (spec.stage1_channels, spec.stage2_channels);
        let mut b = ParamBuilder::new(spec.seed);
        let v1 = [b.conv("v1.conv0", 1, c1, g3, true)?, b.conv("v1.conv1", c1, c1, g3, true)?];
        let v2 = [
            b.conv("v2.conv0", 1, c1, g3, true)?,
            b.conv("v2.conv1", c1, c1, g3, true)?,
            b.conv("v2.conv2", c1, c2, g3, true)?,
            b.conv("v2.conv3", c2, c2, g3, true)?,
        ];
        Ok(EdgeExtractors {
            spec,
            v1,
            v2,
            params: b.finish(),
        })
    }

    /// Replaces the seeded weights with externally supplied ones (matched by name).
    pub fn with_parameters(mut self, external: &ParameterSet) -> Result<Self> {
        self.params.load_matching(external)?;
        Ok(self)
    }

    pub fn spec(&self) -> &EdgeExtractorSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &ParameterSet {
        &self.params
    }

    pub fn feature_dims(&self, h: usize, w: usize) -> [FeatureDims; 2] {
        [
            FeatureDims {
                channels: self.spec.stage1_channels,
                height: h,
                width: w,
            },
            FeatureDims {
                channels: self.spec.stage2_channels,
                height: h / 2,
                width: w / 2,
            },
        ]
    }

    /// Places the frozen weights on the tape as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, false)
    }

    pub fn features(&self, g: &mut Graph, p: &Bound, x: Var) -> [Var; 2] {
        let y = self.v1[0].forward(g, p, x);
        let y = g.relu(y);
        let f1 = self.v1[1].forward(g, p, y);

        let y = self.v2[0].forward(g, p, x);
        let y = g.relu(y);
        let y = self.v2[1].forward(g, p, y);
        let y = g.relu(y);
        let y = g.avg_pool(y, 2);
        let y = self.v2[2].forward(g, p, y);
        let y = g.relu(y);
        let f2 = self.v2[3].forward(g, p, y);
        [f1, f2]
    }
}

/// Horizontal and vertical forward differences, zero in the last column/row.
pub fn gradient_hv(x: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.height() < 2 || x.width() < 2 {
        return Err(shape_err!(
            "gradients need at least 2x2 pixels, got {}x{}",
            x.height(),
            x.width()
        ));
    }
    Ok((graph::diff_x(x), graph::diff_y(x)))
}

fn pixel_loss(g: &mut Graph, a: Var, b: Var, norm: PixelNorm) -> Var {
    match norm {
        PixelNorm::Squared => g.mse(a, b),
        PixelNorm::Absolute => g.mae(a, b),
    }
}

/// Scalar nodes of the edge-preserving loss. Components are unweighted.
#[derive(Clone, Copy, Debug)]
pub struct EdgeTerms {
    pub total: Var,
    pub l2: Var,
    pub grad: Var,
    pub feat: Var,
}

/// Tape form of the edge-preserving loss on `[N, 1, H, W]` maps.
pub fn edge_loss_on_tape(
    g: &mut Graph,
    extractors: &EdgeExtractors,
    extractor_params: &Bound,
    t_hat: Var,
    t: Var,
    weights: &LossWeights,
    norm: PixelNorm,
) -> EdgeTerms {
    let l2 = g.mse(t_hat, t);

    let gx_hat = g.diff_x(t_hat);
    let gx = g.diff_x(t);
    let gy_hat = g.diff_y(t_hat);
    let gy = g.diff_y(t);
    let lx = pixel_loss(g, gx_hat, gx, norm);
    let ly = pixel_loss(g, gy_hat, gy, norm);
    let grad = g.weighted_sum(&[(lx, 1.0), (ly, 1.0)]);

    let [f1_hat, f2_hat] = extractors.features(g, extractor_params, t_hat);
    let [f1, f2] = extractors.features(g, extractor_params, t);
    let l1 = pixel_loss(g, f1_hat, f1, norm);
    let l2f = pixel_loss(g, f2_hat, f2, norm);
    let feat = g.weighted_sum(&[(l1, 1.0), (l2f, 1.0)]);

    let total = g.weighted_sum(&[
        (l2, weights.lambda_l2),
        (grad, weights.lambda_grad),
        (feat, weights.lambda_feat),
    ]);
    EdgeTerms { total, l2, grad, feat }
}

/// Evaluated edge-preserving loss with each component reported separately.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeLossValue {
    pub total: f64,
    pub l2: f64,
    pub grad: f64,
    pub feat: f64,
    pub weighted_l2: f64,
    pub weighted_grad: f64,
    pub weighted_feat: f64,
}

pub fn edge_preserving_loss(
    t_hat: &Tensor,
    t: &Tensor,
    weights: &LossWeights,
    extractors: &EdgeExtractors,
) -> Result<EdgeLossValue> {
    edge_preserving_loss_with(t_hat, t, weights, extractors, PixelNorm::Squared)
}

pub fn edge_preserving_loss_with(
    t_hat: &Tensor,
    t: &Tensor,
    weights: &LossWeights,
    extractors: &EdgeExtractors,
    norm: PixelNorm,
) -> Result<EdgeLossValue> {
    check_map_pair(t_hat, t)?;
    let mut g = Graph::new();
    let p = extractors.bind(&mut g);
    let a = g.constant(t_hat.clone());
    let b = g.constant(t.clone());
    let terms = edge_loss_on_tape(&mut g, extractors, &p, a, b, weights, norm);
    let (l2, grad, feat) = (g.scalar(terms.l2), g.scalar(terms.grad), g.scalar(terms.feat));
    Ok(EdgeLossValue {
        total: g.scalar(terms.total),
        l2,
        grad,
        feat,
        weighted_l2: weights.lambda_l2 * l2,
        weighted_grad: weights.lambda_grad * grad,
        weighted_feat: weights.lambda_feat * feat,
    })
}

/// Gradient of the edge-preserving loss with respect to `t_hat`.
pub fn edge_preserving_loss_grad(
    t_hat: &Tensor,
    t: &Tensor,
    weights: &LossWeights,
    extractors: &EdgeExtractors,
) -> Result<Tensor> {
    check_map_pair(t_hat, t)?;
    let mut g = Graph::new();
    let p = extractors.bind(&mut g);
    let a = g.variable(t_hat.clone());
    let b = g.constant(t.clone());
    let terms = edge_loss_on_tape(&mut g, extractors, &p, a, b, weights, PixelNorm::Squared);
    let grads = g.backward(terms.total);
    Ok(grads
        .get(a)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(t_hat.shape())))
}

fn check_map_pair(t_hat: &Tensor, t: &Tensor) -> Result<()> {
    if t_hat.shape() != t.shape() {
        return Err(shape_err!("map shapes differ: {:?} vs {:?}", t_hat.shape(), t.shape()));
    }
    if t.channels() != 1 {
        return Err(shape_err!("edge loss expects single-channel maps, got {}", t.channels()));
    }
    if t.height() < 2 || t.width() < 2 {
        return Err(shape_err!("edge loss needs at least 2x2 maps"));
    }
    Ok(())
}

/// Mean of squared differences.
pub fn l2_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("l2 shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let n = a.numel() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// One non-saturating generator term: `−mean log(score)`.
pub fn generator_adversarial_loss(fake_scores: &Tensor) -> f64 {
    -fake_scores
        .data()
        .iter()
        .map(|s| s.clamp(LOG_EPS, 1.0 - LOG_EPS).ln())
        .sum::<f64>()
        / fake_scores.numel() as f64
}

/// `−mean log(real) − mean log(1 − fake)`.
pub fn discriminator_loss(real_scores: &Tensor, fake_scores: &Tensor) -> f64 {
    let n_real = real_scores.numel() as f64;
    let n_fake = fake_scores.numel() as f64;
    let real: f64 = real_scores.data().iter().map(|s| s.clamp(LOG_EPS, 1.0 - LOG_EPS).ln()).sum();
    let fake: f64 = fake_scores
        .data()
        .iter()
        .map(|s| (1.0 - s.clamp(LOG_EPS, 1.0 - LOG_EPS)).ln())
        .sum();
    -real / n_real - fake / n_fake
}

/// Tape form of [`discriminator_loss`].
pub fn discriminator_loss_on_tape(g: &mut Graph, real: Var, fake: Var) -> Var {
    let r = g.neg_mean_log(real, LOG_EPS);
    let f = g.neg_mean_log1m(fake, LOG_EPS);
    g.weighted_sum(&[(r, 1.0), (f, 1.0)])
}

/// Tape form of the two-term generator loss `L^j`.
///
/// A single fake pair is scored once per sample; its score stands in for both
/// the transmission term and the dehazed-image term.
pub fn joint_generator_loss_on_tape(g: &mut Graph, fake: Var) -> Var {
    let term = g.neg_mean_log(fake, LOG_EPS);
    g.weighted_sum(&[(term, 1.0), (term, 1.0)])
}

/// The four per-sample losses entering the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    /// Edge-preserving transmission loss (already internally weighted).
    pub transmission: f64,
    pub airlight: f64,
    pub dehaze: f64,
    pub joint: f64,
}

/// `L = L^t + L^a + L^d + λ_j·L^j`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.lambda_transmission * c.transmission
        + w.lambda_airlight * c.airlight
        + w.lambda_dehaze * c.dehaze
        + w.lambda_joint * c.joint
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn([1, 1, h, w], |_, _, _, x| x as f64)
    }

    #[test]
    fn gradients_of_constant_and_ramp() {
        let (gx, gy) = gradient_hv(&Tensor::full([1, 1, 3, 4], 0.2)).unwrap();
        assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));

        let (gx, gy) = gradient_hv(&ramp(3, 5)).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(gx.get(0, 0, y, x), 1.0);
            }
            assert_eq!(gx.get(0, 0, y, 4), 0.0);
        }
        assert!(gy.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_hand_example() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let (gx, gy) = gradient_hv(&x).unwrap();
        assert_eq!((gx.get(0, 0, 0, 0), gx.get(0, 0, 1, 0)), (1.0, 2.0));
        assert_eq!((gy.get(0, 0, 0, 0), gy.get(0, 0, 0, 1)), (2.0, 3.0));
    }

    #[test]
    fn gradients_reject_degenerate_maps() {
        assert!(matches!(gradient_hv(&Tensor::zeros([1, 1, 1, 5])), Err(Error::Shape(_))));
    }

    #[test]
    fn l2_examples() {
        let a = Tensor::full([1, 1, 2, 3], 0.4);
        assert_eq!(l2_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v - 0.1);
        assert!((l2_loss(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        let p = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let q = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(l2_loss(&p, &q).unwrap(), 1.0);
        assert!(l2_loss(&a, &p).is_err());
    }

    #[test]
    fn adversarial_examples() {
        let s = |v: f64| Tensor::full([1, 1, 2, 2], v);
        assert!(generator_adversarial_loss(&s(1.0 - 1e-7)) < 1e-6);
        assert!((generator_adversarial_loss(&s((-1.0f64).exp())) - 1.0).abs() < 1e-12);
        assert!((generator_adversarial_loss(&s(0.5)) - std::f64::consts::LN_2).abs() < 1e-12);

        assert!(discriminator_loss(&s(1.0 - 1e-7), &s(1e-7)) < 1e-6);
        assert!((discriminator_loss(&s(0.5), &s(0.5)) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let mut prev = discriminator_loss(&s(0.5), &s(0.1));
        for f in [0.3, 0.5, 0.7, 0.9, 0.99] {
            let cur = discriminator_loss(&s(0.5), &s(f));
            assert!(cur > prev);
            prev = cur;
        }
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::default(), &w), 0.0);
        let c = LossComponents {
            transmission: 1.0,
            airlight: 0.0,
            dehaze: 0.0,
            joint: 4.0,
        };
        assert_eq!(total_loss(&c, &w), 2.0);
        let w0 = LossWeights {
            lambda_joint: 0.0,
            ..w
        };
        assert_eq!(total_loss(&c, &w0), 1.0);
    }

    #[test]
    fn edge_loss_vanishes_on_identical_maps() {
        let ext = EdgeExtractors::new(EdgeExtractorSpec::default()).unwrap();
        let t = Tensor::from_fn([1, 1, 8, 8], |_, _, y, x| 0.2 + 0.05 * ((x * y) % 7) as f64);
        let v = edge_preserving_loss(&t, &t, &LossWeights::default(), &ext).unwrap();
        assert_eq!(v.total, 0.0);
        assert_eq!((v.l2, v.grad, v.feat), (0.0, 0.0, 0.0));
    }

    #[test]
    fn edge_loss_constant_offset() {
        let ext = EdgeExtractors::new(EdgeExtractorSpec::default()).unwrap();
        let t = Tensor::from_fn([1, 1, 8, 8], |_, _, y, x| 0.25 + (x + 2 * y) as f64 / 64.0);
        let shifted = t.map(|v| v + 0.125);
        let v = edge_preserving_loss(&shifted, &t, &LossWeights::default(), &ext).unwrap();
        assert_eq!(v.grad, 0.0);
        assert_eq!(v.l2, 0.015625);
    }

    #[test]
    fn single_pixel_perturbation() {
        let ext = EdgeExtractors::new(EdgeExtractorSpec::default()).unwrap();
        let t = Tensor::full([1, 1, 4, 8], 0.5);
        let mut p = t.clone();
        p.data_mut()[13] += 0.2;
        let w = LossWeights {
            lambda_l2: 1.0,
            lambda_grad: 0.0,
            lambda_feat: 0.0,
            ..LossWeights::default()
        };
        let v = edge_preserving_loss(&p, &t, &w, &ext).unwrap();
        assert!((v.total - 0.04 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn weights_scale_components_linearly() {
        let ext = EdgeExtractors::new(EdgeExtractorSpec::default()).unwrap();
        let t = Tensor::from_fn([1, 1, 8, 8], |_, _, y, x| 0.3 + 0.02 * (y as f64) - 0.01 * x as f64);
        let p = t.map(|v| v * 0.9 + 0.05);
        let w = LossWeights::default();
        let a = edge_preserving_loss(&p, &t, &w, &ext).unwrap();
        let b = edge_preserving_loss(&p, &t, &w.scaled(4.0), &ext).unwrap();
        assert_eq!(b.weighted_l2, 4.0 * a.weighted_l2);
        assert_eq!(b.weighted_grad, 4.0 * a.weighted_grad);
        assert_eq!(b.weighted_feat, 4.0 * a.weighted_feat);
    }

    #[test]
    fn shifted_step_edge_increases_gradient_loss() {
        let ext = EdgeExtractors::new(EdgeExtractorSpec::default()).unwrap();
        let step = |edge: usize| Tensor::from_fn([1, 1, 8, 8], |_, _, _, x| if x < edge { 0.2 } else { 0.9 });
        let w = LossWeights::default();
        let same = edge_preserving_loss(&step(4), &step(4), &w, &ext).unwrap();
        let moved = edge_preserving_loss(&step(5), &step(4), &w, &ext).unwrap();
        assert!(moved.grad > same.grad);
    }

    #[test]
    fn absolute_norm_variant() {
        let ext = EdgeExtractors::new(EdgeExtractorSpec::default()).unwrap();
        let t = Tensor::full([1, 1, 4, 4], 0.5);
        let p = t.map(|v| v + 0.1);
        let v = edge_preserving_loss_with(&p, &t, &LossWeights::default(), &ext, PixelNorm::Absolute).unwrap();
        assert_eq!(v.grad, 0.0);
        assert!((v.l2 - 0.01).abs() < 1e-15);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda_grad: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
