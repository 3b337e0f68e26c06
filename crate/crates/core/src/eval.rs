//! SSIM, dataset evaluation and the five-way ablation harness.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::airlight_net::{estimate_airlight, homogenize};
use crate::datagen::HazeSample;
use crate::error::{shape_err, Error, Result};
use crate::losses::LossWeights;
use crate::physics::{recover_radiance, AirlightMap, ImageTensor, TransmissionMap};
use crate::tensor::Tensor;
use crate::trainer::{Model, ModelConfig, StageSchedule, TrainConfig, Trainer};
use crate::transmission_net::estimate_transmission;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimConfig {
    /// Odd side length of the Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 || !(self.sigma > 0.0) || !(self.data_range > 0.0) {
            return Err(Error::Config(format!("invalid SSIM configuration {self:?}")));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Separable 'valid' correlation of an `h×w` plane with `taps` along both axes.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, t) in taps.iter().enumerate() {
            let src = &rows[(y + i) * ow..(y + i + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += t * s;
            }
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &SsimConfig, taps: &[f64]) -> f64 {
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, taps);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, taps);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, taps);
    let n = mu_a.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    acc / n as f64
}

/// Mean structural similarity over every `(item, channel)` plane.
pub fn ssim_with(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    if a.shape() != b.shape() {
        return Err(shape_err!("ssim shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let [n, c, h, w] = a.shape();
    if h < cfg.window || w < cfg.window {
        return Err(shape_err!("ssim needs at least {0}x{0} pixels, got {h}x{w}", cfg.window));
    }
    let taps = cfg.taps();
    let mut acc = 0.0;
    for i in 0..n {
        for ch in 0..c {
            acc += ssim_plane(a.channel(i, ch), b.channel(i, ch), h, w, cfg, &taps);
        }
    }
    Ok(acc / (n * c) as f64)
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

/// One estimator's outputs for a sample. `transmission` is absent for
/// estimators that do not produce one.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub transmission: Option<TransmissionMap>,
    pub airlight: Option<AirlightMap>,
    pub dehazed: ImageTensor,
}

pub trait Estimator: Sync {
    fn name(&self) -> String;
    fn predict(&self, sample: &HazeSample) -> Result<Prediction>;
}

/// Returns the ground truth; an upper-bound sanity check.
pub struct OracleBundle;

impl Estimator for OracleBundle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, s: &HazeSample) -> Result<Prediction> {
        Ok(Prediction {
            transmission: Some(s.transmission.clone()),
            airlight: Some(s.airlight.clone()),
            dehazed: s.clean.clone(),
        })
    }
}

/// Returns the hazy input unchanged: the "Input" baseline.
pub struct IdentityBundle;

impl Estimator for IdentityBundle {
    fn name(&self) -> String {
        "input".into()
    }

    fn predict(&self, s: &HazeSample) -> Result<Prediction> {
        Ok(Prediction {
            transmission: None,
            airlight: None,
            dehazed: s.hazy.clone(),
        })
    }
}

/// Recovers with the ground-truth transmission and airlight through the
/// radiance inversion.
pub struct PhysicsOracle {
    pub t_floor: f64,
}

impl Estimator for PhysicsOracle {
    fn name(&self) -> String {
        "physics-oracle".into()
    }

    fn predict(&self, s: &HazeSample) -> Result<Prediction> {
        Ok(Prediction {
            dehazed: recover_radiance(&s.hazy, &s.transmission, &s.airlight, self.t_floor)?,
            transmission: Some(s.transmission.clone()),
            airlight: Some(s.airlight.clone()),
        })
    }
}

/// The trained networks with the recovery step.
pub struct NetworkBundle<'a> {
    pub model: &'a Model,
    pub t_floor: f64,
    pub label: String,
}

impl Estimator for NetworkBundle<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict(&self, s: &HazeSample) -> Result<Prediction> {
        infer(self.model, &s.hazy, self.t_floor)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Mirror-pads the bottom/right edges up to `h×w`.
pub fn reflect_pad(t: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, th, tw] = t.shape();
    Tensor::from_fn([n, c, h, w], |b, ch, y, x| t.get(b, ch, reflect(y as isize, th), reflect(x as isize, tw)))
}

pub fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, _, _] = t.shape();
    Tensor::from_fn([n, c, h, w], |b, ch, y, x| t.get(b, ch, y, x))
}

/// Full pipeline on an arbitrary-size image: reflect-pad to a multiple of
/// 32, estimate `t̂` and `Â`, homogenize `Â`, invert, crop back.
pub fn infer(model: &Model, hazy: &ImageTensor, t_floor: f64) -> Result<Prediction> {
    let (h, w) = (hazy.height(), hazy.width());
    let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
    let padded = ImageTensor::new(reflect_pad(hazy.tensor(), ph, pw))?;
    let t = estimate_transmission(&model.transmission, &model.transmission_params, &padded)?;
    let a_raw = estimate_airlight(&model.airlight, &model.airlight_params, &padded)?;
    let a = homogenize(&a_raw);
    let t = TransmissionMap::new(crop(t.tensor(), h, w))?;
    let a = AirlightMap::from_constants(a.constants(), h, w)?;
    let dehazed = recover_radiance(hazy, &t, &a, t_floor)?;
    Ok(Prediction {
        transmission: Some(t),
        airlight: Some(a),
        dehazed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub scene_id: usize,
    pub variant_id: usize,
    pub transmission: Option<f64>,
    pub image: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: String,
    pub samples: Vec<SampleScore>,
    pub mean_transmission: Option<f64>,
    pub mean_image: f64,
}

impl EvalReport {
    pub fn is_finite(&self) -> bool {
        self.mean_image.is_finite() && self.mean_transmission.is_none_or(f64::is_finite)
    }
}

fn map_samples<T: Send>(data: &[HazeSample], f: impl Fn(&HazeSample) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.iter().map(f).collect()
    }
}

/// Scores `estimator` on every sample, in dataset order.
pub fn evaluate(estimator: &dyn Estimator, data: &[HazeSample], cfg: &SsimConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let samples = map_samples(data, |s| {
        let p = estimator.predict(s)?;
        let transmission = p
            .transmission
            .map(|t| ssim_with(t.tensor(), s.transmission.tensor(), cfg))
            .transpose()?;
        Ok(SampleScore {
            scene_id: s.scene_id,
            variant_id: s.variant_id,
            transmission,
            image: ssim_with(p.dehazed.tensor(), s.clean.tensor(), cfg)?,
        })
    })?;
    let n = samples.len() as f64;
    let mean_image = samples.iter().map(|s| s.image).sum::<f64>() / n;
    let mean_transmission = samples
        .iter()
        .map(|s| s.transmission)
        .sum::<Option<f64>>()
        .map(|t| t / n);
    Ok(EvalReport {
        config: estimator.name(),
        samples,
        mean_transmission,
        mean_image,
    })
}

/// Reference SSIM values from the published evaluation at full scale.
pub mod reference {
    /// Ablation rows in order DED, DED-MLP, DED-MLP-GRA, DED-MLP-EP, FULL.
    pub const TESTA_TRANSMISSION: [f64; 5] = [0.9555, 0.9652, 0.9687, 0.9732, 0.9776];
    pub const TESTA_IMAGE: [f64; 5] = [0.9252, 0.9402, 0.9489, 0.9530, 0.9560];
    pub const TESTB_TRANSMISSION: [f64; 5] = [0.9033, 0.9109, 0.9239, 0.9276, 0.9352];
    pub const TESTB_IMAGE: [f64; 5] = [0.8474, 0.8503, 0.8582, 0.8652, 0.8746];
    /// Image SSIM of the hazy input itself.
    pub const TESTA_INPUT_IMAGE: f64 = 0.7041;
    pub const TESTB_INPUT_IMAGE: f64 = 0.6593;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    Ded,
    DedMlp,
    DedMlpGra,
    DedMlpEp,
    Full,
}

/// Declarative switches distinguishing the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub pyramid: bool,
    pub gradient_loss: bool,
    pub feature_loss: bool,
    pub adversarial: bool,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Ded,
        AblationVariant::DedMlp,
        AblationVariant::DedMlpGra,
        AblationVariant::DedMlpEp,
        AblationVariant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Ded => "DED",
            AblationVariant::DedMlp => "DED-MLP",
            AblationVariant::DedMlpGra => "DED-MLP-GRA",
            AblationVariant::DedMlpEp => "DED-MLP-EP",
            AblationVariant::Full => "FULL",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn flags(self) -> AblationFlags {
        let i = self.index();
        AblationFlags {
            pyramid: i >= 1,
            gradient_loss: i >= 2,
            feature_loss: i >= 3,
            adversarial: i >= 4,
        }
    }

    /// Applies the flags to a base configuration.
    pub fn configure(
        self,
        model: &ModelConfig,
        train: &TrainConfig,
        schedule: &StageSchedule,
    ) -> (ModelConfig, TrainConfig, StageSchedule) {
        let f = self.flags();
        let mut model = model.clone();
        if !f.pyramid {
            model.transmission = model.transmission.clone().without_pyramid();
        }
        let mut train = train.clone();
        let w: &mut LossWeights = &mut train.weights;
        if !f.gradient_loss {
            w.lambda_grad = 0.0;
        }
        if !f.feature_loss {
            w.lambda_feat = 0.0;
        }
        if !f.adversarial {
            w.lambda_joint = 0.0;
        }
        let schedule = StageSchedule {
            adversarial: f.adversarial,
            ..*schedule
        };
        (model, train, schedule)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub label: String,
    pub flags: AblationFlags,
    pub report: EvalReport,
    pub ref_testa_transmission: f64,
    pub ref_testa_image: f64,
    pub ref_testb_transmission: f64,
    pub ref_testb_image: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub input: EvalReport,
    pub ref_testa_input_image: f64,
    pub ref_testb_input_image: f64,
    pub schedule: StageSchedule,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl AblationReport {
    pub fn is_finite(&self) -> bool {
        self.input.is_finite() && self.rows.iter().all(|r| r.report.is_finite())
    }

    /// Table with desk-scale scores beside the published full-scale references.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.4}"));
        let _ = write!(s, "{:<28}{:>9}", "", "Input");
        for r in &self.rows {
            let _ = write!(s, "{:>13}", r.label);
        }
        s.push('\n');
        let mut line = |name: &str, input: Option<f64>, vals: Vec<Option<f64>>| {
            let _ = write!(s, "{name:<28}{:>9}", fmt(input));
            for v in vals {
                let _ = write!(s, "{:>13}", fmt(v));
            }
            s.push('\n');
        };
        line(
            "Transmission (desk)",
            None,
            self.rows.iter().map(|r| r.report.mean_transmission).collect(),
        );
        line(
            "Transmission (ref TestA)",
            None,
            self.rows.iter().map(|r| Some(r.ref_testa_transmission)).collect(),
        );
        line(
            "Transmission (ref TestB)",
            None,
            self.rows.iter().map(|r| Some(r.ref_testb_transmission)).collect(),
        );
        line(
            "Image (desk)",
            Some(self.input.mean_image),
            self.rows.iter().map(|r| Some(r.report.mean_image)).collect(),
        );
        line(
            "Image (ref TestA)",
            Some(self.ref_testa_input_image),
            self.rows.iter().map(|r| Some(r.ref_testa_image)).collect(),
        );
        line(
            "Image (ref TestB)",
            Some(self.ref_testb_input_image),
            self.rows.iter().map(|r| Some(r.ref_testb_image)).collect(),
        );
        let _ = writeln!(
            s,
            "\ndesk: {} train / {} test samples, schedule {}/{}/{} iterations; reference rows are full-scale published values",
            self.train_samples,
            self.test_samples,
            self.schedule.stage1_iters,
            self.schedule.stage2_iters,
            self.schedule.stage3_iters
        );
        s
    }
}

/// Splits by scene so no scene contributes to both sides. The last
/// `ceil(fraction × scenes)` scenes (at least one) form the test side.
pub fn split_by_scene(data: &[HazeSample], test_fraction: f64) -> Result<(Vec<HazeSample>, Vec<HazeSample>)> {
    let mut scenes: Vec<usize> = data.iter().map(|s| s.scene_id).collect();
    scenes.sort_unstable();
    scenes.dedup();
    if scenes.len() < 2 {
        return Err(Error::Data("a train/test split needs at least two scenes".into()));
    }
    let n_test = ((scenes.len() as f64 * test_fraction).ceil() as usize).clamp(1, scenes.len() - 1);
    let cutoff = scenes[scenes.len() - n_test];
    let (test, train): (Vec<_>, Vec<_>) = data.iter().cloned().partition(|s| s.scene_id >= cutoff);
    Ok((train, test))
}

/// Trains and scores the five configurations under identical seeds and budgets.
pub fn run_ablation(
    train: &[HazeSample],
    test: &[HazeSample],
    model: &ModelConfig,
    config: &TrainConfig,
    schedule: &StageSchedule,
    ssim_cfg: &SsimConfig,
    progress: &mut dyn FnMut(AblationVariant, &crate::trainer::LossRecord),
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(5);
    for v in AblationVariant::ALL {
        let (mc, tc, sc) = v.configure(model, config, schedule);
        let mut trainer = Trainer::new(Model::build(&mc)?, tc.clone(), train)?;
        trainer.run(&sc, None, &mut |r| progress(v, r))?;
        let m = trainer.into_model();
        let bundle = NetworkBundle {
            model: &m,
            t_floor: tc.t_floor,
            label: v.label().to_string(),
        };
        let report = evaluate(&bundle, test, ssim_cfg)?;
        let i = v.index();
        rows.push(AblationRow {
            variant: v,
            label: v.label().to_string(),
            flags: v.flags(),
            report,
            ref_testa_transmission: reference::TESTA_TRANSMISSION[i],
            ref_testa_image: reference::TESTA_IMAGE[i],
            ref_testb_transmission: reference::TESTB_TRANSMISSION[i],
            ref_testb_image: reference::TESTB_IMAGE[i],
        });
    }
    Ok(AblationReport {
        rows,
        input: evaluate(&IdentityBundle, test, ssim_cfg)?,
        ref_testa_input_image: reference::TESTA_INPUT_IMAGE,
        ref_testb_input_image: reference::TESTB_INPUT_IMAGE,
        schedule: *schedule,
        train_samples: train.len(),
        test_samples: test.len(),
    })
}

/// Side-by-side strip `[input | dehazed | ground truth]` for a sample.
pub fn image_triplet(hazy: &Tensor, dehazed: &Tensor, clean: &Tensor) -> Result<Tensor> {
    hstack(&[hazy, dehazed, clean])
}

/// Concatenates equally sized `[1, C, H, W]` tensors along the width.
pub fn hstack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err!("nothing to stack"))?;
    let [_, c, h, w] = first.shape();
    if parts.iter().any(|p| p.shape() != [1, c, h, w]) {
        return Err(shape_err!("grid parts must share one shape"));
    }
    Ok(Tensor::from_fn([1, c, h, w * parts.len()], |_, ch, y, x| {
        parts[x / w].get(0, ch, y, x % w)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize, c: usize, k: usize) -> Tensor {
        Tensor::from_fn([1, c, h, w], |_, ch, y, x| ((ch * 31 + y * 17 + x * 7 + k * 13) % 23) as f64 / 22.0)
    }

    fn smooth(h: usize, w: usize, c: usize, k: usize) -> Tensor {
        Tensor::from_fn([1, c, h, w], |_, ch, y, x| {
            let (x, y, ch, k) = (x as f64, y as f64, ch as f64, k as f64);
            0.5 + 0.4 * (0.3 * x + 0.2 * y + ch + k).sin() * (0.15 * y - 0.1 * x * k).cos()
        })
    }

    // Frozen from scikit-image `structural_similarity(gaussian_weights=True,
    // sigma=1.5, use_sample_covariance=False, data_range=1.0)`.
    #[test]
    fn matches_frozen_reference_values() {
        let cases = [
            (pattern(32, 32, 3, 0), pattern(32, 32, 3, 5), 0.14132755799790173),
            (smooth(32, 24, 3, 1), smooth(32, 24, 3, 2), 0.0926763622412718),
            (smooth(20, 20, 1, 1), pattern(20, 20, 1, 2), 0.0034910347147005306),
        ];
        for (a, b, want) in cases {
            let got = ssim(&a, &b).unwrap();
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn identical_inputs_score_one() {
        let a = pattern(16, 20, 3, 0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_bounded() {
        let a = pattern(16, 16, 1, 0);
        let b = pattern(16, 16, 1, 5);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn too_small_is_shape_error() {
        let a = pattern(8, 8, 1, 0);
        assert!(matches!(ssim(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn taps_sum_to_one() {
        let t = SsimConfig::default().taps();
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_edge() {
        let t = Tensor::from_fn([1, 1, 1, 3], |_, _, _, x| x as f64);
        let p = reflect_pad(&t, 1, 7);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        assert_eq!(crop(&p, 1, 3), t);
    }

    #[test]
    fn variant_flags_are_cumulative() {
        let f: Vec<_> = AblationVariant::ALL.iter().map(|v| v.flags()).collect();
        assert!(!f[0].pyramid && f[1].pyramid);
        assert!(!f[1].gradient_loss && f[2].gradient_loss && !f[2].feature_loss);
        assert!(f[3].feature_loss && !f[3].adversarial && f[4].adversarial);
        let (m, t, s) = AblationVariant::Ded.configure(
            &ModelConfig::default(),
            &TrainConfig::default(),
            &StageSchedule::default(),
        );
        assert!(!m.transmission.has_pyramid());
        assert_eq!((t.weights.lambda_grad, t.weights.lambda_feat, t.weights.lambda_joint), (0.0, 0.0, 0.0));
        assert!(!s.adversarial);
    }
}
