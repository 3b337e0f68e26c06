//! Atmospheric scattering model: haze synthesis, radiance recovery and
//! depth-to-transmission conversion.
//!
//! The raw tensor kernels (`*_raw`, [`recover_vjp`]) operate on batched NCHW
//! tensors and back the differentiable recovery node in [`crate::graph`].

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to the transmission before division during recovery.
pub const DEFAULT_T_FLOOR: f64 = 0.05;

/// Three-channel image with values in `[0, 1]`, stored as `[1, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

/// Single-channel transmission map with values in `(0, 1]`, stored as `[1, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap(Tensor);

/// Non-negative scene depth, stored as `[1, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Tensor);

/// Spatially homogeneous atmospheric light: every pixel of channel `c` equals `constants[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AirlightMap {
    map: Tensor,
    constants: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScatterParams {
    pub beta: f64,
    pub airlight_value: f64,
}

fn check_dims(t: &Tensor, channels: usize, what: &str) -> Result<()> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != channels || h == 0 || w == 0 {
        return Err(shape_err!(
            "{what} must be [1, {channels}, H, W] with H, W > 0; got {:?}",
            t.shape()
        ));
    }
    Ok(())
}

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        check_dims(&t, 3, "image")?;
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "image values must lie in [0, 1], found {v}"
            )));
        }
        Ok(ImageTensor(t))
    }

    /// Clamps into `[0, 1]` instead of rejecting out-of-range values (NaN maps to 0).
    pub fn from_clamped(t: Tensor) -> Result<Self> {
        check_dims(&t, 3, "image")?;
        Ok(ImageTensor(t.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })))
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full([1, 3, h, w], value))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
    pub fn into_tensor(self) -> Tensor {
        self.0
    }
    pub fn height(&self) -> usize {
        self.0.height()
    }
    pub fn width(&self) -> usize {
        self.0.width()
    }
}

impl TransmissionMap {
    pub fn new(t: Tensor) -> Result<Self> {
        check_dims(&t, 1, "transmission map")?;
        if let Some(v) = t.data().iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "transmission values must lie in (0, 1], found {v}"
            )));
        }
        Ok(TransmissionMap(t))
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full([1, 1, h, w], value))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
    pub fn into_tensor(self) -> Tensor {
        self.0
    }
    pub fn height(&self) -> usize {
        self.0.height()
    }
    pub fn width(&self) -> usize {
        self.0.width()
    }
}

impl DepthMap {
    pub fn new(t: Tensor) -> Result<Self> {
        check_dims(&t, 1, "depth map")?;
        if let Some(v) = t.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "depth must be finite and non-negative, found {v}"
            )));
        }
        Ok(DepthMap(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

impl AirlightMap {
    pub fn uniform(value: f64, h: usize, w: usize) -> Result<Self> {
        Self::from_constants([value; 3], h, w)
    }

    pub fn from_constants(constants: [f64; 3], h: usize, w: usize) -> Result<Self> {
        if let Some(v) = constants.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "airlight must lie in [0, 1], found {v}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(shape_err!("airlight map needs a non-empty extent"));
        }
        let map = Tensor::from_fn([1, 3, h, w], |_, c, _, _| constants[c]);
        Ok(AirlightMap { map, constants })
    }

    pub fn constants(&self) -> [f64; 3] {
        self.constants
    }
    pub fn tensor(&self) -> &Tensor {
        &self.map
    }
    pub fn height(&self) -> usize {
        self.map.height()
    }
    pub fn width(&self) -> usize {
        self.map.width()
    }
}

impl ScatterParams {
    pub fn new(beta: f64, airlight_value: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
        }
        if !(0.0..=1.0).contains(&airlight_value) {
            return Err(Error::InvalidArgument(format!(
                "airlight must lie in [0, 1], got {airlight_value}"
            )));
        }
        Ok(ScatterParams {
            beta,
            airlight_value,
        })
    }
}

/// `t(z) = exp(-beta * d(z))`.
pub fn transmission_from_depth(depth: &DepthMap, beta: f64) -> Result<TransmissionMap> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    let t = depth
        .tensor()
        .map(|d| (-beta * d).exp().max(f64::MIN_POSITIVE));
    TransmissionMap::new(t)
}

fn same_extent(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(shape_err!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// `I = J·t + A·(1 − t)` with `t` broadcast across colour channels.
pub fn synthesize_haze(
    clean: &ImageTensor,
    t: &TransmissionMap,
    airlight: &AirlightMap,
) -> Result<ImageTensor> {
    same_extent(
        (clean.height(), clean.width()),
        (t.height(), t.width()),
        "clean/transmission",
    )?;
    same_extent(
        (clean.height(), clean.width()),
        (airlight.height(), airlight.width()),
        "clean/airlight",
    )?;
    let out = synthesize_raw(clean.tensor(), t.tensor(), airlight.tensor());
    ImageTensor::from_clamped(out)
}

/// Batched forward model on raw tensors: `j`, `a` are `[N,3,H,W]`, `t` is `[N,1,H,W]`.
pub fn synthesize_raw(j: &Tensor, t: &Tensor, a: &Tensor) -> Tensor {
    let [n, c, h, w] = j.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(j.shape());
    for b in 0..n {
        let tb = t.channel(b, 0);
        for ch in 0..c {
            let jc = j.channel(b, ch);
            let ac = a.channel(b, ch);
            let oc = out.channel_mut(b, ch);
            for p in 0..plane {
                oc[p] = jc[p] * tb[p] + ac[p] * (1.0 - tb[p]);
            }
        }
    }
    out
}

/// Recovers scene radiance: `Ĵ = clamp((I − Â·(1 − t')) / t', 0, 1)` with `t' = max(t̂, t_floor)`.
pub fn recover_radiance(
    hazy: &ImageTensor,
    t_hat: &TransmissionMap,
    airlight_hat: &AirlightMap,
    t_floor: f64,
) -> Result<ImageTensor> {
    check_floor(t_floor)?;
    same_extent(
        (hazy.height(), hazy.width()),
        (t_hat.height(), t_hat.width()),
        "hazy/transmission",
    )?;
    same_extent(
        (hazy.height(), hazy.width()),
        (airlight_hat.height(), airlight_hat.width()),
        "hazy/airlight",
    )?;
    let out = recover_raw(hazy.tensor(), t_hat.tensor(), airlight_hat.tensor(), t_floor);
    ImageTensor::new(out)
}

pub fn check_floor(t_floor: f64) -> Result<()> {
    if !(t_floor > 0.0 && t_floor < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "t_floor must lie in (0, 1), got {t_floor}"
        )));
    }
    Ok(())
}

/// Checks the raw-tensor shape contract shared by the recovery kernels.
pub fn check_recover_shapes(i: &Tensor, t: &Tensor, a: &Tensor) -> Result<()> {
    let [n, c, h, w] = i.shape();
    if c != 3 {
        return Err(shape_err!("hazy image must have 3 channels, got {c}"));
    }
    t.expect_shape([n, 1, h, w])?;
    a.expect_shape([n, 3, h, w])?;
    Ok(())
}

/// Batched recovery on raw tensors; `t` is broadcast across channels.
pub fn recover_raw(i: &Tensor, t: &Tensor, a: &Tensor, t_floor: f64) -> Tensor {
    let [n, c, h, w] = i.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(i.shape());
    for b in 0..n {
        let tb = t.channel(b, 0);
        for ch in 0..c {
            let ic = i.channel(b, ch);
            let ac = a.channel(b, ch);
            let oc = out.channel_mut(b, ch);
            for p in 0..plane {
                let tp = tb[p].max(t_floor);
                let raw = (ic[p] - ac[p] * (1.0 - tp)) / tp;
                oc[p] = raw.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`recover_raw`].
///
/// Returns `(dI, dt, dA)` for upstream gradient `dy`. The floor and the output
/// clamp both pass zero gradient where active.
pub fn recover_vjp(
    i: &Tensor,
    t: &Tensor,
    a: &Tensor,
    t_floor: f64,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = i.shape();
    let plane = h * w;
    let mut di = Tensor::zeros(i.shape());
    let mut dt = Tensor::zeros(t.shape());
    let mut da = Tensor::zeros(a.shape());
    for b in 0..n {
        let tb = t.channel(b, 0).to_vec();
        let mut dtb = vec![0.0; plane];
        for ch in 0..c {
            let ic = i.channel(b, ch);
            let ac = a.channel(b, ch);
            let gc = dy.channel(b, ch);
            let mut dic = vec![0.0; plane];
            let mut dac = vec![0.0; plane];
            for p in 0..plane {
                let floored = tb[p] <= t_floor;
                let tp = if floored { t_floor } else { tb[p] };
                let raw = (ic[p] - ac[p] * (1.0 - tp)) / tp;
                if !(0.0..=1.0).contains(&raw) {
                    continue;
                }
                let g = gc[p];
                dic[p] = g / tp;
                dac[p] = g * (1.0 - 1.0 / tp);
                if !floored {
                    dtb[p] += g * (ac[p] - ic[p]) / (tp * tp);
                }
            }
            di.channel_mut(b, ch).copy_from_slice(&dic);
            da.channel_mut(b, ch).copy_from_slice(&dac);
        }
        dt.channel_mut(b, 0).copy_from_slice(&dtb);
    }
    (di, dt, da)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn depth(value: f64) -> DepthMap {
        DepthMap::new(Tensor::full([1, 1, 4, 5], value)).unwrap()
    }

    #[test]
    fn zero_depth_gives_unit_transmission() {
        let t = transmission_from_depth(&depth(0.0), 1.0).unwrap();
        assert!(t.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ln2_depth_halves_transmission() {
        let t = transmission_from_depth(&depth(std::f64::consts::LN_2), 1.0).unwrap();
        assert!(t.tensor().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn unit_depth_beta_point_four() {
        // exp(-0.4) = 0.670320046035639... (mpmath, 30 digits)
        let t = transmission_from_depth(&depth(1.0), 0.4).unwrap();
        for &v in t.tensor().data() {
            assert!((v - 0.670_320_046_035_639_3).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_depth_and_beta() {
        assert!(DepthMap::new(Tensor::full([1, 1, 2, 2], -0.1)).is_err());
        assert!(transmission_from_depth(&depth(1.0), 0.0).is_err());
        assert!(transmission_from_depth(&depth(1.0), -1.0).is_err());
    }

    #[test]
    fn unit_transmission_leaves_image_unchanged() {
        let j = ImageTensor::new(Tensor::from_fn([1, 3, 4, 4], |_, c, y, x| {
            (c as f64 * 0.2 + y as f64 * 0.05 + x as f64 * 0.01).min(1.0)
        }))
        .unwrap();
        let t = TransmissionMap::filled(4, 4, 1.0).unwrap();
        let a = AirlightMap::uniform(0.9, 4, 4).unwrap();
        assert_eq!(synthesize_haze(&j, &t, &a).unwrap(), j);
    }

    #[test]
    fn tiny_transmission_approaches_airlight() {
        let j = ImageTensor::filled(3, 3, 0.1).unwrap();
        let t = TransmissionMap::filled(3, 3, f64::MIN_POSITIVE).unwrap();
        let a = AirlightMap::uniform(0.7, 3, 3).unwrap();
        let i = synthesize_haze(&j, &t, &a).unwrap();
        assert!(i.tensor().data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn hand_evaluated_forward_and_inverse() {
        let j = ImageTensor::filled(2, 2, 0.2).unwrap();
        let t = TransmissionMap::filled(2, 2, 0.5).unwrap();
        let a = AirlightMap::uniform(0.8, 2, 2).unwrap();
        let i = synthesize_haze(&j, &t, &a).unwrap();
        assert!(i.tensor().data().iter().all(|v| (v - 0.5).abs() < 1e-15));

        let hazy = ImageTensor::filled(2, 2, 0.5).unwrap();
        let rec = recover_radiance(&hazy, &t, &a, DEFAULT_T_FLOOR).unwrap();
        assert!(rec.tensor().data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn unit_transmission_recovery_is_identity() {
        let hazy = ImageTensor::new(Tensor::from_fn([1, 3, 3, 3], |_, c, y, x| {
            (c + y + x) as f64 / 10.0
        }))
        .unwrap();
        let t = TransmissionMap::filled(3, 3, 1.0).unwrap();
        let a = AirlightMap::uniform(0.6, 3, 3).unwrap();
        let rec = recover_radiance(&hazy, &t, &a, DEFAULT_T_FLOOR).unwrap();
        assert!(rec.tensor().max_abs_diff(hazy.tensor()) < 1e-15);
    }

    #[test]
    fn recovery_validates_inputs() {
        let hazy = ImageTensor::filled(2, 2, 0.5).unwrap();
        let t = TransmissionMap::filled(2, 3, 0.5).unwrap();
        let a = AirlightMap::uniform(0.8, 2, 2).unwrap();
        assert!(matches!(
            recover_radiance(&hazy, &t, &a, 0.05),
            Err(Error::Shape(_))
        ));
        let t = TransmissionMap::filled(2, 2, 0.5).unwrap();
        assert!(matches!(
            recover_radiance(&hazy, &t, &a, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(recover_radiance(&hazy, &t, &a, 1.0).is_err());
    }

    #[test]
    fn floor_blocks_transmission_gradient() {
        let i = Tensor::full([1, 3, 1, 2], 0.5);
        let t = Tensor::from_vec([1, 1, 1, 2], vec![0.01, 0.6]).unwrap();
        let a = Tensor::full([1, 3, 1, 2], 0.49);
        let dy = Tensor::full([1, 3, 1, 2], 1.0);
        let (_, dt, _) = recover_vjp(&i, &t, &a, 0.05, &dy);
        assert_eq!(dt.data()[0], 0.0);
        assert!(dt.data()[1] != 0.0);
    }
}
