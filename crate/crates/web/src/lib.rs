//! WebAssembly bindings for the browser demo.
//!
//! A [`Demo`] holds one procedural scene and exposes three operations: haze
//! synthesis, recovery under a misestimated airlight and transmission, and
//! edge maps with loss terms for a corrupted transmission. Images cross the
//! boundary as row-major RGBA bytes, `size × size` (edge views are twice as wide).

use dehaze_core::datagen::{normalize_depth, procedural_scene};
use dehaze_core::eval::ssim;
use dehaze_core::imageio::to_u8;
use dehaze_core::losses::{edge_preserving_loss, gradient_hv, EdgeExtractorSpec, EdgeExtractors, LossWeights};
use dehaze_core::physics::{
    recover_radiance, synthesize_haze, transmission_from_depth, AirlightMap, DepthMap, ImageTensor, TransmissionMap,
};
use dehaze_core::Tensor;
use wasm_bindgen::prelude::*;

pub const MIN_SIZE: u32 = 16;
pub const MAX_SIZE: u32 = 256;

#[wasm_bindgen]
pub struct Demo {
    clean: ImageTensor,
    depth: DepthMap,
    transmission: TransmissionMap,
    hazy: ImageTensor,
    dehazed: ImageTensor,
    extractors: EdgeExtractors,
    edge_terms: [f64; 4],
}

fn rgba(t: &Tensor) -> Vec<u8> {
    let [_, c, h, w] = t.shape();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(to_u8(t.get(0, ch.min(c - 1), y, x)));
            }
            out.push(255);
        }
    }
    out
}

fn clamp_finite(v: f64, lo: f64, hi: f64, fallback: f64) -> f64 {
    if v.is_finite() {
        v.clamp(lo, hi)
    } else {
        fallback
    }
}

fn box_blur(t: &Tensor, passes: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    let mut cur = t.clone();
    for _ in 0..passes {
        let src = cur.clone();
        cur = Tensor::from_fn([n, c, h, w], |b, ch, y, x| {
            let mut acc = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += src.get(b, ch, yy, xx);
                }
            }
            acc / 9.0
        });
    }
    cur
}

fn gradient_magnitude(t: &Tensor) -> Tensor {
    let (gx, gy) = gradient_hv(t).expect("scene is at least 16x16");
    gx.zip_map(&gy, |a, b| a.hypot(b)).expect("same shape")
}

#[wasm_bindgen]
impl Demo {
    /// Renders scene `seed` at `size × size` (clamped to 16..=256) under
    /// default haze (`β = 1`, `A = 0.8`).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32) -> Demo {
        let s = size.clamp(MIN_SIZE, MAX_SIZE) as usize;
        let (clean, raw_depth) = procedural_scene(u64::from(seed), 0, s, s);
        let depth = normalize_depth(&raw_depth).expect("procedural depth is finite");
        let extractors = EdgeExtractors::new(EdgeExtractorSpec::default()).expect("default extractors");
        let mut demo = Demo {
            transmission: TransmissionMap::filled(s, s, 1.0).expect("valid fill"),
            hazy: clean.clone(),
            dehazed: clean.clone(),
            clean,
            depth,
            extractors,
            edge_terms: [0.0; 4],
        };
        demo.synthesize(1.0, 0.8);
        demo.recover(0.8, 0.05, 1.0);
        demo
    }

    pub fn size(&self) -> u32 {
        self.clean.width() as u32
    }

    pub fn clean_rgba(&self) -> Vec<u8> {
        rgba(self.clean.tensor())
    }

    pub fn depth_rgba(&self) -> Vec<u8> {
        rgba(self.depth.tensor())
    }

    pub fn hazy_rgba(&self) -> Vec<u8> {
        rgba(self.hazy.tensor())
    }

    pub fn transmission_rgba(&self) -> Vec<u8> {
        rgba(self.transmission.tensor())
    }

    pub fn dehazed_rgba(&self) -> Vec<u8> {
        rgba(self.dehazed.tensor())
    }

    /// Applies `I = J·t + A(1 − t)` with `t = exp(−β·d)`; returns the hazy image.
    pub fn synthesize(&mut self, beta: f64, airlight: f64) -> Vec<u8> {
        let beta = clamp_finite(beta, 0.01, 5.0, 1.0);
        let airlight = clamp_finite(airlight, 0.0, 1.0, 0.8);
        let s = self.clean.width();
        self.transmission = transmission_from_depth(&self.depth, beta).expect("beta is positive");
        let a = AirlightMap::uniform(airlight, s, s).expect("airlight in [0, 1]");
        self.hazy = synthesize_haze(&self.clean, &self.transmission, &a).expect("matching extents");
        self.hazy_rgba()
    }

    /// Inverts the haze model with an airlight guess and the true transmission
    /// scaled by `t_scale`, floored at `t_floor`; returns the recovered image.
    pub fn recover(&mut self, airlight_guess: f64, t_floor: f64, t_scale: f64) -> Vec<u8> {
        let a = clamp_finite(airlight_guess, 0.0, 1.0, 0.8);
        let floor = clamp_finite(t_floor, 0.001, 1.0, 0.05);
        let k = clamp_finite(t_scale, 0.1, 3.0, 1.0);
        let s = self.clean.width();
        let t = TransmissionMap::new(self.transmission.tensor().map(|v| (v * k).min(1.0))).expect("t stays in [0, 1]");
        let a = AirlightMap::uniform(a, s, s).expect("airlight in [0, 1]");
        self.dehazed = recover_radiance(&self.hazy, &t, &a, floor).expect("valid inputs");
        self.dehazed_rgba()
    }

    /// SSIM of the last recovery against the clean scene.
    pub fn dehazed_ssim(&self) -> f64 {
        ssim(self.dehazed.tensor(), self.clean.tensor()).expect("scene is at least 16x16")
    }

    /// SSIM of the hazy image against the clean scene.
    pub fn hazy_ssim(&self) -> f64 {
        ssim(self.hazy.tensor(), self.clean.tensor()).expect("scene is at least 16x16")
    }

    /// Corrupts the transmission by a horizontal shift and `blur` box-filter
    /// passes, then returns `[|∇t| | |∇t̂|]` side by side. The loss terms are
    /// available from [`Demo::edge_terms`].
    pub fn edges(&mut self, shift: u32, blur: u32) -> Vec<u8> {
        let t = self.transmission.tensor();
        let [_, _, h, w] = t.shape();
        let shift = (shift as usize).min(w - 1);
        let shifted = Tensor::from_fn(t.shape(), |b, c, y, x| t.get(b, c, y, (x + shift).min(w - 1)));
        let t_hat = box_blur(&shifted, blur.min(16) as usize);
        let v = edge_preserving_loss(&t_hat, t, &LossWeights::default(), &self.extractors).expect("single-channel maps");
        self.edge_terms = [v.l2, v.grad, v.feat, v.total];
        let (g, g_hat) = (gradient_magnitude(t), gradient_magnitude(&t_hat));
        let peak = g.data().iter().chain(g_hat.data()).fold(1e-12f64, |m, v| m.max(*v));
        let strip = Tensor::from_fn([1, 1, h, 2 * w], |_, _, y, x| {
            if x < w {
                g.get(0, 0, y, x) / peak
            } else {
                g_hat.get(0, 0, y, x - w) / peak
            }
        });
        rgba(&strip)
    }

    /// `[L2, gradient, feature, weighted total]` from the last [`Demo::edges`] call.
    pub fn edge_terms(&self) -> Vec<f64> {
        self.edge_terms.to_vec()
    }
}
