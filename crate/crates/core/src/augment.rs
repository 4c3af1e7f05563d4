//! Camera-view blending augmentation.
//!
//! Two training views are mixed with one ratio `k`: rotations by Slerp (Lerp
//! when nearly aligned), camera centers linearly, ground-truth language maps
//! affinely. The blended view's loss is weighted by the SSIM of the two
//! source images. Throughout, `k = 1` selects the first view.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{quat_normalize, Camera, FeatureMap, Image, Quat, TrainSample};

/// Above this |cos θ| the blend falls back to normalized linear interpolation.
pub const LERP_THRESHOLD: f64 = 0.995;

/// Interpolate between rotations; `k = 1` gives `q1`, `k = 0` gives `q2`.
pub fn slerp(q1: &Quat, q2: &Quat, k: f64) -> Result<Quat> {
    let a = quat_normalize(q1)?;
    let b = quat_normalize(q2)?;
    let cos = a
        .iter()
        .zip(&b)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        .clamp(-1.0, 1.0);
    let sign = if cos < 0.0 { -1.0 } else { 1.0 };
    let (wa, wb) = if cos.abs() > LERP_THRESHOLD {
        (k * sign, 1.0 - k)
    } else {
        let theta = cos.acos();
        let s = theta.sin();
        (sign * (k * theta).sin() / s, ((1.0 - k) * theta).sin() / s)
    };
    quat_normalize(&[
        wa * a[0] + wb * b[0],
        wa * a[1] + wb * b[1],
        wa * a[2] + wb * b[2],
        wa * a[3] + wb * b[3],
    ])
}

pub fn lerp_translation(t1: &[f64; 3], t2: &[f64; 3], k: f64) -> [f64; 3] {
    [
        k * t1[0] + (1.0 - k) * t2[0],
        k * t1[1] + (1.0 - k) * t2[1],
        k * t1[2] + (1.0 - k) * t2[2],
    ]
}

/// Distribution of the interpolation ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    Beta {
        alpha: f64,
        beta: f64,
    },
    Uniform,
    /// Standard normal clamped to [0, 1].
    Gaussian,
    Fixed(f64),
}

impl Default for RatioMode {
    fn default() -> Self {
        RatioMode::Beta {
            alpha: 0.2,
            beta: 0.2,
        }
    }
}

impl RatioMode {
    pub fn label(&self) -> String {
        match self {
            RatioMode::Beta { alpha, beta } if *alpha == 0.2 && *beta == 0.2 => "beta".into(),
            RatioMode::Beta { alpha, beta } => format!("beta:{alpha},{beta}"),
            RatioMode::Uniform => "uniform".into(),
            RatioMode::Gaussian => "gauss".into(),
            RatioMode::Fixed(k) => format!("fixed:{k}"),
        }
    }
}

impl std::str::FromStr for RatioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::param(format!("unknown ratio mode '{s}'"));
        match s {
            "beta" => Ok(RatioMode::default()),
            "uniform" | "even" => Ok(RatioMode::Uniform),
            "gauss" | "gaussian" => Ok(RatioMode::Gaussian),
            _ => {
                if let Some(v) = s.strip_prefix("fixed:") {
                    let k: f64 = v.parse().map_err(|_| bad())?;
                    if !(0.0..=1.0).contains(&k) {
                        return Err(Error::param(format!("fixed ratio {k} outside [0, 1]")));
                    }
                    Ok(RatioMode::Fixed(k))
                } else if let Some(v) = s.strip_prefix("beta:") {
                    let parts: Vec<f64> = v
                        .split(',')
                        .map(|p| p.parse::<f64>().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    let (alpha, beta) = match parts[..] {
                        [a] => (a, a),
                        [a, b] => (a, b),
                        _ => return Err(bad()),
                    };
                    if !(alpha > 0.0 && beta > 0.0) {
                        return Err(bad());
                    }
                    Ok(RatioMode::Beta { alpha, beta })
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// Beta(α, β) draw by Jöhnk's method, evaluated in log space so small
/// shape parameters cannot underflow.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        if u == 0.0 || v == 0.0 {
            continue;
        }
        let lx = u.ln() / alpha;
        let ly = v.ln() / beta;
        let m = lx.max(ly);
        let lsum = m + ((lx - m).exp() + (ly - m).exp()).ln();
        if lsum <= 0.0 {
            return (lx - lsum).exp();
        }
    }
}

pub fn sample_ratio<R: Rng + ?Sized>(mode: RatioMode, rng: &mut R) -> f64 {
    match mode {
        RatioMode::Beta { alpha, beta } => sample_beta(alpha, beta, rng),
        RatioMode::Uniform => rng.random::<f64>(),
        RatioMode::Gaussian => {
            let z: f64 = StandardNormal.sample(rng);
            z.clamp(0.0, 1.0)
        }
        RatioMode::Fixed(k) => k,
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian blur of one plane; the window is clipped at the
/// borders and renormalized.
fn blur(plane: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (j, kv) in kernel.iter().enumerate() {
                    let o = j as isize - r;
                    let (sx, sy) = if horizontal {
                        (x as isize + o, y as isize)
                    } else {
                        (x as isize, y as isize + o)
                    };
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    acc += kv * src[sy as usize * w + sx as usize];
                    norm += kv;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Mean SSIM over pixels and channels (11×11 Gaussian window, σ = 1.5),
/// clamped to [0, 1].
pub fn ssim(i1: &Image, i2: &Image) -> Result<f64> {
    if !i1.same_shape(i2) {
        return Err(Error::param(format!(
            "ssim inputs differ in shape: {}x{}x{} vs {}x{}x{}",
            i1.width, i1.height, i1.channels, i2.width, i2.height, i2.channels
        )));
    }
    let (w, h, ch) = (i1.width, i1.height, i1.channels);
    if w * h * ch == 0 {
        return Err(Error::param("ssim of an empty image"));
    }
    let kernel = ssim_kernel();
    let mut total = 0.0;
    for c in 0..ch {
        let x: Vec<f64> = (0..w * h).map(|p| i1.data[p * ch + c]).collect();
        let y: Vec<f64> = (0..w * h).map(|p| i2.data[p * ch + c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = blur(&x, w, h, &kernel);
        let my = blur(&y, w, h, &kernel);
        let sxx = blur(&xx, w, h, &kernel);
        let syy = blur(&yy, w, h, &kernel);
        let sxy = blur(&xy, w, h, &kernel);
        for p in 0..w * h {
            let vx = sxx[p] - mx[p] * mx[p];
            let vy = syy[p] - my[p] * my[p];
            let cov = sxy[p] - mx[p] * my[p];
            let num = (2.0 * mx[p] * my[p] + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx[p] * mx[p] + my[p] * my[p] + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
        }
    }
    Ok((total / (w * h * ch) as f64).clamp(0.0, 1.0))
}

/// Which parts of the blend are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlendOptions {
    pub rotation: bool,
    pub translation: bool,
    /// Weight the blend loss by SSIM(I₁, I₂); otherwise weight 1.
    pub ssim_weight: bool,
}

impl Default for BlendOptions {
    fn default() -> Self {
        BlendOptions {
            rotation: true,
            translation: true,
            ssim_weight: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlendSample {
    pub pose: Camera,
    pub gt_features: FeatureMap,
    pub weight: f64,
    pub k: f64,
}

fn check_pair(s1: &TrainSample, s2: &TrainSample) -> Result<()> {
    let (a, b) = (&s1.camera, &s2.camera);
    if a.width != b.width || a.height != b.height {
        return Err(Error::param("blended views must share image dimensions"));
    }
    if !s1.image.same_shape(&s2.image) || !s1.gt_features.same_shape(&s2.gt_features) {
        return Err(Error::param(
            "blended views must share image and feature shapes",
        ));
    }
    Ok(())
}

/// Blend two samples with a given ratio.
pub fn blend_with_ratio(
    s1: &TrainSample,
    s2: &TrainSample,
    k: f64,
    options: BlendOptions,
) -> Result<BlendSample> {
    check_pair(s1, s2)?;
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::param(format!("blend ratio {k} outside [0, 1]")));
    }
    let rotation = if options.rotation {
        slerp(&s1.camera.rotation, &s2.camera.rotation, k)?
    } else {
        s1.camera.rotation
    };
    let center = if options.translation {
        lerp_translation(&s1.camera.center(), &s2.camera.center(), k)
    } else {
        s1.camera.center()
    };
    let pose = s1.camera.with_pose(rotation, center);
    let h1 = &s1.gt_features;
    let h2 = &s2.gt_features;
    let data = h1
        .data
        .iter()
        .zip(&h2.data)
        .map(|(a, b)| k * a + (1.0 - k) * b)
        .collect();
    let gt_features = FeatureMap::from_data(h1.width, h1.height, h1.channels, data)?;
    let weight = if options.ssim_weight {
        ssim(&s1.image, &s2.image)?
    } else {
        1.0
    };
    Ok(BlendSample {
        pose,
        gt_features,
        weight,
        k,
    })
}

/// Draw a ratio from `mode` and blend.
pub fn make_blend_sample<R: Rng + ?Sized>(
    s1: &TrainSample,
    s2: &TrainSample,
    mode: RatioMode,
    options: BlendOptions,
    rng: &mut R,
) -> Result<BlendSample> {
    check_pair(s1, s2)?;
    let k = sample_ratio(mode, rng);
    blend_with_ratio(s1, s2, k, options)
}
