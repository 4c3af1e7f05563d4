//! Dual-modality α-blending rasterizer.
//!
//! Color channels are composited with the Gaussian opacity `o`, language
//! channels with the semantic indicator `l`, each with its own transmittance
//! accumulator, in one front-to-back traversal over depth-sorted splats.
//! Both chains see the fused per-Gaussian vector `u = fusion(c ⊕ f)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::projection::{self, conic_to_cov_grad, project_backward, ProjectedGaussian};
use crate::scene::{sigmoid, Camera, FeatureMap, GaussianCloud, Image, COLOR_DIM};

/// Blending weight used for the language chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorMode {
    /// Learned per-Gaussian semantic indicator.
    Learned,
    /// Language chain reuses the color opacity.
    ColorOpacity,
    /// Constant indicator for every Gaussian.
    Fixed(f64),
}

impl IndicatorMode {
    pub fn label(&self) -> String {
        match self {
            IndicatorMode::Learned => "learned".into(),
            IndicatorMode::ColorOpacity => "opacity".into(),
            IndicatorMode::Fixed(k) => format!("fixed:{k}"),
        }
    }
}

impl std::str::FromStr for IndicatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" | "dual" => Ok(IndicatorMode::Learned),
            "opacity" | "color_opacity" => Ok(IndicatorMode::ColorOpacity),
            other => {
                let k = other
                    .strip_prefix("fixed:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::param(format!("unknown indicator mode '{other}'")))?;
                if !(0.0..=1.0).contains(&k) {
                    return Err(Error::param(format!("fixed indicator {k} outside [0, 1]")));
                }
                Ok(IndicatorMode::Fixed(k))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterSettings {
    /// Per-modality contributions with α·P below this are skipped.
    pub alpha_floor: f64,
    /// A modality stops accumulating once its transmittance drops below this.
    pub min_transmittance: f64,
    /// Splat kernels are truncated beyond this Mahalanobis² radius.
    pub cutoff_sq: f64,
    pub tile_size: usize,
    /// Process tiles on the rayon pool.
    pub parallel: bool,
}

impl Default for RasterSettings {
    fn default() -> Self {
        RasterSettings {
            alpha_floor: 1.0 / 255.0,
            min_transmittance: 1e-4,
            cutoff_sq: 9.0,
            tile_size: 16,
            parallel: true,
        }
    }
}

impl RasterSettings {
    /// No contribution floor and no early stop.
    pub fn exact() -> Self {
        RasterSettings {
            alpha_floor: 0.0,
            min_transmittance: 0.0,
            ..Default::default()
        }
    }
}

/// Per-pixel state kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderAux {
    pub final_transmittance_color: Vec<f64>,
    pub final_transmittance_language: Vec<f64>,
    /// Number of tile-list entries visited per pixel before both chains stopped.
    pub visited: Vec<u32>,
    pub camera: Camera,
    pub num_gaussians: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    pub semantics: FeatureMap,
    pub aux: RenderAux,
}

/// Gradients for every learnable quantity of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub cloud: GaussianCloud,
    pub fusion: Fusion,
}

impl Gradients {
    pub fn zeros(cloud: &GaussianCloud, fusion: &Fusion) -> Self {
        Gradients {
            cloud: cloud.zeros_like(),
            fusion: fusion.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((_, a), (_, b)) in self
            .cloud
            .params_mut()
            .into_iter()
            .zip(other.cloud.params())
        {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for ((_, a), (_, b)) in self
            .fusion
            .named_params_mut()
            .into_iter()
            .zip(other.fusion.named_params())
        {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Projected, fused and activated splats in depth order.
struct Prepared {
    /// Cloud index of each splat.
    index: Vec<usize>,
    proj: Vec<ProjectedGaussian>,
    opacity: Vec<f64>,
    indicator: Vec<f64>,
    /// `dim` fused channels per splat.
    fused: Vec<f64>,
    dim: usize,
}

impl Prepared {
    fn new(cloud: &GaussianCloud, cam: &Camera, fusion: &Fusion, mode: IndicatorMode) -> Prepared {
        let dim = COLOR_DIM + cloud.feature_dim();
        assert_eq!(fusion.dim(), dim, "fusion width does not match cloud");
        let projected = projection::project(cloud, cam);
        let n = projected.len();
        let mut prep = Prepared {
            index: Vec::with_capacity(n),
            proj: Vec::with_capacity(n),
            opacity: Vec::with_capacity(n),
            indicator: Vec::with_capacity(n),
            fused: vec![0.0; n * dim],
            dim,
        };
        let mut x = vec![0.0; dim];
        for (s, (i, pg)) in projected.into_iter().enumerate() {
            let o = cloud.opacity(i);
            let l = match mode {
                IndicatorMode::Learned => cloud.indicator(i),
                IndicatorMode::ColorOpacity => o,
                IndicatorMode::Fixed(k) => k,
            };
            fused_input(cloud, i, &mut x);
            fusion.forward(&x, &mut prep.fused[s * dim..(s + 1) * dim]);
            prep.index.push(i);
            prep.proj.push(pg);
            prep.opacity.push(o);
            prep.indicator.push(l);
        }
        prep
    }

    fn len(&self) -> usize {
        self.index.len()
    }

    #[inline]
    fn fused(&self, s: usize) -> &[f64] {
        &self.fused[s * self.dim..(s + 1) * self.dim]
    }

    /// Kernel value at pixel center `v`, zero outside the cutoff.
    #[inline]
    fn weight(&self, s: usize, v: [f64; 2], cutoff_sq: f64) -> f64 {
        let q = self.proj[s].mahalanobis_sq(v);
        if q > cutoff_sq {
            0.0
        } else {
            (-0.5 * q).exp()
        }
    }
}

fn fused_input(cloud: &GaussianCloud, i: usize, x: &mut [f64]) {
    x[..COLOR_DIM].copy_from_slice(&cloud.color(i));
    x[COLOR_DIM..].copy_from_slice(cloud.feature(i));
}

#[inline]
fn pixel_center(px: usize, py: usize) -> [f64; 2] {
    [px as f64 + 0.5, py as f64 + 0.5]
}

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
    size: usize,
    /// Splat indices per tile, in depth order.
    lists: Vec<Vec<u32>>,
}

impl TileGrid {
    fn build(prep: &Prepared, width: usize, height: usize, settings: &RasterSettings) -> TileGrid {
        let size = settings.tile_size.max(1);
        let tiles_x = width.div_ceil(size);
        let tiles_y = height.div_ceil(size);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for s in 0..prep.len() {
            let pg = &prep.proj[s];
            let ext = (settings.cutoff_sq * pg.max_eigenvalue()).sqrt();
            let (x0, x1) = pixel_span(pg.mean2d[0], ext, width);
            let (y0, y1) = pixel_span(pg.mean2d[1], ext, height);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            for ty in y0 / size..=y1 / size {
                for tx in x0 / size..=x1 / size {
                    lists[ty * tiles_x + tx].push(s as u32);
                }
            }
        }
        TileGrid {
            tiles_x,
            tiles_y,
            size,
            lists,
        }
    }

    fn pixels(
        &self,
        tile: usize,
        width: usize,
        height: usize,
    ) -> impl Iterator<Item = (usize, usize)> {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.size;
        let y0 = ty * self.size;
        let x1 = (x0 + self.size).min(width);
        let y1 = (y0 + self.size).min(height);
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }
}

/// Inclusive range of pixel indices whose centers lie within `[c - ext, c + ext]`.
fn pixel_span(c: f64, ext: f64, n: usize) -> (usize, usize) {
    if !ext.is_finite() {
        return (0, n - 1);
    }
    let lo = (c - ext - 0.5).ceil().max(0.0);
    let hi = (c + ext - 0.5).floor().min(n as f64 - 1.0);
    if hi < lo {
        return (1, 0);
    }
    (lo as usize, hi as usize)
}

struct PixelResult {
    t_color: f64,
    t_lang: f64,
    visited: u32,
}

/// Front-to-back blend of one pixel over `list`.
fn shade_pixel(
    prep: &Prepared,
    list: &[u32],
    v: [f64; 2],
    settings: &RasterSettings,
    color: &mut [f64],
    feat: &mut [f64],
) -> PixelResult {
    let mut tc = 1.0;
    let mut tl = 1.0;
    let mut color_live = true;
    let mut lang_live = true;
    let mut visited = 0u32;
    for &s in list {
        if !(color_live || lang_live) {
            break;
        }
        visited += 1;
        let s = s as usize;
        let p = prep.weight(s, v, settings.cutoff_sq);
        if p == 0.0 {
            continue;
        }
        let u = prep.fused(s);
        if color_live {
            let a = prep.opacity[s] * p;
            if a >= settings.alpha_floor {
                let w = a * tc;
                for (c, uc) in color.iter_mut().zip(&u[..COLOR_DIM]) {
                    *c += uc * w;
                }
                tc *= 1.0 - a;
                if tc < settings.min_transmittance {
                    color_live = false;
                }
            }
        }
        if lang_live {
            let b = prep.indicator[s] * p;
            if b >= settings.alpha_floor {
                let w = b * tl;
                for (f, uf) in feat.iter_mut().zip(&u[COLOR_DIM..]) {
                    *f += uf * w;
                }
                tl *= 1.0 - b;
                if tl < settings.min_transmittance {
                    lang_live = false;
                }
            }
        }
    }
    PixelResult {
        t_color: tc,
        t_lang: tl,
        visited,
    }
}

fn check_inputs(cloud: &GaussianCloud, cam: &Camera, fusion: &Fusion) {
    debug_assert!(cloud.validate().is_ok());
    debug_assert!(cam.validate().is_ok());
    assert_eq!(
        fusion.dim(),
        COLOR_DIM + cloud.feature_dim(),
        "fusion width does not match cloud"
    );
}

/// Tiled forward rasterization.
pub fn rasterize(
    cloud: &GaussianCloud,
    cam: &Camera,
    fusion: &Fusion,
    mode: IndicatorMode,
    settings: &RasterSettings,
) -> RenderOutput {
    check_inputs(cloud, cam, fusion);
    let (w, h) = (cam.width, cam.height);
    let df = cloud.feature_dim();
    let prep = Prepared::new(cloud, cam, fusion, mode);
    let grid = TileGrid::build(&prep, w, h, settings);

    struct TileOut {
        pixels: Vec<(usize, usize)>,
        color: Vec<f64>,
        feat: Vec<f64>,
        result: Vec<PixelResult>,
    }
    let shade_tile = |t: usize| {
        let pixels: Vec<(usize, usize)> = grid.pixels(t, w, h).collect();
        let mut color = vec![0.0; pixels.len() * COLOR_DIM];
        let mut feat = vec![0.0; pixels.len() * df];
        let mut result = Vec::with_capacity(pixels.len());
        for (k, &(x, y)) in pixels.iter().enumerate() {
            result.push(shade_pixel(
                &prep,
                &grid.lists[t],
                pixel_center(x, y),
                settings,
                &mut color[k * COLOR_DIM..(k + 1) * COLOR_DIM],
                &mut feat[k * df..(k + 1) * df],
            ));
        }
        TileOut {
            pixels,
            color,
            feat,
            result,
        }
    };
    let tiles: Vec<TileOut> = if settings.parallel {
        (0..grid.count()).into_par_iter().map(shade_tile).collect()
    } else {
        (0..grid.count()).map(shade_tile).collect()
    };

    let mut color = Image::zeros(w, h, COLOR_DIM);
    let mut semantics = FeatureMap::zeros(w, h, df);
    let mut aux = RenderAux {
        final_transmittance_color: vec![1.0; w * h],
        final_transmittance_language: vec![1.0; w * h],
        visited: vec![0; w * h],
        camera: cam.clone(),
        num_gaussians: cloud.len(),
    };
    for tile in tiles {
        for (k, &(x, y)) in tile.pixels.iter().enumerate() {
            color
                .pixel_mut(x, y)
                .copy_from_slice(&tile.color[k * COLOR_DIM..(k + 1) * COLOR_DIM]);
            semantics
                .pixel_mut(x, y)
                .copy_from_slice(&tile.feat[k * df..(k + 1) * df]);
            let p = y * w + x;
            aux.final_transmittance_color[p] = tile.result[k].t_color;
            aux.final_transmittance_language[p] = tile.result[k].t_lang;
            aux.visited[p] = tile.result[k].visited;
        }
    }
    RenderOutput {
        color,
        semantics,
        aux,
    }
}

/// Neumaier-compensated accumulator.
#[derive(Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Untiled per-pixel oracle: every splat is visited for every pixel, with
/// compensated accumulation. Honors the same floor, early-stop and kernel
/// cutoff as [`rasterize`].
pub fn rasterize_reference(
    cloud: &GaussianCloud,
    cam: &Camera,
    fusion: &Fusion,
    mode: IndicatorMode,
    settings: &RasterSettings,
) -> RenderOutput {
    check_inputs(cloud, cam, fusion);
    let (w, h) = (cam.width, cam.height);
    let df = cloud.feature_dim();
    let prep = Prepared::new(cloud, cam, fusion, mode);
    let mut color = Image::zeros(w, h, COLOR_DIM);
    let mut semantics = FeatureMap::zeros(w, h, df);
    let mut aux = RenderAux {
        final_transmittance_color: vec![1.0; w * h],
        final_transmittance_language: vec![1.0; w * h],
        visited: vec![0; w * h],
        camera: cam.clone(),
        num_gaussians: cloud.len(),
    };
    let mut csum = vec![CompensatedSum::default(); COLOR_DIM];
    let mut fsum = vec![CompensatedSum::default(); df];
    for y in 0..h {
        for x in 0..w {
            let v = pixel_center(x, y);
            csum.fill(CompensatedSum::default());
            fsum.fill(CompensatedSum::default());
            let (mut tc, mut tl) = (1.0f64, 1.0f64);
            let (mut color_live, mut lang_live) = (true, true);
            for s in 0..prep.len() {
                let q = prep.proj[s].mahalanobis_sq(v);
                if q > settings.cutoff_sq {
                    continue;
                }
                let p = (-0.5 * q).exp();
                let u = prep.fused(s);
                let a = prep.opacity[s] * p;
                if color_live && a >= settings.alpha_floor {
                    for (acc, uc) in csum.iter_mut().zip(&u[..COLOR_DIM]) {
                        acc.add(uc * a * tc);
                    }
                    tc *= 1.0 - a;
                    color_live = tc >= settings.min_transmittance;
                }
                let b = prep.indicator[s] * p;
                if lang_live && b >= settings.alpha_floor {
                    for (acc, uf) in fsum.iter_mut().zip(&u[COLOR_DIM..]) {
                        acc.add(uf * b * tl);
                    }
                    tl *= 1.0 - b;
                    lang_live = tl >= settings.min_transmittance;
                }
            }
            for (o, acc) in color.pixel_mut(x, y).iter_mut().zip(&csum) {
                *o = acc.value();
            }
            for (o, acc) in semantics.pixel_mut(x, y).iter_mut().zip(&fsum) {
                *o = acc.value();
            }
            aux.final_transmittance_color[y * w + x] = tc;
            aux.final_transmittance_language[y * w + x] = tl;
            aux.visited[y * w + x] = prep.len() as u32;
        }
    }
    RenderOutput {
        color,
        semantics,
        aux,
    }
}

// Per-splat gradient slots: mean2d (2), conic (3), opacity, indicator, fused (dim).
const G_MEAN: usize = 0;
const G_CONIC: usize = 2;
const G_OPACITY: usize = 5;
const G_INDICATOR: usize = 6;
const G_FUSED: usize = 7;

struct Contribution {
    slot: usize,
    splat: usize,
    p: f64,
    alpha: f64,
    t: f64,
}

/// Reverse-mode pass producing gradients of `⟨dC, C⟩ + ⟨dF, F⟩`.
///
/// `out` must come from [`rasterize`] on the same inputs; the depth sort is
/// treated as constant.
#[allow(clippy::too_many_arguments)]
pub fn rasterize_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    fusion: &Fusion,
    mode: IndicatorMode,
    settings: &RasterSettings,
    out: &RenderOutput,
    d_color: &Image,
    d_semantics: &FeatureMap,
) -> Result<Gradients> {
    check_inputs(cloud, cam, fusion);
    let (w, h) = (cam.width, cam.height);
    let df = cloud.feature_dim();
    if out.aux.camera != *cam || out.aux.num_gaussians != cloud.len() {
        return Err(Error::InvalidState(
            "render output does not belong to this camera/cloud".into(),
        ));
    }
    if d_color.width != w || d_color.height != h || d_color.channels != COLOR_DIM {
        return Err(Error::InvalidState("color gradient shape mismatch".into()));
    }
    if d_semantics.width != w || d_semantics.height != h || d_semantics.channels != df {
        return Err(Error::InvalidState(
            "semantic gradient shape mismatch".into(),
        ));
    }

    let prep = Prepared::new(cloud, cam, fusion, mode);
    let grid = TileGrid::build(&prep, w, h, settings);
    let dim = prep.dim;
    let stride = G_FUSED + dim;

    let tile_grad = |t: usize| -> Vec<f64> {
        let list = &grid.lists[t];
        let mut g = vec![0.0; list.len() * stride];
        if list.is_empty() {
            return g;
        }
        let mut color_chain: Vec<Contribution> = Vec::new();
        let mut lang_chain: Vec<Contribution> = Vec::new();
        let mut d_p = vec![0.0; list.len()];
        let mut acc = vec![0.0; dim.max(COLOR_DIM)];
        for (x, y) in grid.pixels(t, w, h) {
            let v = pixel_center(x, y);
            let dc = d_color.pixel(x, y);
            let dfeat = d_semantics.pixel(x, y);
            let color_active = dc.iter().any(|g| *g != 0.0);
            let lang_active = dfeat.iter().any(|g| *g != 0.0);
            if !(color_active || lang_active) {
                continue;
            }
            color_chain.clear();
            lang_chain.clear();
            let visited = out.aux.visited[y * w + x] as usize;
            let (mut tc, mut tl) = (1.0f64, 1.0f64);
            let (mut color_live, mut lang_live) = (true, true);
            for (slot, &s) in list.iter().enumerate().take(visited) {
                let s = s as usize;
                let p = prep.weight(s, v, settings.cutoff_sq);
                if p == 0.0 {
                    continue;
                }
                if color_live {
                    let a = prep.opacity[s] * p;
                    if a >= settings.alpha_floor {
                        color_chain.push(Contribution {
                            slot,
                            splat: s,
                            p,
                            alpha: a,
                            t: tc,
                        });
                        tc *= 1.0 - a;
                        color_live = tc >= settings.min_transmittance;
                    }
                }
                if lang_live {
                    let b = prep.indicator[s] * p;
                    if b >= settings.alpha_floor {
                        lang_chain.push(Contribution {
                            slot,
                            splat: s,
                            p,
                            alpha: b,
                            t: tl,
                        });
                        tl *= 1.0 - b;
                        lang_live = tl >= settings.min_transmittance;
                    }
                }
            }

            // Back-to-front: `acc` holds the blend of everything behind the
            // current splat as seen from fresh transmittance.
            if color_active {
                acc[..COLOR_DIM].fill(0.0);
                for c in color_chain.iter().rev() {
                    let u = &prep.fused(c.splat)[..COLOR_DIM];
                    let gs = &mut g[c.slot * stride..(c.slot + 1) * stride];
                    let mut d_alpha = 0.0;
                    for k in 0..COLOR_DIM {
                        d_alpha += (u[k] - acc[k]) * dc[k];
                        gs[G_FUSED + k] += c.alpha * c.t * dc[k];
                        acc[k] = u[k] * c.alpha + (1.0 - c.alpha) * acc[k];
                    }
                    d_alpha *= c.t;
                    gs[G_OPACITY] += d_alpha * c.p;
                    d_p[c.slot] += d_alpha * prep.opacity[c.splat];
                }
            }
            if lang_active {
                acc[..df].fill(0.0);
                for c in lang_chain.iter().rev() {
                    let u = &prep.fused(c.splat)[COLOR_DIM..];
                    let gs = &mut g[c.slot * stride..(c.slot + 1) * stride];
                    let mut d_beta = 0.0;
                    for k in 0..df {
                        d_beta += (u[k] - acc[k]) * dfeat[k];
                        gs[G_FUSED + COLOR_DIM + k] += c.alpha * c.t * dfeat[k];
                        acc[k] = u[k] * c.alpha + (1.0 - c.alpha) * acc[k];
                    }
                    d_beta *= c.t;
                    gs[G_INDICATOR] += d_beta * c.p;
                    d_p[c.slot] += d_beta * prep.indicator[c.splat];
                }
            }

            // P = exp(-q/2): push the kernel gradient to mean2d and conic.
            for c in color_chain.iter().chain(lang_chain.iter()) {
                let dp = std::mem::take(&mut d_p[c.slot]);
                if dp == 0.0 {
                    continue;
                }
                let pg = &prep.proj[c.splat];
                let dx = v[0] - pg.mean2d[0];
                let dy = v[1] - pg.mean2d[1];
                let [a, b, cc] = pg.conic;
                let gs = &mut g[c.slot * stride..(c.slot + 1) * stride];
                let dpp = dp * c.p;
                gs[G_MEAN] += dpp * (a * dx + b * dy);
                gs[G_MEAN + 1] += dpp * (b * dx + cc * dy);
                gs[G_CONIC] += -0.5 * dpp * dx * dx;
                gs[G_CONIC + 1] += -dpp * dx * dy;
                gs[G_CONIC + 2] += -0.5 * dpp * dy * dy;
            }
        }
        g
    };

    let per_tile: Vec<Vec<f64>> = if settings.parallel {
        (0..grid.count()).into_par_iter().map(tile_grad).collect()
    } else {
        (0..grid.count()).map(tile_grad).collect()
    };

    // Fixed tile order keeps the reduction bitwise deterministic.
    let mut splat_grad = vec![0.0; prep.len() * stride];
    for (t, g) in per_tile.iter().enumerate() {
        for (slot, &s) in grid.lists[t].iter().enumerate() {
            let dst = &mut splat_grad[s as usize * stride..(s as usize + 1) * stride];
            for (d, v) in dst.iter_mut().zip(&g[slot * stride..(slot + 1) * stride]) {
                *d += v;
            }
        }
    }

    let mut grads = Gradients::zeros(cloud, fusion);
    let mut x = vec![0.0; dim];
    let mut dx = vec![0.0; dim];
    for s in 0..prep.len() {
        let gs = &splat_grad[s * stride..(s + 1) * stride];
        if gs.iter().all(|v| *v == 0.0) {
            continue;
        }
        let i = prep.index[s];
        let o = prep.opacity[s];
        let mut d_opacity = gs[G_OPACITY];
        match mode {
            IndicatorMode::Learned => {
                let l = prep.indicator[s];
                grads.cloud.indicator_logits[i] += gs[G_INDICATOR] * l * (1.0 - l);
            }
            IndicatorMode::ColorOpacity => d_opacity += gs[G_INDICATOR],
            IndicatorMode::Fixed(_) => {}
        }
        grads.cloud.opacity_logits[i] += d_opacity * o * (1.0 - o);

        fused_input(cloud, i, &mut x);
        dx.fill(0.0);
        fusion.backward(&x, &gs[G_FUSED..], &mut grads.fusion, &mut dx);
        for k in 0..COLOR_DIM {
            let c = x[k];
            grads.cloud.color_logits[i][k] += dx[k] * c * (1.0 - c);
        }
        for (gf, d) in grads.cloud.feature_mut(i).iter_mut().zip(&dx[COLOR_DIM..]) {
            *gf += d;
        }

        let pg = &prep.proj[s];
        let d_conic = [gs[G_CONIC], gs[G_CONIC + 1], gs[G_CONIC + 2]];
        let d_cov = conic_to_cov_grad(&pg.conic, &d_conic);
        let pgrad = project_backward(
            &cloud.positions[i],
            &cloud.log_scales[i],
            &cloud.rotations[i],
            cam,
            [gs[G_MEAN], gs[G_MEAN + 1]],
            &d_cov,
        );
        for k in 0..3 {
            grads.cloud.positions[i][k] += pgrad.position[k];
            grads.cloud.log_scales[i][k] += pgrad.log_scale[k];
        }
        for k in 0..4 {
            grads.cloud.rotations[i][k] += pgrad.rotation[k];
        }
    }
    Ok(grads)
}

/// Histogram of `l - o` over all Gaussians: `bins` equal-width bins on [-1, 1].
pub fn indicator_opacity_histogram(cloud: &GaussianCloud, bins: usize) -> Vec<(f64, f64, usize)> {
    let mut counts = vec![0usize; bins];
    for i in 0..cloud.len() {
        let d = sigmoid(cloud.indicator_logits[i]) - sigmoid(cloud.opacity_logits[i]);
        let b = (((d + 1.0) * 0.5 * bins as f64).floor() as isize).clamp(0, bins as isize - 1);
        counts[b as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, n)| {
            let lo = -1.0 + 2.0 * b as f64 / bins as f64;
            (lo, lo + 2.0 / bins as f64, n)
        })
        .collect()
}
