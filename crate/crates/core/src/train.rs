//! Losses, Adam, and the two-view training loop.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{make_blend_sample, BlendOptions, BlendSample, RatioMode};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionKind, DEFAULT_HEADS};
use crate::raster::{
    rasterize, rasterize_backward, Gradients, IndicatorMode, RasterSettings, RenderOutput,
};
use crate::scene::{
    logit, Dataset, FeatureMap, GaussianCloud, Image, ParamGroup, TrainSample, COLOR_DIM,
    IDENTITY_QUAT, INITIAL_ALPHA,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub color: f64,
    pub opacity: f64,
    pub feature: f64,
    pub indicator: f64,
    pub attention: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            scale: 5e-3,
            rotation: 1e-3,
            color: 5e-3,
            opacity: 5e-2,
            feature: 5e-3,
            indicator: 5e-2,
            attention: 5e-3,
        }
    }
}

impl LearningRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Position => self.position,
            ParamGroup::Scale => self.scale,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Color => self.color,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Feature => self.feature,
            ParamGroup::Indicator => self.indicator,
            ParamGroup::Attention => self.attention,
        }
    }

    pub fn set(&mut self, group: ParamGroup, lr: f64) {
        let slot = match group {
            ParamGroup::Position => &mut self.position,
            ParamGroup::Scale => &mut self.scale,
            ParamGroup::Rotation => &mut self.rotation,
            ParamGroup::Color => &mut self.color,
            ParamGroup::Opacity => &mut self.opacity,
            ParamGroup::Feature => &mut self.feature,
            ParamGroup::Indicator => &mut self.indicator,
            ParamGroup::Attention => &mut self.attention,
        };
        *slot = lr;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub lr: LearningRates,
    pub adam: AdamParams,
    pub seed: u64,
    pub fusion: FusionKind,
    pub heads: usize,
    pub indicator: IndicatorMode,
    /// `None` disables view blending entirely.
    pub blend: Option<BlendOptions>,
    pub ratio: RatioMode,
    pub raster: RasterSettings,
    /// Emit a checkpoint every this many iterations; 0 disables.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.2,
            iterations: 15000,
            lr: LearningRates::default(),
            adam: AdamParams::default(),
            seed: 0,
            fusion: FusionKind::SelfAttention,
            heads: DEFAULT_HEADS,
            indicator: IndicatorMode::Learned,
            blend: Some(BlendOptions::default()),
            ratio: RatioMode::default(),
            raster: RasterSettings::default(),
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for g in ParamGroup::ALL {
            let lr = self.lr.get(g);
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::param(format!(
                    "learning rate for {} must be > 0",
                    g.name()
                )));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda must be finite and >= 0"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::param("invalid Adam hyperparameters"));
        }
        if self.heads == 0 {
            return Err(Error::param("attention width must be >= 1"));
        }
        Ok(())
    }

    /// Whether the blended-view term contributes to the objective.
    pub fn blending_active(&self) -> bool {
        self.blend.is_some() && self.lambda > 0.0
    }
}

fn mse_with_grad(pred: &[f64], target: &[f64], scale: f64, grad: Option<&mut [f64]>) -> f64 {
    let n = pred.len().max(1) as f64;
    let mut sum = 0.0;
    match grad {
        Some(g) => {
            for ((p, t), gi) in pred.iter().zip(target).zip(g.iter_mut()) {
                let d = p - t;
                sum += d * d;
                *gi = scale * 2.0 * d / n;
            }
        }
        None => {
            for (p, t) in pred.iter().zip(target) {
                let d = p - t;
                sum += d * d;
            }
        }
    }
    sum / n
}

fn check_render(out: &RenderOutput, sample: &TrainSample) -> Result<()> {
    if !out.color.same_shape(&sample.image) || !out.semantics.same_shape(&sample.gt_features) {
        return Err(Error::param("render and sample dimensions differ"));
    }
    Ok(())
}

/// Color MSE plus semantic MSE, each averaged over pixels and channels.
pub fn raster_loss(out: &RenderOutput, sample: &TrainSample) -> Result<f64> {
    check_render(out, sample)?;
    Ok(
        mse_with_grad(&out.color.data, &sample.image.data, 1.0, None)
            + mse_with_grad(&out.semantics.data, &sample.gt_features.data, 1.0, None),
    )
}

/// [`raster_loss`] together with its gradients w.r.t. the rendered maps,
/// each multiplied by `scale`.
pub fn raster_loss_grad(
    out: &RenderOutput,
    sample: &TrainSample,
    scale: f64,
) -> Result<(f64, Image, FeatureMap)> {
    check_render(out, sample)?;
    let mut dc = Image::zeros(out.color.width, out.color.height, out.color.channels);
    let mut df = FeatureMap::zeros(
        out.semantics.width,
        out.semantics.height,
        out.semantics.channels,
    );
    let lc = mse_with_grad(
        &out.color.data,
        &sample.image.data,
        scale,
        Some(&mut dc.data),
    );
    let lf = mse_with_grad(
        &out.semantics.data,
        &sample.gt_features.data,
        scale,
        Some(&mut df.data),
    );
    Ok((lc + lf, dc, df))
}

/// SSIM-weighted semantic MSE of a blended view.
pub fn blend_loss(rendered: &FeatureMap, blend: &BlendSample) -> Result<f64> {
    if !rendered.same_shape(&blend.gt_features) {
        return Err(Error::param("blended render and target dimensions differ"));
    }
    Ok(blend.weight * mse_with_grad(&rendered.data, &blend.gt_features.data, 1.0, None))
}

/// [`blend_loss`] and its gradient w.r.t. the rendered map, times `scale`.
pub fn blend_loss_grad(
    rendered: &FeatureMap,
    blend: &BlendSample,
    scale: f64,
) -> Result<(f64, FeatureMap)> {
    if !rendered.same_shape(&blend.gt_features) {
        return Err(Error::param("blended render and target dimensions differ"));
    }
    let mut df = FeatureMap::zeros(rendered.width, rendered.height, rendered.channels);
    let mse = mse_with_grad(
        &rendered.data,
        &blend.gt_features.data,
        scale * blend.weight,
        Some(&mut df.data),
    );
    Ok((blend.weight * mse, df))
}

/// First and second moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Bias-corrected Adam update. Returns `false`, leaving everything untouched,
/// when any gradient is non-finite.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    adam: &AdamParams,
) -> bool {
    assert_eq!(
        params.len(),
        grads.len(),
        "parameter/gradient length mismatch"
    );
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = adam.beta1 * state.m[i] + (1.0 - adam.beta1) * g;
        state.v[i] = adam.beta2 * state.v[i] + (1.0 - adam.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + adam.eps);
    }
    true
}

/// Adam state for every parameter group, in [`ParamGroup::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub states: Vec<(ParamGroup, AdamState)>,
}

impl Optimizer {
    pub fn new(cloud: &GaussianCloud, fusion: &Fusion) -> Self {
        let mut states: Vec<(ParamGroup, AdamState)> = cloud
            .params()
            .iter()
            .map(|(g, p)| (*g, AdamState::new(p.len())))
            .collect();
        states.push((ParamGroup::Attention, AdamState::new(fusion.num_params())));
        Optimizer { states }
    }

    pub fn state(&self, group: ParamGroup) -> &AdamState {
        &self
            .states
            .iter()
            .find(|(g, _)| *g == group)
            .expect("every group has state")
            .1
    }

    fn state_mut(&mut self, group: ParamGroup) -> &mut AdamState {
        &mut self
            .states
            .iter_mut()
            .find(|(g, _)| *g == group)
            .expect("every group has state")
            .1
    }

    /// Apply one update per group. Returns the groups skipped because of
    /// non-finite gradients.
    pub fn step(
        &mut self,
        cloud: &mut GaussianCloud,
        fusion: &mut Fusion,
        grads: &Gradients,
        lr: &LearningRates,
        adam: &AdamParams,
    ) -> Vec<ParamGroup> {
        let mut skipped = Vec::new();
        for ((group, p), (_, g)) in cloud.params_mut().into_iter().zip(grads.cloud.params()) {
            if !adam_step(p, g, self.state_mut(group), lr.get(group), adam) {
                skipped.push(group);
            }
        }
        if fusion.num_params() > 0 {
            let mut flat: Vec<f64> = fusion
                .named_params()
                .iter()
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
            let gflat: Vec<f64> = grads
                .fusion
                .named_params()
                .iter()
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
            if adam_step(
                &mut flat,
                &gflat,
                self.state_mut(ParamGroup::Attention),
                lr.attention,
                adam,
            ) {
                let mut off = 0;
                for (_, p) in fusion.named_params_mut() {
                    let n = p.len();
                    p.copy_from_slice(&flat[off..off + n]);
                    off += n;
                }
            } else {
                skipped.push(ParamGroup::Attention);
            }
        }
        for g in &skipped {
            log::warn!("non-finite gradient in group {}; update skipped", g.name());
        }
        skipped
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub cloud: GaussianCloud,
    pub fusion: Fusion,
    pub optimizer: Optimizer,
    pub iteration: u64,
}

impl TrainState {
    pub fn new(cloud: GaussianCloud, fusion: Fusion) -> Self {
        let optimizer = Optimizer::new(&cloud, &fusion);
        TrainState {
            cloud,
            fusion,
            optimizer,
            iteration: 0,
        }
    }

    /// Fresh state whose fusion layer is initialized from `cfg.seed`.
    pub fn initial(cloud: GaussianCloud, cfg: &TrainConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, 0);
        let fusion = Fusion::new(
            cfg.fusion,
            COLOR_DIM,
            cloud.feature_dim(),
            cfg.heads,
            &mut rng,
        );
        TrainState::new(cloud, fusion)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initial cloud from seed points: scales from the mean distance to the
/// three nearest neighbours, identity rotations, opacity and indicator at
/// [`INITIAL_ALPHA`], features close to zero.
pub fn init_cloud<R: Rng + ?Sized>(
    points: &[[f64; 3]],
    colors: Option<&[[f64; 3]]>,
    feature_dim: usize,
    rng: &mut R,
) -> Result<GaussianCloud> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::param("point and color counts differ"));
        }
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::param("non-finite initialization point"));
    }
    let mut cloud = GaussianCloud::new(feature_dim);
    let mut feature = vec![0.0; feature_dim];
    for (i, p) in points.iter().enumerate() {
        let mut d: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| {
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
            })
            .collect();
        d.sort_by(f64::total_cmp);
        let k = d.len().min(3);
        let dist = if k == 0 {
            0.05
        } else {
            d[..k].iter().sum::<f64>() / k as f64
        };
        let s = dist.max(1e-4).ln();
        let color = match colors {
            Some(c) => c[i].map(|v| logit(v.clamp(0.02, 0.98))),
            None => [0.0; 3],
        };
        for f in feature.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *f = 0.01 * z;
        }
        cloud.push(
            *p,
            [s; 3],
            IDENTITY_QUAT,
            logit(INITIAL_ALPHA),
            color,
            &feature,
            logit(INITIAL_ALPHA),
        );
    }
    Ok(cloud)
}

/// Loss terms of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub l1: f64,
    pub l2: f64,
    pub lb: f64,
    pub total: f64,
}

/// Total objective `L(W₁) + L(W₂) + λ·L_b(W_b)` and its gradients.
pub fn objective(
    cloud: &GaussianCloud,
    fusion: &Fusion,
    s1: &TrainSample,
    s2: &TrainSample,
    blend: Option<&BlendSample>,
    cfg: &TrainConfig,
) -> Result<(StepLosses, Gradients)> {
    let mut grads = Gradients::zeros(cloud, fusion);
    let mut losses = StepLosses::default();
    for (slot, s) in [(&mut losses.l1, s1), (&mut losses.l2, s2)] {
        let out = rasterize(cloud, &s.camera, fusion, cfg.indicator, &cfg.raster);
        let (l, dc, df) = raster_loss_grad(&out, s, 1.0)?;
        *slot = l;
        let g = rasterize_backward(
            cloud,
            &s.camera,
            fusion,
            cfg.indicator,
            &cfg.raster,
            &out,
            &dc,
            &df,
        )?;
        grads.add_assign(&g);
    }
    if let Some(b) = blend {
        let out = rasterize(cloud, &b.pose, fusion, cfg.indicator, &cfg.raster);
        let (lb, df) = blend_loss_grad(&out.semantics, b, cfg.lambda)?;
        losses.lb = lb;
        let dc = Image::zeros(out.color.width, out.color.height, out.color.channels);
        let g = rasterize_backward(
            cloud,
            &b.pose,
            fusion,
            cfg.indicator,
            &cfg.raster,
            &out,
            &dc,
            &df,
        )?;
        grads.add_assign(&g);
    }
    losses.total = losses.l1 + losses.l2 + cfg.lambda * losses.lb;
    Ok((losses, grads))
}

/// One optimization step on the pair `(s1, s2)`.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    s1: &TrainSample,
    s2: &TrainSample,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepLosses> {
    let blend = match cfg.blend {
        Some(options) if cfg.blending_active() => {
            Some(make_blend_sample(s1, s2, cfg.ratio, options, rng)?)
        }
        _ => None,
    };
    let (losses, grads) = objective(&state.cloud, &state.fusion, s1, s2, blend.as_ref(), cfg)?;
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at iteration {}: L1={} L2={} Lb={}",
            state.iteration + 1,
            losses.l1,
            losses.l2,
            losses.lb
        )));
    }
    state.optimizer.step(
        &mut state.cloud,
        &mut state.fusion,
        &grads,
        &cfg.lr,
        &cfg.adam,
    );
    state.iteration += 1;
    Ok(losses)
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: u64,
    pub losses: StepLosses,
}

/// Run `cfg.iterations` steps on uniformly drawn view pairs. `on_checkpoint`
/// is called every `cfg.checkpoint_interval` iterations.
pub fn train<F>(
    dataset: &Dataset,
    mut state: TrainState,
    cfg: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<(TrainState, Vec<LossRecord>)>
where
    F: FnMut(&TrainState, &[LossRecord]) -> Result<()>,
{
    cfg.validate()?;
    dataset.validate()?;
    state.cloud.validate()?;
    let n = dataset.samples.len();
    if n < 2 && cfg.iterations > 0 {
        return Err(Error::param("training needs at least two views"));
    }
    let mut pair_rng = stream_rng(cfg.seed, 1);
    let mut ratio_rng = stream_rng(cfg.seed, 2);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let i = pair_rng.random_range(0..n);
        let mut j = pair_rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let losses = train_step(
            &mut state,
            &dataset.samples[i],
            &dataset.samples[j],
            cfg,
            &mut ratio_rng,
        )?;
        trace.push(LossRecord {
            iter: state.iteration,
            losses,
        });
        if state.iteration % 500 == 0 {
            log::info!("iter {} loss {:.6}", state.iteration, losses.total);
        }
        if cfg.checkpoint_interval > 0 && state.iteration % cfg.checkpoint_interval as u64 == 0 {
            on_checkpoint(&state, &trace)?;
        }
    }
    Ok((state, trace))
}

/// Write the trace as CSV with columns `iter,L1,L2,Lb,total`.
pub fn write_trace_csv<W: Write>(trace: &[LossRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "iter,L1,L2,Lb,total")?;
    for r in trace {
        let l = &r.losses;
        writeln!(w, "{},{},{},{},{}", r.iter, l.l1, l.l2, l.lb, l.total)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RenderAux;
    use crate::scene::Camera;

    fn camera(w: usize, h: usize) -> Camera {
        Camera {
            fx: 10.0,
            fy: 10.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            rotation: IDENTITY_QUAT,
            translation: [0.0; 3],
        }
    }

    fn output(color: Vec<f64>, sem: Vec<f64>, df: usize) -> RenderOutput {
        let n = color.len() / 3;
        RenderOutput {
            color: Image::from_data(n, 1, 3, color).unwrap(),
            semantics: FeatureMap::from_data(n, 1, df, sem).unwrap(),
            aux: RenderAux {
                final_transmittance_color: vec![1.0; n],
                final_transmittance_language: vec![1.0; n],
                visited: vec![0; n],
                camera: camera(n, 1),
                num_gaussians: 0,
            },
        }
    }

    fn sample(color: Vec<f64>, sem: Vec<f64>, df: usize) -> TrainSample {
        let n = color.len() / 3;
        TrainSample {
            image: Image::from_data(n, 1, 3, color).unwrap(),
            camera: camera(n, 1),
            gt_features: FeatureMap::from_data(n, 1, df, sem).unwrap(),
        }
    }

    #[test]
    fn raster_loss_examples() {
        let s = sample(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![0.0; 6], 3);
        let out = output(s.image.data.clone(), s.gt_features.data.clone(), 3);
        assert_eq!(raster_loss(&out, &s).unwrap(), 0.0);

        let out = output(s.image.data.clone(), vec![1.0; 6], 3);
        assert!((raster_loss(&out, &s).unwrap() - 1.0).abs() < 1e-15);

        let s = sample(vec![0.0; 3], vec![0.0; 3], 3);
        let out = output(vec![0.5, 0.0, 0.0], vec![0.0, 0.5, 0.0], 3);
        let l = raster_loss(&out, &s).unwrap();
        assert!((l - 0.5 / 3.0).abs() < 1e-12, "{l}");

        let bad = sample(vec![0.0; 6], vec![0.0; 6], 3);
        assert!(raster_loss(&out, &bad).is_err());
    }

    #[test]
    fn blend_loss_examples() {
        let mut b = BlendSample {
            pose: camera(2, 1),
            gt_features: FeatureMap::from_data(2, 1, 2, vec![0.0; 4]).unwrap(),
            weight: 0.5,
            k: 0.5,
        };
        let same = b.gt_features.clone();
        assert_eq!(blend_loss(&same, &b).unwrap(), 0.0);
        let off = FeatureMap::from_data(2, 1, 2, vec![1.0; 4]).unwrap();
        assert!((blend_loss(&off, &b).unwrap() - 0.5).abs() < 1e-15);
        b.weight = 0.0;
        assert_eq!(blend_loss(&off, &b).unwrap(), 0.0);
        let wrong = FeatureMap::from_data(1, 1, 2, vec![1.0; 2]).unwrap();
        assert!(blend_loss(&wrong, &b).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let s = sample(
            vec![0.1, 0.7, 0.3, 0.9, 0.2, 0.5],
            vec![0.4, -0.2, 0.8, 0.0],
            2,
        );
        let out = output(
            vec![0.3, 0.1, 0.6, 0.2, 0.2, 0.1],
            vec![0.1, 0.3, -0.5, 0.6],
            2,
        );
        let (l, dc, df) = raster_loss_grad(&out, &s, 1.0).unwrap();
        assert_eq!(l, raster_loss(&out, &s).unwrap());
        let h = 1e-6;
        for i in 0..6 {
            let mut p = out.clone();
            p.color.data[i] += h;
            let mut m = out.clone();
            m.color.data[i] -= h;
            let fd = (raster_loss(&p, &s).unwrap() - raster_loss(&m, &s).unwrap()) / (2.0 * h);
            assert!((fd - dc.data[i]).abs() < 1e-8);
        }
        for i in 0..4 {
            let mut p = out.clone();
            p.semantics.data[i] += h;
            let mut m = out.clone();
            m.semantics.data[i] -= h;
            let fd = (raster_loss(&p, &s).unwrap() - raster_loss(&m, &s).unwrap()) / (2.0 * h);
            assert!((fd - df.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_examples() {
        let adam = AdamParams::default();

        let mut x = [3.0];
        let mut st = AdamState::new(1);
        assert!(adam_step(&mut x, &[0.0], &mut st, 0.1, &adam));
        assert_eq!(x[0], 3.0);

        for g in [1e-3, 5.0, -200.0] {
            let mut x = [0.0];
            let mut st = AdamState::new(1);
            adam_step(&mut x, &[g], &mut st, 0.01, &adam);
            assert!((x[0] + 0.01 * g.signum()).abs() < 1e-6, "{g}: {}", x[0]);
        }

        let mut x = [0.0];
        let mut st = AdamState::new(1);
        for _ in 0..10 {
            adam_step(&mut x, &[1.0], &mut st, 0.01, &adam);
        }
        assert!((x[0] + 0.1).abs() < 1e-6, "{}", x[0]);

        let mut x = [0.0];
        let mut st = AdamState::new(1);
        for _ in 0..200 {
            let g = 2.0 * (x[0] - 3.0);
            adam_step(&mut x, &[g], &mut st, 0.1, &adam);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "{}", x[0]);
    }

    #[test]
    fn adam_skips_non_finite_gradients() {
        let mut x = [1.0, 2.0];
        let mut st = AdamState::new(2);
        assert!(!adam_step(
            &mut x,
            &[0.5, f64::NAN],
            &mut st,
            0.1,
            &AdamParams::default()
        ));
        assert_eq!(x, [1.0, 2.0]);
        assert_eq!(st, AdamState::new(2));
    }

    #[test]
    fn default_config_matches_reference_settings() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lambda, 1.2);
        assert_eq!(cfg.iterations, 15000);
        assert_eq!(cfg.heads, 4);
        assert_eq!(cfg.lr.position, 1.6e-4);
        assert_eq!(cfg.lr.opacity, 5e-2);
        assert_eq!(cfg.lr.indicator, 5e-2);
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.lr.color = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_cloud_uses_neighbour_scales() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, 0.0, 3.0],
        ];
        let c = init_cloud(&pts, None, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(c.len(), 4);
        assert!((c.log_scales[0][0] - 2.0f64.ln()).abs() < 1e-12);
        assert!((c.opacity(1) - 0.1).abs() < 1e-12 && (c.indicator(2) - 0.1).abs() < 1e-12);
        assert!(c.features.iter().all(|f| f.abs() < 0.1));
    }

    #[test]
    fn trace_csv_layout() {
        let trace = [LossRecord {
            iter: 1,
            losses: StepLosses {
                l1: 0.5,
                l2: 0.25,
                lb: 0.0,
                total: 0.75,
            },
        }];
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iter,L1,L2,Lb,total\n1,0.5,0.25,0,0.75\n"
        );
    }
}
