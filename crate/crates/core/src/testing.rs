//! Random fixtures and a finite-difference harness, shared by the test
//! suites of this crate and its front ends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{blend_with_ratio, BlendOptions, BlendSample};
use crate::error::Result;
use crate::fusion::{Fusion, FusionKind, DEFAULT_HEADS};
use crate::raster::{IndicatorMode, RasterSettings};
use crate::scene::{
    quat_from_axis_angle, quat_normalize, Camera, FeatureMap, GaussianCloud, Image, ParamGroup,
    TrainSample, COLOR_DIM,
};
use crate::train::{objective, TrainConfig};

fn uniform3(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

fn random_rotation(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    quat_normalize(&q).unwrap_or([1.0, 0.0, 0.0, 0.0])
}

/// Random cloud seen by a camera at the origin looking down +z. A few
/// Gaussians land behind the camera or off screen to exercise culling.
pub fn random_cloud(rng: &mut impl Rng, n: usize, feature_dim: usize) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(feature_dim);
    for _ in 0..n {
        let z: f64 = if rng.random_bool(0.1) {
            rng.random_range(-1.0..0.05)
        } else {
            rng.random_range(0.8..4.0)
        };
        let spread = 0.7 * z.abs().max(0.5);
        let pos = [
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
            z,
        ];
        let f: Vec<f64> = (0..feature_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        cloud.push(
            pos,
            uniform3(rng, -3.0, -1.0),
            random_rotation(rng),
            rng.random_range(-3.0..3.0),
            uniform3(rng, -2.0, 2.0),
            &f,
            rng.random_range(-3.0..3.0),
        );
    }
    cloud
}

/// Camera at the origin looking down +z, with random intrinsics and a small
/// random tilt.
pub fn random_camera(rng: &mut impl Rng, width: usize, height: usize) -> Camera {
    let f = rng.random_range(0.8..1.6) * width.max(height) as f64;
    let axis = uniform3(rng, -1.0, 1.0);
    let rotation = quat_from_axis_angle(axis, rng.random_range(0.0..0.15));
    Camera {
        fx: f,
        fy: f * rng.random_range(0.9..1.1),
        cx: width as f64 * rng.random_range(0.4..0.6),
        cy: height as f64 * rng.random_range(0.4..0.6),
        width,
        height,
        rotation,
        translation: [0.0; 3],
    }
}

/// Fusion layer of `kind` with a non-zero output map, so that it is not
/// the identity.
pub fn random_fusion(rng: &mut impl Rng, kind: FusionKind, feature_dim: usize) -> Fusion {
    let mut fusion = Fusion::new(kind, COLOR_DIM, feature_dim, DEFAULT_HEADS, rng);
    for (name, p) in fusion.named_params_mut() {
        if name.starts_with("wout") || name.starts_with("bout") || matches!(kind, FusionKind::Mlp) {
            for v in p.iter_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    fusion
}

/// A random rasterization problem.
#[derive(Clone, Debug)]
pub struct RandomScene {
    pub cloud: GaussianCloud,
    pub camera: Camera,
    pub fusion: Fusion,
}

/// Up to `max_gaussians` Gaussians, image sides in `1..=max_side`.
pub fn random_scene(seed: u64, max_gaussians: usize, max_side: usize) -> RandomScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(0..=max_gaussians);
    let df = rng.random_range(1..=4);
    let (w, h) = (
        rng.random_range(1..=max_side),
        rng.random_range(1..=max_side),
    );
    RandomScene {
        cloud: random_cloud(&mut rng, n, df),
        camera: random_camera(&mut rng, w, h),
        fusion: random_fusion(&mut rng, FusionKind::SelfAttention, df),
    }
}

/// Two training views plus a blend between them, with random targets.
#[derive(Clone, Debug)]
pub struct MicroScene {
    pub cloud: GaussianCloud,
    pub fusion: Fusion,
    pub views: [TrainSample; 2],
    pub blend: BlendSample,
}

fn random_target(rng: &mut impl Rng, cam: &Camera, feature_dim: usize) -> TrainSample {
    let (w, h) = (cam.width, cam.height);
    let image = Image::from_data(
        w,
        h,
        COLOR_DIM,
        (0..w * h * COLOR_DIM)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    );
    let features = FeatureMap::from_data(
        w,
        h,
        feature_dim,
        (0..w * h * feature_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );
    TrainSample {
        image: image.expect("sized to the camera"),
        camera: cam.clone(),
        gt_features: features.expect("sized to the camera"),
    }
}

/// `n` Gaussians at well separated depths seen by two nearby `side`×`side`
/// cameras, so that no depth swap happens under small perturbations.
pub fn micro_scene(
    seed: u64,
    n: usize,
    side: usize,
    feature_dim: usize,
    fusion: FusionKind,
) -> Result<MicroScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::new(feature_dim);
    for i in 0..n {
        let z = 1.6 + 0.45 * i as f64 + rng.random_range(-0.05..0.05);
        let f: Vec<f64> = (0..feature_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        cloud.push(
            [
                rng.random_range(-0.25..0.25) * z,
                rng.random_range(-0.25..0.25) * z,
                z,
            ],
            uniform3(&mut rng, -1.6, -0.9),
            random_rotation(&mut rng),
            rng.random_range(-1.5..1.5),
            uniform3(&mut rng, -1.5, 1.5),
            &f,
            rng.random_range(-1.5..1.5),
        );
    }
    let base = Camera {
        fx: side as f64,
        fy: side as f64,
        cx: side as f64 * 0.5,
        cy: side as f64 * 0.5,
        width: side,
        height: side,
        rotation: [1.0, 0.0, 0.0, 0.0],
        translation: [0.0; 3],
    };
    let turned = base.with_pose(
        quat_from_axis_angle([0.0, 1.0, 0.0], rng.random_range(0.03..0.08)),
        [
            rng.random_range(0.05..0.15),
            rng.random_range(-0.05..0.05),
            0.0,
        ],
    );
    let views = [
        random_target(&mut rng, &base, feature_dim),
        random_target(&mut rng, &turned, feature_dim),
    ];
    let k = rng.random_range(0.1..0.9);
    let blend = blend_with_ratio(&views[0], &views[1], k, BlendOptions::default())?;
    Ok(MicroScene {
        cloud,
        fusion: random_fusion(&mut rng, fusion, feature_dim),
        views,
        blend,
    })
}

/// Rasterizer settings without floors, early stops or kernel truncation:
/// the rendered image is a smooth function of every parameter.
pub fn smooth_settings() -> RasterSettings {
    RasterSettings {
        cutoff_sq: f64::INFINITY,
        parallel: false,
        ..RasterSettings::exact()
    }
}

/// Worst disagreement between analytic and numeric gradients in one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub count: usize,
    pub max_abs_err: f64,
    /// Entries outside both tolerances.
    pub failures: usize,
}

/// Compare analytic gradients of the full objective with central
/// differences. An entry passes when its absolute error is within `abs_tol`
/// or its relative error within `rel_tol`.
pub fn check_objective_gradients(
    scene: &MicroScene,
    cfg: &TrainConfig,
    step: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<Vec<GroupCheck>> {
    let [s1, s2] = &scene.views;
    let blend = cfg.blending_active().then_some(&scene.blend);
    let (_, grads) = objective(&scene.cloud, &scene.fusion, s1, s2, blend, cfg)?;
    let eval = |cloud: &GaussianCloud, fusion: &Fusion| -> Result<f64> {
        Ok(objective(cloud, fusion, s1, s2, blend, cfg)?.0.total)
    };
    let mut report = Vec::new();
    let tally =
        |group: ParamGroup, analytic: f64, plus: f64, minus: f64, out: &mut Vec<GroupCheck>| {
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic - numeric).abs();
            let rel = err / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            let entry = match out.iter_mut().find(|g| g.group == group) {
                Some(e) => e,
                None => {
                    out.push(GroupCheck {
                        group,
                        count: 0,
                        max_abs_err: 0.0,
                        failures: 0,
                    });
                    out.last_mut().expect("just pushed")
                }
            };
            entry.count += 1;
            entry.max_abs_err = entry.max_abs_err.max(err);
            if err > abs_tol && rel > rel_tol {
                entry.failures += 1;
            }
        };

    let groups: Vec<ParamGroup> = scene.cloud.params().iter().map(|(g, _)| *g).collect();
    for (gi, group) in groups.into_iter().enumerate() {
        let len = scene.cloud.params()[gi].1.len();
        for j in 0..len {
            let mut c = scene.cloud.clone();
            c.params_mut()[gi].1[j] += step;
            let plus = eval(&c, &scene.fusion)?;
            c.params_mut()[gi].1[j] -= 2.0 * step;
            let minus = eval(&c, &scene.fusion)?;
            tally(
                group,
                grads.cloud.params()[gi].1[j],
                plus,
                minus,
                &mut report,
            );
        }
    }
    let names: Vec<usize> = (0..scene.fusion.named_params().len()).collect();
    for pi in names {
        let len = scene.fusion.named_params()[pi].1.len();
        for j in 0..len {
            let mut f = scene.fusion.clone();
            f.named_params_mut()[pi].1[j] += step;
            let plus = eval(&scene.cloud, &f)?;
            f.named_params_mut()[pi].1[j] -= 2.0 * step;
            let minus = eval(&scene.cloud, &f)?;
            tally(
                ParamGroup::Attention,
                grads.fusion.named_params()[pi].1[j],
                plus,
                minus,
                &mut report,
            );
        }
    }
    Ok(report)
}

/// Training configuration for gradient checks: smooth rasterization, learned
/// indicator and every blending component on.
pub fn gradcheck_config(fusion: FusionKind, indicator: IndicatorMode) -> TrainConfig {
    TrainConfig {
        fusion,
        indicator,
        raster: smooth_settings(),
        ..TrainConfig::default()
    }
}
