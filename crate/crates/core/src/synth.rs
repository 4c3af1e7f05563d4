//! Synthetic labeled scenes.
//!
//! Objects are ellipsoidal clusters of opaque Gaussians with one label each.
//! Optional glare clusters are faint, flat, nearly white patches floating
//! just above an object; they show up in the color images but carry no
//! semantics, so the label behind a patch depends on the viewpoint.
//! Ground-truth label maps are decoded from a render of the generating
//! parameters with the same decoder used at evaluation time, and the
//! ground-truth feature maps are the label embeddings of those maps.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionKind};
use crate::io::{
    feature_map_to_tensor, label_map_to_tensor, save_checkpoint, write_png, CameraSpec, Checkpoint,
    EvalAnnotations, EvalFrame, FrameEntry, LabeledBox, SceneManifest, Split, Tensor,
    MANIFEST_NAME,
};
use crate::query::{relevancy, segment_argmax_gated, BBox, LabelMap, QuerySet, BACKGROUND_GATE};
use crate::raster::{rasterize, IndicatorMode, RasterSettings};
use crate::scene::{
    logit, quat_from_axis_angle, quat_normalize, Camera, FeatureMap, GaussianCloud, Image,
    COLOR_DIM,
};
use crate::train::{TrainConfig, TrainState};

pub const DEFAULT_LABELS: [&str; 8] = [
    "apple", "mug", "book", "lamp", "plant", "bowl", "shoe", "clock",
];

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.12],
    [0.15, 0.45, 0.85],
    [0.2, 0.75, 0.25],
    [0.9, 0.75, 0.15],
    [0.6, 0.25, 0.75],
    [0.15, 0.75, 0.75],
    [0.9, 0.45, 0.15],
    [0.55, 0.55, 0.55],
];

const OBJECT_OPACITY: f64 = 0.92;
const OBJECT_INDICATOR: f64 = 0.92;
const GLARE_OPACITY: f64 = 0.28;
const GLARE_INDICATOR: f64 = 0.02;
const ORBIT_RADIUS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_objects: usize,
    pub labels: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub n_views: usize,
    pub seed: u64,
    pub glare: bool,
    pub gaussians_per_object: usize,
    pub glare_gaussians: usize,
    /// Random distractor points added to the initialization, relative to the
    /// number of generating Gaussians.
    pub distractor_ratio: f64,
    /// Std. dev. of the jitter applied to initialization points.
    pub init_jitter: f64,
    /// Every `test_every`-th view (1-based) is held out; 0 keeps all for training.
    pub test_every: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_objects: 3,
            labels: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
            width: 64,
            height: 64,
            n_views: 12,
            seed: 0,
            glare: false,
            gaussians_per_object: 24,
            glare_gaussians: 10,
            distractor_ratio: 0.1,
            init_jitter: 0.03,
            test_every: 4,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects > self.labels.len() {
            return Err(Error::param(format!(
                "{} objects requested but only {} labels given",
                self.n_objects,
                self.labels.len()
            )));
        }
        if self.n_objects > PALETTE.len() {
            return Err(Error::param(format!(
                "at most {} objects are supported",
                PALETTE.len()
            )));
        }
        if self.n_views < 2 {
            return Err(Error::param("at least two views are required"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("image size must be positive"));
        }
        if self.n_objects > 0 && self.gaussians_per_object == 0 {
            return Err(Error::param("objects need at least one Gaussian"));
        }
        if !(self.distractor_ratio >= 0.0 && self.init_jitter >= 0.0) {
            return Err(Error::param("distractor ratio and jitter must be >= 0"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.n_objects.max(1)
    }
}

/// A generated scene held in memory.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub spec: SynthSpec,
    pub gt_cloud: GaussianCloud,
    /// Object index of each generating Gaussian and whether it is glare.
    pub owner: Vec<(usize, bool)>,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub features: Vec<FeatureMap>,
    pub labels: Vec<LabelMap>,
    pub boxes: Vec<Vec<LabeledBox>>,
    pub queries: Option<QuerySet>,
    pub init_points: Vec<[f64; 3]>,
    pub init_colors: Vec<[f64; 3]>,
}

impl SynthScene {
    pub fn split(&self, view: usize) -> Split {
        if self.spec.test_every > 0 && (view + 1) % self.spec.test_every == 0 {
            Split::Test
        } else {
            Split::Train
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_ball(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return p;
        }
    }
}

fn random_quat(rng: &mut ChaCha8Rng) -> Result<[f64; 4]> {
    let mut q: [f64; 4] = std::array::from_fn(|_| gauss(rng));
    if q[0] < 0.0 {
        q = q.map(|v| -v);
    }
    quat_normalize(&q)
}

fn orbit_cameras(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Camera>> {
    let f = 1.1 * spec.width.max(spec.height) as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    (0..spec.n_views)
        .map(|v| {
            let az = phase + 2.0 * PI * v as f64 / spec.n_views as f64;
            let el: f64 = if v % 2 == 0 { 0.4 } else { 0.65 };
            let eye = [
                ORBIT_RADIUS * el.cos() * az.cos(),
                ORBIT_RADIUS * el.cos() * az.sin(),
                ORBIT_RADIUS * el.sin(),
            ];
            Camera::look_at(
                eye,
                [0.0; 3],
                [0.0, 0.0, 1.0],
                f,
                f,
                spec.width,
                spec.height,
            )
        })
        .collect()
}

fn build_cloud(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(GaussianCloud, Vec<(usize, bool)>)> {
    let df = spec.feature_dim();
    let mut cloud = GaussianCloud::new(df);
    let mut owner = Vec::new();
    let n = spec.n_objects;
    let phase = rng.random_range(0.0..2.0 * PI);
    for obj in 0..n {
        let center = if n == 1 {
            [0.0, 0.0, 0.0]
        } else {
            let a = phase + 2.0 * PI * obj as f64 / n as f64 + rng.random_range(-0.2..0.2);
            [0.55 * a.cos(), 0.55 * a.sin(), rng.random_range(-0.1..0.1)]
        };
        let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.16..0.26));
        let base = PALETTE[obj];
        let mut feature = vec![0.0; df];
        feature[obj] = 1.0;
        for _ in 0..spec.gaussians_per_object {
            let u = unit_ball(rng);
            let pos = std::array::from_fn(|k| center[k] + 0.8 * radii[k] * u[k]);
            let ls = std::array::from_fn(|_| rng.random_range(0.06f64..0.1).ln());
            let color =
                std::array::from_fn(|k| logit((base[k] + 0.03 * gauss(rng)).clamp(0.05, 0.95)));
            cloud.push(
                pos,
                ls,
                random_quat(rng)?,
                logit(OBJECT_OPACITY),
                color,
                &feature,
                logit(OBJECT_INDICATOR),
            );
            owner.push((obj, false));
        }
        if spec.glare {
            let zero = vec![0.0; df];
            let lift = radii[2] + 0.12;
            let shift = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
            for _ in 0..spec.glare_gaussians {
                let u = unit_ball(rng);
                let pos = [
                    center[0] + shift[0] + 0.15 * u[0],
                    center[1] + shift[1] + 0.15 * u[1],
                    center[2] + lift + 0.03 * u[2],
                ];
                let ls = [
                    rng.random_range(0.1f64..0.15).ln(),
                    rng.random_range(0.1f64..0.15).ln(),
                    0.02f64.ln(),
                ];
                let rot = quat_from_axis_angle([0.0, 0.0, 1.0], rng.random_range(0.0..PI));
                let white = rng.random_range(0.9..0.97);
                cloud.push(
                    pos,
                    ls,
                    rot,
                    logit(GLARE_OPACITY),
                    [logit(white); 3],
                    &zero,
                    logit(GLARE_INDICATOR),
                );
                owner.push((obj, true));
            }
        }
    }
    Ok((cloud, owner))
}

/// Check that glare is translucent and leaves the labels it covers
/// unchanged: wherever a patch is visible, the label is that of the
/// tangible surface (or background) behind it.
fn check_glare(scene: &SynthScene) -> Result<()> {
    let df = scene.gt_cloud.feature_dim();
    let fusion = Fusion::Identity {
        dim: COLOR_DIM + df,
    };
    let glare_idx: Vec<usize> = (0..scene.owner.len())
        .filter(|&i| scene.owner[i].1)
        .collect();
    let solid_idx: Vec<usize> = (0..scene.owner.len())
        .filter(|&i| !scene.owner[i].1)
        .collect();
    let glare = scene.gt_cloud.permuted(&glare_idx);
    let solid = scene.gt_cloud.permuted(&solid_idx);
    if glare.is_empty() || glare.opacity_logits.iter().any(|&o| o >= logit(0.3)) {
        return Err(Error::InvalidState(
            "glare clusters must exist and have opacity < 0.3".into(),
        ));
    }
    let queries = scene.queries.as_ref().expect("glare implies objects");
    let (mut covered, mut over_object, mut agree) = (0usize, 0usize, 0usize);
    for (cam, labels) in scene.cameras.iter().zip(&scene.labels) {
        let g = rasterize(
            &glare,
            cam,
            &fusion,
            IndicatorMode::Learned,
            &RasterSettings::default(),
        );
        let bare = decode_labels(&solid, cam, queries)?;
        for ((t, l), b) in g
            .aux
            .final_transmittance_color
            .iter()
            .zip(labels)
            .zip(&bare)
        {
            if 1.0 - t > 0.1 {
                covered += 1;
                over_object += l.is_some() as usize;
                agree += (l == b) as usize;
            }
        }
    }
    if over_object == 0 || (agree as f64) < 0.98 * covered as f64 {
        return Err(Error::InvalidState(format!(
            "glare check failed: {covered} covered pixels, {over_object} over objects, {agree} unchanged labels"
        )));
    }
    Ok(())
}

fn decode_labels(cloud: &GaussianCloud, cam: &Camera, queries: &QuerySet) -> Result<LabelMap> {
    let fusion = Fusion::Identity {
        dim: COLOR_DIM + cloud.feature_dim(),
    };
    let out = rasterize(
        cloud,
        cam,
        &fusion,
        IndicatorMode::Learned,
        &RasterSettings::default(),
    );
    segment_argmax_gated(
        &relevancy(&out.semantics, queries)?,
        &out.semantics,
        BACKGROUND_GATE,
    )
}

/// Build a scene in memory; a pure function of `spec`.
pub fn build_synthetic(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (gt_cloud, owner) = build_cloud(spec, &mut rng)?;
    let cameras = orbit_cameras(spec, &mut rng)?;
    let df = spec.feature_dim();
    let fusion = Fusion::Identity {
        dim: COLOR_DIM + df,
    };
    let queries = if spec.n_objects > 0 {
        let emb = (0..spec.n_objects)
            .map(|i| {
                let mut e = vec![0.0; df];
                e[i] = 1.0;
                e
            })
            .collect();
        Some(QuerySet::new(spec.labels[..spec.n_objects].to_vec(), emb)?)
    } else {
        None
    };

    let mut images = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut boxes = Vec::new();
    for cam in &cameras {
        let out = rasterize(
            &gt_cloud,
            cam,
            &fusion,
            IndicatorMode::Learned,
            &RasterSettings::default(),
        );
        let lab = match &queries {
            Some(q) => segment_argmax_gated(
                &relevancy(&out.semantics, q)?,
                &out.semantics,
                BACKGROUND_GATE,
            )?,
            None => vec![None; cam.width * cam.height],
        };
        let mut fm = FeatureMap::zeros(cam.width, cam.height, df);
        for (px, l) in fm.data.chunks_mut(df).zip(&lab) {
            if let Some(c) = l {
                px[*c] = 1.0;
            }
        }
        let bx = (0..spec.n_objects)
            .filter_map(|c| {
                BBox::of_label(&lab, cam.width, c).map(|bbox| LabeledBox { label: c, bbox })
            })
            .collect();
        images.push(out.color);
        features.push(fm);
        labels.push(lab);
        boxes.push(bx);
    }

    let mut init_points = Vec::new();
    let mut init_colors = Vec::new();
    for i in 0..gt_cloud.len() {
        let p = gt_cloud.positions[i];
        init_points.push(std::array::from_fn(|k| {
            p[k] + spec.init_jitter * gauss(&mut rng)
        }));
        init_colors.push(gt_cloud.color(i));
    }
    let distractors = (spec.distractor_ratio * gt_cloud.len() as f64).round() as usize;
    for _ in 0..distractors {
        init_points.push([
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.4..0.4),
        ]);
        init_colors.push(std::array::from_fn(|_| rng.random_range(0.0..1.0)));
    }

    let scene = SynthScene {
        spec: spec.clone(),
        gt_cloud,
        owner,
        cameras,
        images,
        features,
        labels,
        boxes,
        queries,
        init_points,
        init_colors,
    };
    if spec.glare {
        check_glare(&scene)?;
    }
    Ok(scene)
}

fn write_tensor(root: &Path, rel: &str, t: &Tensor) -> Result<()> {
    t.write(&root.join(rel))
}

/// Write `scene` under `dir`; returns the manifest path.
pub fn write_synthetic(scene: &SynthScene, dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "features", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let df = scene.spec.feature_dim();
    let mut frames = Vec::new();
    let mut eval_frames = Vec::new();
    for (v, cam) in scene.cameras.iter().enumerate() {
        let image_path = format!("images/frame_{v:03}.png");
        let feature_path = format!("features/frame_{v:03}.mgst");
        let label_path = format!("labels/frame_{v:03}.mgst");
        write_png(&dir.join(&image_path), &scene.images[v])?;
        write_tensor(
            dir,
            &feature_path,
            &feature_map_to_tensor(&scene.features[v])?,
        )?;
        write_tensor(
            dir,
            &label_path,
            &label_map_to_tensor(&scene.labels[v], cam.width, cam.height)?,
        )?;
        frames.push(FrameEntry {
            image_path,
            feature_path,
            camera: CameraSpec::from(cam),
            split: scene.split(v),
        });
        eval_frames.push(EvalFrame {
            frame: v,
            gt_label_map_path: label_path,
            boxes: scene.boxes[v].clone(),
        });
    }
    let eval = match &scene.queries {
        Some(q) => {
            let data = q.embeddings.iter().flatten().copied().collect();
            write_tensor(dir, "queries.mgst", &Tensor::f32(vec![q.len(), df], data)?)?;
            Some(EvalAnnotations {
                labels: q.labels.clone(),
                queries_path: "queries.mgst".into(),
                frames: eval_frames,
            })
        }
        None => None,
    };
    let init: Vec<f64> = scene
        .init_points
        .iter()
        .zip(&scene.init_colors)
        .flat_map(|(p, c)| p.iter().chain(c).copied())
        .collect();
    write_tensor(
        dir,
        "init_points.mgst",
        &Tensor::f32(vec![scene.init_points.len(), 6], init)?,
    )?;

    let config = TrainConfig {
        iterations: 0,
        seed: scene.spec.seed,
        fusion: FusionKind::None,
        ..TrainConfig::default()
    };
    let state = TrainState::new(
        scene.gt_cloud.clone(),
        Fusion::Identity {
            dim: COLOR_DIM + df,
        },
    );
    save_checkpoint(&Checkpoint { config, state }, &dir.join("gt_checkpoint"))?;

    let manifest = SceneManifest {
        d_f: df,
        frames,
        eval,
        init_points_path: Some("init_points.mgst".into()),
        gt_checkpoint_path: Some("gt_checkpoint".into()),
    };
    let mpath = dir.join(MANIFEST_NAME);
    manifest.write(&mpath)?;
    Ok(mpath)
}

/// Build and write a synthetic scene; returns the manifest path.
pub fn generate_synthetic(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    let scene = build_synthetic(spec)?;
    write_synthetic(&scene, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_objects: usize, glare: bool) -> SynthSpec {
        SynthSpec {
            n_objects,
            width: 32,
            height: 32,
            n_views: 4,
            seed: 3,
            glare,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn labels_and_features_agree() {
        let s = build_synthetic(&small(3, false)).unwrap();
        assert_eq!(s.cameras.len(), 4);
        let mut seen = [false; 3];
        for (lab, f) in s.labels.iter().zip(&s.features) {
            for (l, px) in lab.iter().zip(f.data.chunks(3)) {
                match l {
                    Some(c) => {
                        seen[*c] = true;
                        assert_eq!(px.iter().sum::<f64>(), 1.0);
                        assert_eq!(px[*c], 1.0);
                    }
                    None => assert!(px.iter().all(|v| *v == 0.0)),
                }
            }
        }
        assert!(
            seen.iter().all(|&b| b),
            "every object should be visible somewhere"
        );
    }

    #[test]
    fn empty_scene_is_black() {
        let s = build_synthetic(&small(0, false)).unwrap();
        assert!(s.gt_cloud.is_empty() && s.queries.is_none());
        for (img, f) in s.images.iter().zip(&s.features) {
            assert!(img.data.iter().all(|v| *v == 0.0));
            assert!(f.data.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn glare_clusters_are_translucent_and_over_their_object() {
        let s = build_synthetic(&small(3, true)).unwrap();
        let glare: Vec<usize> = (0..s.owner.len()).filter(|&i| s.owner[i].1).collect();
        assert_eq!(glare.len(), 3 * s.spec.glare_gaussians);
        assert!(glare.iter().all(|&i| s.gt_cloud.opacity(i) < 0.3));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small(3, false);
        s.n_views = 1;
        assert!(build_synthetic(&s).is_err());
        let mut s = small(3, false);
        s.labels.truncate(2);
        assert!(build_synthetic(&s).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_synthetic(&small(2, true)).unwrap();
        let b = build_synthetic(&small(2, true)).unwrap();
        assert_eq!(a.gt_cloud, b.gt_cloud);
        assert_eq!(a.images, b.images);
        assert_eq!(a.init_points, b.init_points);
    }
}
