//! Multi-modal Gaussian scene representation.
//!
//! Every Gaussian carries geometry (mean, log-scales, rotation), a color
//! chain (opacity logit, color logits) and a language chain (feature vector,
//! semantic-indicator logit). Constrained quantities are stored as logits and
//! activated with a sigmoid on read.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of color channels. Colors are view-independent RGB.
pub const COLOR_DIM: usize = 3;

/// Default language feature width.
pub const DEFAULT_FEATURE_DIM: usize = 3;

/// Opacity and indicator both start at this value.
pub const INITIAL_ALPHA: f64 = 0.1;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid activation used for opacity, indicator and color logits.
pub fn activate(logit: f64) -> Result<f64> {
    if !logit.is_finite() {
        return Err(Error::param(format!("non-finite logit {logit}")));
    }
    Ok(sigmoid(logit))
}

/// Inverse of [`activate`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn quat_normalize(q: &Quat) -> Result<Quat> {
    let n = quat_norm(q);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::param(format!("cannot normalize quaternion {q:?}")));
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: [f64; 3], angle: f64) -> Quat {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (s, c) = (angle * 0.5).sin_cos();
    [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n]
}

/// Rotation matrix of a unit quaternion (w, x, y, z). The input is assumed normalized.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion of a proper rotation matrix (Shepperd's method), with w ≥ 0.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Quat {
    let tr = m.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let q = quat_normalize(&q).expect("rotation matrix yields a nonzero quaternion");
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

/// Σ = R·S·Sᵀ·Rᵀ with S = diag(exp(log_scale)).
pub fn build_covariance(log_scale: &[f64; 3], rotation: &Quat) -> Matrix3<f64> {
    let r = quat_to_matrix(rotation);
    let s = Vector3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp());
    let m = r * Matrix3::from_diagonal(&s);
    m * m.transpose()
}

/// Pinhole camera with a world-to-camera pose: `x_cam = R·x_world + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation, (w, x, y, z).
    pub rotation: Quat,
    pub translation: [f64; 3],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::param("camera focal lengths must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::param("camera principal point must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("camera dimensions must be at least 1"));
        }
        if (quat_norm(&self.rotation) - 1.0).abs() > 1e-6 {
            return Err(Error::param("camera rotation must be a unit quaternion"));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::param("camera translation must be finite"));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + Vector3::from(self.translation)
    }

    /// Camera center in world coordinates, `-Rᵀ·t`.
    pub fn center(&self) -> [f64; 3] {
        let c = -(self.rotation_matrix().transpose() * Vector3::from(self.translation));
        [c.x, c.y, c.z]
    }

    /// Same intrinsics, new pose given as rotation and world-space center.
    pub fn with_pose(&self, rotation: Quat, center: [f64; 3]) -> Camera {
        let r = quat_to_matrix(&rotation);
        let t = -(r * Vector3::from(center));
        Camera {
            rotation,
            translation: [t.x, t.y, t.z],
            ..self.clone()
        }
    }

    /// Camera at `eye` looking at `target`, with +y of the image pointing
    /// away from `up` (image rows grow downward).
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        let eye_v = Vector3::from(eye);
        let forward = Vector3::from(target) - eye_v;
        if forward.norm() == 0.0 {
            return Err(Error::param("look_at eye and target coincide"));
        }
        let z = forward.normalize();
        let x = z.cross(&Vector3::from(up));
        if x.norm() < 1e-9 {
            return Err(Error::param("look_at up vector parallel to view direction"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // Rows of the world-to-camera rotation are the camera axes in world space.
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let base = Camera {
            fx,
            fy,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            width,
            height,
            rotation: IDENTITY_QUAT,
            translation: [0.0; 3],
        };
        Ok(base.with_pose(matrix_to_quat(&r), eye))
    }
}

/// Dense H×W×channels grid, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// RGB image with values in [0, 1].
pub type Image = Raster;
/// Per-pixel language embeddings.
pub type FeatureMap = Raster;

impl Raster {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::param(format!(
                "raster data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One training view: image, camera and ground-truth language map.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub camera: Camera,
    pub gt_features: FeatureMap,
}

impl TrainSample {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let (w, h) = (self.camera.width, self.camera.height);
        if self.image.width != w || self.image.height != h || self.image.channels != COLOR_DIM {
            return Err(Error::param(format!(
                "image {}x{}x{} does not match camera {w}x{h}",
                self.image.width, self.image.height, self.image.channels
            )));
        }
        if self.gt_features.width != w || self.gt_features.height != h {
            return Err(Error::param(format!(
                "feature map {}x{} does not match camera {w}x{h}",
                self.gt_features.width, self.gt_features.height
            )));
        }
        if !self.gt_features.is_finite() || !self.image.is_finite() {
            return Err(Error::param("training sample contains non-finite values"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
}

impl Dataset {
    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.gt_features.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(df) = self.feature_dim() else {
            return Err(Error::param("dataset is empty"));
        };
        for (i, s) in self.samples.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::param(format!("sample {i}: {e}")))?;
            if s.gt_features.channels != df {
                return Err(Error::param(format!(
                    "sample {i}: feature width {} differs from {df}",
                    s.gt_features.channels
                )));
            }
        }
        Ok(())
    }
}

/// Optimizer parameter groups, each with its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Position,
    Scale,
    Rotation,
    Color,
    Opacity,
    Feature,
    Indicator,
    Attention,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Position,
        ParamGroup::Scale,
        ParamGroup::Rotation,
        ParamGroup::Color,
        ParamGroup::Opacity,
        ParamGroup::Feature,
        ParamGroup::Indicator,
        ParamGroup::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Scale => "scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Color => "color",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Feature => "feature",
            ParamGroup::Indicator => "indicator",
            ParamGroup::Attention => "attention",
        }
    }
}

/// Learnable per-Gaussian parameters. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    /// Raw quaternions (w, x, y, z); normalized on read.
    pub rotations: Vec<Quat>,
    pub opacity_logits: Vec<f64>,
    pub color_logits: Vec<[f64; 3]>,
    /// N × feature_dim, row-major.
    pub features: Vec<f64>,
    pub indicator_logits: Vec<f64>,
    feature_dim: usize,
}

impl GaussianCloud {
    pub fn new(feature_dim: usize) -> Self {
        GaussianCloud {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            color_logits: Vec::new(),
            features: Vec::new(),
            indicator_logits: Vec::new(),
            feature_dim,
        }
    }

    /// All-zero cloud of `n` Gaussians, the shape of a gradient buffer.
    pub fn zeros(n: usize, feature_dim: usize) -> Self {
        GaussianCloud {
            positions: vec![[0.0; 3]; n],
            log_scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            color_logits: vec![[0.0; 3]; n],
            features: vec![0.0; n * feature_dim],
            indicator_logits: vec![0.0; n],
            feature_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.len(), self.feature_dim)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        position: [f64; 3],
        log_scale: [f64; 3],
        rotation: Quat,
        opacity_logit: f64,
        color_logit: [f64; 3],
        feature: &[f64],
        indicator_logit: f64,
    ) {
        assert_eq!(feature.len(), self.feature_dim, "feature width mismatch");
        self.positions.push(position);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.opacity_logits.push(opacity_logit);
        self.color_logits.push(color_logit);
        self.features.extend_from_slice(feature);
        self.indicator_logits.push(indicator_logit);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn indicator(&self, i: usize) -> f64 {
        sigmoid(self.indicator_logits[i])
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        self.color_logits[i].map(sigmoid)
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn feature_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Unit-norm rotation of Gaussian `i`.
    pub fn rotation(&self, i: usize) -> Quat {
        let q = &self.rotations[i];
        let n = quat_norm(q);
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }

    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        build_covariance(&self.log_scales[i], &self.rotation(i))
    }

    /// Check shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.log_scales.len(),
            self.rotations.len(),
            self.opacity_logits.len(),
            self.color_logits.len(),
            self.indicator_logits.len(),
        ];
        if lens.iter().any(|&l| l != n) || self.features.len() != n * self.feature_dim {
            return Err(Error::param(
                "gaussian cloud fields have inconsistent lengths",
            ));
        }
        if self
            .params()
            .iter()
            .any(|(_, p)| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::param("gaussian cloud contains non-finite values"));
        }
        if self.rotations.iter().any(|q| quat_norm(q) == 0.0) {
            return Err(Error::param("gaussian cloud contains a zero quaternion"));
        }
        Ok(())
    }

    /// Parameter slices by optimizer group (all groups except attention).
    pub fn params(&self) -> [(ParamGroup, &[f64]); 7] {
        [
            (ParamGroup::Position, self.positions.as_flattened()),
            (ParamGroup::Scale, self.log_scales.as_flattened()),
            (ParamGroup::Rotation, self.rotations.as_flattened()),
            (ParamGroup::Color, self.color_logits.as_flattened()),
            (ParamGroup::Opacity, &self.opacity_logits),
            (ParamGroup::Feature, &self.features),
            (ParamGroup::Indicator, &self.indicator_logits),
        ]
    }

    pub fn params_mut(&mut self) -> [(ParamGroup, &mut [f64]); 7] {
        [
            (ParamGroup::Position, self.positions.as_flattened_mut()),
            (ParamGroup::Scale, self.log_scales.as_flattened_mut()),
            (ParamGroup::Rotation, self.rotations.as_flattened_mut()),
            (ParamGroup::Color, self.color_logits.as_flattened_mut()),
            (ParamGroup::Opacity, &mut self.opacity_logits),
            (ParamGroup::Feature, &mut self.features),
            (ParamGroup::Indicator, &mut self.indicator_logits),
        ]
    }

    /// Reorder Gaussians so that new index `j` holds old index `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = GaussianCloud::new(self.feature_dim);
        for &i in perm {
            out.push(
                self.positions[i],
                self.log_scales[i],
                self.rotations[i],
                self.opacity_logits[i],
                self.color_logits[i],
                self.feature(i),
                self.indicator_logits[i],
            );
        }
        out
    }
}
