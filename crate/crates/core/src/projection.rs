//! Perspective projection of 3D Gaussians to screen-space ellipses (EWA
//! local-affine approximation) and the reverse-mode derivative of that map.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scene::{quat_norm, quat_to_matrix, Camera, GaussianCloud, Quat};

/// Gaussians at or closer than this camera-space depth are culled.
pub const Z_NEAR: f64 = 0.01;

/// Added to the diagonal of every projected covariance (pixels²).
pub const COV_DILATION: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    /// Pixel coordinates of the projected mean.
    pub mean2d: [f64; 2],
    /// Dilated screen-space covariance.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d` stored as (a, b, c) for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Camera-space z.
    pub depth: f64,
    /// 3σ radius along the major axis, in pixels.
    pub radius: f64,
}

impl ProjectedGaussian {
    /// Largest eigenvalue of `cov2d`.
    pub fn max_eigenvalue(&self) -> f64 {
        max_eigenvalue(&self.cov2d)
    }

    /// Mahalanobis² of pixel position `v` from the mean.
    #[inline]
    pub fn mahalanobis_sq(&self, v: [f64; 2]) -> f64 {
        let dx = v[0] - self.mean2d[0];
        let dy = v[1] - self.mean2d[1];
        let [a, b, c] = self.conic;
        a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    }
}

fn max_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m.determinant();
    mid + (mid * mid - det).max(0.0).sqrt()
}

fn perspective_jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let inv_z = 1.0 / p.z;
    let inv_z2 = inv_z * inv_z;
    Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * p.x * inv_z2,
        0.0,
        cam.fy * inv_z,
        -cam.fy * p.y * inv_z2,
    )
}

/// Project a single Gaussian. Returns `None` when it is culled.
pub fn project_gaussian(
    position: &[f64; 3],
    log_scale: &[f64; 3],
    rotation: &Quat,
    cam: &Camera,
) -> Option<ProjectedGaussian> {
    let w = cam.rotation_matrix();
    let p = w * Vector3::from(*position) + Vector3::from(cam.translation);
    if !(p.z > Z_NEAR) {
        return None;
    }
    let n = quat_norm(rotation);
    let q = rotation.map(|v| v / n);
    let cov3 = crate::scene::build_covariance(log_scale, &q);
    let t = perspective_jacobian(cam, &p) * w;
    let cov2d = t * cov3 * t.transpose() + Matrix2::identity() * COV_DILATION;
    // Symmetrize against round-off.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    let cov2d = Matrix2::new(cov2d[(0, 0)], off, off, cov2d[(1, 1)]);
    let det = cov2d.determinant();
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov2d[(1, 1)] / det, -off / det, cov2d[(0, 0)] / det];
    let mean2d = [cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy];
    let radius = 3.0 * max_eigenvalue(&cov2d).sqrt();
    let (wf, hf) = (cam.width as f64, cam.height as f64);
    if mean2d[0] + radius < 0.0
        || mean2d[0] - radius > wf
        || mean2d[1] + radius < 0.0
        || mean2d[1] - radius > hf
    {
        return None;
    }
    Some(ProjectedGaussian {
        mean2d,
        cov2d,
        conic,
        depth: p.z,
        radius,
    })
}

/// Project every Gaussian of `cloud`, dropping culled ones, sorted by depth
/// ascending with ties broken by index.
pub fn project(cloud: &GaussianCloud, cam: &Camera) -> Vec<(usize, ProjectedGaussian)> {
    let mut out: Vec<(usize, ProjectedGaussian)> = (0..cloud.len())
        .filter_map(|i| {
            project_gaussian(
                &cloud.positions[i],
                &cloud.log_scales[i],
                &cloud.rotations[i],
                cam,
            )
            .map(|pg| (i, pg))
        })
        .collect();
    out.sort_by(|a, b| a.1.depth.total_cmp(&b.1.depth).then(a.0.cmp(&b.0)));
    out
}

/// `exp(-½·dᵀ·Σ̂⁻¹·d)` with `d = v - mean2d`.
pub fn gaussian_weight(v: [f64; 2], pg: &ProjectedGaussian) -> Result<f64> {
    let det = pg.cov2d.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::InvalidState(format!(
            "singular projected covariance (det = {det})"
        )));
    }
    let inv = Matrix2::new(
        pg.cov2d[(1, 1)],
        -pg.cov2d[(0, 1)],
        -pg.cov2d[(1, 0)],
        pg.cov2d[(0, 0)],
    ) / det;
    let d = nalgebra::Vector2::new(v[0] - pg.mean2d[0], v[1] - pg.mean2d[1]);
    Ok((-0.5 * d.dot(&(inv * d))).exp())
}

/// Gradient w.r.t. the dilated 2D covariance given the gradient w.r.t. its
/// conic `(a, b, c)`, where the quadratic form is `a·dx² + 2b·dx·dy + c·dy²`.
pub fn conic_to_cov_grad(conic: &[f64; 3], d_conic: &[f64; 3]) -> Matrix2<f64> {
    let a = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
    let g = Matrix2::new(d_conic[0], 0.5 * d_conic[1], 0.5 * d_conic[1], d_conic[2]);
    -(a * g * a)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionGrad {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    /// With respect to the raw (unnormalized) quaternion.
    pub rotation: Quat,
}

/// Backpropagate gradients on `mean2d` and on the symmetric `cov2d` (full
/// matrix convention, `dL = Σ G_ij dΣ̂_ij`) to the 3D parameters.
pub fn project_backward(
    position: &[f64; 3],
    log_scale: &[f64; 3],
    rotation: &Quat,
    cam: &Camera,
    d_mean2d: [f64; 2],
    d_cov2d: &Matrix2<f64>,
) -> ProjectionGrad {
    let w = cam.rotation_matrix();
    let p = w * Vector3::from(*position) + Vector3::from(cam.translation);
    let n = quat_norm(rotation);
    let q = rotation.map(|v| v / n);
    let r = quat_to_matrix(&q);
    let s = Vector3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp());
    let m = r * Matrix3::from_diagonal(&s);
    let cov3 = m * m.transpose();
    let jac = perspective_jacobian(cam, &p);
    let t = jac * w;

    let g = 0.5 * (d_cov2d + d_cov2d.transpose());

    // Σ̂ = T Σ Tᵀ + δI
    let d_cov3 = t.transpose() * g * t;
    let d_t = 2.0 * g * t * cov3;
    let d_jac = d_t * w.transpose();

    let inv_z = 1.0 / p.z;
    let inv_z2 = inv_z * inv_z;
    let inv_z3 = inv_z2 * inv_z;
    let mut dp = Vector3::new(
        d_mean2d[0] * cam.fx * inv_z,
        d_mean2d[1] * cam.fy * inv_z,
        -d_mean2d[0] * cam.fx * p.x * inv_z2 - d_mean2d[1] * cam.fy * p.y * inv_z2,
    );
    dp.z += d_jac[(0, 0)] * (-cam.fx * inv_z2);
    dp.x += d_jac[(0, 2)] * (-cam.fx * inv_z2);
    dp.z += d_jac[(0, 2)] * (2.0 * cam.fx * p.x * inv_z3);
    dp.z += d_jac[(1, 1)] * (-cam.fy * inv_z2);
    dp.y += d_jac[(1, 2)] * (-cam.fy * inv_z2);
    dp.z += d_jac[(1, 2)] * (2.0 * cam.fy * p.y * inv_z3);
    let d_pos = w.transpose() * dp;

    // Σ = M Mᵀ, M = R S
    let d_m = 2.0 * d_cov3 * m;
    let mut d_log_scale = [0.0; 3];
    let mut d_r = Matrix3::zeros();
    for k in 0..3 {
        let mut ds = 0.0;
        for j in 0..3 {
            ds += d_m[(j, k)] * r[(j, k)];
            d_r[(j, k)] = d_m[(j, k)] * s[k];
        }
        d_log_scale[k] = ds * s[k];
    }
    let d_qhat = rotation_matrix_backward(&q, &d_r);
    let dot: f64 = q.iter().zip(&d_qhat).map(|(a, b)| a * b).sum();
    let d_rot = [
        (d_qhat[0] - q[0] * dot) / n,
        (d_qhat[1] - q[1] * dot) / n,
        (d_qhat[2] - q[2] * dot) / n,
        (d_qhat[3] - q[3] * dot) / n,
    ];

    ProjectionGrad {
        position: [d_pos.x, d_pos.y, d_pos.z],
        log_scale: d_log_scale,
        rotation: d_rot,
    }
}

/// Gradient of `quat_to_matrix` w.r.t. the (unit) quaternion components.
fn rotation_matrix_backward(q: &Quat, d: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let g = |i: usize, j: usize| d[(i, j)];
    let dw =
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1))
        - 4.0 * x * (g(1, 1) + g(2, 2));
    let dy = 2.0
        * (x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1))
        - 4.0 * y * (g(0, 0) + g(2, 2));
    let dz = 2.0
        * (-w * g(0, 1) + x * g(0, 2) + w * g(1, 0) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
        - 4.0 * z * (g(0, 0) + g(1, 1));
    [dw, dx, dy, dz]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{quat_from_axis_angle, IDENTITY_QUAT};
    use proptest::prelude::*;

    fn axis_camera() -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
            rotation: IDENTITY_QUAT,
            translation: [0.0; 3],
        }
    }

    fn one(position: [f64; 3], log_scale: [f64; 3]) -> GaussianCloud {
        let mut c = GaussianCloud::new(1);
        c.push(
            position,
            log_scale,
            IDENTITY_QUAT,
            0.0,
            [0.0; 3],
            &[0.0],
            0.0,
        );
        c
    }

    #[test]
    fn on_axis_point_hits_principal_point() {
        let out = project(&one([0.0, 0.0, 1.0], [-3.0; 3]), &axis_camera());
        assert_eq!(out.len(), 1);
        assert!((out[0].1.mean2d[0] - 50.0).abs() < 1e-12);
        assert!((out[0].1.mean2d[1] - 50.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_covariance_on_axis() {
        // Oracle: J = diag(f/z, f/z) on the optical axis, so Σ̂ = (fσ/z)² I + 0.3 I.
        let sigma: f64 = 0.02;
        let z = 2.5;
        let out = project(&one([0.0, 0.0, z], [sigma.ln(); 3]), &axis_camera());
        let cov = out[0].1.cov2d;
        let want = (100.0 * sigma / z).powi(2) + COV_DILATION;
        assert!((cov[(0, 0)] - want).abs() < 1e-9);
        assert!((cov[(1, 1)] - want).abs() < 1e-9);
        assert!(cov[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn culls_behind_camera_and_offscreen() {
        assert!(project(&one([0.0, 0.0, -1.0], [-3.0; 3]), &axis_camera()).is_empty());
        assert!(project(&one([0.0, 0.0, 0.005], [-3.0; 3]), &axis_camera()).is_empty());
        assert!(project(&one([50.0, 0.0, 1.0], [-3.0; 3]), &axis_camera()).is_empty());
    }

    #[test]
    fn depth_sort_with_index_tiebreak() {
        let mut c = GaussianCloud::new(1);
        for z in [3.0, 1.0, 2.0, 1.0] {
            c.push(
                [0.0, 0.0, z],
                [-3.0; 3],
                IDENTITY_QUAT,
                0.0,
                [0.0; 3],
                &[0.0],
                0.0,
            );
        }
        let order: Vec<usize> = project(&c, &axis_camera()).iter().map(|p| p.0).collect();
        assert_eq!(order, vec![1, 3, 2, 0]);
    }

    fn pg_with(cov: Matrix2<f64>) -> ProjectedGaussian {
        let det = cov.determinant();
        ProjectedGaussian {
            mean2d: [10.0, 10.0],
            cov2d: cov,
            conic: [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det],
            depth: 1.0,
            radius: 3.0,
        }
    }

    #[test]
    fn weight_examples() {
        let unit = pg_with(Matrix2::identity());
        assert_eq!(gaussian_weight([10.0, 10.0], &unit).unwrap(), 1.0);
        let half = (-0.5f64).exp();
        assert!((gaussian_weight([11.0, 10.0], &unit).unwrap() - half).abs() < 1e-15);
        let aniso = pg_with(Matrix2::new(4.0, 0.0, 0.0, 1.0));
        assert!((gaussian_weight([12.0, 10.0], &aniso).unwrap() - half).abs() < 1e-15);
        assert!((half - 0.6065).abs() < 1e-4);
        let singular = pg_with(Matrix2::new(1.0, 1.0, 1.0, 1.0));
        assert!(gaussian_weight([10.0, 10.0], &singular).is_err());
    }

    fn test_camera() -> Camera {
        let mut cam = axis_camera();
        cam.rotation = crate::scene::quat_normalize(&[0.95, 0.1, -0.2, 0.15]).unwrap();
        cam.translation = [0.1, -0.2, 0.3];
        cam
    }

    /// Scalar objective: fixed linear functional of mean2d and cov2d.
    fn objective(pos: &[f64; 3], ls: &[f64; 3], rot: &Quat, cam: &Camera) -> f64 {
        let pg = project_gaussian(pos, ls, rot, cam).unwrap();
        0.7 * pg.mean2d[0] - 1.3 * pg.mean2d[1] + 0.2 * pg.cov2d[(0, 0)]
            - 0.4 * pg.cov2d[(0, 1)]
            - 0.4 * pg.cov2d[(1, 0)]
            + 0.9 * pg.cov2d[(1, 1)]
    }

    fn analytic(pos: &[f64; 3], ls: &[f64; 3], rot: &Quat, cam: &Camera) -> ProjectionGrad {
        let g = Matrix2::new(0.2, -0.4, -0.4, 0.9);
        project_backward(pos, ls, rot, cam, [0.7, -1.3], &g)
    }

    fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
        (a - b).abs() <= abs + rel * a.abs().max(b.abs())
    }

    proptest! {
        #[test]
        fn projection_gradient_matches_finite_differences(
            pos in prop::array::uniform3(-0.3f64..0.3),
            ls in prop::array::uniform3(-3.0f64..-1.5),
            rot in prop::array::uniform4(-1.0f64..1.0),
        ) {
            prop_assume!(quat_norm(&rot) > 0.2);
            let cam = test_camera();
            let pos = [pos[0], pos[1], pos[2] + 1.5];
            let grad = analytic(&pos, &ls, &rot, &cam);
            let h = 1e-5;
            for k in 0..3 {
                let mut p = pos; p[k] += h;
                let mut m = pos; m[k] -= h;
                let fd = (objective(&p, &ls, &rot, &cam) - objective(&m, &ls, &rot, &cam)) / (2.0 * h);
                prop_assert!(rel_close(grad.position[k], fd, 1e-4, 1e-6), "pos {k}: {} vs {fd}", grad.position[k]);
                let mut p = ls; p[k] += h;
                let mut m = ls; m[k] -= h;
                let fd = (objective(&pos, &p, &rot, &cam) - objective(&pos, &m, &rot, &cam)) / (2.0 * h);
                prop_assert!(rel_close(grad.log_scale[k], fd, 1e-4, 1e-6), "scale {k}: {} vs {fd}", grad.log_scale[k]);
            }
            for k in 0..4 {
                let mut p = rot; p[k] += h;
                let mut m = rot; m[k] -= h;
                let fd = (objective(&pos, &ls, &p, &cam) - objective(&pos, &ls, &m, &cam)) / (2.0 * h);
                prop_assert!(rel_close(grad.rotation[k], fd, 1e-4, 1e-6), "rot {k}: {} vs {fd}", grad.rotation[k]);
            }
        }

        #[test]
        fn weight_in_unit_interval_and_decreasing(
            a in 0.5f64..20.0, c in 0.5f64..20.0, b in -0.4f64..0.4,
            dir in prop::array::uniform2(-1.0f64..1.0),
        ) {
            prop_assume!(dir[0].abs() + dir[1].abs() > 1e-3);
            let off = b * (a * c).sqrt();
            let pg = pg_with(Matrix2::new(a, off, off, c));
            let mut prev = gaussian_weight(pg.mean2d, &pg).unwrap();
            prop_assert_eq!(prev, 1.0);
            for step in 1..20 {
                let t = step as f64 * 0.5;
                let v = [pg.mean2d[0] + t * dir[0], pg.mean2d[1] + t * dir[1]];
                let w = gaussian_weight(v, &pg).unwrap();
                prop_assert!(w > 0.0 || t * t * (dir[0]*dir[0]+dir[1]*dir[1]) > 100.0);
                prop_assert!(w <= 1.0);
                prop_assert!(w < prev || w == 0.0);
                prev = w;
            }
        }
    }

    #[test]
    fn rotation_of_isotropic_gaussian_projects_identically() {
        let rz = quat_from_axis_angle([0.3, 0.2, 1.0], 1.1);
        let a =
            project_gaussian(&[0.1, 0.0, 2.0], &[-2.0; 3], &IDENTITY_QUAT, &axis_camera()).unwrap();
        let b = project_gaussian(&[0.1, 0.0, 2.0], &[-2.0; 3], &rz, &axis_camera()).unwrap();
        assert!((a.cov2d - b.cov2d).abs().max() < 1e-10);
    }
}
