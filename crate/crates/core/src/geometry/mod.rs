//! Rigid motion, pinhole projection and the inverse-depth reprojection map.

mod scene;

pub use scene::{derive_seed, generate_corpus, generate_scene, SceneConfig, SceneSample};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Reprojected depth at or below this is treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Rigid transform with a unit quaternion `[w, x, y, z]` and a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    rotation: [f64; 4],
    translation: [f64; 3],
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let n = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) || translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "invalid pose: q = {rotation:?}, t = {translation:?}"
            )));
        }
        Ok(PoseSE3 {
            rotation: quat_normalize(rotation),
            translation,
        })
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length), then translation.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Result<Self> {
        let n = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
        if angle == 0.0 || n == 0.0 {
            return PoseSE3::new([1.0, 0.0, 0.0, 0.0], translation);
        }
        let (s, c) = (0.5 * angle).sin_cos();
        PoseSE3::new(
            [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n],
            translation,
        )
    }

    pub fn rotation(&self) -> [f64; 4] {
        self.rotation
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == [1.0, 0.0, 0.0, 0.0] && self.translation == [0.0; 3]
    }

    /// `R - I`, formed directly so that it is exactly zero for the identity rotation.
    fn rotation_delta(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.rotation;
        [
            [-2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), -2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), -2.0 * (x * x + y * y)],
        ]
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let mut r = self.rotation_delta();
        for (i, row) in r.iter_mut().enumerate() {
            row[i] += 1.0;
        }
        r
    }

    pub fn rotate(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation_matrix();
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    /// Applies the transform to a point.
    pub fn act(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotate(p);
        [
            q[0] + self.translation[0],
            q[1] + self.translation[1],
            q[2] + self.translation[2],
        ]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: quat_normalize(quat_mul(self.rotation, other.rotation)),
            translation: self.act(other.translation),
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let [w, x, y, z] = self.rotation;
        let conj = PoseSE3 {
            rotation: quat_normalize([w, -x, -y, -z]),
            translation: [0.0; 3],
        };
        let t = conj.rotate(self.translation);
        PoseSE3 {
            rotation: conj.rotation,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Relative motion `T_j ∘ T_i⁻¹` between two absolute poses.
    pub fn relative(t_i: &PoseSE3, t_j: &PoseSE3) -> PoseSE3 {
        t_j.compose(&t_i.inverse())
    }
}

/// Pinhole intrinsics at feature-grid resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Contract(format!(
                "camera needs positive focal lengths, got fx={fx} fy={fy}"
            )));
        }
        Ok(Camera { fx, fy, cx, cy })
    }

    /// Default grid camera: focal length 0.9·W, principal point at the grid centre.
    pub fn for_grid(height: usize, width: usize) -> Self {
        let f = 0.9 * width as f64;
        Camera {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn backproject(&self, x: f64, y: f64, inv_depth: f64) -> [f64; 3] {
        let z = 1.0 / inv_depth;
        [(x - self.cx) / self.fx * z, (y - self.cy) / self.fy * z, z]
    }

    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        )
    }
}

/// One reprojected pixel: displacement, depth in the target frame and the
/// derivative of the displacement w.r.t. the source inverse depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub flow: (f64, f64),
    pub depth: f64,
    pub d_flow: (f64, f64),
}

/// Maps pixel `(x, y)` with inverse depth `inv_depth` through `pose`.
///
/// With `q = R·K⁻¹[x, y, 1]` the target pixel is `K(q + d·t)/(q_z + d·t_z)`.
/// The displacement is evaluated relative to the source pixel so that the
/// identity motion yields exactly zero flow.
pub fn project_point(x: f64, y: f64, inv_depth: f64, pose: &PoseSE3, cam: &Camera) -> ProjectedPoint {
    let dr = pose.rotation_delta();
    let t = pose.translation;
    let (ox, oy) = (x - cam.cx, y - cam.cy);
    let p = [ox / cam.fx, oy / cam.fy, 1.0];
    let rp = |row: &[f64; 3]| row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
    let num_x = ox + cam.fx * (rp(&dr[0]) + t[0] * inv_depth);
    let num_y = oy + cam.fy * (rp(&dr[1]) + t[1] * inv_depth);
    let den = 1.0 + rp(&dr[2]) + t[2] * inv_depth;
    let flow = (num_x / den - ox, num_y / den - oy);
    let den2 = den * den;
    let d_flow = (
        (cam.fx * t[0] * den - num_x * t[2]) / den2,
        (cam.fy * t[1] * den - num_y * t[2]) / den2,
    );
    ProjectedPoint {
        flow,
        depth: den / inv_depth,
        d_flow,
    }
}

/// Dense `2×H×W` pixel grid, channel 0 = x (column), channel 1 = y (row).
pub fn grid_coords(height: usize, width: usize) -> Tensor {
    let hw = height * width;
    Tensor::from_fn(&[2, height, width], |i| {
        let p = i % hw;
        if i < hw {
            (p % width) as f64
        } else {
            (p / width) as f64
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reprojection {
    /// `2×H×W` target coordinates.
    pub coords: Tensor,
    /// `2×H×W` displacement `coords - grid`.
    pub flow: Tensor,
    /// `H×W`; false where the point lands at depth ≤ [`MIN_DEPTH`].
    pub valid: Vec<bool>,
    /// `2×H×W` derivative of the coordinates w.r.t. the source inverse depth.
    pub d_inv_depth: Tensor,
}

impl Reprojection {
    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len().max(1) as f64
    }
}

/// Reprojects every grid pixel of the source frame into the target frame.
///
/// Invalid pixels are flagged and their coordinates are parked at `(-W, -H)`,
/// outside the target grid.
pub fn reproject(inv_depth: &Tensor, pose: &PoseSE3, cam: &Camera) -> Result<Reprojection> {
    inv_depth.expect_ndim(2, "inverse depth")?;
    let (h, w) = (inv_depth.shape()[0], inv_depth.shape()[1]);
    if let Some(bad) = inv_depth.data().iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::Contract(format!("inverse depth must be positive, found {bad}")));
    }
    let hw = h * w;
    let mut coords = vec![0.0; 2 * hw];
    let mut flow = vec![0.0; 2 * hw];
    let mut d_inv = vec![0.0; 2 * hw];
    let mut valid = vec![true; hw];
    for (p, &d) in inv_depth.data().iter().enumerate() {
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        let pp = project_point(x, y, d, pose, cam);
        if !(pp.depth > MIN_DEPTH) || !pp.flow.0.is_finite() || !pp.flow.1.is_finite() {
            valid[p] = false;
            coords[p] = -(w as f64);
            coords[hw + p] = -(h as f64);
            flow[p] = coords[p] - x;
            flow[hw + p] = coords[hw + p] - y;
            continue;
        }
        flow[p] = pp.flow.0;
        flow[hw + p] = pp.flow.1;
        coords[p] = x + pp.flow.0;
        coords[hw + p] = y + pp.flow.1;
        d_inv[p] = pp.d_flow.0;
        d_inv[hw + p] = pp.d_flow.1;
    }
    let shape = [2, h, w];
    Ok(Reprojection {
        coords: Tensor::new(&shape, coords)?,
        flow: Tensor::new(&shape, flow)?,
        valid,
        d_inv_depth: Tensor::new(&shape, d_inv)?,
    })
}

/// Differentiable reprojection w.r.t. the inverse depth node (`H×W`).
/// Invalid pixels carry zero gradient.
pub fn reproject_on_tape(
    tape: &mut Tape,
    inv_depth: Var,
    pose: &PoseSE3,
    cam: &Camera,
) -> Result<(Var, Vec<bool>)> {
    let rep = reproject(tape.value(inv_depth), pose, cam)?;
    let jac = rep.d_inv_depth;
    let var = tape.push("reproject", rep.coords, &[inv_depth], move |ctx| {
        let hw = jac.numel() / 2;
        let g = ctx.grad.data();
        let j = jac.data();
        let acc = ctx.grad_mut(0);
        for (p, a) in acc.data_mut().iter_mut().enumerate() {
            *a += g[p] * j[p] + g[hw + p] * j[hw + p];
        }
        Ok(())
    });
    Ok((var, rep.valid))
}

/// Coordinates of arbitrary points `(x, y, inv_depth)` after the transform;
/// `None` where the point falls behind the target camera.
pub fn reproject_points(points: &[(f64, f64, f64)], pose: &PoseSE3, cam: &Camera) -> Vec<Option<(f64, f64, f64)>> {
    points
        .iter()
        .map(|&(x, y, d)| {
            let pp = project_point(x, y, d, pose, cam);
            (pp.depth > MIN_DEPTH).then(|| (x + pp.flow.0, y + pp.flow.1, 1.0 / pp.depth))
        })
        .collect()
}

pub(crate) fn expect_coords(coords: &Tensor, h: usize, w: usize) -> Result<()> {
    if coords.shape() != [2, h, w] {
        return Err(shape_err!(
            "coordinates must be 2×{h}×{w}, got {:?}",
            coords.shape()
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, scale: f64) -> PoseSE3 {
        let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let t = [
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        ];
        PoseSE3::from_axis_angle(axis, rng.random_range(-0.3..0.3), t).unwrap()
    }

    fn random_inv_depth(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w], |_| rng.random_range(0.2..0.6))
    }

    fn quat_norm(p: &PoseSE3) -> f64 {
        p.rotation().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let t = random_pose(&mut rng, 2.0);
            let e = t.compose(&t.inverse());
            assert!((quat_norm(&e) - 1.0).abs() < 1e-12);
            assert!((e.rotation()[0].abs() - 1.0).abs() < 1e-10);
            for v in e.translation() {
                assert!(v.abs() < 1e-10);
            }
            let p = [0.3, -1.2, 4.0];
            let back = e.act(p);
            for k in 0..3 {
                assert!((back[k] - p[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_motion_reprojects_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_inv_depth(&mut rng, 6, 9);
        let cam = Camera::new(7.3, 6.1, 4.17, 2.9).unwrap();
        let rep = reproject(&d, &PoseSE3::identity(), &cam).unwrap();
        assert!(rep.coords.bit_eq(&grid_coords(6, 9)));
        assert!(rep.flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_translation_expands_radially() {
        let (h, w) = (9, 9);
        let cam = Camera::new(8.0, 8.0, 4.0, 4.0).unwrap();
        let d = Tensor::full(&[h, w], 0.5);
        let pose = PoseSE3::new([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, -0.3]).unwrap();
        let rep = reproject(&d, &pose, &cam).unwrap();
        let hw = h * w;
        let centre = 4 * w + 4;
        assert_eq!(rep.flow.data()[centre], 0.0);
        assert_eq!(rep.flow.data()[hw + centre], 0.0);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (fx, fy) = (rep.flow.data()[p], rep.flow.data()[hw + p]);
                let (rx, ry) = (x as f64 - 4.0, y as f64 - 4.0);
                // parallel to the radial direction and pointing outward
                assert!((fx * ry - fy * rx).abs() < 1e-12);
                assert!(fx * rx + fy * ry >= 0.0);
            }
        }
    }

    #[test]
    fn matches_scalar_projection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = random_pose(&mut rng, 0.3);
        let d = random_inv_depth(&mut rng, 8, 8);
        let cam = Camera::for_grid(8, 8);
        let rep = reproject(&d, &pose, &cam).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let p = cam.backproject(x as f64, y as f64, d.at(&[y, x]));
                let (u, v) = cam.project(pose.act(p));
                assert!((rep.coords.at(&[0, y, x]) - u).abs() < 1e-10);
                assert!((rep.coords.at(&[1, y, x]) - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn relative_pose_is_associative_with_two_step_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = Camera::for_grid(8, 8);
        for _ in 0..5 {
            let ti = random_pose(&mut rng, 1.0);
            let tj = ti.compose(&random_pose(&mut rng, 0.2));
            let d = random_inv_depth(&mut rng, 8, 8);
            let rep = reproject(&d, &PoseSE3::relative(&ti, &tj), &cam).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let p = cam.backproject(x as f64, y as f64, d.at(&[y, x]));
                    let world = ti.inverse().act(p);
                    let (u, v) = cam.project(tj.act(world));
                    assert!((rep.coords.at(&[0, y, x]) - u).abs() < 1e-10);
                    assert!((rep.coords.at(&[1, y, x]) - v).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn inverse_motion_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = Camera::for_grid(8, 8);
        let pose = random_pose(&mut rng, 0.2);
        let d = random_inv_depth(&mut rng, 8, 8);
        let forward: Vec<_> = (0..64)
            .map(|p| ((p % 8) as f64, (p / 8) as f64, d.data()[p]))
            .collect();
        let there = reproject_points(&forward, &pose, &cam);
        let pts: Vec<_> = there.iter().map(|p| p.unwrap()).collect();
        let back = reproject_points(&pts, &pose.inverse(), &cam);
        for (orig, b) in forward.iter().zip(back) {
            let b = b.unwrap();
            assert!((orig.0 - b.0).abs() < 1e-8 && (orig.1 - b.1).abs() < 1e-8);
        }
    }

    #[test]
    fn behind_camera_pixels_are_flagged() {
        let cam = Camera::for_grid(4, 4);
        let d = Tensor::full(&[4, 4], 1.0);
        let pose = PoseSE3::new([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, -2.0]).unwrap();
        let rep = reproject(&d, &pose, &cam).unwrap();
        assert!(rep.valid.iter().all(|&v| !v));
        assert_eq!(rep.coords.at(&[0, 1, 1]), -4.0);
        assert!(reproject(&Tensor::full(&[2, 2], 0.0), &pose, &cam).is_err());
    }

    #[test]
    fn inverse_depth_gradient_passes_fd_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let pose = random_pose(&mut rng, 0.4);
            let d = random_inv_depth(&mut rng, 5, 6);
            let weights = Tensor::from_fn(&[2, 5, 6], |_| rng.random_range(-1.0..1.0));
            let cam = Camera::for_grid(5, 6);
            let rep = fd_check(
                |t, v| {
                    let (c, _) = reproject_on_tape(t, v, &pose, &cam)?;
                    let wv = t.constant(weights.clone());
                    let m = t.mul(c, wv)?;
                    Ok(t.sum(m))
                },
                &d,
                1e-6,
            )
            .unwrap();
            assert!(rep.max_rel_error <= 1e-5, "seed {seed}: {rep:?}");
        }
    }
}
