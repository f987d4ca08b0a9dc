//! Pinhole cameras, rays and the projection algebra shared by mask projection
//! and refinement.
//!
//! Conventions: poses are camera-to-world, the camera looks down +z with +x to
//! the right and +y down, and the image origin is the top-left corner. Pixel
//! `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
//!
//! Two depth notions appear in the pipeline. *Ray distance* is the Euclidean
//! distance from the camera center along a unit direction; rendered depth maps
//! store this. *Camera depth* is the z coordinate in the camera frame, which is
//! what [`pixel_to_world`] takes and [`world_to_pixel`] reports.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Points closer than this to the image plane count as not visible.
pub const VISIBILITY_EPS: f64 = 1e-9;

const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::domain(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("image size must be non-zero"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::domain(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= self.width as f64 && v <= self.height as f64
    }

    /// Integer pixel containing the continuous coordinate, if inside the image.
    pub fn pixel_index(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        (i < self.width as usize && j < self.height as usize).then_some((i, j))
    }

    /// Unnormalized camera-frame direction through a pixel, with z = 1.
    pub fn camera_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::domain("translation must be finite"));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Camera at `eye` looking at `target`, with image-down roughly along `down`.
    pub fn look_at(eye: Point3, target: Point3, down: Vector3<f64>) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::domain("look_at target coincides with eye"))?;
        let x = down
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::domain("look_at down vector is parallel to view direction"))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Pose::new(rotation, eye)
    }

    /// Parses a row-major 4x4 camera-to-world matrix.
    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::domain(format!(
                "pose matrix needs 16 values, got {}",
                m.len()
            )));
        }
        let mat = Matrix4::from_row_slice(m);
        let bottom = [mat[(3, 0)], mat[(3, 1)], mat[(3, 2)], mat[(3, 3)]];
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs()) > ROTATION_TOL
            || (bottom[3] - 1.0).abs() > ROTATION_TOL
        {
            return Err(Error::domain("pose matrix bottom row must be (0, 0, 0, 1)"));
        }
        let rotation = mat.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = mat.fixed_view::<3, 1>(0, 3).into_owned();
        Pose::new(rotation, translation)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3 {
        self.translation
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Maps a world point into this camera's frame.
    pub fn world_to_camera(&self, p: &Point3) -> Point3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::domain("rotation must be finite"));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    if ortho > ROTATION_TOL {
        return Err(Error::domain(format!(
            "rotation is not orthonormal (max deviation {ortho:.3e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(Error::domain(format!(
            "rotation determinant is {det:.6}, expected +1"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Point3, direction: Vector3<f64>, t_near: f64, t_far: f64) -> Result<Self> {
        if ((direction.norm() - 1.0).abs()) > 1e-9 {
            return Err(Error::domain("ray direction must be unit length"));
        }
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(Error::domain(format!(
                "ray bounds must satisfy 0 <= near < far (near={t_near}, far={t_far})"
            )));
        }
        Ok(Ray {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.direction * t
    }
}

/// Continuous pixel coordinate in a given view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
    pub view: usize,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64, view: usize) -> Self {
        PixelCoord { u, v, view }
    }

    /// Center of integer pixel `(i, j)`.
    pub fn center(i: usize, j: usize, view: usize) -> Self {
        PixelCoord {
            u: i as f64 + 0.5,
            v: j as f64 + 0.5,
            view,
        }
    }
}

/// World-space unit direction of the viewing ray through `px`.
pub fn pixel_direction(intr: &Intrinsics, pose: &Pose, px: &PixelCoord) -> Vector3<f64> {
    pose.transform_vector(&intr.camera_direction(px.u, px.v))
        .normalize()
}

pub fn generate_ray(
    intr: &Intrinsics,
    pose: &Pose,
    px: &PixelCoord,
    t_near: f64,
    t_far: f64,
) -> Result<Ray> {
    if !intr.contains(px.u, px.v) {
        return Err(Error::domain(format!(
            "pixel ({}, {}) outside {}x{} image",
            px.u, px.v, intr.width, intr.height
        )));
    }
    Ray::new(
        pose.center(),
        pixel_direction(intr, pose, px),
        t_near,
        t_far,
    )
}

/// Lifts a pixel to the world point at camera-frame depth `t`: `G · K⁻¹ · t·(u, v, 1)`.
pub fn pixel_to_world(pose: &Pose, intr: &Intrinsics, t: f64, px: &PixelCoord) -> Result<Point3> {
    if !(t > 0.0) {
        return Err(Error::domain(format!("depth must be positive, got {t}")));
    }
    let cam = intr.inverse_matrix() * Vector3::new(t * px.u, t * px.v, t);
    Ok(pose.transform_point(&cam))
}

/// Projects a world point into the camera: `π(K · G⁻¹ · X)` plus the camera-frame depth.
///
/// The returned pixel may lie outside the image; callers check bounds.
pub fn world_to_pixel(pose: &Pose, intr: &Intrinsics, x: &Point3) -> Result<(PixelCoord, f64)> {
    let cam = pose.world_to_camera(x);
    if !(cam.z > VISIBILITY_EPS) {
        return Err(Error::NotVisible(cam.z));
    }
    let h = intr.matrix() * cam;
    Ok((PixelCoord::new(h.x / h.z, h.y / h.z, 0), cam.z))
}

/// Camera-frame depth of the point at ray distance `distance` through `px`.
pub fn ray_distance_to_camera_depth(intr: &Intrinsics, px: &PixelCoord, distance: f64) -> f64 {
    distance / intr.camera_direction(px.u, px.v).norm()
}

pub fn camera_depth_to_ray_distance(intr: &Intrinsics, px: &PixelCoord, depth: f64) -> f64 {
    depth * intr.camera_direction(px.u, px.v).norm()
}

/// Lifts a target pixel with ray-distance depth to world space and returns that
/// point's distance to the source camera center.
pub fn reproject_depth(
    target_pose: &Pose,
    intr: &Intrinsics,
    target_px: &PixelCoord,
    target_depth: f64,
    source_pose: &Pose,
) -> Result<f64> {
    let cam_depth = ray_distance_to_camera_depth(intr, target_px, target_depth);
    let x = pixel_to_world(target_pose, intr, cam_depth, target_px)?;
    Ok((x - source_pose.center()).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn intr() -> Intrinsics {
        Intrinsics::new(50.0, 60.0, 32.0, 24.0, 64, 48).unwrap()
    }

    #[test]
    fn principal_ray_points_forward() {
        let i = intr();
        let ray = generate_ray(
            &i,
            &Pose::identity(),
            &PixelCoord::new(i.cx, i.cy, 0),
            0.1,
            10.0,
        )
        .unwrap();
        assert_relative_eq!(ray.direction, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
        assert_eq!(ray.origin, Vector3::zeros());
    }

    #[test]
    fn unit_offset_pixel_direction() {
        let i = Intrinsics::new(20.0, 20.0, 32.0, 24.0, 64, 48).unwrap();
        let ray = generate_ray(
            &i,
            &Pose::identity(),
            &PixelCoord::new(i.cx + i.fx, i.cy, 0),
            0.1,
            10.0,
        )
        .unwrap();
        let s = 0.5f64.sqrt();
        assert_relative_eq!(ray.direction, Vector3::new(s, 0.0, s), epsilon = 1e-15);
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        let i = intr();
        let err = generate_ray(&i, &Pose::identity(), &PixelCoord::new(-1.0, 3.0, 0), 0.1, 1.0);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn lift_on_axis_and_with_translation() {
        let i = intr();
        let px = PixelCoord::new(i.cx, i.cy, 0);
        let x = pixel_to_world(&Pose::identity(), &i, 2.0, &px).unwrap();
        assert_relative_eq!(x, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-15);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, -1.0));
        let x = pixel_to_world(&pose, &i, 2.0, &px).unwrap();
        assert_relative_eq!(x, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
        assert!(pixel_to_world(&pose, &i, 0.0, &px).is_err());
    }

    #[test]
    fn project_axis_point_and_behind() {
        let i = intr();
        let (px, z) = world_to_pixel(&Pose::identity(), &i, &Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_relative_eq!(px.u, i.cx);
        assert_relative_eq!(px.v, i.cy);
        assert_relative_eq!(z, 5.0);
        let behind = world_to_pixel(&Pose::identity(), &i, &Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(behind, Err(Error::NotVisible(_))));
    }

    #[test]
    fn reproject_same_frame_and_pythagorean() {
        let i = intr();
        let px = PixelCoord::new(i.cx, i.cy, 0);
        let pose = Pose::look_at(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(0.0, 0.0, 9.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        let off = PixelCoord::new(10.5, 40.5, 0);
        assert_relative_eq!(
            reproject_depth(&pose, &i, &off, 3.7, &pose).unwrap(),
            3.7,
            epsilon = 1e-12
        );
        let source = Pose::from_translation(Vector3::new(3.0, 0.0, 0.0));
        let d = reproject_depth(&Pose::identity(), &i, &px, 4.0, &source).unwrap();
        assert_relative_eq!(d, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_reflection() {
        let mut r = Matrix3::identity();
        r[(2, 2)] = -1.0;
        assert!(Pose::new(r, Vector3::zeros()).is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let pose = Pose::look_at(
            Vector3::new(0.3, -0.2, 1.0),
            Vector3::new(0.0, 0.0, 6.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        let back = Pose::from_row_major(&pose.to_row_major()).unwrap();
        assert_relative_eq!(back.matrix(), pose.matrix(), epsilon = 1e-15);
    }

    #[test]
    fn corner_rays_inside_frustum() {
        let i = intr();
        let pose = Pose::look_at(
            Vector3::new(0.5, 0.1, -2.0),
            Vector3::new(0.0, 0.0, 4.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        let principal = generate_ray(&i, &pose, &PixelCoord::new(i.cx, i.cy, 0), 0.0, 1.0)
            .unwrap()
            .direction;
        let (w, h) = (i.width as f64, i.height as f64);
        for (u, v) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            let d = generate_ray(&i, &pose, &PixelCoord::new(u, v, 0), 0.0, 1.0)
                .unwrap()
                .direction;
            assert!(d.dot(&principal) > 0.0);
        }
    }
}
