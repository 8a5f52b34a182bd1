//! Pinhole cameras, frustum and voxel lattices, and the transforms between
//! image, frustum and metric space.
//!
//! Conventions: camera frame is x right, y down, z forward (meters). Pixel
//! `k` covers `[k, k + 1)` so its center sits at `k + 0.5`. A frustum cell
//! `(row i, col j, plane d)` is centered at feature-plane pixel
//! `(j + 0.5, i + 0.5)` and depth `depths[d]`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// From a row-major 3x4 `[R | t]` matrix.
    pub fn from_rows(rows: &[f64; 12]) -> Self {
        Pose {
            rotation: Matrix3::new(
                rows[0], rows[1], rows[2], rows[4], rows[5], rows[6], rows[8], rows[9], rows[10],
            ),
            translation: Vector3::new(rows[3], rows[7], rows[11]),
        }
    }

    pub fn to_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) || !((r.determinant() - 1.0).abs() <= 1e-6) {
            return Err(Error::Config(format!(
                "pose rotation is not a proper rotation (orthogonality error {err:e})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("pose translation must be finite".into()));
        }
        Ok(())
    }
}

/// Pinhole intrinsics in pixels plus a camera-to-world pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: [f64; 4], pose: Pose) -> Result<Self> {
        let [fx, fy, cx, cy] = intrinsics;
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Config(format!(
                "focal lengths must be positive and finite, got fx={fx} fy={fy}"
            )));
        }
        pose.validate()?;
        Ok(Camera { fx, fy, cx, cy, pose })
    }

    pub fn intrinsics(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    /// Camera-frame point at depth `z` through pixel `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Result<Vector3<f64>> {
        if !(z > 0.0) {
            return Err(Error::contract("backproject", format!("depth must be positive, got {z}")));
        }
        Ok(Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z))
    }

    /// Pixel coordinates of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation * p + self.pose.translation
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation.transpose() * (p - self.pose.translation)
    }

    /// Length of the ray segment per unit of depth through pixel `(u, v)`.
    pub fn ray_stretch(&self, u: f64, v: f64) -> f64 {
        let a = (u - self.cx) / self.fx;
        let b = (v - self.cy) / self.fy;
        (a * a + b * b + 1.0).sqrt()
    }

    /// The same camera seen at a resolution reduced by `(sx, sy)`.
    pub fn scaled(&self, sx: f64, sy: f64) -> Camera {
        Camera {
            fx: self.fx / sx,
            fy: self.fy / sy,
            cx: self.cx / sx,
            cy: self.cy / sy,
            pose: self.pose,
        }
    }
}

fn default_planes() -> usize {
    72
}
fn default_near() -> f64 {
    2.0
}
fn default_far() -> f64 {
    59.6
}

/// Frustum lattice layout: feature-plane resolution and depth planes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrustumSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_planes")]
    pub planes: usize,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    #[serde(default)]
    pub perturb: bool,
}

impl FrustumSpec {
    pub fn new(height: usize, width: usize, planes: usize, near: f64, far: f64) -> Result<Self> {
        let s = FrustumSpec {
            height,
            width,
            planes,
            near,
            far,
            perturb: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("frustum feature plane must be non-empty".into()));
        }
        if self.planes < 2 {
            return Err(Error::Config(format!("need at least 2 depth planes, got {}", self.planes)));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::Config(format!(
                "depth range must satisfy 0 < near < far, got [{}, {}]",
                self.near, self.far
            )));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.far - self.near) / self.planes as f64
    }

    /// Unperturbed plane depths, the centers of `planes` equal bins.
    pub fn bin_centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.planes).map(|i| self.near + (i as f64 + 0.5) * w).collect()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width * self.planes
    }
}

/// Plane depths for one pass: bin centers, or one uniform draw per bin when
/// `spec.perturb` asks for stratified perturbation.
pub fn sample_depth_planes<R: Rng + ?Sized>(spec: &FrustumSpec, rng: &mut R) -> Vec<f64> {
    if !spec.perturb {
        return spec.bin_centers();
    }
    let w = spec.bin_width();
    (0..spec.planes)
        .map(|i| {
            let lo = spec.near + i as f64 * w;
            let z = lo + rng.random::<f64>() * w;
            // keep the draw inside the half-open bin despite rounding
            z.min(lo + w * (1.0 - f64::EPSILON))
        })
        .collect()
}

/// Distances between successive backprojected samples on the ray through
/// `(u, v)`. The last interval repeats the one before it.
pub fn delta_distances(u: f64, v: f64, depths: &[f64], cam: &Camera) -> Result<Vec<f64>> {
    if depths.len() < 2 {
        return Err(Error::contract("delta_distances", "need at least two depths"));
    }
    if depths.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::contract("delta_distances", "depths must be strictly increasing"));
    }
    let mut out = Vec::with_capacity(depths.len());
    for w in depths.windows(2) {
        let a = cam.backproject(u, v, w[0])?;
        let b = cam.backproject(u, v, w[1])?;
        out.push((b - a).norm());
    }
    out.push(*out.last().unwrap());
    Ok(out)
}

/// Continuous frustum coordinates: feature-plane pixel `(u, v)` and plane
/// index `d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrustumCoord {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

impl FrustumCoord {
    /// Lattice index `[row, col, plane]` for trilinear sampling.
    pub fn lattice(&self, spec: &FrustumSpec) -> [f64; 3] {
        [
            snap((self.v - 0.5).clamp(0.0, (spec.height - 1) as f64)),
            snap((self.u - 0.5).clamp(0.0, (spec.width - 1) as f64)),
            self.d,
        ]
    }
}

/// Rounds values within 1e-9 of an integer onto it, so that rays that pass
/// through lattice nodes sample them exactly.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// A frustum lattice bound to a camera and a concrete set of plane depths.
#[derive(Clone, Debug, PartialEq)]
pub struct Frustum {
    pub spec: FrustumSpec,
    /// Camera with intrinsics expressed in feature-plane pixels.
    pub camera: Camera,
    pub depths: Vec<f64>,
}

impl Frustum {
    /// `image_camera` carries intrinsics for an `image_width x image_height`
    /// image; they are rescaled to the feature plane.
    pub fn new(
        spec: FrustumSpec,
        image_camera: &Camera,
        image_width: usize,
        image_height: usize,
        depths: Vec<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        if depths.len() != spec.planes {
            return Err(Error::contract(
                "frustum",
                format!("{} depths for {} planes", depths.len(), spec.planes),
            ));
        }
        if depths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::contract("frustum", "plane depths must be strictly increasing"));
        }
        let sx = image_width as f64 / spec.width as f64;
        let sy = image_height as f64 / spec.height as f64;
        Ok(Frustum {
            spec,
            camera: image_camera.scaled(sx, sy),
            depths,
        })
    }

    /// Continuous plane index of depth `z`, `None` outside `[near, far]`.
    pub fn plane_index(&self, z: f64) -> Option<f64> {
        if !(z >= self.spec.near && z <= self.spec.far) {
            return None;
        }
        let d = &self.depths;
        let last = d.len() - 1;
        if z <= d[0] {
            return Some(0.0);
        }
        if z >= d[last] {
            return Some(last as f64);
        }
        let i = d.partition_point(|&x| x <= z) - 1;
        Some(snap(i as f64 + (z - d[i]) / (d[i + 1] - d[i])))
    }

    /// Frustum coordinates of a point in this camera's frame.
    pub fn locate_camera(&self, p: &Vector3<f64>) -> Option<FrustumCoord> {
        let (u, v) = self.camera.project(p)?;
        let (w, h) = (self.spec.width as f64, self.spec.height as f64);
        if !(u >= 0.0 && u <= w && v >= 0.0 && v <= h) {
            return None;
        }
        let d = self.plane_index(p.z)?;
        Some(FrustumCoord { u, v, d })
    }

    pub fn locate_world(&self, p: &Vector3<f64>) -> Option<FrustumCoord> {
        self.locate_camera(&self.camera.to_camera(p))
    }

    pub fn lattice_world(&self, p: &Vector3<f64>) -> Option<[f64; 3]> {
        self.locate_world(p).map(|c| c.lattice(&self.spec))
    }

    /// Center of feature cell `(i, j)` in feature-plane pixels.
    pub fn pixel_center(i: usize, j: usize) -> (f64, f64) {
        (j as f64 + 0.5, i as f64 + 0.5)
    }

    /// World-space sample points on the ray through cell `(i, j)`, one per plane.
    pub fn ray_points(&self, i: usize, j: usize) -> Vec<Vector3<f64>> {
        let (u, v) = Self::pixel_center(i, j);
        self.depths
            .iter()
            .map(|&z| {
                let p = self.camera.backproject(u, v, z).expect("plane depths are positive");
                self.camera.to_world(&p)
            })
            .collect()
    }

    /// Inter-sample distances for every cell, shape `[H, W, D, 1]`.
    pub fn deltas<T: Real>(&self) -> Grid<T> {
        let s = &self.spec;
        let mut data = Vec::with_capacity(s.cells());
        for i in 0..s.height {
            for j in 0..s.width {
                let (u, v) = Self::pixel_center(i, j);
                let k = self.camera.ray_stretch(u, v);
                for p in 0..s.planes {
                    let dz = if p + 1 < s.planes {
                        self.depths[p + 1] - self.depths[p]
                    } else {
                        self.depths[p] - self.depths[p - 1]
                    };
                    data.push(T::of(dz * k));
                }
            }
        }
        Grid::new([s.height, s.width, s.planes, 1], data).expect("cell count matches")
    }

    /// Plane depth of every cell, shape `[H, W, D, 1]`.
    pub fn depth_grid<T: Real>(&self) -> Grid<T> {
        let s = &self.spec;
        let d = &self.depths;
        Grid::from_fn([s.height, s.width, s.planes, 1], |i| T::of(d[i % s.planes]))
    }

    pub fn positional_features<T: Real>(&self) -> Grid<T> {
        normalize_frustum_coords(&self.spec, &self.depths)
    }
}

/// Normalized `[u, v, z]` per frustum cell, shape `[H, W, D, 3]`: `u` and `v`
/// span `[-1, 1]` from the first to the last feature pixel, `z` spans `[0, 1]`
/// over `[near, far]`.
pub fn normalize_frustum_coords<T: Real>(spec: &FrustumSpec, depths: &[f64]) -> Grid<T> {
    let norm = |k: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            2.0 * k as f64 / (n - 1) as f64 - 1.0
        }
    };
    let mut data = Vec::with_capacity(spec.cells() * 3);
    for i in 0..spec.height {
        let v = norm(i, spec.height);
        for j in 0..spec.width {
            let u = norm(j, spec.width);
            for &z in depths {
                let zn = ((z - spec.near) / (spec.far - spec.near)).clamp(0.0, 1.0);
                data.extend([T::of(u), T::of(v), T::of(zn)]);
            }
        }
    }
    Grid::new([spec.height, spec.width, depths.len(), 3], data).expect("cell count matches")
}

/// Axis-aligned metric voxel lattice in the reference camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelSpec {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
    pub size: [f64; 3],
}

impl Default for VoxelSpec {
    /// Width `[-30.4, 30.4]`, height `[-1, 3]` (y down), depth `[2, 59.6]`, 0.2 m voxels.
    fn default() -> Self {
        VoxelSpec {
            x: [-30.4, 30.4],
            y: [-1.0, 3.0],
            z: [2.0, 59.6],
            size: [0.2, 0.2, 0.2],
        }
    }
}

impl VoxelSpec {
    /// Voxel counts `[ny, nx, nz]`; ranges must be whole multiples of the size.
    pub fn extents(&self) -> Result<[usize; 3]> {
        let count = |r: [f64; 2], s: f64, axis: &str| -> Result<usize> {
            let span = r[1] - r[0];
            if !(s > 0.0 && span > 0.0) {
                return Err(Error::Config(format!("voxel axis {axis} needs a positive range and size")));
            }
            let n = (span / s).round();
            if n < 1.0 || (n * s - span).abs() > 1e-9 * span.max(1.0) {
                return Err(Error::Config(format!(
                    "voxel axis {axis}: range {span} is not a whole multiple of size {s}"
                )));
            }
            Ok(n as usize)
        };
        Ok([
            count(self.y, self.size[1], "y")?,
            count(self.x, self.size[0], "x")?,
            count(self.z, self.size[2], "z")?,
        ])
    }

    /// Voxel centers in `[y, x, z]` row-major order.
    pub fn centers(&self) -> Result<Vec<Vector3<f64>>> {
        let [ny, nx, nz] = self.extents()?;
        let mut out = Vec::with_capacity(ny * nx * nz);
        for iy in 0..ny {
            let y = self.y[0] + (iy as f64 + 0.5) * self.size[1];
            for ix in 0..nx {
                let x = self.x[0] + (ix as f64 + 0.5) * self.size[0];
                for iz in 0..nz {
                    let z = self.z[0] + (iz as f64 + 0.5) * self.size[2];
                    out.push(Vector3::new(x, y, z));
                }
            }
        }
        Ok(out)
    }
}

/// Frustum coordinates of every voxel center (voxel centers are expressed in
/// the frustum camera's frame). `None` marks voxels outside the frustum.
pub fn frustum_sample_points(voxel: &VoxelSpec, frustum: &Frustum) -> Result<Vec<Option<FrustumCoord>>> {
    Ok(voxel
        .centers()?
        .iter()
        .map(|p| frustum.locate_camera(p))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam100() -> Camera {
        Camera::new([100.0, 100.0, 50.0, 50.0], Pose::identity()).unwrap()
    }

    #[test]
    fn two_bins_over_zero_to_four() {
        // near must be positive for a valid frustum; check the arithmetic directly.
        let s = FrustumSpec { height: 1, width: 1, planes: 2, near: 0.0, far: 4.0, perturb: false };
        assert_eq!(s.bin_centers(), vec![1.0, 3.0]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn default_planes_are_eight_tenths_apart() {
        let s = FrustumSpec::new(1, 1, 72, 2.0, 59.6).unwrap();
        let z = s.bin_centers();
        for w in z.windows(2) {
            assert!((w[1] - w[0] - 0.8).abs() < 1e-12);
        }
        assert!((s.bin_width() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn perturbed_depths_stay_in_their_bins() {
        let s = FrustumSpec { perturb: true, ..FrustumSpec::new(1, 1, 72, 2.0, 59.6).unwrap() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let z = sample_depth_planes(&s, &mut rng);
            for (i, &zi) in z.iter().enumerate() {
                let lo = 2.0 + i as f64 * 0.8;
                assert!(zi >= lo - 1e-12 && zi < lo + 0.8, "plane {i}: {zi}");
            }
            assert!(z.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn unperturbed_sampling_is_idempotent() {
        let s = FrustumSpec::new(2, 2, 9, 1.0, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_depth_planes(&s, &mut rng), sample_depth_planes(&s, &mut rng));
    }

    #[test]
    fn backprojection_examples() {
        let c = cam100();
        let p = c.backproject(50.0, 50.0, 7.0).unwrap();
        assert_eq!((p.x, p.y, p.z), (0.0, 0.0, 7.0));
        let p = c.backproject(150.0, 50.0, 2.0).unwrap();
        assert_eq!((p.x, p.y, p.z), (2.0, 0.0, 2.0));
        assert!(c.backproject(1.0, 1.0, 0.0).is_err());
        assert!(c.backproject(1.0, 1.0, -3.0).is_err());
    }

    #[test]
    fn deltas_on_and_off_axis() {
        let c = cam100();
        let z: Vec<f64> = (0..6).map(|i| 2.0 + 0.5 * i as f64).collect();
        let d = delta_distances(50.0, 50.0, &z, &c).unwrap();
        assert!(d.iter().all(|&x| (x - 0.5).abs() < 1e-12));
        // slope (a, b) = (0.3, -0.2); brute force from backprojected points
        let d = delta_distances(80.0, 30.0, &z, &c).unwrap();
        let expect = 0.5 * (0.3f64 * 0.3 + 0.2 * 0.2 + 1.0).sqrt();
        assert!(d.iter().all(|&x| (x - expect).abs() < 1e-12));
        assert!(delta_distances(50.0, 50.0, &[3.0, 2.0], &c).is_err());
    }

    #[test]
    fn default_spacing_delta_on_axis() {
        let s = FrustumSpec::new(1, 1, 72, 2.0, 59.6).unwrap();
        let d = delta_distances(50.0, 50.0, &s.bin_centers(), &cam100()).unwrap();
        assert!(d.iter().all(|&x| (x - 0.8).abs() < 1e-9));
    }

    #[test]
    fn plane_hit_on_optical_axis() {
        let spec = FrustumSpec::new(8, 12, 10, 2.0, 12.0).unwrap();
        let img = Camera::new([96.0, 96.0, 48.0, 32.0], Pose::identity()).unwrap();
        let f = Frustum::new(spec, &img, 96, 64, spec.bin_centers()).unwrap();
        let p = Vector3::new(0.0, 0.0, f.depths[3]);
        let c = f.locate_camera(&p).unwrap();
        assert_eq!((c.u, c.v, c.d), (f.camera.cx, f.camera.cy, 3.0));
        assert!(f.locate_camera(&Vector3::new(0.0, 0.0, -1.0)).is_none());
        assert!(f.locate_camera(&Vector3::new(0.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn normalized_coordinates_cover_the_unit_boxes() {
        let spec = FrustumSpec::new(5, 7, 9, 2.0, 20.0).unwrap();
        let g = normalize_frustum_coords::<f64>(&spec, &spec.bin_centers());
        let at = |i: usize, j: usize, d: usize, c: usize| g.at(&[i, j, d, c]);
        assert_eq!((at(2, 3, 4, 0), at(2, 3, 4, 1)), (0.0, 0.0));
        assert!((at(2, 3, 4, 2) - 0.5).abs() < 1e-12);
        assert_eq!((at(0, 0, 0, 0), at(0, 0, 0, 1)), (-1.0, -1.0));
        assert!((at(0, 0, 0, 2) - 1.0 / 18.0).abs() < 1e-12);
        for cell in g.data().chunks(3) {
            assert!((-1.0..=1.0).contains(&cell[0]) && (-1.0..=1.0).contains(&cell[1]));
            assert!((0.0..=1.0).contains(&cell[2]));
        }
    }

    #[test]
    fn voxel_extents_must_be_integral() {
        assert_eq!(VoxelSpec::default().extents().unwrap(), [20, 304, 288]);
        let bad = VoxelSpec { size: [0.3, 0.2, 0.2], ..VoxelSpec::default() };
        assert!(bad.extents().is_err());
    }

    #[test]
    fn rotation_must_be_proper() {
        let mut p = Pose::identity();
        p.rotation[(0, 0)] = -1.0;
        assert!(Camera::new([1.0, 1.0, 0.0, 0.0], p).is_err());
        assert!(Camera::new([0.0, 1.0, 0.0, 0.0], Pose::identity()).is_err());
    }

    #[test]
    fn pose_rows_round_trip() {
        let rows = [0.0, -1.0, 0.0, 1.5, 1.0, 0.0, 0.0, -2.0, 0.0, 0.0, 1.0, 0.25];
        assert_eq!(Pose::from_rows(&rows).to_rows(), rows);
    }
}
