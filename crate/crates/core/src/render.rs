//! Volume rendering by quadrature along frustum rays, rendering from other
//! views, upsampling, and the analytic oracle renderer.

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fields::{self, AnalyticSdf, FieldGrids};
use crate::geometry::{Camera, Frustum, FrustumSpec};
use crate::grid::{Grid, Real};

/// Recorded render of one view.
#[derive(Clone, Copy, Debug)]
pub struct RenderOutput {
    /// `[H, W, 3]`
    pub rgb: Var,
    /// `[H, W, 1]`, meters
    pub depth: Var,
    /// `[H, W, 1]`, accumulated opacity
    pub opacity: Var,
}

/// Alpha-composites samples along the depth axis.
///
/// `density` and `deltas` are `[H, W, D, 1]`, `color` is `[H, W, D, 3]` and
/// `depths` holds the sample depths `[H, W, D, 1]`. Transmittance at sample
/// `i` excludes sample `i` itself.
pub fn composite<T: Real>(tape: &mut Tape<T>, density: Var, color: Var, deltas: Var, depths: Var) -> Result<RenderOutput> {
    let s = tape.shape(density).to_vec();
    if s.len() != 4 || s[3] != 1 || tape.shape(deltas) != s.as_slice() || tape.shape(depths) != s.as_slice() {
        return Err(Error::contract(
            "composite",
            format!(
                "density {s:?}, deltas {:?}, depths {:?} must share an [H, W, D, 1] shape",
                tape.shape(deltas),
                tape.shape(depths)
            ),
        ));
    }
    let cs = tape.shape(color);
    if cs.len() != 4 || cs[..3] != s[..3] {
        return Err(Error::contract("composite", format!("color {cs:?} does not match density {s:?}")));
    }
    if let Some(bad) = tape.value(density).data().iter().find(|&&x| x < T::zero()) {
        return Err(Error::contract("composite", format!("negative density {bad}")));
    }
    let (h, w) = (s[0], s[1]);
    let c = cs[3];
    let tau = tape.mul(density, deltas)?;
    let before = tape.cumsum_exclusive(tau, 2)?;
    let neg_before = tape.neg(before)?;
    let trans = tape.exp(neg_before)?;
    let neg_tau = tape.neg(tau)?;
    let survive = tape.exp(neg_tau)?;
    let absorbed = tape.neg(survive)?;
    let alpha = tape.add_scalar(absorbed, T::one())?;
    let weights = tape.mul(trans, alpha)?;

    let wc = tape.mul(weights, color)?;
    let rgb = tape.sum_axis(wc, 2)?;
    let rgb = tape.reshape(rgb, &[h, w, c])?;
    let wz = tape.mul(weights, depths)?;
    let depth = tape.sum_axis(wz, 2)?;
    let depth = tape.reshape(depth, &[h, w, 1])?;
    let opacity = tape.sum_axis(weights, 2)?;
    let opacity = tape.reshape(opacity, &[h, w, 1])?;
    Ok(RenderOutput { rgb, depth, opacity })
}

/// Composite of one ray without recording: returns `(color, depth, opacity)`.
pub fn composite_ray(density: &[f64], deltas: &[f64], colors: &[[f64; 3]], depths: &[f64]) -> ([f64; 3], f64, f64) {
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    let (mut z, mut o) = (0.0, 0.0);
    for i in 0..density.len() {
        let tau = density[i] * deltas[i];
        let w = t * (1.0 - (-tau).exp());
        for k in 0..3 {
            rgb[k] += w * colors[i][k];
        }
        z += w * depths[i];
        o += w;
        t *= (-tau).exp();
    }
    (rgb, z, o)
}

/// Renders the source-frustum fields from `target`, a frustum with its own
/// camera and plane depths. Target samples are mapped into the source lattice
/// and trilinearly sampled; samples outside the source frustum are empty.
pub fn render_view<T: Real>(tape: &mut Tape<T>, fields: &FieldGrids, source: &Frustum, target: &Frustum) -> Result<RenderOutput> {
    let ts = target.spec;
    let deltas = tape.constant(target.deltas());
    let depths = tape.constant(target.depth_grid());
    if source == target {
        return composite(tape, fields.density, fields.rgb, deltas, depths);
    }
    let mut points = Vec::with_capacity(ts.cells());
    for i in 0..ts.height {
        for j in 0..ts.width {
            for p in target.ray_points(i, j) {
                points.push(source.lattice_world(&p));
            }
        }
    }
    if points.iter().all(Option::is_none) {
        log::warn!("target view does not overlap the source frustum; rendering is empty");
    }
    let sigma = tape.trilinear(fields.density, &points)?;
    let sigma = tape.reshape(sigma, &[ts.height, ts.width, ts.planes, 1])?;
    let c = tape.shape(fields.rgb)[3];
    let rgb = tape.trilinear(fields.rgb, &points)?;
    let rgb = tape.reshape(rgb, &[ts.height, ts.width, ts.planes, c])?;
    composite(tape, sigma, rgb, deltas, depths)
}

/// Bilinear upsampling of a low-resolution render to `height x width`.
pub fn upsample<T: Real>(tape: &mut Tape<T>, low: &RenderOutput, height: usize, width: usize) -> Result<RenderOutput> {
    Ok(RenderOutput {
        rgb: tape.upsample(low.rgb, height, width)?,
        depth: tape.upsample(low.depth, height, width)?,
        opacity: tape.upsample(low.opacity, height, width)?,
    })
}

fn default_oracle_planes() -> usize {
    1024
}
fn default_oracle_beta() -> f64 {
    1e-3
}
fn default_sparse_fraction() -> f64 {
    0.05
}

/// Settings of the ground-truth renderer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSettings {
    #[serde(default = "default_oracle_planes")]
    pub planes: usize,
    #[serde(default = "default_oracle_beta")]
    pub beta: f64,
    #[serde(default = "default_sparse_fraction")]
    pub sparse_fraction: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            planes: default_oracle_planes(),
            beta: default_oracle_beta(),
            sparse_fraction: default_sparse_fraction(),
        }
    }
}

impl OracleSettings {
    pub fn validate(&self) -> Result<()> {
        if self.planes < 2 || !(self.beta > 0.0) || !(0.0..=1.0).contains(&self.sparse_fraction) {
            return Err(Error::Config(format!("invalid oracle settings {self:?}")));
        }
        Ok(())
    }
}

/// Ground truth for one camera. Rasters are row-major, `H x W` (`x 3` for color).
#[derive(Clone, Debug, PartialEq)]
pub struct OracleImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    /// Foreground pixels, opacity at least one half.
    pub valid: Vec<bool>,
    /// Depth at the sparse subset, NaN elsewhere.
    pub sparse_depth: Vec<f64>,
    pub sparse_mask: Vec<bool>,
}

impl OracleImage {
    pub fn rgb_grid<T: Real>(&self) -> Grid<T> {
        Grid::from_fn([self.height, self.width, 3], |i| T::of(self.rgb[i]))
    }

    pub fn foreground(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Renders an analytic scene through the same quadrature with many planes
/// and a sharp density, then keeps a seeded subset of foreground depths.
pub fn oracle_render(
    scene: &AnalyticSdf,
    cam: &Camera,
    width: usize,
    height: usize,
    range: (f64, f64),
    settings: &OracleSettings,
    rng: &mut ChaCha8Rng,
) -> Result<OracleImage> {
    settings.validate()?;
    let spec = FrustumSpec::new(1, 1, settings.planes, range.0, range.1)?;
    let depths = spec.bin_centers();
    let beta = settings.beta;
    let rows: Vec<Vec<([f64; 3], f64, f64)>> = (0..height)
        .into_par_iter()
        .map(|i| {
            (0..width)
                .map(|j| oracle_pixel(scene, cam, j as f64 + 0.5, i as f64 + 0.5, &depths, beta))
                .collect()
        })
        .collect();
    let n = width * height;
    let mut img = OracleImage {
        width,
        height,
        rgb: Vec::with_capacity(3 * n),
        depth: Vec::with_capacity(n),
        opacity: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
        sparse_depth: vec![f64::NAN; n],
        sparse_mask: vec![false; n],
    };
    for (rgb, z, o) in rows.into_iter().flatten() {
        img.rgb.extend(rgb);
        img.depth.push(z);
        img.opacity.push(o);
        img.valid.push(o >= 0.5);
    }
    let fg: Vec<usize> = (0..n).filter(|&k| img.valid[k]).collect();
    if !fg.is_empty() && settings.sparse_fraction > 0.0 {
        let keep = ((fg.len() as f64 * settings.sparse_fraction).round() as usize).clamp(1, fg.len());
        let mut picked: Vec<usize> = sample(rng, fg.len(), keep).into_iter().map(|k| fg[k]).collect();
        picked.sort_unstable();
        for k in picked {
            img.sparse_mask[k] = true;
            img.sparse_depth[k] = img.depth[k];
        }
    }
    Ok(img)
}

fn oracle_pixel(scene: &AnalyticSdf, cam: &Camera, u: f64, v: f64, depths: &[f64], beta: f64) -> ([f64; 3], f64, f64) {
    let stretch = cam.ray_stretch(u, v);
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    let (mut z, mut o) = (0.0, 0.0);
    for (i, &zi) in depths.iter().enumerate() {
        let dz = if i + 1 < depths.len() { depths[i + 1] - zi } else { zi - depths[i - 1] };
        let p = cam.to_world(&Vector3::new((u - cam.cx) * zi / cam.fx, (v - cam.cy) * zi / cam.fy, zi));
        let Some((d, color)) = scene.closest(&p) else {
            break;
        };
        let sigma = fields::density(d, beta).unwrap_or(0.0);
        let tau = sigma * dz * stretch;
        let w = t * (1.0 - (-tau).exp());
        for k in 0..3 {
            rgb[k] += w * color[k];
        }
        z += w * zi;
        o += w;
        t *= (-tau).exp();
        if t < 1e-300 {
            break;
        }
    }
    (rgb, z, o)
}

/// World-space points on the surface behind each sparse depth sample.
pub fn surface_points(img: &OracleImage, cam: &Camera) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for i in 0..img.height {
        for j in 0..img.width {
            let k = i * img.width + j;
            if img.sparse_mask[k] {
                let z = img.sparse_depth[k];
                let p = Vector3::new(
                    (j as f64 + 0.5 - cam.cx) * z / cam.fx,
                    (i as f64 + 0.5 - cam.cy) * z / cam.fy,
                    z,
                );
                out.push(cam.to_world(&p));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Primitive;
    use crate::geometry::Pose;
    use rand::{Rng, SeedableRng};

    fn bundle(tape: &mut Tape<f64>, sigma: &[f64], delta: &[f64], z: &[f64], color: &[f64]) -> RenderOutput {
        let d = sigma.len();
        let s = tape.constant(Grid::from_f64([1, 1, d, 1], sigma).unwrap());
        let c = tape.constant(Grid::from_f64([1, 1, d, 3], color).unwrap());
        let dl = tape.constant(Grid::from_f64([1, 1, d, 1], delta).unwrap());
        let zz = tape.constant(Grid::from_f64([1, 1, d, 1], z).unwrap());
        composite(tape, s, c, dl, zz).unwrap()
    }

    #[test]
    fn empty_space_is_black() {
        let mut t = Tape::<f64>::new();
        let r = bundle(&mut t, &[0.0; 4], &[1.0; 4], &[1.0, 2.0, 3.0, 4.0], &[0.7; 12]);
        assert_eq!(t.value(r.rgb).data(), &[0.0; 3]);
        assert_eq!(t.value(r.depth).item(), 0.0);
        assert_eq!(t.value(r.opacity).item(), 0.0);
    }

    #[test]
    fn half_absorbing_sample() {
        let mut t = Tape::<f64>::new();
        let ln2 = std::f64::consts::LN_2;
        let r = bundle(&mut t, &[ln2 / 0.5], &[0.5], &[3.0], &[0.2, 0.4, 1.0]);
        let rgb = t.value(r.rgb).data();
        assert!((rgb[0] - 0.1).abs() < 1e-15 && (rgb[2] - 0.5).abs() < 1e-15);
        assert!((t.value(r.depth).item() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn opaque_second_sample() {
        let mut t = Tape::<f64>::new();
        let ln2 = std::f64::consts::LN_2;
        let r = bundle(&mut t, &[ln2, 1e6], &[1.0, 1.0], &[4.0, 6.0], &[1.0; 6]);
        assert!((t.value(r.depth).item() - 5.0).abs() < 1e-12);
        assert!((t.value(r.opacity).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negative_density_is_rejected() {
        let mut t = Tape::<f64>::new();
        let s = t.constant(Grid::from_f64([1, 1, 2, 1], &[0.1, -0.1]).unwrap());
        let c = t.constant(Grid::zeros([1, 1, 2, 3]));
        let d = t.constant(Grid::full([1, 1, 2, 1], 1.0));
        assert!(composite(&mut t, s, c, d, d).is_err());
    }

    #[test]
    fn recorded_and_scalar_composites_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 9;
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let mut z = vec![1.0];
        for k in 1..n {
            z.push(z[k - 1] + delta[k - 1]);
        }
        let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let flat: Vec<f64> = colors.iter().flatten().copied().collect();
        let mut t = Tape::<f64>::new();
        let r = bundle(&mut t, &sigma, &delta, &z, &flat);
        let (rgb, zz, o) = composite_ray(&sigma, &delta, &colors, &z);
        assert!((t.value(r.depth).item() - zz).abs() < 1e-12);
        assert!((t.value(r.opacity).item() - o).abs() < 1e-12);
        for k in 0..3 {
            assert!((t.value(r.rgb).data()[k] - rgb[k]).abs() < 1e-12);
        }
    }

    fn wall_camera() -> Camera {
        Camera::new([60.0, 60.0, 48.0, 32.0], Pose::identity()).unwrap()
    }

    fn wall(z0: f64) -> AnalyticSdf {
        AnalyticSdf::new(vec![Primitive::HalfSpace { normal: [0.0, 0.0, -1.0], offset: -z0, color: [0.8, 0.5, 0.2], pattern: None }])
    }

    #[test]
    fn oracle_wall_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = oracle_render(&wall(10.0), &wall_camera(), 24, 16, (2.0, 59.6), &OracleSettings::default(), &mut rng).unwrap();
        assert!(img.valid.iter().all(|&v| v));
        for &z in &img.depth {
            assert!((z - 10.0).abs() <= 0.06, "{z}");
        }
        let kept = img.sparse_mask.iter().filter(|&&m| m).count();
        assert_eq!(kept, (24.0 * 16.0 * 0.05f64).round() as usize);
        for k in 0..img.depth.len() {
            assert_eq!(img.sparse_mask[k], !img.sparse_depth[k].is_nan());
        }
    }

    #[test]
    fn oracle_empty_scene_is_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = oracle_render(&AnalyticSdf::default(), &wall_camera(), 8, 6, (2.0, 59.6), &OracleSettings::default(), &mut rng).unwrap();
        assert!(img.valid.iter().all(|&v| !v));
        assert!(img.sparse_mask.iter().all(|&m| !m));
        assert!(img.opacity.iter().all(|&o| o == 0.0));
    }

    #[test]
    fn oracle_sphere_center_depth() {
        // image center lies on a pixel corner; use an odd size so a pixel center is on axis
        let cam = Camera::new([60.0, 60.0, 4.5, 3.5], Pose::identity()).unwrap();
        let scene = AnalyticSdf::new(vec![Primitive::Sphere { center: [0.0, 0.0, 12.0], radius: 1.5, color: [1.0; 3], pattern: None }]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = oracle_render(&scene, &cam, 9, 7, (2.0, 59.6), &OracleSettings::default(), &mut rng).unwrap();
        let z = img.depth[3 * 9 + 4];
        assert!((z - 10.5).abs() <= 57.6 / 1024.0 + 1e-9, "{z}");
    }

    #[test]
    fn surface_points_back_project_sparse_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = Camera::new([60.0, 60.0, 48.0, 32.0], Pose::translation(0.5, 0.0, 0.0)).unwrap();
        let img = oracle_render(&wall(10.0), &cam, 24, 16, (2.0, 59.6), &OracleSettings::default(), &mut rng).unwrap();
        let pts = surface_points(&img, &cam);
        assert_eq!(pts.len(), img.sparse_mask.iter().filter(|&&m| m).count());
        assert!(pts.iter().all(|p| (p.z - 10.0).abs() < 0.06));
    }
}
