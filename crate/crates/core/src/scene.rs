//! Scene files: analytic primitives, camera rigs and grid layouts, plus
//! ground-truth generation through the oracle renderer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{AnalyticSdf, Primitive};
use crate::fit::{Mode, SupervisionBatch, View};
use crate::geometry::{Camera, FrustumSpec, Pose, VoxelSpec};
use crate::render::{oracle_render, OracleImage, OracleSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub name: String,
    /// `[fx, fy, cx, cy]` in pixels.
    pub intrinsics: [f64; 4],
    /// Row-major 3x4 camera-to-world matrix, meters.
    pub pose: [f64; 12],
    /// `[width, height]` in pixels.
    pub resolution: [usize; 2],
}

impl CameraSpec {
    pub fn camera(&self) -> Result<Camera> {
        Camera::new(self.intrinsics, Pose::from_rows(&self.pose))
    }

    pub fn from_camera(name: impl Into<String>, cam: &Camera, width: usize, height: usize) -> Self {
        CameraSpec {
            name: name.into(),
            intrinsics: cam.intrinsics(),
            pose: cam.pose.to_rows(),
            resolution: [width, height],
        }
    }

    pub fn width(&self) -> usize {
        self.resolution[0]
    }

    pub fn height(&self) -> usize {
        self.resolution[1]
    }
}

fn default_frustum() -> FrustumSpec {
    FrustumSpec {
        height: 16,
        width: 24,
        planes: 72,
        near: 2.0,
        far: 59.6,
        perturb: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    pub cameras: Vec<CameraSpec>,
    #[serde(default = "default_frustum")]
    pub frustum: FrustumSpec,
    #[serde(default)]
    pub voxel: VoxelSpec,
    #[serde(default)]
    pub oracle: OracleSettings,
    #[serde(default)]
    pub seed: u64,
}

/// Fixture names shipped with the crate.
pub const FIXTURES: [&str; 6] = [
    "wall_mono",
    "wall_stereo",
    "sphere_on_plane_mono",
    "sphere_on_plane_stereo",
    "two_boxes_mono",
    "two_boxes_stereo",
];

/// Source text of a shipped fixture.
pub fn fixture_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "wall_mono" => include_str!("../fixtures/wall_mono.json"),
        "wall_stereo" => include_str!("../fixtures/wall_stereo.json"),
        "sphere_on_plane_mono" => include_str!("../fixtures/sphere_on_plane_mono.json"),
        "sphere_on_plane_stereo" => include_str!("../fixtures/sphere_on_plane_stereo.json"),
        "two_boxes_mono" => include_str!("../fixtures/two_boxes_mono.json"),
        "two_boxes_stereo" => include_str!("../fixtures/two_boxes_stereo.json"),
        _ => return None,
    })
}

pub fn fixture(name: &str) -> Result<SceneFile> {
    let text = fixture_text(name).ok_or_else(|| Error::Config(format!("unknown fixture {name:?}")))?;
    SceneFile::parse(text)
}

/// Ground truth rendered for one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub name: String,
    pub camera: Camera,
    pub image: OracleImage,
}

impl SceneFile {
    /// Parses and validates; schema errors carry the JSON path.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scene: SceneFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Config("scene needs at least one camera".into()));
        }
        for (k, c) in self.cameras.iter().enumerate() {
            let ok_name = !c.name.is_empty()
                && c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-');
            if !ok_name {
                return Err(Error::Config(format!("camera {k} has an invalid name {:?}", c.name)));
            }
            if self.cameras[..k].iter().any(|o| o.name == c.name) {
                return Err(Error::Config(format!("duplicate camera name {:?}", c.name)));
            }
            c.camera()?;
            if c.width() < self.frustum.width || c.height() < self.frustum.height {
                return Err(Error::Config(format!(
                    "camera {} resolution {:?} is below the feature plane",
                    c.name, c.resolution
                )));
            }
        }
        for p in &self.primitives {
            p.validate()?;
        }
        self.frustum.validate()?;
        self.voxel.extents()?;
        self.oracle.validate()
    }

    /// Stereo modes need exactly two cameras.
    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        if mode.is_stereo() && self.cameras.len() != 2 {
            return Err(Error::Config(format!(
                "mode {mode} needs exactly two cameras, scene has {}",
                self.cameras.len()
            )));
        }
        Ok(())
    }

    pub fn sdf(&self) -> AnalyticSdf {
        AnalyticSdf::new(self.primitives.clone())
    }

    /// Oracle renders of every camera; camera `k` draws its sparse subset
    /// from stream `k` of the scene seed.
    pub fn generate(&self) -> Result<Vec<Generated>> {
        let sdf = self.sdf();
        self.cameras
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(k as u64);
                let camera = c.camera()?;
                let image = oracle_render(
                    &sdf,
                    &camera,
                    c.width(),
                    c.height(),
                    (self.frustum.near, self.frustum.far),
                    &self.oracle,
                    &mut rng,
                )?;
                Ok(Generated {
                    name: c.name.clone(),
                    camera,
                    image,
                })
            })
            .collect()
    }

    /// Supervision from in-memory ground truth.
    pub fn batch(&self, generated: &[Generated]) -> Result<SupervisionBatch> {
        let views = generated
            .iter()
            .map(|g| View::from_oracle(g.name.clone(), g.camera, &g.image))
            .collect();
        SupervisionBatch::new(self.frustum, views)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_parse_and_validate() {
        for name in FIXTURES {
            let s = fixture(name).unwrap();
            let stereo = name.ends_with("stereo");
            assert_eq!(s.cameras.len(), if stereo { 2 } else { 1 });
            assert_eq!(s.check_mode(Mode::StereoRgb).is_ok(), stereo);
        }
        assert!(fixture("nope").is_err());
    }

    #[test]
    fn stereo_baseline_is_accepted() {
        let s = fixture("wall_stereo").unwrap();
        let l = s.cameras[0].camera().unwrap();
        let r = s.cameras[1].camera().unwrap();
        assert!(((r.pose.translation - l.pose.translation).norm() - 0.54).abs() < 1e-12);
    }

    #[test]
    fn schema_errors_report_the_path() {
        let text = fixture_text("wall_mono").unwrap().replace("\"radius\"", "\"r\"").replace("\"offset\"", "\"offst\"");
        match SceneFile::parse(&text) {
            Err(Error::Schema { path, .. }) => assert!(path.starts_with("primitives[0]"), "{path}"),
            other => panic!("{other:?}"),
        }
        let text = r#"{"cameras": [{"name": "a", "intrinsics": [1, 1, 0, 0], "pose": [1,0,0,0,0,1,0,0,0,0,1,0], "resolution": [96, 64], "zoom": 2}]}"#;
        match SceneFile::parse(text) {
            Err(Error::Schema { path, message }) => {
                assert!(path.starts_with("cameras[0]"), "{path}");
                assert!(message.contains("zoom"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(SceneFile::parse(r#"{"cameras": []}"#), Err(Error::Config(_))));
    }

    #[test]
    fn wall_fixture_center_depth() {
        let s = fixture("wall_mono").unwrap();
        let g = s.generate().unwrap();
        let img = &g[0].image;
        let k = 32 * 96 + 48;
        assert!((img.depth[k] - 10.0).abs() <= 57.6 / 1024.0 + 1e-9);
        assert_eq!(img.foreground(), 96 * 64);
    }

    #[test]
    fn empty_scene_is_all_background() {
        let mut s = fixture("wall_mono").unwrap();
        s.primitives.clear();
        let g = s.generate().unwrap();
        assert_eq!(g[0].image.foreground(), 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = fixture("two_boxes_stereo").unwrap();
        // sparse depth holds NaN outside the subset, so compare bit patterns
        let bits = |g: Vec<Generated>| -> Vec<u64> {
            g.iter()
                .flat_map(|v| v.image.rgb.iter().chain(&v.image.depth).chain(&v.image.sparse_depth).map(|x| x.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(bits(s.generate().unwrap()), bits(s.generate().unwrap()));
    }
}
