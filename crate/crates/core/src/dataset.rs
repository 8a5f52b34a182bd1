//! Generated data on disk: one directory per scene holding `scene.json` and
//! per-camera rasters named `<camera>_<kind>.<ext>`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fit::{DenseTruth, Mode, SparseDepth, SupervisionBatch, View};
use crate::grid::Grid;
use crate::io::{read_pfm, write_pfm, write_png, Pfm};
use crate::scene::{Generated, SceneFile};

pub const SCENE_FILE: &str = "scene.json";

pub fn raster_path(dir: &Path, camera: &str, kind: &str, ext: &str) -> PathBuf {
    dir.join(format!("{camera}_{kind}.{ext}"))
}

fn mask_values(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// Writes the scene echo and every camera's rasters; returns the paths written.
pub fn write_generated(dir: &Path, scene: &SceneFile, generated: &[Generated]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let scene_path = dir.join(SCENE_FILE);
    let text = serde_json::to_string_pretty(scene).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&scene_path, text).map_err(|e| Error::io(&scene_path, e))?;
    written.push(scene_path);
    for g in generated {
        let img = &g.image;
        let (w, h) = (img.width, img.height);
        let png = raster_path(dir, &g.name, "rgb", "png");
        write_png(&png, w, h, &img.rgb)?;
        written.push(png);
        let rasters: [(&str, usize, Vec<f64>); 6] = [
            ("rgb", 3, img.rgb.clone()),
            ("depth", 1, img.depth.clone()),
            ("opacity", 1, img.opacity.clone()),
            ("valid_mask", 1, mask_values(&img.valid)),
            ("sparse_depth", 1, img.sparse_depth.clone()),
            ("sparse_mask", 1, mask_values(&img.sparse_mask)),
        ];
        for (kind, ch, data) in rasters {
            let p = raster_path(dir, &g.name, kind, "pfm");
            write_pfm(&p, w, h, ch, &data)?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn read_scene(dir: &Path) -> Result<SceneFile> {
    let p = dir.join(SCENE_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    SceneFile::parse(&text)
}

fn read_raster(path: &Path, width: usize, height: usize, channels: usize) -> Result<Pfm> {
    let pfm = read_pfm(path)?;
    if (pfm.width, pfm.height, pfm.channels) != (width, height, channels) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "expected {width}x{height}x{channels}, found {}x{}x{}",
                pfm.width, pfm.height, pfm.channels
            ),
        });
    }
    Ok(pfm)
}

/// Loads the views `mode` trains on. Depth files are only opened when the
/// mode consumes them; dense truth is attached when present.
pub fn load_batch(dir: &Path, mode: Mode) -> Result<(SceneFile, SupervisionBatch)> {
    let scene = read_scene(dir)?;
    scene.check_mode(mode)?;
    let mut views = Vec::new();
    for (k, c) in scene.cameras.iter().take(mode.views()).enumerate() {
        views.push(load_view(dir, &scene, k, k == 0 && (mode.uses_depth() || mode.uses_sdf()))?);
        debug_assert_eq!(views[k].name, c.name);
    }
    let batch = SupervisionBatch::new(scene.frustum, views)?;
    Ok((scene, batch))
}

/// One camera's image, optionally its sparse depth, and dense truth if on disk.
pub fn load_view(dir: &Path, scene: &SceneFile, index: usize, with_sparse: bool) -> Result<View> {
    let c = scene
        .cameras
        .get(index)
        .ok_or_else(|| Error::Config(format!("scene has no camera {index}")))?;
    let (w, h) = (c.width(), c.height());
    let rgb = read_raster(&raster_path(dir, &c.name, "rgb", "pfm"), w, h, 3)?;
    let sparse = if with_sparse {
        let depth = read_raster(&raster_path(dir, &c.name, "sparse_depth", "pfm"), w, h, 1)?;
        let mask = read_raster(&raster_path(dir, &c.name, "sparse_mask", "pfm"), w, h, 1)?;
        Some(SparseDepth {
            depth: depth.to_f64(),
            mask: mask.data.iter().map(|&m| m > 0.5).collect(),
        })
    } else {
        None
    };
    let dp = raster_path(dir, &c.name, "depth", "pfm");
    let op = raster_path(dir, &c.name, "opacity", "pfm");
    let truth = if dp.exists() && op.exists() {
        Some(DenseTruth {
            depth: read_raster(&dp, w, h, 1)?.to_f64(),
            opacity: read_raster(&op, w, h, 1)?.to_f64(),
        })
    } else {
        None
    };
    Ok(View {
        name: c.name.clone(),
        camera: c.camera()?,
        width: w,
        height: h,
        rgb: Grid::new([h, w, 3], rgb.to_f64())?,
        sparse,
        truth,
    })
}
