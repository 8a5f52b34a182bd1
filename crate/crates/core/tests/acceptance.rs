//! End-to-end acceptance run, one line per criterion.
//!
//! Result lines go to the raw stderr handle so they show up without
//! `--nocapture`. Criteria that fail are reported, not asserted, unless
//! `ACCEPTANCE_STRICT=1`. `ACCEPTANCE_ONLY=A3,A8` restricts the run, and
//! `ACCEPTANCE_A5_STEPS` / `ACCEPTANCE_A8_STEPS` override the step counts.

use std::io::Write;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use frustum_fields::autodiff::Tape;
use frustum_fields::fields::{density, laplace_cdf};
use frustum_fields::fit::{self, FitConfig, FitState, Mode, SupervisionBatch};
use frustum_fields::geometry::{Camera, Frustum, FrustumSpec, Pose};
use frustum_fields::gradcheck::{self, CheckConfig};
use frustum_fields::lifting::{self, AttentionScale, LiftingInit, LiftingVars};
use frustum_fields::scene::{self, CameraSpec, SceneFile};
use frustum_fields::{checkpoint, dataset, io, losses, render, Grid, Result};

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(id: &str, title: &str, o: &Outcome, seconds: f64) {
    let tag = if o.passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{tag} {id} {title}: {} ({seconds:.1}s)", o.detail);
}

fn env_steps(var: &str, default: usize) -> usize {
    std::env::var(var).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

// ---------------------------------------------------------------------------

fn a1() -> Result<Outcome> {
    let t = Instant::now();
    let cfg = CheckConfig::default();
    let mut reports = gradcheck::check_primitives(&cfg)?;
    reports.push(gradcheck::check_pipeline(&cfg)?);
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let min_probes = reports.iter().map(|r| r.probes).min().unwrap_or(0);
    Ok(Outcome {
        passed: failed.is_empty() && min_probes >= 100 && secs < 120.0,
        detail: format!(
            "{} checks, >= {min_probes} probes each, worst rel err {worst:.2e}, failed [{}], {secs:.1}s",
            reports.len(),
            failed.join(", ")
        ),
    })
}

fn a2() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (center, radius) = (Vector3::<f64>::new(0.3, -0.2, 6.0), 1.5);
    let mut samples = 0;
    let mut ok = true;
    for &beta in &[0.1, 0.01, 0.001] {
        let bound = (-0.05f64 / beta).exp();
        let mut sdfs = Vec::new();
        while sdfs.len() < 2000 {
            let p = center + Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let d = (p - center).norm() - radius;
            if d.abs() >= 0.05 {
                sdfs.push(d);
            }
        }
        // the recorded transform must obey the same law
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Grid::from_f64([sdfs.len(), 1], &sdfs)?);
        let b = tape.constant(Grid::scalar(beta));
        let rec = tape.laplace_density(g, b)?;
        for (k, &d) in sdfs.iter().enumerate() {
            let ind = if d < 0.0 { 1.0 } else { 0.0 };
            for sigma in [density(d, beta)?, tape.value(rec).data()[k]] {
                let err = (beta * sigma - ind).abs();
                ok &= err <= bound;
            }
            samples += 1;
        }
    }
    let half = laplace_cdf(0.0, 0.3)?;
    let surface = density(0.0, 0.01)?;
    ok &= (half - 0.5).abs() <= 1e-12 && (surface - 50.0).abs() <= 1e-9;
    Ok(Outcome {
        passed: ok,
        detail: format!("{samples} samples, Psi(0) = {half}, surface density {surface} at beta 0.01"),
    })
}

/// Worst `|Z - z0|` and least opacity for an opaque wall with `planes` bins.
fn wall_quadrature(planes: usize) -> Result<(f64, f64)> {
    let z0 = 10.0;
    let spec = FrustumSpec::new(16, 24, planes, 2.0, 59.6)?;
    let cam = Camera::new([60.0, 60.0, 48.0, 32.0], Pose::identity())?;
    let fr = Frustum::new(spec, &cam, 96, 64, spec.bin_centers())?;
    let beta = 1e-3;
    let mut sigma = Vec::with_capacity(spec.cells());
    for i in 0..spec.height {
        for j in 0..spec.width {
            for p in fr.ray_points(i, j) {
                // half-space behind the wall is inside
                sigma.push(density(z0 - p.z, beta)?);
            }
        }
    }
    let mut tape = Tape::<f64>::new();
    let shape = [spec.height, spec.width, spec.planes, 1];
    let s = tape.constant(Grid::from_f64(shape, &sigma)?);
    let c = tape.constant(Grid::full([spec.height, spec.width, spec.planes, 3], 0.5));
    let dl = tape.constant(fr.deltas());
    let dz = tape.constant(fr.depth_grid());
    let out = render::composite(&mut tape, s, c, dl, dz)?;
    let err = tape.value(out.depth).data().iter().map(|z| (z - z0).abs()).fold(0.0, f64::max);
    let opacity = tape.value(out.opacity).data().iter().copied().fold(f64::INFINITY, f64::min);
    Ok((err, opacity))
}

fn a3() -> Result<Outcome> {
    let t = Instant::now();
    let (e72, o72) = wall_quadrature(72)?;
    let (e144, o144) = wall_quadrature(144)?;
    let secs = t.elapsed().as_secs_f64();
    let ratio = e72 / e144;
    // the error lands exactly on the half spacing; allow rounding only
    let half = 0.5 * (59.6 - 2.0) / 72.0;
    let passed = e72 <= half + 1e-9 && o72.min(o144) >= 1.0 - 1e-6 && (1.5..=2.5).contains(&ratio) && secs < 10.0;
    Ok(Outcome {
        passed,
        detail: format!("D=72 err {e72:.4} m, D=144 err {e144:.4} m, ratio {ratio:.3}, min opacity {:.9}", o72.min(o144)),
    })
}

fn generated_batch(name: &str) -> Result<(SceneFile, Vec<scene::Generated>, SupervisionBatch)> {
    let s = scene::fixture(name)?;
    let g = s.generate()?;
    let b = s.batch(&g)?;
    Ok((s, g, b))
}

fn depth_span(batch: &SupervisionBatch) -> f64 {
    let t = batch.source().truth.as_ref().expect("oracle views carry truth");
    let valid: Vec<f64> = (0..t.depth.len()).filter(|&k| t.valid(k)).map(|k| t.depth[k]).collect();
    let max = valid.iter().copied().fold(f64::MIN, f64::max);
    let min = valid.iter().copied().fold(f64::MAX, f64::min);
    max - min
}

fn a4() -> Result<Outcome> {
    let t = Instant::now();
    let (_, _, batch) = generated_batch("sphere_on_plane_mono")?;
    let cfg = FitConfig::default();
    let mut st = FitState::<f32>::init(&cfg, &batch)?;
    let m0 = fit::evaluate(&st, &batch, 0)?;
    let records = fit::fit(&mut st, &batch, &cfg, |_, _| Ok(()))?;
    let m = fit::evaluate(&st, &batch, 0)?;
    let secs = t.elapsed().as_secs_f64();
    let span = depth_span(&batch);
    let finite = st.params.all_finite()
        && records.iter().all(|r| r.total.is_finite())
        && [m.depth_mae, m.psnr, m.sdf_residual].iter().all(|x| x.is_finite());
    let reduction = m0.sdf_residual / m.sdf_residual;
    let depth_ok = m.depth_mae < 0.05 * span;
    let passed = depth_ok && reduction >= 10.0 && finite && secs < 900.0;
    Ok(Outcome {
        passed,
        detail: format!(
            "{} steps, depth MAE {:.3} m vs limit {:.3} m ({}), sdf residual {:.4} -> {:.4} ({reduction:.2}x, need 10x), finite {finite}, beta {:.4}",
            records.len(),
            m.depth_mae,
            0.05 * span,
            if depth_ok { "ok" } else { "too large" },
            m0.sdf_residual,
            m.sdf_residual,
            st.beta()
        ),
    })
}

fn a5() -> Result<Outcome> {
    let steps = env_steps("ACCEPTANCE_A5_STEPS", 300);
    let (_, _, batch) = generated_batch("sphere_on_plane_stereo")?;
    let modes = [Mode::MonoRgb, Mode::StereoRgb, Mode::MonoRgbDepth];
    let mut mean = [0.0; 3];
    for seed in 0..3 {
        for (k, &mode) in modes.iter().enumerate() {
            let cfg = FitConfig {
                steps,
                seed,
                mode,
                ..FitConfig::default()
            };
            let mut st = FitState::<f32>::init(&cfg, &batch)?;
            fit::fit(&mut st, &batch, &cfg, |_, _| Ok(()))?;
            mean[k] += fit::evaluate(&st, &batch, 0)?.depth_mae / 3.0;
        }
    }
    let [mono, stereo, depth] = mean;
    let passed = mono >= 1.2 * stereo && mono >= 1.2 * depth;
    Ok(Outcome {
        passed,
        detail: format!(
            "{steps} steps x 3 seeds, mean depth MAE mono-rgb {mono:.3}, stereo-rgb {stereo:.3} ({:+.0}%), mono-rgb+depth {depth:.3} ({:+.0}%)",
            100.0 * (mono / stereo - 1.0),
            100.0 * (mono / depth - 1.0)
        ),
    })
}

// ---------------------------------------------------------------------------
// A6: straightforward loops against the library.

fn rand_grid(rng: &mut ChaCha8Rng, shape: &[usize]) -> Grid<f64> {
    Grid::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn attention_oracle(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w, d, c) = (3, 4, 5, 4);
    let mut p = lifting::init_lifting_params::<f64>(c, &LiftingInit::default(), rng)?;
    for name in lifting::LIFTING_TENSORS {
        let shape = p.get(name)?.shape().to_vec();
        *p.get_mut(name)? = rand_grid(rng, &shape);
    }
    let img = rand_grid(rng, &[h, w, c]);
    let pos = rand_grid(rng, &[h, w, d, 3]);
    let mut tape = Tape::<f64>::new();
    let vars = LiftingVars::bind(&mut tape, &p, c)?;
    let fi = tape.constant(img.clone());
    let fp = tape.constant(pos.clone());
    let out = lifting::position_aware_frustum(&mut tape, fi, fp, &vars, AttentionScale::Depth)?;
    let got = tape.value(out).data().to_vec();

    let (wq, bq) = (p.get("f_q.weight")?.data(), p.get("f_q.bias")?.data());
    let (wk, bk) = (p.get("f_k.weight")?.data(), p.get("f_k.bias")?.data());
    let (wv, bv) = (p.get("f_v.weight")?.data(), p.get("f_v.bias")?.data());
    let affine = |x: &[f64], wt: &[f64], b: &[f64], n_in: usize| -> Vec<f64> {
        (0..c).map(|o| b[o] + (0..n_in).map(|i| x[i] * wt[i * c + o]).sum::<f64>()).collect()
    };
    let mut worst: f64 = 0.0;
    for i in 0..h {
        for j in 0..w {
            let pix = &img.data()[(i * w + j) * c..(i * w + j + 1) * c];
            let k = affine(pix, wk, bk, c);
            let v = affine(pix, wv, bv, c);
            let logits: Vec<f64> = (0..d)
                .map(|z| {
                    let at = ((i * w + j) * d + z) * 3;
                    let q = affine(&pos.data()[at..at + 3], wq, bq, 3);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum()
                })
                .collect();
            let mx = logits.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let total: f64 = e.iter().sum();
            for z in 0..d {
                for ch in 0..c {
                    let want = d as f64 * e[z] / total * v[ch];
                    let at = ((i * w + j) * d + z) * c + ch;
                    worst = worst.max((got[at] - want).abs());
                }
            }
        }
    }
    Ok(worst)
}

fn trilinear_oracle(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = [4, 5, 6];
    let ch = 2;
    let g = rand_grid(rng, &[dims[0], dims[1], dims[2], ch]);
    let pts: Vec<Option<[f64; 3]>> = (0..200)
        .map(|k| {
            if k % 17 == 0 {
                return None;
            }
            // a few points fall outside and must read as zero
            Some([rng.random_range(-0.5..4.0), rng.random_range(-0.5..5.0), rng.random_range(-0.5..6.0)])
        })
        .collect();
    let mut tape = Tape::<f64>::new();
    let gv = tape.constant(g.clone());
    let s = tape.trilinear(gv, &pts)?;
    let got = tape.value(s).data().to_vec();
    let mut worst: f64 = 0.0;
    for (n, p) in pts.iter().enumerate() {
        for c in 0..ch {
            let want = match p {
                Some(p) if (0..3).all(|a| p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64) => {
                    let mut acc = 0.0;
                    for x in 0..dims[0] {
                        for y in 0..dims[1] {
                            for z in 0..dims[2] {
                                let hat = |q: f64, i: usize| (1.0 - (q - i as f64).abs()).max(0.0);
                                let wt = hat(p[0], x) * hat(p[1], y) * hat(p[2], z);
                                acc += wt * g.data()[((x * dims[1] + y) * dims[2] + z) * ch + c];
                            }
                        }
                    }
                    acc
                }
                _ => 0.0,
            };
            worst = worst.max((got[n * ch + c] - want).abs());
        }
    }
    Ok(worst)
}

fn depth_loss_oracle(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = 300;
    let pred = rand_grid(rng, &[n, 1]);
    let target: Vec<f64> = (0..n).map(|k| if k % 5 == 0 { f64::NAN } else { rng.random_range(-1.0..1.0) }).collect();
    let mask: Vec<bool> = (0..n).map(|k| k % 5 != 0 && rng.random_bool(0.6)).collect();
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(pred.clone());
    let l = losses::depth_loss(&mut tape, p, &target, &mask)?;
    let (mut s, mut m) = (0.0, 0);
    for k in 0..n {
        if mask[k] {
            s += (pred.data()[k] - target[k]).abs();
            m += 1;
        }
    }
    Ok((tape.value(l).item() - s / m as f64).abs())
}

fn composite_oracle(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w, d) = (3, 4, 20);
    let sigma = Grid::from_fn([h, w, d, 1], |_| rng.random_range(0.0..3.0));
    let delta = Grid::from_fn([h, w, d, 1], |_| rng.random_range(0.05..0.5));
    let depth = Grid::from_fn([h, w, d, 1], |k| 2.0 + (k % d) as f64 * 0.3);
    let color = rand_grid(rng, &[h, w, d, 3]).map(|x| 0.5 * (x + 1.0));
    let mut tape = Tape::<f64>::new();
    let vs = [sigma.clone(), color.clone(), delta.clone(), depth.clone()].map(|g| tape.constant(g));
    let out = render::composite(&mut tape, vs[0], vs[1], vs[2], vs[3])?;
    let (rgb, z, o) = (tape.value(out.rgb), tape.value(out.depth), tape.value(out.opacity));
    let mut worst: f64 = 0.0;
    for r in 0..h * w {
        // transmittance as a product of per-sample survivals
        let (mut wz, mut wo, mut wc) = (0.0, 0.0, [0.0; 3]);
        for i in 0..d {
            let k = r * d + i;
            let mut t = 1.0;
            for j in 0..i {
                t *= (-sigma.data()[r * d + j] * delta.data()[r * d + j]).exp();
            }
            let wt = t * (1.0 - (-sigma.data()[k] * delta.data()[k]).exp());
            wz += wt * depth.data()[k];
            wo += wt;
            for c in 0..3 {
                wc[c] += wt * color.data()[k * 3 + c];
            }
        }
        worst = worst.max((z.data()[r] - wz).abs()).max((o.data()[r] - wo).abs());
        for c in 0..3 {
            worst = worst.max((rgb.data()[r * 3 + c] - wc[c]).abs());
        }
    }
    Ok(worst)
}

fn a6() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = [0.0f64; 4];
    for _ in 0..5 {
        worst[0] = worst[0].max(attention_oracle(&mut rng)?);
        worst[1] = worst[1].max(trilinear_oracle(&mut rng)?);
        worst[2] = worst[2].max(depth_loss_oracle(&mut rng)?);
        worst[3] = worst[3].max(composite_oracle(&mut rng)?);
    }
    Ok(Outcome {
        passed: worst.iter().all(|&e| e <= 1e-12),
        detail: format!(
            "max abs diff attention {:.1e}, trilinear {:.1e}, depth loss {:.1e}, compositing {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    })
}

// ---------------------------------------------------------------------------

fn small_fit() -> Result<(SupervisionBatch, FitConfig)> {
    let (_, _, batch) = generated_batch("sphere_on_plane_stereo")?;
    let cfg = FitConfig {
        steps: 12,
        channels: 4,
        frustum: Some(FrustumSpec::new(8, 12, 16, 2.0, 59.6)?),
        ..FitConfig::default()
    };
    Ok((batch, cfg))
}

fn csv<T: frustum_fields::Real>(records: &[fit::StepRecord], st: &FitState<T>, batch: &SupervisionBatch) -> Result<String> {
    let mut s = String::from(fit::StepRecord::CSV_HEADER);
    for r in records {
        s += "\n";
        s += &r.csv_row();
    }
    s += "\n";
    s += &fit::evaluate(st, batch, 0)?.csv_row();
    Ok(s)
}

fn a7() -> Result<Outcome> {
    let (batch, cfg) = small_fit()?;
    let run = || -> Result<(String, Vec<u8>)> {
        let mut st = FitState::<f32>::init(&cfg, &batch)?;
        let r = fit::fit(&mut st, &batch, &cfg, |_, _| Ok(()))?;
        Ok((csv(&r, &st, &batch)?, checkpoint::encode(&st)?))
    };
    let (csv_a, ck_a) = run()?;
    let (csv_b, _) = run()?;
    let same_runs = csv_a == csv_b;

    // stop halfway, persist, restore into a fresh state and finish
    let half = FitConfig { steps: cfg.steps / 2, ..cfg.clone() };
    let mut st = FitState::<f32>::init(&half, &batch)?;
    let mut records = fit::fit(&mut st, &batch, &half, |_, _| Ok(()))?;
    let bytes = checkpoint::encode(&st)?;
    let mut resumed = FitState::<f32>::init(&cfg, &batch)?;
    checkpoint::restore(&mut resumed, &bytes)?;
    records.extend(fit::fit(&mut resumed, &batch, &cfg, |_, _| Ok(()))?);
    let resume_exact = csv(&records, &resumed, &batch)? == csv_a && checkpoint::encode(&resumed)? == ck_a;

    let dir = tempfile::tempdir().map_err(|e| frustum_fields::Error::io("tempdir", e))?;
    let (scene, generated, _) = generated_batch("two_boxes_stereo")?;
    dataset::write_generated(dir.path(), &scene, &generated)?;
    let mut files_ok = dataset::read_scene(dir.path())? == scene;
    let img = &generated[1].image;
    let pfm = io::read_pfm(&dataset::raster_path(dir.path(), &generated[1].name, "depth", "pfm"))?;
    files_ok &= pfm.data.iter().zip(&img.depth).all(|(a, b)| a.to_bits() == (*b as f32).to_bits());
    let (w, h, png) = io::read_png(&dataset::raster_path(dir.path(), &generated[1].name, "rgb", "png"))?;
    files_ok &= (w, h) == (img.width, img.height) && png.iter().zip(&img.rgb).all(|(&a, &b)| a == io::quantize(b));
    let sparse = io::read_pfm(&dataset::raster_path(dir.path(), &generated[0].name, "sparse_depth", "pfm"))?;
    files_ok &= sparse.data.iter().zip(&generated[0].image.sparse_mask).all(|(d, &m)| d.is_nan() != m);
    let cam = CameraSpec::from_camera("c", &generated[0].camera, 96, 64);
    files_ok &= serde_json::from_str::<CameraSpec>(&serde_json::to_string(&cam).unwrap()).unwrap() == cam;
    files_ok &= FitConfig::parse(&serde_json::to_string(&cfg).unwrap())? == cfg;

    Ok(Outcome {
        passed: same_runs && resume_exact && files_ok,
        detail: format!("identical reruns {same_runs}, bit-exact resume {resume_exact}, file round trips {files_ok}"),
    })
}

fn a8() -> Result<Outcome> {
    let steps = env_steps("ACCEPTANCE_A8_STEPS", 1000);
    let dir = tempfile::tempdir().map_err(|e| frustum_fields::Error::io("tempdir", e))?;
    let (scene, generated, truth) = generated_batch("wall_stereo")?;
    let full = dir.path().join("full");
    let bare = dir.path().join("bare");
    dataset::write_generated(&full, &scene, &generated)?;
    std::fs::create_dir(&bare).map_err(|e| frustum_fields::Error::io(&bare, e))?;
    let mut keep = vec![dataset::SCENE_FILE.to_string()];
    keep.extend(generated.iter().map(|g| format!("{}_rgb.pfm", g.name)));
    for f in &keep {
        std::fs::copy(full.join(f), bare.join(f)).map_err(|e| frustum_fields::Error::io(full.join(f), e))?;
    }
    let (_, batch) = dataset::load_batch(&bare, Mode::StereoRgb)?;
    let cfg = FitConfig {
        steps,
        mode: Mode::StereoRgb,
        ..FitConfig::default()
    };
    let mut st = FitState::<f32>::init(&cfg, &batch)?;
    fit::fit(&mut st, &batch, &cfg, |_, _| Ok(()))?;
    // scored on right pixels whose surface lies inside the left frustum; the
    // rest of the right image is never observed by the source camera
    let m = fit::evaluate(&st, &truth, 1)?;
    Ok(Outcome {
        passed: m.psnr_overlap >= 25.0,
        detail: format!(
            "{steps} steps, right-view PSNR {:.2} dB on the overlap (need 25), {:.2} dB full image",
            m.psnr_overlap, m.psnr
        ),
    })
}

#[test]
fn acceptance() {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_uppercase()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [(&str, &str, fn() -> Result<Outcome>); 8] = [
        ("A1", "gradient integrity", a1),
        ("A2", "density-limit law", a2),
        ("A3", "quadrature accuracy", a3),
        ("A4", "scene fitting", a4),
        ("A5", "supervision ordering", a5),
        ("A6", "oracle equivalence", a6),
        ("A7", "determinism and persistence", a7),
        ("A8", "cross-view consistency", a8),
    ];
    let mut failed = Vec::new();
    for (id, title, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let t = Instant::now();
        let o = f().unwrap_or_else(|e| Outcome {
            passed: false,
            detail: format!("error: {e}"),
        });
        report(id, title, &o, t.elapsed().as_secs_f64());
        if !o.passed {
            failed.push(id);
        }
    }
    if strict {
        assert!(failed.is_empty(), "failed criteria: {failed:?}");
    }
}
