use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use frustum_fields::autodiff::OpKind;
use frustum_fields::fit::{self, FitConfig, FitState, Mode, StepRecord, SupervisionBatch};
use frustum_fields::gradcheck::{self, CheckConfig};
use frustum_fields::scene::{self, CameraSpec, SceneFile};
use frustum_fields::{checkpoint, dataset, io, Error, Real};

const VERSION: &str = env!("FRUSTUM_FIELDS_VERSION");
const THREADS_VAR: &str = "FRUSTUM_FIELDS_THREADS";

#[derive(Parser)]
#[command(name = "frustum-fields", version = VERSION, about = "Fit and render frustum radiance fields on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render ground truth for every camera of a scene.
    Generate {
        /// Scene JSON file, or `fixture:<name>` for a shipped fixture.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scene seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the lifting network (or raw fields) to generated data.
    Fit {
        /// Directory written by `generate`.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_parser = parse_precision, default_value = "32")]
        precision: u32,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render a checkpoint from an arbitrary camera.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Camera JSON with name, intrinsics, pose and resolution.
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_precision, default_value = "32")]
        precision: u32,
    },
    /// Score a checkpoint against every camera of a generated scene.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_precision, default_value = "32")]
        precision: u32,
    },
    /// Finite-difference check of every primitive and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        probes: usize,
        /// `<primitive>[:factor]`, scales that primitive's derivative.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

fn parse_precision(s: &str) -> Result<u32, String> {
    match s {
        "32" => Ok(32),
        "64" => Ok(64),
        _ => Err(format!("precision must be 32 or 64, got {s}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numeric));
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = v.parse().with_context(|| format!("{THREADS_VAR}={v:?} is not a thread count"))?;
    if n == 0 {
        bail!("{THREADS_VAR} must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Generate { scene, out, seed } => generate(&scene, &out, seed),
        Command::Fit {
            scene,
            config,
            out,
            overrides,
            precision,
            resume,
        } => {
            let args = FitArgs {
                scene: &scene,
                config: config.as_deref(),
                out: &out,
                overrides: &overrides,
                resume: resume.as_deref(),
                precision,
            };
            if precision == 64 {
                run_fit::<f64>(&args)
            } else {
                run_fit::<f32>(&args)
            }
        }
        Command::Render {
            checkpoint,
            camera,
            out,
            precision,
        } => {
            if precision == 64 {
                render::<f64>(&checkpoint, &camera, &out)
            } else {
                render::<f32>(&checkpoint, &camera, &out)
            }
        }
        Command::Eval {
            scene,
            checkpoint,
            out,
            precision,
        } => {
            if precision == 64 {
                eval::<f64>(&scene, &checkpoint, &out)
            } else {
                eval::<f32>(&scene, &checkpoint, &out)
            }
        }
        Command::Gradcheck { seed, probes, corrupt } => run_gradcheck(seed, probes, corrupt.as_deref()),
    }
}

// ---------------------------------------------------------------------------
// Manifests.

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn hashed(paths: &[PathBuf]) -> anyhow::Result<Value> {
    let mut out = Vec::new();
    for p in paths {
        out.push(json!({ "path": p.display().to_string(), "sha256": sha256_file(p)? }));
    }
    Ok(Value::Array(out))
}

fn write_manifest(out: &Path, command: &str, body: Value, inputs: &[PathBuf], outputs: &[PathBuf]) -> anyhow::Result<()> {
    let mut m = json!({
        "command": command,
        "version": VERSION,
        "inputs": hashed(inputs)?,
        "outputs": hashed(outputs)?,
    });
    if let (Value::Object(m), Value::Object(b)) = (&mut m, body) {
        m.extend(b);
    }
    let p = out.join("manifest.json");
    fs::write(&p, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

// ---------------------------------------------------------------------------
// generate

fn generate(source: &str, out: &Path, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let (mut scene, inputs) = match source.strip_prefix("fixture:") {
        Some(name) => (scene::fixture(name)?, Vec::new()),
        None => {
            let p = PathBuf::from(source);
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            (SceneFile::parse(&text)?, vec![p])
        }
    };
    if let Some(s) = seed {
        scene.seed = s;
    }
    let generated = scene.generate()?;
    for g in &generated {
        if g.image.foreground() == 0 {
            log::warn!("camera {} sees no foreground", g.name);
        }
    }
    let written = dataset::write_generated(out, &scene, &generated)?;
    let body = json!({ "source": source, "seed": scene.seed, "cameras": scene.cameras.len() });
    write_manifest(out, "generate", body, &inputs, &written)?;
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// fit

struct FitArgs<'a> {
    scene: &'a Path,
    config: Option<&'a Path>,
    out: &'a Path,
    overrides: &'a Overrides,
    resume: Option<&'a Path>,
    precision: u32,
}

fn load_config(path: Option<&Path>, o: &Overrides) -> anyhow::Result<FitConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            FitConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => FitConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(m) = o.mode {
        cfg.mode = m;
    }
    if let Some(s) = o.steps {
        cfg.steps = s;
    }
    if let Some(e) = o.eval_every {
        cfg.eval_every = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Files `load_batch` read for this mode, for the manifest.
fn dataset_inputs(dir: &Path, scene: &SceneFile, batch: &SupervisionBatch) -> Vec<PathBuf> {
    let mut v = vec![dir.join(dataset::SCENE_FILE)];
    for (k, view) in batch.views.iter().enumerate() {
        let mut kinds = vec!["rgb"];
        if k == 0 && view.sparse.is_some() {
            kinds.extend(["sparse_depth", "sparse_mask"]);
        }
        if view.truth.is_some() {
            kinds.extend(["depth", "opacity"]);
        }
        for kind in kinds {
            v.push(dataset::raster_path(dir, &scene.cameras[k].name, kind, "pfm"));
        }
    }
    v
}

fn write_render(dir: &Path, name: &str, r: &fit::Rendered) -> anyhow::Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let rgb = dir.join(format!("{name}_rgb.png"));
    io::write_png(&rgb, r.width, r.height, &r.rgb)?;
    let depth = dir.join(format!("{name}_depth.pfm"));
    io::write_pfm(&depth, r.width, r.height, 1, &r.depth)?;
    let opacity = dir.join(format!("{name}_opacity.pfm"));
    io::write_pfm(&opacity, r.width, r.height, 1, &r.opacity)?;
    Ok(vec![rgb, depth, opacity])
}

fn eval_rows<T: Real>(state: &FitState<T>, batch: &SupervisionBatch) -> anyhow::Result<Vec<String>> {
    let mut rows = Vec::new();
    for (k, v) in batch.views.iter().enumerate() {
        let m = fit::evaluate(state, batch, k)?;
        rows.push(format!("{},{},{}", state.step, v.name, m.csv_row()));
    }
    Ok(rows)
}

fn eval_header() -> String {
    format!("step,view,{}", fit::Metrics::CSV_HEADER)
}

fn run_fit<T: Real>(a: &FitArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(a.config, a.overrides)?;
    let (scene, batch) = dataset::load_batch(a.scene, cfg.mode)?;
    let mut inputs = dataset_inputs(a.scene, &scene, &batch);
    if let Some(p) = a.config {
        inputs.push(p.to_path_buf());
    }
    create_dir(a.out)?;
    let mut state = FitState::<T>::init(&cfg, &batch)?;
    if let Some(ck) = a.resume {
        checkpoint::load_into(&mut state, ck)?;
        inputs.push(ck.to_path_buf());
    }

    let mut outputs = Vec::new();
    let metrics_path = a.out.join("metrics.csv");
    let eval_path = a.out.join("eval.csv");
    let mut metrics = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    writeln!(metrics, "{}", StepRecord::CSV_HEADER)?;
    let mut evals = vec![eval_header()];

    let dump = |state: &FitState<T>, outputs: &mut Vec<PathBuf>, evals: &mut Vec<String>| -> anyhow::Result<()> {
        let tag = format!("step_{:06}", state.step);
        let ck = a.out.join(format!("checkpoint_{tag}.bin"));
        checkpoint::save(state, &ck)?;
        outputs.push(ck);
        let dir = a.out.join("renders").join(&tag);
        for v in &batch.views {
            let r = fit::render_state(state, &v.camera, v.width, v.height)?;
            outputs.extend(write_render(&dir, &v.name, &r)?);
        }
        evals.extend(eval_rows(state, &batch)?);
        Ok(())
    };

    let every = cfg.eval_every;
    let result = fit::fit(&mut state, &batch, &cfg, |st, rec| {
        writeln!(metrics, "{}", rec.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        log::info!("{}", rec.csv_row());
        if every > 0 && st.step as usize % every == 0 && (st.step as usize) < cfg.steps {
            dump(st, &mut outputs, &mut evals).map_err(|e| Error::Config(format!("{e:#}")))?;
        }
        Ok(())
    });
    metrics.flush()?;
    drop(metrics);
    if let Err(e) = result {
        // keep what was written so far for inspection
        let _ = fs::write(&eval_path, evals.join("\n") + "\n");
        return Err(e.into());
    }
    dump(&state, &mut outputs, &mut evals)?;
    let final_ck = a.out.join("checkpoint.bin");
    checkpoint::save(&state, &final_ck)?;
    fs::write(&eval_path, evals.join("\n") + "\n").with_context(|| format!("writing {}", eval_path.display()))?;
    outputs.extend([metrics_path, eval_path, final_ck]);
    let body = json!({
        "config": serde_json::to_value(&cfg)?,
        "precision": a.precision,
        "steps_completed": state.step,
    });
    write_manifest(a.out, "fit", body, &inputs, &outputs)?;
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// render / eval

fn render<T: Real>(ck: &Path, camera: &Path, out: &Path) -> anyhow::Result<ExitCode> {
    let state = checkpoint::load::<T>(ck)?;
    let text = fs::read_to_string(camera).with_context(|| format!("reading {}", camera.display()))?;
    let spec: CameraSpec = {
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?
    };
    let cam = spec.camera()?;
    // an empty render for a non-overlapping camera is warned about inside
    let r = fit::render_state(&state, &cam, spec.width(), spec.height())?;
    let written = write_render(out, &spec.name, &r)?;
    let body = json!({ "camera": serde_json::to_value(&spec)? });
    write_manifest(out, "render", body, &[ck.to_path_buf(), camera.to_path_buf()], &written)?;
    Ok(ExitCode::SUCCESS)
}

fn eval<T: Real>(scene_dir: &Path, ck: &Path, out: &Path) -> anyhow::Result<ExitCode> {
    let state = checkpoint::load::<T>(ck)?;
    let scene = dataset::read_scene(scene_dir)?;
    let mut views = Vec::new();
    for k in 0..scene.cameras.len() {
        views.push(dataset::load_view(scene_dir, &scene, k, k == 0)?);
    }
    let batch = SupervisionBatch::new(scene.frustum, views)?;
    create_dir(out)?;
    let mut rows = vec![eval_header()];
    rows.extend(eval_rows(&state, &batch)?);
    let p = out.join("eval.csv");
    fs::write(&p, rows.join("\n") + "\n").with_context(|| format!("writing {}", p.display()))?;
    for r in &rows[1..] {
        println!("{r}");
    }
    let inputs = [vec![ck.to_path_buf()], dataset_inputs(scene_dir, &scene, &batch)].concat();
    write_manifest(out, "eval", json!({}), &inputs, &[p])?;
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// gradcheck

fn parse_corrupt(s: &str) -> anyhow::Result<(OpKind, f64)> {
    let (name, factor) = match s.split_once(':') {
        Some((n, f)) => (n, f.parse().with_context(|| format!("bad factor in {s:?}"))?),
        None => (s, 1.5),
    };
    let kind = OpKind::from_name(name).with_context(|| format!("unknown primitive {name:?}"))?;
    Ok((kind, factor))
}

fn run_gradcheck(seed: u64, probes: usize, corrupt: Option<&str>) -> anyhow::Result<ExitCode> {
    let cfg = CheckConfig {
        probes,
        seed,
        corrupt: corrupt.map(parse_corrupt).transpose()?,
        ..CheckConfig::default()
    };
    let reports = gradcheck::run_all(&cfg)?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", reports.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(ExitCode::from(2))
    }
}
