//! Central finite-difference checks of every differentiable primitive and of
//! the full training objective, in 64-bit arithmetic.
//!
//! Each primitive case is reduced to a scalar through a fixed random
//! projection. A probe compares the analytic directional derivative with a
//! central difference, along either a single coordinate or a dense random
//! direction. The error of a probe is `|a - n| / max(|a|, |n|, floor)`.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::Result;
use crate::fit::{record_objective, FitConfig, FitState, Mode};
use crate::grid::Grid;
use crate::scene::fixture;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckConfig {
    pub probes: usize,
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Scale below which errors are measured absolutely.
    pub floor: f64,
    pub seed: u64,
    /// Scales the derivative of one primitive kind, for negative tests.
    pub corrupt: Option<(OpKind, f64)>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            probes: 100,
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-3,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub probes: usize,
    pub max_error: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<18} probes={:<4} max_rel_err={:.3e} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.probes,
            self.max_error,
            self.seconds
        )
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Grid<f64>>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Grid<f64> {
    Grid::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Grid<f64> {
    Grid::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn case(name: &'static str, inputs: Vec<Grid<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut smooth_l1_input = uniform(rng, &[4, 5], -3.0, 3.0);
    smooth_l1_input.data_mut().iter_mut().for_each(|x| {
        if (x.abs() - 1.0).abs() < 0.05 {
            *x *= 1.2;
        }
    });
    let points: Vec<Option<[f64; 3]>> = (0..24)
        .map(|k| match k % 8 {
            0 => None,
            1 => Some([-0.5, 1.0, 1.0]),
            _ => Some([rng.random_range(0.0..2.0), rng.random_range(0.0..3.0), rng.random_range(0.0..4.0)]),
        })
        .collect();
    vec![
        case("add", vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 1], -1.0, 1.0)], |t, v| t.add(v[0], v[1])),
        case("sub", vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[1, 4], -1.0, 1.0)], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 1], -1.0, 1.0)], |t, v| t.mul(v[0], v[1])),
        case("div", vec![uniform(rng, &[3, 4], -1.0, 1.0), away_from_zero(rng, &[1, 4], 0.5, 2.0)], |t, v| {
            t.div(v[0], v[1])
        }),
        case("neg", vec![uniform(rng, &[5], -1.0, 1.0)], |t, v| t.neg(v[0])),
        case("exp", vec![uniform(rng, &[6], -1.0, 1.0)], |t, v| t.exp(v[0])),
        case("tanh", vec![uniform(rng, &[6], -2.0, 2.0)], |t, v| t.tanh(v[0])),
        case("softplus", vec![uniform(rng, &[6], -3.0, 3.0)], |t, v| t.softplus(v[0])),
        case("sigmoid", vec![uniform(rng, &[6], -3.0, 3.0)], |t, v| t.sigmoid(v[0])),
        case("abs", vec![away_from_zero(rng, &[6], 0.1, 1.0)], |t, v| t.abs(v[0])),
        case("smooth_l1", vec![smooth_l1_input], |t, v| t.smooth_l1(v[0])),
        case("add_scalar", vec![uniform(rng, &[4], -1.0, 1.0)], |t, v| t.add_scalar(v[0], 0.7)),
        case("scale", vec![uniform(rng, &[4], -1.0, 1.0)], |t, v| t.scale(v[0], -1.3)),
        case("broadcast", vec![uniform(rng, &[3, 1, 2], -1.0, 1.0)], |t, v| t.broadcast_to(v[0], &[3, 4, 2])),
        case("reshape", vec![uniform(rng, &[2, 6], -1.0, 1.0)], |t, v| t.reshape(v[0], &[3, 4])),
        case("sum_axis", vec![uniform(rng, &[3, 4, 2], -1.0, 1.0)], |t, v| t.sum_axis(v[0], 1)),
        case("sum_all", vec![uniform(rng, &[3, 4], -1.0, 1.0)], |t, v| t.sum_all(v[0])),
        case("cumsum", vec![uniform(rng, &[3, 5, 2], -1.0, 1.0)], |t, v| t.cumsum(v[0], 1)),
        case("cumsum_exclusive", vec![uniform(rng, &[3, 5], -1.0, 1.0)], |t, v| t.cumsum_exclusive(v[0], 1)),
        case("softmax", vec![uniform(rng, &[2, 5, 3], -2.0, 2.0)], |t, v| t.softmax(v[0], 1)),
        case("slice_last", vec![uniform(rng, &[3, 5], -1.0, 1.0)], |t, v| t.slice_last(v[0], 1, 3)),
        case("gather", vec![uniform(rng, &[5, 3], -1.0, 1.0)], |t, v| t.gather_rows(v[0], vec![4, 0, 0, 2])),
        case("trilinear", vec![uniform(rng, &[3, 4, 5, 2], -1.0, 1.0)], move |t, v| t.trilinear(v[0], &points)),
        case(
            "conv3d",
            vec![
                uniform(rng, &[3, 4, 5, 2], -1.0, 1.0),
                uniform(rng, &[3, 3, 3, 2, 3], -0.5, 0.5),
                uniform(rng, &[3], -0.5, 0.5),
            ],
            |t, v| t.conv3d(v[0], v[1], v[2]),
        ),
        case(
            "affine",
            vec![
                uniform(rng, &[2, 4, 3], -1.0, 1.0),
                uniform(rng, &[3, 2], -1.0, 1.0),
                uniform(rng, &[2], -1.0, 1.0),
            ],
            |t, v| t.affine(v[0], v[1], v[2]),
        ),
        case(
            "laplace_density",
            vec![away_from_zero(rng, &[12], 0.01, 1.0), uniform(rng, &[1], 0.2, 0.5)],
            |t, v| t.laplace_density(v[0], v[1]),
        ),
        case("blur2d", vec![uniform(rng, &[5, 6, 2], -1.0, 1.0)], |t, v| t.blur2d(v[0], &[0.2, 0.6, 0.2])),
        case("upsample", vec![uniform(rng, &[3, 4, 2], -1.0, 1.0)], |t, v| t.upsample(v[0], 7, 9)),
    ]
}

/// Scalar objective `sum(r * y)` and the analytic gradients of every input.
fn projected(
    case: &Case,
    inputs: &[Grid<f64>],
    proj: &mut Option<Grid<f64>>,
    rng: &mut ChaCha8Rng,
    corrupt: Option<(OpKind, f64)>,
    want_grad: bool,
) -> Result<(f64, Vec<Grid<f64>>)> {
    let mut tape = Tape::<f64>::new();
    if let Some((kind, f)) = corrupt {
        tape.corrupt_derivative(kind, f);
    }
    let vars: Vec<Var> = inputs.iter().map(|g| tape.param(g.clone())).collect();
    let y = (case.build)(&mut tape, &vars)?;
    let shape = tape.shape(y).to_vec();
    let r = proj.get_or_insert_with(|| Grid::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal)));
    let rv = tape.constant(r.clone());
    let prod = tape.mul(y, rv)?;
    let loss = tape.sum_all(prod)?;
    let value = tape.value(loss).item();
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    let mut g = tape.backward(loss)?;
    let grads = vars.iter().map(|&v| g.take(v).expect("parameter")).collect();
    Ok((value, grads))
}

fn probe_direction(rng: &mut ChaCha8Rng, shapes: &[Grid<f64>], k: usize) -> Vec<Grid<f64>> {
    if k % 2 == 0 {
        let total: usize = shapes.iter().map(|g| g.len()).sum();
        let mut pick = rng.random_range(0..total);
        shapes
            .iter()
            .map(|g| {
                let mut d = Grid::zeros(g.shape().to_vec());
                if pick < g.len() {
                    d.data_mut()[pick] = 1.0;
                }
                pick = pick.wrapping_sub(g.len());
                d
            })
            .collect()
    } else {
        shapes
            .iter()
            .map(|g| Grid::from_fn(g.shape().to_vec(), |_| rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }
}

fn shifted(base: &[Grid<f64>], dir: &[Grid<f64>], h: f64) -> Vec<Grid<f64>> {
    base.iter()
        .zip(dir)
        .map(|(b, d)| {
            let data = b.data().iter().zip(d.data()).map(|(x, v)| x + h * v).collect();
            Grid::new(b.shape().to_vec(), data).expect("same shape")
        })
        .collect()
}

fn dot(a: &[Grid<f64>], b: &[Grid<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| p * q))
        .sum()
}

fn probe_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn check_case(case: &Case, cfg: &CheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let start = Instant::now();
    let mut proj = None;
    let corrupt = cfg.corrupt;
    let (_, grads) = projected(case, &case.inputs, &mut proj, rng, corrupt, true)?;
    let mut worst: f64 = 0.0;
    for k in 0..cfg.probes {
        let dir = probe_direction(rng, &case.inputs, k);
        let analytic = dot(&grads, &dir);
        let plus = projected(case, &shifted(&case.inputs, &dir, cfg.step), &mut proj, rng, None, false)?.0;
        let minus = projected(case, &shifted(&case.inputs, &dir, -cfg.step), &mut proj, rng, None, false)?.0;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        worst = worst.max(probe_error(analytic, numeric, cfg.floor));
    }
    Ok(CheckReport {
        name: case.name.into(),
        probes: cfg.probes,
        max_error: worst,
        passed: worst <= cfg.tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One report per primitive.
pub fn check_primitives(cfg: &CheckConfig) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all = cases(&mut rng);
    all.iter().map(|c| check_case(c, cfg, &mut rng)).collect()
}

/// Names of the primitive cases, in report order.
pub fn primitive_names() -> Vec<&'static str> {
    cases(&mut ChaCha8Rng::seed_from_u64(0)).iter().map(|c| c.name).collect()
}

/// The full objective (featurize, lift, heads, render, losses) on a
/// `4 x 6 x 8` frustum with four channels, probed over the parameters.
pub fn check_pipeline(cfg: &CheckConfig) -> Result<CheckReport> {
    let start = Instant::now();
    let mut scene = fixture("sphere_on_plane_stereo")?;
    scene.frustum.height = 4;
    scene.frustum.width = 6;
    scene.frustum.planes = 8;
    scene.oracle.planes = 128;
    scene.oracle.sparse_fraction = 0.2;
    let generated = scene.generate()?;
    let batch = scene.batch(&generated)?;
    let config = FitConfig {
        channels: 4,
        mode: Mode::MonoRgbDepthSdf,
        seed: cfg.seed,
        ..FitConfig::default()
    };
    let state = FitState::<f64>::init(&config, &batch)?;
    let depths = scene.frustum.bin_centers();

    let objective = |params: Option<&[Grid<f64>]>, grad: bool| -> Result<(f64, Vec<Grid<f64>>)> {
        let mut st = state.clone();
        if let Some(ps) = params {
            for (dst, src) in st.params.grids_mut().zip(ps) {
                *dst = src.clone();
            }
        }
        let mut tape = Tape::<f64>::new();
        if let (true, Some((kind, f))) = (grad, cfg.corrupt) {
            tape.corrupt_derivative(kind, f);
        }
        let obj = record_objective(&st, &mut tape, &batch, &config, depths.clone())?;
        let value = tape.value(obj.total).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(obj.total)?;
        Ok((value, obj.forward.leaves.iter().map(|&v| g.take(v).expect("parameter")).collect()))
    };

    let base: Vec<Grid<f64>> = state.params.grids().cloned().collect();
    let (_, grads) = objective(None, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for k in 0..cfg.probes {
        let dir = probe_direction(&mut rng, &base, k);
        let analytic = dot(&grads, &dir);
        let plus = objective(Some(&shifted(&base, &dir, cfg.step)), false)?.0;
        let minus = objective(Some(&shifted(&base, &dir, -cfg.step)), false)?.0;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        worst = worst.max(probe_error(analytic, numeric, cfg.floor));
    }
    Ok(CheckReport {
        name: "pipeline".into(),
        probes: cfg.probes,
        max_error: worst,
        passed: worst <= cfg.tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all(cfg: &CheckConfig) -> Result<Vec<CheckReport>> {
    let mut out = check_primitives(cfg)?;
    out.push(check_pipeline(cfg)?);
    Ok(out)
}
