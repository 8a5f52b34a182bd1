//! Lifting 2D features into a position-aware frustum, the convolutional
//! field heads, and frustum-to-voxel resampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fields::FieldGrids;
use crate::geometry::{Frustum, VoxelSpec};
use crate::grid::{Grid, Real};
use crate::params::ParamSet;

/// Post-softmax scaling of the attention output along depth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionScale {
    /// Multiply by the plane count so a uniform profile reproduces `V`.
    #[default]
    #[serde(rename = "D")]
    Depth,
    #[serde(rename = "none")]
    None,
}

/// Initialization of the lifting network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiftingInit {
    /// Initial bias of the SDF output channel, in meters.
    pub sdf_bias: f64,
    /// Multiplier on the query weights' initial range.
    pub query_gain: f64,
}

impl Default for LiftingInit {
    fn default() -> Self {
        LiftingInit {
            sdf_bias: 0.5,
            query_gain: 1.0,
        }
    }
}

/// Tensor names in checkpoint order.
pub const LIFTING_TENSORS: [&str; 14] = [
    "f_q.weight",
    "f_q.bias",
    "f_k.weight",
    "f_k.bias",
    "f_v.weight",
    "f_v.bias",
    "f1.0.weight",
    "f1.0.bias",
    "f1.1.weight",
    "f1.1.bias",
    "f1.2.weight",
    "f1.2.bias",
    "f2.weight",
    "f2.bias",
];

/// Expected shape of every lifting tensor for `c` feature channels.
pub fn lifting_shapes(c: usize) -> [Vec<usize>; 14] {
    [
        vec![3, c],
        vec![c],
        vec![c, c],
        vec![c],
        vec![c, c],
        vec![c],
        vec![3, 3, 3, c, c],
        vec![c],
        vec![3, 3, 3, c, c],
        vec![c],
        vec![3, 3, 3, c, 1 + c],
        vec![1 + c],
        vec![3, 3, 3, c, 3],
        vec![3],
    ]
}

/// Seeded initial lifting parameters for `c` channels.
pub fn init_lifting_params<T: Real>(c: usize, init: &LiftingInit, rng: &mut ChaCha8Rng) -> Result<ParamSet<T>> {
    if c == 0 {
        return Err(Error::Config("feature channel count must be positive".into()));
    }
    let mut set = ParamSet::new();
    for (name, shape) in LIFTING_TENSORS.iter().zip(lifting_shapes(c)) {
        let n: usize = shape.iter().product();
        let grid = if name.ends_with(".bias") {
            let mut g = Grid::zeros(shape);
            if *name == "f1.2.bias" {
                g.data_mut()[0] = T::of(init.sdf_bias);
            }
            g
        } else {
            let (fan_in, fan_out) = if shape.len() == 2 {
                (shape[0], shape[1])
            } else {
                (27 * shape[3], 27 * shape[4])
            };
            let mut bound = if shape.len() == 2 {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            } else {
                (3.0 / fan_in as f64).sqrt()
            };
            if *name == "f_q.weight" {
                bound *= init.query_gain;
            }
            Grid::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
        };
        debug_assert_eq!(grid.len(), n);
        set.insert(*name, grid)?;
    }
    Ok(set)
}

/// Tape leaves for the lifting network.
#[derive(Clone, Copy, Debug)]
pub struct LiftingVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub f1: [(Var, Var); 3],
    pub f2: (Var, Var),
}

impl LiftingVars {
    /// Records every lifting tensor of `set` as a parameter leaf, checking
    /// shapes against `c` channels.
    pub fn bind<T: Real>(tape: &mut Tape<T>, set: &ParamSet<T>, c: usize) -> Result<Self> {
        let mut v = Vec::with_capacity(14);
        for (name, shape) in LIFTING_TENSORS.iter().zip(lifting_shapes(c)) {
            v.push(tape.param(set.expect(name, &shape)?.clone()));
        }
        Ok(LiftingVars {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            f1: [(v[6], v[7]), (v[8], v[9]), (v[10], v[11])],
            f2: (v[12], v[13]),
        })
    }

    /// Leaves in [`LIFTING_TENSORS`] order.
    pub fn leaves(&self) -> [Var; 14] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.f1[0].0, self.f1[0].1, self.f1[1].0, self.f1[1].1, self.f1[2].0, self.f1[2].1,
            self.f2.0, self.f2.1,
        ]
    }
}

/// Depth-axis attention: `F_P[h,w,d] = s · softmax_d(Q[h,w,d] · K[h,w]) · V[h,w]`
/// with `Q = f_q(F_pos)`, `K = f_k(F_image)`, `V = f_v(F_image)` and `s` the
/// configured scale.
pub fn position_aware_frustum<T: Real>(
    tape: &mut Tape<T>,
    f_image: Var,
    f_pos: Var,
    vars: &LiftingVars,
    scale: AttentionScale,
) -> Result<Var> {
    let si = tape.shape(f_image).to_vec();
    let sp = tape.shape(f_pos).to_vec();
    if si.len() != 3 || sp.len() != 4 || sp[..2] != si[..2] || sp[3] != 3 {
        return Err(Error::contract(
            "position_aware_frustum",
            format!("image features {si:?} and positions {sp:?} disagree"),
        ));
    }
    let (h, w, d) = (sp[0], sp[1], sp[2]);
    let q = tape.affine(f_pos, vars.wq, vars.bq)?;
    let c = tape.shape(q)[3];
    let k = tape.affine(f_image, vars.wk, vars.bk)?;
    let k = tape.reshape(k, &[h, w, 1, c])?;
    let v = tape.affine(f_image, vars.wv, vars.bv)?;
    let v = tape.reshape(v, &[h, w, 1, c])?;
    let qk = tape.mul(q, k)?;
    let logits = tape.sum_axis(qk, 3)?;
    let weights = tape.softmax(logits, 2)?;
    let out = tape.mul(weights, v)?;
    match scale {
        AttentionScale::Depth if d > 1 => tape.scale(out, T::of(d as f64)),
        _ => Ok(out),
    }
}

/// Output of the field heads.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub fields: FieldGrids,
    /// `[H, W, D, C]` features that remain after the SDF channel.
    pub features: Var,
}

/// `F' = f1(F_P)`, `F_sdf = F'[0]`, `F'' = F'[1..]`, `F_rgb = f2(F'')` and
/// the density of `F_sdf` at scale `beta`.
pub fn field_heads<T: Real>(tape: &mut Tape<T>, f_p: Var, vars: &LiftingVars, beta: Var) -> Result<HeadOutput> {
    let s = tape.shape(f_p).to_vec();
    if s.len() != 4 {
        return Err(Error::contract("field_heads", format!("expected [H, W, D, C], got {s:?}")));
    }
    let c = s[3];
    let mut x = f_p;
    for (i, &(w, b)) in vars.f1.iter().enumerate() {
        x = tape.conv3d(x, w, b)?;
        if i < 2 {
            x = tape.softplus(x)?;
        }
    }
    if tape.shape(x)[3] != 1 + c {
        return Err(Error::contract("field_heads", "f1 must produce 1 + C channels"));
    }
    let sdf = tape.slice_last(x, 0, 1)?;
    let features = tape.slice_last(x, 1, c)?;
    let rgb = tape.conv3d(features, vars.f2.0, vars.f2.1)?;
    let rgb = tape.sigmoid(rgb)?;
    let density = tape.laplace_density(sdf, beta)?;
    Ok(HeadOutput {
        fields: FieldGrids { sdf, rgb, density, beta },
        features,
    })
}

/// Lattice coordinates of every voxel center inside `frustum`, `None` outside.
pub fn voxel_lattice_points(voxel: &VoxelSpec, frustum: &Frustum) -> Result<Vec<Option<[f64; 3]>>> {
    Ok(crate::geometry::frustum_sample_points(voxel, frustum)?
        .into_iter()
        .map(|c| c.map(|c| c.lattice(&frustum.spec)))
        .collect())
}

/// Voxel grids resampled from a frustum.
#[derive(Clone, Copy, Debug)]
pub struct VoxelOutput {
    /// `[N, C]` features.
    pub features: Var,
    /// `[N, 1]` density.
    pub density: Var,
    /// `[N, C]` features gated by `tanh(density)`.
    pub gated: Var,
}

/// Samples `F''` and the density at `points` and gates features by
/// `tanh(V_density)`. Points outside the frustum read zero.
pub fn voxelize<T: Real>(tape: &mut Tape<T>, features: Var, density: Var, points: &[Option<[f64; 3]>]) -> Result<VoxelOutput> {
    let vf = tape.trilinear(features, points)?;
    let vd = tape.trilinear(density, points)?;
    let gate = tape.tanh(vd)?;
    let gated = tape.mul(vf, gate)?;
    Ok(VoxelOutput {
        features: vf,
        density: vd,
        gated,
    })
}

/// Fixed random-projection image featurizer: each feature cell sees the
/// block-averaged colors of its 3x3 neighborhood and its normalized
/// position, projected to `C` channels through `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct Featurizer {
    pub channels: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

const FEATURIZER_INPUTS: usize = 29;

impl Featurizer {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6665_6174_7572_6573);
        let std = 2.0 / (FEATURIZER_INPUTS as f64).sqrt();
        let weight = (0..FEATURIZER_INPUTS * channels)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bias = (0..channels).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        Featurizer { channels, weight, bias }
    }

    /// Features `[h2, w2, C]` of an `[H, W, 3]` image.
    pub fn apply<T: Real>(&self, image: &Grid<f64>, h2: usize, w2: usize) -> Result<Grid<T>> {
        let pooled = block_average(image, h2, w2)?;
        let c = self.channels;
        let norm = |k: usize, n: usize| if n == 1 { 0.0 } else { 2.0 * k as f64 / (n - 1) as f64 - 1.0 };
        let mut out = Vec::with_capacity(h2 * w2 * c);
        let mut x = [0.0; FEATURIZER_INPUTS];
        for i in 0..h2 {
            for j in 0..w2 {
                let mut n = 0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let ii = (i as i64 + di).clamp(0, h2 as i64 - 1) as usize;
                        let jj = (j as i64 + dj).clamp(0, w2 as i64 - 1) as usize;
                        for ch in 0..3 {
                            x[n] = pooled[(ii * w2 + jj) * 3 + ch] - 0.5;
                            n += 1;
                        }
                    }
                }
                x[27] = norm(j, w2);
                x[28] = norm(i, h2);
                for o in 0..c {
                    let mut a = self.bias[o];
                    for (k, &xk) in x.iter().enumerate() {
                        a += xk * self.weight[k * c + o];
                    }
                    out.push(T::of(a.tanh()));
                }
            }
        }
        Grid::new([h2, w2, c], out)
    }
}

/// Mean color of each of `h2 x w2` pixel blocks; block edges are floored.
pub fn block_average(image: &Grid<f64>, h2: usize, w2: usize) -> Result<Vec<f64>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 || s[0] < h2 || s[1] < w2 || h2 == 0 || w2 == 0 {
        return Err(Error::contract(
            "featurize",
            format!("cannot pool image {s:?} to {h2}x{w2}"),
        ));
    }
    let (h, w) = (s[0], s[1]);
    let d = image.data();
    let mut out = vec![0.0; h2 * w2 * 3];
    for i in 0..h2 {
        let (r0, r1) = (i * h / h2, (i + 1) * h / h2);
        for j in 0..w2 {
            let (c0, c1) = (j * w / w2, (j + 1) * w / w2);
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            for r in r0..r1 {
                for cc in c0..c1 {
                    for ch in 0..3 {
                        out[(i * w2 + j) * 3 + ch] += d[(r * w + cc) * 3 + ch] / n;
                    }
                }
            }
        }
    }
    Ok(out)
}
