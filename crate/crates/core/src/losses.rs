//! Supervision terms: photometric (smooth-L1 + SSIM), sparse depth L1 and
//! the surface SDF penalty, combined with fixed weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub rgb: f64,
    #[serde(default = "one")]
    pub depth: f64,
    #[serde(default = "one")]
    pub sdf: f64,
    #[serde(default = "one")]
    pub smooth_l1: f64,
    #[serde(default = "one")]
    pub ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rgb: 1.0,
            depth: 1.0,
            sdf: 1.0,
            smooth_l1: 1.0,
            ssim: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rgb, self.depth, self.sdf, self.smooth_l1, self.ssim];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and nonnegative, got {self:?}")))
        }
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant(Grid::scalar(T::zero()))
}

fn check_same(tape: &Tape<impl Real>, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::contract(
            op,
            format!("shapes {:?} and {:?} differ", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

/// Mean SSIM of two `[H, W, C]` images over a Gaussian window.
pub fn ssim<T: Real>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    check_same(tape, x, y, "ssim")?;
    if tape.shape(x).len() != 3 {
        return Err(Error::contract("ssim", "expected [H, W, C] images"));
    }
    let k: Vec<T> = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(T::of).collect();
    let mx = tape.blur2d(x, &k)?;
    let my = tape.blur2d(y, &k)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let bxx = tape.blur2d(xx, &k)?;
    let byy = tape.blur2d(yy, &k)?;
    let bxy = tape.blur2d(xy, &k)?;
    let mxx = tape.mul(mx, mx)?;
    let myy = tape.mul(my, my)?;
    let mxy = tape.mul(mx, my)?;
    let vx = tape.sub(bxx, mxx)?;
    let vy = tape.sub(byy, myy)?;
    let cxy = tape.sub(bxy, mxy)?;

    let a = tape.scale(mxy, T::of(2.0))?;
    let a = tape.add_scalar(a, T::of(SSIM_C1))?;
    let b = tape.scale(cxy, T::of(2.0))?;
    let b = tape.add_scalar(b, T::of(SSIM_C2))?;
    let num = tape.mul(a, b)?;
    let c = tape.add(mxx, myy)?;
    let c = tape.add_scalar(c, T::of(SSIM_C1))?;
    let d = tape.add(vx, vy)?;
    let d = tape.add_scalar(d, T::of(SSIM_C2))?;
    let den = tape.mul(c, d)?;
    let map = tape.div(num, den)?;
    tape.mean_all(map)
}

/// `smooth_l1 · mean smoothL1(pred - target) + ssim · (1 - SSIM) / 2`.
pub fn rgb_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, weights: &LossWeights) -> Result<Var> {
    check_same(tape, pred, target, "rgb_loss")?;
    let mut total = zero(tape);
    if weights.smooth_l1 > 0.0 {
        let d = tape.sub(pred, target)?;
        let l = tape.smooth_l1(d)?;
        let m = tape.mean_all(l)?;
        let m = tape.scale(m, T::of(weights.smooth_l1))?;
        total = tape.add(total, m)?;
    }
    if weights.ssim > 0.0 {
        let s = ssim(tape, pred, target)?;
        let s = tape.neg(s)?;
        let s = tape.add_scalar(s, T::one())?;
        let s = tape.scale(s, T::of(0.5 * weights.ssim))?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Mean absolute depth error over the pixels selected by `mask`; zero when
/// the mask is empty. `target` entries outside the mask are ignored.
pub fn depth_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
    let n = tape.value(pred).len();
    if target.len() != n || mask.len() != n {
        return Err(Error::contract(
            "depth_loss",
            format!("{n} predictions, {} targets, {} mask entries", target.len(), mask.len()),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(zero(tape));
    }
    let shape = tape.shape(pred).to_vec();
    let t = Grid::from_fn(shape.clone(), |i| if mask[i] { T::of(target[i]) } else { T::zero() });
    let m = Grid::from_fn(shape, |i| if mask[i] { T::one() } else { T::zero() });
    let t = tape.constant(t);
    let m = tape.constant(m);
    let d = tape.sub(pred, t)?;
    let d = tape.abs(d)?;
    let d = tape.mul(d, m)?;
    let s = tape.sum_all(d)?;
    tape.scale(s, T::of(1.0 / count as f64))
}

/// Mean `|F_sdf|` at surface points given as lattice coordinates; points
/// outside the lattice are dropped. Zero, with a warning, if none remain.
pub fn sdf_loss<T: Real>(tape: &mut Tape<T>, sdf: Var, points: &[Option<[f64; 3]>]) -> Result<Var> {
    let shape = tape.shape(sdf).to_vec();
    if shape.len() != 4 || shape[3] != 1 {
        return Err(Error::contract("sdf_loss", format!("expected [H, W, D, 1], got {shape:?}")));
    }
    let dims = [shape[0], shape[1], shape[2]];
    let inside: Vec<Option<[f64; 3]>> = points
        .iter()
        .filter(|p| p.is_some_and(|p| crate::autodiff::trilinear_corners::<f64>(dims, p).is_some()))
        .copied()
        .collect();
    if inside.is_empty() {
        log::warn!("no surface points fall inside the frustum; sdf loss is zero");
        return Ok(zero(tape));
    }
    let s = tape.trilinear(sdf, &inside)?;
    let s = tape.abs(s)?;
    tape.mean_all(s)
}

/// Optional loss parts; absent parts contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub rgb: Option<Var>,
    pub depth: Option<Var>,
    pub sdf: Option<Var>,
}

/// `rgb·L_rgb + depth·L_depth + sdf·L_sdf`, skipping parts with zero weight.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, parts: &LossParts, weights: &LossWeights) -> Result<Var> {
    let mut total = zero(tape);
    for (part, w) in [(parts.rgb, weights.rgb), (parts.depth, weights.depth), (parts.sdf, weights.sdf)] {
        if let Some(p) = part {
            if w > 0.0 {
                let s = tape.scale(p, T::of(w))?;
                total = tape.add(total, s)?;
            }
        }
    }
    Ok(total)
}

/// Equal-weight mean of per-view losses.
pub fn mean_of<T: Real>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Ok(zero(tape));
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    tape.scale(acc, T::of(1.0 / parts.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid<f64> {
        Grid::from_fn([h, w, 3], |_| rng.random())
    }

    #[test]
    fn perfect_reconstruction_is_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::<f64>::new();
        let a = t.constant(image(&mut rng, 8, 8));
        let l = rgb_loss(&mut t, a, a, &LossWeights::default()).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn unit_offset_smooth_l1() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Grid::full([4, 4, 3], 0.0));
        let b = t.constant(Grid::full([4, 4, 3], 1.0));
        let w = LossWeights { ssim: 0.0, ..LossWeights::default() };
        let l = rgb_loss(&mut t, a, b, &w).unwrap();
        assert_eq!(t.value(l).item(), 0.5);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::<f64>::new();
        let a = t.constant(image(&mut rng, 9, 12));
        let b = t.constant(image(&mut rng, 9, 12));
        let ab = ssim(&mut t, a, b).unwrap();
        let ba = ssim(&mut t, b, a).unwrap();
        let aa = ssim(&mut t, a, a).unwrap();
        assert!((t.value(ab).item() - t.value(ba).item()).abs() < 1e-10);
        assert!(t.value(ab).item() < 1.0);
        assert_eq!(t.value(aa).item(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Grid::zeros([4, 4, 3]));
        let b = t.constant(Grid::zeros([4, 5, 3]));
        assert!(rgb_loss(&mut t, a, b, &LossWeights::default()).is_err());
    }

    #[test]
    fn gaussian_taps_sum_to_one() {
        let k = gaussian_kernel(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
        assert!(k[5] > k[4]);
    }

    #[test]
    fn depth_loss_cases() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Grid::from_f64([2, 2, 1], &[5.0, 6.0, 7.0, 8.0]).unwrap());
        let exact = depth_loss(&mut t, z, &[5.0, 0.0, 7.0, 0.0], &[true, false, true, false]).unwrap();
        assert_eq!(t.value(exact).item(), 0.0);
        let one = depth_loss(&mut t, z, &[0.0, 6.8, 0.0, 0.0], &[false, true, false, false]).unwrap();
        assert!((t.value(one).item() - 0.8).abs() < 1e-12);
        let none = depth_loss(&mut t, z, &[0.0; 4], &[false; 4]).unwrap();
        assert_eq!(t.value(none).item(), 0.0);
        assert!(depth_loss(&mut t, z, &[0.0; 3], &[false; 3]).is_err());
    }

    #[test]
    fn sdf_loss_cases() {
        let mut t = Tape::<f64>::new();
        let g = t.constant(Grid::full([2, 3, 4, 1], 0.3));
        let pts = vec![Some([0.5, 1.0, 2.5]), Some([9.0, 0.0, 0.0]), None, Some([1.0, 2.0, 3.0])];
        let l = sdf_loss(&mut t, g, &pts).unwrap();
        assert!((t.value(l).item() - 0.3).abs() < 1e-15);
        let z = t.constant(Grid::zeros([2, 3, 4, 1]));
        let l = sdf_loss(&mut t, z, &pts).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let l = sdf_loss(&mut t, g, &[None, Some([-1.0, 0.0, 0.0])]).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn total_loss_weighting() {
        let mut t = Tape::<f64>::new();
        let parts = LossParts {
            rgb: Some(t.constant(Grid::scalar(0.2))),
            depth: Some(t.constant(Grid::scalar(0.3))),
            sdf: Some(t.constant(Grid::scalar(0.1))),
        };
        let l = total_loss(&mut t, &parts, &LossWeights::default()).unwrap();
        assert!((t.value(l).item() - 0.6).abs() < 1e-15);
        let w = LossWeights { rgb: 0.0, depth: 0.0, sdf: 0.0, ..LossWeights::default() };
        let l = total_loss(&mut t, &parts, &w).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn two_view_mean() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Grid::scalar(0.25));
        let b = t.constant(Grid::scalar(0.75));
        let m = mean_of(&mut t, &[a, b]).unwrap();
        assert_eq!(t.value(m).item(), 0.5);
    }
}
