//! Multigrid building blocks: smoothing, residual restriction, prolongation
//! and their V-cycle composition.
//!
//! States are `Option<Var>` so the zero initial guess on every level is
//! exact: `A * 0` is never evaluated.

use super::LevelIdx;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernels of one level of a V-cycle, finest level first.
#[derive(Clone, Debug, Default)]
pub struct LevelKernels<T> {
    /// `(A_k, B_k)` per pre-smoothing step; on the coarsest level these are
    /// all steps of the coarse solve.
    pub pre: Vec<(T, T)>,
    /// `(A_k, B_k)` per post-smoothing step.
    pub post: Vec<(T, T)>,
    /// `(A, R)` restricting the residual to the next level.
    pub restrict: Option<(T, T)>,
    pub prolong: Option<T>,
}

/// `u_k = u_{k-1} + B_k * (f - A_k * u_{k-1})` for every `(A_k, B_k)`.
pub fn smooth(g: &mut Graph, f: Var, u: Option<Var>, kernels: &[(Var, Var)]) -> Result<Option<Var>> {
    let mut u = u;
    for &(a, b) in kernels {
        let residual = match u {
            Some(u) => {
                let au = g.conv2d(u, a, 1)?;
                g.sub(f, au)?
            }
            None => f,
        };
        let corr = g.conv2d(residual, b, 1)?;
        u = Some(match u {
            Some(u) => g.add(u, corr)?,
            None => corr,
        });
    }
    Ok(u)
}

/// `R *_2 (f - A * u)`; the coarse state starts at zero.
pub fn restrict(g: &mut Graph, f: Var, u: Option<Var>, a: Var, r: Var) -> Result<Var> {
    let (_, h, w) = g.value(f).dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("cannot restrict an odd {h}x{w} grid")));
    }
    let residual = match u {
        Some(u) => {
            let au = g.conv2d(u, a, 1)?;
            g.sub(f, au)?
        }
        None => f,
    };
    g.conv2d(residual, r, 2)
}

/// `u_fine + P *^2 u_coarse` (stride-2 transposed convolution).
pub fn prolong(g: &mut Graph, u_fine: Option<Var>, u_coarse: Option<Var>, p: Var) -> Result<Option<Var>> {
    let Some(uc) = u_coarse else {
        return Ok(u_fine);
    };
    let up = g.conv2d_transposed(uc, p, 2)?;
    match u_fine {
        Some(uf) => Ok(Some(g.add(uf, up)?)),
        None => Ok(Some(up)),
    }
}

/// One V-cycle for `A u = f` starting from `u = 0` on the finest grid.
///
/// When `trace` is given, the shape of the right-hand side on every visited
/// level is appended (down then up).
pub fn vcycle(
    g: &mut Graph,
    f: Var,
    levels: &[LevelKernels<Var>],
    mut trace: Option<&mut Vec<[usize; 3]>>,
) -> Result<Var> {
    let j = levels.len();
    if j == 0 {
        return Err(Error::contract("a V-cycle needs at least one level"));
    }
    let (c, h, w) = g.value(f).dims3()?;
    let d = 1usize << (j - 1);
    if h % d != 0 || w % d != 0 {
        return Err(Error::shape(format!(
            "grid {h}x{w} is not divisible by 2^{} for {j} levels",
            j - 1
        )));
    }
    let mut record = |g: &Graph, v: Var| {
        if let Some(t) = trace.as_deref_mut() {
            let s = g.value(v).shape();
            t.push([s[0], s[1], s[2]]);
        }
    };

    let mut rhs = Vec::with_capacity(j);
    let mut states: Vec<Option<Var>> = Vec::with_capacity(j);
    let mut f_l = f;
    for (lv, kern) in levels.iter().enumerate() {
        record(g, f_l);
        let u = smooth(g, f_l, None, &kern.pre)?;
        rhs.push(f_l);
        states.push(u);
        if lv + 1 < j {
            let (a, r) = kern
                .restrict
                .ok_or_else(|| Error::contract("missing restriction kernels"))?;
            f_l = restrict(g, f_l, u, a, r)?;
        }
    }
    let mut u_coarse = states.pop().expect("at least one level");
    for lv in (0..j - 1).rev() {
        let kern = &levels[lv];
        let p = kern
            .prolong
            .ok_or_else(|| Error::contract("missing prolongation kernel"))?;
        let u = prolong(g, states[lv], u_coarse, p)?;
        record(g, rhs[lv]);
        u_coarse = smooth(g, rhs[lv], u, &kern.post)?;
    }
    match u_coarse {
        Some(u) => Ok(u),
        None => Ok(g.constant(Tensor::zeros(&[c, h, w]))),
    }
}

pub(crate) fn vcycle_indexed(
    g: &mut Graph,
    params: &[Var],
    levels: &[LevelIdx],
    f: Var,
    trace: Option<&mut Vec<[usize; 3]>>,
) -> Result<Var> {
    let pair = |(a, b): (usize, usize)| (params[a], params[b]);
    let kernels: Vec<LevelKernels<Var>> = levels
        .iter()
        .map(|l| LevelKernels {
            pre: l.pre.iter().copied().map(pair).collect(),
            post: l.post.iter().copied().map(pair).collect(),
            restrict: l.restrict.map(pair),
            prolong: l.prolong.map(|p| params[p]),
        })
        .collect();
    vcycle(g, f, &kernels, trace)
}

fn bind_pairs(g: &mut Graph, pairs: &[(Tensor, Tensor)]) -> Vec<(Var, Var)> {
    pairs
        .iter()
        .map(|(a, b)| (g.constant(a.clone()), g.constant(b.clone())))
        .collect()
}

fn bind_levels(g: &mut Graph, levels: &[LevelKernels<Tensor>]) -> Vec<LevelKernels<Var>> {
    levels
        .iter()
        .map(|l| LevelKernels {
            pre: bind_pairs(g, &l.pre),
            post: bind_pairs(g, &l.post),
            restrict: l
                .restrict
                .as_ref()
                .map(|(a, r)| (g.constant(a.clone()), g.constant(r.clone()))),
            prolong: l.prolong.as_ref().map(|p| g.constant(p.clone())),
        })
        .collect()
}

/// Tensor form of [`smooth`].
pub fn mgno_smooth(f: &Tensor, u: &Tensor, kernels: &[(Tensor, Tensor)]) -> Result<Tensor> {
    f.expect_same_shape(u)?;
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let uv = g.constant(u.clone());
    let k = bind_pairs(&mut g, kernels);
    let out = smooth(&mut g, fv, Some(uv), &k)?.expect("state is present");
    Ok(g.value(out).clone())
}

/// Tensor form of [`restrict`]: returns `(f_coarse, u_coarse = 0)`.
pub fn mgno_restrict(f: &Tensor, u: &Tensor, a: &Tensor, r: &Tensor) -> Result<(Tensor, Tensor)> {
    f.expect_same_shape(u)?;
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let uv = g.constant(u.clone());
    let av = g.constant(a.clone());
    let rv = g.constant(r.clone());
    let fc = restrict(&mut g, fv, Some(uv), av, rv)?;
    let fc = g.value(fc).clone();
    let uc = Tensor::zeros(fc.shape());
    Ok((fc, uc))
}

/// Tensor form of [`prolong`].
pub fn mgno_prolong(u_fine: &Tensor, u_coarse: &Tensor, p: &Tensor) -> Result<Tensor> {
    let (_, h, w) = u_fine.dims3()?;
    let (_, hc, wc) = u_coarse.dims3()?;
    if h != 2 * hc || w != 2 * wc {
        return Err(Error::shape(format!(
            "coarse grid {hc}x{wc} is not half of {h}x{w}"
        )));
    }
    let mut g = Graph::new();
    let uf = g.constant(u_fine.clone());
    let uc = g.constant(u_coarse.clone());
    let pv = g.constant(p.clone());
    let out = prolong(&mut g, Some(uf), Some(uc), pv)?.expect("state is present");
    let out = g.value(out).clone();
    out.expect_same_shape(u_fine)?;
    Ok(out)
}

/// Tensor form of [`vcycle`].
pub fn mgno_vcycle(f: &Tensor, levels: &[LevelKernels<Tensor>]) -> Result<Tensor> {
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let k = bind_levels(&mut g, levels);
    let out = vcycle(&mut g, fv, &k, None)?;
    Ok(g.value(out).clone())
}
