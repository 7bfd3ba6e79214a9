//! Optimal-transport coupling between atmospheric and boundary latents.
//!
//! Each direction (boundary to atmosphere, atmosphere to boundary) extracts
//! per-site features for both spheres, builds a cosine cost matrix, solves an
//! entropic transport plan with Sinkhorn iterations, and adds the
//! transport-weighted source values to the target stream as a residual.

use std::fmt;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, S2skError};
use crate::grid::{great_circle_km, region_mask, GridSpec, RegionBox};
use crate::stats::quantile;

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Scalings are folded back into the log potentials once they leave `[1/BOUND, BOUND]`.
const ABSORB_BOUND: f64 = 1e30;
const UNDERFLOW: f64 = 1e-280;
/// Largest `n + m` for which a stalled solve is finished with dense Newton steps.
const NEWTON_MAX_DIM: usize = 512;
const NEWTON_MAX_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "b2a")]
    BoundaryToAtmosphere,
    #[serde(rename = "a2b")]
    AtmosphereToBoundary,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::BoundaryToAtmosphere => "b2a",
            Direction::AtmosphereToBoundary => "a2b",
        })
    }
}

/// `1 - cos_sim` between target sites (rows) and source sites (columns); values in `[0, 2]`.
pub fn cosine_cost(target: ArrayView2<f64>, source: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (d_t, g_t) = target.dim();
    let (d_s, g_s) = source.dim();
    if d_t != d_s {
        return Err(S2skError::shape(format!(
            "feature dims differ: target {d_t}, source {d_s}"
        )));
    }
    let norms = |m: ArrayView2<f64>| -> Vec<f64> {
        m.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect()
    };
    let nt = norms(target);
    let ns = norms(source);
    let dots = target.t().dot(&source);
    let mut cost = Array2::zeros((g_t, g_s));
    for i in 0..g_t {
        for j in 0..g_s {
            let sim = if nt[i] > 0.0 && ns[j] > 0.0 {
                (dots[[i, j]] / (nt[i] * ns[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            cost[[i, j]] = 1.0 - sim;
        }
    }
    Ok(cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: DEFAULT_EPSILON,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `[G_target, G_source]`
    pub plan: Array2<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest row or column marginal violation of `plan`.
    pub marginal_error: f64,
    pub direction: Option<Direction>,
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport between marginals `a` (rows) and `b` (columns).
///
/// The plan has the form `S_ij = exp((f_i + g_j - C_ij) / eps)`. Iterations
/// run as matrix scalings against a kernel that already carries the current
/// log potentials; whenever a scaling leaves a safe range it is absorbed into
/// the potentials with exact log-domain updates, so small `eps` does not
/// underflow. Stops when the row marginal violation (columns are exact after
/// each sweep) drops below `tol`. If `max_iter` sweeps leave a small problem
/// (`n + m <= 512`) short of `tol`, damped Newton steps on the dual finish it.
pub fn sinkhorn(cost: ArrayView2<f64>, a: &[f64], b: &[f64], config: &SinkhornConfig) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    let eps = config.epsilon;
    if a.len() != n || b.len() != m {
        return Err(S2skError::shape(format!(
            "marginals ({}, {}) do not match cost {n}x{m}",
            a.len(),
            b.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(S2skError::invalid(format!("epsilon must be positive, got {eps}")));
    }
    if a.iter().chain(b).any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(S2skError::invalid("marginals must be finite and non-negative"));
    }
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    if (sa - 1.0).abs() > 1e-9 || (sb - 1.0).abs() > 1e-9 {
        return Err(S2skError::invalid(format!(
            "marginal masses must both be 1, got {sa} and {sb}"
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(S2skError::invalid("cost matrix must be finite"));
    }

    let ln_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let ln_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let update_f = |f: &mut [f64], g: &[f64]| {
        for i in 0..n {
            f[i] = if a[i] > 0.0 {
                eps * ln_a[i] - eps * log_sum_exp((0..m).map(|j| (g[j] - cost[[i, j]]) / eps))
            } else {
                f64::NEG_INFINITY
            };
        }
    };
    let update_g = |g: &mut [f64], f: &[f64]| {
        for j in 0..m {
            g[j] = if b[j] > 0.0 {
                eps * ln_b[j] - eps * log_sum_exp((0..n).map(|i| (f[i] - cost[[i, j]]) / eps))
            } else {
                f64::NEG_INFINITY
            };
        }
    };
    let build_kernel = |f: &[f64], g: &[f64]| -> Array2<f64> {
        Array2::from_shape_fn((n, m), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / eps).exp())
    };

    update_f(&mut f, &g);
    update_g(&mut g, &f);
    let mut kernel = build_kernel(&f, &g);
    let mut u = Array1::<f64>::ones(n);
    let mut v = Array1::<f64>::ones(m);
    let mut iterations = 0;

    for it in 0..config.max_iter {
        iterations = it;
        let kv = kernel.dot(&v);
        let mut err: f64 = 0.0;
        let mut unstable = false;
        for i in 0..n {
            let row = u[i] * kv[i];
            if !row.is_finite() {
                return Err(S2skError::SinkhornNonFinite { epsilon: eps, iteration: it });
            }
            err = err.max((row - a[i]).abs());
            if a[i] > 0.0 && kv[i] < UNDERFLOW {
                unstable = true;
            }
        }
        if err < config.tol {
            break;
        }
        if unstable {
            absorb(&mut f, &mut g, &mut u, &mut v, eps);
            update_f(&mut f, &g);
            update_g(&mut g, &f);
            kernel = build_kernel(&f, &g);
            continue;
        }
        for i in 0..n {
            u[i] = if a[i] > 0.0 { a[i] / kv[i] } else { 0.0 };
        }
        let ktu = kernel.t().dot(&u);
        for j in 0..m {
            v[j] = if b[j] > 0.0 {
                if ktu[j] < UNDERFLOW {
                    unstable = true;
                    1.0
                } else {
                    b[j] / ktu[j]
                }
            } else {
                0.0
            };
        }
        if u.iter().chain(v.iter()).any(|x| x.is_nan()) {
            return Err(S2skError::SinkhornNonFinite { epsilon: eps, iteration: it });
        }
        let out_of_range = u
            .iter()
            .chain(v.iter())
            .any(|&x| x > 0.0 && !(1.0 / ABSORB_BOUND..=ABSORB_BOUND).contains(&x));
        if unstable || out_of_range {
            absorb(&mut f, &mut g, &mut u, &mut v, eps);
            update_g(&mut g, &f);
            kernel = build_kernel(&f, &g);
        }
        iterations = it + 1;
    }

    let mut plan = kernel;
    for ((i, j), p) in plan.indexed_iter_mut() {
        *p *= u[i] * v[j];
    }
    let mut marginal_error = marginal_violation(plan.view(), a, b);
    if !(marginal_error < config.tol) && n + m <= NEWTON_MAX_DIM && plan.iter().all(|p| p.is_finite()) {
        // Plain scaling can crawl when eps is small relative to the cost
        // spread; finish with Newton steps on the dual potentials.
        absorb(&mut f, &mut g, &mut u, &mut v, eps);
        let (iters, polished) = newton_polish(cost, a, b, eps, &mut f, &mut g, config.tol);
        iterations += iters;
        let err = marginal_violation(polished.view(), a, b);
        if err < marginal_error {
            plan = polished;
            marginal_error = err;
        }
    }
    if plan.iter().any(|p| !p.is_finite()) {
        return Err(S2skError::SinkhornNonFinite {
            epsilon: eps,
            iteration: iterations,
        });
    }
    Ok(TransportPlan {
        plan,
        epsilon: eps,
        iterations,
        converged: marginal_error < config.tol,
        marginal_error,
        direction: None,
    })
}

fn log_plan(cost: ArrayView2<f64>, f: &[f64], g: &[f64], eps: f64) -> Array2<f64> {
    Array2::from_shape_fn(cost.dim(), |(i, j)| {
        if f[i].is_finite() && g[j].is_finite() {
            ((f[i] + g[j] - cost[[i, j]]) / eps).exp()
        } else {
            0.0
        }
    })
}

/// Damped Newton ascent on the entropic dual over rows and columns with
/// positive mass. The last active column potential is held fixed to remove
/// the additive gauge. Returns the step count and the resulting plan.
fn newton_polish(
    cost: ArrayView2<f64>,
    a: &[f64],
    b: &[f64],
    eps: f64,
    f: &mut [f64],
    g: &mut [f64],
    tol: f64,
) -> (usize, Array2<f64>) {
    let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let mut cols: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0.0).collect();
    cols.pop();
    let (nr, nc) = (rows.len(), cols.len());
    let mut plan = log_plan(cost, f, g, eps);
    let mut err = marginal_violation(plan.view(), a, b);
    let mut steps = 0;
    while steps < NEWTON_MAX_STEPS && !(err < tol) {
        steps += 1;
        let rs = plan.sum_axis(Axis(1));
        let cs = plan.sum_axis(Axis(0));
        let mut grad = Vec::with_capacity(nr + nc);
        grad.extend(rows.iter().map(|&i| a[i] - rs[i]));
        grad.extend(cols.iter().map(|&j| b[j] - cs[j]));
        let mut h = Array2::<f64>::zeros((nr + nc, nr + nc));
        for (p, &i) in rows.iter().enumerate() {
            h[[p, p]] = rs[i] / eps;
            for (q, &j) in cols.iter().enumerate() {
                let v = plan[[i, j]] / eps;
                h[[p, nr + q]] = v;
                h[[nr + q, p]] = v;
            }
        }
        for (q, &j) in cols.iter().enumerate() {
            h[[nr + q, nr + q]] = cs[j] / eps;
        }
        let Some(delta) = crate::stats::cholesky_solve(&h, &grad) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut f2 = f.to_vec();
            let mut g2 = g.to_vec();
            for (p, &i) in rows.iter().enumerate() {
                f2[i] += t * delta[p];
            }
            for (q, &j) in cols.iter().enumerate() {
                g2[j] += t * delta[nr + q];
            }
            let trial = log_plan(cost, &f2, &g2, eps);
            let e = marginal_violation(trial.view(), a, b);
            if e < err {
                f.copy_from_slice(&f2);
                g.copy_from_slice(&g2);
                plan = trial;
                err = e;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (steps, plan)
}

fn absorb(f: &mut [f64], g: &mut [f64], u: &mut Array1<f64>, v: &mut Array1<f64>, eps: f64) {
    for (fi, ui) in f.iter_mut().zip(u.iter_mut()) {
        if *ui > 0.0 && fi.is_finite() {
            *fi += eps * ui.ln();
        }
        *ui = 1.0;
    }
    for (gj, vj) in g.iter_mut().zip(v.iter_mut()) {
        if *vj > 0.0 && gj.is_finite() {
            *gj += eps * vj.ln();
        }
        *vj = 1.0;
    }
}

/// `max(|S 1 - a|_inf, |S^T 1 - b|_inf)`
pub fn marginal_violation(plan: ArrayView2<f64>, a: &[f64], b: &[f64]) -> f64 {
    let rows = plan.sum_axis(Axis(1));
    let cols = plan.sum_axis(Axis(0));
    let r = rows.iter().zip(a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let c = cols.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    r.max(c)
}

/// `F_target + gain * G_target * (F_source S^T)`.
///
/// Each target site receives the barycentric mixture of source features under
/// its row of the plan; with uniform row marginals `1 / G_target` the factor
/// `G_target` turns row mass into mixture weights.
pub fn apply_coupling(
    target: ArrayView2<f64>,
    source: ArrayView2<f64>,
    plan: ArrayView2<f64>,
    gain: f64,
) -> Result<Array2<f64>> {
    let (d_t, g_t) = target.dim();
    let (d_s, g_s) = source.dim();
    if d_t != d_s || plan.dim() != (g_t, g_s) {
        return Err(S2skError::shape(format!(
            "target [{d_t}x{g_t}], source [{d_s}x{g_s}], plan {:?}",
            plan.dim()
        )));
    }
    if gain == 0.0 {
        return Ok(target.to_owned());
    }
    let mixed = source.dot(&plan.t());
    Ok(&target + &(mixed * (gain * g_t as f64)))
}

/// Attention weights `softmax(F_t^T F_s / sqrt(d))` per target row, scaled
/// by `1 / G_target` so each row carries the same mass as a uniform-marginal plan.
pub fn cross_attention_plan(target: ArrayView2<f64>, source: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (d_t, g_t) = target.dim();
    if d_t != source.dim().0 {
        return Err(S2skError::shape("feature dims differ"));
    }
    let scale = 1.0 / (d_t as f64).sqrt();
    let mut logits = target.t().dot(&source) * scale;
    for mut row in logits.rows_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - mx).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / (z * g_t as f64));
    }
    Ok(logits)
}

/// Which operator mixes information across spheres inside the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CouplingVariant {
    #[default]
    OptimalTransport,
    CrossAttention,
    None,
}

impl fmt::Display for CouplingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CouplingVariant::OptimalTransport => "optimal_transport",
            CouplingVariant::CrossAttention => "cross_attention",
            CouplingVariant::None => "none",
        })
    }
}

impl std::str::FromStr for CouplingVariant {
    type Err = S2skError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ot" | "optimal_transport" => Ok(CouplingVariant::OptimalTransport),
            "xattn" | "cross_attention" => Ok(CouplingVariant::CrossAttention),
            "none" => Ok(CouplingVariant::None),
            other => Err(S2skError::invalid(format!("unknown coupling variant {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Marginals {
    #[default]
    Uniform,
    /// Cosine-latitude weights of the latent rows, normalized to unit mass.
    LatitudeWeighted,
}

fn marginal(kind: &Marginals, grid: &GridSpec) -> Result<Vec<f64>> {
    let g = grid.n_cells();
    Ok(match kind {
        Marginals::Uniform => vec![1.0 / g as f64; g],
        Marginals::LatitudeWeighted => {
            let w = grid.latitude_weights()?;
            let mut cells: Vec<f64> = (0..g).map(|k| w[k / grid.n_lon]).collect();
            let total: f64 = cells.iter().sum();
            cells.iter_mut().for_each(|c| *c /= total);
            cells
        }
    })
}

/// Parameters of one coupling direction: target and source feature
/// extractors (per-site linear maps) and the value map that carries source
/// stream channels into the target's channel space.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionParams {
    /// `[d_f, target input channels]`
    pub target_extractor: Array2<f64>,
    /// `[d_f, source input channels]`
    pub source_extractor: Array2<f64>,
    /// `[target stream channels, source stream channels]`
    pub value_map: Array2<f64>,
    pub gain: f64,
}

impl DirectionParams {
    pub fn seeded(seed: u64, target_in: usize, source_in: usize, target_ch: usize, source_ch: usize, d_f: usize, gain: f64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            let s = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal) * s)
        };
        DirectionParams {
            target_extractor: draw(d_f, target_in),
            source_extractor: draw(d_f, source_in),
            value_map: draw(target_ch, source_ch),
            gain,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtbParams {
    pub b_to_a: DirectionParams,
    pub a_to_b: DirectionParams,
    pub sinkhorn: SinkhornConfig,
    pub marginals: Marginals,
    pub variant: CouplingVariant,
}

impl OtbParams {
    /// Independent seeded parameter sets for the two directions.
    ///
    /// `ctx_len` is the number of context latents stacked with each sphere's
    /// stream for feature extraction.
    pub fn seeded(seed: u64, c_a: usize, c_b: usize, ctx_len: usize, d_f: usize, gain: f64) -> Self {
        let in_a = c_a * (1 + ctx_len);
        let in_b = c_b * (1 + ctx_len);
        OtbParams {
            b_to_a: DirectionParams::seeded(crate::stats::derive_seed(seed, 1), in_a, in_b, c_a, c_b, d_f, gain),
            a_to_b: DirectionParams::seeded(crate::stats::derive_seed(seed, 2), in_b, in_a, c_b, c_a, d_f, gain),
            sinkhorn: SinkhornConfig::default(),
            marginals: Marginals::Uniform,
            variant: CouplingVariant::OptimalTransport,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OtbOutput {
    pub a_out: Array3<f64>,
    pub b_out: Array3<f64>,
    /// `[G_A, G_B]`; `None` for the uncoupled variant.
    pub plan_b_to_a: Option<TransportPlan>,
    /// `[G_B, G_A]`
    pub plan_a_to_b: Option<TransportPlan>,
}

/// `[C, h, w]` -> `[C, h * w]`
fn flatten(x: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    x.to_owned().into_shape_with_order((c, h * w)).expect("contiguous")
}

fn stack_inputs(stream: ArrayView3<f64>, context: &[ArrayView3<f64>]) -> Result<Array2<f64>> {
    let mut parts = vec![flatten(stream)];
    for c in context {
        if c.dim().1 != stream.dim().1 || c.dim().2 != stream.dim().2 || c.dim().0 != stream.dim().0 {
            return Err(S2skError::shape("context latents must match the stream shape"));
        }
        parts.push(flatten(*c));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("same site count"))
}

/// One coupling block.
///
/// `stream_a`/`stream_b` receive the residual exchange. Features for the cost
/// are extracted from each sphere's stream stacked with its context latents.
pub fn otb_block(
    stream_a: ArrayView3<f64>,
    stream_b: ArrayView3<f64>,
    context_a: &[ArrayView3<f64>],
    context_b: &[ArrayView3<f64>],
    latent_grid: &GridSpec,
    params: &OtbParams,
) -> Result<OtbOutput> {
    let (c_a, h, w) = stream_a.dim();
    let (c_b, hb, wb) = stream_b.dim();
    if (h, w) != (hb, wb) || (h, w) != (latent_grid.n_lat, latent_grid.n_lon) {
        return Err(S2skError::shape("sphere latents must share the latent grid"));
    }
    if params.variant == CouplingVariant::None {
        return Ok(OtbOutput {
            a_out: stream_a.to_owned(),
            b_out: stream_b.to_owned(),
            plan_b_to_a: None,
            plan_a_to_b: None,
        });
    }
    let in_a = stack_inputs(stream_a, context_a)?;
    let in_b = stack_inputs(stream_b, context_b)?;
    let flat_a = flatten(stream_a);
    let flat_b = flatten(stream_b);
    let marg = marginal(&params.marginals, latent_grid)?;

    let solve = |dir: &DirectionParams, tgt_in: &Array2<f64>, src_in: &Array2<f64>, which: Direction| -> Result<TransportPlan> {
        if dir.target_extractor.dim().1 != tgt_in.dim().0 || dir.source_extractor.dim().1 != src_in.dim().0 {
            return Err(S2skError::shape(format!("{which} extractor input width mismatch")));
        }
        let ft = dir.target_extractor.dot(tgt_in);
        let fs = dir.source_extractor.dot(src_in);
        let mut plan = match params.variant {
            CouplingVariant::OptimalTransport => {
                let cost = cosine_cost(ft.view(), fs.view())?;
                sinkhorn(cost.view(), &marg, &marg, &params.sinkhorn)?
            }
            CouplingVariant::CrossAttention => {
                let p = cross_attention_plan(ft.view(), fs.view())?;
                TransportPlan {
                    marginal_error: f64::NAN,
                    plan: p,
                    epsilon: f64::NAN,
                    iterations: 0,
                    converged: true,
                    direction: None,
                }
            }
            CouplingVariant::None => unreachable!(),
        };
        plan.direction = Some(which);
        Ok(plan)
    };

    let p_ba = solve(&params.b_to_a, &in_a, &in_b, Direction::BoundaryToAtmosphere)?;
    let p_ab = solve(&params.a_to_b, &in_b, &in_a, Direction::AtmosphereToBoundary)?;

    let carry = |dir: &DirectionParams, target: &Array2<f64>, source: &Array2<f64>, plan: &TransportPlan| -> Result<Array2<f64>> {
        if dir.value_map.dim() != (target.dim().0, source.dim().0) {
            return Err(S2skError::shape("value map does not match stream channels"));
        }
        let values = dir.value_map.dot(source);
        apply_coupling(target.view(), values.view(), plan.plan.view(), dir.gain)
    };
    let a_out = carry(&params.b_to_a, &flat_a, &flat_b, &p_ba)?;
    let b_out = carry(&params.a_to_b, &flat_b, &flat_a, &p_ab)?;
    Ok(OtbOutput {
        a_out: a_out.into_shape_with_order((c_a, h, w)).expect("contiguous"),
        b_out: b_out.into_shape_with_order((c_b, h, w)).expect("contiguous"),
        plan_b_to_a: Some(p_ba),
        plan_a_to_b: Some(p_ab),
    })
}

/// Influence-weighted mean great-circle distance (km) from source cells to a target region.
///
/// Rows of `plan_b_to_a` inside `region` are summed into a per-source
/// influence; cells whose mean-centered influence reaches the given
/// percentile are kept and their raw influence weights the distance to the
/// nearest region cell (zero inside the region).
pub fn wmid(
    plan_b_to_a: ArrayView2<f64>,
    target_grid: &GridSpec,
    source_grid: &GridSpec,
    region: &RegionBox,
    percentile: f64,
) -> Result<f64> {
    if plan_b_to_a.dim() != (target_grid.n_cells(), source_grid.n_cells()) {
        return Err(S2skError::shape(format!(
            "plan {:?} does not match grids {}x{}",
            plan_b_to_a.dim(),
            target_grid.n_cells(),
            source_grid.n_cells()
        )));
    }
    let tmask = region_mask(target_grid, region)?;
    let region_cells: Vec<usize> = tmask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(k, _)| k)
        .collect();
    let mut influence = vec![0.0; source_grid.n_cells()];
    for &r in &region_cells {
        for (j, inf) in influence.iter_mut().enumerate() {
            *inf += plan_b_to_a[[r, j]];
        }
    }
    let mean = influence.iter().sum::<f64>() / influence.len() as f64;
    let centered: Vec<f64> = influence.iter().map(|x| x - mean).collect();
    let threshold = quantile(&centered, percentile)?;

    let region_pts: Vec<(f64, f64)> = region_cells
        .iter()
        .map(|&k| (target_grid.lat(k / target_grid.n_lon), target_grid.lon(k % target_grid.n_lon)))
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..influence.len() {
        if centered[j] < threshold || influence[j] <= 0.0 {
            continue;
        }
        let (lat, lon) = (source_grid.lat(j / source_grid.n_lon), source_grid.lon(j % source_grid.n_lon));
        let dist = if region.contains(lat, lon) {
            0.0
        } else {
            region_pts
                .iter()
                .map(|&p| great_circle_km((lat, lon), p))
                .fold(f64::INFINITY, f64::min)
        };
        num += influence[j] * dist;
        den += influence[j];
    }
    if den <= 0.0 {
        return Err(S2skError::Undefined("all influence filtered out".into()));
    }
    Ok(num / den)
}

/// Flattened site index of `(row, col)` on `grid`.
pub fn site(grid: &GridSpec, row: usize, col: usize) -> usize {
    row * grid.n_lon + col
}

/// Columns of the joint latent belonging to each sphere: `[..c_a]` and `[c_a..]`.
pub fn split_latent(latent: ArrayView3<f64>, c_a: usize) -> (ArrayView3<f64>, ArrayView3<f64>) {
    (latent.slice_move(s![..c_a, .., ..]), latent.slice_move(s![c_a.., .., ..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    fn tight() -> SinkhornConfig {
        SinkhornConfig {
            epsilon: 0.1,
            max_iter: 100_000,
            tol: 1e-12,
        }
    }

    fn random_cost(seed: u64, n: usize, m: usize) -> Array2<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, m), || rng.gen_range(0.0..2.0))
    }

    #[test]
    fn cosine_cost_anchors() {
        let a = array![[1.0, 2.0], [0.0, -1.0]];
        let b = array![[1.0, -2.0, 0.0], [0.0, 1.0, 0.0]];
        let c = cosine_cost(a.view(), b.view()).unwrap();
        // a[:,0]=(1,0) vs b[:,0]=(1,0): identical.
        assert!(c[[0, 0]].abs() < 1e-15);
        // a[:,1]=(2,-1) vs b[:,1]=(-2,1): antiparallel.
        assert!((c[[1, 1]] - 2.0).abs() < 1e-15);
        // a[:,0]=(1,0) vs b[:,1]=(-2,1)... use orthogonal pair a[:,1]=(2,-1), (1,2) below.
        let o = cosine_cost(array![[2.0], [-1.0]].view(), array![[1.0], [2.0]].view()).unwrap();
        assert!((o[[0, 0]] - 1.0).abs() < 1e-15);
        // Zero-norm source site: similarity 0.
        assert_eq!(c[[0, 2]], 1.0);
        assert!(cosine_cost(a.view(), array![[1.0]].view()).is_err());
    }

    #[test]
    fn constant_cost_gives_product_measure() {
        let c = Array2::from_elem((4, 6), 0.7);
        let p = sinkhorn(c.view(), &uniform(4), &uniform(6), &tight()).unwrap();
        assert!(p.converged);
        for v in p.plan.iter() {
            assert!((v - 1.0 / 24.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        let c = array![[0.0, 1.0], [1.0, 0.0]];
        let cfg = SinkhornConfig { epsilon: 0.1, max_iter: 1000, tol: 1e-14 };
        let p = sinkhorn(c.view(), &[0.5, 0.5], &[0.5, 0.5], &cfg).unwrap();
        let diag = 0.5 / (1.0 + (-10.0f64).exp());
        assert!((p.plan[[0, 0]] - diag).abs() < 1e-12);
        assert!((p.plan[[1, 1]] - diag).abs() < 1e-12);
        assert!((p.plan[[0, 1]] - (0.5 - diag)).abs() < 1e-12);
        assert!((diag - 0.49998).abs() < 1e-5);
    }

    #[test]
    fn large_epsilon_approaches_product_of_marginals() {
        let c = random_cost(3, 10, 10);
        let dev = |eps: f64| {
            let cfg = SinkhornConfig { epsilon: eps, max_iter: 10_000, tol: 1e-14 };
            let p = sinkhorn(c.view(), &uniform(10), &uniform(10), &cfg).unwrap();
            p.plan.iter().map(|v| (v - 0.01).abs()).fold(0.0, f64::max)
        };
        // Deviation shrinks like 1/eps: about 1e-4 at eps=100 on costs in [0, 2].
        let d100 = dev(100.0);
        let d1e4 = dev(1e4);
        assert!(d100 < 2e-4, "{d100}");
        assert!(d1e4 < 2e-6, "{d1e4}");
        assert!(dev(1e5) < 1e-6);
        assert!((d100 / d1e4 - 100.0).abs() < 5.0);
    }

    #[test]
    fn plan_has_additive_log_structure() {
        // Optimality certificate: log S_ij + C_ij/eps = f_i + g_j.
        let c = random_cost(5, 5, 7);
        let p = sinkhorn(c.view(), &uniform(5), &uniform(7), &tight()).unwrap();
        assert!(p.converged);
        let l = p.plan.mapv(f64::ln) + &c / 0.1;
        for i in 1..5 {
            for j in 1..7 {
                let r = l[[i, j]] - l[[i, 0]] - l[[0, j]] + l[[0, 0]];
                assert!(r.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn small_epsilon_stays_finite() {
        let c = random_cost(9, 20, 20);
        let cfg = SinkhornConfig { epsilon: 5e-3, max_iter: 100_000, tol: 1e-5 };
        let p = sinkhorn(c.view(), &uniform(20), &uniform(20), &cfg).unwrap();
        assert!(p.plan.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(p.converged, "violation {}", p.marginal_error);
    }

    #[test]
    fn sinkhorn_validation() {
        let c = random_cost(1, 3, 3);
        assert!(sinkhorn(c.view(), &[0.5, 0.5, 0.5], &uniform(3), &tight()).is_err());
        assert!(sinkhorn(c.view(), &uniform(2), &uniform(3), &tight()).is_err());
        let bad = SinkhornConfig { epsilon: 0.0, ..tight() };
        assert!(sinkhorn(c.view(), &uniform(3), &uniform(3), &bad).is_err());
    }

    #[test]
    fn zero_mass_rows_get_no_mass() {
        let c = random_cost(2, 3, 3);
        let p = sinkhorn(c.view(), &[0.5, 0.0, 0.5], &uniform(3), &tight()).unwrap();
        assert!(p.plan.row(1).iter().all(|&v| v == 0.0));
        assert!(p.marginal_error < 1e-12);
    }

    #[test]
    fn apply_coupling_anchors() {
        let t = array![[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]];
        let src = array![[4.0, 5.0, 9.0], [1.0, -1.0, 3.0]];
        let uni = Array2::from_elem((3, 3), 1.0 / 9.0);
        assert_eq!(apply_coupling(t.view(), src.view(), uni.view(), 0.0).unwrap(), t);
        let out = apply_coupling(t.view(), src.view(), uni.view(), 1.0).unwrap();
        for i in 0..3 {
            assert!((out[[0, i]] - t[[0, i]] - 6.0).abs() < 1e-12);
            assert!((out[[1, i]] - t[[1, i]] - 1.0).abs() < 1e-12);
        }
        // One-hot rows: target 0 <- source 2, 1 <- 0, 2 <- 1.
        let mut perm = Array2::zeros((3, 3));
        perm[[0, 2]] = 1.0 / 3.0;
        perm[[1, 0]] = 1.0 / 3.0;
        perm[[2, 1]] = 1.0 / 3.0;
        let out = apply_coupling(t.view(), src.view(), perm.view(), 1.0).unwrap();
        for (ti, sj) in [(0, 2), (1, 0), (2, 1)] {
            for d in 0..2 {
                assert!((out[[d, ti]] - t[[d, ti]] - src[[d, sj]]).abs() < 1e-12);
            }
        }
        assert!(apply_coupling(t.view(), src.view(), Array2::zeros((2, 3)).view(), 1.0).is_err());
    }

    #[test]
    fn cross_attention_rows_carry_uniform_mass() {
        let a = random_cost(1, 4, 6);
        let b = random_cost(2, 4, 5);
        let p = cross_attention_plan(a.view(), b.view()).unwrap();
        for r in p.rows() {
            assert!((r.sum() - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    fn latent_grid() -> GridSpec {
        GridSpec {
            n_lat: 3,
            n_lon: 4,
            lat_start_deg: 60.0,
            lat_step_deg: -60.0,
            lon_start_deg: 45.0,
            lon_step_deg: 90.0,
        }
    }

    fn random_latent(seed: u64, c: usize) -> Array3<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((c, 3, 4), || rng.sample(StandardNormal))
    }

    #[test]
    fn zero_gain_block_is_identity() {
        let g = latent_grid();
        let (a, b) = (random_latent(1, 3), random_latent(2, 2));
        let params = OtbParams::seeded(4, 3, 2, 0, 5, 0.0);
        let out = otb_block(a.view(), b.view(), &[], &[], &g, &params).unwrap();
        assert_eq!(out.a_out, a);
        assert_eq!(out.b_out, b);
        assert!(out.plan_b_to_a.unwrap().converged);
    }

    #[test]
    fn identical_features_give_zero_cost_diagonal() {
        let g = latent_grid();
        let a = random_latent(1, 3);
        let mut params = OtbParams::seeded(4, 3, 3, 0, 5, 0.5);
        params.b_to_a.source_extractor = params.b_to_a.target_extractor.clone();
        let fa = params.b_to_a.target_extractor.dot(&flatten(a.view()));
        let fb = params.b_to_a.source_extractor.dot(&flatten(a.view()));
        let c = cosine_cost(fa.view(), fb.view()).unwrap();
        for i in 0..12 {
            assert!(c[[i, i]].abs() < 1e-12);
        }
        assert!(otb_block(a.view(), a.view(), &[], &[], &g, &params).is_ok());
    }

    #[test]
    fn swapping_spheres_swaps_plans_only_with_shared_parameters() {
        let g = latent_grid();
        let (a, b) = (random_latent(1, 2), random_latent(2, 2));
        let mut shared = OtbParams::seeded(4, 2, 2, 0, 5, 0.3);
        shared.a_to_b = shared.b_to_a.clone();
        let x = otb_block(a.view(), b.view(), &[], &[], &g, &shared).unwrap();
        let y = otb_block(b.view(), a.view(), &[], &[], &g, &shared).unwrap();
        let diff = |p: &TransportPlan, q: &TransportPlan| (&p.plan - &q.plan).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff(x.plan_b_to_a.as_ref().unwrap(), y.plan_a_to_b.as_ref().unwrap()) < 1e-12);
        assert!(diff(x.plan_a_to_b.as_ref().unwrap(), y.plan_b_to_a.as_ref().unwrap()) < 1e-12);

        let independent = OtbParams::seeded(4, 2, 2, 0, 5, 0.3);
        let x = otb_block(a.view(), b.view(), &[], &[], &g, &independent).unwrap();
        let y = otb_block(b.view(), a.view(), &[], &[], &g, &independent).unwrap();
        assert!(diff(x.plan_b_to_a.as_ref().unwrap(), y.plan_a_to_b.as_ref().unwrap()) > 1e-6);
    }

    #[test]
    fn uncoupled_variant_passes_through() {
        let g = latent_grid();
        let (a, b) = (random_latent(1, 3), random_latent(2, 2));
        let mut params = OtbParams::seeded(4, 3, 2, 0, 5, 1.0);
        params.variant = CouplingVariant::None;
        let out = otb_block(a.view(), b.view(), &[], &[], &g, &params).unwrap();
        assert_eq!(out.a_out, a);
        assert!(out.plan_b_to_a.is_none());
    }

    #[test]
    fn wmid_anchors() {
        let g = latent_grid();
        let region = RegionBox::new(50.0, 70.0, 40.0, 50.0).unwrap();
        // region cell: row 0, col 0 (60N, 45E)
        let r = site(&g, 0, 0);
        let mut plan = Array2::zeros((12, 12));
        plan[[r, r]] = 1.0;
        assert_eq!(wmid(plan.view(), &g, &g, &region, 50.0).unwrap(), 0.0);

        let far = site(&g, 2, 2);
        let mut plan = Array2::zeros((12, 12));
        plan[[r, far]] = 0.3;
        let d = great_circle_km((-60.0, 225.0), (60.0, 45.0));
        assert!((wmid(plan.view(), &g, &g, &region, 50.0).unwrap() - d).abs() < 1e-9);

        let other = site(&g, 1, 1);
        plan[[r, other]] = 0.3;
        let d2 = great_circle_km((0.0, 135.0), (60.0, 45.0));
        assert!((wmid(plan.view(), &g, &g, &region, 50.0).unwrap() - (d + d2) / 2.0).abs() < 1e-9);

        let empty = Array2::zeros((12, 12));
        assert!(wmid(empty.view(), &g, &g, &region, 50.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn cost_shift_invariance(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let c = random_cost(seed, 5, 6);
            let p = sinkhorn(c.view(), &uniform(5), &uniform(6), &tight()).unwrap();
            let q = sinkhorn((&c + shift).view(), &uniform(5), &uniform(6), &tight()).unwrap();
            for (x, y) in p.plan.iter().zip(q.plan.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn apply_coupling_is_linear_in_source(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            let s1 = random_cost(seed + 1, 3, 5);
            let s2 = random_cost(seed + 2, 3, 5);
            let plan = random_cost(seed + 3, 4, 5) / 40.0;
            let zero = Array2::zeros((3, 4));
            let f = |s: &Array2<f64>| apply_coupling(zero.view(), s.view(), plan.view(), 0.7).unwrap();
            let lhs = f(&(&s1 * alpha + &s2));
            let rhs = f(&s1) * alpha + f(&s2);
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn wmid_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let g = latent_grid();
            let region = RegionBox::new(-10.0, 10.0, 100.0, 170.0).unwrap();
            let plan = random_cost(seed, 12, 12);
            let a = wmid(plan.view(), &g, &g, &region, 50.0).unwrap();
            let b = wmid((&plan * scale).view(), &g, &g, &region, 50.0).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
