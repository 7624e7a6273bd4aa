//! Constant estimation and expansion verification over sampling grids.
//!
//! Every estimate is a min or max over a grid of points of `M_h`, evaluated
//! in parallel. Min and max are order independent, so results do not depend
//! on the number of threads.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coverings::{derivative_defect, Construction};
use crate::error::{Error, Result};
use crate::fields::TrigDisplacementField;
use crate::linalg::{conorm, generalized_conorm, gram_norm, Matrix, Vector};
use crate::manifolds::{differential, ChartMap, MTPoint, MetricG, Piece, Tangent};
use crate::torus_maps::CONTRACTION_SAFETY;

/// Regular sampling grid: `fiber^n` torus points on each of `time` slices
/// `t_j = j / (time − 1)`. The closing slice `t = 1` is evaluated in the
/// lower chart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Grid {
    pub fiber: usize,
    pub time: usize,
}

impl Grid {
    pub fn new(fiber: usize, time: usize) -> Result<Self> {
        if fiber < 1 || time < 2 {
            return Err(Error::Config(format!(
                "grid needs fiber >= 1 and time >= 2, got {fiber} and {time}"
            )));
        }
        Ok(Self { fiber, time })
    }

    pub fn len(&self, dim: usize) -> usize {
        self.fiber.pow(dim as u32) * self.time
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, idx: usize, dim: usize) -> (MTPoint, Piece) {
        let per_slice = self.fiber.pow(dim as u32);
        let j = idx / per_slice;
        let mut rem = idx % per_slice;
        let mut x = Vector::zeros(dim);
        for c in x.iter_mut() {
            *c = (rem % self.fiber) as f64 / self.fiber as f64;
            rem /= self.fiber;
        }
        let t = j as f64 / (self.time - 1) as f64;
        let piece = if j + 1 == self.time { Piece::Lower } else { Piece::Upper };
        (MTPoint::new(0, t, x), piece)
    }
}

/// Evaluates `eval` at every grid point, in grid order.
pub fn sweep<T, F>(grid: &Grid, dim: usize, eval: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&MTPoint, Piece) -> Result<T> + Sync,
{
    (0..grid.len(dim))
        .into_par_iter()
        .map(|idx| {
            let (p, piece) = grid.point(idx, dim);
            eval(&p, piece)
        })
        .collect()
}

fn min_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Uniform random points of `M_h` in the `[0, 1)` chart.
pub fn random_points(dim: usize, count: usize, seed: u64) -> Vec<MTPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let t = rng.gen::<f64>();
            MTPoint::new(0, t, Vector::from_iterator(dim, (0..dim).map(|_| rng.gen::<f64>())))
        })
        .collect()
}

/// Per-point `min(sqrt(λ_min), 1/sqrt(λ_max))` of the fiber Gram of `G`.
pub fn local_metric_equiv(metric: &MetricG, p: &MTPoint) -> Result<f64> {
    let eig = metric.fiber_gram(p.t, &p.x)?.symmetric_eigen().eigenvalues;
    Ok(eig.min().sqrt().min(1.0 / eig.max().sqrt()))
}

/// `c_eq` with `c_eq ≤ ‖v‖_G / ‖v‖_0 ≤ 1/c_eq` on vertical vectors.
pub fn estimate_metric_equiv(metric: &MetricG, grid: &Grid) -> Result<f64> {
    let local = sweep(grid, metric.dim(), |p, _| local_metric_equiv(metric, p))?;
    Ok(min_of(&local))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FiberConorm {
    /// Grid minimum of the flat conorm of `D(F_k ∘ H_k)` on fibers.
    pub value: f64,
    /// `k`-independent lower bound from the sup of `Dv`.
    pub uniform_bound: f64,
}

/// Lower bound `((1−ρ)/(1+ρ))²` for the fiber conorm of `F_k ∘ H_k`, with `ρ`
/// the inflated sampled sup of `‖Dv‖`; every factor is a lift of `h`, `h⁻¹`
/// or `φ₁(s)` and lifts share that sup. Zero when `ρ ≥ 1`.
pub fn uniform_conorm_bound(field: &TrigDisplacementField, per_axis: usize) -> f64 {
    let rho = CONTRACTION_SAFETY * field.sampled_jacobian_bound(per_axis);
    if rho >= 1.0 {
        0.0
    } else {
        ((1.0 - rho) / (1.0 + rho)).powi(2)
    }
}

fn fiber_block(j: &Matrix) -> Matrix {
    let n = j.nrows() - 1;
    j.view((1, 1), (n, n)).into_owned()
}

pub fn local_fiber_conorm(c: &Construction, p: &MTPoint, piece: Piece) -> Result<f64> {
    let (_, j) = differential(c.fh(), p, piece)?;
    Ok(conorm(&fiber_block(&j)))
}

/// The constant `C` of the fiber conorm bound for `F_k ∘ H_k`.
pub fn estimate_c(c: &Construction, grid: &Grid, field: Option<&TrigDisplacementField>) -> Result<FiberConorm> {
    let local = sweep(grid, c.dim(), |p, piece| local_fiber_conorm(c, p, piece))?;
    let uniform_bound = field.map_or(0.0, |f| uniform_conorm_bound(f, grid.fiber.max(16)));
    Ok(FiberConorm {
        value: min_of(&local),
        uniform_bound,
    })
}

/// Smallest stretch of the vertical block of `Dmap` between `G` at the
/// source and at the image.
pub fn local_vertical_conorm(map: &dyn ChartMap, metric: &MetricG, p: &MTPoint, piece: Piece) -> Result<f64> {
    let (q, j) = differential(map, p, piece)?;
    generalized_conorm(
        &fiber_block(&j),
        &metric.fiber_gram(p.t, &p.x)?,
        &metric.fiber_gram(q.t, &q.x)?,
    )
}

/// `c_q`, the vertical conorm of `Dq_m` in `G`.
pub fn estimate_cq(c: &Construction, metric: &MetricG, grid: &Grid) -> Result<f64> {
    let local = sweep(grid, c.dim(), |p, piece| local_vertical_conorm(c.qm(), metric, p, piece))?;
    Ok(min_of(&local))
}

/// Minimal `k ≥ 1` with `c_eq² 3^k C(k) > λ`; also returns `C(k)`.
pub fn select_k<F>(c_eq: f64, base: i64, mut c_of: F, lambda: f64, cap: usize) -> Result<(usize, f64)>
where
    F: FnMut(usize) -> Result<f64>,
{
    for k in 1..=cap {
        let c = c_of(k)?;
        if c_eq * c_eq * (base as f64).powi(k as i32) * c > lambda {
            return Ok((k, c));
        }
    }
    Err(Error::Unbounded { cap: cap as u32 })
}

/// `Df` at one point with the fiber Grams of `G` at both ends.
#[derive(Clone, Debug)]
pub struct DfSample {
    pub point: MTPoint,
    pub image: MTPoint,
    pub jacobian: Matrix,
    pub source_gram: Matrix,
    pub target_gram: Matrix,
}

impl DfSample {
    pub fn at(map: &dyn ChartMap, metric: &MetricG, p: &MTPoint, piece: Piece) -> Result<Self> {
        let (q, j) = differential(map, p, piece)?;
        Ok(Self {
            source_gram: metric.fiber_gram(p.t, &p.x)?,
            target_gram: metric.fiber_gram(q.t, &q.x)?,
            point: p.clone(),
            image: q,
            jacobian: j,
        })
    }

    /// Vertical conorm in `G`.
    pub fn vertical_conorm(&self) -> Result<f64> {
        generalized_conorm(&fiber_block(&self.jacobian), &self.source_gram, &self.target_gram)
    }

    /// `‖(Df(∂_t))^∥‖_G`.
    pub fn horizontal_coupling(&self) -> f64 {
        let n = self.jacobian.nrows() - 1;
        let u = self.jacobian.view((1, 0), (n, 1)).into_owned();
        gram_norm(&self.target_gram, &u.column(0).into_owned())
    }

    pub fn push(&self, v: &Tangent) -> Tangent {
        Tangent::from_vector(&(&self.jacobian * v.to_vector()))
    }
}

pub fn sample_df(map: &dyn ChartMap, metric: &MetricG, grid: &Grid) -> Result<Vec<DfSample>> {
    sweep(grid, metric.dim(), |p, piece| DfSample::at(map, metric, p, piece))
}

/// Per-sample vertical conorms; their minimum is the vertical expansion margin.
pub fn vertical_conorms(samples: &[DfSample]) -> Result<Vec<f64>> {
    samples.par_iter().map(DfSample::vertical_conorm).collect()
}

pub fn verify_vertical_expansion(samples: &[DfSample]) -> Result<f64> {
    Ok(min_of(&vertical_conorms(samples)?))
}

/// `(K, K_eff)` with `K_eff = max(K, 1)`.
pub fn estimate_k(samples: &[DfSample]) -> (f64, f64) {
    let local: Vec<f64> = samples.par_iter().map(DfSample::horizontal_coupling).collect();
    let k = max_of(&local).max(0.0);
    (k, k.max(1.0))
}

/// `|||v||| = max(‖v^∥‖_G / K, ‖v^⊥‖_G)`.
pub fn finsler_norm(k_eff: f64, fiber_gram: &Matrix, v: &Tangent) -> Result<f64> {
    if !(k_eff > 0.0) {
        return Err(Error::FinslerDegenerate(k_eff));
    }
    Ok((gram_norm(fiber_gram, &v.u) / k_eff).max(v.a.abs()))
}

/// Deterministic unit vectors of `R^n`: evenly spaced angles for `n = 2`,
/// seeded Gaussian draws plus the coordinate axes otherwise.
pub fn direction_set(dim: usize, count: usize, seed: u64) -> Vec<Vector> {
    if dim == 1 {
        return vec![Vector::from_element(1, 1.0), Vector::from_element(1, -1.0)];
    }
    if dim == 2 {
        return (0..count)
            .map(|j| {
                let a = TAU * j as f64 / count as f64;
                Vector::from_vec(vec![a.cos(), a.sin()])
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vector> = (0..dim)
        .map(|i| {
            let mut e = Vector::zeros(dim);
            e[i] = 1.0;
            e
        })
        .collect();
    while out.len() < count.max(dim) {
        let v = Vector::from_iterator(dim, (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0));
        let norm = v.norm();
        if norm > 1e-3 && norm <= 1.0 {
            out.push(v / norm);
        }
    }
    out
}

/// Unit-Finsler test vectors at a point: pure vertical, pure horizontal and
/// mixed directions on both faces of the unit sphere.
fn finsler_directions(k_eff: f64, fiber_gram: &Matrix, dirs: &[Vector]) -> Vec<Tangent> {
    const HEIGHTS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
    const RADII: [f64; 3] = [0.25, 0.5, 0.75];
    let n = fiber_gram.nrows();
    let mut out = vec![Tangent::horizontal(1.0, n), Tangent::horizontal(-1.0, n)];
    for d in dirs {
        let u = d * (k_eff / gram_norm(fiber_gram, d));
        for a in HEIGHTS {
            out.push(Tangent::new(a, u.clone()));
        }
        for r in RADII {
            out.push(Tangent::new(1.0, &u * r));
            out.push(Tangent::new(-1.0, &u * r));
        }
    }
    out
}

/// Smallest sampled `|||Df v||| / |||v|||` at one point.
pub fn local_finsler_expansion(s: &DfSample, k_eff: f64, dirs: &[Vector]) -> Result<f64> {
    let mut worst = f64::INFINITY;
    for v in finsler_directions(k_eff, &s.source_gram, dirs) {
        let before = finsler_norm(k_eff, &s.source_gram, &v)?;
        let after = finsler_norm(k_eff, &s.target_gram, &s.push(&v))?;
        worst = worst.min(after / before);
    }
    Ok(worst)
}

/// `(μ, case bound)` where the case bound is `min(2m+1, ν−1)`.
pub fn verify_finsler_expansion(
    samples: &[DfSample],
    k_eff: f64,
    dirs: &[Vector],
    t_factor: f64,
    vertical_margin: f64,
) -> Result<(f64, f64)> {
    if !(k_eff > 0.0) {
        return Err(Error::FinslerDegenerate(k_eff));
    }
    let local: Vec<f64> = samples
        .par_iter()
        .map(|s| local_finsler_expansion(s, k_eff, dirs))
        .collect::<Result<_>>()?;
    Ok((min_of(&local), t_factor.min(vertical_margin - 1.0)))
}

/// `‖·‖_ad² = Σ_{j<N} λ_a^{−2j} ‖Df^j ·‖_G²`.
#[derive(Clone)]
pub struct AdaptedMetric {
    map: Construction,
    metric: MetricG,
    steps: usize,
    lambda: f64,
    r_plus: f64,
    r_minus: f64,
    samples: Vec<MTPoint>,
}

impl AdaptedMetric {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn equivalence(&self) -> (f64, f64) {
        (self.r_plus, self.r_minus)
    }

    /// The random points that entered `λ_a` alongside the grid.
    pub fn sample_points(&self) -> &[MTPoint] {
        &self.samples
    }

    /// `‖Df^j v‖_G` for `j = 0..=steps` along the orbit of `p`.
    pub fn orbit_norms(&self, p: &MTPoint, v: &Tangent, steps: usize) -> Result<Vec<f64>> {
        let mut p = p.clone();
        let mut w = v.to_vector();
        let mut out = Vec::with_capacity(steps + 1);
        for j in 0..=steps {
            out.push(gram_norm(&self.metric.gram(&p)?, &w));
            if j < steps {
                let (q, jac) = differential(self.map.f(), &p, Piece::Upper)?;
                w = jac * w;
                p = q;
            }
        }
        Ok(out)
    }

    pub fn norm(&self, p: &MTPoint, v: &Tangent) -> Result<f64> {
        let norms = self.orbit_norms(p, v, self.steps - 1)?;
        Ok(self.sum_sq(&norms[..self.steps]).sqrt())
    }

    fn sum_sq(&self, norms: &[f64]) -> f64 {
        norms
            .iter()
            .enumerate()
            .map(|(j, n)| self.lambda.powi(-2 * j as i32) * n * n)
            .sum()
    }

    /// `‖Df v‖_ad²`, and the right-hand side
    /// `λ_a²(‖v‖_ad² − ‖v‖_G² + λ_a^{−2N}‖Df^N v‖_G²)` of the telescoping identity.
    pub fn telescoping(&self, p: &MTPoint, v: &Tangent) -> Result<(f64, f64)> {
        let norms = self.orbit_norms(p, v, self.steps)?;
        let n = self.steps;
        let lhs = self.sum_sq(&norms[1..=n]);
        let rhs = self.lambda.powi(2)
            * (self.sum_sq(&norms[..n]) - norms[0] * norms[0]
                + self.lambda.powi(-2 * n as i32) * norms[n] * norms[n]);
        Ok((lhs, rhs))
    }
}

fn orbit_conorm(map: &Construction, metric: &MetricG, p: &MTPoint, piece: Piece, steps: usize) -> Result<f64> {
    let start = metric.gram(p)?;
    let mut q = p.clone();
    let mut acc = Matrix::identity(p.x.len() + 1, p.x.len() + 1);
    for _ in 0..steps {
        let (next, j) = differential(map.f(), &q, piece)?;
        acc = j * acc;
        q = next;
    }
    generalized_conorm(&acc, &start, &metric.gram(&q)?)
}

/// Builds the adapted metric from the sampled Finsler rate `mu_hat`.
pub fn build_adapted_metric(
    c: &Construction,
    metric: &MetricG,
    grid: &Grid,
    mu_hat: f64,
    k_eff: f64,
    samples: usize,
    seed: u64,
) -> Result<AdaptedMetric> {
    if !(mu_hat > 1.0) {
        return Err(Error::NotExpanding(mu_hat));
    }
    let r_plus = (1.0 + k_eff * k_eff).sqrt();
    let r_minus = k_eff.min(1.0);
    let ratio = r_plus / r_minus;
    let mut steps = 1usize;
    while mu_hat.powi(steps as i32) <= ratio {
        steps += 1;
    }
    let n = c.dim();
    let on_grid = sweep(grid, n, |p, piece| orbit_conorm(c, metric, p, piece, steps))?;
    let points = random_points(n, samples, seed);
    let off_grid: Vec<f64> = points
        .par_iter()
        .map(|p| orbit_conorm(c, metric, p, Piece::Upper, steps))
        .collect::<Result<_>>()?;
    let lambda = min_of(&on_grid).min(min_of(&off_grid)).powf(1.0 / steps as f64);
    if !(lambda > 1.0) {
        return Err(Error::NotExpanding(lambda));
    }
    Ok(AdaptedMetric {
        map: c.clone(),
        metric: metric.clone(),
        steps,
        lambda,
        r_plus,
        r_minus,
        samples: points,
    })
}

/// Inputs of the full verification run.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub field: TrigDisplacementField,
    pub m: usize,
    pub k: Option<usize>,
    pub base: i64,
    pub nu_target: f64,
    pub k_max: usize,
    pub grid: Grid,
    pub directions: usize,
    pub adapted_samples: usize,
    pub tol_rel: f64,
    pub fd_rel_tol: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridInfo {
    pub fiber: usize,
    pub time: usize,
    pub points: usize,
    pub directions: usize,
    pub adapted_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstantsReport {
    pub c_eq: f64,
    #[serde(rename = "C")]
    pub c_fiber: f64,
    #[serde(rename = "C_uniform_bound")]
    pub c_uniform_bound: f64,
    pub c_q: f64,
    #[serde(rename = "K")]
    pub k_coupling: f64,
    #[serde(rename = "K_eff")]
    pub k_eff: f64,
    pub k: usize,
    pub m: usize,
    pub grid: GridInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdaptedReport {
    #[serde(rename = "N")]
    pub steps: usize,
    pub lambda_a: f64,
    pub r_plus: f64,
    pub r_minus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpansionReport {
    pub k: usize,
    pub m: usize,
    pub nu_target: f64,
    pub lambda_target: f64,
    pub lemma_bound: f64,
    pub vertical_margin: f64,
    pub mu: f64,
    pub case_bound: f64,
    pub adapted: Option<AdaptedReport>,
    pub derivative_defect: f64,
    pub vertical_pass: bool,
    pub finsler_pass: bool,
    pub adapted_pass: bool,
    pub derivative_pass: bool,
    pub pass: bool,
    pub grid: GridInfo,
}

/// Constants, the chosen construction and the cached `Df` sweep.
pub struct ConstantsRun {
    pub constants: ConstantsReport,
    pub construction: Construction,
    pub metric: MetricG,
    pub samples: Vec<DfSample>,
    pub local_conorms: Vec<f64>,
    pub lambda_target: f64,
}

/// Everything a verification run produces.
pub struct PipelineOutput {
    pub constants: ConstantsReport,
    pub expansion: ExpansionReport,
    pub construction: Construction,
    /// Grid points with their local vertical conorm of `Df`.
    pub local_conorms: Vec<(MTPoint, f64)>,
    pub adapted: Option<AdaptedMetric>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn validate(cfg: &PipelineConfig) -> Result<()> {
    if cfg.m == 0 {
        return Err(Error::Config("m must be at least 1".into()));
    }
    if cfg.k == Some(0) {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if !(cfg.nu_target > 0.0) {
        return Err(Error::Config("nu_target must be positive".into()));
    }
    Ok(())
}

/// Estimates `c_eq`, `c_q`, selects `k`, and sweeps `Df` for `C`, `K` and the
/// vertical margin.
pub fn run_constants(cfg: &PipelineConfig) -> Result<ConstantsRun> {
    validate(cfg)?;
    let n = cfg.field.dim();
    let grid = cfg.grid;
    let build = |k: usize| Construction::from_field(&cfg.field, k, cfg.m, cfg.base);

    let first = stage("construction", build(cfg.k.unwrap_or(1)))?;
    let metric = MetricG::new(first.h());
    let c_eq = stage("metric_equiv", estimate_metric_equiv(&metric, &grid))?;
    let c_q = stage("c_q", estimate_cq(&first, &metric, &grid))?;
    let lambda_target = cfg.nu_target / c_q;

    let mut built: Vec<Construction> = vec![first];
    let mut fiber_of = |k: usize| -> Result<f64> {
        let c = match built.iter().find(|c| c.k() == k) {
            Some(c) => c.clone(),
            None => {
                let c = build(k)?;
                built.push(c.clone());
                c
            }
        };
        Ok(estimate_c(&c, &grid, None)?.value)
    };
    let (k, c_fiber) = match cfg.k {
        Some(k) => (k, stage("C", fiber_of(k))?),
        None => stage(
            "select_k",
            select_k(c_eq, cfg.base, &mut fiber_of, lambda_target, cfg.k_max),
        )?,
    };
    let construction = built
        .into_iter()
        .find(|c| c.k() == k)
        .expect("construction for selected k");

    let samples = stage("df_sweep", sample_df(construction.f(), &metric, &grid))?;
    let local_conorms = stage("vertical", vertical_conorms(&samples))?;
    let (k_coupling, k_eff) = estimate_k(&samples);
    let constants = ConstantsReport {
        c_eq,
        c_fiber,
        c_uniform_bound: uniform_conorm_bound(&cfg.field, grid.fiber.max(16)),
        c_q,
        k_coupling,
        k_eff,
        k,
        m: cfg.m,
        grid: GridInfo {
            fiber: grid.fiber,
            time: grid.time,
            points: grid.len(n),
            directions: direction_set(n, cfg.directions, cfg.seed).len(),
            adapted_samples: cfg.adapted_samples,
        },
    };
    Ok(ConstantsRun {
        constants,
        construction,
        metric,
        samples,
        local_conorms,
        lambda_target,
    })
}

/// Finite-difference spot check points: the first few adapted-metric samples
/// paired with seeded directions.
fn derivative_pairs(dim: usize, count: usize, seed: u64) -> Vec<(MTPoint, Tangent)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ff);
    random_points(dim, count, seed ^ 0xd1ff)
        .into_iter()
        .map(|p| {
            let v = Tangent::new(
                rng.gen_range(-1.0..1.0),
                Vector::from_iterator(dim, (0..dim).map(|_| rng.gen_range(-1.0..1.0))),
            );
            (p, v)
        })
        .collect()
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let run = run_constants(cfg)?;
    let n = cfg.field.dim();
    let c = &run.constants;
    let margin = min_of(&run.local_conorms);
    let dirs = direction_set(n, cfg.directions, cfg.seed);
    let t_factor = (2 * cfg.m + 1) as f64;
    let (mu, case_bound) = stage(
        "finsler",
        verify_finsler_expansion(&run.samples, c.k_eff, &dirs, t_factor, margin),
    )?;
    let adapted = if mu > 1.0 {
        Some(stage(
            "adapted",
            build_adapted_metric(
                &run.construction,
                &run.metric,
                &cfg.grid,
                mu,
                c.k_eff,
                cfg.adapted_samples,
                cfg.seed,
            ),
        )?)
    } else {
        None
    };
    let defect = stage(
        "derivatives",
        derivative_defect(run.construction.f(), &derivative_pairs(n, 32, cfg.seed), 1e-6),
    )?;

    let vertical_pass = margin >= cfg.nu_target * (1.0 - cfg.tol_rel);
    let finsler_pass = mu > 1.0 && case_bound > 1.0;
    let adapted_pass = adapted.as_ref().is_some_and(|a| a.lambda() > 1.0);
    let derivative_pass = defect <= cfg.fd_rel_tol;
    let expansion = ExpansionReport {
        k: c.k,
        m: cfg.m,
        nu_target: cfg.nu_target,
        lambda_target: run.lambda_target,
        lemma_bound: c.c_eq * c.c_eq * (cfg.base as f64).powi(c.k as i32) * c.c_fiber,
        vertical_margin: margin,
        mu,
        case_bound,
        adapted: adapted.as_ref().map(|a| AdaptedReport {
            steps: a.steps(),
            lambda_a: a.lambda(),
            r_plus: a.r_plus,
            r_minus: a.r_minus,
        }),
        derivative_defect: defect,
        vertical_pass,
        finsler_pass,
        adapted_pass,
        derivative_pass,
        pass: vertical_pass && finsler_pass && adapted_pass && derivative_pass,
        grid: c.grid.clone(),
    };
    let local_conorms = run
        .samples
        .into_iter()
        .map(|s| s.point)
        .zip(run.local_conorms)
        .collect();
    Ok(PipelineOutput {
        constants: run.constants,
        expansion,
        construction: run.construction,
        local_conorms,
        adapted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifolds::pushforward;

    fn v2(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    fn shear(eps: f64) -> TrigDisplacementField {
        TrigDisplacementField::shear(2, eps, 0, 1)
    }

    fn config(eps: f64) -> PipelineConfig {
        PipelineConfig {
            field: shear(eps),
            m: 1,
            k: None,
            base: 3,
            nu_target: 2.0,
            k_max: 12,
            grid: Grid::new(12, 9).unwrap(),
            directions: 12,
            adapted_samples: 200,
            tol_rel: 1e-3,
            fd_rel_tol: 1e-5,
            seed: 7,
        }
    }

    #[test]
    fn grid_layout() {
        let g = Grid::new(4, 5).unwrap();
        assert_eq!(g.len(2), 80);
        let (p, piece) = g.point(0, 2);
        assert_eq!((p.t, piece), (0.0, Piece::Upper));
        let (p, piece) = g.point(79, 2);
        assert_eq!((p.t, piece), (1.0, Piece::Lower));
        assert_eq!(p.x, v2(0.75, 0.75));
        assert!(Grid::new(4, 1).is_err());
    }

    #[test]
    fn metric_equivalence() {
        let flat = MetricG::new(&crate::torus_maps::TorusMap::identity(2));
        assert_eq!(estimate_metric_equiv(&flat, &Grid::new(8, 5).unwrap()).unwrap(), 1.0);

        let h = crate::torus_maps::TorusMap::displacement(shear(0.1)).unwrap();
        let g = MetricG::new(&h);
        let local = local_metric_equiv(&g, &MTPoint::new(0, 1.0, v2(0.3, 0.0))).unwrap();
        assert!((local - 0.7340).abs() < 1e-3, "{local}");
        let coarse = estimate_metric_equiv(&g, &Grid::new(8, 5).unwrap()).unwrap();
        let fine = estimate_metric_equiv(&g, &Grid::new(16, 9).unwrap()).unwrap();
        assert!(coarse <= local + 1e-12);
        assert!(fine <= coarse);
    }

    #[test]
    fn select_k_examples() {
        assert_eq!(select_k(1.0, 3, |_| Ok(1.0), 2.0, 10).unwrap().0, 1);
        assert_eq!(select_k(1.0, 3, |_| Ok(1.0), 10.0, 10).unwrap().0, 3);
        assert!(matches!(
            select_k(1e-3, 3, |_| Ok(1e-3), 10.0, 4),
            Err(Error::Unbounded { cap: 4 })
        ));
    }

    #[test]
    fn fiber_conorm_is_uniform_in_k() {
        let grid = Grid::new(12, 9).unwrap();
        let field = shear(0.1);
        let bound = uniform_conorm_bound(&field, 64);
        assert!(bound > 0.0);
        for k in 1..=3 {
            let c = Construction::from_field(&field, k, 1, 3).unwrap();
            let est = estimate_c(&c, &grid, Some(&field)).unwrap();
            assert!(est.value >= bound, "k={k}: {} < {bound}", est.value);
        }
        let c = Construction::from_field(&shear(0.0), 2, 1, 3).unwrap();
        assert!((estimate_c(&c, &grid, None).unwrap().value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cq_is_grid_stable() {
        let c = Construction::from_field(&shear(0.1), 1, 1, 3).unwrap();
        let metric = MetricG::new(c.h());
        let a = estimate_cq(&c, &metric, &Grid::new(32, 9).unwrap()).unwrap();
        let b = estimate_cq(&c, &metric, &Grid::new(64, 9).unwrap()).unwrap();
        assert!(a > 0.0 && (a - b).abs() / b < 0.02, "{a} {b}");
        let flat = Construction::from_field(&shear(0.0), 1, 1, 3).unwrap();
        let m0 = MetricG::new(flat.h());
        assert!((estimate_cq(&flat, &m0, &Grid::new(8, 5).unwrap()).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn generalized_conorm_matches_direct_minimization() {
        let c = Construction::from_field(&shear(0.1), 2, 1, 3).unwrap();
        let metric = MetricG::new(c.h());
        let s = DfSample::at(c.f(), &metric, &MTPoint::new(0, 0.37, v2(0.2, 0.6)), Piece::Upper).unwrap();
        let exact = s.vertical_conorm().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut direct = f64::INFINITY;
        for _ in 0..10_000 {
            let a: f64 = rng.gen_range(0.0..TAU);
            let u = v2(a.cos(), a.sin());
            let img = fiber_block(&s.jacobian) * &u;
            direct = direct.min(gram_norm(&s.target_gram, &img) / gram_norm(&s.source_gram, &u));
        }
        assert!(direct >= exact - 1e-9);
        assert!((direct - exact) / exact < 1e-6, "{direct} {exact}");
    }

    #[test]
    fn lemma_chain_holds_pointwise() {
        let field = shear(0.1);
        let c = Construction::from_field(&field, 2, 1, 3).unwrap();
        let metric = MetricG::new(c.h());
        let grid = Grid::new(10, 7).unwrap();
        let c_eq = estimate_metric_equiv(&metric, &grid).unwrap();
        for idx in 0..grid.len(2) {
            let (p, piece) = grid.point(idx, 2);
            let lhs = local_vertical_conorm(c.pk(), &metric, &p, piece).unwrap();
            let rhs = c_eq * c_eq * 9.0 * local_fiber_conorm(&c, &p, piece).unwrap();
            assert!(lhs >= rhs * (1.0 - 1e-12), "{lhs} < {rhs}");
        }
    }

    #[test]
    fn linear_model_pipeline() {
        let out = run_pipeline(&config(0.0)).unwrap();
        let e = &out.expansion;
        assert_eq!(e.k, 1);
        assert!((e.vertical_margin - 3.0).abs() < 1e-12);
        assert!((e.mu - 3.0).abs() < 1e-12);
        let a = e.adapted.as_ref().unwrap();
        assert_eq!(a.steps, 1);
        assert!((a.lambda_a - 3.0).abs() < 1e-12);
        assert!((a.r_plus / a.r_minus - 2f64.sqrt()).abs() < 1e-15);
        let c = &out.constants;
        assert_eq!((c.c_eq, c.c_q, c.k_coupling, c.k_eff), (1.0, 1.0, 0.0, 1.0));
        assert!((c.c_fiber - 1.0).abs() < 1e-15);
        assert!(e.pass);
    }

    #[test]
    fn linear_model_k2_margin_is_nine() {
        let c = Construction::from_field(&shear(0.0), 2, 1, 3).unwrap();
        let metric = MetricG::new(c.h());
        let samples = sample_df(c.f(), &metric, &Grid::new(6, 5).unwrap()).unwrap();
        assert!((verify_vertical_expansion(&samples).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn shear_pipeline_passes() {
        let out = run_pipeline(&config(0.1)).unwrap();
        let e = &out.expansion;
        assert!(e.pass, "{e:?}");
        assert!(e.lemma_bound > e.lambda_target);
        assert!(e.mu >= e.case_bound - 1e-3);
        assert!(out.constants.c_eq <= 0.7341);
        assert!(out.constants.k_coupling > 0.0);

        // minimality of k
        let cfg = config(0.1);
        let k = e.k;
        if k > 1 {
            let c = Construction::from_field(&cfg.field, k - 1, 1, 3).unwrap();
            let cf = estimate_c(&c, &cfg.grid, None).unwrap().value;
            let ce = out.constants.c_eq;
            assert!(ce * ce * 3f64.powi(k as i32 - 1) * cf <= e.lambda_target);
        }
    }

    #[test]
    fn case_one_is_exact() {
        let c = Construction::from_field(&shear(0.1), 1, 2, 3).unwrap();
        let metric = MetricG::new(c.h());
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let p = MTPoint::new(0, rng.gen(), v2(rng.gen(), rng.gen()));
            let s = DfSample::at(c.f(), &metric, &p, Piece::Upper).unwrap();
            let v = Tangent::horizontal(1.0, 2);
            let after = finsler_norm(2.0, &s.target_gram, &s.push(&v)).unwrap();
            assert!(after >= 5.0 * finsler_norm(2.0, &s.source_gram, &v).unwrap());
        }
        assert!(matches!(
            finsler_norm(0.0, &Matrix::identity(2, 2), &Tangent::horizontal(1.0, 2)),
            Err(Error::FinslerDegenerate(_))
        ));
    }

    #[test]
    fn adapted_metric_identities() {
        let cfg = config(0.1);
        let out = run_pipeline(&cfg).unwrap();
        let adapted = out.adapted.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for p in adapted.sample_points().iter().take(100) {
            let v = Tangent::new(rng.gen_range(-1.0..1.0), v2(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let (lhs, rhs) = adapted.telescoping(p, &v).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.max(1.0), "{lhs} {rhs}");
            let (q, w) = pushforward(out.construction.f(), p, &v).unwrap();
            let after = adapted.norm(&q, &w).unwrap();
            assert!(after >= adapted.lambda() * adapted.norm(p, &v).unwrap() * (1.0 - 1e-12));
        }
    }
}
