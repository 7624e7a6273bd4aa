//! The stage maps between mapping tori and their composites.
//!
//! `p_k = P_k ∘ F_k ∘ H_k` runs `M_h → N_k → M_{h_k} → M_h`; `q_m = Q_m ∘ T_m ∘ S_m ∘ R_m`
//! runs `M_h → M̄ → M' → M̃ → M_h`; and `f = q_m ∘ p_k`. Every stage is a
//! [`ChartMap`], so point maps, differentials and seam checks are shared.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lifting::{build_tower, first_isotopy, LiftTower};
use crate::linalg::{checked_solve, reduce_mod_one, torus_distance, Matrix, Vector};
use crate::manifolds::{
    map_point, nk_bound, transport_rows, ChartMap, MTPoint, MultiMappingTorus, Piece, Tangent,
};
use crate::torus_maps::{inverse_square_isotopy, max_discrepancy, Isotopy, TorusMap, NEWTON_MAX_ITER};
use crate::fields::TrigDisplacementField;

/// Newton tolerance for preimage refinement.
pub const PREIMAGE_TOL: f64 = 1e-12;
/// Largest allowed distance of a measured translation from an integer.
pub const INTEGRALITY_TOL: f64 = 1e-8;

fn chart_jacobian(dim: usize, dt: f64, dx_dt: Option<Vector>, dx_dx: Matrix) -> Matrix {
    let mut j = Matrix::zeros(dim + 1, dim + 1);
    j[(0, 0)] = dt;
    if let Some(col) = dx_dt {
        j.view_mut((1, 0), (dim, 1)).copy_from(&col);
    }
    j.view_mut((1, 1), (dim, dim)).copy_from(&dx_dx);
    j
}

/// `H_k : M_h → N_k`, running `φ_{k−i}` across block `i < k`.
pub struct StageH {
    source: MultiMappingTorus,
    target: MultiMappingTorus,
    isotopies: Vec<Isotopy>,
}

impl StageH {
    pub fn new(mh: &MultiMappingTorus, nk: &MultiMappingTorus, tower: &LiftTower) -> Self {
        let k = tower.k();
        Self {
            source: mh.clone(),
            target: nk.clone(),
            isotopies: (0..k).map(|i| tower.phi(k - i).clone()).collect(),
        }
    }
}

impl ChartMap for StageH {
    fn name(&self) -> String {
        "H_k".into()
    }
    fn source(&self) -> &MultiMappingTorus {
        &self.source
    }
    fn target(&self) -> &MultiMappingTorus {
        &self.target
    }

    fn chart(&self, p: &MTPoint, piece: Piece, jacobian: bool) -> Result<(MTPoint, Option<Matrix>)> {
        let n = self.source.dim();
        let i = self.target.segment_at(p.t, piece);
        let Some(phi) = self.isotopies.get(i) else {
            let j = jacobian.then(|| Matrix::identity(n + 1, n + 1));
            return Ok((MTPoint::new(i, p.t, p.x.clone()), j));
        };
        let rate = self.isotopies.len() as f64 + 1.0;
        let s = rate * (p.t - self.target.segments()[i].0);
        let x = phi.eval(s, &p.x)?;
        let j = if jacobian {
            let ds = phi.time_derivative(s, &p.x)? * rate;
            Some(chart_jacobian(n, 1.0, Some(ds), phi.jacobian(s, &p.x)?))
        } else {
            None
        };
        Ok((MTPoint::new(i, p.t, x), j))
    }

    fn breakpoints(&self) -> Vec<f64> {
        let k = self.isotopies.len();
        (1..=k).map(|i| nk_bound(i, k)).collect()
    }
}

/// `F_k : N_k → M_{h_k}`, applying `h_k⁻¹ ∘ h_{k−i}` on block `i`.
pub struct StageF {
    source: MultiMappingTorus,
    target: MultiMappingTorus,
    maps: Vec<TorusMap>,
}

impl StageF {
    pub fn new(nk: &MultiMappingTorus, mhk: &MultiMappingTorus, tower: &LiftTower) -> Result<Self> {
        let k = tower.k();
        let hk_inv = tower.h(k).inverse()?;
        let mut maps = vec![TorusMap::identity(tower.dim())];
        for i in 1..=k {
            maps.push(TorusMap::compose(&hk_inv, tower.h(k - i))?);
        }
        Ok(Self {
            source: nk.clone(),
            target: mhk.clone(),
            maps,
        })
    }
}

impl ChartMap for StageF {
    fn name(&self) -> String {
        "F_k".into()
    }
    fn source(&self) -> &MultiMappingTorus {
        &self.source
    }
    fn target(&self) -> &MultiMappingTorus {
        &self.target
    }

    fn chart(&self, p: &MTPoint, _piece: Piece, jacobian: bool) -> Result<(MTPoint, Option<Matrix>)> {
        let g = &self.maps[p.segment];
        let (x, j) = if jacobian {
            let (x, dx) = g.apply_with_jacobian(&p.x)?;
            (x, Some(chart_jacobian(self.source.dim(), 1.0, None, dx)))
        } else {
            (g.apply(&p.x)?, None)
        };
        Ok((MTPoint::new(0, p.t, x), j))
    }
}

/// `P_k : M_{h_k} → M_h`, `(t, x) ↦ (t, 3^k x)`.
pub struct StageP {
    source: MultiMappingTorus,
    target: MultiMappingTorus,
    factor: f64,
}

impl StageP {
    pub fn new(mhk: &MultiMappingTorus, mh: &MultiMappingTorus, factor: i64) -> Self {
        Self {
            source: mhk.clone(),
            target: mh.clone(),
            factor: factor as f64,
        }
    }
}

impl ChartMap for StageP {
    fn name(&self) -> String {
        "P_k".into()
    }
    fn source(&self) -> &MultiMappingTorus {
        &self.source
    }
    fn target(&self) -> &MultiMappingTorus {
        &self.target
    }

    fn chart(&self, p: &MTPoint, _piece: Piece, jacobian: bool) -> Result<(MTPoint, Option<Matrix>)> {
        let n = self.source.dim();
        let j = jacobian.then(|| chart_jacobian(n, 1.0, None, Matrix::identity(n, n) * self.factor));
        Ok((MTPoint::new(0, p.t, &p.x * self.factor), j))
    }
}

/// `R_m : M_h → M̄`, `(t, x) ↦ ((2m+1) t, x)`.
pub struct StageR {
    source: MultiMappingTorus,
    target: MultiMappingTorus,
    scale: f64,
}

impl StageR {
    pub fn new(mh: &MultiMappingTorus, long: &MultiMappingTorus) -> Self {
        Self {
            source: mh.clone(),
            target: long.clone(),
            scale: long.circumference() / mh.circumference(),
        }
    }
}

impl ChartMap for StageR {
    fn name(&self) -> String {
        "R_m".into()
    }
    fn source(&self) -> &MultiMappingTorus {
        &self.source
    }
    fn target(&self) -> &MultiMappingTorus {
        &self.target
    }

    fn chart(&self, p: &MTPoint, _piece: Piece, jacobian: bool) -> Result<(MTPoint, Option<Matrix>)> {
        let n = self.source.dim();
        let j = jacobian.then(|| chart_jacobian(n, self.scale, None, Matrix::identity(n, n)));
        Ok((MTPoint::new(0, self.scale * p.t, p.x.clone()), j))
    }

    fn t_scale(&self) -> f64 {
        self.scale
    }
}

/// `S_m : M̄ → M'`, running `ψ(t − i, ·)` on odd unit blocks.
pub struct StageS {
    source: MultiMappingTorus,
    target: MultiMappingTorus,
    psi: Isotopy,
}

impl StageS {
    pub fn new(long: &MultiMappingTorus, alternating: &MultiMappingTorus, psi: &Isotopy) -> Self {
        Self {
            source: long.clone(),
            target: alternating.clone(),
            psi: psi.clone(),
        }
    }
}

impl ChartMap for StageS {
    fn name(&self) -> String {
        "S_m".into()
    }
    fn source(&self) -> &MultiMappingTorus {
        &self.source
    }
    fn target(&self) -> &MultiMappingTorus {
        &self.target
    }

    fn chart(&self, p: &MTPoint, piece: Piece, jacobian: bool) -> Result<(MTPoint, Option<Matrix>)> {
        let n = self.source.dim();
        let i = self.target.segment_at(p.t, piece);
        if i % 2 == 0 {
            let j = jacobian.then(|| Matrix::identity(n + 1, n + 1));
            return Ok((MTPoint::new(i, p.t, p.x.clone()), j));
        }
        let s = p.t - self.target.segments()[i].0;
        let x = self.psi.eval(s, &p.x)?;
        let j = if jacobian {
            let ds = self.psi.time_derivative(s, &p.x)?;
            Some(chart_jacobian(n, 1.0, Some(ds), self.psi.jacobian(s, &p.x)?))
        } else {
            None
        };
        Ok((MTPoint::new(i, p.t, x), j))
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.target.segments()[1..].iter().map(|&(a, _)| a).collect()
    }
}

/// `T_m : M' → M̃`, applying `h` on odd unit blocks.
pub struct StageT {
    source: MultiMappingTorus,
    target: MultiMappingTorus,
    h: TorusMap,
}

impl StageT {
    pub fn new(alternating: &MultiMappingTorus, uniform: &MultiMappingTorus, h: &TorusMap) -> Self {
        Self {
            source: alternating.clone(),
            target: uniform.clone(),
            h: h.clone(),
        }
    }
}

impl ChartMap for StageT {
    fn name(&self) -> String {
        "T_m".into()
    }
    fn source(&self) -> &MultiMappingTorus {
        &self.source
    }
    fn target(&self) -> &MultiMappingTorus {
        &self.target
    }

    fn chart(&self, p: &MTPoint, _piece: Piece, jacobian: bool) -> Result<(MTPoint, Option<Matrix>)> {
        let n = self.source.dim();
        if p.segment % 2 == 0 {
            let j = jacobian.then(|| Matrix::identity(n + 1, n + 1));
            return Ok((p.clone(), j));
        }
        let (x, j) = if jacobian {
            let (x, dx) = self.h.apply_with_jacobian(&p.x)?;
            (x, Some(chart_jacobian(n, 1.0, None, dx)))
        } else {
            (self.h.apply(&p.x)?, None)
        };
        Ok((MTPoint::new(p.segment, p.t, x), j))
    }
}

/// `Q_m : M̃ → M_h`, `(t, x) ↦ (t mod 1, x)`.
pub struct StageQ {
    source: MultiMappingTorus,
    target: MultiMappingTorus,
}

impl StageQ {
    pub fn new(uniform: &MultiMappingTorus, mh: &MultiMappingTorus) -> Self {
        Self {
            source: uniform.clone(),
            target: mh.clone(),
        }
    }
}

impl ChartMap for StageQ {
    fn name(&self) -> String {
        "Q_m".into()
    }
    fn source(&self) -> &MultiMappingTorus {
        &self.source
    }
    fn target(&self) -> &MultiMappingTorus {
        &self.target
    }

    fn chart(&self, p: &MTPoint, _piece: Piece, jacobian: bool) -> Result<(MTPoint, Option<Matrix>)> {
        let n = self.source.dim();
        let start = self.source.segments()[p.segment].0;
        let j = jacobian.then(|| Matrix::identity(n + 1, n + 1));
        Ok((MTPoint::new(0, p.t - start, p.x.clone()), j))
    }
}

/// Composite of chart maps, normalizing between stages without reducing
/// fiber coordinates so that lifts stay continuous.
#[derive(Clone)]
pub struct Composite {
    name: String,
    stages: Vec<Arc<dyn ChartMap>>,
}

impl Composite {
    pub fn new(name: impl Into<String>, stages: Vec<Arc<dyn ChartMap>>) -> Result<Self> {
        let name = name.into();
        if stages.is_empty() {
            return Err(Error::Config(format!("{name}: empty composite")));
        }
        Ok(Self { name, stages })
    }

    pub fn stages(&self) -> &[Arc<dyn ChartMap>] {
        &self.stages
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs())
}

impl ChartMap for Composite {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn source(&self) -> &MultiMappingTorus {
        self.stages[0].source()
    }
    fn target(&self) -> &MultiMappingTorus {
        self.stages[self.stages.len() - 1].target()
    }

    fn chart(&self, p: &MTPoint, piece: Piece, jacobian: bool) -> Result<(MTPoint, Option<Matrix>)> {
        let last = self.stages.len() - 1;
        let mut q = p.clone();
        let mut acc: Option<Matrix> = None;
        for (idx, stage) in self.stages.iter().enumerate() {
            let (mut next, j) = stage.chart(&q, piece, jacobian)?;
            let mut j = j;
            if idx < last {
                let (norm, transport) = stage.target().normalize_transport(&next, piece, false)?;
                next = norm;
                if let Some(j) = j.as_mut() {
                    transport_rows(j, &transport);
                }
            }
            acc = match (acc, j) {
                (Some(a), Some(j)) => Some(j * a),
                (None, j) => j,
                (a, None) => a,
            };
            q = next;
        }
        Ok((q, acc))
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for (idx, stage) in self.stages.iter().enumerate() {
            let mut crit = stage.breakpoints();
            if idx > 0 {
                crit.extend(stage.source().segments().iter().map(|&(a, _)| a));
            }
            for earlier in self.stages[..idx].iter().rev() {
                let alpha = earlier.t_scale();
                let l_src = earlier.source().circumference();
                let l_tgt = earlier.target().circumference();
                let sheets = (alpha * l_src / l_tgt).round().max(1.0) as usize;
                crit = crit
                    .iter()
                    .flat_map(|&c| (0..sheets).map(move |r| (c + r as f64 * l_tgt) / alpha))
                    .filter(|&t| t >= 0.0 && t < l_src)
                    .collect();
            }
            out.extend(crit);
        }
        let starts: Vec<f64> = self.source().segments().iter().map(|&(a, _)| a).collect();
        out.retain(|&t| !starts.iter().any(|&a| close(a, t)));
        out.sort_by(f64::total_cmp);
        out.dedup_by(|a, b| close(*a, *b));
        out
    }

    fn t_scale(&self) -> f64 {
        self.stages.iter().map(|s| s.t_scale()).product()
    }
}

/// Normalized image with unreduced (lift) fiber coordinates and the full
/// differential.
pub fn lift_eval(map: &dyn ChartMap, p: &MTPoint, piece: Piece) -> Result<(MTPoint, Matrix)> {
    let (q, j) = map.chart(p, piece, true)?;
    let mut j = j.expect("chart jacobian requested");
    let (q, transport) = map.target().normalize_transport(&q, piece, false)?;
    transport_rows(&mut j, &transport);
    Ok((q, j))
}

/// Largest relative gap between `Dmap · v` and a central difference of the
/// point map, over the given `(point, vector)` pairs.
pub fn derivative_defect(map: &dyn ChartMap, pairs: &[(MTPoint, Tangent)], h: f64) -> Result<f64> {
    let tgt = map.target();
    let mut worst = 0.0f64;
    for (p, v) in pairs {
        let (base, j) = lift_eval(map, p, Piece::Upper)?;
        let exact = j * v.to_vector();
        let moved = |s: f64| -> Result<MTPoint> {
            let q = MTPoint::new(p.segment, p.t + s * v.a, &p.x + &v.u * s);
            let (q, _) = lift_eval(map, &q, Piece::Upper)?;
            Ok(tgt.rechart_near(&q, &base)?.0)
        };
        let (plus, minus) = (moved(h)?, moved(-h)?);
        let mut fd = Vector::zeros(v.dim() + 1);
        fd[0] = (plus.t - minus.t) / (2.0 * h);
        fd.rows_mut(1, v.dim()).copy_from(&((plus.x - minus.x) / (2.0 * h)));
        worst = worst.max((&fd - &exact).norm() / exact.norm().max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

fn integral(value: f64) -> Result<i64> {
    let r = value.round();
    if (value - r).abs() > INTEGRALITY_TOL {
        return Err(Error::NonIntegral { value });
    }
    Ok(r as i64)
}

/// Linear part of the induced map on the lattice of deck translations:
/// the base winding number in the corner and the fiber degree matrix below.
pub fn pi1_linear_part(map: &dyn ChartMap) -> Result<DMatrix<i64>> {
    let src = map.source();
    let tgt = map.target();
    let n = src.dim();
    let (l_src, l_tgt) = (src.circumference(), tgt.circumference());

    let steps = 64 * (map.t_scale().abs() * l_src / l_tgt).ceil().max(1.0) as usize;
    let anchor = Vector::from_element(n, 0.5);
    let global = |t: f64| -> Result<f64> {
        let (seg, t) = src.locate(t, Piece::Upper);
        Ok(map_point(map, &MTPoint::new(seg, t, anchor.clone()), Piece::Upper, true)?.t)
    };
    let mut prev = global(0.0)?;
    let mut winding = 0.0;
    for j in 1..=steps {
        let cur = global(j as f64 * l_src / steps as f64)?;
        let d = cur - prev;
        winding += d - l_tgt * (d / l_tgt).round();
        prev = cur;
    }

    let mut out = DMatrix::<i64>::zeros(n + 1, n + 1);
    out[(0, 0)] = integral(winding / l_tgt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut first: Option<DMatrix<i64>> = None;
    for _ in 0..3 {
        let (seg, t) = src.locate(rng.gen_range(0.0..l_src), Piece::Upper);
        let x = Vector::from_iterator(n, (0..n).map(|_| rng.gen::<f64>()));
        let (base, _) = lift_eval(map, &MTPoint::new(seg, t, x.clone()), Piece::Upper)?;
        let mut fiber = DMatrix::<i64>::zeros(n, n);
        for c in 0..n {
            let mut xs = x.clone();
            xs[c] += 1.0;
            let (img, _) = lift_eval(map, &MTPoint::new(seg, t, xs), Piece::Upper)?;
            for r in 0..n {
                fiber[(r, c)] = integral(img.x[r] - base.x[r])?;
            }
        }
        match &first {
            None => first = Some(fiber),
            Some(f) if *f != fiber => {
                return Err(Error::UnsupportedForm(
                    "fiber degree varies over the base".into(),
                ))
            }
            _ => {}
        }
    }
    out.view_mut((1, 1), (n, n)).copy_from(&first.expect("sampled"));
    Ok(out)
}

fn lex(a: &MTPoint, b: &MTPoint) -> std::cmp::Ordering {
    a.t.total_cmp(&b.t)
        .then_with(|| a.x.iter().zip(b.x.iter()).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
}

/// All preimages of `q` under a covering with diagonal linear part, sorted
/// lexicographically by `(t, x)`.
pub fn preimages(map: &dyn ChartMap, q: &MTPoint, tol: f64) -> Result<Vec<MTPoint>> {
    let linear = pi1_linear_part(map)?;
    let n = map.source().dim();
    for r in 0..=n {
        for c in 0..=n {
            if r != c && linear[(r, c)] != 0 {
                return Err(Error::UnsupportedForm(
                    "preimage enumeration needs a diagonal linear part".into(),
                ));
            }
        }
    }
    let diag: Vec<i64> = (0..=n).map(|i| linear[(i, i)].abs()).collect();
    if diag.iter().any(|&d| d == 0) {
        return Err(Error::UnsupportedForm("degenerate linear part".into()));
    }
    let q = map.target().normalize(q, Piece::Upper, true)?;
    let l_tgt = map.target().circumference();
    let alpha = map.t_scale();

    let mut seeds = Vec::new();
    for r in 0..diag[0] {
        let t = (q.t + r as f64 * l_tgt) / alpha;
        let total: i64 = diag[1..].iter().product();
        for idx in 0..total {
            let mut rem = idx;
            let mut coset = Vector::zeros(n);
            for (i, c) in coset.iter_mut().enumerate() {
                let d = diag[i + 1];
                *c = (rem % d) as f64;
                rem /= d;
            }
            seeds.push((t, coset));
        }
    }
    let expected = seeds.len();

    let solved: Vec<Option<MTPoint>> = seeds
        .par_iter()
        .map(|(t, coset)| refine(map, &q, *t, coset, &diag[1..], tol).ok())
        .collect();
    let mut found: Vec<MTPoint> = solved.into_iter().flatten().collect();
    if found.len() != expected {
        return Err(Error::MissingPreimage {
            expected,
            found: found.len(),
        });
    }
    found.sort_by(lex);
    if let Some(separation) = min_separation(&found, 1e-8) {
        return Err(Error::DuplicatePreimage { separation });
    }
    Ok(found)
}

fn refine(
    map: &dyn ChartMap,
    q: &MTPoint,
    t: f64,
    coset: &Vector,
    fiber_degree: &[i64],
    tol: f64,
) -> Result<MTPoint> {
    let src = map.source();
    let n = src.dim();
    let (seg, t) = src.locate(t, Piece::Upper);
    let goal = &q.x + coset;
    let mut x = Vector::from_iterator(n, (0..n).map(|i| goal[i] / fiber_degree[i] as f64));
    let scale = 1.0 + goal.amax();
    let mut residual = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITER {
        let p = MTPoint::new(seg, t, x.clone());
        let (img, j) = lift_eval(map, &p, Piece::Upper)?;
        let (img, transport) = map.target().rechart_near(&img, q)?;
        if img.segment != q.segment {
            return Err(Error::MissingPreimage { expected: 1, found: 0 });
        }
        let r = &img.x - &goal;
        residual = r.amax();
        let jf = transport * j.view((1, 1), (n, n));
        let converged = residual <= tol * scale;
        if residual > 0.0 {
            x -= checked_solve(&jf, &r)?;
        }
        if converged {
            return Ok(MTPoint::new(seg, t, reduce_mod_one(&x)));
        }
    }
    Err(Error::NoConvergence {
        iterations: NEWTON_MAX_ITER,
        residual,
    })
}

/// Smallest distance below `threshold` between two points of a sorted list,
/// if any.
fn min_separation(points: &[MTPoint], threshold: f64) -> Option<f64> {
    let dist = |a: &MTPoint, b: &MTPoint| {
        if a.segment != b.segment {
            return f64::INFINITY;
        }
        ((a.t - b.t).powi(2) + torus_distance(&a.x, &b.x).powi(2)).sqrt()
    };
    let mut worst: Option<f64> = None;
    let mut note = |d: f64| {
        if d < threshold {
            worst = Some(worst.map_or(d, |w: f64| w.min(d)));
        }
    };
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            if b.t - a.t > threshold || b.x[0] - a.x[0] > threshold {
                if b.t - a.t > threshold {
                    break;
                }
                continue;
            }
            note(dist(a, b));
        }
    }
    // pairs straddling x_0 = 0 ~ 1
    let low: Vec<&MTPoint> = points.iter().filter(|p| p.x[0] < threshold).collect();
    let high: Vec<&MTPoint> = points.iter().filter(|p| p.x[0] > 1.0 - threshold).collect();
    for a in &low {
        for b in &high {
            note(dist(a, b));
        }
    }
    worst
}

/// The full construction for one `(h, k, m)`: spaces, stages and composites.
#[derive(Clone)]
pub struct Construction {
    h: TorusMap,
    tower: LiftTower,
    psi: Isotopy,
    m: usize,
    mh: MultiMappingTorus,
    fh: Composite,
    pk: Composite,
    qm: Composite,
    f: Composite,
}

/// Endpoint tolerance for user-supplied isotopies.
const ENDPOINT_TOL: f64 = 1e-10;

impl Construction {
    pub fn new(h: &TorusMap, phi1: &Isotopy, psi: &Isotopy, k: usize, m: usize, base: i64) -> Result<Self> {
        if k == 0 || m == 0 {
            return Err(Error::Config("k and m must be at least 1".into()));
        }
        let n = h.dim();
        let id = TorusMap::identity(n);
        let h_inv = h.inverse()?;
        let h_inv2 = TorusMap::compose(&h_inv, &h_inv)?;
        for (what, got, want) in [("psi(0)", psi.slice(0.0)?, &id), ("psi(1)", psi.slice(1.0)?, &h_inv2)] {
            let d = max_discrepancy(&got, want)?;
            if d > ENDPOINT_TOL {
                return Err(Error::EndpointMismatch {
                    what: what.into(),
                    discrepancy: d,
                });
            }
        }
        let tower = build_tower(h, phi1, k, base).map_err(|e| e.in_stage("lifting"))?;

        let mh = MultiMappingTorus::mapping_torus(h)?;
        let nk = MultiMappingTorus::multiple_mapping_torus(&tower)?;
        let mhk = MultiMappingTorus::mapping_torus(tower.h(k))?;
        let long = MultiMappingTorus::long_mapping_torus(h, m)?;
        let alternating = MultiMappingTorus::alternating_torus(h, m)?;
        let uniform = MultiMappingTorus::uniform_torus(h, m)?;

        let stage_h: Arc<dyn ChartMap> = Arc::new(StageH::new(&mh, &nk, &tower));
        let stage_f: Arc<dyn ChartMap> = Arc::new(StageF::new(&nk, &mhk, &tower)?);
        let stage_p: Arc<dyn ChartMap> = Arc::new(StageP::new(&mhk, &mh, base.pow(k as u32)));
        let stage_r: Arc<dyn ChartMap> = Arc::new(StageR::new(&mh, &long));
        let stage_s: Arc<dyn ChartMap> = Arc::new(StageS::new(&long, &alternating, psi));
        let stage_t: Arc<dyn ChartMap> = Arc::new(StageT::new(&alternating, &uniform, h));
        let stage_q: Arc<dyn ChartMap> = Arc::new(StageQ::new(&uniform, &mh));

        let fh = Composite::new("F_k∘H_k", vec![stage_h.clone(), stage_f.clone()])?;
        let pk = Composite::new("p_k", vec![stage_h.clone(), stage_f.clone(), stage_p.clone()])?;
        let q_stages = vec![stage_r, stage_s, stage_t, stage_q];
        let qm = Composite::new("q_m", q_stages.clone())?;
        let mut all = vec![stage_h, stage_f, stage_p];
        all.extend(q_stages);
        let f = Composite::new("f", all)?;
        Ok(Self {
            h: h.clone(),
            tower,
            psi: psi.clone(),
            m,
            mh,
            fh,
            pk,
            qm,
            f,
        })
    }

    /// Builds `h = id + v` with the constructed isotopies `φ₁` and `ψ`.
    pub fn from_field(field: &TrigDisplacementField, k: usize, m: usize, base: i64) -> Result<Self> {
        let h = TorusMap::displacement(field.clone())?;
        let phi1 = first_isotopy(&h, base)?;
        let psi = inverse_square_isotopy(field)?;
        Self::new(&h, &phi1, &psi, k, m, base)
    }

    pub fn h(&self) -> &TorusMap {
        &self.h
    }
    pub fn tower(&self) -> &LiftTower {
        &self.tower
    }
    pub fn psi(&self) -> &Isotopy {
        &self.psi
    }
    pub fn k(&self) -> usize {
        self.tower.k()
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn base(&self) -> i64 {
        self.tower.base()
    }
    pub fn dim(&self) -> usize {
        self.h.dim()
    }
    pub fn space(&self) -> &MultiMappingTorus {
        &self.mh
    }
    /// `F_k ∘ H_k : M_h → M_{h_k}`.
    pub fn fh(&self) -> &Composite {
        &self.fh
    }
    pub fn pk(&self) -> &Composite {
        &self.pk
    }
    pub fn qm(&self) -> &Composite {
        &self.qm
    }
    pub fn f(&self) -> &Composite {
        &self.f
    }

    /// Every stage followed by the three composites.
    pub fn all_maps(&self) -> Vec<Arc<dyn ChartMap>> {
        let mut out: Vec<Arc<dyn ChartMap>> = self.f.stages().to_vec();
        out.push(Arc::new(self.pk.clone()));
        out.push(Arc::new(self.qm.clone()));
        out.push(Arc::new(self.f.clone()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifolds::{check_seams, differential, pushforward, IdentityMap};

    const EPS: f64 = 0.1;

    fn v2(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    fn shear_field(eps: f64) -> TrigDisplacementField {
        TrigDisplacementField::shear(2, eps, 0, 1)
    }

    fn build(eps: f64, k: usize, m: usize) -> Construction {
        Construction::from_field(&shear_field(eps), k, m, 3).unwrap()
    }

    fn stage(c: &Construction, name: &str) -> Arc<dyn ChartMap> {
        c.f().stages().iter().find(|s| s.name() == name).unwrap().clone()
    }

    fn eval(map: &dyn ChartMap, p: &MTPoint) -> MTPoint {
        map_point(map, p, Piece::Upper, true).unwrap()
    }

    #[test]
    fn p_stage_example() {
        let c = build(EPS, 1, 1);
        let q = eval(&*stage(&c, "P_k"), &MTPoint::new(0, 0.5, v2(0.2, 0.7)));
        assert_eq!(q.t, 0.5);
        assert!((&q.x - v2(0.6, 0.1)).amax() < 1e-14);
    }

    #[test]
    fn h_stage_example() {
        let c = build(EPS, 1, 1);
        let q = eval(&*stage(&c, "H_k"), &MTPoint::new(0, 0.25, v2(0.25, 0.25)));
        assert_eq!((q.segment, q.t), (0, 0.25));
        assert!((&q.x - v2(0.25 + 0.2 / 3.0, 0.25)).amax() < 1e-12, "{:?}", q.x);
    }

    #[test]
    fn f_stage_example() {
        let c = build(EPS, 1, 1);
        let q = eval(&*stage(&c, "F_k"), &MTPoint::new(1, 0.75, v2(0.25, 0.25)));
        assert_eq!(q.t, 0.75);
        assert!((&q.x - v2(0.25 + 0.4 / 3.0, 0.25)).amax() < 1e-12, "{:?}", q.x);
    }

    #[test]
    fn q_stage_examples() {
        let c = build(EPS, 1, 1);
        let x = v2(0.3, 0.6);
        let r = eval(&*stage(&c, "R_m"), &MTPoint::new(0, 0.4, x.clone()));
        assert!((r.t - 1.2).abs() < 1e-15 && r.x == x);

        let s = eval(&*stage(&c, "S_m"), &MTPoint::new(0, 1.5, v2(0.25, 0.25)));
        assert_eq!((s.segment, s.t), (1, 1.5));
        assert!((&s.x - v2(0.15, 0.25)).amax() < 1e-12, "{:?}", s.x);

        let q = eval(&*stage(&c, "Q_m"), &MTPoint::new(1, 1.2, x.clone()));
        assert!((q.t - 0.2).abs() < 1e-15 && q.x == x);
    }

    #[test]
    fn linear_model_is_exact() {
        let c = build(0.0, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..50 {
            let t: f64 = rng.gen();
            let x = v2(rng.gen(), rng.gen());
            let q = eval(c.f(), &MTPoint::new(0, t, x.clone()));
            let expect_t = (3.0 * t).rem_euclid(1.0);
            assert!((q.t - expect_t).abs() < 1e-14);
            assert!(torus_distance(&q.x, &(&x * 3.0)) < 1e-14);
            let (_, j) = differential(c.f(), &MTPoint::new(0, t, x), Piece::Upper).unwrap();
            assert_eq!(j, Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 3.0, 3.0])));
        }
    }

    #[test]
    fn t_behaviour_is_exact() {
        let c = build(EPS, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let t: f64 = rng.gen();
            let p = MTPoint::new(0, t, v2(rng.gen(), rng.gen()));
            assert_eq!(eval(c.pk(), &p).t, t);
            let want = (5.0 * t).rem_euclid(1.0);
            assert!((eval(c.qm(), &p).t - want).abs() < 1e-14);
            assert!((eval(c.f(), &p).t - want).abs() < 1e-14);
        }
        let p = MTPoint::new(0, 0.2, v2(0.1, 0.9));
        for eps in [0.0, EPS] {
            let q = eval(build(eps, 1, 1).f(), &p);
            assert!((q.t - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn seams_are_continuous() {
        for (k, m) in [(1, 1), (2, 1), (3, 2)] {
            let c = build(EPS, k, m);
            for map in c.all_maps() {
                let d = check_seams(&*map, 20, 7).unwrap();
                assert!(d < 1e-9, "{} k={k} m={m}: {d}", map.name());
            }
        }
    }

    #[test]
    fn identity_check_is_zero() {
        let c = build(EPS, 1, 1);
        let id = IdentityMap::new(c.space().clone());
        assert!(check_seams(&id, 50, 2).unwrap() < 1e-12);
    }

    #[test]
    fn corrupted_gluing_is_detected() {
        let c = build(EPS, 2, 1);
        let tower = c.tower();
        let nk = MultiMappingTorus::multiple_mapping_torus(tower).unwrap();
        // drop the h_{k-1}⁻¹ factor from the first seam
        let broken = nk.with_seam(0, tower.h(2).clone()).unwrap();
        let mh = c.space().clone();
        let map = StageH::new(&mh, &broken, tower);
        let d = check_seams(&map, 50, 3).unwrap();
        assert!(d > EPS / 10.0 && d < 2.0 * EPS, "{d}");
    }

    #[test]
    fn degree_matrices() {
        let c = build(EPS, 1, 1);
        let id = IdentityMap::new(c.space().clone());
        assert_eq!(pi1_linear_part(&id).unwrap(), DMatrix::<i64>::identity(3, 3));
        assert_eq!(
            pi1_linear_part(c.f()).unwrap(),
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3i64, 3, 3]))
        );
        let c = build(EPS, 2, 1);
        assert_eq!(
            pi1_linear_part(c.pk()).unwrap(),
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1i64, 9, 9]))
        );
    }

    #[test]
    fn fiber_degree_law() {
        let c = build(EPS, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..50 {
            let p = MTPoint::new(0, rng.gen(), v2(rng.gen(), rng.gen()));
            let shift = v2(rng.gen_range(-3..=3) as f64, rng.gen_range(-3..=3) as f64);
            let mut ps = p.clone();
            ps.x += &shift;
            let (a, _) = lift_eval(c.pk(), &p, Piece::Upper).unwrap();
            let (b, _) = lift_eval(c.pk(), &ps, Piece::Upper).unwrap();
            assert!((b.x - a.x - shift * 9.0).amax() < 1e-11);
        }
    }

    #[test]
    fn linear_model_preimages() {
        let c = build(0.0, 1, 1);
        let pre = preimages(c.f(), &MTPoint::new(0, 0.0, v2(0.0, 0.0)), PREIMAGE_TOL).unwrap();
        assert_eq!(pre.len(), 27);
        for p in &pre {
            assert!(((3.0 * p.t) - (3.0 * p.t).round()).abs() < 1e-12);
            for &xi in p.x.iter() {
                assert!((3.0 * xi - (3.0 * xi).round()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shear_preimages() {
        let c = build(EPS, 1, 1);
        let q = MTPoint::new(0, 0.37, v2(0.41, 0.83));
        let pre = preimages(c.f(), &q, PREIMAGE_TOL).unwrap();
        assert_eq!(pre.len(), 27);
        for (i, a) in pre.iter().enumerate() {
            let img = eval(c.f(), a);
            assert!(c.space().distance(&img, &q).unwrap() < 1e-10);
            for b in &pre[i + 1..] {
                assert!(c.space().distance(a, b).unwrap() > 0.01);
            }
        }
        let pk = preimages(c.pk(), &q, PREIMAGE_TOL).unwrap();
        assert_eq!(pk.len(), 9);
        assert!(pk.iter().all(|p| p.t == q.t));
    }

    #[test]
    fn differentials_match_finite_differences() {
        let field = TrigDisplacementField::new(
            2,
            vec![
                crate::fields::TrigTerm {
                    coeff: vec![0.05, 0.0],
                    freq: vec![0, 1],
                    phase: crate::fields::Phase::Sin,
                },
                crate::fields::TrigTerm {
                    coeff: vec![0.02, 0.01],
                    freq: vec![1, 1],
                    phase: crate::fields::Phase::Cos,
                },
            ],
        )
        .unwrap();
        let c = Construction::from_field(&field, 2, 1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let breaks = c.f().breakpoints();
        let mut tested = 0;
        while tested < 100 {
            let t: f64 = rng.gen();
            if breaks.iter().chain([0.0, 1.0].iter()).any(|b| (b - t).abs() < 1e-3) {
                continue;
            }
            let p = MTPoint::new(0, t, v2(rng.gen(), rng.gen()));
            let v = Tangent::new(rng.gen_range(-1.0..1.0), v2(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            for map in [c.pk() as &dyn ChartMap, c.qm(), c.f()] {
                let rel = derivative_defect(map, &[(p.clone(), v.clone())], 1e-6).unwrap();
                assert!(rel < 1e-5, "{} at t={t}: {rel}", map.name());
            }
            tested += 1;
        }
    }

    #[test]
    fn structural_identities() {
        let c = build(EPS, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..100 {
            let p = MTPoint::new(0, rng.gen(), v2(rng.gen(), rng.gen()));
            let u = v2(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (_, img) = pushforward(c.f(), &p, &Tangent::vertical(u.clone())).unwrap();
            assert_eq!(img.a, 0.0);
            let a = rng.gen_range(-1.0..1.0);
            let (_, img) = pushforward(c.f(), &p, &Tangent::horizontal(a, 2)).unwrap();
            assert!((img.a - 3.0 * a).abs() < 1e-12 * a.abs().max(1.0));

            let p_stage = stage(&c, "P_k");
            let (_, img) = pushforward(&*p_stage, &p, &Tangent::vertical(u.clone())).unwrap();
            assert!((img.u.norm() - 9.0 * u.norm()).abs() < 1e-12 * u.norm());
        }
    }

    #[test]
    fn seam_differentials_agree_between_charts() {
        let c = build(EPS, 2, 1);
        let mh = c.space();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..20 {
            let x = v2(rng.gen(), rng.gen());
            let u = v2(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            // (1, x) in the lower chart is (0, h(x)) in the upper one
            let left = MTPoint::new(0, 1.0, x.clone());
            let (hx, dh) = mh.wrap().apply_with_jacobian(&x).unwrap();
            let right = MTPoint::new(0, 0.0, hx);
            for map in [c.pk() as &dyn ChartMap, c.f()] {
                let (ql, jl) = differential(map, &left, Piece::Lower).unwrap();
                let (qr, jr) = differential(map, &right, Piece::Upper).unwrap();
                let (ql, transport) = map.target().rechart_near(&ql, &qr).unwrap();
                assert!(map.target().distance(&ql, &qr).unwrap() < 1e-10);
                let lv = transport * (jl.view((1, 1), (2, 2)) * &u);
                let rv = jr.view((1, 1), (2, 2)) * (&dh * &u);
                assert!((lv - rv).amax() < 1e-9, "{}", map.name());
            }
        }
    }
}
