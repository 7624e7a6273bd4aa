//! Chart-level mapping tori and multiple mapping tori.
//!
//! A [`MultiMappingTorus`] is a list of blocks `[a_i, b_i] × T^n` glued by
//! `(b_i, x) ~ (a_{i+1}, g_i(x))`, closed up by the wrap `(b_last, x) ~ (a_0, w(x))`.
//! Segment coordinates are global: `a_0 = 0` and the circumference is `b_last`.
//! Points are stored with lift fiber coordinates; all gluings have identity
//! degree matrix so reducing `x mod Z^n` commutes with crossing seams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lifting::LiftTower;
use crate::linalg::{reduce_mod_one, torus_distance, Matrix, Vector};
use crate::torus_maps::TorusMap;

/// Which one-sided chart a point on a seam or breakpoint belongs to.
///
/// `Upper` uses half-open segments `[a, b)` (a seam point is the left end of
/// the next block; this is the canonical choice). `Lower` uses `(a, b]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Piece {
    Upper,
    Lower,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MTPoint {
    pub segment: usize,
    pub t: f64,
    pub x: Vector,
}

impl MTPoint {
    pub fn new(segment: usize, t: f64, x: Vector) -> Self {
        Self { segment, t, x }
    }
}

/// Tangent vector `a ∂_t + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tangent {
    pub a: f64,
    pub u: Vector,
}

impl Tangent {
    pub fn new(a: f64, u: Vector) -> Self {
        Self { a, u }
    }

    pub fn vertical(u: Vector) -> Self {
        Self { a: 0.0, u }
    }

    pub fn horizontal(a: f64, dim: usize) -> Self {
        Self {
            a,
            u: Vector::zeros(dim),
        }
    }

    pub fn to_vector(&self) -> Vector {
        let mut v = Vector::zeros(self.u.len() + 1);
        v[0] = self.a;
        v.rows_mut(1, self.u.len()).copy_from(&self.u);
        v
    }

    pub fn from_vector(v: &Vector) -> Self {
        Self {
            a: v[0],
            u: v.rows(1, v.len() - 1).into_owned(),
        }
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }
}

/// `v = v^∥ + v^⊥` with `v^∥ = (0, u)` and `v^⊥ = (a, 0)`.
pub fn split(v: &Tangent) -> (Tangent, Tangent) {
    (
        Tangent::vertical(v.u.clone()),
        Tangent::horizontal(v.a, v.dim()),
    )
}

#[derive(Clone, Debug)]
struct Gluing {
    map: TorusMap,
    inverse: TorusMap,
}

impl Gluing {
    fn new(map: TorusMap) -> Result<Self> {
        let inverse = map.inverse()?;
        Ok(Self { map, inverse })
    }
}

#[derive(Clone, Debug)]
pub struct MultiMappingTorus {
    name: String,
    dim: usize,
    segments: Vec<(f64, f64)>,
    seams: Vec<Gluing>,
    wrap: Gluing,
}

const MAX_CROSSINGS: usize = 64;

impl MultiMappingTorus {
    pub fn new(
        name: impl Into<String>,
        segments: Vec<(f64, f64)>,
        seams: Vec<TorusMap>,
        wrap: TorusMap,
    ) -> Result<Self> {
        let name = name.into();
        let dim = wrap.dim();
        if segments.is_empty() || seams.len() + 1 != segments.len() {
            return Err(Error::Config(format!(
                "{name}: {} segments need {} seams, got {}",
                segments.len(),
                segments.len().saturating_sub(1),
                seams.len()
            )));
        }
        if segments[0].0 != 0.0 {
            return Err(Error::Config(format!("{name}: first segment must start at 0")));
        }
        for (i, &(a, b)) in segments.iter().enumerate() {
            if !(b > a) {
                return Err(Error::Config(format!("{name}: empty segment {i}")));
            }
            if i + 1 < segments.len() && segments[i + 1].0 != b {
                return Err(Error::Config(format!("{name}: gap after segment {i}")));
            }
        }
        let identity = nalgebra::DMatrix::<i64>::identity(dim, dim);
        for g in seams.iter().chain(std::iter::once(&wrap)) {
            if g.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: g.dim(),
                });
            }
            if g.degree_matrix() != identity {
                return Err(Error::UnsupportedForm(format!(
                    "{name}: gluing maps must have identity degree matrix"
                )));
            }
        }
        Ok(Self {
            name,
            dim,
            segments,
            seams: seams.into_iter().map(Gluing::new).collect::<Result<_>>()?,
            wrap: Gluing::new(wrap)?,
        })
    }

    /// `M_h = [0,1] × T^n / (1,x) ~ (0,h(x))`.
    pub fn mapping_torus(h: &TorusMap) -> Result<Self> {
        Self::new("M_h", vec![(0.0, 1.0)], vec![], h.clone())
    }

    /// `N_k`: blocks `[i/(k+1), (i+1)/(k+1)]`, `i = 0…k`, glued by
    /// `h_{k-i-1}⁻¹ ∘ h_{k-i}` after block `i`, wrapped by `h`.
    pub fn multiple_mapping_torus(tower: &LiftTower) -> Result<Self> {
        let k = tower.k();
        let segments = (0..=k)
            .map(|i| (nk_bound(i, k), nk_bound(i + 1, k)))
            .collect();
        let seams = (0..k)
            .map(|i| TorusMap::compose(&tower.h(k - i - 1).inverse()?, tower.h(k - i)))
            .collect::<Result<_>>()?;
        Self::new("N_k", segments, seams, tower.h(0).clone())
    }

    /// `[0, 2m+1] × T^n / (2m+1, x) ~ (0, h(x))`.
    pub fn long_mapping_torus(h: &TorusMap, m: usize) -> Result<Self> {
        Self::new("M_bar", vec![(0.0, (2 * m + 1) as f64)], vec![], h.clone())
    }

    /// Unit blocks glued by the identity at odd integers and by `h²` at even ones.
    pub fn alternating_torus(h: &TorusMap, m: usize) -> Result<Self> {
        let h2 = TorusMap::compose(h, h)?;
        let id = TorusMap::identity(h.dim());
        let seams = (1..=2 * m)
            .map(|i| if i % 2 == 1 { id.clone() } else { h2.clone() })
            .collect();
        Self::new("M_prime", unit_blocks(m), seams, h.clone())
    }

    /// Unit blocks all glued by `h`.
    pub fn uniform_torus(h: &TorusMap, m: usize) -> Result<Self> {
        let seams = (1..=2 * m).map(|_| h.clone()).collect();
        Self::new("M_tilde", unit_blocks(m), seams, h.clone())
    }

    /// Copy with one seam gluing replaced.
    pub fn with_seam(&self, index: usize, map: TorusMap) -> Result<Self> {
        let mut out = self.clone();
        out.seams[index] = Gluing::new(map)?;
        Ok(out)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segments(&self) -> &[(f64, f64)] {
        &self.segments
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn circumference(&self) -> f64 {
        self.segments[self.segments.len() - 1].1
    }

    /// Gluing applied when leaving `segment` through its right end (the wrap
    /// for the last segment).
    pub fn exit_gluing(&self, segment: usize) -> &TorusMap {
        match self.seams.get(segment) {
            Some(g) => &g.map,
            None => &self.wrap.map,
        }
    }

    pub fn wrap(&self) -> &TorusMap {
        &self.wrap.map
    }

    /// Segment and chart time of a global coordinate.
    pub fn locate(&self, t: f64, piece: Piece) -> (usize, f64) {
        let len = self.circumference();
        let mut t = t.rem_euclid(len);
        if piece == Piece::Lower && t == 0.0 {
            t = len;
        }
        let seg = self
            .segments
            .iter()
            .position(|&(a, b)| match piece {
                Piece::Upper => t >= a && t < b,
                Piece::Lower => t > a && t <= b,
            })
            .unwrap_or(self.segments.len() - 1);
        (seg, t)
    }

    /// Segment whose closed interval holds `t` on the given side, without
    /// reducing `t` modulo the circumference.
    pub fn segment_at(&self, t: f64, piece: Piece) -> usize {
        let last = self.segments.len() - 1;
        let idx = match piece {
            Piece::Upper => self.segments.iter().position(|&(_, b)| t < b),
            Piece::Lower => self.segments.iter().position(|&(_, b)| t <= b),
        };
        idx.unwrap_or(last)
    }

    fn forward(&self, p: &MTPoint) -> Result<(MTPoint, Matrix)> {
        let last = self.segments.len() - 1;
        let (g, seg, shift) = if p.segment < last {
            (&self.seams[p.segment].map, p.segment + 1, 0.0)
        } else {
            (&self.wrap.map, 0, self.circumference())
        };
        let (x, j) = g.apply_with_jacobian(&p.x)?;
        Ok((MTPoint::new(seg, p.t - shift, x), j))
    }

    fn backward(&self, p: &MTPoint) -> Result<(MTPoint, Matrix)> {
        let last = self.segments.len() - 1;
        let (g, seg, shift) = if p.segment > 0 {
            (&self.seams[p.segment - 1].inverse, p.segment - 1, 0.0)
        } else {
            (&self.wrap.inverse, last, self.circumference())
        };
        let (x, j) = g.apply_with_jacobian(&p.x)?;
        Ok((MTPoint::new(seg, p.t + shift, x), j))
    }

    /// Canonical representative; crossing a seam applies its gluing.
    pub fn normalize(&self, p: &MTPoint, piece: Piece, reduce: bool) -> Result<MTPoint> {
        self.normalize_transport(p, piece, reduce).map(|(q, _)| q)
    }

    /// As [`normalize`](Self::normalize), also returning the accumulated
    /// fiber Jacobian of the gluings crossed (tangents map `u ↦ J u`).
    pub fn normalize_transport(
        &self,
        p: &MTPoint,
        piece: Piece,
        reduce: bool,
    ) -> Result<(MTPoint, Matrix)> {
        let mut q = p.clone();
        let mut jac = Matrix::identity(self.dim, self.dim);
        for _ in 0..MAX_CROSSINGS {
            let (a, b) = self.segments[q.segment];
            let step = if q.t > b || (piece == Piece::Upper && q.t >= b) {
                Some(self.forward(&q)?)
            } else if q.t < a || (piece == Piece::Lower && q.t <= a) {
                Some(self.backward(&q)?)
            } else {
                None
            };
            match step {
                Some((next, j)) => {
                    q = next;
                    jac = j * jac;
                }
                None => {
                    if reduce {
                        q.x = reduce_mod_one(&q.x);
                    }
                    return Ok((q, jac));
                }
            }
        }
        Err(Error::UnsupportedForm(format!(
            "{}: t = {} is too far outside the chart to normalize",
            self.name, p.t
        )))
    }

    /// Expresses `p` in the (extended) chart of `reference`'s segment, choosing
    /// the copy closest in `t`. Only adjacent charts are reachable.
    pub fn rechart_near(&self, p: &MTPoint, reference: &MTPoint) -> Result<(MTPoint, Matrix)> {
        let mut best: Option<(MTPoint, Matrix)> = None;
        let mut consider = |cand: (MTPoint, Matrix)| {
            if cand.0.segment != reference.segment {
                return;
            }
            let better = match &best {
                None => true,
                Some((b, _)) => (cand.0.t - reference.t).abs() < (b.t - reference.t).abs(),
            };
            if better {
                best = Some(cand);
            }
        };
        consider((p.clone(), Matrix::identity(self.dim, self.dim)));
        consider(self.forward(p)?);
        consider(self.backward(p)?);
        Ok(best.unwrap_or_else(|| (p.clone(), Matrix::identity(self.dim, self.dim))))
    }

    /// Chart distance between two points, after moving `p` next to `q`.
    pub fn distance(&self, p: &MTPoint, q: &MTPoint) -> Result<f64> {
        let (p, _) = self.rechart_near(p, q)?;
        if p.segment != q.segment {
            return Ok(f64::INFINITY);
        }
        Ok(((p.t - q.t).powi(2) + torus_distance(&p.x, &q.x).powi(2)).sqrt())
    }
}

pub(crate) fn nk_bound(i: usize, k: usize) -> f64 {
    i as f64 / (k + 1) as f64
}

fn unit_blocks(m: usize) -> Vec<(f64, f64)> {
    (0..=2 * m).map(|j| (j as f64, (j + 1) as f64)).collect()
}

/// The metric `G = g_t + dt²` on `M_h` with `g_t = (1−t) g_0 + t h*g_0`.
#[derive(Clone, Debug)]
pub struct MetricG {
    h: TorusMap,
}

impl MetricG {
    pub fn new(h: &TorusMap) -> Self {
        Self { h: h.clone() }
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    /// `M_t(x) = (1−t) I + t Dh(x)ᵀ Dh(x)`, for `t ∈ [0, 1]` in the `M_h` chart.
    pub fn fiber_gram(&self, t: f64, x: &Vector) -> Result<Matrix> {
        let dh = self.h.jacobian(x)?;
        let n = self.dim();
        Ok(Matrix::identity(n, n) * (1.0 - t) + dh.transpose() * dh * t)
    }

    /// `diag(1, M_t(x))`.
    pub fn gram(&self, p: &MTPoint) -> Result<Matrix> {
        let n = self.dim();
        let mut g = Matrix::zeros(n + 1, n + 1);
        g[(0, 0)] = 1.0;
        g.view_mut((1, 1), (n, n))
            .copy_from(&self.fiber_gram(p.t, &p.x)?);
        Ok(g)
    }

    pub fn inner(&self, p: &MTPoint, v: &Tangent, w: &Tangent) -> Result<f64> {
        let m = self.fiber_gram(p.t, &p.x)?;
        Ok(v.a * w.a + v.u.dot(&(m * &w.u)))
    }

    pub fn norm(&self, p: &MTPoint, v: &Tangent) -> Result<f64> {
        Ok(self.inner(p, v, v)?.max(0.0).sqrt())
    }
}

/// Flat fiber norm `‖u‖_0` of a vertical vector.
pub fn norm_0_vertical(v: &Tangent) -> Result<f64> {
    if v.a != 0.0 {
        return Err(Error::NotVertical(v.a));
    }
    Ok(v.u.norm())
}

/// A map between (multiple) mapping tori given by a chart formula per piece.
pub trait ChartMap: Send + Sync {
    fn name(&self) -> String;
    fn source(&self) -> &MultiMappingTorus;
    fn target(&self) -> &MultiMappingTorus;

    /// Chart image of a source point lying in the closed segment `p.segment`
    /// (not yet normalized in the target) with the chart Jacobian
    /// `∂(t', x')/∂(t, x)` when requested. `piece` picks the formula at
    /// internal breakpoints and the normalization side inside composites.
    fn chart(&self, p: &MTPoint, piece: Piece, jacobian: bool) -> Result<(MTPoint, Option<Matrix>)>;

    /// Global source times where the chart formula switches pieces, excluding
    /// source seams.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    /// The map on base circles is `t ↦ t_scale · t (mod target circumference)`.
    fn t_scale(&self) -> f64 {
        1.0
    }
}

/// Normalized image of a source point.
pub fn map_point(map: &dyn ChartMap, p: &MTPoint, piece: Piece, reduce: bool) -> Result<MTPoint> {
    let (q, _) = map.chart(p, piece, false)?;
    map.target().normalize(&q, piece, reduce)
}

/// Normalized image and full `(n+1)×(n+1)` differential in the normalized chart.
pub fn differential(map: &dyn ChartMap, p: &MTPoint, piece: Piece) -> Result<(MTPoint, Matrix)> {
    let (q, j) = map.chart(p, piece, true)?;
    let mut j = j.expect("chart jacobian requested");
    let (q, transport) = map.target().normalize_transport(&q, piece, true)?;
    transport_rows(&mut j, &transport);
    Ok((q, j))
}

/// Applies a fiber transport to the fiber rows of a differential.
pub(crate) fn transport_rows(j: &mut Matrix, transport: &Matrix) {
    let n = transport.nrows();
    let rows = transport * j.rows(1, n);
    j.rows_mut(1, n).copy_from(&rows);
}

pub fn pushforward(map: &dyn ChartMap, p: &MTPoint, v: &Tangent) -> Result<(MTPoint, Tangent)> {
    let (q, j) = differential(map, p, Piece::Upper)?;
    Ok((q, Tangent::from_vector(&(j * v.to_vector()))))
}

/// The identity map of a space, as a chart map.
pub struct IdentityMap {
    space: MultiMappingTorus,
}

impl IdentityMap {
    pub fn new(space: MultiMappingTorus) -> Self {
        Self { space }
    }
}

impl ChartMap for IdentityMap {
    fn name(&self) -> String {
        format!("id[{}]", self.space.name())
    }

    fn source(&self) -> &MultiMappingTorus {
        &self.space
    }

    fn target(&self) -> &MultiMappingTorus {
        &self.space
    }

    fn chart(&self, p: &MTPoint, _piece: Piece, jacobian: bool) -> Result<(MTPoint, Option<Matrix>)> {
        let n = self.space.dim();
        Ok((p.clone(), jacobian.then(|| Matrix::identity(n + 1, n + 1))))
    }
}

/// Largest discrepancy between the two one-sided evaluations of `map` over
/// every source seam, the wrap, and every internal breakpoint.
pub fn check_seams(map: &dyn ChartMap, samples: usize, seed: u64) -> Result<f64> {
    let src = map.source();
    let tgt = map.target();
    let n = src.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let last = src.segment_count() - 1;
    for seg in 0..=last {
        let b = src.segments()[seg].1;
        let (next, a_next) = if seg < last {
            (seg + 1, src.segments()[seg + 1].0)
        } else {
            (0, 0.0)
        };
        let g = src.exit_gluing(seg);
        for _ in 0..samples {
            let x = Vector::from_iterator(n, (0..n).map(|_| rng.gen::<f64>()));
            let left = MTPoint::new(seg, b, x.clone());
            let right = MTPoint::new(next, a_next, g.apply(&x)?);
            let pl = map_point(map, &left, Piece::Lower, true)?;
            let pr = map_point(map, &right, Piece::Upper, true)?;
            worst = worst.max(tgt.distance(&pl, &pr)?);
        }
    }
    for c in map.breakpoints() {
        let (seg, t) = src.locate(c, Piece::Upper);
        for _ in 0..samples {
            let x = Vector::from_iterator(n, (0..n).map(|_| rng.gen::<f64>()));
            let p = MTPoint::new(seg, t, x);
            let pl = map_point(map, &p, Piece::Lower, true)?;
            let pr = map_point(map, &p, Piece::Upper, true)?;
            worst = worst.max(tgt.distance(&pl, &pr)?);
        }
    }
    Ok(worst)
}
