//! Torus self-maps and isotopies as composable evaluators.
//!
//! Every map acts on the universal cover `R^n` and satisfies
//! `F(x + m) = F(x) + L m` for its integer degree matrix `L`. All maps built
//! here have `L = I` except the homothety `x ↦ λx`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fields::TrigDisplacementField;
use crate::linalg::{checked_inverse, checked_solve, Matrix, Vector};

/// Relative residual accepted by internal Newton inversions.
pub const DEFAULT_NEWTON_TOL: f64 = 1e-13;
pub const NEWTON_MAX_ITER: usize = 50;
/// Safety factor on the sampled displacement-Jacobian bound.
pub const CONTRACTION_SAFETY: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InverseStrategy {
    ExactClosedForm,
    Newton,
    CompositeOfInverses,
    None,
}

#[derive(Clone)]
pub struct TorusMap(Arc<MapNode>);

enum MapNode {
    Identity {
        dim: usize,
    },
    Displacement {
        field: TrigDisplacementField,
        exact_inverse: bool,
    },
    Homothety {
        dim: usize,
        factor: i64,
    },
    Compose {
        outer: TorusMap,
        inner: TorusMap,
    },
    Inverse {
        map: TorusMap,
    },
}

fn grid_for_dim(dim: usize) -> usize {
    match dim {
        1 | 2 => 64,
        3 => 32,
        4 => 16,
        _ => 8,
    }
}

/// Checks that `id + s·v` is a diffeomorphism for all `s ∈ [0, 1]` and that
/// Newton seeded at the target converges for its inverse.
fn check_displacement(field: &TrigDisplacementField) -> Result<()> {
    if field.is_triangular_shear() {
        return Ok(());
    }
    let bound = field.sampled_jacobian_bound(grid_for_dim(field.dim()));
    if bound * CONTRACTION_SAFETY < 1.0 {
        Ok(())
    } else {
        Err(Error::NotDiffeotopy {
            bound,
            limit: 1.0 / CONTRACTION_SAFETY,
        })
    }
}

impl TorusMap {
    fn from_node(node: MapNode) -> Self {
        Self(Arc::new(node))
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_node(MapNode::Identity { dim })
    }

    /// `x ↦ x + v(x)`, validated as a diffeomorphism.
    pub fn displacement(field: TrigDisplacementField) -> Result<Self> {
        check_displacement(&field)?;
        Ok(Self::displacement_unchecked(field))
    }

    /// Callers guarantee the field is a contraction or a triangular shear,
    /// e.g. because it is a dilation or sub-unit rescaling of a checked field.
    pub(crate) fn displacement_unchecked(field: TrigDisplacementField) -> Self {
        let exact_inverse = field.is_triangular_shear();
        Self::from_node(MapNode::Displacement {
            field,
            exact_inverse,
        })
    }

    pub fn homothety(dim: usize, factor: i64) -> Self {
        Self::from_node(MapNode::Homothety { dim, factor })
    }

    pub fn dim(&self) -> usize {
        match &*self.0 {
            MapNode::Identity { dim } | MapNode::Homothety { dim, .. } => *dim,
            MapNode::Displacement { field, .. } => field.dim(),
            MapNode::Compose { inner, .. } => inner.dim(),
            MapNode::Inverse { map } => map.dim(),
        }
    }

    pub fn displacement_field(&self) -> Option<&TrigDisplacementField> {
        match &*self.0 {
            MapNode::Displacement { field, .. } => Some(field),
            _ => None,
        }
    }

    pub fn inverse_strategy(&self) -> InverseStrategy {
        match &*self.0 {
            MapNode::Identity { .. } => InverseStrategy::ExactClosedForm,
            MapNode::Displacement { exact_inverse, .. } => {
                if *exact_inverse {
                    InverseStrategy::ExactClosedForm
                } else {
                    InverseStrategy::Newton
                }
            }
            MapNode::Homothety { .. } => InverseStrategy::None,
            MapNode::Compose { .. } => InverseStrategy::CompositeOfInverses,
            MapNode::Inverse { .. } => InverseStrategy::ExactClosedForm,
        }
    }

    /// `outer ∘ inner`.
    pub fn compose(outer: &TorusMap, inner: &TorusMap) -> Result<TorusMap> {
        if outer.dim() != inner.dim() {
            return Err(Error::DimensionMismatch {
                expected: inner.dim(),
                found: outer.dim(),
            });
        }
        Ok(Self::from_node(MapNode::Compose {
            outer: outer.clone(),
            inner: inner.clone(),
        }))
    }

    pub fn then(&self, outer: &TorusMap) -> Result<TorusMap> {
        TorusMap::compose(outer, self)
    }

    pub fn inverse(&self) -> Result<TorusMap> {
        Ok(match &*self.0 {
            MapNode::Identity { .. } => self.clone(),
            MapNode::Displacement { .. } => Self::from_node(MapNode::Inverse { map: self.clone() }),
            MapNode::Homothety { factor, .. } => {
                return Err(Error::UnsupportedForm(format!(
                    "homothety by {factor} has no single-valued inverse"
                )))
            }
            MapNode::Compose { outer, inner } => TorusMap::compose(&inner.inverse()?, &outer.inverse()?)?,
            MapNode::Inverse { map } => map.clone(),
        })
    }

    /// Natural lift through `x ↦ base·x`: the unique lift whose displacement is
    /// the dilated displacement (zero translation).
    pub fn lift(&self, base: i64) -> Result<TorusMap> {
        Ok(match &*self.0 {
            MapNode::Identity { .. } => self.clone(),
            MapNode::Displacement { field, .. } => {
                Self::displacement_unchecked(field.dilate(base))
            }
            MapNode::Homothety { .. } => {
                return Err(Error::UnsupportedForm(
                    "homothety is not in displacement form".into(),
                ))
            }
            MapNode::Compose { outer, inner } => {
                TorusMap::compose(&outer.lift(base)?, &inner.lift(base)?)?
            }
            MapNode::Inverse { map } => map.lift(base)?.inverse()?,
        })
    }

    pub fn degree_matrix(&self) -> DMatrix<i64> {
        match &*self.0 {
            MapNode::Identity { dim } => DMatrix::identity(*dim, *dim),
            MapNode::Displacement { field, .. } => DMatrix::identity(field.dim(), field.dim()),
            MapNode::Homothety { dim, factor } => DMatrix::identity(*dim, *dim) * *factor,
            MapNode::Compose { outer, inner } => outer.degree_matrix() * inner.degree_matrix(),
            // only degree-identity maps are ever inverted
            MapNode::Inverse { map } => map.degree_matrix(),
        }
    }

    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        match &*self.0 {
            MapNode::Identity { .. } => Ok(x.clone()),
            MapNode::Displacement { field, .. } => Ok(x + field.eval(x)),
            MapNode::Homothety { factor, .. } => Ok(x * (*factor as f64)),
            MapNode::Compose { outer, inner } => outer.apply(&inner.apply(x)?),
            MapNode::Inverse { map } => map.invert(x, DEFAULT_NEWTON_TOL),
        }
    }

    pub fn jacobian(&self, x: &Vector) -> Result<Matrix> {
        self.apply_with_jacobian(x).map(|(_, j)| j)
    }

    pub fn apply_with_jacobian(&self, x: &Vector) -> Result<(Vector, Matrix)> {
        match &*self.0 {
            MapNode::Identity { dim } => Ok((x.clone(), Matrix::identity(*dim, *dim))),
            MapNode::Displacement { field, .. } => {
                let mut j = field.jacobian(x);
                for i in 0..field.dim() {
                    j[(i, i)] += 1.0;
                }
                Ok((x + field.eval(x), j))
            }
            MapNode::Homothety { dim, factor } => Ok((
                x * (*factor as f64),
                Matrix::identity(*dim, *dim) * (*factor as f64),
            )),
            MapNode::Compose { outer, inner } => {
                let (y, ji) = inner.apply_with_jacobian(x)?;
                let (z, jo) = outer.apply_with_jacobian(&y)?;
                Ok((z, jo * ji))
            }
            MapNode::Inverse { map } => {
                let pre = map.invert(x, DEFAULT_NEWTON_TOL)?;
                let j = match &*map.0 {
                    MapNode::Displacement {
                        field,
                        exact_inverse: true,
                    } => {
                        // (I + A)⁻¹ = I − A for the nilpotent shear part
                        let mut j = -field.jacobian(x);
                        for i in 0..field.dim() {
                            j[(i, i)] += 1.0;
                        }
                        j
                    }
                    _ => checked_inverse(&map.jacobian(&pre)?)?,
                };
                Ok((pre, j))
            }
        }
    }

    /// Solves `apply(x) = y`, seeded at `x₀ = y`.
    pub fn invert(&self, y: &Vector, tol: f64) -> Result<Vector> {
        match &*self.0 {
            MapNode::Identity { .. } => return Ok(y.clone()),
            MapNode::Displacement {
                field,
                exact_inverse: true,
            } => return Ok(y - field.eval(y)),
            MapNode::Inverse { map } => return map.apply(y),
            MapNode::Homothety { .. } => {
                return Err(Error::UnsupportedForm(
                    "homothety cannot be inverted on the torus".into(),
                ))
            }
            _ => {}
        }
        if self.degree_matrix() != DMatrix::identity(self.dim(), self.dim()) {
            return Err(Error::UnsupportedForm(
                "newton inversion requires identity degree matrix".into(),
            ));
        }
        let scale = 1.0 + y.amax();
        let mut x = y.clone();
        let mut residual = f64::INFINITY;
        for _ in 0..NEWTON_MAX_ITER {
            let (fx, j) = self.apply_with_jacobian(&x)?;
            let r = fx - y;
            residual = r.amax();
            let converged = residual <= tol * scale;
            if residual > 0.0 {
                x -= checked_solve(&j, &r)?;
            }
            if converged {
                return Ok(x);
            }
        }
        Err(Error::NoConvergence {
            iterations: NEWTON_MAX_ITER,
            residual,
        })
    }

    fn describe(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            MapNode::Identity { .. } => write!(f, "id"),
            MapNode::Displacement { field, .. } => {
                write!(f, "disp[{} terms]", field.terms().len())
            }
            MapNode::Homothety { factor, .. } => write!(f, "{factor}x"),
            MapNode::Compose { outer, inner } => {
                outer.describe(f)?;
                write!(f, " ∘ ")?;
                inner.describe(f)
            }
            MapNode::Inverse { map } => {
                write!(f, "(")?;
                map.describe(f)?;
                write!(f, ")⁻¹")
            }
        }
    }
}

impl fmt::Debug for TorusMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.describe(f)
    }
}

/// A smooth one-parameter family of torus diffeomorphisms, `s ∈ [0, 1]`.
#[derive(Clone)]
pub struct Isotopy(Arc<IsoNode>);

enum IsoNode {
    ConstantIdentity { dim: usize },
    Constant { map: TorusMap },
    StraightLine { field: TrigDisplacementField },
    /// `b(s)⁻¹ ∘ a(s)`
    Bridge { a: Isotopy, b: Isotopy },
    /// `outer(s) ∘ inner(s)`
    Product { outer: Isotopy, inner: Isotopy },
    Lifted { inner: Isotopy, base: i64 },
}

/// Sample points used for endpoint contracts.
fn contract_samples(dim: usize) -> Vec<Vector> {
    let per_axis: usize = if dim <= 2 { 8 } else { 3 };
    let total = per_axis.pow(dim as u32);
    (0..total)
        .map(|idx| {
            let mut rem = idx;
            Vector::from_iterator(
                dim,
                (0..dim).map(|_| {
                    let c = rem % per_axis;
                    rem /= per_axis;
                    // offset keeps samples off the lattice of symmetry points
                    (c as f64 + 0.37) / per_axis as f64
                }),
            )
        })
        .collect()
}

/// Max pointwise difference of two maps on a fixed sample set.
pub fn max_discrepancy(a: &TorusMap, b: &TorusMap) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in contract_samples(a.dim()) {
        worst = worst.max((a.apply(&x)? - b.apply(&x)?).amax());
    }
    Ok(worst)
}

impl Isotopy {
    fn from_node(node: IsoNode) -> Self {
        Self(Arc::new(node))
    }

    pub fn constant_identity(dim: usize) -> Self {
        Self::from_node(IsoNode::ConstantIdentity { dim })
    }

    /// `s ↦ map` for every `s`.
    pub fn constant(map: TorusMap) -> Self {
        Self::from_node(IsoNode::Constant { map })
    }

    /// `s ↦ id + s·v`.
    pub fn straight_line(field: TrigDisplacementField) -> Result<Self> {
        check_displacement(&field)?;
        Ok(Self::from_node(IsoNode::StraightLine { field }))
    }

    /// `s ↦ b(s)⁻¹ ∘ a(s)`, connecting the identity to `b(1)⁻¹ ∘ a(1)`.
    pub fn bridge(a: &Isotopy, b: &Isotopy) -> Result<Self> {
        if a.dim() != b.dim() {
            return Err(Error::DimensionMismatch {
                expected: a.dim(),
                found: b.dim(),
            });
        }
        let gap = max_discrepancy(&a.slice(0.0)?, &b.slice(0.0)?)?;
        if gap > 1e-10 {
            return Err(Error::EndpointMismatch {
                what: "bridge: a(0) != b(0)".into(),
                discrepancy: gap,
            });
        }
        Ok(Self::from_node(IsoNode::Bridge {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    /// Pointwise composition `s ↦ outer(s) ∘ inner(s)`.
    pub fn product(outer: &Isotopy, inner: &Isotopy) -> Result<Self> {
        if outer.dim() != inner.dim() {
            return Err(Error::DimensionMismatch {
                expected: inner.dim(),
                found: outer.dim(),
            });
        }
        Ok(Self::from_node(IsoNode::Product {
            outer: outer.clone(),
            inner: inner.clone(),
        }))
    }

    /// Slice-wise natural lift through `x ↦ base·x`.
    pub fn lift(&self, base: i64) -> Self {
        Self::from_node(IsoNode::Lifted {
            inner: self.clone(),
            base,
        })
    }

    pub fn dim(&self) -> usize {
        match &*self.0 {
            IsoNode::ConstantIdentity { dim } => *dim,
            IsoNode::Constant { map } => map.dim(),
            IsoNode::StraightLine { field } => field.dim(),
            IsoNode::Bridge { a, .. } => a.dim(),
            IsoNode::Product { inner, .. } => inner.dim(),
            IsoNode::Lifted { inner, .. } => inner.dim(),
        }
    }

    pub fn slice(&self, s: f64) -> Result<TorusMap> {
        match &*self.0 {
            IsoNode::ConstantIdentity { dim } => Ok(TorusMap::identity(*dim)),
            IsoNode::Constant { map } => Ok(map.clone()),
            IsoNode::StraightLine { field } => {
                Ok(TorusMap::displacement_unchecked(field.scaled(s)))
            }
            IsoNode::Bridge { a, b } => TorusMap::compose(&b.slice(s)?.inverse()?, &a.slice(s)?),
            IsoNode::Product { outer, inner } => {
                TorusMap::compose(&outer.slice(s)?, &inner.slice(s)?)
            }
            IsoNode::Lifted { inner, base } => inner.slice(s)?.lift(*base),
        }
    }

    pub fn eval(&self, s: f64, x: &Vector) -> Result<Vector> {
        self.slice(s)?.apply(x)
    }

    pub fn jacobian(&self, s: f64, x: &Vector) -> Result<Matrix> {
        self.slice(s)?.jacobian(x)
    }

    /// `∂_s iso(s)(x)`.
    pub fn time_derivative(&self, s: f64, x: &Vector) -> Result<Vector> {
        match &*self.0 {
            IsoNode::ConstantIdentity { dim } => Ok(Vector::zeros(*dim)),
            IsoNode::Constant { map } => Ok(Vector::zeros(map.dim())),
            IsoNode::StraightLine { field } => Ok(field.eval(x)),
            IsoNode::Bridge { a, b } => {
                // b(s)(z) = a(s)(x)  ⇒  Db ż + ∂_s b(z) = ∂_s a(x)
                let z = self.eval(s, x)?;
                let rhs = a.time_derivative(s, x)? - b.time_derivative(s, &z)?;
                checked_solve(&b.jacobian(s, &z)?, &rhs)
            }
            IsoNode::Product { outer, inner } => {
                let y = inner.eval(s, x)?;
                let outer_map = outer.slice(s)?;
                Ok(outer.time_derivative(s, &y)?
                    + outer_map.jacobian(&y)? * inner.time_derivative(s, x)?)
            }
            IsoNode::Lifted { inner, base } => {
                let b = *base as f64;
                Ok(inner.time_derivative(s, &(x * b))? / b)
            }
        }
    }
}

impl fmt::Debug for Isotopy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            IsoNode::ConstantIdentity { .. } => write!(f, "const-id"),
            IsoNode::Constant { map } => write!(f, "const({map:?})"),
            IsoNode::StraightLine { .. } => write!(f, "straight-line"),
            IsoNode::Bridge { a, b } => write!(f, "bridge({a:?}, {b:?})"),
            IsoNode::Product { outer, inner } => write!(f, "product({outer:?}, {inner:?})"),
            IsoNode::Lifted { inner, base } => write!(f, "lift{base}({inner:?})"),
        }
    }
}

/// Straight-line isotopy `s ↦ id + s·v`.
pub fn straight_line_isotopy(field: TrigDisplacementField) -> Result<Isotopy> {
    Isotopy::straight_line(field)
}

pub fn bridge_isotopy(a: &Isotopy, b: &Isotopy) -> Result<Isotopy> {
    Isotopy::bridge(a, b)
}

/// An isotopy from the identity to `h⁻²`, built as the bridge from the constant
/// identity to `s ↦ (id + s·v)²`.
pub fn inverse_square_isotopy(field: &TrigDisplacementField) -> Result<Isotopy> {
    let line = Isotopy::straight_line(field.clone())?;
    let square = Isotopy::product(&line, &line)?;
    Isotopy::bridge(&Isotopy::constant_identity(field.dim()), &square)
}
