//! Periodic trigonometric displacement fields on the torus `R^n / Z^n`.
//!
//! A field is a finite sum of terms `coeff · trig(2π b·x)` with integer
//! frequency vectors `b`, so it is `Z^n`-periodic by construction and its
//! Jacobian is available in closed form. The family is closed under the
//! dilation `v(x) ↦ v(λx)/λ`, which is how displacements are lifted through
//! the homothety `x ↦ λx`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Sin,
    Cos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub coeff: Vec<f64>,
    pub freq: Vec<i64>,
    pub phase: Phase,
}

impl TrigTerm {
    /// `2π b·x`, with each product reduced mod 1 before scaling.
    fn angle(&self, x: &Vector) -> f64 {
        let phase: f64 = self
            .freq
            .iter()
            .zip(x.iter())
            .map(|(&b, &xi)| {
                let b = b as f64;
                let p = b * xi;
                let err = b.mul_add(xi, -p);
                (p - p.round()) + err
            })
            .sum();
        TAU * phase
    }

    /// Value and derivative (w.r.t. the angle) of the trig factor.
    fn trig(&self, x: &Vector) -> (f64, f64) {
        let (s, c) = self.angle(x).sin_cos();
        match self.phase {
            Phase::Sin => (s, c),
            Phase::Cos => (c, -s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrigDisplacementField {
    dim: usize,
    terms: Vec<TrigTerm>,
}

impl TrigDisplacementField {
    pub fn new(dim: usize, terms: Vec<TrigTerm>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("field dimension must be positive".into()));
        }
        for term in &terms {
            for len in [term.coeff.len(), term.freq.len()] {
                if len != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: len,
                    });
                }
            }
        }
        Ok(Self { dim, terms })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: Vec::new(),
        }
    }

    /// `v(x) = eps · sin(2π x_{j}) e_{i}`.
    pub fn shear(dim: usize, eps: f64, displaced: usize, along: usize) -> Self {
        let mut coeff = vec![0.0; dim];
        coeff[displaced] = eps;
        let mut freq = vec![0; dim];
        freq[along] = 1;
        Self {
            dim,
            terms: vec![TrigTerm {
                coeff,
                freq,
                phase: Phase::Sin,
            }],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[TrigTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.coeff.iter().all(|&c| c == 0.0))
    }

    pub fn eval(&self, x: &Vector) -> Vector {
        let mut out = Vector::zeros(self.dim);
        for term in &self.terms {
            let (value, _) = term.trig(x);
            for (o, &c) in out.iter_mut().zip(&term.coeff) {
                *o += c * value;
            }
        }
        out
    }

    /// `∂v_i/∂x_j = Σ 2π b_j coeff_i trig′(2π b·x)`.
    pub fn jacobian(&self, x: &Vector) -> Matrix {
        let mut out = Matrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            let (_, slope) = term.trig(x);
            for (i, &c) in term.coeff.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                for (j, &b) in term.freq.iter().enumerate() {
                    if b != 0 {
                        out[(i, j)] += TAU * b as f64 * c * slope;
                    }
                }
            }
        }
        out
    }

    /// The field `w(x) = v(λx)/λ`.
    pub fn dilate(&self, base: i64) -> Self {
        assert!(base >= 2, "dilation base must be at least 2");
        let inv = 1.0 / base as f64;
        let terms = self
            .terms
            .iter()
            .map(|t| TrigTerm {
                coeff: t.coeff.iter().map(|c| c * inv).collect(),
                freq: t.freq.iter().map(|b| b * base).collect(),
                phase: t.phase,
            })
            .collect();
        Self {
            dim: self.dim,
            terms,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| TrigTerm {
                coeff: t.coeff.iter().map(|c| c * s).collect(),
                freq: t.freq.clone(),
                phase: t.phase,
            })
            .collect();
        Self {
            dim: self.dim,
            terms,
        }
    }

    /// True when no displaced coordinate appears in any frequency vector.
    ///
    /// Then `Dv` is nilpotent, `id + s·v` is a diffeomorphism for every `s`,
    /// and `(id + v)⁻¹ = id − v` exactly.
    pub fn is_triangular_shear(&self) -> bool {
        let mut displaced = vec![false; self.dim];
        let mut sensed = vec![false; self.dim];
        for t in &self.terms {
            for (i, &c) in t.coeff.iter().enumerate() {
                displaced[i] |= c != 0.0;
            }
            for (j, &b) in t.freq.iter().enumerate() {
                sensed[j] |= b != 0;
            }
        }
        !displaced.iter().zip(&sensed).any(|(&d, &s)| d && s)
    }

    /// Largest spectral norm of `Dv` over a regular grid of `per_axis^n` points.
    pub fn sampled_jacobian_bound(&self, per_axis: usize) -> f64 {
        let total = per_axis.pow(self.dim as u32);
        let mut worst = 0.0f64;
        let mut x = Vector::zeros(self.dim);
        for idx in 0..total {
            let mut rem = idx;
            for c in x.iter_mut() {
                *c = (rem % per_axis) as f64 / per_axis as f64;
                rem /= per_axis;
            }
            let j = self.jacobian(&x);
            worst = worst.max(crate::linalg::singular_values(&j).max());
        }
        worst
    }
}
