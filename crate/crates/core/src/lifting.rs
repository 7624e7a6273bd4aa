//! Lifting maps and isotopies through the homothety `π(x) = base·x`, and the
//! inductive tower `h_{i+1} = h_i ∘ φ_{i+1}(1,·)⁻¹` of successive lifts.

use crate::error::{Error, Result};
use crate::linalg::{conorm, Vector};
use crate::torus_maps::{max_discrepancy, Isotopy, TorusMap};

pub const DEFAULT_BASE: i64 = 3;
const TOWER_TOL: f64 = 1e-10;

/// Natural lift of a displacement-form map through `x ↦ base·x`.
pub fn lift_map(h: &TorusMap, base: i64) -> Result<TorusMap> {
    h.lift(base)
}

/// Slice-wise natural lift; the result starts at the identity when `phi` does.
pub fn lift_isotopy(phi: &Isotopy, base: i64) -> Isotopy {
    phi.lift(base)
}

/// Explicit isotopy from the identity to `h₁⁻¹ ∘ h₀`, where `h₁` is the
/// natural lift of `h₀ = id + v`: the bridge between the straight lines to
/// `h₀` and to `h₁`.
pub fn first_isotopy(h: &TorusMap, base: i64) -> Result<Isotopy> {
    let field = h.displacement_field().ok_or_else(|| {
        Error::UnsupportedForm("first isotopy needs h in displacement form".into())
    })?;
    let to_h = Isotopy::straight_line(field.clone())?;
    let to_lift = Isotopy::straight_line(field.dilate(base))?;
    Isotopy::bridge(&to_h, &to_lift)
}

#[derive(Clone, Debug)]
pub struct LiftTower {
    base: i64,
    /// `h_0 … h_k`
    maps: Vec<TorusMap>,
    /// `φ_1 … φ_k`
    isotopies: Vec<Isotopy>,
}

impl LiftTower {
    pub fn k(&self) -> usize {
        self.isotopies.len()
    }

    pub fn base(&self) -> i64 {
        self.base
    }

    pub fn dim(&self) -> usize {
        self.maps[0].dim()
    }

    /// `h_i`, `0 ≤ i ≤ k`.
    pub fn h(&self, i: usize) -> &TorusMap {
        &self.maps[i]
    }

    /// `φ_i`, `1 ≤ i ≤ k`.
    pub fn phi(&self, i: usize) -> &Isotopy {
        assert!(i >= 1, "isotopies are indexed from 1");
        &self.isotopies[i - 1]
    }

    /// `h_{i-1} ∘ φ_i(1,·)⁻¹`, the recursive form of `h_i` for `i ≥ 1`.
    pub fn recursive_form(&self, i: usize) -> Result<TorusMap> {
        TorusMap::compose(&self.maps[i - 1], &self.phi(i).slice(1.0)?.inverse()?)
    }
}

/// Builds `h_0 … h_k` and `φ_1 … φ_k`.
///
/// `h_{i+1}` is stored in displacement form (the natural lift of `h_i`) and
/// checked against its recursive form `h_i ∘ φ_{i+1}(1,·)⁻¹`.
pub fn build_tower(h: &TorusMap, phi1: &Isotopy, k: usize, base: i64) -> Result<LiftTower> {
    if k == 0 {
        return Err(Error::Config("tower height k must be at least 1".into()));
    }
    let dim = h.dim();
    let h1 = lift_map(h, base)?;

    let start = max_discrepancy(&phi1.slice(0.0)?, &TorusMap::identity(dim))?;
    if start > TOWER_TOL {
        return Err(Error::EndpointMismatch {
            what: "phi_1(0) != id".into(),
            discrepancy: start,
        });
    }
    let end = max_discrepancy(&phi1.slice(1.0)?, &TorusMap::compose(&h1.inverse()?, h)?)?;
    if end > TOWER_TOL {
        return Err(Error::EndpointMismatch {
            what: "phi_1(1) != h_1^-1 h_0".into(),
            discrepancy: end,
        });
    }

    let mut tower = LiftTower {
        base,
        maps: vec![h.clone(), h1],
        isotopies: vec![phi1.clone()],
    };
    for i in 1..k {
        let next_phi = lift_isotopy(&tower.isotopies[i - 1], base);
        let next_h = lift_map(&tower.maps[i], base)?;
        tower.isotopies.push(next_phi);
        tower.maps.push(next_h);
        let gap = max_discrepancy(&tower.maps[i + 1], &tower.recursive_form(i + 1)?)?;
        if gap > TOWER_TOL {
            return Err(Error::EndpointMismatch {
                what: format!("h_{} != h_{} o phi_{}(1)^-1", i + 1, i, i + 1),
                discrepancy: gap,
            });
        }
    }
    Ok(tower)
}

/// Grid minima of the smallest singular values of `Dh_i`, `D(h_i⁻¹)` and
/// `Dφ_i(s,·)` over the whole tower.
#[derive(Clone, Copy, Debug)]
pub struct TowerConorms {
    pub maps: f64,
    pub inverses: f64,
    pub isotopies: f64,
}

pub fn tower_conorms(tower: &LiftTower, per_axis: usize, s_samples: usize) -> Result<TowerConorms> {
    let dim = tower.dim();
    let points: Vec<Vector> = (0..per_axis.pow(dim as u32))
        .map(|idx| {
            let mut rem = idx;
            Vector::from_iterator(
                dim,
                (0..dim).map(|_| {
                    let c = rem % per_axis;
                    rem /= per_axis;
                    c as f64 / per_axis as f64
                }),
            )
        })
        .collect();
    let mut out = TowerConorms {
        maps: f64::INFINITY,
        inverses: f64::INFINITY,
        isotopies: f64::INFINITY,
    };
    for i in 0..=tower.k() {
        let h = tower.h(i);
        let h_inv = h.inverse()?;
        for x in &points {
            out.maps = out.maps.min(conorm(&h.jacobian(x)?));
            out.inverses = out.inverses.min(conorm(&h_inv.jacobian(x)?));
        }
    }
    for i in 1..=tower.k() {
        for j in 0..s_samples {
            let s = j as f64 / (s_samples - 1).max(1) as f64;
            let slice = tower.phi(i).slice(s)?;
            for x in &points {
                out.isotopies = out.isotopies.min(conorm(&slice.jacobian(x)?));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Phase, TrigDisplacementField, TrigTerm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{PI, TAU};

    fn v2(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    fn shear() -> TorusMap {
        TorusMap::displacement(TrigDisplacementField::shear(2, 0.1, 0, 1)).unwrap()
    }

    fn generic() -> TorusMap {
        TorusMap::displacement(
            TrigDisplacementField::new(
                2,
                vec![
                    TrigTerm {
                        coeff: vec![0.04, 0.02],
                        freq: vec![1, 1],
                        phase: Phase::Sin,
                    },
                    TrigTerm {
                        coeff: vec![-0.03, 0.05],
                        freq: vec![0, 2],
                        phase: Phase::Cos,
                    },
                ],
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn lift_of_identity_is_identity() {
        let id = TorusMap::identity(2);
        let x = v2(0.3, 0.8);
        assert_eq!(lift_map(&id, 3).unwrap().apply(&x).unwrap(), x);
    }

    #[test]
    fn lift_of_shear_closed_form() {
        let h1 = lift_map(&shear(), 3).unwrap();
        let y = h1.apply(&v2(0.25, 0.25)).unwrap();
        assert!((y[0] - (0.25 + 0.1 / 3.0 * (1.5 * PI).sin())).abs() < 1e-15);
        assert!((y[0] - 0.216_666_666_666_666_66).abs() < 1e-12);
        assert_eq!(y[1], 0.25);
    }

    #[test]
    fn lift_of_homothety_is_unsupported() {
        assert!(matches!(
            lift_map(&TorusMap::homothety(2, 3), 3),
            Err(Error::UnsupportedForm(_))
        ));
    }

    #[test]
    fn lift_of_straight_line_is_straight_line_of_dilated_field() {
        let field = TrigDisplacementField::shear(2, 0.1, 0, 1);
        let lifted = lift_isotopy(&Isotopy::straight_line(field.clone()).unwrap(), 3);
        let direct = Isotopy::straight_line(field.dilate(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let x = v2(rng.gen(), rng.gen());
            let s: f64 = rng.gen();
            assert!((lifted.eval(s, &x).unwrap() - direct.eval(s, &x).unwrap()).amax() < 1e-14);
            let d = lifted.time_derivative(s, &x).unwrap() - direct.time_derivative(s, &x).unwrap();
            assert!(d.amax() < 1e-14);
        }
    }

    #[test]
    fn lifted_constant_identity_is_constant_identity() {
        let c = lift_isotopy(&Isotopy::constant_identity(2), 3);
        let x = v2(0.6, 0.1);
        assert_eq!(c.eval(0.5, &x).unwrap(), x);
    }

    #[test]
    fn trivial_tower() {
        let id = TorusMap::identity(2);
        let tower = build_tower(&id, &Isotopy::constant_identity(2), 3, 3).unwrap();
        let x = v2(0.12, 0.34);
        for i in 0..=3 {
            assert_eq!(tower.h(i).apply(&x).unwrap(), x);
        }
        for i in 1..=3 {
            assert_eq!(tower.phi(i).eval(0.6, &x).unwrap(), x);
        }
    }

    #[test]
    fn tower_invariants_hold() {
        let pi = TorusMap::homothety(2, 3);
        for h in [shear(), generic()] {
            let phi1 = first_isotopy(&h, 3).unwrap();
            let tower = build_tower(&h, &phi1, 3, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            for i in 0..3 {
                let up = TorusMap::compose(&pi, tower.h(i + 1)).unwrap();
                let down = TorusMap::compose(tower.h(i), &pi).unwrap();
                for _ in 0..100 {
                    let x = v2(rng.gen(), rng.gen());
                    assert!((up.apply(&x).unwrap() - down.apply(&x).unwrap()).amax() < 1e-10);
                    let rec = tower.recursive_form(i + 1).unwrap();
                    let d = rec.apply(&x).unwrap() - tower.h(i + 1).apply(&x).unwrap();
                    assert!(d.amax() < 1e-10);
                }
            }
            for i in 1..3 {
                for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
                    for _ in 0..20 {
                        let x = v2(rng.gen(), rng.gen());
                        let up = tower.phi(i + 1).eval(t, &x).unwrap() * 3.0;
                        let down = tower.phi(i).eval(t, &(&x * 3.0)).unwrap();
                        assert!((up - down).amax() < 1e-10);
                    }
                }
                let x = v2(rng.gen(), rng.gen());
                assert!((tower.phi(i + 1).eval(0.0, &x).unwrap() - &x).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn shear_tower_displacements_shrink() {
        let h = shear();
        let tower = build_tower(&h, &first_isotopy(&h, 3).unwrap(), 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for i in 0..=3 {
            for _ in 0..100 {
                let x = v2(rng.gen(), rng.gen());
                let d = tower.h(i).apply(&x).unwrap() - &x;
                let expect = 0.1 / 3f64.powi(i as i32) * (TAU * 3f64.powi(i as i32) * x[1]).sin();
                assert!((d[0] - expect).abs() < 1e-13);
                assert!(d.amax() <= 0.15);
            }
        }
    }

    #[test]
    fn uniform_conorm_is_k_independent_and_positive() {
        let h = shear();
        let phi1 = first_isotopy(&h, 3).unwrap();
        let mut previous = None;
        for k in 1..=3 {
            let tower = build_tower(&h, &phi1, k, 3).unwrap();
            let c = tower_conorms(&tower, 32, 5).unwrap();
            let lower = 1.0 - 0.2 * PI * 1.5;
            assert!(c.maps > 0.0 && c.inverses > 0.0 && c.isotopies > 0.0);
            assert!(c.maps.min(c.inverses).min(c.isotopies) >= lower.powi(3));
            let m = c.maps.min(c.inverses).min(c.isotopies);
            if let Some(p) = previous {
                assert!((m - p as f64).abs() < 1e-12, "k = {k}: {m} vs {p}");
            }
            previous = Some(m);
        }
    }

    #[test]
    fn bad_first_isotopy_is_rejected() {
        let h = shear();
        let wrong = Isotopy::straight_line(TrigDisplacementField::shear(2, 0.1, 0, 1)).unwrap();
        assert!(matches!(
            build_tower(&h, &wrong, 2, 3),
            Err(Error::EndpointMismatch { .. })
        ));
    }
}
