//! Symmetric quadrature rules on the reference triangle.
//!
//! Points are stored in barycentric coordinates with weights normalized to
//! sum to one, so that
//!
//! ```text
//! ∫_K f dx  ≈  area(K) · Σ_q w_q f(x_q),    x_q = ζ0 p0 + ζ1 p1 + ζ2 p2.
//! ```
//!
//! The degree-4 rule (6 points, two symmetric orbits) integrates the
//! pulled-back mass integrands exactly whenever the coefficient is constant
//! per triangle; the degree-2 midpoint rule exists to cross-check assembly.

/// A quadrature rule: barycentric points with weights summing to 1.
#[derive(Clone, Copy, Debug)]
pub struct TriQuadrature {
    pub points: &'static [([f64; 3], f64)],
}

/// Three-point edge-midpoint rule, exact for polynomials of degree 2.
pub const DEGREE2: TriQuadrature = TriQuadrature {
    points: &[
        ([0.5, 0.5, 0.0], 1.0 / 3.0),
        ([0.0, 0.5, 0.5], 1.0 / 3.0),
        ([0.5, 0.0, 0.5], 1.0 / 3.0),
    ],
};

const W4A: f64 = 0.223381589678011;
const W4B: f64 = 0.109951743655322;
const A4A: f64 = 0.108103018168070;
const B4A: f64 = 0.445948490915965;
const A4B: f64 = 0.816847572980459;
const B4B: f64 = 0.091576213509771;

/// Six-point rule, exact for polynomials of degree 4 (two symmetric orbits).
pub const DEGREE4: TriQuadrature = TriQuadrature {
    points: &[
        ([A4A, B4A, B4A], W4A),
        ([B4A, A4A, B4A], W4A),
        ([B4A, B4A, A4A], W4A),
        ([A4B, B4B, B4B], W4B),
        ([B4B, A4B, B4B], W4B),
        ([B4B, B4B, A4B], W4B),
    ],
};

impl TriQuadrature {
    /// Integrates `f` over the triangle `(p0, p1, p2)` with `area` given.
    pub fn integrate<F: FnMut([f64; 2], [f64; 3]) -> f64>(
        &self,
        corners: &[[f64; 2]; 3],
        area: f64,
        mut f: F,
    ) -> f64 {
        let mut acc = 0.0;
        for &(zeta, w) in self.points {
            let x = [
                zeta[0] * corners[0][0] + zeta[1] * corners[1][0] + zeta[2] * corners[2][0],
                zeta[0] * corners[0][1] + zeta[1] * corners[1][1] + zeta[2] * corners[2][1],
            ];
            acc += w * f(x, zeta);
        }
        area * acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact integral of x^p y^q over the unit reference triangle.
    fn monomial_exact(p: u32, q: u32) -> f64 {
        // p! q! / (p + q + 2)!
        let fact = |n: u32| (1..=n).map(|k| k as f64).product::<f64>().max(1.0);
        fact(p) * fact(q) / fact(p + q + 2)
    }

    fn rule_value(rule: &TriQuadrature, p: u32, q: u32) -> f64 {
        let corners = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        rule.integrate(&corners, 0.5, |x, _| x[0].powi(p as i32) * x[1].powi(q as i32))
    }

    #[test]
    fn degree4_rule_is_exact_through_degree_4() {
        for p in 0..=4u32 {
            for q in 0..=(4 - p) {
                let got = rule_value(&DEGREE4, p, q);
                let want = monomial_exact(p, q);
                assert!(
                    (got - want).abs() <= 1e-15 + 1e-14 * want.abs(),
                    "x^{p} y^{q}: got {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn degree2_rule_is_exact_through_degree_2() {
        for p in 0..=2u32 {
            for q in 0..=(2 - p) {
                let got = rule_value(&DEGREE2, p, q);
                let want = monomial_exact(p, q);
                assert!((got - want).abs() <= 1e-15 + 1e-14 * want.abs());
            }
        }
    }

    #[test]
    fn degree4_rule_is_not_exact_at_degree_5() {
        let got = rule_value(&DEGREE4, 5, 0);
        let want = monomial_exact(5, 0);
        assert!((got - want).abs() > 1e-8, "rule unexpectedly exact at degree 5");
    }

    #[test]
    fn weights_sum_to_one() {
        for rule in [&DEGREE2, &DEGREE4] {
            let sum: f64 = rule.points.iter().map(|&(_, w)| w).sum();
            assert!((sum - 1.0).abs() < 1e-14);
        }
    }
}
