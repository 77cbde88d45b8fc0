//! Poincaré ball geometry (curvature -1, unit ball).
//!
//! Every point produced here is clamped to `||x|| <= 1 - BALL_EPS`, so the
//! conformal factor and the geodesic distance stay finite. Only maps
//! referenced at the origin are provided; that is all the prototype learner
//! needs.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Distance kept between any ball point and the unit sphere.
pub const BALL_EPS: f64 = 1e-5;

/// Largest Euclidean norm a [`BallPoint`] may carry.
pub const MAX_NORM: f64 = 1.0 - BALL_EPS;

// Slack so that re-clamping an already clamped point is a no-op.
const CLAMP_SLACK: f64 = 1e-15;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

fn clamp_in_place(coords: &mut [f64]) {
    let r = norm(coords);
    if r > MAX_NORM + CLAMP_SLACK {
        let scale = MAX_NORM / r;
        coords.iter_mut().for_each(|c| *c *= scale);
    }
}

/// A point strictly inside the unit Poincaré ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallPoint(Vec<f64>);

impl BallPoint {
    /// Builds a point, pulling it back inside the ball if its norm exceeds
    /// [`MAX_NORM`].
    pub fn new(mut coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("ball point needs at least one coordinate"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("ball point has a non-finite coordinate"));
        }
        clamp_in_place(&mut coords);
        Ok(BallPoint(coords))
    }

    pub fn origin(dim: usize) -> Self {
        BallPoint(vec![0.0; dim.max(1)])
    }

    pub(crate) fn from_clamped(mut coords: Vec<f64>) -> Self {
        clamp_in_place(&mut coords);
        BallPoint(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

/// A Euclidean vector in the tangent space at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Self {
        TangentVector(coords)
    }

    pub fn zeros(dim: usize) -> Self {
        TangentVector(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0.0)
    }
}

/// Möbius addition `a ⊕ b`.
pub fn mobius_add(a: &BallPoint, b: &BallPoint) -> Result<BallPoint> {
    check_dim(a.dim(), b.dim())?;
    let ab = dot(&a.0, &b.0);
    let aa = norm_sq(&a.0);
    let bb = norm_sq(&b.0);
    let coef_a = 1.0 + 2.0 * ab + bb;
    let coef_b = 1.0 - aa;
    let denom = 1.0 + 2.0 * ab + aa * bb;
    let coords = a
        .0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| (coef_a * x + coef_b * y) / denom)
        .collect();
    Ok(BallPoint::from_clamped(coords))
}

// acosh(1 + delta) without the cancellation of forming 1 + delta first.
fn acosh1p(delta: f64) -> f64 {
    let delta = delta.max(0.0);
    (delta + (delta * (delta + 2.0)).sqrt()).ln_1p()
}

fn distance_delta(a: &[f64], b: &[f64]) -> f64 {
    let diff_sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let alpha = 1.0 - norm_sq(a);
    let beta = 1.0 - norm_sq(b);
    2.0 * diff_sq / (alpha * beta)
}

/// Geodesic distance on the ball.
pub fn geodesic_distance(a: &BallPoint, b: &BallPoint) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(acosh1p(distance_delta(&a.0, &b.0)))
}

/// `exp_0(z) = tanh(||z||) z / ||z||`, with `exp_0(0) = 0`.
pub fn exp_map_origin(z: &TangentVector) -> BallPoint {
    let r = z.norm();
    if r == 0.0 {
        return BallPoint(vec![0.0; z.dim()]);
    }
    let scale = r.tanh().min(MAX_NORM) / r;
    BallPoint(z.0.iter().map(|c| c * scale).collect())
}

/// `log_0(p) = artanh(||p||) p / ||p||`, the inverse of [`exp_map_origin`].
pub fn log_map_origin(p: &BallPoint) -> TangentVector {
    let r = p.norm();
    if r == 0.0 {
        return TangentVector(vec![0.0; p.dim()]);
    }
    let scale = r.min(MAX_NORM).atanh() / r;
    TangentVector(p.0.iter().map(|c| c * scale).collect())
}

/// `λ_p = 2 / (1 - ||p||²)`.
pub fn conformal_factor(p: &BallPoint) -> f64 {
    2.0 / (1.0 - norm_sq(&p.0))
}

/// Pulls a gradient taken with respect to `exp_0(z)` back to `z`.
///
/// The Jacobian of the origin exponential map is
/// `(t/r) I + (t' - t/r) ẑẑᵀ` with `t = tanh r`; when the norm clamp is
/// active the radial derivative `t'` is zero.
pub fn exp_map_origin_vjp(z: &TangentVector, grad_point: &[f64]) -> Result<TangentVector> {
    check_dim(z.dim(), grad_point.len())?;
    let r = z.norm();
    if r == 0.0 {
        return Ok(TangentVector(grad_point.to_vec()));
    }
    let t = r.tanh();
    let (t, dt) = if t > MAX_NORM {
        (MAX_NORM, 0.0)
    } else {
        (t, 1.0 - t * t)
    };
    let iso = t / r;
    let radial = (dt - iso) * dot(&z.0, grad_point) / (r * r);
    Ok(TangentVector(
        grad_point
            .iter()
            .zip(&z.0)
            .map(|(g, zi)| iso * g + radial * zi)
            .collect(),
    ))
}

/// Geodesic distance from `exp_0(z)` to `target` and its gradient in `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGrad {
    pub distance: f64,
    pub grad: TangentVector,
    /// Set when `exp_0(z)` coincides with the target; the returned gradient
    /// is then the zero subgradient.
    pub degenerate: bool,
}

/// Distance and analytic gradient of `d(exp_0(z), target)` with respect to `z`.
pub fn geodesic_distance_grad(z: &TangentVector, target: &BallPoint) -> Result<DistanceGrad> {
    check_dim(target.dim(), z.dim())?;
    let x = exp_map_origin(z);
    let w = target.coords();
    let diff: Vec<f64> = x.0.iter().zip(w).map(|(a, b)| a - b).collect();
    let diff_sq = norm_sq(&diff);
    if diff_sq == 0.0 {
        return Ok(DistanceGrad {
            distance: 0.0,
            grad: TangentVector::zeros(z.dim()),
            degenerate: true,
        });
    }
    let alpha = 1.0 - norm_sq(&x.0);
    let beta = 1.0 - norm_sq(w);
    let delta = 2.0 * diff_sq / (alpha * beta);
    let distance = acosh1p(delta);
    // d/dδ acosh(1+δ) = 1/sqrt(δ(δ+2)); dδ/dx = 4/(αβ) (x - w + (A/α) x)
    let outer = 4.0 / (alpha * beta * (delta * (delta + 2.0)).sqrt());
    let radial = diff_sq / alpha;
    let grad_x: Vec<f64> = diff
        .iter()
        .zip(&x.0)
        .map(|(d, xi)| outer * (d + radial * xi))
        .collect();
    Ok(DistanceGrad {
        distance,
        grad: exp_map_origin_vjp(z, &grad_x)?,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(c: &[f64]) -> BallPoint {
        BallPoint::new(c.to_vec()).unwrap()
    }

    fn random_ball(rng: &mut ChaCha8Rng, n: usize, max_r: f64) -> BallPoint {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = norm(&v).max(1e-12);
        let target = rng.random_range(0.0..max_r);
        pt(&v.iter().map(|c| c * target / r).collect::<Vec<_>>())
    }

    #[test]
    fn mobius_identity_and_inverse() {
        let a = pt(&[0.3, -0.2, 0.5]);
        let zero = BallPoint::origin(3);
        assert_eq!(mobius_add(&a, &zero).unwrap(), a);
        let neg = pt(&[-0.3, 0.2, -0.5]);
        let sum = mobius_add(&a, &neg).unwrap();
        assert!(sum.norm() < 1e-12);
    }

    #[test]
    fn mobius_one_dimensional_formula() {
        let got = mobius_add(&pt(&[0.3, 0.0]), &pt(&[0.4, 0.0])).unwrap();
        // (0.3 + 0.4) / (1 + 0.3 * 0.4)
        assert_abs_diff_eq!(got.coords()[0], 0.625, epsilon = 1e-15);
        assert_eq!(got.coords()[1], 0.0);
    }

    #[test]
    fn mobius_dimension_mismatch() {
        let err = mobius_add(&pt(&[0.1]), &pt(&[0.1, 0.2])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn distance_closed_forms() {
        let x = pt(&[0.0, 0.5]);
        assert_eq!(geodesic_distance(&x, &x).unwrap(), 0.0);
        let d = geodesic_distance(&BallPoint::origin(2), &x).unwrap();
        assert_abs_diff_eq!(d, 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d, 1.0986123, epsilon = 1e-7);
    }

    #[test]
    fn distance_symmetric_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = random_ball(&mut rng, 5, 0.99);
            let b = random_ball(&mut rng, 5, 0.99);
            let ab = geodesic_distance(&a, &b).unwrap();
            let ba = geodesic_distance(&b, &a).unwrap();
            assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
        }
    }

    #[test]
    fn exp_map_values() {
        assert_eq!(exp_map_origin(&TangentVector::zeros(3)).coords(), &[0.0; 3]);
        let p = exp_map_origin(&TangentVector::new(vec![0.6, 0.8]));
        assert_abs_diff_eq!(p.norm(), 0.7615942, epsilon = 1e-7);
        assert_abs_diff_eq!(p.coords()[0] / p.coords()[1], 0.75, epsilon = 1e-12);
        let back = log_map_origin(&p);
        assert_abs_diff_eq!(back.norm(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn huge_tangent_is_clamped() {
        let p = exp_map_origin(&TangentVector::new(vec![1e6, -3e5]));
        assert!(p.norm() <= MAX_NORM + 1e-15);
        assert!(conformal_factor(&p).is_finite());
        let q = pt(&[2.0, 2.0]);
        assert!(q.norm() <= MAX_NORM + 1e-15);
        assert!(geodesic_distance(&p, &q).unwrap().is_finite());
    }

    #[test]
    fn non_finite_point_rejected() {
        assert!(BallPoint::new(vec![f64::NAN]).is_err());
        assert!(BallPoint::new(vec![]).is_err());
    }

    #[test]
    fn conformal_factor_values() {
        assert_eq!(conformal_factor(&BallPoint::origin(4)), 2.0);
        assert_abs_diff_eq!(conformal_factor(&pt(&[0.5, 0.0])), 8.0 / 3.0, epsilon = 1e-15);
        let mut last = 0.0;
        for i in 0..100 {
            let f = conformal_factor(&pt(&[i as f64 / 100.0]));
            assert!(f > last);
            last = f;
        }
    }

    fn central_diff(z: &[f64], b: &BallPoint, h: f64) -> Vec<f64> {
        (0..z.len())
            .map(|i| {
                let mut plus = z.to_vec();
                let mut minus = z.to_vec();
                plus[i] += h;
                minus[i] -= h;
                let dp = geodesic_distance(&exp_map_origin(&TangentVector::new(plus)), b).unwrap();
                let dm = geodesic_distance(&exp_map_origin(&TangentVector::new(minus)), b).unwrap();
                (dp - dm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn distance_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let b = random_ball(&mut rng, 4, 0.95);
            let g = geodesic_distance_grad(&TangentVector::new(z.clone()), &b).unwrap();
            assert!(!g.degenerate);
            let fd = central_diff(&z, &b, 1e-5);
            for (a, f) in g.grad.coords().iter().zip(&fd) {
                let scale = a.abs().max(f.abs());
                if scale < 1e-8 {
                    continue;
                }
                assert!((a - f).abs() / scale < 1e-4, "analytic {a} vs fd {f}");
            }
        }
    }

    #[test]
    fn distance_grad_radial_configuration_is_collinear() {
        let b = pt(&[0.6, 0.3, 0.0]);
        let z = TangentVector::new(vec![0.2, 0.1, 0.0]);
        let g = geodesic_distance_grad(&z, &b).unwrap();
        let gz = g.grad.coords();
        // cross product with z vanishes
        assert_abs_diff_eq!(gz[0] * 0.1 - gz[1] * 0.2, 0.0, epsilon = 1e-12);
        assert_eq!(gz[2], 0.0);
        // moving outward decreases the distance
        assert!(gz[0] < 0.0);
    }

    #[test]
    fn distance_grad_at_minimum_is_flagged() {
        let b = pt(&[0.4, -0.2]);
        let z = log_map_origin(&b);
        let g = geodesic_distance_grad(&z, &exp_map_origin(&z)).unwrap();
        assert!(g.degenerate);
        assert!(g.grad.is_zero());
        assert_eq!(g.distance, 0.0);
    }

    #[test]
    fn conformality_at_origin() {
        let u = TangentVector::new(vec![3e-4, -2e-4, 5e-4]);
        let v = TangentVector::new(vec![-1e-4, 4e-4, 2e-4]);
        let d = geodesic_distance(&exp_map_origin(&u), &exp_map_origin(&v)).unwrap();
        let diff: Vec<f64> = u.coords().iter().zip(v.coords()).map(|(a, b)| a - b).collect();
        let expected = 2.0 * norm(&diff);
        assert!((d - expected).abs() / expected < 1e-2);
    }

    proptest! {
        #[test]
        fn exp_log_roundtrip(z in proptest::collection::vec(-2.8f64..2.8, 1..8)) {
            let tv = TangentVector::new(z.clone());
            prop_assume!(tv.norm() <= 5.0);
            let back = log_map_origin(&exp_map_origin(&tv));
            for (a, b) in back.coords().iter().zip(&z) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn triangle_inequality(
            a in proptest::collection::vec(-0.57f64..0.57, 3),
            b in proptest::collection::vec(-0.57f64..0.57, 3),
            c in proptest::collection::vec(-0.57f64..0.57, 3),
        ) {
            let (a, b, c) = (pt(&a), pt(&b), pt(&c));
            let ac = geodesic_distance(&a, &c).unwrap();
            let ab = geodesic_distance(&a, &b).unwrap();
            let bc = geodesic_distance(&b, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!(ab >= 0.0);
        }
    }
}
