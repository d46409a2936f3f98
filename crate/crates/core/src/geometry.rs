//! Closed convex domains: membership, metric projection, inward normals and
//! the projected Euler step that stands in for the boundary local time.
//!
//! Box and polytope boundaries are only piecewise smooth. Every routine here
//! relies on convexity alone, which is what the reflection-coupling and
//! projection arguments need.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// `{x : <normal, x> >= offset}` with a unit `normal` pointing into the set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct HalfSpace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl HalfSpace {
    #[inline]
    fn slack(&self, x: &[f64]) -> f64 {
        dot(&self.normal, x) - self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Domain {
    FullSpace { dim: usize },
    HalfSpace { normal: Vec<f64>, offset: f64 },
    Ball { center: Vec<f64>, radius: f64 },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Polytope { facets: Vec<HalfSpace> },
}

const UNIT_TOL: f64 = 1e-12;
const DYKSTRA_MAX_SWEEPS: usize = 200_000;

impl Domain {
    pub fn full_space(dim: usize) -> Result<Self> {
        let d = Domain::FullSpace { dim };
        d.validate()?;
        Ok(d)
    }

    pub fn half_space(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let d = Domain::HalfSpace { normal, offset };
        d.validate()?;
        Ok(d)
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        let d = Domain::Ball { center, radius };
        d.validate()?;
        Ok(d)
    }

    pub fn cuboid(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let d = Domain::Box { lower, upper };
        d.validate()?;
        Ok(d)
    }

    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        Self::cuboid(vec![lower], vec![upper])
    }

    pub fn polytope(facets: Vec<HalfSpace>) -> Result<Self> {
        let d = Domain::Polytope { facets };
        d.validate()?;
        Ok(d)
    }

    /// Checks the structural invariants; deserialised domains must pass this before use.
    pub fn validate(&self) -> Result<()> {
        let unit = |n: &[f64]| (norm(n) - 1.0).abs() <= UNIT_TOL;
        match self {
            Domain::FullSpace { dim } => {
                if *dim == 0 {
                    return Err(Error::InvalidDomain("dimension must be positive".into()));
                }
            }
            Domain::HalfSpace { normal, offset } => {
                if normal.is_empty() || !unit(normal) || !offset.is_finite() {
                    return Err(Error::InvalidDomain("half-space normal must be a unit vector".into()));
                }
            }
            Domain::Ball { center, radius } => {
                if center.is_empty() || !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::InvalidDomain("ball needs a centre and a positive radius".into()));
                }
            }
            Domain::Box { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(Error::InvalidDomain("box bounds must have equal positive length".into()));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
                    return Err(Error::InvalidDomain("box needs lower_i < upper_i".into()));
                }
            }
            Domain::Polytope { facets } => {
                let Some(first) = facets.first() else {
                    return Err(Error::InvalidDomain("polytope needs at least one facet".into()));
                };
                let d = first.normal.len();
                if d == 0 || facets.iter().any(|f| f.normal.len() != d || !unit(&f.normal)) {
                    return Err(Error::InvalidDomain(
                        "polytope facet normals must be unit vectors of equal dimension".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        match self {
            Domain::FullSpace { dim } => *dim,
            Domain::HalfSpace { normal, .. } => normal.len(),
            Domain::Ball { center, .. } => center.len(),
            Domain::Box { lower, .. } => lower.len(),
            Domain::Polytope { facets } => facets[0].normal.len(),
        }
    }

    /// Diameter for bounded domains, 1.0 otherwise (sets the tolerance scale).
    pub fn scale(&self) -> f64 {
        match self {
            Domain::Ball { radius, .. } => 2.0 * radius,
            Domain::Box { lower, upper } => lower.iter().zip(upper).map(|(l, u)| (u - l) * (u - l)).sum::<f64>().sqrt(),
            _ => 1.0,
        }
    }

    pub fn default_tol(&self) -> f64 {
        1e-9 * self.scale()
    }

    pub fn is_full_space(&self) -> bool {
        matches!(self, Domain::FullSpace { .. })
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        check_dim(self.dimension(), x.len())?;
        Ok(self.contains_unchecked(x))
    }

    #[inline(always)]
    pub(crate) fn contains_unchecked(&self, x: &[f64]) -> bool {
        match self {
            Domain::FullSpace { .. } => true,
            Domain::HalfSpace { normal, offset } => dot(normal, x) >= *offset,
            Domain::Ball { center, radius } => dist_sq(x, center) <= radius * radius,
            Domain::Box { lower, upper } => {
                x.iter().zip(lower.iter().zip(upper)).all(|(v, (l, u))| *l <= *v && *v <= *u)
            }
            Domain::Polytope { facets } => facets.iter().all(|f| f.slack(x) >= 0.0),
        }
    }

    /// Metric projection onto the closed domain; returns the projected point and
    /// its distance from `x`.
    pub fn project(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_dim(self.dimension(), x.len())?;
        let mut y = x.to_vec();
        let d = self.project_in_place(&mut y);
        Ok((y, d))
    }

    /// In-place projection; returns `|x - y|`. Zero (and `x` untouched) when `x` is inside.
    #[inline]
    pub fn project_in_place(&self, x: &mut [f64]) -> f64 {
        if self.contains_unchecked(x) {
            return 0.0;
        }
        let original = x.to_vec();
        match self {
            Domain::FullSpace { .. } => {}
            Domain::HalfSpace { normal, offset } => {
                let s = dot(normal, x) - offset;
                axpy(-s, normal, x);
            }
            Domain::Ball { center, radius } => {
                let r = dist_sq(x, center).sqrt();
                let scale = radius / r;
                for (v, c) in x.iter_mut().zip(center) {
                    *v = c + (*v - c) * scale;
                }
            }
            Domain::Box { lower, upper } => {
                for (v, (l, u)) in x.iter_mut().zip(lower.iter().zip(upper)) {
                    *v = v.clamp(*l, *u);
                }
            }
            Domain::Polytope { facets } => dykstra(facets, x),
        }
        self.settle(x);
        dist_sq(x, &original).sqrt()
    }

    /// Pushes a projected point that landed a rounding error outside back into
    /// the closed domain.
    fn settle(&self, x: &mut [f64]) {
        let mut step = f64::EPSILON * self.scale().max(norm(x)).max(1.0);
        for _ in 0..64 {
            if self.contains_unchecked(x) {
                return;
            }
            match self {
                Domain::Ball { center, .. } => {
                    let r = dist_sq(x, center).sqrt();
                    let shrink = 1.0 - step / r.max(f64::MIN_POSITIVE);
                    for (v, c) in x.iter_mut().zip(center) {
                        *v = c + (*v - c) * shrink;
                    }
                }
                Domain::HalfSpace { normal, .. } => axpy(step, normal, x),
                Domain::Polytope { facets } => {
                    for f in facets {
                        if f.slack(x) < 0.0 {
                            axpy(step, &f.normal, x);
                        }
                    }
                }
                Domain::FullSpace { .. } | Domain::Box { .. } => return,
            }
            step *= 2.0;
        }
    }

    /// Distance from `x` to the boundary (depth when inside, distance to the
    /// domain when outside). Infinite for the full space.
    pub fn boundary_distance(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dimension(), x.len())?;
        if !self.contains_unchecked(x) {
            let (_, d) = self.project(x)?;
            return Ok(d);
        }
        Ok(match self {
            Domain::FullSpace { .. } => f64::INFINITY,
            Domain::HalfSpace { normal, offset } => dot(normal, x) - offset,
            Domain::Ball { center, radius } => radius - dist_sq(x, center).sqrt(),
            Domain::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(v, (l, u))| (v - l).min(u - v))
                .fold(f64::INFINITY, f64::min),
            Domain::Polytope { facets } => facets.iter().map(|f| f.slack(x)).fold(f64::INFINITY, f64::min),
        })
    }

    /// Inward unit normal at a boundary point. At corners of boxes and polytopes
    /// the normalised average of the active facet normals is returned.
    pub fn inward_normal(&self, x: &[f64], tol: f64) -> Result<Vec<f64>> {
        let distance = self.boundary_distance(x)?;
        if !(distance <= tol) {
            return Err(Error::NotOnBoundary { distance, tol });
        }
        let d = self.dimension();
        let n = match self {
            Domain::FullSpace { .. } => unreachable!("full space has no boundary"),
            Domain::HalfSpace { normal, .. } => normal.clone(),
            Domain::Ball { center, .. } => {
                let mut n: Vec<f64> = center.iter().zip(x).map(|(c, v)| c - v).collect();
                let len = norm(&n);
                if len == 0.0 {
                    return Err(Error::InvalidDomain("degenerate ball".into()));
                }
                n.iter_mut().for_each(|v| *v /= len);
                n
            }
            Domain::Box { lower, upper } => {
                let mut n = vec![0.0; d];
                for i in 0..d {
                    if x[i] - lower[i] <= tol {
                        n[i] += 1.0;
                    }
                    if upper[i] - x[i] <= tol {
                        n[i] -= 1.0;
                    }
                }
                normalise_or(n, || {
                    let mut e = vec![0.0; d];
                    e[0] = 1.0;
                    e
                })
            }
            Domain::Polytope { facets } => {
                let mut n = vec![0.0; d];
                let mut first = None;
                for f in facets.iter().filter(|f| f.slack(x) <= tol) {
                    first.get_or_insert_with(|| f.normal.clone());
                    axpy(1.0, &f.normal, &mut n);
                }
                let fallback = first.unwrap_or_else(|| facets[0].normal.clone());
                normalise_or(n, || fallback)
            }
        };
        Ok(n)
    }

    /// One projected step: `x' = project(x + delta)` and the local-time
    /// increment `|x + delta - x'|` (zero for moves that stay inside).
    pub fn reflect_step(&self, x: &[f64], delta: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_dim(self.dimension(), x.len())?;
        check_dim(self.dimension(), delta.len())?;
        let mut y: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
        let dl = self.project_in_place(&mut y);
        Ok((y, dl))
    }
}

/// Dykstra's alternating projections onto an intersection of half-spaces;
/// converges to the metric projection.
fn dykstra(facets: &[HalfSpace], x: &mut [f64]) {
    let d = x.len();
    let m = facets.len();
    let mut incr = vec![0.0; m * d];
    let mut y = x.to_vec();
    let mut z = vec![0.0; d];
    let scale = norm(x).max(1.0);
    for _ in 0..DYKSTRA_MAX_SWEEPS {
        let mut change = 0.0;
        for (k, f) in facets.iter().enumerate() {
            let p = &mut incr[k * d..(k + 1) * d];
            for i in 0..d {
                z[i] = y[i] + p[i];
            }
            let s = f.slack(&z);
            let prev = y.clone();
            y.copy_from_slice(&z);
            if s < 0.0 {
                axpy(-s, &f.normal, &mut y);
            }
            for i in 0..d {
                p[i] = z[i] - y[i];
            }
            change += dist_sq(&prev, &y);
        }
        if change.sqrt() <= 1e-15 * scale {
            break;
        }
    }
    x.copy_from_slice(&y);
}

fn normalise_or<F: FnOnce() -> Vec<f64>>(mut n: Vec<f64>, fallback: F) -> Vec<f64> {
    let len = norm(&n);
    if len <= UNIT_TOL {
        return fallback();
    }
    n.iter_mut().for_each(|v| *v /= len);
    n
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadrant() -> Domain {
        Domain::polytope(vec![
            HalfSpace { normal: vec![1.0, 0.0], offset: 0.0 },
            HalfSpace { normal: vec![0.0, 1.0], offset: 0.0 },
        ])
        .unwrap()
    }

    #[test]
    fn membership_examples() {
        assert!(Domain::full_space(2).unwrap().contains(&[5.0, 5.0]).unwrap());
        let ball = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
        assert!(ball.contains(&[1.0, 0.0]).unwrap());
        let unit_square = Domain::cuboid(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(!unit_square.contains(&[1.5, 0.5]).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let ball = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(ball.contains(&[0.0]), Err(Error::DimensionMismatch { expected: 2, got: 1 }));
        assert!(ball.project(&[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn invalid_domains_rejected() {
        assert!(Domain::cuboid(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(Domain::ball(vec![0.0], -1.0).is_err());
        assert!(Domain::half_space(vec![1.0, 1.0], 0.0).is_err());
        assert!(Domain::polytope(vec![]).is_err());
        assert!(Domain::full_space(0).is_err());
    }

    #[test]
    fn projection_examples() {
        let interval = Domain::interval(0.0, 1.0).unwrap();
        let (y, d) = interval.project(&[-0.3]).unwrap();
        assert_eq!(y, vec![0.0]);
        assert!((d - 0.3).abs() < 1e-15);

        let ball = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
        let (y, d) = ball.project(&[2.0, 0.0]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-15 && y[1] == 0.0);
        assert!((d - 1.0).abs() < 1e-15);

        let (y, d) = quadrant().project(&[-1.0, -1.0]).unwrap();
        assert!(y[0].abs() < 1e-15 && y[1].abs() < 1e-15);
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn normal_examples() {
        let interval = Domain::interval(0.0, 1.0).unwrap();
        assert_eq!(interval.inward_normal(&[0.0], 1e-9).unwrap(), vec![1.0]);
        let ball = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
        let n = ball.inward_normal(&[0.0, 1.0], 1e-9).unwrap();
        assert!(n[0].abs() < 1e-15 && (n[1] + 1.0).abs() < 1e-15);
        let square = Domain::cuboid(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let n = square.inward_normal(&[0.0, 0.0], 1e-9).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((n[0] - h).abs() < 1e-15 && (n[1] - h).abs() < 1e-15);
    }

    #[test]
    fn interior_point_is_not_on_boundary() {
        let square = Domain::cuboid(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        match square.inward_normal(&[0.5, 0.5], 1e-9) {
            Err(Error::NotOnBoundary { distance, .. }) => assert!((distance - 0.5).abs() < 1e-15),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Domain::full_space(1).unwrap().inward_normal(&[0.0], 1.0).is_err());
    }

    #[test]
    fn reflect_step_examples() {
        let interval = Domain::interval(0.0, 1.0).unwrap();
        let (y, dl) = interval.reflect_step(&[0.9], &[0.3]).unwrap();
        assert_eq!(y, vec![1.0]);
        assert!((dl - 0.2).abs() < 1e-12);

        let (y, dl) = interval.reflect_step(&[0.5], &[0.1]).unwrap();
        assert_eq!(y, vec![0.6]);
        assert_eq!(dl, 0.0);

        let ball = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
        let (y, dl) = ball.reflect_step(&[0.8, 0.0], &[0.5, 0.0]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-15 && y[1] == 0.0);
        assert!((dl - 0.3).abs() < 1e-12);
    }

    #[test]
    fn half_space_projection_lands_inside() {
        let n = [0.6, 0.8];
        let hs = Domain::half_space(n.to_vec(), 0.3).unwrap();
        for k in 0..200 {
            let x = [-(k as f64) * 0.37 + 0.1, 1.3 - 0.41 * k as f64];
            let (y, _) = hs.project(&x).unwrap();
            assert!(hs.contains(&y).unwrap());
        }
    }

    #[test]
    fn serde_tagged_record() {
        let d: Domain = serde_json::from_str(r#"{"kind":"ball","center":[0,0],"radius":1.0}"#).unwrap();
        assert_eq!(d, Domain::ball(vec![0.0, 0.0], 1.0).unwrap());
    }
}
