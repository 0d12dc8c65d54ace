use super::{CalibError, Result};
use crate::linalg::{normalize_2d, skew, svd3, svd_right};
use nalgebra::{DMatrix, DVector, Matrix3, Point2, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

/// Below this `σ₈ / σ₁` the 8-point design matrix is treated as rank deficient.
pub const FUNDAMENTAL_NULLITY_RATIO: f64 = 1e-8;

/// Rank-2 matrix `T` with `m′ᵀ T m = 0` for corresponding pixels `m` (first
/// image) and `m′` (second image), stored with unit Frobenius norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FundamentalMatrix {
    pub entries: Matrix3<f64>,
}

impl FundamentalMatrix {
    /// Scales to unit norm with a deterministic sign (largest-magnitude entry positive).
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        let n = m.norm();
        let mut e = if n > 0.0 { m / n } else { m };
        let big = e.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if big < 0.0 {
            e = -e;
        }
        Self { entries: e }
    }

    /// Nearest rank-2 matrix (smallest singular value zeroed), normalized.
    pub fn rank2(m: &Matrix3<f64>) -> Self {
        let (u, mut s, v) = svd3(m);
        s[2] = 0.0;
        Self::from_matrix(u * Matrix3::from_diagonal(&s) * v.transpose())
    }

    pub fn transpose(&self) -> Self {
        Self { entries: self.entries.transpose() }
    }
}

fn hom(p: &Point2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

fn point_line_distance(p: &Point2<f64>, l: &Vector3<f64>) -> f64 {
    let n = (l.x * l.x + l.y * l.y).sqrt();
    if n == 0.0 {
        return f64::INFINITY;
    }
    (l.dot(&hom(p))).abs() / n
}

/// Mean of the two pixel distances `d(m′, T m)` and `d(m, Tᵀ m′)`.
pub fn epipolar_distance(t: &FundamentalMatrix, m: &Point2<f64>, mp: &Point2<f64>) -> f64 {
    let l2 = t.entries * hom(m);
    let l1 = t.entries.transpose() * hom(mp);
    0.5 * (point_line_distance(mp, &l2) + point_line_distance(m, &l1))
}

/// `Σ d²(m′, T m) + d²(m, Tᵀ m′)`.
pub fn symmetric_cost(t: &Matrix3<f64>, pairs: &[(Point2<f64>, Point2<f64>)]) -> f64 {
    pairs
        .iter()
        .map(|(m, mp)| {
            let a = point_line_distance(mp, &(t * hom(m)));
            let b = point_line_distance(m, &(t.transpose() * hom(mp)));
            a * a + b * b
        })
        .sum()
}

/// Normalized design-matrix solve shared by the linear estimator and the
/// calibrated two-view fallback.
pub(crate) struct LinearSystem {
    /// Candidate solutions (from the right null space), in pixel coordinates.
    pub null_space: Vec<Matrix3<f64>>,
    /// The two smallest right singular vectors, smallest first, in pixel coordinates.
    pub basis: [Matrix3<f64>; 2],
}

pub(crate) fn linear_system(pairs: &[(Point2<f64>, Point2<f64>)]) -> LinearSystem {
    let a_pts: Vec<Point2<f64>> = pairs.iter().map(|p| p.0).collect();
    let b_pts: Vec<Point2<f64>> = pairs.iter().map(|p| p.1).collect();
    let t1 = normalize_2d(&a_pts);
    let t2 = normalize_2d(&b_pts);
    let mut a = DMatrix::zeros(pairs.len(), 9);
    for (i, (m, mp)) in pairs.iter().enumerate() {
        let x = t1 * hom(m);
        let y = t2 * hom(mp);
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = y[r] * x[c];
            }
        }
    }
    let (sv, v) = svd_right(&a);
    let max = sv[0].max(f64::MIN_POSITIVE);
    let nullity = sv.iter().skip(1).filter(|s| **s / max < FUNDAMENTAL_NULLITY_RATIO).count().max(1);
    let member = |k: usize| {
        let col = v.column(8 - k);
        let fnorm = Matrix3::from_fn(|r, c| col[3 * r + c]);
        t2.transpose() * fnorm * t1
    };
    let null_space = (0..nullity).map(member).collect();
    LinearSystem { null_space, basis: [member(0), member(1)] }
}

/// Normalized 8-point estimate with rank-2 enforcement, no refinement.
pub fn estimate_fundamental_linear(pairs: &[(Point2<f64>, Point2<f64>)]) -> Result<FundamentalMatrix> {
    if pairs.len() < 8 {
        return Err(CalibError::InsufficientData(format!("{} pairs, need at least 8", pairs.len())));
    }
    let sys = linear_system(pairs);
    if sys.null_space.len() > 1 {
        return Err(CalibError::Degenerate(format!("epipolar design matrix has a {}-dimensional null space", sys.null_space.len())));
    }
    Ok(FundamentalMatrix::rank2(&sys.null_space[0]))
}

/// Linear estimate followed by [`refine_fundamental`].
pub fn estimate_fundamental(pairs: &[(Point2<f64>, Point2<f64>)]) -> Result<FundamentalMatrix> {
    let t0 = estimate_fundamental_linear(pairs)?;
    Ok(refine_fundamental(&t0, pairs)?.matrix)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub matrix: FundamentalMatrix,
    /// Cost of the input followed by the cost after every accepted step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl RefineOutcome {
    pub fn initial_cost(&self) -> f64 {
        self.cost_history[0]
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().expect("non-empty")
    }
}

const MAX_ITERATIONS: usize = 200;
const RELATIVE_TOLERANCE: f64 = 1e-10;

/// Rank-2 factorization `T = A U diag(1, σ, 0) Vᵀ B` with rotations `U`, `V`
/// perturbed on the right by `exp([ω]ₓ)`, `exp([φ]ₓ)`. `A`, `B` are the
/// fixed pixel normalizations.
#[derive(Clone, Copy)]
struct Param {
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    sigma: f64,
}

impl Param {
    fn core(&self) -> Matrix3<f64> {
        self.u * Matrix3::from_diagonal(&Vector3::new(1.0, self.sigma, 0.0)) * self.v.transpose()
    }

    fn retract(&self, d: &SVector<f64, 7>) -> Param {
        let w = Vector3::new(d[0], d[1], d[2]);
        let p = Vector3::new(d[3], d[4], d[5]);
        Param {
            u: self.u * nalgebra::Rotation3::new(w).into_inner(),
            v: self.v * nalgebra::Rotation3::new(p).into_inner(),
            sigma: self.sigma + d[6],
        }
    }
}

/// Minimizes the symmetric epipolar cost over rank-2 matrices (7 degrees of
/// freedom) by Levenberg-Marquardt. Never returns a matrix costlier than `t0`.
pub fn refine_fundamental(t0: &FundamentalMatrix, pairs: &[(Point2<f64>, Point2<f64>)]) -> Result<RefineOutcome> {
    if pairs.len() < 8 {
        return Err(CalibError::InsufficientData(format!("{} pairs, need at least 8", pairs.len())));
    }
    let a_pts: Vec<Point2<f64>> = pairs.iter().map(|p| p.0).collect();
    let b_pts: Vec<Point2<f64>> = pairs.iter().map(|p| p.1).collect();
    let t1 = normalize_2d(&a_pts);
    let t2 = normalize_2d(&b_pts);
    let to_pixel = |core: &Matrix3<f64>| t2.transpose() * core * t1;
    let inv1 = t1.try_inverse().expect("similarity");
    let inv2 = t2.try_inverse().expect("similarity");
    let normalized = inv2.transpose() * t0.entries * inv1;
    let (mut u, s, mut v) = svd3(&normalized);
    if !(s[0] > 0.0) {
        return Err(CalibError::Degenerate("zero matrix".into()));
    }
    if u.determinant() < 0.0 {
        u.set_column(2, &(-u.column(2)));
    }
    if v.determinant() < 0.0 {
        v.set_column(2, &(-v.column(2)));
    }
    let mut param = Param { u, v, sigma: s[1] / s[0] };

    let mut best = t0.clone();
    let mut cost = symmetric_cost(&t0.entries, pairs);
    let mut history = vec![cost];
    if !cost.is_finite() {
        return Err(CalibError::Degenerate("initial matrix gives degenerate epipolar lines".into()));
    }
    let mut lambda = 1e-3;
    let mut converged = cost == 0.0;
    let mut iterations = 0;
    while !converged && iterations < MAX_ITERATIONS {
        iterations += 1;
        let (r, j) = residuals_and_jacobian(&param, &t1, &t2, pairs);
        let jtj: SMatrix<f64, 7, 7> = j.transpose() * &j;
        let jtr: SVector<f64, 7> = j.transpose() * &r;
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = jtj;
            for k in 0..7 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = param.retract(&step);
            let pixel = to_pixel(&candidate.core());
            let c = symmetric_cost(&pixel, pairs);
            if c < cost {
                let rel = (cost - c) / cost;
                param = candidate;
                cost = c;
                history.push(c);
                best = FundamentalMatrix::from_matrix(pixel);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < RELATIVE_TOLERANCE {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No decrease is reachable from here: a local minimum to working precision.
            converged = true;
        }
    }
    Ok(RefineOutcome { matrix: best, cost_history: history, iterations, converged })
}

fn residuals_and_jacobian(
    param: &Param,
    t1: &Matrix3<f64>,
    t2: &Matrix3<f64>,
    pairs: &[(Point2<f64>, Point2<f64>)],
) -> (DVector<f64>, nalgebra::OMatrix<f64, nalgebra::Dyn, nalgebra::U7>) {
    let f = t2.transpose() * param.core() * t1;
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, param.sigma, 0.0));
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    let mut df = [Matrix3::zeros(); 7];
    for k in 0..3 {
        df[k] = t2.transpose() * (param.u * skew(&basis[k]) * d * param.v.transpose()) * t1;
        df[3 + k] = t2.transpose() * (-(param.u * d * skew(&basis[k]) * param.v.transpose())) * t1;
    }
    df[6] = t2.transpose() * (param.u * Matrix3::from_diagonal(&Vector3::new(0.0, 1.0, 0.0)) * param.v.transpose()) * t1;

    let n = pairs.len();
    let mut r = DVector::zeros(2 * n);
    let mut j = nalgebra::OMatrix::<f64, nalgebra::Dyn, nalgebra::U7>::zeros(2 * n);
    for (i, (m, mp)) in pairs.iter().enumerate() {
        let x = hom(m);
        let y = hom(mp);
        let e = y.dot(&(f * x));
        let l = f * x;
        let lp = f.transpose() * y;
        let n1 = (l.x * l.x + l.y * l.y).sqrt();
        let n2 = (lp.x * lp.x + lp.y * lp.y).sqrt();
        r[2 * i] = e / n1;
        r[2 * i + 1] = e / n2;
        for (k, dfk) in df.iter().enumerate() {
            let de = y.dot(&(dfk * x));
            let dl = dfk * x;
            let dlp = dfk.transpose() * y;
            j[(2 * i, k)] = de / n1 - e * (l.x * dl.x + l.y * dl.y) / (n1 * n1 * n1);
            j[(2 * i + 1, k)] = de / n2 - e * (lp.x * dlp.x + lp.y * dlp.y) / (n2 * n2 * n2);
        }
    }
    (r, j)
}
