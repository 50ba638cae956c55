//! Minimal-set solvers, residuals, refinement and pose extraction.
//!
//! Everything here is a pure function of its inputs.

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};

/// Returned by [`sampson_residual`] when the epipolar gradient vanishes.
pub const SAMPSON_SENTINEL: f64 = 1e12;

/// A 2D line `a·x + b·y + c = 0` with unit normal `(a, b)`.
///
/// Canonical sign: `b > 0`, or `b == 0` and `a > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line2D {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Line2D {
    /// Builds a canonical line from an arbitrary (non-zero) normal and offset.
    pub fn from_normal(a: f64, b: f64, c: f64) -> Result<Self> {
        let norm = a.hypot(b);
        if !(norm > 1e-300) || !norm.is_finite() {
            return Err(Error::Degenerate("line normal has zero length".into()));
        }
        let (mut a, mut b, mut c) = (a / norm, b / norm, c / norm);
        if b < 0.0 || (b == 0.0 && a < 0.0) {
            a = -a;
            b = -b;
            c = -c;
        }
        Ok(Self { a, b, c })
    }

    /// Line through `point` with direction `dir`.
    pub fn through(point: [f64; 2], dir: [f64; 2]) -> Result<Self> {
        let (a, b) = (-dir[1], dir[0]);
        Self::from_normal(a, b, -(a * point[0] + b * point[1]))
    }

    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        self.a * p[0] + self.b * p[1] + self.c
    }

    /// Unit direction along the line.
    pub fn direction(&self) -> [f64; 2] {
        [self.b, -self.a]
    }
}

pub fn fit_line_2pts(p1: [f64; 2], p2: [f64; 2]) -> Result<Line2D> {
    let d = [p2[0] - p1[0], p2[1] - p1[1]];
    if d[0].hypot(d[1]) <= 1e-12 {
        return Err(Error::Degenerate("coincident points".into()));
    }
    Line2D::through(p1, d)
}

pub fn line_point_residual(line: &Line2D, p: [f64; 2]) -> f64 {
    line.signed_distance(p).abs()
}

/// Total-least-squares line: the normal is the minor eigenvector of the
/// centered scatter matrix and the line passes through the centroid.
pub fn refine_line_tls(points: &[[f64; 2]]) -> Result<Line2D> {
    if points.len() < 2 {
        return Err(Error::Degenerate("need at least two points".into()));
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx + syy <= 1e-24 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    // principal direction angle of the scatter ellipse
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (s, c) = theta.sin_cos();
    Line2D::through([cx, cy], [c, s])
}

/// Angle between two lines in degrees, in `[0, 90]`.
///
/// Evaluated as `atan2(|cross|, |dot|)` of the unit normals, which equals
/// `acos(|dot|)` but keeps full precision for nearly parallel lines.
pub fn line_angular_error(est: &Line2D, gt: &Line2D) -> f64 {
    let dot = (est.a * gt.a + est.b * gt.b).abs();
    let cross = (est.a * gt.b - est.b * gt.a).abs();
    cross.atan2(dot).to_degrees()
}

/// Rank-2 fundamental matrix with unit Frobenius norm and its
/// largest-magnitude entry positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix {
    pub m: Matrix3<f64>,
}

impl FundamentalMatrix {
    /// Projects an arbitrary 3×3 matrix onto the canonical rank-2 form.
    ///
    /// The SVD loses absolute precision on entries far below the largest
    /// one, so callers holding a badly scaled matrix should project in a
    /// conditioned frame and use [`FundamentalMatrix::normalized`].
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("non-finite matrix".into()));
        }
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut s = svd.singular_values;
        let min = s.imin();
        s[min] = 0.0;
        Self::normalized(&(u * Matrix3::from_diagonal(&s) * v_t))
    }

    /// Frobenius normalization and sign fixing of a matrix that is already
    /// rank 2.
    pub fn normalized(m: &Matrix3<f64>) -> Result<Self> {
        let norm = m.norm();
        if !(norm > 1e-300) || !norm.is_finite() {
            return Err(Error::Degenerate("zero fundamental matrix".into()));
        }
        let mut m = m / norm;
        let big = m.iamax_full();
        if m[big] < 0.0 {
            m = -m;
        }
        Ok(Self { m })
    }

    pub fn transpose(&self) -> Self {
        Self {
            m: self.m.transpose(),
        }
    }

    /// `x2ᵀ F x1` on homogeneous pixel coordinates.
    pub fn epipolar_constraint(&self, x1: [f64; 2], x2: [f64; 2]) -> f64 {
        let a = Vector3::new(x1[0], x1[1], 1.0);
        let b = Vector3::new(x2[0], x2[1], 1.0);
        b.dot(&(self.m * a))
    }
}

/// Similarity transform moving points to centroid 0 and RMS distance √2.
fn hartley_normalizer(points: impl Iterator<Item = [f64; 2]> + Clone) -> Result<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points
        .clone()
        .fold((0.0, 0.0), |acc, p| (acc.0 + p[0], acc.1 + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let ms = points
        .map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2))
        .sum::<f64>()
        / n;
    let rms = ms.sqrt();
    if !(rms > 1e-12) {
        return Err(Error::Degenerate("points coincide in one image".into()));
    }
    let s = std::f64::consts::SQRT_2 / rms;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply(t: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    [
        t[(0, 0)] * p[0] + t[(0, 2)],
        t[(1, 1)] * p[1] + t[(1, 2)],
    ]
}

/// Hartley-normalized linear solver. Accepts 8 or more correspondences
/// `(x1, y1, x2, y2)`; with more than 8 it is the least-squares refit.
pub fn fit_fundamental_8pt(corr: &[[f64; 4]]) -> Result<FundamentalMatrix> {
    if corr.len() < 8 {
        return Err(Error::Degenerate(format!(
            "need at least 8 correspondences, got {}",
            corr.len()
        )));
    }
    let t1 = hartley_normalizer(corr.iter().map(|c| [c[0], c[1]]))?;
    let t2 = hartley_normalizer(corr.iter().map(|c| [c[2], c[3]]))?;

    // normal equations accumulated in 9×9; for 8 rows pad with zeros so the
    // full right-singular basis is available
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    let mut design = SMatrix::<f64, 9, 9>::zeros();
    let dense = corr.len() <= 9;
    for (i, c) in corr.iter().enumerate() {
        let p = apply(&t1, [c[0], c[1]]);
        let q = apply(&t2, [c[2], c[3]]);
        let row = [
            q[0] * p[0],
            q[0] * p[1],
            q[0],
            q[1] * p[0],
            q[1] * p[1],
            q[1],
            p[0],
            p[1],
            1.0,
        ];
        if dense {
            for (j, v) in row.iter().enumerate() {
                design[(i, j)] = *v;
            }
        } else {
            for r in 0..9 {
                for s in 0..9 {
                    ata[(r, s)] += row[r] * row[s];
                }
            }
        }
    }
    let (null, sing) = if dense {
        let svd = design.svd(false, true);
        let v_t = svd.v_t.unwrap();
        let sv = svd.singular_values;
        let mut order: Vec<usize> = (0..9).collect();
        order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
        let null = v_t.row(order[8]).transpose();
        (null, (sv[order[0]], sv[order[7]]))
    } else {
        let eig = ata.symmetric_eigen();
        let ev = eig.eigenvalues;
        let mut order: Vec<usize> = (0..9).collect();
        order.sort_by(|&a, &b| ev[b].total_cmp(&ev[a]));
        let null = eig.eigenvectors.column(order[8]).into_owned();
        (
            null,
            (ev[order[0]].max(0.0).sqrt(), ev[order[7]].max(0.0).sqrt()),
        )
    };
    if !(sing.1 > 1e-10 * sing.0) {
        return Err(Error::Degenerate("rank-deficient design matrix".into()));
    }
    let f_norm = Matrix3::new(
        null[0], null[1], null[2], null[3], null[4], null[5], null[6], null[7], null[8],
    );
    // rank-2 in the normalized frame, then denormalize and canonicalize
    let f_norm = FundamentalMatrix::from_matrix(&f_norm)?.m;
    FundamentalMatrix::normalized(&(t2.transpose() * f_norm * t1))
}

/// Square root of the Sampson distance, in pixel units.
pub fn sampson_residual(f: &FundamentalMatrix, x1: [f64; 2], x2: [f64; 2]) -> f64 {
    let a = Vector3::new(x1[0], x1[1], 1.0);
    let b = Vector3::new(x2[0], x2[1], 1.0);
    let fa = f.m * a;
    let ftb = f.m.transpose() * b;
    // both groupings are commutative sums, so swapping the images and
    // transposing F reproduces the value bit for bit
    let num = 0.5 * (b.dot(&fa) + a.dot(&ftb));
    let den = (fa[0] * fa[0] + fa[1] * fa[1]) + (ftb[0] * ftb[0] + ftb[1] * ftb[1]);
    if den < 1e-20 {
        return SAMPSON_SENTINEL;
    }
    (num * num / den).sqrt()
}

/// Rotation and unit translation direction with `X₂ = R·X₁ + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation_dir: Vector3<f64>,
}

impl RelativePose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let n = translation.norm();
        if !(n > 1e-300) {
            return Err(Error::PoseRecovery("zero translation".into()));
        }
        Ok(Self {
            rotation,
            translation_dir: translation / n,
        })
    }
}

pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t[2], t[1], t[2], 0.0, -t[0], -t[1], t[0], 0.0)
}

/// `F = K₂⁻ᵀ [t]ₓ R K₁⁻¹`.
pub fn fundamental_from_pose(
    pose: &RelativePose,
    k1: &Matrix3<f64>,
    k2: &Matrix3<f64>,
) -> Result<FundamentalMatrix> {
    let k1i = k1
        .try_inverse()
        .ok_or_else(|| Error::Config("singular intrinsics".into()))?;
    let k2i = k2
        .try_inverse()
        .ok_or_else(|| Error::Config("singular intrinsics".into()))?;
    let e = FundamentalMatrix::from_matrix(&(skew(&pose.translation_dir) * pose.rotation))?.m;
    FundamentalMatrix::normalized(&(k2i.transpose() * e * k1i))
}

/// Depths of the midpoint triangulation of normalized rays in both cameras.
fn midpoint_depths(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    x1: &Vector3<f64>,
    x2: &Vector3<f64>,
) -> Option<(f64, f64)> {
    // camera 2 centre in frame 1 and its ray direction
    let c2 = -(r.transpose() * t);
    let d1 = *x1;
    let d2 = r.transpose() * x2;
    let a = d1.dot(&d1);
    let b = d1.dot(&d2);
    let c = d2.dot(&d2);
    let w = -c2;
    let d = d1.dot(&w);
    let e = d2.dot(&w);
    let den = a * c - b * b;
    if den.abs() < 1e-14 * a * c {
        return None;
    }
    // minimise |λ1 d1 − (c2 + λ2 d2)|
    let l1 = (b * e - c * d) / den;
    let l2 = (a * e - b * d) / den;
    let p = (d1 * l1 + (c2 + d2 * l2)) * 0.5;
    let p2 = r * p + t;
    Some((p[2], p2[2]))
}

/// Decomposes `E = K₂ᵀ F K₁` into the four `(R, t)` candidates and keeps the
/// one with the most points in front of both cameras.
pub fn pose_from_fundamental(
    f: &FundamentalMatrix,
    k1: &Matrix3<f64>,
    k2: &Matrix3<f64>,
    inliers: &[[f64; 4]],
) -> Result<RelativePose> {
    if inliers.is_empty() {
        return Err(Error::PoseRecovery("no correspondences for cheirality".into()));
    }
    let e = k2.transpose() * f.m * k1;
    let svd = e.svd(true, true);
    let (mut u, mut v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    // sort singular values descending so the null direction is the last column
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let perm = Matrix3::from_fn(|i, j| if order[j] == i { 1.0 } else { 0.0 });
    u *= perm;
    v_t = perm.transpose() * v_t;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r_a = u * w * v_t;
    let r_b = u * w.transpose() * v_t;
    let t = u.column(2).into_owned();
    let candidates = [(r_a, t), (r_a, -t), (r_b, t), (r_b, -t)];

    let k1i = k1
        .try_inverse()
        .ok_or_else(|| Error::Config("singular intrinsics".into()))?;
    let k2i = k2
        .try_inverse()
        .ok_or_else(|| Error::Config("singular intrinsics".into()))?;
    let rays: Vec<(Vector3<f64>, Vector3<f64>)> = inliers
        .iter()
        .map(|c| {
            (
                k1i * Vector3::new(c[0], c[1], 1.0),
                k2i * Vector3::new(c[2], c[3], 1.0),
            )
        })
        .collect();

    let mut best: Option<(usize, usize)> = None;
    for (ci, (r, t)) in candidates.iter().enumerate() {
        let votes = rays
            .iter()
            .filter(|(x1, x2)| {
                matches!(midpoint_depths(r, t, x1, x2), Some((z1, z2)) if z1 > 0.0 && z2 > 0.0)
            })
            .count();
        if votes > 0 && best.is_none_or(|(_, v)| votes > v) {
            best = Some((ci, votes));
        }
    }
    let (ci, _) = best.ok_or_else(|| {
        Error::PoseRecovery("no candidate places any point in front of both cameras".into())
    })?;
    let (r, t) = candidates[ci];
    RelativePose::new(r, t)
}

/// `(rotation error, translation direction error)` in degrees. The
/// translation error ignores sign.
pub fn pose_errors(est: &RelativePose, gt: &RelativePose) -> (f64, f64) {
    let cos_r = (((gt.rotation.transpose() * est.rotation).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let cos_t = gt
        .translation_dir
        .dot(&est.translation_dir)
        .abs()
        .clamp(0.0, 1.0);
    (cos_r.acos().to_degrees(), cos_t.acos().to_degrees())
}

/// Rotation by `angle` radians about `axis` (Rodrigues).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.normalize();
    let kx = skew(&k);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}
