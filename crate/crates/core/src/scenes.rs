//! Synthetic scenes for both estimation tasks and the `SCENE v1` text format.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::{Error, Result};
use crate::geometry::{
    axis_angle, fit_fundamental_8pt, fit_line_2pts, fundamental_from_pose, line_point_residual,
    refine_line_tls, sampson_residual, FundamentalMatrix, Line2D, RelativePose,
};

pub const LINE_EPSILON: f64 = 0.1;
/// Half-width of the uniform perpendicular inlier offset: a band 0.1 wide.
pub const LINE_NOISE: f64 = 0.05;
pub const LINE_EXTENT: f64 = 10.0;
pub const EPIPOLAR_EPSILON: f64 = 4.0;
pub const FOCAL: f64 = 600.0;
pub const PRINCIPAL: [f64; 2] = [320.0, 240.0];
pub const IMAGE_SIZE: [f64; 2] = [640.0, 480.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Line2d,
    Fundamental,
}

impl Task {
    pub fn tag(self) -> &'static str {
        match self {
            Task::Line2d => "line2d",
            Task::Fundamental => "fundamental",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "line2d" => Ok(Task::Line2d),
            "fundamental" => Ok(Task::Fundamental),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }

    /// Size `m` of a minimal set.
    pub fn minimal_set_size(self) -> usize {
        match self {
            Task::Line2d => 2,
            Task::Fundamental => 8,
        }
    }

    /// Error reported for scenes where estimation failed outright.
    pub fn failure_error_deg(self) -> f64 {
        match self {
            Task::Line2d => 90.0,
            Task::Fundamental => 180.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hypothesis {
    Line(Line2D),
    Fundamental(FundamentalMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Line(Line2D),
    Epipolar {
        pose: RelativePose,
        k1: Matrix3<f64>,
        k2: Matrix3<f64>,
        f: FundamentalMatrix,
    },
}

/// One estimation problem.
///
/// `features` is the N×c network input. For the fundamental task the raw
/// pixel correspondences used by the solvers are kept in `pixels`; for the
/// line task the features are the coordinates themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub task: Task,
    pub n: usize,
    pub c: usize,
    pub epsilon: f64,
    pub features: Vec<f64>,
    pub pixels: Vec<[f64; 4]>,
    pub ground_truth: GroundTruth,
    pub true_inlier_mask: Vec<bool>,
}

impl SceneData {
    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.c..(i + 1) * self.c]
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        let r = self.feature_row(i);
        [r[0], r[1]]
    }

    pub fn minimal_set_size(&self) -> usize {
        self.task.minimal_set_size()
    }

    pub fn true_inlier_count(&self) -> usize {
        self.true_inlier_mask.iter().filter(|&&b| b).count()
    }

    /// Solves the minimal (or larger) set given by `indices`.
    pub fn solve(&self, indices: &[usize]) -> Result<Hypothesis> {
        match self.task {
            Task::Line2d => {
                if indices.len() == 2 {
                    fit_line_2pts(self.point(indices[0]), self.point(indices[1])).map(Hypothesis::Line)
                } else {
                    let pts: Vec<_> = indices.iter().map(|&i| self.point(i)).collect();
                    refine_line_tls(&pts).map(Hypothesis::Line)
                }
            }
            Task::Fundamental => {
                let corr: Vec<_> = indices.iter().map(|&i| self.pixels[i]).collect();
                fit_fundamental_8pt(&corr).map(Hypothesis::Fundamental)
            }
        }
    }

    pub fn residual(&self, h: &Hypothesis, i: usize) -> f64 {
        match h {
            Hypothesis::Line(l) => line_point_residual(l, self.point(i)),
            Hypothesis::Fundamental(f) => {
                let p = self.pixels[i];
                sampson_residual(f, [p[0], p[1]], [p[2], p[3]])
            }
        }
    }

    pub fn residuals_into(&self, h: &Hypothesis, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.n).map(|i| self.residual(h, i)));
    }

    pub fn residuals(&self, h: &Hypothesis) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n);
        self.residuals_into(h, &mut out);
        out
    }

    pub fn inlier_count(&self, h: &Hypothesis) -> usize {
        (0..self.n)
            .filter(|&i| self.residual(h, i) <= self.epsilon)
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.n * self.c || self.true_inlier_mask.len() != self.n {
            return Err(Error::Dimension("scene arrays disagree with N and c".into()));
        }
        if self.task == Task::Fundamental && self.pixels.len() != self.n {
            return Err(Error::Dimension("pixel rows disagree with N".into()));
        }
        if self.n < self.minimal_set_size() {
            return Err(Error::Config("fewer points than a minimal set".into()));
        }
        if !self.features.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("non-finite feature".into()));
        }
        Ok(())
    }
}

fn inlier_count_for(outlier_rate: f64, n: usize) -> usize {
    ((1.0 - outlier_rate) * n as f64).round() as usize
}

/// Parameter interval of the line `p + s·d` inside the square `[0, L]²`.
fn clip_to_square(p: [f64; 2], d: [f64; 2]) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..2 {
        if d[k].abs() < 1e-15 {
            if p[k] < 0.0 || p[k] > LINE_EXTENT {
                return None;
            }
            continue;
        }
        let a = (0.0 - p[k]) / d[k];
        let b = (LINE_EXTENT - p[k]) / d[k];
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }
    (hi > lo).then_some((lo, hi))
}

/// Line-fitting scene in the 10×10 square with `ε = 0.1` and inliers
/// offset by at most [`LINE_NOISE`].
pub fn gen_line_scene(outlier_rate: f64, n_points: usize, seed: u64) -> Result<SceneData> {
    gen_line_scene_with_noise(outlier_rate, n_points, LINE_NOISE, seed)
}

/// As [`gen_line_scene`] with inliers displaced uniformly in
/// `[-noise, noise]` perpendicular to the line.
pub fn gen_line_scene_with_noise(
    outlier_rate: f64,
    n_points: usize,
    noise: f64,
    seed: u64,
) -> Result<SceneData> {
    if !(0.0..=LINE_EPSILON).contains(&noise) {
        return Err(Error::Config(format!("line noise {noise} outside [0, ε]")));
    }
    if !(0.0..1.0).contains(&outlier_rate) {
        return Err(Error::Config(format!("outlier rate {outlier_rate} outside [0, 1)")));
    }
    let n_in = inlier_count_for(outlier_rate, n_points);
    if n_in < 2 {
        return Err(Error::Config("fewer than two inliers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (anchor, dir, lo, hi) = loop {
        let anchor = [rng.gen::<f64>() * LINE_EXTENT, rng.gen::<f64>() * LINE_EXTENT];
        let theta = rng.gen::<f64>() * std::f64::consts::PI;
        let dir = [theta.cos(), theta.sin()];
        if let Some((lo, hi)) = clip_to_square(anchor, dir) {
            if hi - lo >= 2.0 {
                break (anchor, dir, lo, hi);
            }
        }
    };
    let line = Line2D::through(anchor, dir)?;
    let normal = [line.a, line.b];

    let mut rows: Vec<([f64; 2], bool)> = Vec::with_capacity(n_points);
    while rows.len() < n_in {
        let s = lo + rng.gen::<f64>() * (hi - lo);
        let off = if noise > 0.0 {
            rng.gen_range(-noise..=noise)
        } else {
            0.0
        };
        let p = [
            anchor[0] + s * dir[0] + off * normal[0],
            anchor[1] + s * dir[1] + off * normal[1],
        ];
        if (0.0..=LINE_EXTENT).contains(&p[0])
            && (0.0..=LINE_EXTENT).contains(&p[1])
            && line_point_residual(&line, p) <= LINE_EPSILON
        {
            rows.push((p, true));
        }
    }
    while rows.len() < n_points {
        rows.push((
            [rng.gen::<f64>() * LINE_EXTENT, rng.gen::<f64>() * LINE_EXTENT],
            false,
        ));
    }
    rows.shuffle(&mut rng);
    Ok(SceneData {
        task: Task::Line2d,
        n: n_points,
        c: 2,
        epsilon: LINE_EPSILON,
        features: rows.iter().flat_map(|(p, _)| *p).collect(),
        pixels: Vec::new(),
        ground_truth: GroundTruth::Line(line),
        true_inlier_mask: rows.iter().map(|(_, m)| *m).collect(),
    })
}

pub fn intrinsics() -> Matrix3<f64> {
    Matrix3::new(
        FOCAL,
        0.0,
        PRINCIPAL[0],
        0.0,
        FOCAL,
        PRINCIPAL[1],
        0.0,
        0.0,
        1.0,
    )
}

fn in_image(p: [f64; 2]) -> bool {
    (0.0..=IMAGE_SIZE[0]).contains(&p[0]) && (0.0..=IMAGE_SIZE[1]).contains(&p[1])
}

fn normalize_pixel(p: [f64; 2]) -> [f64; 2] {
    [
        p[0] / (IMAGE_SIZE[0] / 2.0) - 1.0,
        p[1] / (IMAGE_SIZE[1] / 2.0) - 1.0,
    ]
}

fn project(k: &Matrix3<f64>, x: &Vector3<f64>) -> [f64; 2] {
    let u = k * x;
    [u[0] / u[2], u[1] / u[2]]
}

/// Two-view scene with shared intrinsics, feature channels
/// `(x1, y1, x2, y2)` normalized to `[-1, 1]` plus a match-score channel.
pub fn gen_epipolar_scene(
    n_points: usize,
    outlier_rate: f64,
    pixel_noise_sigma: f64,
    seed: u64,
) -> Result<SceneData> {
    if !(0.0..1.0).contains(&outlier_rate) {
        return Err(Error::Config(format!("outlier rate {outlier_rate} outside [0, 1)")));
    }
    if !(pixel_noise_sigma >= 0.0) {
        return Err(Error::Config("negative pixel noise".into()));
    }
    let n_in = inlier_count_for(outlier_rate, n_points);
    if n_in < 8 {
        return Err(Error::Config("fewer than eight inliers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, pixel_noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let k = intrinsics();
    let kinv = k.try_inverse().expect("intrinsics are invertible");

    for _attempt in 0..100 {
        let axis: [f64; 3] = UnitSphere.sample(&mut rng);
        let angle = rng.gen::<f64>() * 45f64.to_radians();
        let rotation = axis_angle(&Vector3::from(axis), angle);
        let t: [f64; 3] = UnitSphere.sample(&mut rng);
        let t = Vector3::from(t);
        let pose = RelativePose::new(rotation, t)?;
        let f = fundamental_from_pose(&pose, &k, &k)?;

        let mut pixels = Vec::with_capacity(n_points);
        let mut tries = 0usize;
        while pixels.len() < n_in && tries < 200 * n_points {
            tries += 1;
            let u = [rng.gen::<f64>() * IMAGE_SIZE[0], rng.gen::<f64>() * IMAGE_SIZE[1]];
            let depth = rng.gen_range(4.0..10.0);
            let x1 = kinv * Vector3::new(u[0], u[1], 1.0) * depth;
            let x2 = rotation * x1 + t;
            if x2[2] <= 0.5 {
                continue;
            }
            let mut p1 = project(&k, &x1);
            let mut p2 = project(&k, &x2);
            if pixel_noise_sigma > 0.0 {
                p1 = [p1[0] + noise.sample(&mut rng), p1[1] + noise.sample(&mut rng)];
                p2 = [p2[0] + noise.sample(&mut rng), p2[1] + noise.sample(&mut rng)];
            }
            if !in_image(p1) || !in_image(p2) {
                continue;
            }
            if sampson_residual(&f, p1, p2) > EPIPOLAR_EPSILON {
                continue;
            }
            pixels.push(([p1[0], p1[1], p2[0], p2[1]], true));
        }
        if pixels.len() < n_in {
            continue;
        }
        // the inlier set must admit a non-degenerate 8-point solve
        let corr: Vec<[f64; 4]> = pixels.iter().map(|(p, _)| *p).collect();
        if fit_fundamental_8pt(&corr).is_err() {
            continue;
        }
        while pixels.len() < n_points {
            let p = [
                rng.gen::<f64>() * IMAGE_SIZE[0],
                rng.gen::<f64>() * IMAGE_SIZE[1],
                rng.gen::<f64>() * IMAGE_SIZE[0],
                rng.gen::<f64>() * IMAGE_SIZE[1],
            ];
            pixels.push((p, false));
        }
        pixels.shuffle(&mut rng);

        let mut features = Vec::with_capacity(n_points * 5);
        for (p, inlier) in &pixels {
            let a = normalize_pixel([p[0], p[1]]);
            let b = normalize_pixel([p[2], p[3]]);
            let score = if *inlier {
                (-sampson_residual(&f, [p[0], p[1]], [p[2], p[3]]) / EPIPOLAR_EPSILON).exp()
            } else {
                rng.gen::<f64>()
            };
            features.extend_from_slice(&[a[0], a[1], b[0], b[1], score]);
        }
        return Ok(SceneData {
            task: Task::Fundamental,
            n: n_points,
            c: 5,
            epsilon: EPIPOLAR_EPSILON,
            features,
            true_inlier_mask: pixels.iter().map(|(_, m)| *m).collect(),
            pixels: pixels.into_iter().map(|(p, _)| p).collect(),
            ground_truth: GroundTruth::Epipolar { pose, k1: k, k2: k, f },
        });
    }
    Err(Error::Generation(
        "no usable relative pose after 100 attempts".into(),
    ))
}

/// Generates a scene of either task. `pixel_noise_sigma` is ignored for lines.
pub fn gen_scene(
    task: Task,
    n_points: usize,
    outlier_rate: f64,
    pixel_noise_sigma: f64,
    seed: u64,
) -> Result<SceneData> {
    match task {
        Task::Line2d => gen_line_scene(outlier_rate, n_points, seed),
        Task::Fundamental => gen_epipolar_scene(n_points, outlier_rate, pixel_noise_sigma, seed),
    }
}

const SCENE_HEADER: &str = "SCENE v1";

fn fmt_real(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

fn push_reals(out: &mut String, vals: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in vals {
        if !first {
            out.push(' ');
        }
        first = false;
        fmt_real(out, v);
    }
    out.push('\n');
}

fn mat_values(m: &Matrix3<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..3).flat_map(move |r| (0..3).map(move |c| m[(r, c)]))
}

/// Serializes a scene; every real is written with 17 significant digits.
pub fn scene_to_string(s: &SceneData) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SCENE_HEADER} {}", s.task.tag());
    let _ = writeln!(out, "n {}", s.n);
    let _ = writeln!(out, "c {}", s.c);
    out.push_str("epsilon ");
    push_reals(&mut out, [s.epsilon]);
    match &s.ground_truth {
        GroundTruth::Line(l) => {
            out.push_str("gt_line ");
            push_reals(&mut out, [l.a, l.b, l.c]);
        }
        GroundTruth::Epipolar { pose, k1, k2, f } => {
            out.push_str("gt_rotation ");
            push_reals(&mut out, mat_values(&pose.rotation));
            out.push_str("gt_translation ");
            push_reals(&mut out, pose.translation_dir.iter().copied());
            out.push_str("gt_k1 ");
            push_reals(&mut out, mat_values(k1));
            out.push_str("gt_k2 ");
            push_reals(&mut out, mat_values(k2));
            out.push_str("gt_f ");
            push_reals(&mut out, mat_values(&f.m));
        }
    }
    out.push_str("rows\n");
    for i in 0..s.n {
        let _ = write!(out, "{} ", u8::from(s.true_inlier_mask[i]));
        let pix = s.pixels.get(i).copied();
        let vals = s
            .feature_row(i)
            .iter()
            .copied()
            .chain(pix.into_iter().flatten());
        push_reals(&mut out, vals);
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(Error::Parse {
                line: self.last + 1,
                msg: "unexpected end of file".into(),
            }),
        }
    }

    /// Reads `key v1 v2 ...` and returns the values.
    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (no, l) = self.next_line()?;
        let mut it = l.split_whitespace();
        match it.next() {
            Some(k) if k == key => Ok((no, it.collect())),
            _ => Err(Error::Parse {
                line: no,
                msg: format!("expected `{key}`"),
            }),
        }
    }

    fn reals(&mut self, key: &str, count: usize) -> Result<Vec<f64>> {
        let (no, toks) = self.keyed(key)?;
        parse_reals(no, &toks, count)
    }
}

fn parse_reals(line: usize, toks: &[&str], count: usize) -> Result<Vec<f64>> {
    if toks.len() != count {
        return Err(Error::Parse {
            line,
            msg: format!("expected {count} values, found {}", toks.len()),
        });
    }
    toks.iter()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid real `{t}`"),
            })
        })
        .collect()
}

fn mat_from(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

pub fn scene_from_str(text: &str) -> Result<SceneData> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (_, header) = lines.next_line()?;
    let rest = header.strip_prefix("SCENE ").ok_or(Error::Parse {
        line: 1,
        msg: "missing SCENE header".into(),
    })?;
    let mut parts = rest.split_whitespace();
    let version = parts.next().unwrap_or("");
    if version != "v1" {
        return Err(Error::UnsupportedVersion(format!("scene format `{version}`")));
    }
    let task = Task::parse(parts.next().unwrap_or("")).map_err(|_| Error::Parse {
        line: 1,
        msg: "unknown task tag".into(),
    })?;
    let parse_count = |no: usize, toks: Vec<&str>| -> Result<usize> {
        match toks.as_slice() {
            [v] => v.parse().map_err(|_| Error::Parse {
                line: no,
                msg: format!("invalid count `{v}`"),
            }),
            _ => Err(Error::Parse {
                line: no,
                msg: "expected one count".into(),
            }),
        }
    };
    let (no, t) = lines.keyed("n")?;
    let n = parse_count(no, t)?;
    let (no, t) = lines.keyed("c")?;
    let c = parse_count(no, t)?;
    let epsilon = lines.reals("epsilon", 1)?[0];
    let ground_truth = match task {
        Task::Line2d => {
            let v = lines.reals("gt_line", 3)?;
            GroundTruth::Line(Line2D {
                a: v[0],
                b: v[1],
                c: v[2],
            })
        }
        Task::Fundamental => {
            let r = lines.reals("gt_rotation", 9)?;
            let t = lines.reals("gt_translation", 3)?;
            let k1 = lines.reals("gt_k1", 9)?;
            let k2 = lines.reals("gt_k2", 9)?;
            let f = lines.reals("gt_f", 9)?;
            GroundTruth::Epipolar {
                pose: RelativePose {
                    rotation: mat_from(&r),
                    translation_dir: Vector3::new(t[0], t[1], t[2]),
                },
                k1: mat_from(&k1),
                k2: mat_from(&k2),
                f: FundamentalMatrix { m: mat_from(&f) },
            }
        }
    };
    lines.keyed("rows")?;
    let width = c + if task == Task::Fundamental { 4 } else { 0 };
    let mut features = Vec::with_capacity(n * c);
    let mut pixels = Vec::new();
    let mut mask = Vec::with_capacity(n);
    for _ in 0..n {
        let (no, l) = lines.next_line()?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let (flag, vals) = toks.split_first().ok_or(Error::Parse {
            line: no,
            msg: "empty row".into(),
        })?;
        mask.push(match *flag {
            "0" => false,
            "1" => true,
            _ => {
                return Err(Error::Parse {
                    line: no,
                    msg: "mask flag must be 0 or 1".into(),
                })
            }
        });
        let v = parse_reals(no, vals, width)?;
        features.extend_from_slice(&v[..c]);
        if task == Task::Fundamental {
            pixels.push([v[c], v[c + 1], v[c + 2], v[c + 3]]);
        }
    }
    let scene = SceneData {
        task,
        n,
        c,
        epsilon,
        features,
        pixels,
        ground_truth,
        true_inlier_mask: mask,
    };
    scene.validate().map_err(|e| Error::Parse {
        line: lines.last,
        msg: e.to_string(),
    })?;
    Ok(scene)
}

pub fn save_scene(scene: &SceneData, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_string(scene))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SceneData> {
    scene_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_from_fundamental;

    #[test]
    fn line_scene_split_and_bounds() {
        let s = gen_line_scene(0.3, 100, 11).unwrap();
        assert_eq!(s.true_inlier_count(), 70);
        let GroundTruth::Line(gt) = s.ground_truth else {
            panic!()
        };
        for i in 0..s.n {
            let p = s.point(i);
            assert!((0.0..=10.0).contains(&p[0]) && (0.0..=10.0).contains(&p[1]));
            if s.true_inlier_mask[i] {
                assert!(line_point_residual(&gt, p) <= LINE_NOISE + 1e-12);
            }
        }
        let clean = gen_line_scene(0.0, 100, 3).unwrap();
        assert_eq!(clean.true_inlier_count(), 100);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(gen_line_scene(0.5, 100, 9).unwrap(), gen_line_scene(0.5, 100, 9).unwrap());
        assert_eq!(
            scene_to_string(&gen_epipolar_scene(60, 0.3, 0.5, 4).unwrap()),
            scene_to_string(&gen_epipolar_scene(60, 0.3, 0.5, 4).unwrap())
        );
    }

    #[test]
    fn epipolar_scene_counts_and_noiseless_constraint() {
        let s = gen_epipolar_scene(150, 0.4, 0.5, 5).unwrap();
        assert_eq!(s.true_inlier_count(), 90);
        assert_eq!(s.n - s.true_inlier_count(), 60);
        assert!(s.features.iter().all(|v| (-1.0..=1.0).contains(v)));

        let s = gen_epipolar_scene(100, 0.0, 0.0, 6).unwrap();
        let GroundTruth::Epipolar { f, .. } = s.ground_truth else {
            panic!()
        };
        for p in &s.pixels {
            let r = sampson_residual(&f, [p[0], p[1]], [p[2], p[3]]);
            assert!(r < 1e-9, "{r}");
        }
    }

    #[test]
    fn noiseless_epipolar_pose_recovered_from_inliers() {
        for seed in 0..5 {
            let s = gen_epipolar_scene(60, 0.25, 0.0, seed).unwrap();
            let GroundTruth::Epipolar { pose, k1, k2, .. } = s.ground_truth else {
                panic!()
            };
            let inl: Vec<[f64; 4]> = (0..s.n)
                .filter(|&i| s.true_inlier_mask[i])
                .map(|i| s.pixels[i])
                .collect();
            let f = fit_fundamental_8pt(&inl).unwrap();
            let est = pose_from_fundamental(&f, &k1, &k2, &inl).unwrap();
            let (er, et) = crate::geometry::pose_errors(&est, &pose);
            assert!(er < 0.1 && et < 0.1, "seed {seed}: {er} {et}");
        }
    }

    #[test]
    fn scene_file_round_trip_and_errors() {
        for s in [
            gen_line_scene(0.4, 30, 1).unwrap(),
            gen_epipolar_scene(20, 0.3, 0.5, 2).unwrap(),
        ] {
            let text = scene_to_string(&s);
            assert_eq!(scene_from_str(&text).unwrap(), s);
            let truncated: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
            assert!(matches!(scene_from_str(&truncated), Err(Error::Parse { .. })));
        }
        assert!(matches!(
            scene_from_str("SCENE v2 line2d\n"),
            Err(Error::UnsupportedVersion(_))
        ));
    }
}
