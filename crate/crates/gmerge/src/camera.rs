//! Pinhole camera recovery from 3-D points and their 2-D projections.
//!
//! The model projects `(X, Y, Z)` to `f * (X, Y) / (Z + s)` with a single
//! isotropic focal length `f` and a global depth shift `s`. For any fixed
//! `s` the optimal focal has a closed form (it is linear least squares),
//! so the solver is a one-dimensional Levenberg-Marquardt search over `s`
//! with `f` re-fit at every probe. Per-axis focals and fields of view are
//! read off at the converged shift.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::atomic_write;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point cloud must contain at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("point {index} has non-positive shifted depth Z + s = {depth}")]
    InfeasibleDepth { index: usize, depth: f64 },
    #[error("degenerate geometry: {reason}")]
    Degenerate { reason: &'static str },
    #[error("invalid solver config: {reason}")]
    InvalidConfig { reason: &'static str },
    #[error("field of view must lie strictly between 0 and 180 degrees, got {fov}")]
    FovOutOfRange { fov: f64 },
    #[error("image extent must be positive, got {extent}")]
    BadExtent { extent: f64 },
    #[error("csv record {record}: {reason}")]
    BadCsv { record: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One observed correspondence: world point and its image coordinates
/// relative to the principal point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "Y")]
    pub y: f64,
    #[serde(rename = "Z")]
    pub z: f64,
    pub u: f64,
    pub v: f64,
}

/// A finite, non-empty list of correspondences. The solver itself needs
/// at least three points; smaller clouds are still constructible for
/// residual and focal diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<PointRecord>,
}

impl PointCloud {
    pub fn new(points: Vec<PointRecord>) -> Result<Self, CameraError> {
        if points.is_empty() {
            return Err(CameraError::TooFewPoints { needed: 1, got: 0 });
        }
        for (index, p) in points.iter().enumerate() {
            let finite = p.x.is_finite()
                && p.y.is_finite()
                && p.z.is_finite()
                && p.u.is_finite()
                && p.v.is_finite();
            if !finite {
                return Err(CameraError::NonFinitePoint { index });
            }
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[PointRecord] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reads a cloud from CSV with header `X,Y,Z,u,v`.
    pub fn from_csv(reader: impl Read) -> Result<Self, CameraError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut points = Vec::new();
        for (i, row) in rdr.deserialize::<PointRecord>().enumerate() {
            let p = row.map_err(|e| CameraError::BadCsv {
                record: i + 1,
                reason: e.to_string(),
            })?;
            points.push(p);
        }
        PointCloud::new(points)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, CameraError> {
        let file = std::fs::File::open(path).map_err(|source| CameraError::Io {
            path: path.display().to_string(),
            source,
        })?;
        PointCloud::from_csv(file)
    }

    /// Writes the cloud as CSV with header `X,Y,Z,u,v`.
    pub fn to_csv(&self, writer: impl Write) -> Result<(), CameraError> {
        let mut wtr = csv::Writer::from_writer(writer);
        for (i, p) in self.points.iter().enumerate() {
            wtr.serialize(p).map_err(|e| CameraError::BadCsv {
                record: i + 1,
                reason: e.to_string(),
            })?;
        }
        wtr.flush().map_err(|source| CameraError::Io {
            path: "<writer>".to_string(),
            source,
        })?;
        Ok(())
    }

    pub fn to_csv_path(&self, path: &Path) -> Result<(), CameraError> {
        let mut buf = Vec::new();
        self.to_csv(&mut buf)?;
        atomic_write(path, &buf).map_err(|source| CameraError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Levenberg-Marquardt tuning for the one-dimensional shift search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmConfig {
    pub damping_init: f64,
    /// Multiplier applied to the damping on a rejected step.
    pub damping_up: f64,
    /// Divisor applied on an accepted step.
    pub damping_down: f64,
    pub tol_step: f64,
    pub tol_residual: f64,
    pub max_iters: usize,
    pub s_init: f64,
    /// Feasibility margin as a fraction of the median absolute depth:
    /// every shifted depth must stay above `margin * median(|Z|)`.
    pub feasibility_margin: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            damping_init: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            tol_step: 1e-9,
            tol_residual: 1e-12,
            max_iters: 100,
            s_init: 0.0,
            feasibility_margin: 1e-6,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.damping_init > 0.0) {
            return Err(CameraError::InvalidConfig {
                reason: "damping_init must be positive",
            });
        }
        if !(self.damping_up > 1.0) || !(self.damping_down > 1.0) {
            return Err(CameraError::InvalidConfig {
                reason: "damping factors must exceed 1",
            });
        }
        if !(self.tol_step > 0.0) || !(self.tol_residual > 0.0) {
            return Err(CameraError::InvalidConfig {
                reason: "tolerances must be positive",
            });
        }
        if self.max_iters == 0 {
            return Err(CameraError::InvalidConfig {
                reason: "max_iters must be at least 1",
            });
        }
        if !self.s_init.is_finite() {
            return Err(CameraError::InvalidConfig {
                reason: "s_init must be finite",
            });
        }
        if !(self.feasibility_margin > 0.0) {
            return Err(CameraError::InvalidConfig {
                reason: "feasibility_margin must be positive",
            });
        }
        Ok(())
    }
}

/// Focal estimates at a fixed shift: the isotropic least-squares fit plus
/// per-axis fits, each `None` when that axis carries no signal (all
/// projected coordinates zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalEstimate {
    pub iso: f64,
    pub x: Option<f64>,
    pub y: Option<f64>,
}

/// Projects world points through the model `f * (X, Y) / (Z + s)`.
pub fn project_points(xyz: &[[f64; 3]], f: f64, s: f64) -> Result<Vec<[f64; 2]>, CameraError> {
    let mut uv = Vec::with_capacity(xyz.len());
    for (index, p) in xyz.iter().enumerate() {
        let depth = p[2] + s;
        if depth <= 0.0 {
            return Err(CameraError::InfeasibleDepth { index, depth });
        }
        uv.push([f * p[0] / depth, f * p[1] / depth]);
    }
    Ok(uv)
}

/// Closed-form focal estimate at shift `s`: with normalized coordinates
/// `(x', y') = (X, Y) / (Z + s)`, the residual `f (x', y') - (u, v)` is
/// linear in `f`, so the least-squares optimum is
/// `sum(x'u + y'v) / sum(x'^2 + y'^2)`. Per-axis focals use only their own
/// axis in both sums.
pub fn closed_form_focal(cloud: &PointCloud, s: f64) -> Result<FocalEstimate, CameraError> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut num_x = 0.0;
    let mut den_x = 0.0;
    let mut num_y = 0.0;
    let mut den_y = 0.0;
    for (index, p) in cloud.points().iter().enumerate() {
        let depth = p.z + s;
        if depth <= 0.0 {
            return Err(CameraError::InfeasibleDepth { index, depth });
        }
        let xp = p.x / depth;
        let yp = p.y / depth;
        num += xp * p.u + yp * p.v;
        den += xp * xp + yp * yp;
        num_x += xp * p.u;
        den_x += xp * xp;
        num_y += yp * p.v;
        den_y += yp * yp;
    }
    if den == 0.0 {
        return Err(CameraError::Degenerate {
            reason: "every projected coordinate is zero; focal is unconstrained",
        });
    }
    Ok(FocalEstimate {
        iso: num / den,
        x: (den_x > 0.0).then(|| num_x / den_x),
        y: (den_y > 0.0).then(|| num_y / den_y),
    })
}

/// Stacked reprojection residual at shift `s` with the focal re-fit by
/// [`closed_form_focal`]: for each point, the x error then the y error.
pub fn residual(cloud: &PointCloud, s: f64) -> Result<Vec<f64>, CameraError> {
    let f = closed_form_focal(cloud, s)?.iso;
    let mut r = Vec::with_capacity(cloud.len() * 2);
    for p in cloud.points() {
        let depth = p.z + s;
        r.push(f * p.x / depth - p.u);
        r.push(f * p.y / depth - p.v);
    }
    Ok(r)
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Recovered camera parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSolution {
    pub f_iso: f64,
    pub f_x: f64,
    pub f_y: f64,
    pub s: f64,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// False when the cloud's depths are (numerically) constant, in which
    /// case any feasible shift explains the data equally well and the
    /// reported `s` is only one representative of that family.
    pub s_identifiable: bool,
}

/// Solves for the shift `s` (Levenberg-Marquardt over the re-fit residual)
/// and reads focal lengths off at the optimum.
pub fn solve_camera(cloud: &PointCloud, config: &LmConfig) -> Result<CameraSolution, CameraError> {
    config.validate()?;
    if cloud.len() < 3 {
        return Err(CameraError::TooFewPoints {
            needed: 3,
            got: cloud.len(),
        });
    }

    // Collinear XY columns make the isotropic/per-axis split meaningless;
    // test the 2x2 second-moment matrix for (near-)rank-1.
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in cloud.points() {
        sxx += p.x * p.x;
        sxy += p.x * p.y;
        syy += p.y * p.y;
    }
    let trace = sxx + syy;
    if trace == 0.0 || sxx * syy - sxy * sxy <= 1e-12 * trace * trace {
        return Err(CameraError::Degenerate {
            reason: "XY directions are collinear",
        });
    }

    let zs: Vec<f64> = cloud.points().iter().map(|p| p.z).collect();
    let z_min = zs.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let z_median = median(zs.iter().map(|z| z.abs()).collect());
    let margin = config.feasibility_margin * z_median;
    // Feasible shifts keep every depth at least `margin` above zero.
    let s_floor = margin - z_min;
    let clamp = |s: f64| s.max(s_floor);

    let mut s = clamp(config.s_init);
    let mut r = residual(cloud, s)?;
    let mut cost = sum_sq(&r);
    let mut damping = config.damping_init;
    let mut iterations = 0;
    let mut converged = false;

    for iter in 1..=config.max_iters {
        iterations = iter;
        if cost.sqrt() <= config.tol_residual {
            converged = true;
            break;
        }
        // Central-difference Jacobian of the residual in s.
        let h = 1e-7 * s.abs().max(1.0);
        let s_plus = s + h;
        let s_minus = clamp(s - h);
        let r_plus = residual(cloud, s_plus)?;
        let r_minus = residual(cloud, s_minus)?;
        let span = s_plus - s_minus;
        let jtj: f64 = r_plus
            .iter()
            .zip(&r_minus)
            .map(|(p, m)| {
                let j = (p - m) / span;
                j * j
            })
            .sum();
        let jtr: f64 = r_plus
            .iter()
            .zip(&r_minus)
            .zip(&r)
            .map(|((p, m), ri)| (p - m) / span * ri)
            .sum();
        if jtj == 0.0 && jtr == 0.0 {
            // Residual is flat in s; nothing left to improve.
            converged = true;
            break;
        }

        let step = -jtr / (jtj + damping);
        let s_new = clamp(s + step);
        let r_new = residual(cloud, s_new)?;
        let cost_new = sum_sq(&r_new);
        if cost_new < cost {
            let moved = (s_new - s).abs();
            s = s_new;
            r = r_new;
            cost = cost_new;
            damping /= config.damping_down;
            if moved <= config.tol_step {
                converged = true;
                break;
            }
        } else {
            damping *= config.damping_up;
            if step.abs() <= config.tol_step {
                // The proposal is already below the step tolerance; larger
                // damping only shrinks it further.
                converged = true;
                break;
            }
            if damping > 1e300 {
                break;
            }
        }
    }

    let focal = closed_form_focal(cloud, s)?;
    let f_x = focal.x.ok_or(CameraError::Degenerate {
        reason: "all X coordinates are zero; f_x is unconstrained",
    })?;
    let f_y = focal.y.ok_or(CameraError::Degenerate {
        reason: "all Y coordinates are zero; f_y is unconstrained",
    })?;
    let r_final = residual(cloud, s)?;

    let z_mean = cloud.points().iter().map(|p| p.z).sum::<f64>() / cloud.len() as f64;
    let z_var = cloud
        .points()
        .iter()
        .map(|p| (p.z - z_mean) * (p.z - z_mean))
        .sum::<f64>()
        / cloud.len() as f64;
    let z_med_signed = median(cloud.points().iter().map(|p| p.z).collect());
    let s_identifiable = z_var >= 1e-9 * z_med_signed * z_med_signed;

    Ok(CameraSolution {
        f_iso: focal.iso,
        f_x,
        f_y,
        s,
        residual_norm: sum_sq(&r_final).sqrt(),
        iterations,
        converged,
        s_identifiable,
    })
}

/// Field of view in degrees from a focal length and image extent:
/// `2 atan(extent / (2 f))` per axis.
pub fn fov_from_focal(
    f_x: f64,
    f_y: f64,
    width: f64,
    height: f64,
) -> Result<(f64, f64), CameraError> {
    for &extent in &[width, height] {
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(CameraError::BadExtent { extent });
        }
    }
    for &f in &[f_x, f_y] {
        if !(f > 0.0) || !f.is_finite() {
            return Err(CameraError::BadExtent { extent: f });
        }
    }
    let fov = |extent: f64, f: f64| (2.0 * (extent / (2.0 * f)).atan()).to_degrees();
    Ok((fov(width, f_x), fov(height, f_y)))
}

/// Inverse of [`fov_from_focal`]: `extent / (2 tan(fov / 2))` with the
/// field of view in degrees, strictly inside (0, 180).
pub fn focal_from_fov(
    fov_x: f64,
    fov_y: f64,
    width: f64,
    height: f64,
) -> Result<(f64, f64), CameraError> {
    for &extent in &[width, height] {
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(CameraError::BadExtent { extent });
        }
    }
    for &fov in &[fov_x, fov_y] {
        if !(fov > 0.0 && fov < 180.0) {
            return Err(CameraError::FovOutOfRange { fov });
        }
    }
    let focal = |extent: f64, fov: f64| extent / (2.0 * (fov.to_radians() / 2.0).tan());
    Ok((focal(width, fov_x), focal(height, fov_y)))
}
