//! Rigid transforms and pinhole projection of planar laser scans onto the
//! image plane, with field-of-view filtering.
//!
//! Conventions: the LiDAR frame is x forward / y left / z up with the scan
//! in the z=0 plane; the camera frame is z forward / x right / y down.
//! A hit's depth is the z-coordinate along the camera optical axis, not the
//! Euclidean range, so projected pixels are directly comparable with depth
//! images.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use crate::la::{self, Mat3, Vec3};
use crate::scalar::Scalar;

/// Behind-camera cutoff: points with camera-frame z at or below this never
/// project (keeps the perspective divide away from zero).
pub const EPS_Z: f64 = 1e-6;

/// Max deviation tolerated in the rotation checks (|RᵀR − I| and |det − 1|).
pub const ROTATION_TOL: f64 = 1e-5;

pub const SCAN_HEADER: &str = "# msdpn-scan v1";

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("matrix is not a rotation (max deviation {0:.3e})")]
    NotARotation(f64),
    #[error("bad intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("bad scan: {0}")]
    BadScan(String),
    #[error("{path}: {msg}")]
    ScanFormat { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Rigid body transform p ↦ R·p + t.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<S> {
    r: Mat3<S>,
    t: Vec3<S>,
}

impl<S: Scalar> RigidTransform<S> {
    /// Validates that `r` is a proper rotation before wrapping it.
    pub fn new(r: Mat3<S>, t: Vec3<S>) -> Result<Self, GeometryError> {
        let rt_r = la::mat_mul(&la::transpose(&r), &r);
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((rt_r[i][j].f64() - want).abs());
            }
        }
        dev = dev.max((la::det(&r).f64() - 1.0).abs());
        if dev > ROTATION_TOL {
            return Err(GeometryError::NotARotation(dev));
        }
        Ok(RigidTransform { r, t })
    }

    pub fn identity() -> Self {
        RigidTransform {
            r: la::identity(),
            t: [S::zero(); 3],
        }
    }

    pub fn rotation(&self) -> &Mat3<S> {
        &self.r
    }

    pub fn translation(&self) -> Vec3<S> {
        self.t
    }

    pub fn apply(&self, p: Vec3<S>) -> Vec3<S> {
        la::add(la::mat_vec(&self.r, p), self.t)
    }

    /// self ∘ other: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        RigidTransform {
            r: la::mat_mul(&self.r, &other.r),
            t: la::add(la::mat_vec(&self.r, other.t), self.t),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = la::transpose(&self.r);
        RigidTransform {
            r: rt,
            t: la::scale(-S::one(), la::mat_vec(&rt, self.t)),
        }
    }

    pub fn cast<U: Scalar>(&self) -> RigidTransform<U> {
        let mut r = [[U::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = U::of(self.r[i][j].f64());
            }
        }
        let t = [U::of(self.t[0].f64()), U::of(self.t[1].f64()), U::of(self.t[2].f64())];
        RigidTransform { r, t }
    }
}

/// Pinhole intrinsics (pixels), with optional skew.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics<S> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
    pub alpha: S,
    pub width: usize,
    pub height: usize,
}

impl<S: Scalar> Intrinsics<S> {
    pub fn new(
        fx: S,
        fy: S,
        cx: S,
        cy: S,
        alpha: S,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > S::zero() && fy > S::zero() && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::BadIntrinsics(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::BadIntrinsics(format!(
                "image size must be nonzero, got {width}x{height}"
            )));
        }
        let w = S::of(width as f64);
        let h = S::of(height as f64);
        if !(cx >= S::zero() && cx < w && cy >= S::zero() && cy < h) {
            return Err(GeometryError::BadIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        if !alpha.is_finite() {
            return Err(GeometryError::BadIntrinsics("skew must be finite".into()));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            alpha,
            width,
            height,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Intrinsics<U> {
        Intrinsics {
            fx: U::of(self.fx.f64()),
            fy: U::of(self.fy.f64()),
            cx: U::of(self.cx.f64()),
            cy: U::of(self.cy.f64()),
            alpha: U::of(self.alpha.f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Intrinsics plus the LiDAR-to-camera extrinsic transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRig<S> {
    pub intrinsics: Intrinsics<S>,
    pub extrinsic: RigidTransform<S>,
}

/// Planar range scan: per-beam azimuth, range, and validity.
#[derive(Clone, Debug, PartialEq)]
pub struct LaserScan<S> {
    angles: Vec<S>,
    ranges: Vec<S>,
    valid: Vec<bool>,
}

impl<S: Scalar> LaserScan<S> {
    pub fn new(angles: Vec<S>, ranges: Vec<S>, valid: Vec<bool>) -> Result<Self, GeometryError> {
        if angles.len() != ranges.len() || angles.len() != valid.len() {
            return Err(GeometryError::BadScan(format!(
                "length mismatch: {} angles, {} ranges, {} validity flags",
                angles.len(),
                ranges.len(),
                valid.len()
            )));
        }
        for (i, a) in angles.iter().enumerate() {
            if !a.is_finite() {
                return Err(GeometryError::BadScan(format!("angle {i} is not finite")));
            }
            if i > 0 && !(angles[i - 1] < *a) {
                return Err(GeometryError::BadScan(format!(
                    "angles must be strictly increasing (beam {i})"
                )));
            }
        }
        for i in 0..ranges.len() {
            if valid[i] && !(ranges[i] > S::zero() && ranges[i].is_finite()) {
                return Err(GeometryError::BadScan(format!(
                    "valid beam {i} has non-positive range {}",
                    ranges[i]
                )));
            }
        }
        Ok(LaserScan {
            angles,
            ranges,
            valid,
        })
    }

    pub fn empty() -> Self {
        LaserScan {
            angles: Vec::new(),
            ranges: Vec::new(),
            valid: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn angles(&self) -> &[S] {
        &self.angles
    }

    pub fn ranges(&self) -> &[S] {
        &self.ranges
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Marks beam `i` invalid, keeping its angle slot.
    pub fn invalidate(&mut self, i: usize) {
        self.valid[i] = false;
    }

    pub fn cast<U: Scalar>(&self) -> LaserScan<U> {
        LaserScan {
            angles: self.angles.iter().map(|a| U::of(a.f64())).collect(),
            ranges: self.ranges.iter().map(|r| U::of(r.f64())).collect(),
            valid: self.valid.clone(),
        }
    }
}

/// Integer pixel hit carrying optical-axis depth in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelHit<S> {
    pub u: usize,
    pub v: usize,
    pub depth: S,
}

impl<S: Scalar> PixelHit<S> {
    pub fn cast<U: Scalar>(&self) -> PixelHit<U> {
        PixelHit {
            u: self.u,
            v: self.v,
            depth: U::of(self.depth.f64()),
        }
    }
}

/// One 3D point per valid beam, in the LiDAR frame:
/// (r·cos θ, r·sin θ, 0).
pub fn scan_to_points<S: Scalar>(scan: &LaserScan<S>) -> Vec<Vec3<S>> {
    let mut out = Vec::with_capacity(scan.n_valid());
    for i in 0..scan.len() {
        if !scan.valid[i] {
            continue;
        }
        let (s, c) = scan.angles[i].sin_cos();
        let r = scan.ranges[i];
        out.push([r * c, r * s, S::zero()]);
    }
    out
}

pub fn transform_point<S: Scalar>(t: &RigidTransform<S>, p: Vec3<S>) -> Vec3<S> {
    t.apply(p)
}

/// Projects a camera-frame point. Returns the unrounded pixel coordinates
/// and the optical-axis depth, or `None` when the point sits at/behind the
/// camera or rounds outside the image.
pub fn project_point<S: Scalar>(k: &Intrinsics<S>, p_c: Vec3<S>) -> Option<(S, S, S)> {
    let [x, y, z] = p_c;
    if !(z > S::of(EPS_Z)) {
        return None;
    }
    let u = (k.fx * x + k.alpha * y) / z + k.cx;
    let v = k.fy * y / z + k.cy;
    let (ur, vr) = (u.round(), v.round());
    let in_u = ur >= S::zero() && ur <= S::of((k.width - 1) as f64);
    let in_v = vr >= S::zero() && vr <= S::of((k.height - 1) as f64);
    if in_u && in_v {
        Some((u, v, z))
    } else {
        None
    }
}

/// Inverse of [`project_point`] given unrounded pixel coordinates and depth;
/// returns the camera-frame point.
pub fn backproject_pixel<S: Scalar>(k: &Intrinsics<S>, u: S, v: S, depth: S) -> Vec3<S> {
    let y = (v - k.cy) * depth / k.fy;
    let x = ((u - k.cx) * depth - k.alpha * y) / k.fx;
    [x, y, depth]
}

/// Full scan projection: LiDAR points → camera frame → pixels, with
/// round-half-away-from-zero pixel assignment and nearest-depth z-buffering.
/// Output is sorted by (v, u).
pub fn project_scan<S: Scalar>(
    scan: &LaserScan<S>,
    t: &RigidTransform<S>,
    k: &Intrinsics<S>,
) -> Vec<PixelHit<S>> {
    let mut best: BTreeMap<(usize, usize), S> = BTreeMap::new();
    for p_l in scan_to_points(scan) {
        let p_c = t.apply(p_l);
        let Some((u, v, z)) = project_point(k, p_c) else {
            continue;
        };
        // project_point guarantees the rounded coordinates are in-image.
        let key = (v.round().f64() as usize, u.round().f64() as usize);
        match best.entry(key) {
            std::collections::btree_map::Entry::Occupied(mut e) => {
                if z < *e.get() {
                    e.insert(z);
                }
            }
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(z);
            }
        }
    }
    best.into_iter()
        .map(|((v, u), depth)| PixelHit { u, v, depth })
        .collect()
}

/// Writes a scan as `# msdpn-scan v1` CSV; invalid beams store range -1.
pub fn write_scan<S: Scalar>(path: &Path, scan: &LaserScan<S>) -> Result<(), GeometryError> {
    let mut body = String::new();
    body.push_str(SCAN_HEADER);
    body.push('\n');
    for i in 0..scan.len() {
        if scan.valid[i] {
            let _ = writeln!(body, "{},{}", scan.angles[i], scan.ranges[i]);
        } else {
            let _ = writeln!(body, "{},-1", scan.angles[i]);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|source| GeometryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(body.as_bytes()).map_err(|source| GeometryError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_scan<S: Scalar>(path: &Path) -> Result<LaserScan<S>, GeometryError> {
    let file = std::fs::File::open(path).map_err(|source| GeometryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fail = |msg: String| GeometryError::ScanFormat {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| fail(format!("read error: {e}")))?
        .ok_or_else(|| fail("empty file".into()))?;
    if header.trim_end() != SCAN_HEADER {
        return Err(fail(format!(
            "bad header {header:?}, expected {SCAN_HEADER:?}"
        )));
    }
    let mut angles = Vec::new();
    let mut ranges = Vec::new();
    let mut valid = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| fail(format!("read error: {e}")))?;
        if line.is_empty() {
            continue;
        }
        let n = lineno + 2;
        let (a, r) = line
            .split_once(',')
            .ok_or_else(|| fail(format!("line {n}: expected `angle_rad,range_m`")))?;
        let angle: f64 = a
            .trim()
            .parse()
            .map_err(|_| fail(format!("line {n}: bad angle {a:?}")))?;
        let range: f64 = r
            .trim()
            .parse()
            .map_err(|_| fail(format!("line {n}: bad range {r:?}")))?;
        angles.push(S::of(angle));
        if range == -1.0 {
            ranges.push(S::zero());
            valid.push(false);
        } else {
            ranges.push(S::of(range));
            valid.push(true);
        }
    }
    LaserScan::new(angles, ranges, valid)
        .map_err(|e| fail(format!("invalid scan content: {e}")))
}
