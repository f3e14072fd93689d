//! Camera poses, pairwise camera-center distances, pinhole projection and
//! the pairwise view-overlap matrix used by overlap-based anchor selection.
//!
//! All geometry runs in f64 so it can feed exact test oracles.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One calibrated input view: world-to-camera rotation, camera center in
/// world units and pinhole intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    rotation: [[f64; 3]; 3],
    center: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Result of projecting a world point into a view. `valid` is false when the
/// point is at (or numerically on) the camera plane.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub valid: bool,
}

impl CameraPose {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: [[f64; 3]; 3],
        center: [f64; 3],
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        // R^T R = I within 1e-6, det +1.
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((dot - target).abs());
            }
        }
        if max_dev > 1e-6 {
            return Err(Error::invalid(format!(
                "rotation not orthonormal (max deviation {max_dev:.3e})"
            )));
        }
        let det = det3(&rotation);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("rotation determinant {det} != 1")));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !(0.0..=width as f64).contains(&cx) || !(0.0..=height as f64).contains(&cy) {
            return Err(Error::invalid("principal point outside image"));
        }
        Ok(Self { rotation, center, fx, fy, cx, cy, width, height })
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    /// World point into camera coordinates: R (p - T).
    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        mat3_mul_vec(&self.rotation, d)
    }

    /// Camera point back to world: R^T p + T.
    pub fn camera_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[1][0] * p[1] + r[2][0] * p[2] + self.center[0],
            r[0][1] * p[0] + r[1][1] * p[1] + r[2][1] * p[2] + self.center[1],
            r[0][2] * p[0] + r[1][2] * p[1] + r[2][2] * p[2] + self.center[2],
        ]
    }

    pub fn project(&self, point: [f64; 3]) -> Projection {
        let pc = self.world_to_camera(point);
        if pc[2].abs() < 1e-9 {
            return Projection { pixel: [0.0, 0.0], depth: 0.0, valid: false };
        }
        Projection {
            pixel: [
                self.fx * pc[0] / pc[2] + self.cx,
                self.fy * pc[1] / pc[2] + self.cy,
            ],
            depth: pc[2],
            valid: true,
        }
    }

    /// World-space direction of the ray through pixel (u, v), at unit camera
    /// depth (not normalized).
    pub fn ray_dir(&self, u: f64, v: f64) -> [f64; 3] {
        let h = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let r = &self.rotation;
        [
            r[0][0] * h[0] + r[1][0] * h[1] + r[2][0] * h[2],
            r[0][1] * h[0] + r[1][1] * h[1] + r[2][1] * h[2],
            r[0][2] * h[0] + r[1][2] * h[1] + r[2][2] * h[2],
        ]
    }

    /// Inverse of `project` at a given camera depth.
    pub fn unproject(&self, pixel: [f64; 2], depth: f64) -> [f64; 3] {
        let d = self.ray_dir(pixel[0], pixel[1]);
        [
            self.center[0] + d[0] * depth,
            self.center[1] + d[1] * depth,
            self.center[2] + d[2] * depth,
        ]
    }

    pub fn contains_pixel(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[0] <= self.width as f64 && p[1] >= 0.0 && p[1] <= self.height as f64
    }
}

/// `project_point` per the module contract; thin wrapper over [`CameraPose::project`].
pub fn project_point(pose: &CameraPose, point: [f64; 3]) -> Projection {
    pose.project(point)
}

/// Symmetric matrix of Euclidean distances between camera centers.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_centers(centers: &[[f64; 3]]) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::invalid("need at least one pose"));
        }
        let n = centers.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = dist3(centers[i], centers[j]);
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

pub fn pairwise_distances(poses: &[CameraPose]) -> Result<DistanceMatrix> {
    let centers: Vec<[f64; 3]> = poses.iter().map(|p| p.center()).collect();
    DistanceMatrix::from_centers(&centers)
}

/// Pairwise view-overlap scores in [0, 1]; diagonal fixed at 1.
#[derive(Debug, Clone)]
pub struct OverlapMatrix {
    n: usize,
    values: Vec<f64>,
}

impl OverlapMatrix {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::shape("overlap matrix size mismatch"));
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Fraction of a grid x grid lattice of rays from `a` that land inside `b`'s
/// image plane with positive depth at any of the sampled depths, symmetrized
/// as the minimum of the two directed scores.
pub fn view_overlap(a: &CameraPose, b: &CameraPose, grid: u32, depths: &[f64]) -> Result<f64> {
    if grid < 2 {
        return Err(Error::invalid("overlap grid must be >= 2"));
    }
    if depths.is_empty() || depths.iter().any(|d| *d <= 0.0) {
        return Err(Error::invalid("overlap depths must be non-empty and positive"));
    }
    Ok(directed_overlap(a, b, grid, depths).min(directed_overlap(b, a, grid, depths)))
}

fn directed_overlap(src: &CameraPose, dst: &CameraPose, grid: u32, depths: &[f64]) -> f64 {
    let mut hits = 0usize;
    for iy in 0..grid {
        for ix in 0..grid {
            let u = (ix as f64 + 0.5) * src.width as f64 / grid as f64;
            let v = (iy as f64 + 0.5) * src.height as f64 / grid as f64;
            let dir = src.ray_dir(u, v);
            let c = src.center();
            let hit = depths.iter().any(|&t| {
                let p = [c[0] + dir[0] * t, c[1] + dir[1] * t, c[2] + dir[2] * t];
                let proj = dst.project(p);
                proj.valid && proj.depth > 0.0 && dst.contains_pixel(proj.pixel)
            });
            if hit {
                hits += 1;
            }
        }
    }
    hits as f64 / (grid as u64 * grid as u64) as f64
}

pub fn overlap_matrix(poses: &[CameraPose], grid: u32, depths: &[f64]) -> Result<OverlapMatrix> {
    if poses.len() < 2 {
        return Err(Error::invalid("overlap matrix needs at least two poses"));
    }
    let n = poses.len();
    let mut values = vec![1.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let o = view_overlap(&poses[i], &poses[j], grid, depths)?;
            values[i * n + j] = o;
            values[j * n + i] = o;
        }
    }
    OverlapMatrix::from_values(n, values)
}

/// On-disk pose record: rotation is 9 numbers row-major.
#[derive(Debug, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub center: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl PoseRecord {
    pub fn from_pose(p: &CameraPose) -> Self {
        let r = p.rotation();
        Self {
            rotation: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            center: p.center(),
            fx: p.fx,
            fy: p.fy,
            cx: p.cx,
            cy: p.cy,
            width: p.width,
            height: p.height,
        }
    }

    pub fn into_pose(self) -> Result<CameraPose> {
        let r = self.rotation;
        CameraPose::new(
            [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            self.center,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
        )
    }
}

/// Parse a JSON pose file (array of records). Schema violations come back
/// with serde's line/column diagnostic; semantic violations name the entry.
pub fn parse_poses(json: &str) -> Result<Vec<CameraPose>> {
    let records: Vec<PoseRecord> = serde_json::from_str(json)
        .map_err(|e| Error::invalid(format!("pose file schema: {e}")))?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, rec)| {
            rec.into_pose()
                .map_err(|e| Error::invalid(format!("pose entry {i}: {e}")))
        })
        .collect()
}

pub fn load_poses(path: &std::path::Path) -> Result<Vec<CameraPose>> {
    let text = std::fs::read_to_string(path)?;
    parse_poses(&text)
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn mat3_mul_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Build a right-handed world-to-camera rotation looking from `eye` towards
/// `target` with world up (0, 1, 0); +x right, +y down, +z forward.
pub fn look_at_rotation(eye: [f64; 3], target: [f64; 3]) -> [[f64; 3]; 3] {
    let fwd = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
    let mut up = [0.0, -1.0, 0.0];
    if cross(up, fwd).iter().map(|x| x * x).sum::<f64>() < 1e-12 {
        up = [0.0, 0.0, -1.0]; // looking straight up/down
    }
    let right = normalize(cross(up, fwd));
    let down = cross(fwd, right);
    [right, down, fwd]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
