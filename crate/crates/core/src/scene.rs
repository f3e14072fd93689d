//! Synthetic ground truth: colored 3-D Gaussian blob scenes, camera
//! trajectories aimed at a common target, a forward-only splatting renderer,
//! a frozen random-projection patch encoder, and PSNR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{look_at_rotation, CameraPose};
use crate::numcore::{Scalar, Tensor};

/// One 3-D Gaussian splat. World covariance is R(q) diag(scale^2) R(q)^T.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    /// Unit quaternion (w, x, y, z).
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl GaussianPrimitive {
    pub fn new(
        mean: [f64; 3],
        scale: [f64; 3],
        rotation: [f64; 4],
        opacity: f64,
        color: [f64; 3],
    ) -> Result<Self> {
        if scale.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::invalid("primitive scale must be strictly positive"));
        }
        let norm = rotation.iter().map(|q| q * q).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("quaternion norm {norm} != 1")));
        }
        Ok(GaussianPrimitive {
            mean,
            scale,
            rotation,
            opacity: opacity.clamp(0.0, 1.0),
            color: [
                color[0].clamp(0.0, 1.0),
                color[1].clamp(0.0, 1.0),
                color[2].clamp(0.0, 1.0),
            ],
        })
    }

    /// World-frame covariance R diag(s^2) R^T.
    pub fn cov_world(&self) -> [[f64; 3]; 3] {
        let r = quat_to_rotation(self.rotation);
        let s2 = [
            self.scale[0] * self.scale[0],
            self.scale[1] * self.scale[1],
            self.scale[2] * self.scale[2],
        ];
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += r[i][k] * s2[k] * r[j][k];
                }
            }
        }
        out
    }
}

/// Rotation matrix of a (not necessarily unit) quaternion, normalized inside.
pub fn quat_to_rotation(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Axis-aligned bounds plus the blob list and background color.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub blobs: Vec<GaussianPrimitive>,
    pub background: [f64; 3],
    pub bounds: [[f64; 3]; 2],
}

/// Seeded random blob scene inside the unit-scale box.
pub fn make_scene(n_blobs: usize, seed: u64) -> Result<SceneSpec> {
    if n_blobs < 1 {
        return Err(Error::invalid("make_scene: n_blobs must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = [-1.0, -1.0, -1.0];
    let hi = [1.0, 1.0, 1.0];
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let mean = [
            rng.gen_range(-0.7..0.7),
            rng.gen_range(-0.7..0.7),
            rng.gen_range(-0.7..0.7),
        ];
        let scale = [
            rng.gen_range(0.08..0.35),
            rng.gen_range(0.08..0.35),
            rng.gen_range(0.08..0.35),
        ];
        let raw = [
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
        ];
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        let quat = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
        let opacity = rng.gen_range(0.4..0.95);
        let color = [
            rng.gen_range(0.05..1.0),
            rng.gen_range(0.05..1.0),
            rng.gen_range(0.05..1.0),
        ];
        blobs.push(GaussianPrimitive::new(mean, scale, quat, opacity, color)?);
    }
    Ok(SceneSpec { blobs, background: [0.02, 0.02, 0.05], bounds: [lo, hi] })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Arc,
    Line,
}

/// Cameras aimed at `look_at`, spread over an arc (angular extent = baseline
/// radians) or a line (extent = baseline world units), at fixed distance.
pub fn make_trajectory(
    kind: TrajectoryKind,
    k: usize,
    baseline: f64,
    look_at: [f64; 3],
    image: u32,
    focal: f64,
) -> Result<Vec<CameraPose>> {
    if k < 1 {
        return Err(Error::invalid("make_trajectory: k must be >= 1"));
    }
    if !(baseline > 0.0) || (kind == TrajectoryKind::Arc && baseline >= std::f64::consts::PI) {
        return Err(Error::config("make_trajectory: baseline out of range"));
    }
    let radius = 2.5;
    let mut poses = Vec::with_capacity(k);
    for i in 0..k {
        let frac = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 - 0.5 };
        let center = match kind {
            TrajectoryKind::Arc => {
                let theta = frac * baseline;
                [
                    look_at[0] + radius * theta.sin(),
                    look_at[1],
                    look_at[2] - radius * theta.cos(),
                ]
            }
            TrajectoryKind::Line => [
                look_at[0] + frac * baseline,
                look_at[1],
                look_at[2] - radius,
            ],
        };
        let rot = look_at_rotation(center, look_at);
        let half = image as f64 / 2.0;
        poses.push(CameraPose::new(rot, center, focal, focal, half, half, image, image)?);
    }
    Ok(poses)
}

/// H x W x 3 float image in [0,1]; row-major, channel innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::shape("image buffer size mismatch"));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::new(
            &[self.height, self.width, 3],
            self.pixels.iter().map(|&v| F::from_f64_(v)).collect(),
        )
        .expect("image shape is valid")
    }

    pub fn from_tensor<F: Scalar>(t: &Tensor<F>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape("image tensor must be [h, w, 3]"));
        }
        Image::new(
            s[0],
            s[1],
            t.data().iter().map(|&v| v.to_f64_().clamp(0.0, 1.0)).collect(),
        )
    }

    /// Binary 8-bit PPM for eyeballing outputs.
    pub fn write_ppm(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(
            self.pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Per-pixel front-to-back compositing. `layers` are (alpha*density, color)
/// pairs already sorted near to far. Returns the color and final
/// transmittance.
pub(crate) fn composite_pixel(layers: &[(f64, [f64; 3])], bg: [f64; 3]) -> ([f64; 3], f64) {
    let mut c = [0.0; 3];
    let mut t = 1.0;
    for &(w, col) in layers {
        let w = w.clamp(0.0, 1.0);
        for ch in 0..3 {
            c[ch] += t * w * col[ch];
        }
        t *= 1.0 - w;
        if t < 1e-6 {
            t = t.max(0.0);
            break;
        }
    }
    for ch in 0..3 {
        c[ch] = (c[ch] + t * bg[ch]).clamp(0.0, 1.0);
    }
    (c, t)
}

struct Splat {
    depth: f64,
    center: [f64; 2],
    inv_cov: [f64; 3], // (a, b, c) of the symmetric 2x2 inverse
    radius: f64,
    opacity: f64,
    color: [f64; 3],
}

fn screen_splat(prim: &GaussianPrimitive, pose: &CameraPose) -> Option<Splat> {
    let pc = pose.world_to_camera(prim.mean);
    let z = pc[2];
    if z <= 1e-9 {
        return None;
    }
    let proj = pose.project(prim.mean);
    if !proj.valid && !pose.contains_pixel(proj.pixel) {
        // Keep off-screen splats whose footprint may still reach the image;
        // the radius test below culls the rest.
    }
    let cw = prim.cov_world();
    let r = pose.rotation();
    // Camera-frame covariance R Cw R^T.
    let mut cc = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    s += r[i][k] * cw[k][l] * r[j][l];
                }
            }
            cc[i][j] = s;
        }
    }
    // Affine Jacobian of perspective projection at the mean.
    let j = [
        [pose.fx / z, 0.0, -pose.fx * pc[0] / (z * z)],
        [0.0, pose.fy / z, -pose.fy * pc[1] / (z * z)],
    ];
    let mut cov2 = [0.0f64; 3]; // a = xx, b = xy, c = yy
    for (idx, (row_i, row_j)) in [(0, 0), (0, 1), (1, 1)].iter().enumerate() {
        let mut s = 0.0;
        for k in 0..3 {
            for l in 0..3 {
                s += j[*row_i][k] * cc[k][l] * j[*row_j][l];
            }
        }
        cov2[idx] = s;
    }
    cov2[0] = cov2[0].max(1e-8);
    cov2[2] = cov2[2].max(1e-8);
    let det = (cov2[0] * cov2[2] - cov2[1] * cov2[1]).max(1e-16);
    let inv = [cov2[2] / det, -cov2[1] / det, cov2[0] / det];
    // Largest eigenvalue bounds the footprint.
    let mid = 0.5 * (cov2[0] + cov2[2]);
    let disc = (mid * mid - det).max(0.0).sqrt();
    let radius = 3.5 * (mid + disc).max(1e-8).sqrt();
    Some(Splat {
        depth: z,
        center: proj.pixel,
        inv_cov: inv,
        radius,
        opacity: prim.opacity,
        color: prim.color,
    })
}

/// Forward splatting render: project, depth-sort, composite front to back
/// over the background. Deterministic; ties broken by primitive index.
pub fn render(
    primitives: &[GaussianPrimitive],
    pose: &CameraPose,
    background: [f64; 3],
    h: usize,
    w: usize,
) -> Result<Image> {
    if h < 1 || w < 1 {
        return Err(Error::invalid("render: image dimensions must be >= 1"));
    }
    let mut splats: Vec<(usize, Splat)> = primitives
        .iter()
        .enumerate()
        .filter_map(|(i, p)| screen_splat(p, pose).map(|s| (i, s)))
        .collect();
    splats.sort_by(|(ia, a), (ib, b)| {
        a.depth.partial_cmp(&b.depth).unwrap().then(ia.cmp(ib))
    });

    let mut pixels = vec![0.0; h * w * 3];
    let mut layers: Vec<(f64, [f64; 3])> = Vec::with_capacity(splats.len());
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            layers.clear();
            for (_, s) in &splats {
                let dx = px - s.center[0];
                let dy = py - s.center[1];
                if dx.abs() > s.radius || dy.abs() > s.radius {
                    continue;
                }
                let q = s.inv_cov[0] * dx * dx
                    + 2.0 * s.inv_cov[1] * dx * dy
                    + s.inv_cov[2] * dy * dy;
                if q > 24.0 {
                    continue;
                }
                let g = (-0.5 * q).exp();
                layers.push((s.opacity * g, s.color));
            }
            let (c, _) = composite_pixel(&layers, background);
            let o = (y * w + x) * 3;
            pixels[o..o + 3].copy_from_slice(&c);
        }
    }
    Image::new(h, w, pixels)
}

/// Peak signal-to-noise ratio in dB over [0,1] images, capped at 99.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape("psnr: image shapes differ"));
    }
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.pixels.len() as f64;
    if mse < 1e-10 {
        return Ok(99.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// One view as a grid of feature tokens.
#[derive(Debug, Clone)]
pub struct ViewFeature<F: Scalar> {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// [rows * cols, channels]
    pub tokens: Tensor<F>,
}

impl<F: Scalar> ViewFeature<F> {
    pub fn new(rows: usize, cols: usize, channels: usize, tokens: Tensor<F>) -> Result<Self> {
        if tokens.shape() != [rows * cols, channels] {
            return Err(Error::shape(format!(
                "view feature tokens {:?} != [{}, {}]",
                tokens.shape(),
                rows * cols,
                channels
            )));
        }
        Ok(ViewFeature { rows, cols, channels, tokens })
    }
}

/// Frozen zero-bias random projection of non-overlapping patches. The
/// projection matrix depends only on (patch, channels, encoder_seed).
pub fn encode_view<F: Scalar>(
    image: &Image,
    patch: usize,
    channels: usize,
    encoder_seed: u64,
) -> Result<ViewFeature<F>> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::config("encode_view: patch must divide image dims"));
    }
    if channels < 3 {
        return Err(Error::config("encode_view: channels must be >= 3"));
    }
    let rows = image.height / patch;
    let cols = image.width / patch;
    let fan_in = patch * patch * 3;
    let mut rng = ChaCha8Rng::seed_from_u64(encoder_seed);
    let bound = 1.0 / (fan_in as f64).sqrt();
    let proj: Vec<f64> = (0..channels * fan_in)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();

    let mut tokens = Vec::with_capacity(rows * cols * channels);
    let mut block = vec![0.0f64; fan_in];
    for py in 0..rows {
        for px in 0..cols {
            let mut i = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let o = ((py * patch + dy) * image.width + px * patch + dx) * 3;
                    block[i] = image.pixels[o];
                    block[i + 1] = image.pixels[o + 1];
                    block[i + 2] = image.pixels[o + 2];
                    i += 3;
                }
            }
            for c in 0..channels {
                let row = &proj[c * fan_in..(c + 1) * fan_in];
                let v: f64 = row.iter().zip(&block).map(|(a, b)| a * b).sum();
                tokens.push(F::from_f64_(v));
            }
        }
    }
    ViewFeature::new(rows, cols, channels, Tensor::new(&[rows * cols, channels], tokens)?)
}
