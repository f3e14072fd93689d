//! Differentiable splatting. A single tape op takes per-primitive depth,
//! pixel offset, scale, quaternion, opacity and color, unprojects each token
//! along its anchor-camera ray, and rasterizes into a target view with
//! front-to-back alpha compositing. The backward pass is hand-derived:
//! compositing gradients use a suffix accumulator, screen-covariance
//! gradients chain through the projection Jacobian (including its dependence
//! on the camera-frame mean), and quaternion gradients go through the
//! normalize-then-rotate map.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::numcore::{CustomOp, Scalar, Tape, Tensor, Var};
use crate::scene::quat_to_rotation;

const Z_NEAR: f64 = 1e-3;
const CUTOFF_Q: f64 = 24.0;
const COV_FLOOR: f64 = 1e-8;

/// Everything the rasterizer needs besides the differentiable inputs.
#[derive(Debug, Clone)]
pub struct SplatConsts {
    pub anchor_poses: Vec<CameraPose>,
    /// Per primitive: which anchor camera its ray comes from.
    pub prim_anchor: Vec<usize>,
    /// Per primitive: pixel-grid cell center in the anchor image.
    pub base_pixel: Vec<[f64; 2]>,
    pub render_pose: CameraPose,
    pub background: [f64; 3],
    pub height: usize,
    pub width: usize,
}

impl SplatConsts {
    fn validate(&self) -> Result<()> {
        if self.prim_anchor.len() != self.base_pixel.len() {
            return Err(Error::invalid("splat: prim_anchor / base_pixel length mismatch"));
        }
        if self.prim_anchor.iter().any(|&a| a >= self.anchor_poses.len()) {
            return Err(Error::invalid("splat: anchor index out of range"));
        }
        if self.height < 1 || self.width < 1 {
            return Err(Error::invalid("splat: empty image"));
        }
        Ok(())
    }
}

/// Raw per-primitive values pulled out of the input tensors, in f64.
struct PrimIn {
    depth: f64,
    off: [f64; 2],
    scale: [f64; 3],
    quat: [f64; 4],
    opacity: f64,
    color: [f64; 3],
}

fn gather_inputs<F: Scalar>(inputs: &[&Tensor<F>], n: usize) -> Result<Vec<PrimIn>> {
    let expect = [
        ("depth", vec![n, 1]),
        ("offset", vec![n, 2]),
        ("scale", vec![n, 3]),
        ("quat", vec![n, 4]),
        ("opacity", vec![n, 1]),
        ("color", vec![n, 3]),
    ];
    if inputs.len() != 6 {
        return Err(Error::invalid("splat: expected 6 input tensors"));
    }
    for ((name, shape), t) in expect.iter().zip(inputs) {
        if t.shape() != &shape[..] {
            return Err(Error::shape(format!(
                "splat {name}: shape {:?}, want {shape:?}",
                t.shape()
            )));
        }
    }
    let at = |t: &Tensor<F>, i: usize, j: usize, w: usize| t.data()[i * w + j].to_f64_();
    Ok((0..n)
        .map(|i| PrimIn {
            depth: at(inputs[0], i, 0, 1),
            off: [at(inputs[1], i, 0, 2), at(inputs[1], i, 1, 2)],
            scale: [at(inputs[2], i, 0, 3), at(inputs[2], i, 1, 3), at(inputs[2], i, 2, 3)],
            quat: [
                at(inputs[3], i, 0, 4),
                at(inputs[3], i, 1, 4),
                at(inputs[3], i, 2, 4),
                at(inputs[3], i, 3, 4),
            ],
            opacity: at(inputs[4], i, 0, 1),
            color: [at(inputs[5], i, 0, 3), at(inputs[5], i, 1, 3), at(inputs[5], i, 2, 3)],
        })
        .collect())
}

/// Prepared screen-space state for one visible primitive.
struct PrimFwd {
    idx: usize,
    /// Camera-frame mean in the render camera.
    t: [f64; 3],
    /// Normalized quaternion and its norm.
    qn: [f64; 4],
    qnorm: f64,
    /// Ray direction (world) scaled by 1; mean_w = c_a + depth * ray.
    ray: [f64; 3],
    center: [f64; 2],
    /// Screen covariance and its inverse, row-major 2x2.
    inv2: [[f64; 2]; 2],
    /// World covariance pieces for the backward chain.
    rot: [[f64; 3]; 3],
    radius: f64,
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                o[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    o
}

fn mat3_mul_t(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                o[i][j] += a[i][k] * b[j][k];
            }
        }
    }
    o
}

fn prepare(prims: &[PrimIn], consts: &SplatConsts) -> Vec<PrimFwd> {
    let rp = &consts.render_pose;
    let rr = rp.rotation();
    let mut out = Vec::with_capacity(prims.len());
    for (idx, p) in prims.iter().enumerate() {
        let apose = &consts.anchor_poses[consts.prim_anchor[idx]];
        let base = consts.base_pixel[idx];
        let u = base[0] + p.off[0];
        let v = base[1] + p.off[1];
        // Ray in world coordinates at unit z-depth.
        let n = [(u - apose.cx) / apose.fx, (v - apose.cy) / apose.fy, 1.0];
        let ar = apose.rotation();
        let mut ray = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                ray[i] += ar[j][i] * n[j];
            }
        }
        let ca = apose.center();
        let mean_w = [
            ca[0] + p.depth * ray[0],
            ca[1] + p.depth * ray[1],
            ca[2] + p.depth * ray[2],
        ];
        let t = rp.world_to_camera(mean_w);
        if !t[2].is_finite() || t[2] <= Z_NEAR {
            continue;
        }
        let qnorm = p.quat.iter().map(|q| q * q).sum::<f64>().sqrt().max(1e-12);
        let qn = [
            p.quat[0] / qnorm,
            p.quat[1] / qnorm,
            p.quat[2] / qnorm,
            p.quat[3] / qnorm,
        ];
        let rot = quat_to_rotation(p.quat);
        // Sigma_w = R diag(s^2) R^T, then camera frame, then screen.
        let mut rd = [[0.0; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                rd[i][k] = rot[i][k] * p.scale[k] * p.scale[k];
            }
        }
        let cov_w = mat3_mul_t(&rd, &rot);
        let cov_c = mat3_mul_t(&mat3_mul(rr, &cov_w), rr);
        let (fx, fy) = (rp.fx, rp.fy);
        let z = t[2];
        let j = [
            [fx / z, 0.0, -fx * t[0] / (z * z)],
            [0.0, fy / z, -fy * t[1] / (z * z)],
        ];
        let mut cov2 = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        s += j[a][k] * cov_c[k][l] * j[b][l];
                    }
                }
                cov2[a][b] = s;
            }
        }
        cov2[0][0] += COV_FLOOR;
        cov2[1][1] += COV_FLOOR;
        let det = (cov2[0][0] * cov2[1][1] - cov2[0][1] * cov2[1][0]).max(1e-16);
        let inv2 = [
            [cov2[1][1] / det, -cov2[0][1] / det],
            [-cov2[1][0] / det, cov2[0][0] / det],
        ];
        let mid = 0.5 * (cov2[0][0] + cov2[1][1]);
        let disc = (mid * mid - det).max(0.0).sqrt();
        let radius = 3.5 * (mid + disc).max(1e-8).sqrt();
        let center = [fx * t[0] / z + rp.cx, fy * t[1] / z + rp.cy];
        out.push(PrimFwd {
            idx,
            t,
            qn,
            qnorm,
            ray,
            center,
            inv2,
            rot,
            radius,
        });
    }
    // Front-to-back order; ties break on primitive index.
    out.sort_by(|a, b| a.t[2].total_cmp(&b.t[2]).then(a.idx.cmp(&b.idx)));
    out
}

fn forward_f64(prims: &[PrimIn], consts: &SplatConsts) -> Vec<f64> {
    let fwd = prepare(prims, consts);
    let (h, w) = (consts.height, consts.width);
    let mut out = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let mut c = [0.0; 3];
            let mut t_acc = 1.0;
            for f in &fwd {
                let dx = px - f.center[0];
                let dy = py - f.center[1];
                if dx.abs() > f.radius || dy.abs() > f.radius {
                    continue;
                }
                let q = f.inv2[0][0] * dx * dx
                    + 2.0 * f.inv2[0][1] * dx * dy
                    + f.inv2[1][1] * dy * dy;
                if q > CUTOFF_Q {
                    continue;
                }
                let wgt = prims[f.idx].opacity * (-0.5 * q).exp();
                for ch in 0..3 {
                    c[ch] += t_acc * wgt * prims[f.idx].color[ch];
                }
                t_acc *= 1.0 - wgt;
            }
            let o = (y * w + x) * 3;
            for ch in 0..3 {
                out[o + ch] = c[ch] + t_acc * consts.background[ch];
            }
        }
    }
    out
}

#[derive(Debug)]
struct SplatOp {
    consts: SplatConsts,
}

impl<F: Scalar> CustomOp<F> for SplatOp {
    fn backward(&self, inputs: &[&Tensor<F>], grad_out: &Tensor<F>) -> Vec<Tensor<F>> {
        let n = self.consts.prim_anchor.len();
        let prims = gather_inputs(inputs, n).expect("validated at forward");
        let fwd = prepare(&prims, &self.consts);
        let (h, w) = (self.consts.height, self.consts.width);
        let go = grad_out.data();

        let mut d_depth = vec![0.0f64; n];
        let mut d_off = vec![0.0f64; n * 2];
        let mut d_scale = vec![0.0f64; n * 3];
        let mut d_quat = vec![0.0f64; n * 4];
        let mut d_opacity = vec![0.0f64; n];
        let mut d_color = vec![0.0f64; n * 3];
        // Screen-space accumulators per visible primitive.
        let mut d_center = vec![[0.0f64; 2]; fwd.len()];
        let mut d_cov2 = vec![[[0.0f64; 2]; 2]; fwd.len()];

        // Per-pixel compositing backward with a suffix accumulator.
        let mut touched: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                let o = (y * w + x) * 3;
                let dc = [
                    go[o].to_f64_(),
                    go[o + 1].to_f64_(),
                    go[o + 2].to_f64_(),
                ];
                touched.clear();
                let mut t_acc = 1.0;
                for (fi, f) in fwd.iter().enumerate() {
                    let dx = px - f.center[0];
                    let dy = py - f.center[1];
                    if dx.abs() > f.radius || dy.abs() > f.radius {
                        continue;
                    }
                    let q = f.inv2[0][0] * dx * dx
                        + 2.0 * f.inv2[0][1] * dx * dy
                        + f.inv2[1][1] * dy * dy;
                    if q > CUTOFF_Q {
                        continue;
                    }
                    let g = (-0.5 * q).exp();
                    // (fi, g, weight, transmittance before this layer, q)
                    touched.push((fi, g, prims[f.idx].opacity * g, t_acc, q));
                    t_acc *= 1.0 - prims[f.idx].opacity * g;
                }
                // Suffix S = everything composited after layer i.
                let bg = self.consts.background;
                let mut s = [t_acc * bg[0], t_acc * bg[1], t_acc * bg[2]];
                for &(fi, g, wgt, t_before, _) in touched.iter().rev() {
                    let f = &fwd[fi];
                    let p = &prims[f.idx];
                    // dL/dw = dC . (T_i c_i - S / (1 - w)).
                    let mut dw = 0.0;
                    for ch in 0..3 {
                        dw += dc[ch] * (t_before * p.color[ch] - s[ch] / (1.0 - wgt));
                        d_color[f.idx * 3 + ch] += dc[ch] * t_before * wgt;
                        s[ch] += t_before * wgt * p.color[ch];
                    }
                    d_opacity[f.idx] += dw * g;
                    let dg = dw * p.opacity;
                    let dq = -0.5 * g * dg;
                    let dx = px - f.center[0];
                    let dy = py - f.center[1];
                    // d = p - center: dq/dd = 2 M d, dd/dcenter = -I.
                    let md = [
                        f.inv2[0][0] * dx + f.inv2[0][1] * dy,
                        f.inv2[1][0] * dx + f.inv2[1][1] * dy,
                    ];
                    d_center[fi][0] += -2.0 * md[0] * dq;
                    d_center[fi][1] += -2.0 * md[1] * dq;
                    // dq/dM = d d^T; dL/dSigma2 = -M (dq d d^T) M.
                    let dm = [[dq * dx * dx, dq * dx * dy], [dq * dy * dx, dq * dy * dy]];
                    // dSigma = -M dM M.
                    for a in 0..2 {
                        for b in 0..2 {
                            let mut v = 0.0;
                            for i in 0..2 {
                                for j in 0..2 {
                                    v += f.inv2[a][i] * dm[i][j] * f.inv2[j][b];
                                }
                            }
                            d_cov2[fi][a][b] -= v;
                        }
                    }
                }
            }
        }

        // Chain screen-space gradients back to the 3-D parameters.
        let rp = &self.consts.render_pose;
        let rr = rp.rotation();
        for (fi, f) in fwd.iter().enumerate() {
            let p = &prims[f.idx];
            let (fx, fy) = (rp.fx, rp.fy);
            let (tx, ty, tz) = (f.t[0], f.t[1], f.t[2]);
            let j = [
                [fx / tz, 0.0, -fx * tx / (tz * tz)],
                [0.0, fy / tz, -fy * ty / (tz * tz)],
            ];
            // Rebuild camera covariance for the J-gradient term.
            let mut rd = [[0.0; 3]; 3];
            for i in 0..3 {
                for k in 0..3 {
                    rd[i][k] = f.rot[i][k] * p.scale[k] * p.scale[k];
                }
            }
            let cov_w = mat3_mul_t(&rd, &f.rot);
            let cov_c = mat3_mul_t(&mat3_mul(rr, &cov_w), rr);

            let g2 = &d_cov2[fi];
            // dJ = 2 G J Sigma_c (G, Sigma_c symmetric).
            let mut dj = [[0.0; 3]; 3]; // use rows 0..2
            for a in 0..2 {
                for k in 0..3 {
                    let mut v = 0.0;
                    for b in 0..2 {
                        for l in 0..3 {
                            v += g2[a][b] * j[b][l] * cov_c[l][k];
                        }
                    }
                    dj[a][k] = 2.0 * v;
                }
            }
            // dSigma_c = J^T G J.
            let mut d_cov_c = [[0.0; 3]; 3];
            for k in 0..3 {
                for l in 0..3 {
                    let mut v = 0.0;
                    for a in 0..2 {
                        for b in 0..2 {
                            v += j[a][k] * g2[a][b] * j[b][l];
                        }
                    }
                    d_cov_c[k][l] = v;
                }
            }
            // dSigma_w = R_r^T dSigma_c R_r.
            let mut d_cov_w = [[0.0; 3]; 3];
            for k in 0..3 {
                for l in 0..3 {
                    let mut v = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            v += rr[a][k] * d_cov_c[a][b] * rr[b][l];
                        }
                    }
                    d_cov_w[k][l] = v;
                }
            }
            // Scale: Sigma_w = R D R^T, dD_kk = (R^T dSigma_w R)_kk.
            for k in 0..3 {
                let mut v = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        v += f.rot[a][k] * d_cov_w[a][b] * f.rot[b][k];
                    }
                }
                d_scale[f.idx * 3 + k] += v * 2.0 * p.scale[k];
            }
            // Rotation: dR = 2 dSigma_w R D.
            let mut dr = [[0.0; 3]; 3];
            for a in 0..3 {
                for k in 0..3 {
                    let mut v = 0.0;
                    for b in 0..3 {
                        v += d_cov_w[a][b] * f.rot[b][k];
                    }
                    dr[a][k] = 2.0 * v * p.scale[k] * p.scale[k];
                }
            }
            // Quaternion through normalization.
            let (qw, qx, qy, qz) = (f.qn[0], f.qn[1], f.qn[2], f.qn[3]);
            let drdq: [[[f64; 3]; 3]; 4] = [
                [
                    [0.0, -qz, qy],
                    [qz, 0.0, -qx],
                    [-qy, qx, 0.0],
                ],
                [
                    [0.0, qy, qz],
                    [qy, -2.0 * qx, -qw],
                    [qz, qw, -2.0 * qx],
                ],
                [
                    [-2.0 * qy, qx, qw],
                    [qx, 0.0, qz],
                    [-qw, qz, -2.0 * qy],
                ],
                [
                    [-2.0 * qz, -qw, qx],
                    [qw, -2.0 * qz, qy],
                    [qx, qy, 0.0],
                ],
            ];
            let mut dqn = [0.0; 4];
            for c in 0..4 {
                let mut v = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        v += dr[a][b] * 2.0 * drdq[c][a][b];
                    }
                }
                dqn[c] = v;
            }
            // dq = (I - qn qn^T) dqn / |q|.
            let dot = (0..4).map(|i| dqn[i] * f.qn[i]).sum::<f64>();
            for c in 0..4 {
                d_quat[f.idx * 4 + c] += (dqn[c] - f.qn[c] * dot) / f.qnorm;
            }

            // Mean path: screen center and the Jacobian's t-dependence.
            let dcx = d_center[fi][0];
            let dcy = d_center[fi][1];
            let mut dt = [
                dcx * fx / tz,
                dcy * fy / tz,
                -dcx * fx * tx / (tz * tz) - dcy * fy * ty / (tz * tz),
            ];
            dt[0] += dj[0][2] * (-fx / (tz * tz));
            dt[1] += dj[1][2] * (-fy / (tz * tz));
            dt[2] += dj[0][0] * (-fx / (tz * tz))
                + dj[1][1] * (-fy / (tz * tz))
                + dj[0][2] * (2.0 * fx * tx / (tz * tz * tz))
                + dj[1][2] * (2.0 * fy * ty / (tz * tz * tz));
            // t = R_r (mean_w - c_r): dmean_w = R_r^T dt.
            let mut dmw = [0.0; 3];
            for i in 0..3 {
                for a in 0..3 {
                    dmw[i] += rr[a][i] * dt[a];
                }
            }
            // mean_w = c_a + depth * ray(u, v).
            d_depth[f.idx] += dmw[0] * f.ray[0] + dmw[1] * f.ray[1] + dmw[2] * f.ray[2];
            let apose = &self.consts.anchor_poses[self.consts.prim_anchor[f.idx]];
            let ar = apose.rotation();
            // ray = A^T n, n = ((u-cx)/fx, (v-cy)/fy, 1): dn = A dmw * depth.
            let mut dn = [0.0; 3];
            for i in 0..3 {
                for k in 0..3 {
                    dn[i] += ar[i][k] * dmw[k];
                }
            }
            d_off[f.idx * 2] += p.depth * dn[0] / apose.fx;
            d_off[f.idx * 2 + 1] += p.depth * dn[1] / apose.fy;
        }

        let mk = |shape: &[usize], v: Vec<f64>| {
            Tensor::new(shape, v.into_iter().map(F::from_f64_).collect()).unwrap()
        };
        vec![
            mk(&[n, 1], d_depth),
            mk(&[n, 2], d_off),
            mk(&[n, 3], d_scale),
            mk(&[n, 4], d_quat),
            mk(&[n, 1], d_opacity),
            mk(&[n, 3], d_color),
        ]
    }
}

/// Register the splat op on a tape. Inputs are per-primitive
/// (depth, offset, scale, quat, opacity, color); output is [h, w, 3].
pub fn splat<F: Scalar>(
    tape: &mut Tape<F>,
    depth: Var,
    offset: Var,
    scale: Var,
    quat: Var,
    opacity: Var,
    color: Var,
    consts: SplatConsts,
) -> Result<Var> {
    consts.validate()?;
    let n = consts.prim_anchor.len();
    let vars = [depth, offset, scale, quat, opacity, color];
    let tensors: Vec<Tensor<F>> = vars.iter().map(|&v| tape.value(v).clone()).collect();
    let refs: Vec<&Tensor<F>> = tensors.iter().collect();
    let prims = gather_inputs(&refs, n)?;
    let value = Tensor::new(
        &[consts.height, consts.width, 3],
        forward_f64(&prims, &consts).into_iter().map(F::from_f64_).collect(),
    )?;
    Ok(tape.custom(&vars, value, Rc::new(SplatOp { consts })))
}
