//! End to end: encode K input views, pick N anchors, fuse supports into
//! them, sample a latent, predict pixel-aligned primitives, splat into the
//! target views, and score with the bottleneck loss. Plus the SGD training
//! loop, held-out evaluation, and checkpoints.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{
    compress_tape, init_params, Ablation, Affine, CompressorParams, FusionMode,
};
use crate::diffsplat::{splat, SplatConsts};
use crate::error::{Error, Result};
use crate::geometry::{overlap_matrix, pairwise_distances, CameraPose};
use crate::numcore::{save_archive, load_archive, Scalar, Tape, Tensor, Var};
use crate::scene::{
    encode_view, make_scene, make_trajectory, psnr, Image, SceneSpec, TrajectoryKind,
    ViewFeature,
};
use crate::selection::{
    assign_supports, default_kmeans_iters, partition_from_kmeans, select_anchors_feature,
    select_anchors_fps, select_anchors_kmeans, select_anchors_overlap, AnchorPartition,
    FirstAnchor, Strategy,
};

/// Raw outputs per latent token: depth 1, pixel offset 2, scale 3,
/// quaternion 4, opacity 1, color 3.
pub const HEAD_OUTPUTS: usize = 14;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub k_views: usize,
    pub n_anchors: usize,
    pub strategy: Strategy,
    pub mode: FusionMode,
    pub ablation: Ablation,
    pub blocks: usize,
    pub heads: usize,
    pub channels: usize,
    pub patch: usize,
    pub image: usize,
    pub beta: f64,
    pub lr: f64,
    /// SGD momentum; 0 disables it.
    pub momentum: f64,
    pub steps: usize,
    /// Angular extent of the camera arc in radians.
    pub baseline: f64,
    /// Focal length as a multiple of the image size; larger narrows the
    /// field of view, reducing inter-view overlap.
    pub focal_scale: f64,
    pub scene_blobs: usize,
    /// Novel views rendered per training step.
    pub train_targets: usize,
    /// Held-out novel views per evaluation scene.
    pub eval_targets: usize,
    pub encoder_seed: u64,
    /// When set, every step re-uses this one scene (overfit mode).
    pub overfit_scene: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_views: 12,
            n_anchors: 6,
            strategy: Strategy::Fps,
            mode: FusionMode::Default,
            ablation: Ablation::default(),
            blocks: 2,
            heads: 2,
            channels: 10,
            patch: 4,
            image: 32,
            beta: 1e-5,
            lr: 0.3,
            momentum: 0.9,
            steps: 2000,
            baseline: 2.4,
            focal_scale: 1.0,
            scene_blobs: 8,
            train_targets: 4,
            eval_targets: 8,
            encoder_seed: 8,
            overfit_scene: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_anchors < 1 || self.n_anchors > self.k_views {
            return Err(Error::config("n_anchors must be in 1..=k_views"));
        }
        if self.patch == 0 || self.image % self.patch != 0 {
            return Err(Error::config("patch must divide image size"));
        }
        if self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::config("channels must be divisible by heads"));
        }
        if self.blocks < 1 || self.train_targets < 1 || self.eval_targets < 1 {
            return Err(Error::config("blocks and target counts must be >= 1"));
        }
        if !(self.baseline > 0.0) || self.lr <= 0.0 || self.beta < 0.0 {
            return Err(Error::config("baseline/lr must be > 0, beta >= 0"));
        }
        if !(self.focal_scale > 0.0) {
            return Err(Error::config("focal_scale must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if self.scene_blobs < 1 {
            return Err(Error::config("scene_blobs must be >= 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    /// Latent token count, and therefore primitive count.
    pub fn n_primitives(&self) -> usize {
        self.n_anchors * self.grid() * self.grid()
    }
}

/// Per-token prediction head: C -> 2C -> 14 raw outputs.
#[derive(Debug, Clone)]
pub struct PredictorParams<T> {
    pub fc1: Affine<T>,
    pub fc2: Affine<T>,
}

impl<T> PredictorParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> PredictorParams<U> {
        PredictorParams {
            fc1: Affine { weight: f(&self.fc1.weight), bias: f(&self.fc1.bias) },
            fc2: Affine { weight: f(&self.fc2.weight), bias: f(&self.fc2.bias) },
        }
    }
}

impl<F: Scalar> PredictorParams<Tensor<F>> {
    pub fn flatten(&self) -> Vec<Tensor<F>> {
        vec![
            self.fc1.weight.clone(),
            self.fc1.bias.clone(),
            self.fc2.weight.clone(),
            self.fc2.bias.clone(),
        ]
    }

    pub fn with_values(&self, values: &[Tensor<F>]) -> Result<Self> {
        if values.len() != 4 {
            return Err(Error::invalid("predictor parameter count mismatch"));
        }
        Ok(PredictorParams {
            fc1: Affine { weight: values[0].clone(), bias: values[1].clone() },
            fc2: Affine { weight: values[2].clone(), bias: values[3].clone() },
        })
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> (PredictorParams<Var>, Vec<Var>) {
        let mut vars = Vec::new();
        let bound = self.map(&mut |t| {
            let v = tape.leaf(t.clone());
            vars.push(v);
            v
        });
        (bound, vars)
    }

    pub fn names() -> Vec<String> {
        ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
            .iter()
            .map(|s| format!("predictor.{s}"))
            .collect()
    }
}

/// Head initialization: biases place every primitive near the scene center
/// with moderate footprint and half opacity, so step 0 renders something.
pub fn init_predictor<F: Scalar>(channels: usize, seed: u64) -> Result<PredictorParams<Tensor<F>>> {
    let c = channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: &[usize], bound: f64| -> Tensor<F> {
        use rand::Rng;
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| F::from_f64_(rng.gen_range(-bound..bound))).collect(),
        )
        .unwrap()
    };
    let fc1 = Affine {
        weight: uniform(&[2 * c, c], 1.0 / (c as f64).sqrt()),
        bias: Tensor::zeros(&[2 * c]),
    };
    let mut bias = vec![0.0f64; HEAD_OUTPUTS];
    bias[0] = 2.3; // softplus(2.3) + 0.1 ~ 2.5, the camera orbit radius
    bias[3] = -1.0; // softplus(-1) * 0.3 + 0.02 ~ 0.11 scene units
    bias[4] = -1.0;
    bias[5] = -1.0;
    bias[6] = 1.0; // identity quaternion
    let fc2 = Affine {
        weight: uniform(&[HEAD_OUTPUTS, 2 * c], 1.0 / (2.0 * c as f64).sqrt()),
        bias: Tensor::new(&[HEAD_OUTPUTS], bias.into_iter().map(F::from_f64_).collect())?,
    };
    Ok(PredictorParams { fc1, fc2 })
}

/// Activated primitive parameter handles on a tape.
pub struct PrimitiveVars {
    pub depth: Var,
    pub offset: Var,
    pub scale: Var,
    pub quat: Var,
    pub opacity: Var,
    pub color: Var,
}

/// Run the head on latent tokens [P, C] and apply the activations.
pub fn predict_gaussians_tape<F: Scalar>(
    tape: &mut Tape<F>,
    latent_tokens: Var,
    params: &PredictorParams<Var>,
    patch: usize,
) -> Result<PrimitiveVars> {
    let h = tape.linear(latent_tokens, params.fc1.weight, params.fc1.bias)?;
    let h = tape.gelu(h);
    let raw = tape.linear(h, params.fc2.weight, params.fc2.bias)?;

    let d0 = tape.narrow_cols(raw, 0, 1)?;
    let d1 = tape.softplus(d0);
    let d2 = tape.add_scalar(d1, F::from_f64_(0.1));
    let depth = tape.clamp_max(d2, F::from_f64_(10.0));

    let o0 = tape.narrow_cols(raw, 1, 2)?;
    let o1 = tape.sigmoid(o0);
    let o2 = tape.add_scalar(o1, F::from_f64_(-0.5));
    let offset = tape.scale(o2, F::from_f64_(patch as f64));

    let s0 = tape.narrow_cols(raw, 3, 3)?;
    let s1 = tape.softplus(s0);
    let s2 = tape.scale(s1, F::from_f64_(0.3));
    let scale = tape.add_scalar(s2, F::from_f64_(0.02));

    let quat = tape.narrow_cols(raw, 6, 4)?;
    let op0 = tape.narrow_cols(raw, 10, 1)?;
    let opacity = tape.sigmoid(op0);
    let c0 = tape.narrow_cols(raw, 11, 3)?;
    let color = tape.sigmoid(c0);

    Ok(PrimitiveVars { depth, offset, scale, quat, opacity, color })
}

/// One synthetic training / evaluation problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub scene: SceneSpec,
    pub input_poses: Vec<CameraPose>,
    pub input_images: Vec<Image>,
    pub target_poses: Vec<CameraPose>,
    pub target_images: Vec<Image>,
}

fn split_indices(total: usize, targets: usize) -> (Vec<usize>, Vec<usize>) {
    let step = total as f64 / targets as f64;
    let tset: Vec<usize> = (0..targets).map(|i| ((i as f64 + 0.5) * step) as usize).collect();
    let mut inputs = Vec::with_capacity(total - targets);
    for i in 0..total {
        if !tset.contains(&i) {
            inputs.push(i);
        }
    }
    (inputs, tset)
}

/// Build a seeded scene with `k_views` inputs and `targets` held-out views
/// interleaved on the same arc.
pub fn make_instance(cfg: &PipelineConfig, scene_seed: u64, targets: usize) -> Result<Instance> {
    let scene = make_scene(cfg.scene_blobs, scene_seed)?;
    let total = cfg.k_views + targets;
    let focal = cfg.image as f64 * cfg.focal_scale;
    let poses = make_trajectory(
        TrajectoryKind::Arc,
        total,
        cfg.baseline,
        [0.0, 0.0, 0.0],
        cfg.image as u32,
        focal,
    )?;
    let (in_idx, tgt_idx) = split_indices(total, targets);
    let render_at = |i: &usize| {
        crate::scene::render(&scene.blobs, &poses[*i], scene.background, cfg.image, cfg.image)
    };
    let input_images: Vec<Image> = in_idx.iter().map(render_at).collect::<Result<_>>()?;
    let target_images: Vec<Image> = tgt_idx.iter().map(render_at).collect::<Result<_>>()?;
    Ok(Instance {
        scene,
        input_poses: in_idx.iter().map(|&i| poses[i].clone()).collect(),
        input_images,
        target_poses: tgt_idx.iter().map(|&i| poses[i].clone()).collect(),
        target_images,
    })
}

/// Anchor selection + support assignment for a set of posed features.
pub fn select_partition<F: Scalar>(
    poses: &[CameraPose],
    features: &[ViewFeature<F>],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<AnchorPartition> {
    let distances = pairwise_distances(poses)?;
    match cfg.strategy {
        Strategy::Fps => {
            let anchors =
                select_anchors_fps(&distances, cfg.n_anchors, FirstAnchor::Index(0))?;
            assign_supports(&distances, &anchors, Strategy::Fps)
        }
        Strategy::Overlap => {
            let overlaps = overlap_matrix(poses, 8, &[1.5, 2.5, 3.5])?;
            let anchors = select_anchors_overlap(&overlaps, cfg.n_anchors)?;
            assign_supports(&distances, &anchors, Strategy::Overlap)
        }
        Strategy::KmeansPose => {
            let centers: Vec<[f64; 3]> = poses.iter().map(|p| p.center()).collect();
            let (anchors, clusters) =
                select_anchors_kmeans(&centers, cfg.n_anchors, seed, default_kmeans_iters())?;
            partition_from_kmeans(poses.len(), anchors, clusters, Strategy::KmeansPose)
        }
        Strategy::KmeansFeature => {
            let embeds: Vec<Vec<f64>> = features
                .iter()
                .map(|f| {
                    let t = f.tokens.data();
                    let (n, c) = (f.rows * f.cols, f.channels);
                    (0..c)
                        .map(|ch| {
                            (0..n).map(|i| t[i * c + ch].to_f64_()).sum::<f64>() / n as f64
                        })
                        .collect()
                })
                .collect();
            let (anchors, clusters) =
                select_anchors_feature(&embeds, cfg.n_anchors, seed, default_kmeans_iters())?;
            partition_from_kmeans(poses.len(), anchors, clusters, Strategy::KmeansFeature)
        }
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    pub total: Var,
    pub task: Var,
    pub kl: Var,
    pub rendered: Vec<Var>,
    pub partition: AnchorPartition,
    pub n_primitives: usize,
}

/// Encode, select, compress, predict, splat, and score one instance.
pub fn forward_tape<F: Scalar>(
    tape: &mut Tape<F>,
    inst: &Instance,
    comp: &CompressorParams<Var>,
    pred: &PredictorParams<Var>,
    cfg: &PipelineConfig,
    noise: Option<&Tensor<F>>,
    selection_seed: u64,
) -> Result<ForwardVars> {
    if inst.input_images.len() != cfg.k_views {
        return Err(Error::invalid(format!(
            "forward: {} input views, config wants {}",
            inst.input_images.len(),
            cfg.k_views
        )));
    }
    let features: Vec<ViewFeature<F>> = inst
        .input_images
        .iter()
        .map(|img| encode_view(img, cfg.patch, cfg.channels, cfg.encoder_seed))
        .collect::<Result<_>>()?;
    let partition = select_partition(&inst.input_poses, &features, cfg, selection_seed)?;
    let latent = compress_tape(tape, &features, &partition, comp, cfg.mode, cfg.ablation, noise)?;
    let prims = predict_gaussians_tape(tape, latent.sample, pred, cfg.patch)?;

    let grid = cfg.grid();
    let t_tokens = grid * grid;
    let n_prims = partition.anchors.len() * t_tokens;
    let mut prim_anchor = Vec::with_capacity(n_prims);
    let mut base_pixel = Vec::with_capacity(n_prims);
    for a in 0..partition.anchors.len() {
        for t in 0..t_tokens {
            let row = t / grid;
            let col = t % grid;
            prim_anchor.push(a);
            base_pixel.push([
                (col as f64 + 0.5) * cfg.patch as f64,
                (row as f64 + 0.5) * cfg.patch as f64,
            ]);
        }
    }
    let anchor_poses: Vec<CameraPose> = partition
        .anchors
        .iter()
        .map(|&a| inst.input_poses[a].clone())
        .collect();

    let mut task_sum: Option<Var> = None;
    let mut rendered = Vec::with_capacity(inst.target_poses.len());
    for (pose, target) in inst.target_poses.iter().zip(&inst.target_images) {
        let consts = SplatConsts {
            anchor_poses: anchor_poses.clone(),
            prim_anchor: prim_anchor.clone(),
            base_pixel: base_pixel.clone(),
            render_pose: pose.clone(),
            background: inst.scene.background,
            height: cfg.image,
            width: cfg.image,
        };
        let img = splat(
            tape,
            prims.depth,
            prims.offset,
            prims.scale,
            prims.quat,
            prims.opacity,
            prims.color,
            consts,
        )?;
        rendered.push(img);
        let mse = tape.mse(img, &target.to_tensor())?;
        task_sum = Some(match task_sum {
            Some(acc) => tape.add(acc, mse)?,
            None => mse,
        });
    }
    let task = tape.scale(
        task_sum.expect("at least one target"),
        F::from_f64_(1.0 / inst.target_poses.len() as f64),
    );
    let kl = tape.kl_standard_normal(latent.mean, latent.logvar)?;
    let scaled_kl = tape.scale(kl, F::from_f64_(cfg.beta));
    let total = tape.add(task, scaled_kl)?;
    Ok(ForwardVars { total, task, kl, rendered, partition, n_primitives: n_prims })
}

/// One metrics row per training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub task: f64,
    pub kl: f64,
    pub total: f64,
    pub psnr: f64,
    pub wallclock_ms: f64,
    pub n_primitives: usize,
}

pub const METRICS_HEADER: &str = "step,task,kl,total,psnr,wallclock_ms,n_primitives";

/// Persist step metrics. The file must be a pure function of (config, seed)
/// so reruns are byte-identical; wall-clock jitter would break that, so the
/// wallclock_ms column is written as 0 and live timing stays in-process (the
/// `StepMetrics` values returned by `train`, `evaluate`, and the bench CSVs).
pub fn write_metrics_csv(path: &std::path::Path, rows: &[StepMetrics]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},0,{}\n",
            r.step, r.task, r.kl, r.total, r.psnr, r.n_primitives
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Trained state: fusion stack + prediction head + the config that made it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub cfg: PipelineConfig,
    pub comp: CompressorParams<Tensor<f32>>,
    pub pred: PredictorParams<Tensor<f32>>,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointSidecar {
    cfg: PipelineConfig,
    step: usize,
}

impl Checkpoint {
    pub fn init(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Checkpoint {
            cfg: cfg.clone(),
            comp: init_params(cfg.channels, cfg.blocks, cfg.heads, seed)?,
            pred: init_predictor(cfg.channels, seed.wrapping_add(1))?,
            step: 0,
        })
    }

    /// Archive plus a JSON sidecar (same path with ".json" appended).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut named: Vec<(String, Tensor<f32>)> = self
            .comp
            .names()
            .into_iter()
            .zip(self.comp.flatten())
            .collect();
        named.extend(
            PredictorParams::<Tensor<f32>>::names()
                .into_iter()
                .zip(self.pred.flatten()),
        );
        save_archive(path, &named)?;
        let sidecar = CheckpointSidecar { cfg: self.cfg.clone(), step: self.step };
        std::fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let sidecar: CheckpointSidecar =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let cfg = sidecar.cfg;
        cfg.validate()?;
        let stored: std::collections::HashMap<String, Tensor<f32>> =
            load_archive(path)?.into_iter().collect();
        let template: CompressorParams<Tensor<f32>> =
            init_params(cfg.channels, cfg.blocks, cfg.heads, 0)?;
        let mut comp_vals = Vec::new();
        for n in template.names() {
            comp_vals.push(
                stored
                    .get(&n)
                    .ok_or_else(|| Error::invalid(format!("checkpoint missing {n}")))?
                    .clone(),
            );
        }
        let comp = template.with_values(&comp_vals)?;
        let ptemplate: PredictorParams<Tensor<f32>> = init_predictor(cfg.channels, 0)?;
        let mut pred_vals = Vec::new();
        for n in PredictorParams::<Tensor<f32>>::names() {
            pred_vals.push(
                stored
                    .get(&n)
                    .ok_or_else(|| Error::invalid(format!("checkpoint missing {n}")))?
                    .clone(),
            );
        }
        let pred = ptemplate.with_values(&pred_vals)?;
        Ok(Checkpoint { cfg, comp, pred, step: sidecar.step })
    }
}

fn sidecar_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

fn mix(seed: u64, step: u64) -> u64 {
    // splitmix64 round over (seed, step)
    let mut z = seed
        .wrapping_add(step.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// SGD training over fresh seeded scenes (or one fixed scene in overfit
/// mode). Only the fusion stack and predictor train; the encoder is frozen.
pub fn train(cfg: &PipelineConfig, seed: u64) -> Result<(Checkpoint, Vec<StepMetrics>)> {
    cfg.validate()?;
    let mut ckpt = Checkpoint::init(cfg, seed)?;
    let mut metrics = Vec::with_capacity(cfg.steps);
    let lr = cfg.lr as f32;
    let mu = cfg.momentum as f32;
    // Momentum buffers, one per parameter tensor (fusion stack then head).
    let mut velocity: Vec<Tensor<f32>> = ckpt
        .comp
        .flatten()
        .iter()
        .chain(ckpt.pred.flatten().iter())
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let scene_seed = cfg.overfit_scene.unwrap_or_else(|| mix(seed, step as u64));
        let inst = make_instance(cfg, scene_seed, cfg.train_targets)?;

        let mut tape: Tape<f32> = Tape::new();
        let (comp_bound, comp_vars) = ckpt.comp.bind(&mut tape);
        let (pred_bound, pred_vars) = ckpt.pred.bind(&mut tape);
        let n_latent = cfg.n_primitives();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0xA5A5_5A5A, step as u64));
        let noise: Tensor<f32> =
            crate::compressor::sample_noise(&[n_latent, cfg.channels], &mut noise_rng);
        let fwd = forward_tape(
            &mut tape,
            &inst,
            &comp_bound,
            &pred_bound,
            cfg,
            Some(&noise),
            scene_seed,
        )?;
        let task = tape.value(fwd.task).item().to_f64_();
        let kl = tape.value(fwd.kl).item().to_f64_();
        let total = tape.value(fwd.total).item().to_f64_();
        if !total.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        let rendered0 = Image::from_tensor(tape.value(fwd.rendered[0]))?;
        let step_psnr = psnr(&rendered0, &inst.target_images[0])?;

        let grads = tape.backward(fwd.total)?;
        let apply = |vals: Vec<Tensor<f32>>,
                         vars: &[Var],
                         vel: &mut [Tensor<f32>]|
         -> Vec<Tensor<f32>> {
            vals.into_iter()
                .zip(vars)
                .zip(vel.iter_mut())
                .map(|((t, &v), vbuf)| {
                    let shape = t.shape().to_vec();
                    let g = grads.of(v, &shape);
                    let new_v: Vec<f32> = vbuf
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&vv, &gv)| mu * vv + gv)
                        .collect();
                    let updated = Tensor::new(
                        &shape,
                        t.data()
                            .iter()
                            .zip(&new_v)
                            .map(|(&p, &vv)| p - lr * vv)
                            .collect(),
                    )
                    .unwrap();
                    *vbuf = Tensor::new(&shape, new_v).unwrap();
                    updated
                })
                .collect()
        };
        let n_comp = comp_vars.len();
        let (vel_c, vel_p) = velocity.split_at_mut(n_comp);
        let new_comp = apply(ckpt.comp.flatten(), &comp_vars, vel_c);
        let new_pred = apply(ckpt.pred.flatten(), &pred_vars, vel_p);
        if new_comp.iter().chain(&new_pred).any(|t| !t.all_finite()) {
            return Err(Error::TrainingDiverged { step });
        }
        ckpt.comp = ckpt.comp.with_values(&new_comp)?;
        ckpt.pred = ckpt.pred.with_values(&new_pred)?;
        ckpt.step = step + 1;

        metrics.push(StepMetrics {
            step,
            task,
            kl,
            total,
            psnr: step_psnr,
            wallclock_ms: t0.elapsed().as_secs_f64() * 1e3,
            n_primitives: fwd.n_primitives,
        });
    }
    Ok((ckpt, metrics))
}

/// Held-out evaluation over seeded scenes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_psnr: f64,
    pub median_psnr: f64,
    pub per_scene_psnr: Vec<f64>,
    pub wallclock_ms_per_forward: f64,
    pub n_primitives: usize,
    pub task: f64,
    pub kl: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Evaluate a checkpoint on fresh scenes. `eval_cfg` may change k_views and
/// fusion mode relative to training.
pub fn evaluate(ckpt: &Checkpoint, eval_cfg: &PipelineConfig, scene_seeds: &[u64]) -> Result<EvalReport> {
    eval_cfg.validate()?;
    if scene_seeds.is_empty() {
        return Err(Error::invalid("evaluate: need at least one scene seed"));
    }
    let mut per_scene = Vec::with_capacity(scene_seeds.len());
    let mut wall = 0.0;
    let mut n_prims = 0;
    let mut task_acc = 0.0;
    let mut kl_acc = 0.0;
    for &scene_seed in scene_seeds {
        let inst = make_instance(eval_cfg, scene_seed, eval_cfg.eval_targets)?;
        let t0 = Instant::now();
        let mut tape: Tape<f32> = Tape::new();
        let (comp_bound, _) = ckpt.comp.bind(&mut tape);
        let (pred_bound, _) = ckpt.pred.bind(&mut tape);
        let fwd = forward_tape(
            &mut tape,
            &inst,
            &comp_bound,
            &pred_bound,
            eval_cfg,
            None,
            scene_seed,
        )?;
        wall += t0.elapsed().as_secs_f64() * 1e3;
        n_prims = fwd.n_primitives;
        task_acc += tape.value(fwd.task).item().to_f64_();
        kl_acc += tape.value(fwd.kl).item().to_f64_();
        let mut scene_psnr = 0.0;
        for (img_var, target) in fwd.rendered.iter().zip(&inst.target_images) {
            let img = Image::from_tensor(tape.value(*img_var))?;
            scene_psnr += psnr(&img, target)?;
        }
        per_scene.push(scene_psnr / inst.target_images.len() as f64);
    }
    Ok(EvalReport {
        mean_psnr: per_scene.iter().sum::<f64>() / per_scene.len() as f64,
        median_psnr: median(&per_scene),
        per_scene_psnr: per_scene,
        wallclock_ms_per_forward: wall / scene_seeds.len() as f64,
        n_primitives: n_prims,
        task: task_acc / scene_seeds.len() as f64,
        kl: kl_acc / scene_seeds.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> PipelineConfig {
        PipelineConfig {
            k_views: 4,
            n_anchors: 2,
            image: 16,
            patch: 4,
            channels: 16,
            heads: 4,
            blocks: 1,
            train_targets: 2,
            eval_targets: 2,
            steps: 0,
            scene_blobs: 3,
            lr: 3.0,
            baseline: 1.2,
            encoder_seed: 7,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let mut bad = PipelineConfig::default();
        bad.n_anchors = bad.k_views + 1;
        assert!(bad.validate().is_err());
        let mut bad = PipelineConfig::default();
        bad.patch = 5;
        assert!(bad.validate().is_err());
        let mut bad = PipelineConfig::default();
        bad.channels = 9;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn primitive_count_law() {
        let mut cfg = PipelineConfig::default();
        cfg.image = 64;
        cfg.patch = 8; // 8x8 grid
        cfg.n_anchors = 6;
        assert_eq!(cfg.n_primitives(), 384);
        for k in [8, 12, 24, 36] {
            cfg.k_views = k;
            assert_eq!(cfg.n_primitives(), 384);
        }
    }

    #[test]
    fn split_indices_are_disjoint_and_exhaustive() {
        for (total, tgt) in [(6, 2), (20, 8), (14, 2)] {
            let (inputs, targets) = split_indices(total, tgt);
            assert_eq!(targets.len(), tgt);
            assert_eq!(inputs.len() + targets.len(), total);
            let mut all: Vec<usize> = inputs.iter().chain(&targets).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..total).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_steps_returns_init_checkpoint() {
        let cfg = tiny_cfg();
        let (ckpt, metrics) = train(&cfg, 3).unwrap();
        assert_eq!(ckpt.step, 0);
        assert!(metrics.is_empty());
        let fresh = Checkpoint::init(&cfg, 3).unwrap();
        for (a, b) in ckpt.comp.flatten().iter().zip(fresh.comp.flatten().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut cfg = tiny_cfg();
        cfg.steps = 5;
        let (_, m1) = train(&cfg, 11).unwrap();
        let (_, m2) = train(&cfg, 11).unwrap();
        for (a, b) in m1.iter().zip(&m2) {
            assert_eq!((a.task, a.kl, a.total, a.psnr), (b.task, b.kl, b.total, b.psnr));
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let cfg = tiny_cfg();
        let ckpt = Checkpoint::init(&cfg, 4).unwrap();
        let a = evaluate(&ckpt, &cfg, &[1, 2]).unwrap();
        let b = evaluate(&ckpt, &cfg, &[1, 2]).unwrap();
        assert_eq!(a.per_scene_psnr, b.per_scene_psnr);
        assert_eq!(a.task, b.task);
    }

    #[test]
    fn all_zero_head_weights_share_bias_parameters() {
        let cfg = tiny_cfg();
        let mut pred: PredictorParams<Tensor<f32>> = init_predictor(cfg.channels, 0).unwrap();
        let flat = pred.flatten();
        let zeroed: Vec<Tensor<f32>> = flat
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == 2 {
                    Tensor::zeros(t.shape())
                } else {
                    t.clone()
                }
            })
            .collect();
        pred = pred.with_values(&zeroed).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let (pb, _) = pred.bind(&mut tape);
        let tokens = tape.leaf(Tensor::full(&[6, cfg.channels], 0.3f32));
        let prims = predict_gaussians_tape(&mut tape, tokens, &pb, cfg.patch).unwrap();
        let d = tape.value(prims.depth);
        assert!(d.data().windows(2).all(|w| w[0] == w[1]));
        let c = tape.value(prims.color);
        assert!(c.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn overfit_single_scene_drops_task_loss() {
        let mut cfg = tiny_cfg();
        cfg.steps = 500;
        cfg.overfit_scene = Some(21);
        let (_, metrics) = train(&cfg, 13).unwrap();
        let first = metrics[0].task;
        let last = metrics.last().unwrap().task;
        assert!(
            last <= 0.1 * first,
            "task loss {first} -> {last}, wanted >= 90% drop"
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.zptn");
        let mut cfg = tiny_cfg();
        cfg.steps = 2;
        let (ckpt, _) = train(&cfg, 5).unwrap();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 2);
        assert_eq!(loaded.cfg, cfg);
        for (a, b) in ckpt.comp.flatten().iter().zip(loaded.comp.flatten().iter()) {
            assert_eq!(a.data(), b.data());
        }
        // Loaded checkpoint evaluates identically.
        let e1 = evaluate(&ckpt, &cfg, &[9]).unwrap();
        let e2 = evaluate(&loaded, &cfg, &[9]).unwrap();
        assert_eq!(e1.per_scene_psnr, e2.per_scene_psnr);
    }

    #[test]
    fn strategies_all_produce_valid_partitions() {
        let cfg = tiny_cfg();
        let inst = make_instance(&cfg, 7, 2).unwrap();
        let feats: Vec<ViewFeature<f32>> = inst
            .input_images
            .iter()
            .map(|img| encode_view(img, cfg.patch, cfg.channels, cfg.encoder_seed).unwrap())
            .collect();
        for strat in [
            Strategy::Fps,
            Strategy::Overlap,
            Strategy::KmeansPose,
            Strategy::KmeansFeature,
        ] {
            let mut c = cfg.clone();
            c.strategy = strat;
            let part = select_partition(&inst.input_poses, &feats, &c, 3).unwrap();
            part.validate().unwrap();
            assert_eq!(part.anchors.len(), cfg.n_anchors);
        }
    }
}
