//! Anchor-centric information fusion: each anchor's token grid attends to
//! the raw tokens of its support views through a stack of pre-norm blocks
//! (cross-attention, self-attention, MLP, each residual), then a linear head
//! produces a diagonal Gaussian posterior over the latent.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{save_archive, load_archive, Scalar, Tape, Tensor, Var};
use crate::scene::ViewFeature;
use crate::selection::AnchorPartition;

const LN_EPS: f64 = 1e-5;

/// Affine pair, generic over storage (tensors on the host, vars on a tape).
#[derive(Debug, Clone)]
pub struct Affine<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone)]
pub struct NormPair<T> {
    pub gain: T,
    pub shift: T,
}

#[derive(Debug, Clone)]
pub struct AttnParams<T> {
    pub q: Affine<T>,
    pub k: Affine<T>,
    pub v: Affine<T>,
    pub o: Affine<T>,
}

#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    pub cross_norm: NormPair<T>,
    pub cross: AttnParams<T>,
    pub self_norm: NormPair<T>,
    pub self_attn: AttnParams<T>,
    pub mlp_norm: NormPair<T>,
    pub fc1: Affine<T>,
    pub fc2: Affine<T>,
}

/// Full parameter set: `blocks.len()` structurally identical blocks plus the
/// posterior head mapping C to 2C (mean then log-variance).
#[derive(Debug, Clone)]
pub struct CompressorParams<T> {
    pub channels: usize,
    pub heads: usize,
    pub blocks: Vec<BlockParams<T>>,
    pub posterior: Affine<T>,
}

impl<T> CompressorParams<T> {
    /// Fixed traversal order shared by flattening, binding, and naming.
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> CompressorParams<U> {
        let aff = |f: &mut dyn FnMut(&T) -> U, a: &Affine<T>| Affine {
            weight: f(&a.weight),
            bias: f(&a.bias),
        };
        let norm = |f: &mut dyn FnMut(&T) -> U, n: &NormPair<T>| NormPair {
            gain: f(&n.gain),
            shift: f(&n.shift),
        };
        let attn = |f: &mut dyn FnMut(&T) -> U, a: &AttnParams<T>| AttnParams {
            q: aff(f, &a.q),
            k: aff(f, &a.k),
            v: aff(f, &a.v),
            o: aff(f, &a.o),
        };
        CompressorParams {
            channels: self.channels,
            heads: self.heads,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    cross_norm: norm(f, &b.cross_norm),
                    cross: attn(f, &b.cross),
                    self_norm: norm(f, &b.self_norm),
                    self_attn: attn(f, &b.self_attn),
                    mlp_norm: norm(f, &b.mlp_norm),
                    fc1: aff(f, &b.fc1),
                    fc2: aff(f, &b.fc2),
                })
                .collect(),
            posterior: aff(f, &self.posterior),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&T)) {
        self.map(&mut |t| {
            f(t);
        });
    }
}

impl<F: Scalar> CompressorParams<Tensor<F>> {
    pub fn flatten(&self) -> Vec<Tensor<F>> {
        let mut out = Vec::new();
        self.for_each(&mut |t| out.push(t.clone()));
        out
    }

    /// Rebuild from a flat list in traversal order (shapes from `self`).
    pub fn with_values(&self, values: &[Tensor<F>]) -> Result<Self> {
        let mut i = 0;
        let rebuilt = self.map(&mut |t| {
            let v = values[i].clone();
            debug_assert_eq!(v.shape(), t.shape());
            i += 1;
            v
        });
        if i != values.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        Ok(rebuilt)
    }

    /// Register every tensor as a tape leaf. Returns the var-typed mirror and
    /// the vars in traversal order (aligned with `flatten`).
    pub fn bind(&self, tape: &mut Tape<F>) -> (CompressorParams<Var>, Vec<Var>) {
        let mut vars = Vec::new();
        let bound = self.map(&mut |t| {
            let v = tape.leaf(t.clone());
            vars.push(v);
            v
        });
        (bound, vars)
    }

    /// Canonical archive names in traversal order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.blocks.len() {
            for part in ["cross", "self", "mlp"] {
                names.push(format!("block{i}.{part}.norm.gain"));
                names.push(format!("block{i}.{part}.norm.shift"));
                match part {
                    "mlp" => {
                        for lin in ["fc1", "fc2"] {
                            names.push(format!("block{i}.mlp.{lin}.weight"));
                            names.push(format!("block{i}.mlp.{lin}.bias"));
                        }
                    }
                    _ => {
                        for lin in ["q", "k", "v", "o"] {
                            names.push(format!("block{i}.{part}.{lin}.weight"));
                            names.push(format!("block{i}.{part}.{lin}.bias"));
                        }
                    }
                }
            }
        }
        names.push("posterior.head.weight".into());
        names.push("posterior.head.bias".into());
        names
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let named: Vec<(String, Tensor<f32>)> = self
            .names()
            .into_iter()
            .zip(self.flatten())
            .map(|(n, t)| (n, t.to_f32()))
            .collect();
        save_archive(path, &named)
    }

    pub fn load(path: &std::path::Path, channels: usize, heads: usize, h: usize) -> Result<Self> {
        let template: CompressorParams<Tensor<F>> = init_params(channels, h, heads, 0)?;
        let stored: HashMap<String, Tensor<f32>> = load_archive(path)?.into_iter().collect();
        let names = template.names();
        let mut values = Vec::with_capacity(names.len());
        for n in &names {
            let t = stored
                .get(n)
                .ok_or_else(|| Error::invalid(format!("archive missing tensor {n}")))?;
            values.push(t.cast::<F>());
        }
        template.with_values(&values)
    }
}

fn uniform_tensor<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| F::from_f64_(rng.gen_range(-bound..bound))).collect(),
    )
    .expect("valid shape")
}

/// Fresh parameters. Input projections are fan-in scaled uniform; every
/// residual-branch output projection (attention `o`, MLP `fc2`) is zero so a
/// new stack is the identity map. The posterior head gets fan-in random
/// weights (a zero head would zero the latent and stall the downstream
/// gradients) with mean bias 0 and log-variance bias -6, so the latent is
/// informative but near-deterministic at the start.
pub fn init_params<F: Scalar>(
    channels: usize,
    h: usize,
    heads: usize,
    seed: u64,
) -> Result<CompressorParams<Tensor<F>>> {
    if h < 1 {
        return Err(Error::config("init_params: need at least one block"));
    }
    if channels == 0 || channels % heads != 0 {
        return Err(Error::config(format!(
            "init_params: channels {channels} not divisible by heads {heads}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = channels;
    let bound = 1.0 / (c as f64).sqrt();
    let attn = |rng: &mut ChaCha8Rng| AttnParams {
        q: Affine { weight: uniform_tensor(rng, &[c, c], bound), bias: Tensor::zeros(&[c]) },
        k: Affine { weight: uniform_tensor(rng, &[c, c], bound), bias: Tensor::zeros(&[c]) },
        v: Affine { weight: uniform_tensor(rng, &[c, c], bound), bias: Tensor::zeros(&[c]) },
        o: Affine { weight: Tensor::zeros(&[c, c]), bias: Tensor::zeros(&[c]) },
    };
    let norm = || NormPair { gain: Tensor::full(&[c], F::one()), shift: Tensor::zeros(&[c]) };
    let mut blocks = Vec::with_capacity(h);
    for _ in 0..h {
        blocks.push(BlockParams {
            cross_norm: norm(),
            cross: attn(&mut rng),
            self_norm: norm(),
            self_attn: attn(&mut rng),
            mlp_norm: norm(),
            fc1: Affine {
                weight: uniform_tensor(&mut rng, &[4 * c, c], bound),
                bias: Tensor::zeros(&[4 * c]),
            },
            fc2: Affine { weight: Tensor::zeros(&[c, 4 * c]), bias: Tensor::zeros(&[c]) },
        });
    }
    let mut post_bias = vec![F::zero(); 2 * c];
    for v in post_bias.iter_mut().skip(c) {
        *v = F::from_f64_(-6.0);
    }
    Ok(CompressorParams {
        channels: c,
        heads,
        blocks,
        posterior: Affine {
            weight: uniform_tensor(&mut rng, &[2 * c, c], bound),
            bias: Tensor::new(&[2 * c], post_bias)?,
        },
    })
}

/// Fusion control: `FuseAnchors` replaces the supports with copies of the
/// anchor's own tokens; `NoFusion` bypasses the blocks entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Default,
    FuseAnchors,
    NoFusion,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    #[serde(default)]
    pub single_block: bool,
    #[serde(default)]
    pub no_self_attention: bool,
}

/// Latent handles on a tape: fused anchor tokens [N*T, C], posterior stats,
/// and the sample that downstream consumers read.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub tokens: Var,
    pub mean: Var,
    pub logvar: Var,
    pub sample: Var,
    pub n_anchors: usize,
    pub tokens_per_anchor: usize,
    pub channels: usize,
}

/// Materialized latent (eval / reporting path).
#[derive(Debug, Clone)]
pub struct LatentState<F: Scalar> {
    pub tokens: Tensor<F>,
    pub mean: Tensor<F>,
    pub logvar: Tensor<F>,
    pub sample: Tensor<F>,
    pub n_anchors: usize,
    pub tokens_per_anchor: usize,
    pub channels: usize,
}

fn attend<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    kv: Var,
    norm: &NormPair<Var>,
    attn: &AttnParams<Var>,
    heads: usize,
) -> Result<Var> {
    let eps = F::from_f64_(LN_EPS);
    let h = tape.layer_norm(x, norm.gain, norm.shift, eps)?;
    let hk = tape.layer_norm(kv, norm.gain, norm.shift, eps)?;
    let q = tape.linear(h, attn.q.weight, attn.q.bias)?;
    let k = tape.linear(hk, attn.k.weight, attn.k.bias)?;
    let v = tape.linear(hk, attn.v.weight, attn.v.bias)?;
    let a = tape.attention(q, k, v, heads)?;
    let o = tape.linear(a, attn.o.weight, attn.o.bias)?;
    tape.add(x, o)
}

/// One fused cluster: anchor tokens attend to the concatenated raw support
/// tokens; supports are re-read from the originals at every block.
pub fn fuse_cluster<F: Scalar>(
    tape: &mut Tape<F>,
    anchor_tokens: Var,
    support_tokens: Option<Var>,
    params: &CompressorParams<Var>,
    ablation: Ablation,
) -> Result<Var> {
    let eps = F::from_f64_(LN_EPS);
    let n_blocks = if ablation.single_block { 1 } else { params.blocks.len() };
    let mut x = anchor_tokens;
    for block in &params.blocks[..n_blocks] {
        // Empty clusters fall back to the anchor's own tokens as K, V.
        let kv = support_tokens.unwrap_or(x);
        x = attend(tape, x, kv, &block.cross_norm, &block.cross, params.heads)?;
        if !ablation.no_self_attention {
            x = attend(tape, x, x, &block.self_norm, &block.self_attn, params.heads)?;
        }
        let h = tape.layer_norm(x, block.mlp_norm.gain, block.mlp_norm.shift, eps)?;
        let h = tape.linear(h, block.fc1.weight, block.fc1.bias)?;
        let h = tape.gelu(h);
        let h = tape.linear(h, block.fc2.weight, block.fc2.bias)?;
        x = tape.add(x, h)?;
    }
    Ok(x)
}

/// Full compression on a tape. `noise` (standard normal, one value per latent
/// element) enables reparameterized sampling; `None` sets sample = mean.
pub fn compress_tape<F: Scalar>(
    tape: &mut Tape<F>,
    features: &[ViewFeature<F>],
    partition: &AnchorPartition,
    params: &CompressorParams<Var>,
    mode: FusionMode,
    ablation: Ablation,
    noise: Option<&Tensor<F>>,
) -> Result<LatentVars> {
    if features.len() != partition.k {
        return Err(Error::invalid(format!(
            "compress: {} features vs partition over {} views",
            features.len(),
            partition.k
        )));
    }
    let (rows, cols, channels) = (features[0].rows, features[0].cols, features[0].channels);
    if channels != params.channels {
        return Err(Error::shape("compress: feature channels != params channels"));
    }
    for f in features {
        if (f.rows, f.cols, f.channels) != (rows, cols, channels) {
            return Err(Error::shape("compress: inconsistent feature grids"));
        }
    }
    let t_tokens = rows * cols;
    let mut fused = Vec::with_capacity(partition.anchors.len());
    for (ci, &ai) in partition.anchors.iter().enumerate() {
        let anchor = tape.leaf(features[ai].tokens.clone());
        let out = match mode {
            FusionMode::NoFusion => anchor,
            FusionMode::FuseAnchors => {
                fuse_cluster(tape, anchor, Some(anchor), params, ablation)?
            }
            FusionMode::Default => {
                let members: Vec<Var> = partition.clusters[ci]
                    .iter()
                    .filter(|&&v| v != ai)
                    .map(|&v| tape.leaf(features[v].tokens.clone()))
                    .collect();
                let kv = if members.is_empty() {
                    None
                } else {
                    Some(tape.concat_rows(&members)?)
                };
                fuse_cluster(tape, anchor, kv, params, ablation)?
            }
        };
        fused.push(out);
    }
    let tokens = tape.concat_rows(&fused)?;
    let stats = tape.linear(tokens, params.posterior.weight, params.posterior.bias)?;
    let mean = tape.narrow_cols(stats, 0, channels)?;
    let logvar = tape.narrow_cols(stats, channels, channels)?;
    let sample = match noise {
        Some(eps) => {
            let n_latent = partition.anchors.len() * t_tokens;
            if eps.shape() != [n_latent, channels] {
                return Err(Error::shape("compress: noise shape mismatch"));
            }
            let half = tape.scale(logvar, F::from_f64_(0.5));
            let std = tape.exp(half);
            let e = tape.constant(eps.clone());
            let scaled = tape.mul(std, e)?;
            tape.add(mean, scaled)?
        }
        None => mean,
    };
    Ok(LatentVars {
        tokens,
        mean,
        logvar,
        sample,
        n_anchors: partition.anchors.len(),
        tokens_per_anchor: t_tokens,
        channels,
    })
}

/// Standard normal tensor for reparameterized sampling.
pub fn sample_noise<F: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            F::from_f64_((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Convenience forward without gradient bookkeeping exposed.
pub fn compress<F: Scalar>(
    features: &[ViewFeature<F>],
    partition: &AnchorPartition,
    params: &CompressorParams<Tensor<F>>,
    mode: FusionMode,
    ablation: Ablation,
    train_seed: Option<u64>,
) -> Result<LatentState<F>> {
    let mut tape: Tape<F> = Tape::new();
    let (bound, _) = params.bind(&mut tape);
    let noise = train_seed.map(|s| {
        let t = features[0].rows * features[0].cols;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        sample_noise(&[partition.anchors.len() * t, params.channels], &mut rng)
    });
    let lat = compress_tape(&mut tape, features, partition, &bound, mode, ablation, noise.as_ref())?;
    Ok(LatentState {
        tokens: tape.value(lat.tokens).clone(),
        mean: tape.value(lat.mean).clone(),
        logvar: tape.value(lat.logvar).clone(),
        sample: tape.value(lat.sample).clone(),
        n_anchors: lat.n_anchors,
        tokens_per_anchor: lat.tokens_per_anchor,
        channels: lat.channels,
    })
}
