//! The assembled model: weight initialization, binding onto a tape, and the
//! four-stage forward pass.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::attention::bias_table_len;
use crate::model::blocks::{
    add_positional_embedding, global_block, patch_embed, patch_merge, pooled_head, swin_block,
};
use crate::model::config::{ModelConfig, PosEmbedMode, NUM_STAGES};
use crate::model::weights::{Attention, Block, Head, Linear, Norm, Stage, Weights};
use crate::model::window::{build_shift_mask, WindowGrid};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Truncated normal: resample anything beyond two standard deviations.
fn trunc_normal<T: Elem>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            data.push(T::of_f64(v));
        }
    }
    Tensor::from_parts(shape.to_vec(), data)
}

/// Model weights plus the configuration they were built for.
pub struct Model<T: Elem> {
    pub cfg: ModelConfig,
    pub weights: Weights<Tensor<T>>,
}

impl<T: Elem> Model<T> {
    /// Initialize with truncated-normal (std 0.02) linear weights; biases,
    /// positional embeddings, and bias tables start at zero.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let mut linear = |din: usize, dout: usize| Linear {
            weight: trunc_normal::<T>(&mut rng, &[din, dout], std),
            bias: Tensor::zeros(&[dout]),
        };
        let norm = |ch: usize| Norm {
            gamma: Tensor::full(&[ch], T::one()),
            beta: Tensor::zeros(&[ch]),
        };

        let shapes = cfg.stage_shapes();
        let p3 = cfg.patch_size.pow(3);
        let patch_proj = linear(p3, cfg.channels);

        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let ch = shapes[s].channels;
            let heads = cfg.heads_per_stage[s];
            let bias_window = stage_bias_window(&cfg, s);
            let merge = (s > 0).then(|| linear(8 * shapes[s - 1].channels, ch));
            let (pos_spatial, pos_temporal) = match cfg.pos_embed_mode {
                PosEmbedMode::Absolute => {
                    let [t, h, w, d] = shapes[s].tokens;
                    (
                        Some(Tensor::zeros(&[1, h, w, d, ch])),
                        Some(Tensor::zeros(&[t, 1, 1, 1, ch])),
                    )
                }
                PosEmbedMode::Relative => (None, None),
            };
            let mut blocks = Vec::with_capacity(cfg.depths[s]);
            for _ in 0..cfg.depths[s] {
                let bias_table = matches!(cfg.pos_embed_mode, PosEmbedMode::Relative)
                    .then(|| Tensor::zeros(&[heads, bias_table_len(bias_window)]));
                blocks.push(Block {
                    norm1: norm(ch),
                    attn: Attention {
                        query: linear(ch, ch),
                        key: linear(ch, ch),
                        value: linear(ch, ch),
                        proj: linear(ch, ch),
                        bias_table,
                    },
                    norm2: norm(ch),
                    mlp_in: linear(ch, cfg.mlp_ratio * ch),
                    mlp_out: linear(cfg.mlp_ratio * ch, ch),
                });
            }
            stages.push(Stage {
                merge,
                pos_spatial,
                pos_temporal,
                blocks,
            });
        }

        let c_final = shapes[NUM_STAGES - 1].channels;
        let head = Head {
            hidden: linear(c_final, c_final),
            out: linear(c_final, cfg.head_kind.out_dim()),
        };

        Ok(Self {
            cfg,
            weights: Weights {
                patch_embed: patch_proj,
                stages,
                head,
            },
        })
    }

    /// Watch every parameter on `tape`, producing a differentiable binding.
    pub fn bind<'a>(&self, tape: &'a Tape<T>) -> BoundModel<'a, T> {
        BoundModel {
            cfg: self.cfg.clone(),
            tape,
            vars: self.weights.map_named(|_, t| tape.watch(t.clone())),
        }
    }

    /// Ordered `(name, shape, element count)` listing of every parameter.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        self.weights
            .for_each(|name, t| out.push((name.to_string(), t.shape().to_vec(), t.len())));
        out
    }

    pub fn num_params(&self) -> u64 {
        let mut n = 0u64;
        self.weights.for_each(|_, t| n += t.len() as u64);
        n
    }

    /// Convenience inference pass (non-recording tape).
    pub fn forward_value(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let bound = self.bind(&tape);
        let xv = tape.watch(x.clone());
        Ok(bound.forward(&xv)?.value().clone())
    }

    /// Replace every parameter with the aligned entry of `new`, in canonical
    /// traversal order.
    pub fn set_flat(&mut self, new: &[Tensor<T>]) -> Result<()> {
        if new.len() != self.weights.num_leaves() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                self.weights.num_leaves(),
                new.len()
            )));
        }
        let mut i = 0;
        self.weights = self.weights.map_named(|name, old| {
            let t = new[i].clone();
            debug_assert_eq!(t.shape(), old.shape(), "parameter {name}");
            i += 1;
            t
        });
        Ok(())
    }
}

/// Relative-bias window for a stage: the attention window for the windowed
/// stages, the full token extent for the global final stage.
pub fn stage_bias_window(cfg: &ModelConfig, s: usize) -> [usize; 4] {
    if s + 1 < NUM_STAGES {
        cfg.window.dims()
    } else {
        cfg.stage_shapes()[s].tokens
    }
}

/// Model parameters watched on a tape; forward passes through this binding
/// are differentiable with respect to every parameter.
pub struct BoundModel<'a, T: Elem> {
    pub cfg: ModelConfig,
    tape: &'a Tape<T>,
    pub vars: Weights<Var<T>>,
}

impl<'a, T: Elem> BoundModel<'a, T> {
    /// Stage-4 output feature map `[T, H4, W4, D4, 8C]`.
    pub fn features(&self, x: &Var<T>) -> Result<Var<T>> {
        let tape = self.tape;
        let cfg = &self.cfg;
        let expect: Vec<usize> = cfg.input_dims.iter().copied().chain([1]).collect();
        if x.shape() != expect.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: expect,
            });
        }
        let shapes = cfg.stage_shapes();
        let mut z = patch_embed(tape, x, &self.vars.patch_embed, cfg.patch_size)?;
        for (s, stage) in self.vars.stages.iter().enumerate() {
            if let Some(merge) = &stage.merge {
                z = patch_merge(tape, &z, merge)?;
            }
            if let (Some(sp), Some(tp)) = (&stage.pos_spatial, &stage.pos_temporal) {
                z = add_positional_embedding(tape, &z, sp, tp)?;
            }
            let heads = cfg.heads_per_stage[s];
            if s + 1 < NUM_STAGES {
                let tokens = shapes[s].tokens;
                let grid_w = WindowGrid::new(tokens, cfg.window.dims(), false);
                let grid_sw = WindowGrid::new(tokens, cfg.window.dims(), true);
                let mask_w = grid_w
                    .needs_mask()
                    .then(|| build_shift_mask::<T>(&grid_w).per_window);
                let mask_sw = grid_sw
                    .needs_mask()
                    .then(|| build_shift_mask::<T>(&grid_sw).per_window);
                for (i, block) in stage.blocks.iter().enumerate() {
                    let (grid, mask) = if i % 2 == 0 {
                        (&grid_w, mask_w.as_ref())
                    } else {
                        (&grid_sw, mask_sw.as_ref())
                    };
                    z = swin_block(tape, &z, block, grid, mask, heads, cfg.layer_norm_eps)?;
                }
            } else {
                for block in &stage.blocks {
                    z = global_block(tape, &z, block, heads, cfg.layer_norm_eps)?;
                }
            }
        }
        Ok(z)
    }

    /// Full forward pass: features, global average pooling, MLP head.
    /// Output shape `[out_dim]`.
    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let features = self.features(x)?;
        pooled_head(self.tape, &features, &self.vars.head)
    }
}
