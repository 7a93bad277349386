use serde::Serialize;

use crate::error::{Error, Result};

/// Number of hierarchy stages. Stages 2..4 each begin with a patch merge, so
/// spatial token extents shrink 8x overall and channels grow 8x.
pub const NUM_STAGES: usize = 4;

/// Positional-information scheme: learnable per-stage embeddings added by
/// broadcasting, or a learnable per-offset bias added to attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEmbedMode {
    Absolute,
    Relative,
}

/// Output head placed after global average pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HeadKind {
    BinaryLogit,
    ScalarRegression,
    Embedding(usize),
}

impl HeadKind {
    pub fn out_dim(&self) -> usize {
        match self {
            HeadKind::BinaryLogit | HeadKind::ScalarRegression => 1,
            HeadKind::Embedding(d) => *d,
        }
    }
}

/// Attention window: `temporal` frames by `spatial`^3 token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowSize {
    pub temporal: usize,
    pub spatial: usize,
}

impl WindowSize {
    pub fn dims(&self) -> [usize; 4] {
        [self.temporal, self.spatial, self.spatial, self.spatial]
    }

    /// Half-window displacement used by the shifted variant.
    pub fn shift(&self) -> [usize; 4] {
        self.dims().map(|w| w / 2)
    }

    pub fn len(&self) -> usize {
        self.temporal * self.spatial.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Full architectural hyperparameter record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Input extent per sample: (frames, height, width, depth) voxels.
    pub input_dims: [usize; 4],
    /// Spatial edge of the cubic voxel patch embedded into one token.
    pub patch_size: usize,
    /// Stage-1 embedding width; stage `s` uses `channels << (s-1)`.
    pub channels: usize,
    /// Transformer block count per stage.
    pub depths: [usize; 4],
    pub window: WindowSize,
    pub heads_per_stage: [usize; 4],
    /// MLP hidden width as a multiple of the stage channel width.
    pub mlp_ratio: usize,
    pub pos_embed_mode: PosEmbedMode,
    pub head_kind: HeadKind,
    pub layer_norm_eps: f64,
}

/// Token-grid extent and channel width of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageShape {
    pub tokens: [usize; 4],
    pub channels: usize,
}

impl StageShape {
    pub fn num_tokens(&self) -> usize {
        self.tokens.iter().product()
    }
}

impl ModelConfig {
    /// Desk-scale configuration: small enough for finite-difference checks
    /// and minutes-scale CPU training.
    pub fn desk_default() -> Self {
        Self {
            input_dims: [8, 24, 24, 24],
            patch_size: 3,
            channels: 8,
            depths: [2, 2, 2, 2],
            window: WindowSize {
                temporal: 2,
                spatial: 2,
            },
            heads_per_stage: [2, 2, 4, 4],
            mlp_ratio: 4,
            pos_embed_mode: PosEmbedMode::Absolute,
            head_kind: HeadKind::BinaryLogit,
            layer_norm_eps: 1e-5,
        }
    }

    /// Full-scale configuration: 20x96x96x96 input, patch 6, C=36,
    /// depths {2,2,6,2}, 4x4x4x4 windows, heads scaling so each head is 12 wide.
    pub fn full_scale() -> Self {
        Self {
            input_dims: [20, 96, 96, 96],
            patch_size: 6,
            channels: 36,
            depths: [2, 2, 6, 2],
            window: WindowSize {
                temporal: 4,
                spatial: 4,
            },
            heads_per_stage: [3, 6, 12, 24],
            mlp_ratio: 4,
            pos_embed_mode: PosEmbedMode::Absolute,
            head_kind: HeadKind::BinaryLogit,
            layer_norm_eps: 1e-5,
        }
    }

    /// Smallest geometrically valid configuration; every parameter coordinate
    /// can be finite-difference checked in seconds.
    pub fn tiny() -> Self {
        Self {
            input_dims: [2, 16, 16, 16],
            patch_size: 2,
            channels: 2,
            depths: [2, 2, 2, 2],
            window: WindowSize {
                temporal: 2,
                spatial: 2,
            },
            heads_per_stage: [1, 1, 1, 1],
            mlp_ratio: 2,
            pos_embed_mode: PosEmbedMode::Absolute,
            head_kind: HeadKind::BinaryLogit,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [t, h, w, d] = self.input_dims;
        if t == 0 || h == 0 || w == 0 || d == 0 {
            return Err(Error::Config("input_dims must be positive".into()));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        for (name, dim) in [("height", h), ("width", w), ("depth", d)] {
            if dim % self.patch_size != 0 {
                return Err(Error::Config(format!(
                    "{name} {dim} not divisible by patch_size {}",
                    self.patch_size
                )));
            }
        }
        let merge_factor = 1usize << (NUM_STAGES - 1);
        for (name, dim) in [("height", h), ("width", w), ("depth", d)] {
            let tokens = dim / self.patch_size;
            if tokens % merge_factor != 0 {
                return Err(Error::Config(format!(
                    "{name} token extent {tokens} not divisible by {merge_factor} \
                     (one halving per merge across {NUM_STAGES} stages)"
                )));
            }
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.window.temporal == 0 || self.window.spatial == 0 {
            return Err(Error::Config("window extents must be positive".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        for s in 0..NUM_STAGES {
            let ch = self.stage_channels(s);
            let heads = self.heads_per_stage[s];
            if heads == 0 || ch % heads != 0 {
                return Err(Error::Config(format!(
                    "stage {} channels {ch} not divisible by {heads} heads",
                    s + 1
                )));
            }
            if self.depths[s] == 0 {
                return Err(Error::Config(format!("stage {} has zero depth", s + 1)));
            }
        }
        Ok(())
    }

    /// Channel width at 0-indexed stage `s`: `C * 2^s`.
    pub fn stage_channels(&self, s: usize) -> usize {
        self.channels << s
    }

    /// Token grid and channel width per stage. Spatial extents halve at each
    /// merge (stages 2..4); the temporal extent never merges.
    pub fn stage_shapes(&self) -> [StageShape; NUM_STAGES] {
        let [t, h, w, d] = self.input_dims;
        let p = self.patch_size;
        std::array::from_fn(|s| StageShape {
            tokens: [t, (h / p) >> s, (w / p) >> s, (d / p) >> s],
            channels: self.stage_channels(s),
        })
    }

    /// Token layout of the patch-embedding output (stage 1 input).
    pub fn token_dims(&self) -> [usize; 4] {
        self.stage_shapes()[0].tokens
    }
}
