//! Parameter containers, generic over the leaf payload.
//!
//! The same structs hold stored tensors (`Weights<Tensor<T>>`) and
//! tape-watched variables (`Weights<Var<T>>`); [`Weights::map_named`] walks
//! every leaf in one canonical order, which fixes the checkpoint manifest,
//! optimizer state layout, and gradient flattening.

pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

pub struct Attention<P> {
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub proj: Linear<P>,
    /// Relative positional bias table `[heads, offsets]`; absent in
    /// absolute-embedding mode.
    pub bias_table: Option<P>,
}

pub struct Block<P> {
    pub norm1: Norm<P>,
    pub attn: Attention<P>,
    pub norm2: Norm<P>,
    pub mlp_in: Linear<P>,
    pub mlp_out: Linear<P>,
}

pub struct Stage<P> {
    /// Patch-merging projection; absent for stage 1.
    pub merge: Option<Linear<P>>,
    pub pos_spatial: Option<P>,
    pub pos_temporal: Option<P>,
    pub blocks: Vec<Block<P>>,
}

pub struct Head<P> {
    pub hidden: Linear<P>,
    pub out: Linear<P>,
}

pub struct Weights<P> {
    pub patch_embed: Linear<P>,
    pub stages: Vec<Stage<P>>,
    pub head: Head<P>,
}

impl<P> Linear<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

impl<P> Norm<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Norm<Q> {
        Norm {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: f(&format!("{prefix}.beta"), &self.beta),
        }
    }
}

impl<P> Attention<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Attention<Q> {
        Attention {
            query: self.query.map(&format!("{prefix}.query"), f),
            key: self.key.map(&format!("{prefix}.key"), f),
            value: self.value.map(&format!("{prefix}.value"), f),
            proj: self.proj.map(&format!("{prefix}.proj"), f),
            bias_table: self
                .bias_table
                .as_ref()
                .map(|t| f(&format!("{prefix}.bias_table"), t)),
        }
    }
}

impl<P> Block<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Block<Q> {
        Block {
            norm1: self.norm1.map(&format!("{prefix}.norm1"), f),
            attn: self.attn.map(&format!("{prefix}.attn"), f),
            norm2: self.norm2.map(&format!("{prefix}.norm2"), f),
            mlp_in: self.mlp_in.map(&format!("{prefix}.mlp_in"), f),
            mlp_out: self.mlp_out.map(&format!("{prefix}.mlp_out"), f),
        }
    }
}

impl<P> Stage<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Stage<Q> {
        Stage {
            merge: self.merge.as_ref().map(|m| m.map(&format!("{prefix}.merge"), f)),
            pos_spatial: self
                .pos_spatial
                .as_ref()
                .map(|t| f(&format!("{prefix}.pos_spatial"), t)),
            pos_temporal: self
                .pos_temporal
                .as_ref()
                .map(|t| f(&format!("{prefix}.pos_temporal"), t)),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("{prefix}.blocks.{i}"), f))
                .collect(),
        }
    }
}

impl<P> Head<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Head<Q> {
        Head {
            hidden: self.hidden.map(&format!("{prefix}.hidden"), f),
            out: self.out.map(&format!("{prefix}.out"), f),
        }
    }
}

impl<P> Weights<P> {
    /// Visit every parameter leaf in canonical order, building a parallel
    /// structure from the closure's results.
    pub fn map_named<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> Weights<Q> {
        Weights {
            patch_embed: self.patch_embed.map("patch_embed", &mut f),
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(s, st)| st.map(&format!("stages.{s}"), &mut f))
                .collect(),
            head: self.head.map("head", &mut f),
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &P)) {
        self.map_named(|name, p| f(name, p));
    }

    /// Leaves in canonical order. Both payload types share cheap clones.
    pub fn flat(&self) -> Vec<P>
    where
        P: Clone,
    {
        let mut out = Vec::new();
        self.for_each(|_, p| out.push(p.clone()));
        out
    }

    pub fn named(&self) -> Vec<(String, P)>
    where
        P: Clone,
    {
        let mut out = Vec::new();
        self.for_each(|name, p| out.push((name.to_string(), p.clone())));
        out
    }

    pub fn num_leaves(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _| n += 1);
        n
    }
}
