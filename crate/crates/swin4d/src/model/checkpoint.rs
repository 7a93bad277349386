//! Model checkpoints on top of the common container format.
//!
//! The header carries the full [`ModelConfig`] as meta keys plus the ordered
//! parameter manifest; payload entries are the parameters in canonical
//! traversal order. Optimizer state rides along under the reserved
//! `optim.` name prefix and is ignored when only weights are wanted.
//! For single-precision models `load(save(w)) == w` holds bitwise.

use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::config::{HeadKind, ModelConfig, PosEmbedMode, WindowSize};
use crate::model::net::Model;
use crate::tensor::{Elem, Tensor};

pub const KIND: &str = "checkpoint";

fn join(vals: &[usize], sep: char) -> String {
    vals.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(&sep.to_string())
}

fn parse_list(s: &str, sep: char, expect: usize, key: &str) -> Result<Vec<usize>> {
    let vals: Vec<usize> = s
        .split(sep)
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` in `{key}`")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != expect {
        return Err(Error::Config(format!(
            "`{key}` expects {expect} values, got {}",
            vals.len()
        )));
    }
    Ok(vals)
}

pub fn head_kind_to_str(h: HeadKind) -> String {
    match h {
        HeadKind::BinaryLogit => "binary_logit".into(),
        HeadKind::ScalarRegression => "scalar_regression".into(),
        HeadKind::Embedding(d) => format!("embedding:{d}"),
    }
}

pub fn head_kind_from_str(s: &str) -> Result<HeadKind> {
    match s {
        "binary_logit" => Ok(HeadKind::BinaryLogit),
        "scalar_regression" => Ok(HeadKind::ScalarRegression),
        other => {
            if let Some(d) = other.strip_prefix("embedding:") {
                Ok(HeadKind::Embedding(d.parse().map_err(|_| {
                    Error::Config(format!("bad embedding dim in `{other}`"))
                })?))
            } else {
                Err(Error::Config(format!("unknown head kind `{other}`")))
            }
        }
    }
}

pub fn config_to_meta(cfg: &ModelConfig, c: &mut Container) {
    c.set_meta("input_dims", join(&cfg.input_dims, 'x'));
    c.set_meta("patch_size", cfg.patch_size);
    c.set_meta("channels", cfg.channels);
    c.set_meta("depths", join(&cfg.depths, ','));
    c.set_meta(
        "window",
        format!("{}x{}", cfg.window.temporal, cfg.window.spatial),
    );
    c.set_meta("heads", join(&cfg.heads_per_stage, ','));
    c.set_meta("mlp_ratio", cfg.mlp_ratio);
    c.set_meta(
        "pos_embed",
        match cfg.pos_embed_mode {
            PosEmbedMode::Absolute => "absolute",
            PosEmbedMode::Relative => "relative",
        },
    );
    c.set_meta("head", head_kind_to_str(cfg.head_kind));
    c.set_meta("layer_norm_eps", cfg.layer_norm_eps);
}

pub fn config_from_meta(c: &Container) -> Result<ModelConfig> {
    let dims = parse_list(c.require_meta("input_dims")?, 'x', 4, "input_dims")?;
    let depths = parse_list(c.require_meta("depths")?, ',', 4, "depths")?;
    let window = parse_list(c.require_meta("window")?, 'x', 2, "window")?;
    let heads = parse_list(c.require_meta("heads")?, ',', 4, "heads")?;
    let parse = |key: &str| -> Result<usize> {
        c.require_meta(key)?
            .parse()
            .map_err(|_| Error::Config(format!("bad `{key}`")))
    };
    let cfg = ModelConfig {
        input_dims: [dims[0], dims[1], dims[2], dims[3]],
        patch_size: parse("patch_size")?,
        channels: parse("channels")?,
        depths: [depths[0], depths[1], depths[2], depths[3]],
        window: WindowSize {
            temporal: window[0],
            spatial: window[1],
        },
        heads_per_stage: [heads[0], heads[1], heads[2], heads[3]],
        mlp_ratio: parse("mlp_ratio")?,
        pos_embed_mode: match c.require_meta("pos_embed")? {
            "absolute" => PosEmbedMode::Absolute,
            "relative" => PosEmbedMode::Relative,
            other => return Err(Error::Config(format!("unknown pos_embed `{other}`"))),
        },
        head_kind: head_kind_from_str(c.require_meta("head")?)?,
        layer_norm_eps: c
            .require_meta("layer_norm_eps")?
            .parse()
            .map_err(|_| Error::Config("bad `layer_norm_eps`".into()))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Extra payload stored alongside the weights (optimizer moments, step count).
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    pub step: u64,
    /// `(first_moment, second_moment)` per parameter, canonical order.
    pub moments: Vec<(Vec<f32>, Vec<f32>)>,
}

pub fn save_model<T: Elem>(
    path: &Path,
    model: &Model<T>,
    optim: Option<&OptimState>,
) -> Result<()> {
    let mut c = Container::new(KIND);
    config_to_meta(&model.cfg, &mut c);
    if let Some(o) = optim {
        c.set_meta("optim.step", o.step);
    }
    model.weights.for_each(|name, t| {
        let data: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
        c.push_entry(name, t.shape(), data);
    });
    if let Some(o) = optim {
        let names: Vec<(String, Vec<usize>)> = {
            let mut v = Vec::new();
            model
                .weights
                .for_each(|name, t| v.push((name.to_string(), t.shape().to_vec())));
            v
        };
        if names.len() != o.moments.len() {
            return Err(Error::Config(format!(
                "optimizer state has {} slots for {} parameters",
                o.moments.len(),
                names.len()
            )));
        }
        for ((name, shape), (m, v)) in names.iter().zip(&o.moments) {
            c.push_entry(&format!("optim.m.{name}"), shape, m.clone());
            c.push_entry(&format!("optim.v.{name}"), shape, v.clone());
        }
    }
    c.write_to(path)
}

pub fn load_model<T: Elem>(path: &Path) -> Result<Model<T>> {
    let c = Container::read_from(path)?;
    if c.kind != KIND {
        return Err(Error::CheckpointFormat(format!(
            "expected kind `{KIND}`, found `{}`",
            c.kind
        )));
    }
    let cfg = config_from_meta(&c)?;
    model_from_container(cfg, &c)
}

pub(crate) fn model_from_container<T: Elem>(cfg: ModelConfig, c: &Container) -> Result<Model<T>> {
    let skeleton = Model::<T>::init(cfg.clone(), 0)?;
    let mut missing: Vec<String> = Vec::new();
    let weights = skeleton.weights.map_named(|name, t| {
        match c.entry(name) {
            Some(e) if e.shape == t.shape() => Tensor::from_parts(
                e.shape.clone(),
                e.data.iter().map(|&v| T::of_f64(v as f64)).collect(),
            ),
            Some(e) => {
                missing.push(format!("`{name}` shape {:?} != {:?}", e.shape, t.shape()));
                t.clone()
            }
            None => {
                missing.push(format!("`{name}` absent"));
                t.clone()
            }
        }
    });
    if !missing.is_empty() {
        return Err(Error::CheckpointFormat(format!(
            "parameter mismatches: {}",
            missing.join("; ")
        )));
    }
    Ok(Model { cfg, weights })
}

pub fn load_optim_state(path: &Path, model_manifest_len: usize) -> Result<Option<OptimState>> {
    let c = Container::read_from(path)?;
    let Some(step) = c.get_meta("optim.step") else {
        return Ok(None);
    };
    let step: u64 = step
        .parse()
        .map_err(|_| Error::CheckpointFormat("bad optim.step".into()))?;
    let mut moments = Vec::with_capacity(model_manifest_len);
    let names: Vec<String> = c
        .entries
        .iter()
        .filter(|e| !e.name.starts_with("optim."))
        .map(|e| e.name.clone())
        .collect();
    for name in names {
        let m = c.require_entry(&format!("optim.m.{name}"))?.data.clone();
        let v = c.require_entry(&format!("optim.v.{name}"))?.data.clone();
        moments.push((m, v));
    }
    Ok(Some(OptimState { step, moments }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    #[test]
    fn save_load_round_trip_bitwise_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::init(ModelConfig::tiny(), 11).unwrap();
        save_model(&path, &model, None).unwrap();
        let back = load_model::<f32>(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        let a = model.weights.flat();
        let b = back.weights.flat();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data()); // bitwise: f32 -> f32 via identity
        }
    }

    #[test]
    fn optimizer_state_rides_along() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::init(ModelConfig::tiny(), 1).unwrap();
        let n = model.weights.num_leaves();
        let optim = OptimState {
            step: 42,
            moments: model
                .weights
                .flat()
                .iter()
                .map(|t| (vec![0.25f32; t.len()], vec![0.5f32; t.len()]))
                .collect(),
        };
        save_model(&path, &model, Some(&optim)).unwrap();
        let loaded = load_optim_state(&path, n).unwrap().unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.moments.len(), n);
        assert_eq!(loaded.moments[0].0[0], 0.25);
        // weights still load cleanly, ignoring optim entries
        load_model::<f32>(&path).unwrap();
    }

    #[test]
    fn config_meta_round_trip() {
        let cfg = ModelConfig::full_scale();
        let mut c = Container::new(KIND);
        config_to_meta(&cfg, &mut c);
        let back = config_from_meta(&c).unwrap();
        assert_eq!(back, cfg);
    }
}
