//! Model and fine-tune checkpoints on top of [`Archive`].
//!
//! A full checkpoint stores every parameter. A delta checkpoint stores only
//! the parameters a fine-tune changed, the subject binding, and the hash of
//! the base model it must be layered over.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::prompt::{PromptBinding, Vocabulary};
use crate::schedule::NoiseSchedule;
use crate::toy_ldm::{ModelConfig, ParamStore, ToyLdm};

const MODEL_KIND: &str = "toy-ldm";
const DELTA_KIND: &str = "toy-ldm-delta";
const USER_EMBEDDING: &str = "binding.user_embedding";

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
    hash: String,
}

#[derive(Serialize, Deserialize)]
struct DeltaMeta {
    kind: String,
    base_hash: String,
    binding: PromptBinding,
}

fn meta<T: for<'de> Deserialize<'de>>(archive: &Archive, kind: &str) -> Result<T> {
    let found = archive
        .metadata
        .get("kind")
        .and_then(|k| k.as_str())
        .unwrap_or("");
    if found != kind {
        return Err(Error::Checkpoint(format!(
            "expected a `{kind}` checkpoint, found `{found}`"
        )));
    }
    serde_json::from_value(archive.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))
}

pub fn model_to_archive(model: &ToyLdm) -> Archive {
    let meta = ModelMeta {
        kind: MODEL_KIND.into(),
        config: model.config.clone(),
        schedule: model.schedule.clone(),
        vocab: model.vocab.clone(),
        hash: model.params.hash(),
    };
    Archive {
        metadata: serde_json::to_value(meta).expect("metadata serializes"),
        arrays: model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    }
}

/// Rebuilds a model, checking every parameter's presence and shape against a
/// freshly initialized one.
pub fn model_from_archive(archive: &Archive) -> Result<ToyLdm> {
    let meta: ModelMeta = meta(archive, MODEL_KIND)?;
    NoiseSchedule::from_alphas_cumprod(meta.schedule.alphas_cumprod().to_vec())
        .map_err(|e| Error::Checkpoint(format!("bad schedule: {e}")))?;
    let template = ToyLdm::new(meta.config.clone(), 0)?;
    let mut params = ParamStore::new();
    for (name, expected) in template.params.iter() {
        let value = archive
            .arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let shape = if name == crate::toy_ldm::names::TEXT_TABLE {
            (meta.vocab.len(), expected.ncols())
        } else {
            expected.dim()
        };
        if value.dim() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                value.dim()
            )));
        }
        params.insert(name.clone(), value.clone());
    }
    if let Some(extra) = archive
        .arrays
        .keys()
        .find(|k| template.params.get(k).is_err())
    {
        return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    if params.hash() != meta.hash {
        return Err(Error::Checkpoint("parameter hash mismatch".into()));
    }
    Ok(ToyLdm::from_parts(
        meta.config,
        meta.vocab,
        meta.schedule,
        params,
    ))
}

pub fn save_model(model: &ToyLdm, path: &Path) -> Result<()> {
    model_to_archive(model).write(path)
}

pub fn load_model(path: &Path) -> Result<ToyLdm> {
    model_from_archive(&Archive::read(path)?)
}

/// Parameters of `tuned` that differ from `base`, plus the binding.
pub fn delta_to_archive(base: &ToyLdm, tuned: &ToyLdm, binding: &PromptBinding) -> Result<Archive> {
    let mut arrays = std::collections::BTreeMap::new();
    for (name, value) in tuned.params.iter() {
        if base.params.get(name)? != value {
            arrays.insert(name.clone(), value.clone());
        }
    }
    arrays.insert(USER_EMBEDDING.to_string(), binding.user_embedding.clone());
    let meta = DeltaMeta {
        kind: DELTA_KIND.into(),
        base_hash: base.params.hash(),
        binding: PromptBinding {
            user_embedding: Array2::zeros((0, 0)),
            ..binding.clone()
        },
    };
    Ok(Archive {
        metadata: serde_json::to_value(meta).expect("metadata serializes"),
        arrays,
    })
}

/// Layers a delta over `base`, refusing a base with a different hash.
pub fn apply_delta(base: &ToyLdm, archive: &Archive) -> Result<(ToyLdm, PromptBinding)> {
    let meta: DeltaMeta = meta(archive, DELTA_KIND)?;
    if base.params.hash() != meta.base_hash {
        return Err(Error::Checkpoint(
            "fine-tune was made against a different base model".into(),
        ));
    }
    let mut model = base.clone();
    let mut binding = meta.binding;
    for (name, value) in &archive.arrays {
        if name == USER_EMBEDDING {
            if value.dim() != (1, model.config.text_dim) {
                return Err(Error::Checkpoint(
                    "subject embedding has the wrong shape".into(),
                ));
            }
            binding.user_embedding = value.clone();
            continue;
        }
        let slot = model
            .params
            .get_mut(name)
            .map_err(|_| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
        if slot.dim() != value.dim() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has the wrong shape"
            )));
        }
        *slot = value.clone();
    }
    if binding.user_embedding.dim() != (1, model.config.text_dim) {
        return Err(Error::Checkpoint(
            "delta lacks the subject embedding".into(),
        ));
    }
    binding.validate()?;
    Ok((model, binding))
}

pub fn save_delta(
    base: &ToyLdm,
    tuned: &ToyLdm,
    binding: &PromptBinding,
    path: &Path,
) -> Result<()> {
    delta_to_archive(base, tuned, binding)?.write(path)
}

pub fn load_delta(base: &ToyLdm, path: &Path) -> Result<(ToyLdm, PromptBinding)> {
    apply_delta(base, &Archive::read(path)?)
}
