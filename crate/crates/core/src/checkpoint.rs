//! safetensors checkpoints: float32 parameters by dotted name plus a JSON
//! metadata record under the `mfds` key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::SupervisionConfig;
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, Moments};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const META_KEY: &str = "mfds";
const FORMAT: u32 = 1;
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub model: ModelConfig,
    pub supervision: Option<SupervisionConfig>,
    pub folded: bool,
    /// Last completed epoch, counted from 1; 0 for an untrained model.
    pub epoch: usize,
    pub best_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub adam_step: u64,
}

impl CheckpointMeta {
    pub fn fresh(model: ModelConfig) -> Self {
        CheckpointMeta {
            format: FORMAT,
            model,
            supervision: None,
            folded: false,
            epoch: 0,
            best_f1: None,
            best_epoch: None,
            adam_step: 0,
        }
    }
}

pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub model: Model<T>,
    pub adam: Option<Adam<T>>,
}

fn to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    t.data().iter().flat_map(|v| (v.f64() as f32).to_le_bytes()).collect()
}

fn shape_vec(t: &Tensor<impl Scalar>) -> Vec<usize> {
    t.shape().to_vec()
}

/// Serializes `model` (and optionally the optimizer state) to bytes.
pub fn to_vec<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta, adam: Option<&Adam<T>>) -> Result<Vec<u8>> {
    let mut meta = meta.clone();
    meta.folded = model.is_folded();
    meta.model = model.config().clone();
    let mut named: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    for (_, e) in model.store.iter() {
        named.insert(e.name.clone(), (shape_vec(&e.value), to_bytes(&e.value)));
    }
    if let Some(adam) = adam {
        meta.adam_step = adam.step;
        for (name, mom) in &adam.moments {
            named.insert(format!("{M_PREFIX}{name}"), (shape_vec(&mom.m), to_bytes(&mom.m)));
            named.insert(format!("{V_PREFIX}{name}"), (shape_vec(&mom.v), to_bytes(&mom.v)));
        }
    }
    let views = named
        .iter()
        .map(|(k, (shape, bytes))| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let json = serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let info = HashMap::from([(META_KEY.to_string(), json)]);
    safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, meta: &CheckpointMeta, adam: Option<&Adam<T>>) -> Result<()> {
    let bytes = to_vec(model, meta, adam)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_tensor<T: Scalar>(view: &TensorView<'_>, name: &str) -> Result<Tensor<T>> {
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!("{name}: expected F32, found {:?}", view.dtype())));
    }
    let s = view.shape();
    if s.len() != 4 {
        return Err(Error::Checkpoint(format!("{name}: expected rank 4, found shape {s:?}")));
    }
    let data = view
        .data()
        .chunks_exact(4)
        .map(|c| T::c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::from_vec([s[0], s[1], s[2], s[3]], data)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let err = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(err)?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("missing `{META_KEY}` metadata")))?;
    let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if meta.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", meta.format)));
    }
    let st = SafeTensors::deserialize(bytes).map_err(err)?;

    let mut model = Model::<T>::new(meta.model.clone())?;
    if meta.folded {
        model.fold();
    }
    let ids: Vec<_> = model.store.iter().map(|(id, e)| (id, e.name.clone())).collect();
    for (id, name) in &ids {
        let view = st
            .tensor(name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
        let t = read_tensor::<T>(&view, name)?;
        if t.shape() != model.store.get(*id).shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?}, expected {:?}",
                t.shape(),
                model.store.get(*id).shape()
            )));
        }
        model.store.set(*id, t);
    }

    let mut moments = BTreeMap::new();
    for (name, view) in st.iter() {
        if let Some(param) = name.strip_prefix(M_PREFIX) {
            let v = st
                .tensor(&format!("{V_PREFIX}{param}"))
                .map_err(|_| Error::Checkpoint(format!("missing second moment of {param}")))?;
            moments.insert(
                param.to_string(),
                Moments { m: read_tensor(&view, name)?, v: read_tensor(&v, name)? },
            );
        } else if !name.starts_with(V_PREFIX) && model.store.find(name).is_none() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
    }
    let adam = (meta.adam_step > 0).then(|| {
        let lr = meta.supervision.as_ref().map_or(SupervisionConfig::default().learning_rate, |s| s.learning_rate);
        Adam { lr, step: meta.adam_step, moments }
    });
    Ok(Checkpoint { meta, model, adam })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probe() -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (
            Tensor::rand_uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng),
            Tensor::rand_uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng),
        )
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig { init_seed: 5, ..Default::default() };
        let model = Model::<f32>::new(cfg.clone()).unwrap();
        let bytes = to_vec(&model, &CheckpointMeta::fresh(cfg), None).unwrap();
        let back = from_bytes::<f32>(&bytes).unwrap();
        assert!(back.adam.is_none());
        for ((_, a), (_, b)) in model.store.iter().zip(back.model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(*a.value, *b.value);
        }
        let (a, b) = probe();
        assert_eq!(model.infer(&a, &b).unwrap().final_logits, back.model.infer(&a, &b).unwrap().final_logits);
        assert_eq!(bytes, to_vec(&back.model, &back.meta, None).unwrap());
    }

    #[test]
    fn folded_round_trip_and_optimizer_state() {
        let cfg = ModelConfig::default();
        let model = Model::<f32>::new(cfg.clone()).unwrap().folded();
        let mut adam = Adam::new(1e-3);
        adam.step = 3;
        adam.moments.insert(
            "gsem.fuse.weight".into(),
            Moments { m: Tensor::full([1, 1, 1, 2], 0.5), v: Tensor::full([1, 1, 1, 2], 0.25) },
        );
        let meta = CheckpointMeta { epoch: 4, best_f1: Some(0.5), ..CheckpointMeta::fresh(cfg) };
        let back = from_bytes::<f32>(&to_vec(&model, &meta, Some(&adam)).unwrap()).unwrap();
        assert!(back.meta.folded && back.model.is_folded());
        assert_eq!(back.meta.epoch, 4);
        let a2 = back.adam.unwrap();
        assert_eq!(a2.step, 3);
        assert_eq!(a2.moments, adam.moments);
    }

    #[test]
    fn rejects_garbage_and_foreign_files() {
        assert!(from_bytes::<f32>(b"not a checkpoint").is_err());
        let t = vec![0u8; 4];
        let v = TensorView::new(Dtype::F32, vec![1, 1, 1, 1], &t).unwrap();
        let bytes = safetensors::serialize(vec![("x", v)], None).unwrap();
        assert!(from_bytes::<f32>(&bytes).is_err());
    }
}
