//! Versioned JSON checkpoint container: model kind, encoder config,
//! vocabulary, and every named tensor as a row-major f64 array.
//!
//! Layout (format_version 1):
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "kind": "contrastive",
//!   "encoder_config": { ... },
//!   "use_projection": true,
//!   "d_embed": 64,
//!   "temperature": 0.07,
//!   "temperature_learnable": false,
//!   "vocab_words": ["bolt", ...],
//!   "tensors": [{"name": "token_embedding", "rows": R, "cols": C, "data": [...]}, ...]
//! }
//! ```
//!
//! JSON floats are written in shortest round-trip form, so save → load is
//! bit-exact f64.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, ParamStore};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::Objective;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: Objective,
    pub encoder_config: EncoderConfig,
    pub use_projection: bool,
    pub d_embed: usize,
    pub temperature: f64,
    pub temperature_learnable: bool,
    #[serde(default)]
    pub mlm_transform: bool,
    pub vocab_words: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot every tensor of a store, in registration order.
    pub fn capture_store(store: &ParamStore) -> Vec<NamedTensor> {
        store
            .ids()
            .map(|id| {
                let t = store.get(id);
                NamedTensor {
                    name: store.name(id).to_string(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                    data: t.iter().copied().collect(),
                }
            })
            .collect()
    }

    /// Overwrite a freshly built store with the checkpoint's tensors,
    /// matched by name. Every store tensor must be present with the same
    /// shape and every checkpoint tensor must be consumed.
    pub fn restore_store(&self, store: &mut ParamStore) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != self.tensors.len() {
            return Err(Error::Data("checkpoint contains duplicate tensor names".into()));
        }
        let mut used = 0usize;
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let tensor = by_name.get(name.as_str()).ok_or_else(|| {
                Error::Data(format!("checkpoint is missing tensor '{name}'"))
            })?;
            let target = store.get_mut(id);
            if tensor.rows != target.nrows() || tensor.cols != target.ncols() {
                return Err(Error::Data(format!(
                    "tensor '{name}' has shape {}x{} in the checkpoint but {}x{} in the model; \
                     the checkpoint was built with a different configuration",
                    tensor.rows,
                    tensor.cols,
                    target.nrows(),
                    target.ncols()
                )));
            }
            *target = Matrix::from_shape_vec((tensor.rows, tensor.cols), tensor.data.clone())
                .map_err(|e| Error::Data(format!("tensor '{name}': {e}")))?;
            used += 1;
        }
        if used != self.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint carries {} tensors but the model expects {used}; kind mismatch?",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let writer = std::io::BufWriter::new(file);
        serde_json::to_writer(writer, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let ckpt: Checkpoint = serde_json::from_reader(reader)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format_version {} (expected {FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        ckpt.encoder_config.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> (Checkpoint, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add("a", Matrix::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)));
        store.add("b", Matrix::from_shape_fn((1, 4), |_| rng.random_range(-1e-30..1e30)));
        let ckpt = Checkpoint {
            format_version: FORMAT_VERSION,
            kind: Objective::Contrastive,
            encoder_config: EncoderConfig::desk_default(100),
            use_projection: true,
            d_embed: 64,
            temperature: 0.07,
            temperature_learnable: false,
            mlm_transform: false,
            vocab_words: vec!["bolt".into(), "nut".into()],
            tensors: Checkpoint::capture_store(&store),
        };
        (ckpt, store)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (ckpt, store) = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut restored = ParamStore::new();
        restored.add("a", Matrix::zeros((3, 4)));
        restored.add("b", Matrix::zeros((1, 4)));
        loaded.restore_store(&mut restored).unwrap();
        for (id_a, id_b) in store.ids().zip(restored.ids()) {
            for (x, y) in store.get(id_a).iter().zip(restored.get(id_b).iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let (ckpt, _) = sample_checkpoint();
        let mut store = ParamStore::new();
        store.add("a", Matrix::zeros((3, 5)));
        store.add("b", Matrix::zeros((1, 4)));
        let err = ckpt.restore_store(&mut store).unwrap_err();
        assert!(err.to_string().contains("different configuration"));
    }

    #[test]
    fn restore_rejects_missing_tensor() {
        let (ckpt, _) = sample_checkpoint();
        let mut store = ParamStore::new();
        store.add("a", Matrix::zeros((3, 4)));
        store.add("missing", Matrix::zeros((1, 1)));
        assert!(ckpt.restore_store(&mut store).is_err());
    }

    #[test]
    fn load_rejects_wrong_version() {
        let (mut ckpt, _) = sample_checkpoint();
        ckpt.format_version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        ckpt.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
