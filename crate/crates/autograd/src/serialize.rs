//! Named-array archives in the safetensors format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::{ParamStore, Real};

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("safetensors: {0}")]
    Format(#[from] safetensors::SafeTensorError),
    #[error("tensor {name}: unsupported dtype {dtype:?}")]
    Dtype { name: String, dtype: Dtype },
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Arrays plus string metadata, as stored on disk.
#[derive(Debug, Clone, Default)]
pub struct Archive<T: Real> {
    pub tensors: BTreeMap<String, ArrayD<T>>,
    pub metadata: HashMap<String, String>,
}

impl<T: Real> Archive<T> {
    pub fn new() -> Self {
        Archive {
            tensors: BTreeMap::new(),
            metadata: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.tensors.insert(name.into(), value);
    }

    /// Adds every parameter of `store` under `prefix + name`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, p) in store.named() {
            self.insert(format!("{prefix}{name}"), p.value().to_owned());
        }
    }

    /// Copies `prefix + name` into every parameter of `store`; all must be present.
    pub fn load_store(&self, prefix: &str, store: &ParamStore<T>) -> Result<(), ArchiveError> {
        for (name, p) in store.named() {
            let key = format!("{prefix}{name}");
            let v = self.tensors.get(&key).ok_or_else(|| ArchiveError::Missing(key.clone()))?;
            if v.shape() != p.shape().as_slice() {
                return Err(ArchiveError::Shape {
                    name: key,
                    expected: p.shape(),
                    found: v.shape().to_vec(),
                });
            }
            p.set(v.clone());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ArchiveError> {
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, a)| {
                let mut bytes = Vec::with_capacity(a.len() * T::BYTES);
                for &v in a.as_standard_layout().iter() {
                    v.write_le(&mut bytes);
                }
                (name.clone(), a.shape().to_vec(), bytes)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| Ok((name.as_str(), TensorView::new(T::DTYPE, shape.clone(), bytes)?)))
            .collect::<Result<Vec<_>, safetensors::SafeTensorError>>()?;
        let meta = (!self.metadata.is_empty()).then(|| self.metadata.clone());
        Ok(safetensors::serialize(views, meta)?)
    }

    /// Reads `F32` or `F64` tensors, converting to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let (_, meta) = SafeTensors::read_metadata(bytes)?;
        let st = SafeTensors::deserialize(bytes)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let data = view.data();
            let values: Vec<T> = match view.dtype() {
                Dtype::F32 => data.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
                Dtype::F64 => data.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
                dtype => return Err(ArchiveError::Dtype { name, dtype }),
            };
            let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values).expect("validated by safetensors");
            tensors.insert(name, arr);
        }
        Ok(Archive {
            tensors,
            metadata: meta.metadata().clone().unwrap_or_default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
