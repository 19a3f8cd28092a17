//! Named parameter storage, Adam, and the binary checkpoint format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 4] = b"SQDN";
const CKPT_VERSION: u8 = 1;

/// Stable handle to a parameter; indexes registration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct ParamEntry<F: Scalar> {
    name: String,
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
}

/// Owns every learnable tensor. Gradients accumulate additively between
/// optimizer steps and are cleared by the step.
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter {name:?} registered twice"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, grad: None });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ids in registration order (the iteration order used everywhere for
    /// reproducibility).
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> Option<&mut Tensor<F>> {
        self.entries[id.0].grad.as_mut()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<F>) {
        let entry = &mut self.entries[id.0];
        assert_eq!(
            entry.value.shape(),
            g.shape(),
            "gradient shape {:?} for parameter {:?} of shape {:?}",
            g.shape(),
            entry.name,
            entry.value.shape()
        );
        match &mut entry.grad {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => entry.grad = Some(g.clone()),
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Gives zero gradients to parameters untouched by the current loss
    /// (legitimate under ablations); call deliberately before a step.
    pub fn fill_missing_grads_zero(&mut self) {
        for e in &mut self.entries {
            if e.grad.is_none() {
                e.grad = Some(Tensor::zeros(e.value.shape().to_vec()));
            }
        }
    }

    /// Snapshot of all values, for best-epoch restore.
    pub fn snapshot(&self) -> Vec<Tensor<F>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<F>]) {
        assert_eq!(snapshot.len(), self.entries.len(), "snapshot arity mismatch");
        for (e, t) in self.entries.iter_mut().zip(snapshot) {
            assert_eq!(e.value.shape(), t.shape(), "snapshot shape mismatch for {:?}", e.name);
            e.value = t.clone();
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Scalar> AdamConfig<F> {
    pub fn with_lr(lr: F) -> Self {
        AdamConfig {
            lr,
            beta1: F::from_f64_lit(0.9),
            beta2: F::from_f64_lit(0.999),
            eps: F::from_f64_lit(1e-8),
        }
    }
}

impl<F: Scalar> Default for AdamConfig<F> {
    fn default() -> Self {
        Self::with_lr(F::from_f64_lit(1e-4))
    }
}

/// Adam with bias correction. Moment buffers are allocated per parameter at
/// construction; the step consumes and clears gradients.
pub struct AdamState<F: Scalar> {
    cfg: AdamConfig<F>,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(cfg: AdamConfig<F>, store: &ParamStore<F>) -> Self {
        let m = store.ids().map(|id| Tensor::zeros(store.value(id).shape().to_vec())).collect();
        let v = store.ids().map(|id| Tensor::zeros(store.value(id).shape().to_vec())).collect();
        AdamState { cfg, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn adam_step(&mut self, store: &mut ParamStore<F>) {
        assert_eq!(self.m.len(), store.len(), "optimizer built for a different store");
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);
        for id in store.ids() {
            let g = store
                .grad(id)
                .unwrap_or_else(|| panic!("adam_step: missing gradient for parameter {:?}", store.name(id)))
                .clone();
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for ((mi, vi), &gi) in
                m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data())
            {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
            }
            let p = store.value_mut(id);
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        store.zero_grads();
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("checkpoint field {0} is malformed")]
    Malformed(&'static str),
}

/// Writes parameters (values as little-endian f64) plus a string metadata
/// block. The file appears atomically: temp file in the same directory, then
/// rename.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    store: &ParamStore<F>,
    metadata: &[(String, String)],
) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&[CKPT_VERSION])?;
        w.write_all(&(store.len() as u32).to_le_bytes())?;
        for id in store.ids() {
            let name = store.name(id).as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            let t = store.value(id);
            w.write_all(&[t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_f64_lit().to_le_bytes())?;
            }
        }
        w.write_all(&(metadata.len() as u32).to_le_bytes())?;
        for (k, v) in metadata {
            w.write_all(&(k.len() as u16).to_le_bytes())?;
            w.write_all(k.as_bytes())?;
            w.write_all(&(v.len() as u32).to_le_bytes())?;
            w.write_all(v.as_bytes())?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug)]
pub struct Checkpoint<F: Scalar> {
    pub tensors: Vec<(String, Tensor<F>)>,
    pub metadata: Vec<(String, String)>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Rebuilds a store with parameters in file order.
    pub fn into_store(self) -> ParamStore<F> {
        let mut store = ParamStore::new();
        for (name, t) in self.tensors {
            store.register(&name, t);
        }
        store
    }
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)?;
    if ver[0] != CKPT_VERSION {
        return Err(CheckpointError::BadVersion(ver[0]));
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = read_u16(&mut r)? as usize;
        let name = read_string(&mut r, nlen, "parameter name")?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(F::from_f64_lit(f64::from_le_bytes(buf)));
        }
        tensors.push((name, Tensor::new(shape, data)));
    }
    let n_meta = read_u32(&mut r)? as usize;
    let mut metadata = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let klen = read_u16(&mut r)? as usize;
        let key = read_string(&mut r, klen, "metadata key")?;
        let vlen = read_u32(&mut r)? as usize;
        let val = read_string(&mut r, vlen, "metadata value")?;
        metadata.push((key, val));
    }
    Ok(Checkpoint { tensors, metadata })
}

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize, what: &'static str) -> Result<String, CheckpointError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Malformed(what))
}
