use std::io::{Read, Write};

use crate::scalar::Real;

use super::{AutodiffError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named learnable tensors. Tapes read from it; `backward` accumulates into it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].grad.as_ref()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Sets every gradient to zeros so unused parameters still count as populated.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(existing) => existing.add_assign(g),
            None => {
                let mut t = Tensor::zeros(p.value.shape());
                t.data_mut().copy_from_slice(g);
                p.grad = Some(t);
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"LCAW";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes parameters in the `LCAW` checkpoint layout (little-endian, f64 payload).
pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, AutodiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads an `LCAW` checkpoint into a fresh store (gradients empty).
pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<ParamStore<T>, AutodiffError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(AutodiffError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| AutodiffError::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(T::lit(f64::from_le_bytes(b)));
        }
        store.add(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Copies values from `src` into `dst` by parameter name; shapes must agree.
pub fn load_into<T: Real>(dst: &mut ParamStore<T>, src: &ParamStore<T>) -> Result<(), AutodiffError> {
    for p in src.iter() {
        let id = dst
            .find(&p.name)
            .ok_or_else(|| AutodiffError::Format(format!("unknown parameter {}", p.name)))?;
        if dst.value(id).shape() != p.value.shape() {
            return Err(AutodiffError::Shape(format!(
                "parameter {} has shape {:?}, checkpoint has {:?}",
                p.name,
                dst.value(id).shape(),
                p.value.shape()
            )));
        }
        *dst.value_mut(id) = p.value.clone();
    }
    if src.len() != dst.len() {
        return Err(AutodiffError::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    Ok(())
}
