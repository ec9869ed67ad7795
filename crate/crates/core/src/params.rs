//! Named parameter storage, per-forward sessions and the small layer set
//! (convolution, batch norm, `conv → BN → ReLU` transforms) the modules use.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hmat;
use crate::tape::{BnRunning, Gradients, Tape, Var};
use crate::tensor::{DType, Tensor};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Ordered collection of named tensors: trainable parameters and buffers
/// such as batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.dims() != value.dims() {
            return Err(Error::shape(format!(
                "{}: expected {:?}, got {:?}",
                e.name,
                e.value.dims(),
                value.dims()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Writes one HMAT file per entry plus a `name file dims kind` manifest.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for e in &self.entries {
            let file = format!("{}.hmat", e.name);
            hmat::write_tensor(&dir.join(&file), &e.value)?;
            let dims: Vec<String> = e.value.dims().iter().map(|d| d.to_string()).collect();
            let kind = if e.trainable { "param" } else { "buffer" };
            writeln!(manifest, "{}\t{}\t{}\t{}", e.name, file, dims.join("x"), kind)
                .expect("write to string");
        }
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<ParamStore> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let mut store = ParamStore::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::format(offset, format!("bad manifest line {line:?}")));
            }
            let value = hmat::read_tensor(&dir.join(fields[1]))?;
            let dims: Vec<String> = value.dims().iter().map(|d| d.to_string()).collect();
            if dims.join("x") != fields[2] {
                return Err(Error::format(
                    offset,
                    format!("{}: manifest dims {} disagree with file", fields[0], fields[2]),
                ));
            }
            let trainable = match fields[3] {
                "param" => true,
                "buffer" => false,
                other => {
                    return Err(Error::format(offset, format!("unknown entry kind {other}")));
                }
            };
            store.add(fields[0], value, trainable);
            offset += line.len() as u64 + 1;
        }
        Ok(store)
    }

    /// Replaces values by name; every entry of `self` must be present in `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let id = other
                .find(&e.name)
                .ok_or_else(|| Error::usage(format!("missing parameter {}", e.name)))?;
            let v = other.get(id);
            if v.dims() != e.value.dims() {
                return Err(Error::shape(format!(
                    "{}: stored {:?}, expected {:?}",
                    e.name,
                    v.dims(),
                    e.value.dims()
                )));
            }
            e.value = v.clone();
        }
        Ok(())
    }
}

/// One forward pass: a fresh tape with parameters bound lazily as leaves.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a mut ParamStore,
    bound: Vec<Option<Var>>,
    pub training: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a mut ParamStore, training: bool) -> Self {
        let n = store.len();
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            training,
        }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(store: &'a mut ParamStore, tape: Tape, training: bool) -> Self {
        let n = store.len();
        Session {
            tape,
            store,
            bound: vec![None; n],
            training,
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// Uses `v` for parameter `id` instead of a fresh leaf from the store.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradients for every trainable parameter, zeros where unused.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let like = self.store.get(id);
                let g = match self.bound[id.0] {
                    Some(v) => grads.get_or_zeros(v, like),
                    None => Tensor::zeros(like.dims(), like.dtype()).expect("valid dims"),
                };
                (id, g)
            })
            .collect()
    }
}

/// Fan-in scaled normal initialization, `std = sqrt(2 / fan_in)`.
pub fn init_weight<R: Rng + ?Sized>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(dims, (2.0 / fan_in as f64).sqrt(), rng).expect("valid weight dims")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_weight(&[cout, cin, kernel, kernel], fan_in, rng),
            true,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[1, cout, 1, 1], DType::F64).expect("valid dims"),
                true,
            )
        });
        Conv2d {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn num_params(&self) -> usize {
        self.cin * self.cout * self.kernel * self.kernel + self.bias.map_or(0, |_| self.cout)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let bv = s.param(b);
                s.tape.add_bcast(y, bv)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let ones = Tensor::full(&[channels], 1.0, DType::F64).expect("valid dims");
        let zeros = Tensor::zeros(&[channels], DType::F64).expect("valid dims");
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), ones.clone(), true),
            beta: store.add(format!("{name}.beta"), zeros.clone(), true),
            running_mean: store.add(format!("{name}.running_mean"), zeros, false),
            running_var: store.add(format!("{name}.running_var"), ones, false),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let mut running = BnRunning {
            mean: s.store().get(self.running_mean).data().to_vec(),
            var: s.store().get(self.running_var).data().to_vec(),
            momentum: BnRunning::DEFAULT_MOMENTUM,
            eps: BnRunning::DEFAULT_EPS,
        };
        let training = s.training;
        let y = s.tape.batch_norm(x, gamma, beta, &mut running, training)?;
        if training {
            let c = running.mean.len();
            let store = s.store_mut();
            store.set(self.running_mean, Tensor::from_vec(&[c], running.mean))?;
            store.set(self.running_var, Tensor::from_vec(&[c], running.var))?;
        }
        Ok(y)
    }
}

/// `conv → BN → ReLU`, the transform used throughout the attention modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.tape.relu(y))
    }
}

/// Applies a pointwise layer to a `[B,C,T]` token tensor.
pub fn on_tokens(
    s: &mut Session,
    x: Var,
    f: impl FnOnce(&mut Session, Var) -> Result<Var>,
) -> Result<Var> {
    let d = s.tape.dims(x).to_vec();
    if d.len() != 3 {
        return Err(Error::shape(format!("expected [B,C,T] tokens, got {d:?}")));
    }
    let x4 = s.tape.reshape(x, &[d[0], d[1], d[2], 1])?;
    let y = f(s, x4)?;
    let yd = s.tape.dims(y).to_vec();
    s.tape.reshape(y, &[yd[0], yd[1], yd[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_and_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let conv = ConvBnRelu::new(&mut store, "blk", 3, 4, 3, 1, &mut rng);
        assert_eq!(store.len(), 5);
        assert!(!store.is_trainable(conv.bn.running_var));
        let dir = tempfile::tempdir().unwrap();
        store.save_dir(dir.path()).unwrap();
        let loaded = ParamStore::load_dir(dir.path()).unwrap();
        assert_eq!(loaded, store);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(manifest.contains("blk.conv.weight\tblk.conv.weight.hmat\t4x3x3x3\tparam"));
    }

    #[test]
    fn batchnorm_updates_running_stats_only_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng).unwrap();
        {
            let mut s = Session::new(&mut store, false);
            let xv = s.tape.leaf(x.clone());
            bn.forward(&mut s, xv).unwrap();
        }
        assert_eq!(store.get(bn.running_mean).data(), &[0.0, 0.0]);
        {
            let mut s = Session::new(&mut store, true);
            let xv = s.tape.leaf(x);
            bn.forward(&mut s, xv).unwrap();
        }
        assert_ne!(store.get(bn.running_mean).data(), &[0.0, 0.0]);
    }
}
