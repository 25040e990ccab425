//! Named learnable parameters and non-learnable state buffers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::RunningStats;
use crate::tensor::Tensor;

/// Handle to an entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named collection of gradient-tracked leaves.
///
/// Iteration order is insertion order. Initial values are drawn from a
/// generator seeded with `seed`, advanced in insertion order, so a given
/// construction sequence always yields the same values.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: BTreeMap<String, usize>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Inserts `value` as a gradient-tracked leaf under a new name.
    pub fn insert(&mut self, name: impl Into<String>, value: &Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{}`", name)));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push((name, value.to_param()));
        Ok(ParamId(id))
    }

    /// Weight with fan-in-scaled uniform values in `±√(6/fan_in)`, where
    /// fan-in is the product of all extents after the first.
    pub fn kaiming_uniform(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        let bound = libm::sqrt(6.0 / fan_in as f64);
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(self.rng.gen_range(-bound..bound)))
            .collect();
        self.insert(name, &Tensor::new(shape, data)?)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.insert(name, &Tensor::full(shape, T::from_f64(value))?)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces an entry's value (as a fresh leaf); the shape must match.
    pub fn set(&mut self, id: ParamId, value: &Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.1.shape() != value.shape() {
            return Err(Error::dim(
                "ParamStore::set",
                "shape",
                format!("`{}` is {:?}, got {:?}", slot.0, slot.1.shape(), value.shape()),
            ));
        }
        slot.1 = value.to_param();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total learnable scalar count.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Same names with the given values, in order. Used to evaluate a
    /// model at substituted parameter values.
    pub fn with_values(&self, values: &[Tensor<T>]) -> Result<Self> {
        if values.len() != self.entries.len() {
            return Err(Error::Usage(format!(
                "expected {} parameter values, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        let mut out = self.clone();
        for (i, v) in values.iter().enumerate() {
            if v.shape() != out.entries[i].1.shape() {
                return Err(Error::dim(
                    "ParamStore::with_values",
                    "shape",
                    format!("`{}` expects {:?}, got {:?}", out.entries[i].0, out.entries[i].1.shape(), v.shape()),
                ));
            }
            out.entries[i].1 = v.clone();
        }
        Ok(out)
    }

    /// Copy with independent `N(0, std²)` noise added to every value, giving
    /// a generic point away from the exact zeros of the initial biases.
    pub fn jittered(&self, seed: u64, std: f64) -> Result<Self> {
        let mut out = self.clone();
        for (i, e) in out.entries.iter_mut().enumerate() {
            let noise = Tensor::<f64>::randn(e.1.shape(), seed.wrapping_add(i as u64))?;
            let data = e
                .1
                .data()
                .iter()
                .zip(noise.data())
                .map(|(&v, &z)| v + T::from_f64(std * z))
                .collect();
            e.1 = Tensor::param(e.1.shape(), data)?;
        }
        Ok(out)
    }

    /// Copy whose entries are constants, so forwards record no graph.
    pub fn frozen(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.1 = e.1.detach();
        }
        out
    }

    /// Copy converted to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<U>().to_param()))
                .collect(),
            index: self.index.clone(),
            seed: self.seed,
            rng: self.rng.clone(),
        }
    }
}

/// Handle to an entry of a [`Buffers`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Non-learnable state (batch-norm running statistics), kept apart from
/// [`ParamStore`] so that parameter counts cover learnable values only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Buffers<T: Scalar = f32> {
    entries: Vec<(String, RunningStats<T>)>,
}

impl<T: Scalar> Buffers<T> {
    pub fn new() -> Self {
        Buffers { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, stats: RunningStats<T>) -> Result<BufferId> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Usage(format!("duplicate buffer name `{}`", name)));
        }
        self.entries.push((name, stats));
        Ok(BufferId(self.entries.len() - 1))
    }

    /// Stats for `id`, or a state error when absent.
    pub fn get_mut(&mut self, id: BufferId) -> Result<&mut RunningStats<T>> {
        self.entries
            .get_mut(id.0)
            .map(|e| &mut e.1)
            .ok_or_else(|| Error::State(format!("no running statistics for buffer {}", id.0)))
    }

    pub fn get(&self, id: BufferId) -> Option<&RunningStats<T>> {
        self.entries.get(id.0).map(|e| &e.1)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut RunningStats<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|e| &mut e.1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> + '_ {
        self.entries.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Buffers<U> {
        let conv = |v: &[T]| -> Vec<U> { v.iter().map(|x| U::from_f64(x.to_f64())).collect() };
        Buffers {
            entries: self
                .entries
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        RunningStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                            momentum: U::from_f64(s.momentum.to_f64()),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Builder that prefixes names with a dotted scope.
pub struct Scope<'a, T: Scalar> {
    pub params: &'a mut ParamStore<T>,
    pub buffers: &'a mut Buffers<T>,
    prefix: String,
}

impl<'a, T: Scalar> Scope<'a, T> {
    pub fn new(params: &'a mut ParamStore<T>, buffers: &'a mut Buffers<T>, prefix: impl Into<String>) -> Self {
        Scope {
            params,
            buffers,
            prefix: prefix.into(),
        }
    }

    pub fn name(&self, local: &str) -> String {
        if self.prefix.is_empty() {
            local.into()
        } else {
            format!("{}.{}", self.prefix, local)
        }
    }

    /// Nested scope `prefix.local`.
    pub fn sub(&mut self, local: &str) -> Scope<'_, T> {
        let prefix = self.name(local);
        Scope {
            params: self.params,
            buffers: self.buffers,
            prefix,
        }
    }

    pub fn kaiming_uniform(&mut self, local: &str, shape: &[usize]) -> Result<ParamId> {
        let n = self.name(local);
        self.params.kaiming_uniform(n, shape)
    }

    pub fn constant(&mut self, local: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = self.name(local);
        self.params.constant(n, shape, value)
    }

    pub fn running_stats(&mut self, local: &str, channels: usize) -> Result<BufferId> {
        let n = self.name(local);
        self.buffers.insert(n, RunningStats::new(channels))
    }
}

/// Shape checks shared by blocks: `x` must have `c` channels.
pub(crate) fn expect_channels<T: Scalar>(op: &'static str, x: &Tensor<T>, c: usize) -> Result<()> {
    let (_, got, _, _) = x.dims4(op)?;
    if got != c {
        return Err(Error::dim(op, "C", format!("expected {} channels, got {}", c, got)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_unique_names() {
        let mut p = ParamStore::<f64>::new(3);
        let a = p.kaiming_uniform("a", &[4, 2, 3, 3]).unwrap();
        let b = p.constant("b", &[4], 0.0).unwrap();
        assert!(p.constant("a", &[1], 0.0).is_err());
        let names: Vec<_> = p.iter().map(|(_, n, _)| n).collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(p.param_count(), 72 + 4);
        assert!(p.get(a).is_leaf() && p.get(a).requires_grad());
        assert_eq!(p.id("b"), Some(b));
        let bound = (6.0f64 / 18.0).sqrt();
        assert!(p.get(a).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn seeded_initialization_is_reproducible() {
        let build = |seed| {
            let mut p = ParamStore::<f32>::new(seed);
            p.kaiming_uniform("w", &[8, 8, 1, 1]).unwrap();
            p.get(ParamId(0)).to_vec()
        };
        assert_eq!(build(5), build(5));
        assert_ne!(build(5), build(6));
    }

    #[test]
    fn scope_prefixes_names() {
        let mut p = ParamStore::<f32>::new(0);
        let mut b = Buffers::new();
        let mut s = Scope::new(&mut p, &mut b, "enc1");
        s.sub("conv").kaiming_uniform("weight", &[2, 2, 1, 1]).unwrap();
        s.running_stats("bn", 2).unwrap();
        assert!(p.id("enc1.conv.weight").is_some());
        assert_eq!(b.iter().next().unwrap().0, "enc1.bn");
    }
}
