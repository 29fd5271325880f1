use std::collections::HashMap;

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named matrices. Also used for gradients and
/// optimizer moments, which share names and shapes with the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Normal init scaled by `std`.
    pub fn insert_normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: (usize, usize), std: f64, rng: &mut R) -> ParamId {
        let value = Array2::from_shape_simple_fn(shape, || {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        });
        self.insert(name, value)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) -> ParamId {
        self.insert(name, Array2::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Array2<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.values
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Array2::zeros(v.dim())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.dim() == b.dim())
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets differ in names or shapes".into()))
        }
    }

    /// `self += other`, elementwise over every tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * k);
        }
    }

    /// Global L2 norm, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| {
                let x = x.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Replaces values by name; missing or misshapen tensors are errors.
    pub fn load_values(&mut self, named: &HashMap<String, Array2<T>>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.values.iter_mut()) {
            let v = named
                .get(name)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` missing")))?;
            if v.dim() != slot.dim() {
                return Err(Error::Shape(format!("tensor `{name}` is {:?}, expected {:?}", v.dim(), slot.dim())));
            }
            slot.assign(v);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| U::lit(x.as_f64()))).collect(),
            index: self.index.clone(),
        }
    }

    /// `self ← decay·self + (1 − decay)·other`.
    pub fn lerp_towards(&mut self, other: &Self, decay: T) {
        let keep = T::one() - decay;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            Zip::from(a).and(b).for_each(|a, &b| *a = decay * *a + keep * b);
        }
    }
}
