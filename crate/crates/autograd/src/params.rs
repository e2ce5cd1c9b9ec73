//! Named parameter storage and seeded initialisation.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Updated by the optimiser.
    Trainable,
    /// State updated outside of gradient descent (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Arc<ArrayD<T>>,
    pub role: Role,
}

/// Insertion-ordered parameter table. Ordering is part of the checkpoint format.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>, role: Role) -> ParamId {
        assert!(!self.by_name.contains_key(name), "parameter `{name}` registered twice");
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: Arc::new(value.as_standard_layout().into_owned()),
            role,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn shared(&self, id: ParamId) -> Arc<ArrayD<T>> {
        self.entries[id.0].value.clone()
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Mutable access; copies the value if a live graph still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<T>) {
        let entry = &mut self.entries[id.0];
        assert_eq!(entry.value.shape(), value.shape(), "shape change for parameter `{}`", entry.name);
        entry.value = Arc::new(value.as_standard_layout().into_owned());
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, e)| e.role == Role::Trainable).map(|(id, _)| id)
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.iter()
            .filter(|(_, e)| e.role == Role::Trainable)
            .map(|(_, e)| e.value.len())
            .sum()
    }

    /// Copy with every value converted to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (_, e) in self.iter() {
            out.insert(&e.name, e.value.mapv(|v| U::lit(v.as_f64())), e.role);
        }
        out
    }
}

/// Initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal {
        std: f64,
    },
    /// He-normal for fan-in `fan_in`: std = sqrt(2 / fan_in).
    KaimingNormal {
        fan_in: usize,
    },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform {
        fan_in: usize,
    },
}

impl Init {
    pub fn sample<T: Real>(self, shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<T> {
        let n: usize = shape.iter().product();
        let values: Vec<T> = match self {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Const(c) => vec![T::lit(c); n],
            Init::TruncNormal { std } => {
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break T::lit(v);
                        }
                    })
                    .collect()
            }
            Init::KaimingNormal { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                (0..n).map(|_| T::lit(normal.sample(rng))).collect()
            }
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                (0..n).map(|_| T::lit(rng.sample(u))).collect()
            }
        };
        ArrayD::from_shape_vec(IxDyn(shape), values).expect("shape")
    }
}

/// Registers parameters under a dotted prefix, drawing initial values from one seeded stream.
pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        ParamBuilder {
            prefix: self.qualify(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = init.sample::<T>(shape, self.rng);
        let full = self.qualify(name);
        self.store.insert(&full, value, Role::Trainable)
    }

    pub fn buffer(&mut self, name: &str, value: ArrayD<T>) -> ParamId {
        let full = self.qualify(name);
        self.store.insert(&full, value, Role::Buffer)
    }
}
