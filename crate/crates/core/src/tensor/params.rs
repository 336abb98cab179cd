use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Scalar, Tape, Tensor, Var};

/// Named parameter tensors in a fixed (lexicographic) order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Stream seed derived from a run seed and a parameter name, so a parameter's
/// initial value does not depend on which other parameters exist.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    /// Uniform in `[-bound, bound]`, seeded by `(seed, name)`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], bound: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
        let t = Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..=bound)));
        self.insert(name, t);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape.to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Places every parameter on `tape`; those accepted by `trainable` are
    /// recorded as gradient-receiving leaves, the rest as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        let vars = self
            .entries
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone(), trainable(name))))
            .collect();
        Bound { tape, vars }
    }
}

/// Parameters placed on a tape for one forward/backward pass.
pub struct Bound<'t, T> {
    tape: &'t Tape<T>,
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// # Panics
    /// If `name` was not in the store; model code and store are built together.
    pub fn get(&self, name: &str) -> Var<'t, T> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }

    /// Accumulated gradient of every trainable parameter; zero when the
    /// backward pass never reached it.
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(name, v)| {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
