use std::collections::HashMap;

use rand::Rng;

use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Initialization scheme for a declared parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` over the last two axes.
    XavierUniform,
    /// Uniform with the given standard deviation.
    Uniform(f64),
}

/// Anything a model can declare its parameters into.
pub trait ParamSink {
    fn declare(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId;
}

/// Ordered collection of named parameters. Names are unique and their order is
/// the declaration order, which keeps checkpoint layouts stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.numel()];
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declares a parameter and fills it from `rng`.
    pub fn declare_with<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::XavierUniform => {
                let (fan_in, fan_out) = match shape {
                    [] => (1, 1),
                    [d] => (*d, *d),
                    [.., a, b] => (*a, *b),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            }
            Init::Uniform(std) => {
                let limit = std * 3f64.sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            }
        };
        let tensor = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.insert(name, tensor)
            .unwrap_or_else(|e| panic!("model declared parameters twice: {e}"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds a backward pass's gradients into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (acc, v) in p.grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}

/// Records parameter names and shapes without allocating them.
#[derive(Clone, Debug, Default)]
pub struct ShapeCollector {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ShapeCollector {
    pub fn numel(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

impl ParamSink for ShapeCollector {
    fn declare(&mut self, name: &str, shape: &[usize], _init: Init) -> ParamId {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name `{name}`"
        );
        self.entries.push((name.to_string(), shape.to_vec()));
        ParamId(self.entries.len() - 1)
    }
}

/// A [`ParamSink`] that allocates into a store using a random generator.
pub struct Initializer<'a, R: Rng + ?Sized> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng + ?Sized> ParamSink for Initializer<'_, R> {
    fn declare(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.store.declare_with(name, shape, init, self.rng)
    }
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub(crate) fn with_len(n: usize) -> Self {
        Gradients {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}
