use crate::real::Real;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<S>) {
        assert_eq!(self.tensors[id.0].shape(), tensor.shape(), "param shape");
        self.tensors[id.0] = tensor.with_requires_grad(true);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Sums parameter gradients from several backward passes in a fixed order.
#[derive(Clone, Debug)]
pub struct GradAccumulator<S> {
    grads: Vec<Vec<S>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Real> GradAccumulator<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        Self {
            grads: store.tensors.iter().map(|t| vec![S::zero(); t.numel()]).collect(),
            shapes: store.tensors.iter().map(|t| t.shape().to_vec()).collect(),
        }
    }

    pub fn add(&mut self, grads: &Gradients<S>) {
        for (id, g) in grads.params() {
            for (acc, &v) in self.grads[id.0].iter_mut().zip(g.data()) {
                *acc += v;
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.grads[id.0]
    }

    pub fn to_tensor(&self, id: ParamId) -> Tensor<S> {
        Tensor::new(&self.shapes[id.0], self.grads[id.0].clone()).expect("shape")
    }
}
