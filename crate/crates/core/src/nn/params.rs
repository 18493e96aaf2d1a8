use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Updated by the optimizer.
    Trainable,
    /// Batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
    pub role: TensorRole,
    /// Index of the owning layer in the network spec.
    pub layer: usize,
    pub frozen: bool,
}

impl<T> ParamTensor<T> {
    pub fn is_trainable(&self) -> bool {
        self.role == TensorRole::Trainable && !self.frozen
    }
}

/// Every named tensor of a network, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub(crate) fn push(
        &mut self,
        name: String,
        dims: Vec<usize>,
        data: Vec<T>,
        role: TensorRole,
        layer: usize,
    ) -> usize {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        debug_assert!(self.index_of(&name).is_none(), "duplicate tensor {name}");
        self.tensors.push(ParamTensor {
            name,
            dims,
            data,
            role,
            layer,
            frozen: false,
        });
        self.tensors.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of trainable scalars (frozen ones included).
    pub fn parameter_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.role == TensorRole::Trainable)
            .map(|t| t.data.len())
            .sum()
    }

    pub(crate) fn data(&self, index: usize) -> &[T] {
        &self.tensors[index].data
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| U::of(v.f64())).collect(),
                    role: t.role,
                    layer: t.layer,
                    frozen: t.frozen,
                })
                .collect(),
        }
    }
}

/// Gradients aligned index-by-index with a [`ParamSet`]. Buffers carry an
/// empty vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub grads: Vec<Vec<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            grads: params
                .tensors
                .iter()
                .map(|t| match t.role {
                    TensorRole::Trainable => vec![T::zero(); t.data.len()],
                    TensorRole::Buffer => Vec::new(),
                })
                .collect(),
        }
    }

    pub fn all_zero(&self) -> bool {
        self.grads.iter().flatten().all(|g| *g == T::zero())
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.f64().abs())
            .fold(0.0, f64::max)
    }
}
