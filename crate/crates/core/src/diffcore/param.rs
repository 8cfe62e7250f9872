//! Named, grouped learnable parameters.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::real::Real;

/// Learning-rate / lifecycle grouping of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    AnchorOffset,
    AnchorLatent,
    AnchorScale,
    Mlp,
    AppearanceEmbed,
    AdaptLayer,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::AnchorOffset,
        ParamGroup::AnchorLatent,
        ParamGroup::AnchorScale,
        ParamGroup::Mlp,
        ParamGroup::AppearanceEmbed,
        ParamGroup::AdaptLayer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::AnchorOffset => "anchor_offset",
            ParamGroup::AnchorLatent => "anchor_latent",
            ParamGroup::AnchorScale => "anchor_scale",
            ParamGroup::Mlp => "mlp",
            ParamGroup::AppearanceEmbed => "appearance_embed",
            ParamGroup::AdaptLayer => "adapt_layer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Flat registry of all learnable state. Ids are stable for the life of the
/// store; row-structured params (one row per anchor) support row removal and
/// growth for the anchor lifecycle.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            name: name.into(),
            group,
            value,
            grad,
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

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let g = self.params[id.0].grad.data_mut();
        debug_assert_eq!(g.len(), grad.len());
        for (dst, src) in g.iter_mut().zip(grad.iter()) {
            *dst += *src;
        }
    }

    /// Scalar count of learnable values in the store.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Remove the given rows (sorted ascending, deduplicated) from a
    /// row-structured parameter; value and grad shrink together.
    pub fn remove_rows(&mut self, id: ParamId, rows: &[usize]) {
        let p = &mut self.params[id.0];
        p.value = remove_tensor_rows(&p.value, rows);
        p.grad = remove_tensor_rows(&p.grad, rows);
    }

    /// Append rows to a row-structured parameter; grads for the new rows are
    /// zero.
    pub fn append_rows(&mut self, id: ParamId, rows: &[T]) {
        let p = &mut self.params[id.0];
        let (r, c) = p.value.dims2();
        assert_eq!(rows.len() % c, 0, "appended data not a whole row count");
        let extra = rows.len() / c;
        let mut value = p.value.data().to_vec();
        value.extend_from_slice(rows);
        let mut grad = p.grad.data().to_vec();
        grad.extend(std::iter::repeat(T::zero()).take(rows.len()));
        p.value = Tensor::new(vec![r + extra, c], value).expect("row append");
        p.grad = Tensor::new(vec![r + extra, c], grad).expect("row append");
    }
}

fn remove_tensor_rows<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let (r, c) = t.dims2();
    let mut keep = Vec::with_capacity((r - rows.len()) * c);
    let mut drop_iter = rows.iter().peekable();
    for i in 0..r {
        if drop_iter.peek() == Some(&&i) {
            drop_iter.next();
            continue;
        }
        keep.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![r - rows.len(), c], keep).expect("row removal")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_removal_keeps_order() {
        let mut store = ParamStore::<f64>::new();
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]);
        let id = store.add("x", ParamGroup::AnchorLatent, t);
        store.remove_rows(id, &[1]);
        assert_eq!(store.value(id).shape(), &[2, 2]);
        assert_eq!(store.value(id).data(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn grads_zero_after_zero_grad() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", ParamGroup::Mlp, Tensor::zeros(vec![3]));
        store.accumulate_grad(id, &[1.0, 2.0, 3.0]);
        assert_eq!(store.grad(id).data(), &[1.0, 2.0, 3.0]);
        store.zero_grad();
        assert_eq!(store.grad(id).data(), &[0.0, 0.0, 0.0]);
    }
}
