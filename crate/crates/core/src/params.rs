//! Named parameter collections.

use crate::error::{contract, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A structure that owns named tensors.
///
/// Visiting order is fixed by each implementation, so flattening two trees
/// of the same type lines their parameters up one-to-one.
pub trait ParamTree {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Scaled-normal initialization, standard deviation 0.02.
pub(crate) fn normal_param(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, rng.normals(n, 0.02)).expect("shape and data agree")
}

/// Normal with standard deviation `1/sqrt(shape[0])`, for weights applied as `x · W`.
pub(crate) fn fan_in_param(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let std = 1.0 / (shape[0] as f64).sqrt();
    Tensor::param(shape, rng.normals(n, std)).expect("shape and data agree")
}

pub(crate) fn zero_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).to_param()
}

pub(crate) fn const_param(shape: &[usize], value: f64) -> Tensor {
    Tensor::full(shape, value).to_param()
}

/// Copies values from `src` into `dst` after checking both trees line up.
pub fn copy_values<T: ParamTree>(dst: &mut T, src: &T) -> Result<()> {
    let values = src.named_params();
    let mut i = 0;
    let mut mismatch = None;
    dst.visit_mut("", &mut |name, t| {
        match values.get(i) {
            Some((n, v)) if *n == name && v.shape() == t.shape() => {
                *t = t.with_data(v.data().to_vec()).expect("shapes checked");
            }
            _ => {
                mismatch.get_or_insert(name);
            }
        }
        i += 1;
    });
    contract!(mismatch.is_none() && i == values.len(), "parameter trees differ at {mismatch:?}");
    Ok(())
}

impl ParamTree for Tensor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(prefix.to_string(), self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefix.to_string(), self);
    }
}

impl<T: ParamTree> ParamTree for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: ParamTree> ParamTree for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(t) = self {
            t.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(t) = self {
            t.visit_mut(prefix, f);
        }
    }
}

/// Implements [`ParamTree`] for a struct by listing its tensor-bearing fields.
macro_rules! param_tree {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::params::ParamTree for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &$crate::tensor::Tensor)) {
                $( $crate::params::ParamTree::visit(&self.$field, &$crate::params::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::tensor::Tensor)) {
                $( $crate::params::ParamTree::visit_mut(&mut self.$field, &$crate::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use param_tree;
