//! Named parameter trees.
//!
//! Every learnable structure exposes its tensors as a flat, ordered list of
//! `(dotted.name, matrix)` pairs. The same type doubles as its own gradient
//! container, which lets the optimizer, the gradient checker and the
//! checkpoint writer stay generic.

use crate::numeric::{Matrix, Real};

pub trait ParamTree<F: Real>: Clone {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<F>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<F>)>);

    fn named(&self) -> Vec<(String, &Matrix<F>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Matrix<F>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.named_mut() {
            m.fill(F::zero());
        }
        z
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self) {
        let src = other.named();
        for ((_, dst), (_, s)) in self.named_mut().into_iter().zip(src) {
            dst.add_assign(s);
        }
    }

    fn scale_all(&mut self, s: F) {
        for (_, m) in self.named_mut() {
            for v in m.as_mut_slice() {
                *v *= s;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<F: Real> ParamTree<F> for Matrix<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<F>)>) {
        out.push((prefix.to_string(), self));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<F>)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<F: Real, T: ParamTree<F>> ParamTree<F> for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<F>)>) {
        for (i, item) in self.iter().enumerate() {
            item.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<F>)>) {
        for (i, item) in self.iter_mut().enumerate() {
            item.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Implements [`ParamTree`] for a struct generic over `F` by listing its
/// learnable fields in order. Fields left out are treated as hyperparameters.
#[macro_export]
macro_rules! param_tree {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<F: $crate::numeric::Real> $crate::params::ParamTree<F> for $ty<F> {
            fn collect<'a>(
                &'a self,
                prefix: &str,
                out: &mut Vec<(String, &'a $crate::numeric::Matrix<F>)>,
            ) {
                $( $crate::params::ParamTree::collect(&self.$field, &$crate::params::join_name(prefix, stringify!($field)), out); )*
            }

            fn collect_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<(String, &'a mut $crate::numeric::Matrix<F>)>,
            ) {
                $( $crate::params::ParamTree::collect_mut(&mut self.$field, &$crate::params::join_name(prefix, stringify!($field)), out); )*
            }
        }
    };
}

#[doc(hidden)]
pub fn join_name(prefix: &str, name: &str) -> String {
    join(prefix, name)
}
