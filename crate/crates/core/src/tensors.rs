//! Named traversal over parameter bundles.
//!
//! Every parameter container lists its tensors in a fixed declaration order.
//! Gradients and optimizer velocities reuse the parameter types, so zipping
//! two bundles' tensor lists pairs each weight with its gradient.

use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone, Copy)]
pub enum TensorRef<'a> {
    Matrix(&'a Matrix),
    Vector(&'a Vector),
}

#[derive(Debug)]
pub enum TensorMut<'a> {
    Matrix(&'a mut Matrix),
    Vector(&'a mut Vector),
}

impl<'a> TensorRef<'a> {
    pub fn data(&self) -> &'a [f64] {
        match *self {
            TensorRef::Matrix(m) => m.as_slice(),
            TensorRef::Vector(v) => v.as_slice(),
        }
    }

    /// `[rows, cols]` for matrices, `[len]` for vectors.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            TensorRef::Matrix(m) => vec![m.rows(), m.cols()],
            TensorRef::Vector(v) => vec![v.len()],
        }
    }
}

impl TensorMut<'_> {
    pub fn data_mut(&mut self) -> &mut [f64] {
        match self {
            TensorMut::Matrix(m) => m.as_mut_slice(),
            TensorMut::Vector(v) => v.as_mut_slice(),
        }
    }
}

pub type NamedRef<'a> = (String, TensorRef<'a>);
pub type NamedMut<'a> = (String, TensorMut<'a>);

pub trait Tensors: Clone {
    fn tensors(&self) -> Vec<NamedRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<NamedMut<'_>>;

    /// Same shapes, every element zero.
    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, mut t) in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn scale_in_place(&mut self, s: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    /// `self += s * other`. Both bundles must share a layout.
    fn add_scaled(&mut self, other: &Self, s: f64) {
        let src = other.tensors();
        let dst = self.tensors_mut();
        assert_eq!(src.len(), dst.len(), "tensor layouts differ");
        for ((name, mut d), (_, o)) in dst.into_iter().zip(src) {
            let od = o.data();
            let dd = d.data_mut();
            assert_eq!(dd.len(), od.len(), "tensor {name} differs in size");
            for (a, b) in dd.iter_mut().zip(od) {
                *a += s * b;
            }
        }
    }

    /// Name of the first tensor holding a non-finite value, if any.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.data().iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }
}

/// Prepends `prefix.` to every name.
pub(crate) fn prefixed<'a>(prefix: &str, items: Vec<NamedRef<'a>>) -> Vec<NamedRef<'a>> {
    items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

pub(crate) fn prefixed_mut<'a>(prefix: &str, items: Vec<NamedMut<'a>>) -> Vec<NamedMut<'a>> {
    items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Expands to the `tensors`/`tensors_mut` pair for a struct whose fields are
/// all `Matrix` or `Vector`.
macro_rules! impl_flat_tensors {
    ($ty:ty { $($field:ident : $kind:ident),* $(,)? }) => {
        impl $crate::tensors::Tensors for $ty {
            fn tensors(&self) -> Vec<$crate::tensors::NamedRef<'_>> {
                vec![$((stringify!($field).to_string(), $crate::tensors::TensorRef::$kind(&self.$field))),*]
            }
            fn tensors_mut(&mut self) -> Vec<$crate::tensors::NamedMut<'_>> {
                vec![$((stringify!($field).to_string(), $crate::tensors::TensorMut::$kind(&mut self.$field))),*]
            }
        }
    };
}
pub(crate) use impl_flat_tensors;
