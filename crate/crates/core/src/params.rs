//! Uniform traversal over the tensors of a parameter structure.
//!
//! Gradients, Adam moments and checkpoints all reuse the parameter type
//! itself, so one traversal order serves every purpose. `visit` and
//! `visit_mut` must walk tensors in the same order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;

pub trait Params: Clone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t));
        out
    }

    /// Overwrites element `elem` of the `tensor`-th tensor in traversal
    /// order, returning the previous value.
    fn set_value(&mut self, tensor: usize, elem: usize, value: f64) -> f64 {
        let mut i = 0;
        let mut old = f64::NAN;
        self.visit_mut(&mut |t| {
            if i == tensor {
                old = core::mem::replace(&mut t.data_mut()[elem], value);
            }
            i += 1;
        });
        old
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |t| t.fill(0.0));
        z
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |t| t.fill(0.0));
    }

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn add_assign(&mut self, other: &Self) {
        let src = other.tensors();
        let mut i = 0;
        self.visit_mut(&mut |t| {
            t.add_assign(src[i]);
            i += 1;
        });
    }

    fn scale(&mut self, k: f64) {
        self.visit_mut(&mut |t| t.scale(k));
    }

    fn global_norm(&self) -> f64 {
        libm::sqrt(self.tensors().iter().map(|t| t.sum_sq()).sum())
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(String::from(prefix), self);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(self);
    }
}
