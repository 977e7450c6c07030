//! Named traversal over trainable tensors.
//!
//! Weight structs double as gradient containers: a gradient is a zero-initialised copy
//! of the weights with the same shapes. Traversal order is fixed, which keeps optimizer
//! buffers and checkpoints aligned by position.

use crate::numerics::Matrix;

pub trait ParamVisit {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix));
}

pub fn named_params<P: ParamVisit + ?Sized>(p: &P) -> Vec<(String, &Matrix)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, m| out.push((trim(name), m)));
    out
}

pub fn named_params_mut<P: ParamVisit + ?Sized>(p: &mut P) -> Vec<(String, &mut Matrix)> {
    let mut out = Vec::new();
    p.visit_mut("", &mut |name, m| out.push((trim(name), m)));
    out
}

fn trim(name: String) -> String {
    name.strip_prefix('.').map(str::to_owned).unwrap_or(name)
}

pub fn param_count<P: ParamVisit + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, m| n += m.len());
    n
}

/// Sets every tensor to zero.
pub fn zero<P: ParamVisit + ?Sized>(p: &mut P) {
    p.visit_mut("", &mut |_, m| m.fill(0.0));
}

/// `dst += alpha * src`, matched by position.
pub fn axpy<P: ParamVisit>(dst: &mut P, alpha: f64, src: &P) {
    let src = named_params(src);
    for ((_, d), (_, s)) in named_params_mut(dst).into_iter().zip(src) {
        d.axpy(alpha, s).expect("parameter sets share shapes");
    }
}

pub fn global_norm<P: ParamVisit + ?Sized>(p: &P) -> f64 {
    let mut acc = 0.0;
    p.visit("", &mut |_, m| acc += m.frobenius_sq());
    acc.sqrt()
}

pub fn scale<P: ParamVisit + ?Sized>(p: &mut P, s: f64) {
    p.visit_mut("", &mut |_, m| m.scale(s));
}

/// Flattens every tensor into one vector, in traversal order.
pub fn flatten<P: ParamVisit + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, m| out.extend_from_slice(m.as_slice()));
    out
}
