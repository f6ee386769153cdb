//! Named-parameter plumbing shared by every trainable module: tape
//! binding, gradient extraction, optimizer application, digests, and
//! parameter censuses.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::numerics::{Adam, Gradients, Scalar, Tape, Tensor};

/// Anything with named trainable tensors.
pub trait Parameters<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

/// Clone of `model` whose parameters matching `trainable` are watched
/// on `tape`. Forward passes through the bound clone record gradients;
/// unwatched parameters act as constants (frozen).
pub fn bind<T: Scalar, M: Parameters<T> + Clone>(
    model: &M,
    tape: &Tape<T>,
    trainable: &dyn Fn(&str) -> bool,
) -> M {
    let mut bound = model.clone();
    bound.visit_mut(&mut |name, t| {
        if trainable(name) {
            *t = tape.watch(t);
        }
    });
    bound
}

/// Gradients of every watched parameter of a bound model, by name.
/// Parameters off the loss path read as zeros.
pub fn extract_grads<T: Scalar, M: Parameters<T>>(
    bound: &M,
    grads: &Gradients<T>,
) -> HashMap<String, Vec<T>> {
    let mut out = HashMap::new();
    bound.visit(&mut |name, t| {
        if t.requires_grad() {
            out.insert(name.to_string(), grads.get_or_zeros(t));
        }
    });
    out
}

/// One optimizer step over every parameter present in the gradient map.
pub fn apply_updates<T: Scalar, M: Parameters<T>>(
    model: &mut M,
    grads: &HashMap<String, Vec<T>>,
    opt: &mut Adam<T>,
    lr: f64,
) {
    opt.begin_step();
    model.visit_mut(&mut |name, t| {
        if let Some(g) = grads.get(name) {
            opt.update_param(name, t, g, lr);
        }
    });
}

pub fn param_names<T: Scalar, M: Parameters<T>>(model: &M) -> Vec<String> {
    let mut names = Vec::new();
    model.visit(&mut |name, _| names.push(name.to_string()));
    names
}

pub fn param_count<T: Scalar, M: Parameters<T>>(model: &M, filter: &dyn Fn(&str) -> bool) -> usize {
    let mut total = 0;
    model.visit(&mut |name, t| {
        if filter(name) {
            total += t.len();
        }
    });
    total
}

/// SHA-256 over names, shapes, and exact bit patterns of the parameters
/// selected by `filter`, in sorted-name order. Bit-identical parameters
/// produce identical digests; any single-bit change does not.
pub fn digest<T: Scalar, M: Parameters<T>>(model: &M, filter: &dyn Fn(&str) -> bool) -> [u8; 32] {
    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.visit(&mut |name, t| {
        if filter(name) {
            let mut bytes = Vec::with_capacity(t.len() * 8);
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_f64().to_bits().to_le_bytes());
            }
            entries.push((name.to_string(), t.shape().to_vec(), bytes));
        }
    });
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut hasher = Sha256::new();
    for (name, shape, bytes) in entries {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((shape.len() as u32).to_le_bytes());
        for d in shape {
            hasher.update((d as u64).to_le_bytes());
        }
        hasher.update(&bytes);
    }
    hasher.finalize().into()
}

pub fn digest_hex(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
