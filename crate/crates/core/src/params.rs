//! Named-parameter traversal shared by the optimizer, checkpointing, gradient
//! checks and trainable-count audits.

use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub trait Parameters {
    /// Visits every tensor with its fully qualified, unique name.
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| {
            if t.requires_grad() {
                n += t.numel();
            }
        });
        n
    }

    fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, t| {
            if t.requires_grad() {
                names.push(name.to_string());
            }
        });
        names
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }

    /// Adds the tape's gradients into each trainable tensor's accumulator.
    /// Tensors the tape never saw keep their current gradient.
    fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        let mut out = Ok(());
        self.visit_mut(&mut |name, t| {
            if out.is_err() || !t.requires_grad() {
                return;
            }
            if let Some(g) = tape.param_grad(name) {
                out = t.accumulate_grad(g);
            }
        });
        out
    }
}

/// SHA-256 over names, shapes and little-endian values, in visit order.
pub fn content_hash(p: &dyn Parameters) -> String {
    let mut hasher = Sha256::new();
    p.visit(&mut |name, t| {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    });
    hex::encode(hasher.finalize())
}

pub fn find_mut<'a>(p: &'a mut dyn Parameters, name: &str, mut f: impl FnMut(&mut Tensor)) -> bool {
    let mut found = false;
    p.visit_mut(&mut |n, t| {
        if n == name {
            f(t);
            found = true;
        }
    });
    found
}

pub fn snapshot(p: &dyn Parameters) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    p.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
    out
}
