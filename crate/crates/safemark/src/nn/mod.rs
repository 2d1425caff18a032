//! Minimal f64 neural-network stack: tensors, layers with hand-written
//! backward passes, named-parameter visiting, Adam, and a finite
//! difference checker shared by tests.

pub mod layers;
pub mod tensor;

use std::collections::HashMap;

pub use layers::{
    silu, silu_backward, timestep_embedding, upsample2, upsample2_backward, Conv2d, GroupNorm,
    Linear,
};
pub use tensor::{PTensor, Tensor};

pub type ParamVisit<'a> = dyn FnMut(&str, &PTensor) + 'a;
pub type ParamVisitMut<'a> = dyn FnMut(&str, &mut PTensor) + 'a;

/// Anything with named parameters. Names are hierarchical
/// (`enc.c1.w`, `unet.mid.n1.gamma`, ...) and stable: they key gradient
/// accumulation, optimizer state, and checkpoint entries.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut ParamVisit);
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut);

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.numel());
        n
    }

    /// Flatten all parameters in visit order.
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| out.extend_from_slice(&p.data));
        out
    }
}

/// Accumulates parameter gradients by name.
#[derive(Default, Debug)]
pub struct GradStore {
    grads: HashMap<String, Vec<f64>>,
}

impl GradStore {
    pub fn add(&mut self, name: &str, grad: &[f64]) {
        match self.grads.get_mut(name) {
            Some(g) => {
                debug_assert_eq!(g.len(), grad.len(), "grad length for {name}");
                for (a, b) in g.iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(name.to_string(), grad.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for v in g {
                *v *= s;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm is at most `max`.
    pub fn clip_global_norm(&mut self, max: f64) {
        let norm = self.global_norm();
        if norm > max {
            self.scale(max / norm);
        }
    }
}

/// Cosine decay from `base` to `0.1 * base` across the budget.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let frac = step as f64 / (total - 1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Adam with per-name first/second moment state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over every visited parameter that has a gradient.
    /// Parameters whose name misses from `grads` (frozen or unused this
    /// step) are left untouched.
    pub fn step(&mut self, module: &mut dyn Module, grads: &GradStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut("", &mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

/// Central finite-difference check of parameter gradients.
///
/// Perturbs every parameter of `module` in place, evaluates `loss`, and
/// returns the maximum relative error against the analytic gradients in
/// `grads`. The loss closure must be a pure function of the module.
pub fn fd_check_params<M: Module>(
    module: &mut M,
    prefix: &str,
    grads: &GradStore,
    mut loss: impl FnMut(&M) -> f64,
    h: f64,
) -> f64 {
    // Collect names first so the closure doesn't borrow the module.
    let mut names = Vec::new();
    module.visit(prefix, &mut |name, p| names.push((name.to_string(), p.numel())));
    let mut max_rel: f64 = 0.0;
    for (name, numel) in names {
        let g = grads
            .get(&name)
            .unwrap_or_else(|| panic!("no analytic gradient for {name}"));
        assert_eq!(g.len(), numel);
        for i in 0..numel {
            let set = |val_off: f64, module: &mut M| {
                module.visit_mut(prefix, &mut |n, p| {
                    if n == name {
                        p.data[i] += val_off;
                    }
                });
            };
            set(h, module);
            let up = loss(module);
            set(-2.0 * h, module);
            let down = loss(module);
            set(h, module);
            let fd = (up - down) / (2.0 * h);
            let an = g[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            let rel = (fd - an).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}
