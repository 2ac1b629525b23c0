//! Per-example expert routing and the load-balancing loss term.
//!
//! The router is a single fully-connected layer over the pooled hidden state
//! of an adapter-free backbone pass. Its temperature-scaled softmax output
//! is used as the expert weights at every adapted site of the second,
//! adapted pass — one global weight vector per example, not per layer. The
//! combined training objective adds a KL(w || uniform) penalty that pushes
//! routing away from collapse onto a single expert.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Val};
use crate::tensor::{entropy, matmul_nn, softmax_rows, Tensor};

/// Slot wiring and temperature for the routing layer. Parameter data lives
/// in the [`ParamStore`]; both slots are trainable except while a two-stage
/// schedule explicitly freezes them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Router {
    pub weight: usize,
    pub bias: usize,
    pub temperature: f64,
    pub n_experts: usize,
    pub d_model: usize,
}

/// Routing decision for a batch: raw logits, the softmax weights actually
/// used, and the temperature that produced them.
#[derive(Debug, Clone)]
pub struct RoutingOutput {
    pub logits: Tensor,
    pub weights: Tensor,
    pub temperature: f64,
}

impl Router {
    /// Register router parameters: small Gaussian weight, zero bias (so an
    /// uninformative hidden state routes uniformly).
    pub fn init(
        d_model: usize,
        n_experts: usize,
        temperature: f64,
        name_prefix: &str,
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
    ) -> Result<Router> {
        if !(temperature > 0.0) {
            return Err(Error::domain("router_init", format!("temperature {} <= 0", temperature)));
        }
        if n_experts < 1 {
            return Err(Error::config("router needs at least one expert"));
        }
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, 1.0 / (d_model as f64).sqrt()).expect("finite std");
        let weight = Tensor {
            shape: vec![d_model, n_experts],
            data: (0..d_model * n_experts).map(|_| dist.sample(rng)).collect(),
        };
        let w_slot = store.register(&format!("{}.weight", name_prefix), weight, true)?;
        let b_slot =
            store.register(&format!("{}.bias", name_prefix), Tensor::zeros(vec![1, n_experts]), true)?;
        Ok(Router { weight: w_slot, bias: b_slot, temperature, n_experts, d_model })
    }

    /// Compute routing weights for a batch of pooled hidden states
    /// (B x d_model), without a tape.
    pub fn route(&self, store: &ParamStore, last_hidden: &Tensor) -> Result<RoutingOutput> {
        if last_hidden.cols() != self.d_model {
            return Err(Error::shape(
                "route",
                format!("hidden width {} vs router d_model {}", last_hidden.cols(), self.d_model),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::domain("route", format!("temperature {} <= 0", self.temperature)));
        }
        let b = last_hidden.rows();
        let w = store.get(self.weight);
        let bias = store.get(self.bias);
        let mut logits = matmul_nn(&last_hidden.data, &w.data, b, self.d_model, self.n_experts);
        for row in logits.chunks_exact_mut(self.n_experts) {
            for (v, &bv) in row.iter_mut().zip(&bias.data) {
                *v += bv;
            }
        }
        let logits = Tensor { shape: vec![b, self.n_experts], data: logits };
        crate::tensor::ensure_finite("route", &logits)?;
        let mut weights = vec![0.0; b * self.n_experts];
        softmax_rows(&logits.data, self.n_experts, self.temperature, &mut weights);
        let weights = Tensor { shape: vec![b, self.n_experts], data: weights };
        for (i, row) in weights.data.chunks_exact(self.n_experts).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-8 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::domain("route", format!("row {} is not a distribution", i)));
            }
        }
        Ok(RoutingOutput { logits, weights, temperature: self.temperature })
    }

    /// Record the routing computation for one example on a tape. `h` is the
    /// pooled hidden node (1 x d_model); returns the 1 x E weight node.
    /// With `stop_gradient`, the weights are detached so the router receives
    /// no gradient through the adapted pass.
    pub fn route_tape(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        h: Val,
        stop_gradient: bool,
    ) -> Result<Val> {
        let w = tape.leaf_shared(store.get(self.weight).clone(), self.weight);
        let bias = tape.leaf_shared(store.get(self.bias).clone(), self.bias);
        let scores = tape.matmul(h, w)?;
        let logits = tape.add(scores, bias)?;
        let weights = tape.softmax(logits, self.temperature)?;
        if stop_gradient {
            Ok(tape.detach(weights))
        } else {
            Ok(weights)
        }
    }
}

/// KL divergence from per-row routing weights to the uniform distribution,
/// averaged over rows: mean_b sum_i w[b,i] ln(w[b,i] * E), with 0 ln 0 = 0.
pub fn kl_uniform_mean(w: &Tensor) -> f64 {
    let e = w.cols() as f64;
    let mut total = 0.0;
    for row in w.data.chunks_exact(w.cols()) {
        for &v in row {
            if v > 0.0 {
                total += v * (v * e).ln();
            }
        }
    }
    total / w.rows() as f64
}

/// Batch-mean-importance variant: KL(mean_b w_b || uniform). Penalizes only
/// aggregate imbalance, not per-example confidence.
pub fn kl_uniform_batch_mean(w: &Tensor) -> f64 {
    let (b, e) = (w.rows(), w.cols());
    let mut imp = vec![0.0; e];
    for row in w.data.chunks_exact(e) {
        for (s, &v) in imp.iter_mut().zip(row) {
            *s += v;
        }
    }
    let ef = e as f64;
    imp.iter()
        .map(|&s| {
            let p = s / b as f64;
            if p > 0.0 {
                p * (p * ef).ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Combined objective: cross entropy plus `lambda_lb` times the mean KL to
/// uniform of the routing weights.
pub fn total_loss(ce: f64, w: &Tensor, lambda_lb: f64) -> Result<f64> {
    if lambda_lb < 0.0 {
        return Err(Error::config(format!("lambda_lb must be >= 0, got {}", lambda_lb)));
    }
    Ok(ce + lambda_lb * kl_uniform_mean(w))
}

/// Mean (over rows) Shannon entropy of routing weights, in nats. Collapse
/// onto one expert drives this toward 0; uniform routing gives ln E.
pub fn mean_routing_entropy(w: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..w.rows() {
        total += entropy(w.row_slice(i));
    }
    total / w.rows() as f64
}
