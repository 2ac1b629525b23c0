//! The full classifier: frozen encoder, optional adapter banks at every
//! adapted site, optional router, and a trainable linear head.
//!
//! Evaluation uses tape-free forwards. Training builds one tape per example;
//! each expert's low-rank product `P_i = B_i * A_i` is computed once per
//! step and shared across the batch's tapes as a leaf with an auxiliary
//! gradient slot past the parameter range. After the batch's backward
//! sweeps, [`Model::map_product_grads`] folds each `dP_i` back onto the
//! factors (`dA = B^T dP`, `dB = dP A^T`), so the per-example graphs never
//! repeat the rank-sized matrix products.
//!
//! The mixture forward is decoupled into two passes: pass 1 runs the
//! backbone with adapters off and pools the last hidden state, the router
//! maps that to expert weights, and pass 2 runs the backbone with every
//! site's bank mixed by those weights. The weights are numerically fixed
//! between passes (one global vector per example, not recomputed per layer)
//! but stay differentiable, so the router learns from the classification
//! loss unless the stop-gradient flag severs that path.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_bank, recompose, MagnitudeKind};
use crate::backbone::{adapted_matrices, Backbone, BackboneConfig, SequenceBatch, SiteId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::routing::{Router, RoutingOutput};
use crate::tape::{GradBuf, Tape, Val};
use crate::tensor::{matmul_nt, softmax_rows, Tensor};

/// Which weights the forward pass uses at the adapted sites.
#[derive(Debug, Clone, Copy)]
pub enum AdapterMode<'a> {
    /// Frozen W0 everywhere (also pass 1 of the mixture forward).
    Off,
    /// The single installed expert, fully active (requires n_experts == 1).
    Dora,
    /// Mixture under the given expert weights, shared by the whole batch.
    Mode(&'a [f64]),
}

/// How an example's routing weights are produced during training.
#[derive(Debug, Clone, Copy)]
pub enum RoutePlan<'a> {
    /// Router output on the adapter-free pooled hidden state.
    Learned,
    /// A fixed distribution (one-hot task assignment, or `[1.0]` for a
    /// single unrouted expert). No gradient flows to the router.
    Fixed(&'a [f64]),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    pub magnitude: MagnitudeKind,
    /// With a router (the mixture model) or without (plain single-adapter
    /// fine-tuning; requires n_experts == 1).
    pub routed: bool,
    pub temperature: f64,
    /// Detach routing weights in the adapted pass so the router receives no
    /// gradient through the classification loss.
    pub stop_router_grad: bool,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            n_experts: 10,
            rank: 32,
            alpha: 64.0,
            magnitude: MagnitudeKind::PerColumn,
            routed: true,
            temperature: 1.0,
            stop_router_grad: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub adapters: Option<AdapterSpec>,
    pub n_tasks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone: BackboneConfig::default(), adapters: Some(AdapterSpec::default()), n_tasks: 10 }
    }
}

/// Parameter slots of one site's expert bank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankSlots {
    pub m: usize,
    /// (A_i, B_i) slot pairs.
    pub experts: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub sites: Vec<SiteId>,
    pub banks: Vec<BankSlots>,
    pub router: Option<Router>,
    pub head_w: usize,
    pub head_b: usize,
}

/// Per-example evaluation record produced by the tape-free forward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleOutput {
    pub participant_id: usize,
    pub task_id: usize,
    pub label: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub pred: usize,
    pub confidence: f64,
    pub correct: bool,
    pub routing: Option<Vec<f64>>,
}

/// One example's recorded training graph.
pub struct ExampleGraph {
    pub tape: Tape,
    pub ce: Val,
    /// ce plus the on-tape load-balancing term when present.
    pub total: Val,
    pub w_node: Option<Val>,
    pub w_values: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Model {
    /// Build the model and its parameter store. The backbone is drawn from
    /// `backbone_seed` (held fixed across runs so every regime adapts the
    /// same "pretrained" network); adapters, router and head are drawn from
    /// per-component substreams of `run_seed`.
    pub fn build(cfg: &ModelConfig, backbone_seed: u64, run_seed: u64) -> Result<(Model, ParamStore)> {
        cfg.backbone.validate()?;
        if cfg.n_tasks == 0 {
            return Err(Error::config("n_tasks must be positive"));
        }
        let mut store = ParamStore::new();
        let mut bb_rng = ChaCha8Rng::seed_from_u64(backbone_seed);
        bb_rng.set_stream(0);
        let backbone = Backbone::init(&cfg.backbone, cfg.n_tasks, &mut store, &mut bb_rng)?;
        let sites = adapted_matrices(&cfg.backbone);

        let mut banks = Vec::new();
        let mut router = None;
        if let Some(spec) = &cfg.adapters {
            if spec.n_experts < 1 {
                return Err(Error::config("n_experts must be >= 1"));
            }
            if !spec.routed && spec.n_experts != 1 {
                return Err(Error::config(
                    "an unrouted adapter configuration must have exactly one expert",
                ));
            }
            let mut ad_rng = ChaCha8Rng::seed_from_u64(run_seed);
            ad_rng.set_stream(1);
            for (site, &w0_slot) in sites.iter().zip(backbone.site_slots()) {
                let w0 = store.get(w0_slot).clone();
                let bank = init_bank(
                    &w0,
                    spec.rank,
                    spec.alpha,
                    spec.n_experts,
                    spec.magnitude,
                    &mut ad_rng,
                )?;
                let mut experts = Vec::with_capacity(spec.n_experts);
                for (i, (a, b)) in bank.experts.into_iter().enumerate() {
                    let a_slot =
                        store.register(&format!("adapter.{}.e{}.a", site.name, i), a, true)?;
                    let b_slot =
                        store.register(&format!("adapter.{}.e{}.b", site.name, i), b, true)?;
                    experts.push((a_slot, b_slot));
                }
                let m_slot = store.register(&format!("adapter.{}.m", site.name), bank.m, true)?;
                banks.push(BankSlots { m: m_slot, experts });
            }
            if spec.routed {
                let mut r_rng = ChaCha8Rng::seed_from_u64(run_seed);
                r_rng.set_stream(2);
                router = Some(Router::init(
                    cfg.backbone.d_model,
                    spec.n_experts,
                    spec.temperature,
                    "router",
                    &mut store,
                    &mut r_rng,
                )?);
            }
        }

        let mut h_rng = ChaCha8Rng::seed_from_u64(run_seed);
        h_rng.set_stream(3);
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, 1.0 / (cfg.backbone.d_model as f64).sqrt()).expect("finite std");
        let head = Tensor {
            shape: vec![cfg.backbone.n_classes, cfg.backbone.d_model],
            data: (0..cfg.backbone.n_classes * cfg.backbone.d_model)
                .map(|_| dist.sample(&mut h_rng))
                .collect(),
        };
        let head_w = store.register("head.weight", head, true)?;
        let head_b =
            store.register("head.bias", Tensor::zeros(vec![1, cfg.backbone.n_classes]), true)?;

        Ok((Model { cfg: cfg.clone(), backbone, sites, banks, router, head_w, head_b }, store))
    }

    pub fn spec(&self) -> Option<&AdapterSpec> {
        self.cfg.adapters.as_ref()
    }

    pub fn n_experts(&self) -> usize {
        self.spec().map(|s| s.n_experts).unwrap_or(0)
    }

    /// First gradient slot past the parameters, reserved for the per-step
    /// expert products.
    /// Recompute every bank's magnitude from the current frozen site
    /// weights. Needed when the base weights change after the banks were
    /// initialized (the brief pretext phase replaces W0), so that the
    /// zero-update identity keeps holding against the new base.
    pub fn refresh_magnitudes(&self, store: &mut ParamStore) -> Result<()> {
        let spec = match &self.cfg.adapters {
            Some(s) => s,
            None => return Ok(()),
        };
        for (bank, &w0_slot) in self.banks.iter().zip(self.backbone.site_slots()) {
            let m = crate::adapters::init_magnitude(store.get(w0_slot), spec.magnitude)?;
            store.set_value(bank.m, m)?;
        }
        Ok(())
    }

    pub fn aux_base(&self, store: &ParamStore) -> usize {
        store.len()
    }

    /// Total gradient-buffer size: parameters plus one product slot per
    /// (site, expert).
    pub fn grad_slots(&self, store: &ParamStore) -> usize {
        store.len() + self.banks.len() * self.n_experts()
    }

    /// Compute every expert's raw product `B_i * A_i`, once per step.
    pub fn compute_products(&self, store: &ParamStore) -> Vec<Vec<Arc<Tensor>>> {
        self.banks
            .iter()
            .map(|bank| {
                bank.experts
                    .iter()
                    .map(|&(a, b)| {
                        Arc::new(crate::adapters::expert_product(store.get(a), store.get(b)))
                    })
                    .collect()
            })
            .collect()
    }

    /// Materialize each site's effective weight for fixed expert weights
    /// (tape-free). `w` must have one entry per expert.
    pub fn effective_site_weights(
        &self,
        store: &ParamStore,
        products: &[Vec<Arc<Tensor>>],
        w: &[f64],
    ) -> Result<Vec<Tensor>> {
        let spec = self
            .spec()
            .ok_or_else(|| Error::config("model has no adapters installed"))?;
        if w.len() != spec.n_experts {
            return Err(Error::config(format!(
                "{} expert weights for {} experts",
                w.len(),
                spec.n_experts
            )));
        }
        let scale = spec.alpha / spec.rank as f64;
        let mut out = Vec::with_capacity(self.banks.len());
        for (s, bank) in self.banks.iter().enumerate() {
            let w0 = store.get(self.backbone.site_slots()[s]);
            let mut v = (**w0).clone();
            for (i, p) in products[s].iter().enumerate() {
                let factor = scale * w[i];
                if factor == 0.0 {
                    continue;
                }
                for (o, &x) in v.data.iter_mut().zip(&p.data) {
                    *o += factor * x;
                }
            }
            out.push(recompose("effective_site_weights", &v, store.get(bank.m))?);
        }
        Ok(out)
    }

    pub fn head_logits(&self, store: &ParamStore, pooled: &Tensor) -> Vec<f64> {
        let hw = store.get(self.head_w);
        let hb = store.get(self.head_b);
        let c = self.cfg.backbone.n_classes;
        let mut logits = matmul_nt(&pooled.data, &hw.data, 1, self.cfg.backbone.d_model, c);
        for (l, &b) in logits.iter_mut().zip(&hb.data) {
            *l += b;
        }
        logits
    }

    fn w0_refs<'s>(&self, store: &'s ParamStore) -> Vec<&'s Tensor> {
        self.backbone.site_slots().iter().map(|&s| store.get(s).as_ref()).collect()
    }

    /// Batch forward under an explicit adapter mode, per the two-pass
    /// decoupled protocol's building block. Returns classification logits
    /// (B x n_classes) and the pooled last hidden states (B x d_model) of
    /// this same pass.
    pub fn forward(
        &self,
        store: &ParamStore,
        batch: &SequenceBatch,
        mode: AdapterMode,
    ) -> Result<(Tensor, Tensor)> {
        batch.validate(self.cfg.backbone.max_seq_len, self.cfg.backbone.d_in, self.cfg.n_tasks)?;
        let d = self.cfg.backbone.d_model;
        let c = self.cfg.backbone.n_classes;
        let site_tensors: Option<Vec<Tensor>> = match mode {
            AdapterMode::Off => None,
            AdapterMode::Dora => {
                let spec = self
                    .spec()
                    .ok_or_else(|| Error::config("single-adapter forward without adapters"))?;
                if spec.n_experts != 1 {
                    return Err(Error::config(format!(
                        "single-adapter forward requires exactly one expert, model has {}",
                        spec.n_experts
                    )));
                }
                let products = self.compute_products(store);
                Some(self.effective_site_weights(store, &products, &[1.0])?)
            }
            AdapterMode::Mode(w) => {
                let products = self.compute_products(store);
                Some(self.effective_site_weights(store, &products, w)?)
            }
        };
        let refs: Vec<&Tensor> = match &site_tensors {
            Some(ts) => ts.iter().collect(),
            None => self.w0_refs(store),
        };
        let b = batch.len();
        let mut logits = Tensor::zeros(vec![b, c]);
        let mut hidden = Tensor::zeros(vec![b, d]);
        for i in 0..b {
            let pooled =
                self.backbone
                    .forward_plain(store, &batch.features[i], batch.task_id[i], &refs)?;
            let l = self.head_logits(store, &pooled);
            logits.data[i * c..(i + 1) * c].copy_from_slice(&l);
            hidden.data[i * d..(i + 1) * d].copy_from_slice(&pooled.data);
        }
        Ok((logits, hidden))
    }

    /// Decoupled two-pass mixture forward (tape-free): pass 1 with adapters
    /// off produces the routing input, pass 2 applies each example's expert
    /// weights at every site.
    pub fn forward_mode(
        &self,
        store: &ParamStore,
        batch: &SequenceBatch,
    ) -> Result<(Tensor, RoutingOutput)> {
        let router = self
            .router
            .as_ref()
            .ok_or_else(|| Error::config("mixture forward requires a router"))?;
        let (_, hidden_off) = self.forward(store, batch, AdapterMode::Off)?;
        let routing = router.route(store, &hidden_off)?;
        let products = self.compute_products(store);
        let c = self.cfg.backbone.n_classes;
        let e = self.n_experts();
        let b = batch.len();
        let mut logits = Tensor::zeros(vec![b, c]);
        for i in 0..b {
            let w = &routing.weights.data[i * e..(i + 1) * e];
            let eff = self.effective_site_weights(store, &products, w)?;
            let refs: Vec<&Tensor> = eff.iter().collect();
            let pooled =
                self.backbone
                    .forward_plain(store, &batch.features[i], batch.task_id[i], &refs)?;
            let l = self.head_logits(store, &pooled);
            logits.data[i * c..(i + 1) * c].copy_from_slice(&l);
        }
        Ok((logits, routing))
    }

    /// Tape-free evaluation over a batch: routed models use the two-pass
    /// protocol per example, unrouted adapters and bare backbones use one
    /// pass with their fixed weights.
    pub fn forward_batch_eval(
        &self,
        store: &ParamStore,
        batch: &SequenceBatch,
    ) -> Result<Vec<ExampleOutput>> {
        batch.validate(self.cfg.backbone.max_seq_len, self.cfg.backbone.d_in, self.cfg.n_tasks)?;
        let c = self.cfg.backbone.n_classes;
        let mut outs = Vec::with_capacity(batch.len());
        let routed = self.router.is_some();
        let products =
            if self.banks.is_empty() { Vec::new() } else { self.compute_products(store) };
        // Unrouted weights are example-independent: materialize once.
        let fixed_eff: Option<Vec<Tensor>> = if !self.banks.is_empty() && !routed {
            Some(self.effective_site_weights(store, &products, &[1.0])?)
        } else {
            None
        };
        let w0_refs = self.w0_refs(store);
        for i in 0..batch.len() {
            let feats = &batch.features[i];
            let task = batch.task_id[i];
            let (pooled, routing) = if routed {
                let off = self.backbone.forward_plain(store, feats, task, &w0_refs)?;
                let routing = self.router.as_ref().unwrap().route(store, &off)?;
                let w = routing.weights.data.clone();
                let eff = self.effective_site_weights(store, &products, &w)?;
                let refs: Vec<&Tensor> = eff.iter().collect();
                (self.backbone.forward_plain(store, feats, task, &refs)?, Some(w))
            } else if let Some(eff) = &fixed_eff {
                let refs: Vec<&Tensor> = eff.iter().collect();
                (self.backbone.forward_plain(store, feats, task, &refs)?, None)
            } else {
                (self.backbone.forward_plain(store, feats, task, &w0_refs)?, None)
            };
            let logits = self.head_logits(store, &pooled);
            let mut probs = vec![0.0; c];
            softmax_rows(&logits, c, 1.0, &mut probs);
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            outs.push(ExampleOutput {
                participant_id: batch.participant_id[i],
                task_id: task,
                label: batch.label[i],
                confidence: probs[pred],
                correct: pred == batch.label[i],
                pred,
                probs,
                logits,
                routing,
            });
        }
        Ok(outs)
    }

    /// Record one example's training graph. `products` and `aux_base` come
    /// from [`Model::compute_products`] / [`Model::aux_base`]; `pooled_off`
    /// is the example's adapter-free pooled hidden state (required for
    /// learned routing). `lambda_lb` adds the on-tape per-example
    /// load-balancing term unless `kl_batch_mean` defers it to the caller's
    /// seed on the weight node.
    #[allow(clippy::too_many_arguments)]
    pub fn build_example_graph(
        &self,
        store: &ParamStore,
        products: &[Vec<Arc<Tensor>>],
        aux_base: usize,
        feats: &Tensor,
        task: usize,
        label: usize,
        pooled_off: Option<&Tensor>,
        plan: RoutePlan,
        lambda_lb: f64,
        kl_batch_mean: bool,
    ) -> Result<ExampleGraph> {
        let spec = self
            .spec()
            .ok_or_else(|| Error::config("training graph requires adapters"))?;
        if lambda_lb < 0.0 {
            return Err(Error::config(format!("lambda_lb must be >= 0, got {}", lambda_lb)));
        }
        let e = spec.n_experts;
        let mut tape = Tape::new();

        let (w_val, w_is_learned) = match plan {
            RoutePlan::Learned => {
                let router = self
                    .router
                    .as_ref()
                    .ok_or_else(|| Error::config("learned routing requires a router"))?;
                let pooled = pooled_off
                    .ok_or_else(|| Error::config("learned routing requires the pass-1 hidden state"))?;
                let h = tape.constant(pooled.clone());
                let w = router.route_tape(store, &mut tape, h, spec.stop_router_grad)?;
                (w, !spec.stop_router_grad)
            }
            RoutePlan::Fixed(w) => {
                if w.len() != e {
                    return Err(Error::config(format!(
                        "{} fixed weights for {} experts",
                        w.len(),
                        e
                    )));
                }
                (tape.constant(Tensor::row(w.to_vec())), false)
            }
        };

        let mut site_vals = Vec::with_capacity(self.banks.len());
        for (s, bank) in self.banks.iter().enumerate() {
            let w0 = tape.constant_shared(store.get(self.backbone.site_slots()[s]).clone());
            let product_vals: Vec<Val> = products[s]
                .iter()
                .enumerate()
                .map(|(i, p)| tape.leaf_shared(p.clone(), aux_base + s * e + i))
                .collect();
            let m = tape.leaf_shared(store.get(bank.m).clone(), bank.m);
            site_vals.push(crate::adapters::tape_mode_weight(
                &mut tape,
                w0,
                &product_vals,
                w_val,
                m,
                spec.rank,
                spec.alpha,
            )?);
        }

        let pooled = self.backbone.forward_tape(store, &mut tape, feats, task, &site_vals)?;
        let hw = tape.leaf_shared(store.get(self.head_w).clone(), self.head_w);
        let hb = tape.leaf_shared(store.get(self.head_b).clone(), self.head_b);
        let scores = tape.matmul_nt(pooled, hw)?;
        let logits = tape.add(scores, hb)?;
        let ce = tape.cross_entropy(logits, &[label])?;

        let total = if w_is_learned && lambda_lb > 0.0 && !kl_batch_mean {
            let kl = tape.kl_uniform(w_val)?;
            let scaled = tape.scale(kl, lambda_lb)?;
            tape.add(ce, scaled)?
        } else {
            ce
        };

        let w_values = tape.value(w_val).data.clone();
        let logits_values = tape.value(logits).data.clone();
        Ok(ExampleGraph {
            tape,
            ce,
            total,
            w_node: if w_is_learned { Some(w_val) } else { None },
            w_values,
            logits: logits_values,
        })
    }

    /// Fold accumulated product-slot gradients back onto the expert factors.
    pub fn map_product_grads(&self, store: &ParamStore, grads: &mut GradBuf, aux_base: usize) {
        let e = self.n_experts();
        for (s, bank) in self.banks.iter().enumerate() {
            for (i, &(a_slot, b_slot)) in bank.experts.iter().enumerate() {
                if let Some(dp) = grads.take(aux_base + s * e + i) {
                    let (da, db) =
                        crate::adapters::product_grads(store.get(a_slot), store.get(b_slot), &dp);
                    grads.add(a_slot, &da);
                    grads.add(b_slot, &db);
                }
            }
        }
    }

    /// Adapter-free pooled hidden state for one example (pass 1).
    pub fn pooled_off(&self, store: &ParamStore, feats: &Tensor, task: usize) -> Result<Tensor> {
        let refs = self.w0_refs(store);
        self.backbone.forward_plain(store, feats, task, &refs)
    }
}
