//! A small frozen pre-LN transformer encoder standing in for a large
//! pretrained backbone.
//!
//! The "pretrained" weights are drawn once from a dedicated backbone seed and
//! then frozen; what matters downstream is a non-degenerate W0 with nonzero
//! column norms at every adapted site. Six weight matrices per layer accept
//! adapters: the four attention projections and the two feed-forward
//! matrices. Everything else (embedding, layer norms, positional table) is
//! plain frozen state.
//!
//! Two forward implementations are provided and kept numerically identical
//! by sharing the same kernels in the same order:
//! * [`Backbone::forward_plain`] — no tape, used for the routing pass and
//!   for evaluation, where no gradient is ever needed;
//! * [`Backbone::forward_tape`] — records the graph for training. Callers
//!   supply the (possibly adapted) weight node for each site, so the same
//!   code serves the unadapted, single-adapter and mixture configurations.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Val};
use crate::tensor::{layer_norm_rows, matmul_nt, softmax_rows, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_classes: usize,
    pub max_seq_len: usize,
    /// Input feature width consumed by the embedding projection.
    pub d_in: usize,
    /// When true, a frozen per-task embedding row is added to every position
    /// (comparison variant; by default the network must infer the task from
    /// content alone).
    pub task_embedding: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_classes: 2,
            max_seq_len: 32,
            d_in: 16,
            task_embedding: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_classes", self.n_classes),
            ("max_seq_len", self.max_seq_len),
            ("d_in", self.d_in),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::config(format!("{} must be positive", name)));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be >= 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One mini-batch of sequences. Features are stored per example as an
/// L x d_in matrix so examples can be processed on independent tapes.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub features: Vec<Tensor>,
    pub task_id: Vec<usize>,
    pub label: Vec<usize>,
    pub participant_id: Vec<usize>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self, max_seq_len: usize, d_in: usize, n_tasks: usize) -> Result<()> {
        let b = self.features.len();
        if self.task_id.len() != b || self.label.len() != b || self.participant_id.len() != b {
            return Err(Error::shape("sequence_batch", "misaligned batch fields"));
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.rows() > max_seq_len || f.cols() != d_in {
                return Err(Error::shape(
                    "sequence_batch",
                    format!(
                        "example {} has shape {:?}, limit {} x {}",
                        i,
                        f.shape,
                        max_seq_len,
                        d_in
                    ),
                ));
            }
        }
        if let Some(&t) = self.task_id.iter().find(|&&t| t >= n_tasks) {
            return Err(Error::index("sequence_batch", format!("task id {} >= {}", t, n_tasks)));
        }
        if let Some(&l) = self.label.iter().find(|&&l| l > 1) {
            return Err(Error::index("sequence_batch", format!("label {} not binary", l)));
        }
        Ok(())
    }
}

/// Identifier and shape of one adapter-carrying weight matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteId {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
}

/// The deterministic list of weight sites that receive adapters: for each
/// layer, the four attention projections then the two feed-forward matrices.
pub fn adapted_matrices(cfg: &BackboneConfig) -> Vec<SiteId> {
    let mut sites = Vec::with_capacity(6 * cfg.n_layers);
    for l in 0..cfg.n_layers {
        for proj in ["q", "k", "v", "o"] {
            sites.push(SiteId {
                name: format!("layer{}.attn.{}", l, proj),
                d_out: cfg.d_model,
                d_in: cfg.d_model,
            });
        }
        sites.push(SiteId { name: format!("layer{}.ff.w1", l), d_out: cfg.d_ff, d_in: cfg.d_model });
        sites.push(SiteId { name: format!("layer{}.ff.w2", l), d_out: cfg.d_model, d_in: cfg.d_ff });
    }
    sites
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerSlots {
    ln1_gamma: usize,
    ln1_beta: usize,
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    ln2_gamma: usize,
    ln2_beta: usize,
    ff1: usize,
    ff2: usize,
}

/// Slot wiring for the frozen encoder. Weight data itself lives in the
/// [`ParamStore`]; the positional table is a pure function of the config and
/// is rebuilt rather than stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    embed: usize,
    task_emb: Option<usize>,
    layers: Vec<LayerSlots>,
    final_ln_gamma: usize,
    final_ln_beta: usize,
    /// W0 slot per adapted site, aligned with [`adapted_matrices`] order.
    site_slots: Vec<usize>,
    #[serde(skip)]
    pos: Tensor,
}

/// Standard sinusoidal position table, max_seq_len x d_model.
fn positional_table(max_seq_len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; max_seq_len * d_model];
    for p in 0..max_seq_len {
        for j in 0..d_model {
            let exponent = (2 * (j / 2)) as f64 / d_model as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            data[p * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor { shape: vec![max_seq_len, d_model], data }
}

fn gaussian(shape: [usize; 2], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor {
        shape: shape.to_vec(),
        data: (0..shape[0] * shape[1]).map(|_| dist.sample(rng)).collect(),
    }
}

impl Backbone {
    /// Register all frozen encoder parameters, drawing weights from `rng`
    /// (the dedicated backbone stream, shared across runs). `n_tasks` sizes
    /// the optional task-embedding table.
    pub fn init(
        cfg: &BackboneConfig,
        n_tasks: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Backbone> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = store.register(
            "backbone.embed",
            gaussian([d, cfg.d_in], 1.0 / (cfg.d_in as f64).sqrt(), rng),
            false,
        )?;
        let task_emb = if cfg.task_embedding {
            Some(store.register(
                "backbone.task_emb",
                gaussian([n_tasks, d], 1.0 / (d as f64).sqrt(), rng),
                false,
            )?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut site_slots = Vec::with_capacity(6 * cfg.n_layers);
        let wstd = 1.0 / (d as f64).sqrt();
        for l in 0..cfg.n_layers {
            let ln1_gamma =
                store.register(&format!("backbone.layer{}.ln1.gamma", l), ones(d), false)?;
            let ln1_beta =
                store.register(&format!("backbone.layer{}.ln1.beta", l), Tensor::zeros(vec![1, d]), false)?;
            let q = store.register(&format!("backbone.layer{}.attn.q", l), gaussian([d, d], wstd, rng), false)?;
            let k = store.register(&format!("backbone.layer{}.attn.k", l), gaussian([d, d], wstd, rng), false)?;
            let v = store.register(&format!("backbone.layer{}.attn.v", l), gaussian([d, d], wstd, rng), false)?;
            let o = store.register(&format!("backbone.layer{}.attn.o", l), gaussian([d, d], wstd, rng), false)?;
            let ln2_gamma =
                store.register(&format!("backbone.layer{}.ln2.gamma", l), ones(d), false)?;
            let ln2_beta =
                store.register(&format!("backbone.layer{}.ln2.beta", l), Tensor::zeros(vec![1, d]), false)?;
            let ff1 = store.register(
                &format!("backbone.layer{}.ff.w1", l),
                gaussian([cfg.d_ff, d], wstd, rng),
                false,
            )?;
            let ff2 = store.register(
                &format!("backbone.layer{}.ff.w2", l),
                gaussian([d, cfg.d_ff], 1.0 / (cfg.d_ff as f64).sqrt(), rng),
                false,
            )?;
            site_slots.extend_from_slice(&[q, k, v, o, ff1, ff2]);
            layers.push(LayerSlots { ln1_gamma, ln1_beta, q, k, v, o, ln2_gamma, ln2_beta, ff1, ff2 });
        }
        let final_ln_gamma = store.register("backbone.final_ln.gamma", ones(d), false)?;
        let final_ln_beta =
            store.register("backbone.final_ln.beta", Tensor::zeros(vec![1, d]), false)?;
        Ok(Backbone {
            cfg: cfg.clone(),
            embed,
            task_emb,
            layers,
            final_ln_gamma,
            final_ln_beta,
            site_slots,
            pos: positional_table(cfg.max_seq_len, d),
        })
    }

    /// Rebuild derived state after deserialization.
    pub fn restore_derived(&mut self) {
        self.pos = positional_table(self.cfg.max_seq_len, self.cfg.d_model);
    }

    /// W0 slots aligned with [`adapted_matrices`] order.
    pub fn site_slots(&self) -> &[usize] {
        &self.site_slots
    }

    /// Whether a per-task embedding row is added to the input.
    pub fn has_task_embedding(&self) -> bool {
        self.task_emb.is_some()
    }

    /// Make every backbone slot trainable or frozen (used only by the brief
    /// optional pretext phase that fabricates the "pretrained" weights).
    pub fn set_trainable(&self, store: &mut ParamStore, trainable: bool) {
        let mut slots = vec![
            self.embed,
            self.final_ln_gamma,
            self.final_ln_beta,
        ];
        if let Some(t) = self.task_emb {
            slots.push(t);
        }
        for l in &self.layers {
            slots.extend_from_slice(&[
                l.ln1_gamma, l.ln1_beta, l.q, l.k, l.v, l.o, l.ln2_gamma, l.ln2_beta, l.ff1, l.ff2,
            ]);
        }
        for s in slots {
            store.set_trainable(s, trainable);
        }
    }

    fn check_input(&self, feats: &Tensor) -> Result<usize> {
        let (l, d_in) = (feats.rows(), feats.cols());
        if l > self.cfg.max_seq_len || d_in != self.cfg.d_in {
            return Err(Error::shape(
                "backbone_forward",
                format!("input {:?} vs limit {} x {}", feats.shape, self.cfg.max_seq_len, self.cfg.d_in),
            ));
        }
        Ok(l)
    }

    /// Tape-free forward for one example: returns the mean-pooled final
    /// hidden state (1 x d_model). `site_w` supplies the weight actually
    /// used at each adapted site, in [`adapted_matrices`] order — pass the
    /// frozen W0 references for the unadapted configuration.
    pub fn forward_plain(
        &self,
        store: &ParamStore,
        feats: &Tensor,
        task: usize,
        site_w: &[&Tensor],
    ) -> Result<Tensor> {
        let l = self.check_input(feats)?;
        if site_w.len() != self.site_slots.len() {
            return Err(Error::config(format!(
                "{} site weights supplied, {} sites",
                site_w.len(),
                self.site_slots.len()
            )));
        }
        let d = self.cfg.d_model;
        let dh = self.cfg.head_dim();
        let embed = store.get(self.embed);
        // x = feats * embed^T + pos
        let mut x = matmul_nt(&feats.data, &embed.data, l, self.cfg.d_in, d);
        for (i, row) in x.chunks_exact_mut(d).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.pos.at(i, j);
            }
        }
        if let Some(te) = self.task_emb {
            let table = store.get(te);
            if task >= table.rows() {
                return Err(Error::index("backbone_forward", format!("task {} out of range", task)));
            }
            let emb = table.row_slice(task);
            for row in x.chunks_exact_mut(d) {
                for (v, &e) in row.iter_mut().zip(emb) {
                    *v += e;
                }
            }
        }
        let mut site = 0;
        for lay in &self.layers {
            let g1 = store.get(lay.ln1_gamma);
            let b1 = store.get(lay.ln1_beta);
            let (a_in, _, _) = layer_norm_rows(&x, d, &g1.data, &b1.data, LN_EPS);
            let (wq, wk, wv, wo) = (site_w[site], site_w[site + 1], site_w[site + 2], site_w[site + 3]);
            let q = matmul_nt(&a_in, &wq.data, l, d, d);
            let k = matmul_nt(&a_in, &wk.data, l, d, d);
            let v = matmul_nt(&a_in, &wv.data, l, d, d);
            let mut ctx = vec![0.0; l * d];
            let scale = 1.0 / (dh as f64).sqrt();
            for h in 0..self.cfg.n_heads {
                let off = h * dh;
                // scores[i,j] = <q_i, k_j> over this head's columns
                let mut scores = vec![0.0; l * l];
                for i in 0..l {
                    for j in 0..l {
                        let mut s = 0.0;
                        for c in 0..dh {
                            s += q[i * d + off + c] * k[j * d + off + c];
                        }
                        scores[i * l + j] = s * scale;
                    }
                }
                let mut probs = vec![0.0; l * l];
                softmax_rows(&scores, l, 1.0, &mut probs);
                for i in 0..l {
                    for j in 0..l {
                        let p = probs[i * l + j];
                        if p == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            ctx[i * d + off + c] += p * v[j * d + off + c];
                        }
                    }
                }
            }
            let attn_out = matmul_nt(&ctx, &wo.data, l, d, d);
            for (o, &a) in x.iter_mut().zip(&attn_out) {
                *o += a;
            }
            let g2 = store.get(lay.ln2_gamma);
            let b2 = store.get(lay.ln2_beta);
            let (f_in, _, _) = layer_norm_rows(&x, d, &g2.data, &b2.data, LN_EPS);
            let (w1, w2) = (site_w[site + 4], site_w[site + 5]);
            let mut h1 = matmul_nt(&f_in, &w1.data, l, d, self.cfg.d_ff);
            for v in h1.iter_mut() {
                *v = v.max(0.0);
            }
            let f_out = matmul_nt(&h1, &w2.data, l, self.cfg.d_ff, d);
            for (o, &f) in x.iter_mut().zip(&f_out) {
                *o += f;
            }
            site += 6;
        }
        let gf = store.get(self.final_ln_gamma);
        let bf = store.get(self.final_ln_beta);
        let (hfin, _, _) = layer_norm_rows(&x, d, &gf.data, &bf.data, LN_EPS);
        let mut pooled = vec![0.0; d];
        for row in hfin.chunks_exact(d) {
            for (p, &v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        for p in pooled.iter_mut() {
            *p /= l as f64;
        }
        let out = Tensor { shape: vec![1, d], data: pooled };
        crate::tensor::ensure_finite("backbone_forward", &out)?;
        Ok(out)
    }

    /// Tape-recorded forward for one example, mirroring
    /// [`Backbone::forward_plain`] op for op. `site_vals` supplies the tape
    /// node holding each adapted site's weight; frozen scaffolding enters as
    /// constants. Returns the pooled final hidden state node (1 x d_model).
    pub fn forward_tape(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        feats: &Tensor,
        task: usize,
        site_vals: &[Val],
    ) -> Result<Val> {
        let l = self.check_input(feats)?;
        if site_vals.len() != self.site_slots.len() {
            return Err(Error::config(format!(
                "{} site weights supplied, {} sites",
                site_vals.len(),
                self.site_slots.len()
            )));
        }
        let d = self.cfg.d_model;
        let dh = self.cfg.head_dim();
        let feats_v = tape.constant(feats.clone());
        let embed = tape.constant_shared(store.get(self.embed).clone());
        let mut x = tape.matmul_nt(feats_v, embed)?;
        let mut pos_rows = Tensor { shape: vec![l, d], data: Vec::with_capacity(l * d) };
        for i in 0..l {
            pos_rows.data.extend_from_slice(self.pos.row_slice(i));
        }
        let pos_v = tape.constant(pos_rows);
        x = tape.add(x, pos_v)?;
        if let Some(te) = self.task_emb {
            let table = store.get(te);
            if task >= table.rows() {
                return Err(Error::index("backbone_forward", format!("task {} out of range", task)));
            }
            let mut emb_rows = Tensor { shape: vec![l, d], data: Vec::with_capacity(l * d) };
            for _ in 0..l {
                emb_rows.data.extend_from_slice(table.row_slice(task));
            }
            let emb_v = tape.constant(emb_rows);
            x = tape.add(x, emb_v)?;
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut site = 0;
        for lay in &self.layers {
            let g1 = tape.constant_shared(store.get(lay.ln1_gamma).clone());
            let b1 = tape.constant_shared(store.get(lay.ln1_beta).clone());
            let a_in = tape.layer_norm(x, g1, b1, LN_EPS)?;
            let q = tape.matmul_nt(a_in, site_vals[site])?;
            let k = tape.matmul_nt(a_in, site_vals[site + 1])?;
            let v = tape.matmul_nt(a_in, site_vals[site + 2])?;
            let mut head_ctx = Vec::with_capacity(self.cfg.n_heads);
            for h in 0..self.cfg.n_heads {
                let off = h * dh;
                let qh = tape.slice_cols(q, off, dh)?;
                let kh = tape.slice_cols(k, off, dh)?;
                let vh = tape.slice_cols(v, off, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scaled = tape.scale(scores, scale)?;
                let probs = tape.softmax(scaled, 1.0)?;
                head_ctx.push(tape.matmul(probs, vh)?);
            }
            let ctx = tape.concat_cols(&head_ctx)?;
            let attn_out = tape.matmul_nt(ctx, site_vals[site + 3])?;
            x = tape.add(x, attn_out)?;
            let g2 = tape.constant_shared(store.get(lay.ln2_gamma).clone());
            let b2 = tape.constant_shared(store.get(lay.ln2_beta).clone());
            let f_in = tape.layer_norm(x, g2, b2, LN_EPS)?;
            let h1 = tape.matmul_nt(f_in, site_vals[site + 4])?;
            let h1r = tape.relu(h1)?;
            let f_out = tape.matmul_nt(h1r, site_vals[site + 5])?;
            x = tape.add(x, f_out)?;
            site += 6;
        }
        let gf = tape.constant_shared(store.get(self.final_ln_gamma).clone());
        let bf = tape.constant_shared(store.get(self.final_ln_beta).clone());
        let hfin = tape.layer_norm(x, gf, bf, LN_EPS)?;
        tape.mean_rows(hfin)
    }
}

fn ones(n: usize) -> Tensor {
    Tensor { shape: vec![1, n], data: vec![1.0; n] }
}
