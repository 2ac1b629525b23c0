//! Low-rank adaptation of frozen weight matrices by magnitude/direction
//! recomposition.
//!
//! A single adapter updates a frozen matrix `W0` as
//!
//! ```text
//! V  = W0 + (alpha / rank) * B * A
//! W' = m .* V ./ column_norms(V)        (column-wise)
//! ```
//!
//! so the low-rank update steers only the per-column direction of the
//! weight while a separate magnitude vector `m` sets each column's length.
//! The mixture variant combines several low-rank products with convex
//! routing weights inside the same recomposition:
//!
//! ```text
//! V = W0 + (alpha / rank) * sum_i w_i * (B_i * A_i)
//! ```
//!
//! Both forms are provided as pure functions over tensors (used during
//! evaluation and in oracle tests) and as tape compositions (used during
//! training). Columns of `V` with exactly zero norm are rejected as
//! singular rather than epsilon-clamped: at float64 desk scale a zero
//! column signals a real bug upstream, and clamping would hide it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Val};
use crate::tensor::{column_norms, matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Whether the magnitude is one positive float per column (the default) or a
/// single shared scalar per site (a comparison variant; the identity
/// `effective weight == W0` at initialization only holds per-column unless
/// all of W0's columns happen to share one norm).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeKind {
    PerColumn,
    Scalar,
}

impl Default for MagnitudeKind {
    fn default() -> Self {
        MagnitudeKind::PerColumn
    }
}

/// One low-rank adapter: direction update `B*A` plus magnitude `m`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoraAdapter {
    /// r x d_in, small random init.
    pub a: Tensor,
    /// d_out x r, zero init.
    pub b: Tensor,
    /// 1 x d_in (or 1 x 1 for scalar magnitude), positive at init.
    pub m: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

/// A bank of experts sharing one magnitude vector, rank and alpha.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoDEBank {
    /// (A_i, B_i) per expert; all experts share shapes.
    pub experts: Vec<(Tensor, Tensor)>,
    /// Shared magnitude, 1 x d_in (or 1 x 1 for scalar magnitude).
    pub m: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl MoDEBank {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }
}

fn check_rank(rank: usize, d_out: usize, d_in: usize) -> Result<()> {
    if rank < 1 {
        return Err(Error::config("adapter rank must be >= 1"));
    }
    if rank > d_out.min(d_in) {
        return Err(Error::config(format!(
            "rank {} exceeds min dimension {} of a {}x{} site",
            rank,
            d_out.min(d_in),
            d_out,
            d_in
        )));
    }
    Ok(())
}

pub(crate) fn init_magnitude(w0: &Tensor, kind: MagnitudeKind) -> Result<Tensor> {
    let norms = column_norms(&w0.data, w0.rows(), w0.cols());
    if let Some(col) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::SingularColumn { op: "init_adapter".into(), col });
    }
    match kind {
        MagnitudeKind::PerColumn => Ok(Tensor { shape: vec![1, w0.cols()], data: norms }),
        MagnitudeKind::Scalar => {
            let mean = norms.iter().sum::<f64>() / norms.len() as f64;
            Ok(Tensor::scalar(mean))
        }
    }
}

fn sample_a(rank: usize, d_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = 1.0 / (d_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std is positive and finite");
    let data = (0..rank * d_in).map(|_| dist.sample(rng)).collect();
    Tensor { shape: vec![rank, d_in], data }
}

/// Initialize a single adapter for a frozen site: `B` zero so the effective
/// weight starts exactly at `W0`, `A` Gaussian with scale `1/sqrt(d_in)`,
/// `m` the column norms of `W0`.
pub fn init_dora(
    w0: &Tensor,
    rank: usize,
    alpha: f64,
    magnitude: MagnitudeKind,
    rng: &mut impl Rng,
) -> Result<DoraAdapter> {
    let (d_out, d_in) = (w0.rows(), w0.cols());
    check_rank(rank, d_out, d_in)?;
    Ok(DoraAdapter {
        a: sample_a(rank, d_in, rng),
        b: Tensor::zeros(vec![d_out, rank]),
        m: init_magnitude(w0, magnitude)?,
        rank,
        alpha,
    })
}

/// Initialize a bank of `n_experts` adapters sharing one magnitude vector.
pub fn init_bank(
    w0: &Tensor,
    rank: usize,
    alpha: f64,
    n_experts: usize,
    magnitude: MagnitudeKind,
    rng: &mut impl Rng,
) -> Result<MoDEBank> {
    if n_experts < 1 {
        return Err(Error::config("bank needs at least one expert"));
    }
    let (d_out, d_in) = (w0.rows(), w0.cols());
    check_rank(rank, d_out, d_in)?;
    let experts = (0..n_experts)
        .map(|_| (sample_a(rank, d_in, rng), Tensor::zeros(vec![d_out, rank])))
        .collect();
    Ok(MoDEBank { experts, m: init_magnitude(w0, magnitude)?, rank, alpha })
}

/// Magnitude/direction recomposition: `out[i,j] = m[j] * v[i,j] / ||v[:,j]||`.
/// `m` may be 1 x d_in or a 1 x 1 scalar applied to every column.
pub(crate) fn recompose(op: &'static str, v: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = (v.rows(), v.cols());
    let scalar_m = m.shape == [1, 1];
    if !scalar_m && m.shape != [1, d_in] {
        return Err(Error::shape(
            op,
            format!("magnitude {:?} for a {}x{} site", m.shape, d_out, d_in),
        ));
    }
    let norms = column_norms(&v.data, d_out, d_in);
    if let Some(col) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::SingularColumn { op: op.into(), col });
    }
    let mut data = Vec::with_capacity(v.len());
    for row in v.data.chunks_exact(d_in) {
        for (j, &x) in row.iter().enumerate() {
            let mj = if scalar_m { m.data[0] } else { m.data[j] };
            data.push(mj * x / norms[j]);
        }
    }
    Ok(Tensor { shape: v.shape.clone(), data })
}

fn add_scaled_product(v: &mut Tensor, b: &Tensor, a: &Tensor, scale: f64, op: &'static str) -> Result<()> {
    let (d_out, d_in) = (v.rows(), v.cols());
    let r = b.cols();
    if a.shape != [r, d_in] || b.shape != [d_out, r] {
        return Err(Error::shape(
            op,
            format!("A {:?}, B {:?} for a {}x{} site", a.shape, b.shape, d_out, d_in),
        ));
    }
    if scale == 0.0 {
        return Ok(());
    }
    let p = matmul_nn(&b.data, &a.data, d_out, r, d_in);
    for (o, &x) in v.data.iter_mut().zip(&p) {
        *o += scale * x;
    }
    Ok(())
}

/// Effective weight of a single adapter over a frozen matrix (pure).
pub fn dora_effective_weight(w0: &Tensor, ad: &DoraAdapter) -> Result<Tensor> {
    let mut v = w0.clone();
    add_scaled_product(&mut v, &ad.b, &ad.a, ad.alpha / ad.rank as f64, "dora_effective_weight")?;
    recompose("dora_effective_weight", &v, &ad.m)
}

/// Effective weight of a mixed bank under convex routing weights (pure).
pub fn mode_effective_weight(w0: &Tensor, bank: &MoDEBank, w: &[f64]) -> Result<Tensor> {
    if w.len() != bank.experts.len() {
        return Err(Error::config(format!(
            "{} routing weights for {} experts",
            w.len(),
            bank.experts.len()
        )));
    }
    if w.iter().any(|&x| x < 0.0) {
        return Err(Error::domain("mode_effective_weight", "negative routing weight"));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-8 {
        return Err(Error::domain(
            "mode_effective_weight",
            format!("routing weights sum to {}", sum),
        ));
    }
    let scale = bank.alpha / bank.rank as f64;
    let mut v = w0.clone();
    for (wi, (a, b)) in w.iter().zip(&bank.experts) {
        add_scaled_product(&mut v, b, a, scale * wi, "mode_effective_weight")?;
    }
    recompose("mode_effective_weight", &v, &bank.m)
}

/// Shared tail of the tape compositions: given `V` on the tape, divide by
/// column norms and scale by the magnitude leaf (broadcast if scalar).
fn tape_recompose(tape: &mut Tape, v: Val, m: Val) -> Result<Val> {
    let d_in = tape.value(v).cols();
    let norms = tape.column_norm(v)?;
    if let Some(col) = tape.value(norms).data.iter().position(|&n| n == 0.0) {
        return Err(Error::SingularColumn { op: "effective_weight".into(), col });
    }
    let m_row = if tape.value(m).shape == [1, 1] && d_in != 1 {
        tape.broadcast_scalar(m, d_in)?
    } else {
        m
    };
    let ratio = tape.div(m_row, norms)?;
    tape.scale_cols(v, ratio)
}

/// Tape composition of the single-adapter effective weight. `product` is the
/// raw low-rank product `B*A` — either built on-tape from leaves or injected
/// as a precomputed leaf whose gradient is mapped back to `A`/`B` with
/// [`product_grads`] after the backward pass.
pub fn tape_dora_weight(
    tape: &mut Tape,
    w0: Val,
    product: Val,
    m: Val,
    rank: usize,
    alpha: f64,
) -> Result<Val> {
    let scaled = tape.scale(product, alpha / rank as f64)?;
    let v = tape.add(w0, scaled)?;
    tape_recompose(tape, v, m)
}

/// Tape composition of the mixture effective weight. `products[i]` is expert
/// i's raw product `B_i*A_i`; `w` is the 1 x E routing-weight node, so
/// gradients flow into both the products and the router.
pub fn tape_mode_weight(
    tape: &mut Tape,
    w0: Val,
    products: &[Val],
    w: Val,
    m: Val,
    rank: usize,
    alpha: f64,
) -> Result<Val> {
    let mixed = tape.mix(w, products)?;
    let scaled = tape.scale(mixed, alpha / rank as f64)?;
    let v = tape.add(w0, scaled)?;
    tape_recompose(tape, v, m)
}

/// Compute an expert's raw product `P = B*A` once per step; the result is
/// shared across every example tape in the batch as a leaf.
pub fn expert_product(a: &Tensor, b: &Tensor) -> Tensor {
    let (d_out, r, d_in) = (b.rows(), b.cols(), a.cols());
    debug_assert_eq!(a.rows(), r);
    Tensor { shape: vec![d_out, d_in], data: matmul_nn(&b.data, &a.data, d_out, r, d_in) }
}

/// Map the accumulated gradient of a product leaf `P = B*A` back to the
/// factors: `dA = B^T * dP`, `dB = dP * A^T`.
pub fn product_grads(a: &Tensor, b: &Tensor, dp: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (d_out, r, d_in) = (b.rows(), b.cols(), a.cols());
    debug_assert_eq!(dp.len(), d_out * d_in);
    let da = matmul_tn(&b.data, dp, d_out, r, d_in);
    let db = matmul_nt(dp, &a.data, d_out, d_in, r);
    (da, db)
}
