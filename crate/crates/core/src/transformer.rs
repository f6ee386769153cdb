//! Pre-norm transformer block shared by the vision encoder trunk and
//! the decoder language model. Rotary position encoding is applied to
//! query and key projections only, inside every block.

use crate::numerics::{ops, Result as NumResult, RngStream, Scalar, Tensor};
use crate::rope::RopePlan;

/// Additive attention mask: 0 everywhere for bidirectional attention.
pub fn open_mask<T: Scalar>(len: usize) -> Tensor<T> {
    Tensor::zeros(vec![len, len])
}

/// Additive causal mask: 0 on and below the diagonal, a large negative
/// value above it. The value underflows exp() to exactly zero weight,
/// so suffix tokens cannot influence earlier positions even at the
/// last bit.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let neg = T::from_f64(-1e9);
    let mut data = vec![T::ZERO; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = neg;
        }
    }
    Tensor::from_op(vec![len, len], data)
}

#[derive(Clone)]
pub struct TransformerBlock<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub fc1: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> TransformerBlock<T> {
    pub fn init(d_model: usize, d_ff: usize, rng: &mut RngStream) -> Self {
        let std = 0.02;
        Self {
            wq: Tensor::randn(vec![d_model, d_model], std, rng),
            wk: Tensor::randn(vec![d_model, d_model], std, rng),
            wv: Tensor::randn(vec![d_model, d_model], std, rng),
            wo: Tensor::randn(vec![d_model, d_model], std, rng),
            ln1_g: Tensor::filled(vec![d_model], T::ONE),
            ln1_b: Tensor::zeros(vec![d_model]),
            ln2_g: Tensor::filled(vec![d_model], T::ONE),
            ln2_b: Tensor::zeros(vec![d_model]),
            fc1: Tensor::randn(vec![d_model, d_ff], std, rng),
            fc1_b: Tensor::zeros(vec![d_ff]),
            fc2: Tensor::randn(vec![d_ff, d_model], std, rng),
            fc2_b: Tensor::zeros(vec![d_model]),
        }
    }

    /// x -> x + attn(ln(x)) -> (+ mlp(ln(.))). `mask` is the additive
    /// attention mask; `record_attn`, when given, receives each head's
    /// softmax probabilities in head order.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        rope_plan: &RopePlan<T>,
        n_heads: usize,
        mask: &Tensor<T>,
        mut record_attn: Option<&mut Vec<Tensor<T>>>,
    ) -> NumResult<Tensor<T>> {
        let normed = ops::layer_norm(x, &self.ln1_g, &self.ln1_b, LN_EPS)?;
        let q = ops::matmul(&normed, &self.wq)?;
        let k = ops::matmul(&normed, &self.wk)?;
        let v = ops::matmul(&normed, &self.wv)?;
        let ctx = ops::multi_head_attention(
            &q,
            &k,
            &v,
            rope_plan.table(),
            n_heads,
            mask,
            record_attn.as_deref_mut(),
        )?;
        let attn_out = ops::matmul(&ctx, &self.wo)?;
        let x = ops::add(x, &attn_out)?;

        let normed2 = ops::layer_norm(&x, &self.ln2_g, &self.ln2_b, LN_EPS)?;
        let hidden = ops::gelu(&ops::add_bias(&ops::matmul(&normed2, &self.fc1)?, &self.fc1_b)?);
        let mlp_out = ops::add_bias(&ops::matmul(&hidden, &self.fc2)?, &self.fc2_b)?;
        ops::add(&x, &mlp_out)
    }

    pub fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.wq"), &self.wq);
        f(&format!("{prefix}.wk"), &self.wk);
        f(&format!("{prefix}.wv"), &self.wv);
        f(&format!("{prefix}.wo"), &self.wo);
        f(&format!("{prefix}.ln1.g"), &self.ln1_g);
        f(&format!("{prefix}.ln1.b"), &self.ln1_b);
        f(&format!("{prefix}.ln2.g"), &self.ln2_g);
        f(&format!("{prefix}.ln2.b"), &self.ln2_b);
        f(&format!("{prefix}.fc1.w"), &self.fc1);
        f(&format!("{prefix}.fc1.b"), &self.fc1_b);
        f(&format!("{prefix}.fc2.w"), &self.fc2);
        f(&format!("{prefix}.fc2.b"), &self.fc2_b);
    }

    pub fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.wk"), &mut self.wk);
        f(&format!("{prefix}.wv"), &mut self.wv);
        f(&format!("{prefix}.wo"), &mut self.wo);
        f(&format!("{prefix}.ln1.g"), &mut self.ln1_g);
        f(&format!("{prefix}.ln1.b"), &mut self.ln1_b);
        f(&format!("{prefix}.ln2.g"), &mut self.ln2_g);
        f(&format!("{prefix}.ln2.b"), &mut self.ln2_b);
        f(&format!("{prefix}.fc1.w"), &mut self.fc1);
        f(&format!("{prefix}.fc1.b"), &mut self.fc1_b);
        f(&format!("{prefix}.fc2.w"), &mut self.fc2);
        f(&format!("{prefix}.fc2.b"), &mut self.fc2_b);
    }
}
