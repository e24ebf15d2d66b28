//! Linear, layer norm, attention and pre-norm transformer blocks built from
//! tape ops. Weights are stored `[d_in, d_out]` so a layer computes `x · W`.

use crate::error::Result;
use crate::peft::{lora_a_name, lora_b_name, LoraConfig};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tape::{Var, MASK_VALUE};
use crate::tensor::Tensor;

use super::params::{Binder, ParamStore};

pub const INIT_STD: f64 = 0.02;
pub const MLP_RATIO: usize = 4;

/// Training flag plus the generator consumed by dropout.
pub struct Mode<'a> {
    pub training: bool,
    pub rng: Option<&'a mut RngState>,
}

impl<'a> Mode<'a> {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut RngState) -> Self {
        Self {
            training: true,
            rng: Some(rng),
        }
    }
}

pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
    rng: &mut RngState,
) -> Result<()> {
    store.insert(format!("{name}.w"), Tensor::randn(&[d_in, d_out], std, rng), true)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]), false)
}

pub fn init_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<()> {
    store.insert(format!("{name}.g"), Tensor::ones(&[d]), false)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]), false)
}

/// `x · W + b`, plus `(α/r) · dropout(x) · Aᵀ · Bᵀ` when the layer carries an
/// adapter and `lora` is set.
pub fn linear<'t, T: Scalar>(
    b: &Binder<'t, '_, T>,
    name: &str,
    x: Var<'t, T>,
    lora: Option<&LoraConfig>,
    mode: &mut Mode,
) -> Result<Var<'t, T>> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    let y = x.matmul(w)?.add(bias)?;
    let a_name = lora_a_name(name);
    match lora {
        Some(cfg) if b.has(&a_name) => {
            let a = b.get(&a_name)?;
            let bb = b.get(&lora_b_name(name))?;
            let xd = match mode.rng.as_deref_mut() {
                Some(rng) => x.dropout(cfg.dropout, mode.training, rng)?,
                None => x,
            };
            let delta = xd.matmul(a.transpose()?)?.matmul(bb.transpose()?)?;
            y.add(delta.scale(T::lit(cfg.scaling()))?)
        }
        _ => Ok(y),
    }
}

pub fn norm<'t, T: Scalar>(b: &Binder<'t, '_, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let g = b.get(&format!("{name}.g"))?;
    let beta = b.get(&format!("{name}.b"))?;
    x.layer_norm()?.mul(g)?.add(beta)
}

/// Additive mask with `MASK_VALUE` above the diagonal.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = T::lit(MASK_VALUE);
        }
    }
    m
}

#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub d: usize,
    pub heads: usize,
    pub causal: bool,
}

/// Names of the linear layers inside block `prefix`.
pub fn block_linears(prefix: &str) -> Vec<String> {
    ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect()
}

pub fn init_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    depth: usize,
    rng: &mut RngState,
) -> Result<()> {
    let out_std = INIT_STD / ((2 * depth.max(1)) as f64).sqrt();
    init_norm(store, &format!("{prefix}.ln1"), d)?;
    for p in ["q", "k", "v"] {
        init_linear(store, &format!("{prefix}.attn.{p}"), d, d, INIT_STD, rng)?;
    }
    init_linear(store, &format!("{prefix}.attn.o"), d, d, out_std, rng)?;
    init_norm(store, &format!("{prefix}.ln2"), d)?;
    init_linear(store, &format!("{prefix}.mlp.fc1"), d, MLP_RATIO * d, INIT_STD, rng)?;
    init_linear(store, &format!("{prefix}.mlp.fc2"), MLP_RATIO * d, d, out_std, rng)
}

/// Multi-head scaled dot-product attention over the rows of `x`.
pub fn attention<'t, T: Scalar>(
    b: &Binder<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    shape: BlockShape,
    lora: Option<&LoraConfig>,
    mode: &mut Mode,
) -> Result<Var<'t, T>> {
    let n = x.shape()[0];
    let q = linear(b, &format!("{prefix}.q"), x, lora, mode)?;
    let k = linear(b, &format!("{prefix}.k"), x, lora, mode)?;
    let v = linear(b, &format!("{prefix}.v"), x, lora, mode)?;
    let dh = shape.d / shape.heads;
    let inv = T::lit(1.0 / (dh as f64).sqrt());
    let mask = shape.causal.then(|| b.tape().constant(causal_mask(n)));
    let mut outs = Vec::with_capacity(shape.heads);
    for h in 0..shape.heads {
        let qh = q.slice(1, h * dh, dh)?;
        let kh = k.slice(1, h * dh, dh)?;
        let vh = v.slice(1, h * dh, dh)?;
        let mut s = qh.matmul(kh.transpose()?)?.scale(inv)?;
        if let Some(m) = mask {
            s = s.add(m)?;
        }
        outs.push(s.softmax()?.matmul(vh)?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        Var::concat(&outs, 1)?
    };
    linear(b, &format!("{prefix}.o"), merged, lora, mode)
}

/// Pre-norm block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub fn block<'t, T: Scalar>(
    b: &Binder<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    shape: BlockShape,
    lora: Option<&LoraConfig>,
    mode: &mut Mode,
) -> Result<Var<'t, T>> {
    let h = norm(b, &format!("{prefix}.ln1"), x)?;
    let x = x.add(attention(b, &format!("{prefix}.attn"), h, shape, lora, mode)?)?;
    let h = norm(b, &format!("{prefix}.ln2"), x)?;
    let h = linear(b, &format!("{prefix}.mlp.fc1"), h, lora, mode)?.gelu()?;
    let h = linear(b, &format!("{prefix}.mlp.fc2"), h, lora, mode)?;
    x.add(h)
}
