//! Texture encoder: multi-head self-attention layers over the projected
//! feature cells, producing the global reference set.
//!
//! Layer arithmetic follows the governing formulas literally: the sublayer
//! output is layer-normalized *before* the residual add,
//!
//! ```text
//! H  = LN(MSA(E)) + E
//! E' = LN(FFN(H)) + H
//! ```
//!
//! which differs from both the pre-norm and post-norm conventions found in
//! common transformer stacks. Rows are vectors throughout: a projection is
//! applied as `x . W`.

use crate::error::Error;
use crate::rng;
use crate::tensor::{Graph, Tensor};
use crate::Result;

/// Variance floor shared by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

/// FFN nonlinearity. The choice is not pinned down by the architecture
/// description, so it stays configurable; relu is the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnKind {
    Relu,
    Gelu,
}

impl FfnKind {
    pub fn apply(self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        match self {
            FfnKind::Relu => g.relu(x),
            FfnKind::Gelu => g.gelu(x),
        }
    }
}

/// Two-layer feed-forward block: `act(x.W1 + b1).W2 + b2`.
pub fn ffn_forward(
    g: &Graph,
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
    kind: FfnKind,
) -> Result<Tensor> {
    let hidden = g.add_bias(&g.matmul(x, w1)?, b1)?;
    let hidden = kind.apply(g, &hidden)?;
    g.add_bias(&g.matmul(&hidden, w2)?, b2)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub heads: usize,
    pub d_model: usize,
    /// Per-head `[d_model, d_head]` projections.
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    /// Head fuse `[heads*d_head, d_model]`.
    pub fuse: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ffn: FfnKind,
}

impl EncoderLayer {
    /// Xavier-initialized layer; `d_model` must split evenly across heads.
    pub fn seeded(
        seed: u64,
        tag: &str,
        d_model: usize,
        heads: usize,
        ffn: FfnKind,
    ) -> Result<EncoderLayer> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config {
                field: "heads".into(),
                detail: format!("d_e {d_model} is not a multiple of head count {heads}"),
            });
        }
        let d_head = d_model / heads;
        let mat = |name: &str, rows: usize, cols: usize| -> Result<Tensor> {
            let mut r = rng::stream(seed, &format!("{tag}/{name}"));
            Tensor::new(vec![rows, cols], rng::xavier_uniform(rows, cols, &mut r))
        };
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for j in 0..heads {
            wq.push(mat(&format!("wq{j}"), d_model, d_head)?);
            wk.push(mat(&format!("wk{j}"), d_model, d_head)?);
            wv.push(mat(&format!("wv{j}"), d_model, d_head)?);
        }
        let hidden = 4 * d_model;
        Ok(EncoderLayer {
            heads,
            d_model,
            wq,
            wk,
            wv,
            fuse: mat("fuse", d_model, d_model)?,
            ffn_w1: mat("ffn_w1", d_model, hidden)?,
            ffn_b1: Tensor::zeros(vec![hidden]),
            ffn_w2: mat("ffn_w2", hidden, d_model)?,
            ffn_b2: Tensor::zeros(vec![d_model]),
            ln1_gain: Tensor::new(vec![d_model], vec![1.0; d_model])?,
            ln1_bias: Tensor::zeros(vec![d_model]),
            ln2_gain: Tensor::new(vec![d_model], vec![1.0; d_model])?,
            ln2_bias: Tensor::zeros(vec![d_model]),
            ffn,
        })
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        for j in 0..self.heads {
            f(format!("{prefix}/wq{j}"), &mut self.wq[j]);
            f(format!("{prefix}/wk{j}"), &mut self.wk[j]);
            f(format!("{prefix}/wv{j}"), &mut self.wv[j]);
        }
        f(format!("{prefix}/fuse"), &mut self.fuse);
        f(format!("{prefix}/ffn_w1"), &mut self.ffn_w1);
        f(format!("{prefix}/ffn_b1"), &mut self.ffn_b1);
        f(format!("{prefix}/ffn_w2"), &mut self.ffn_w2);
        f(format!("{prefix}/ffn_b2"), &mut self.ffn_b2);
        f(format!("{prefix}/ln1_gain"), &mut self.ln1_gain);
        f(format!("{prefix}/ln1_bias"), &mut self.ln1_bias);
        f(format!("{prefix}/ln2_gain"), &mut self.ln2_gain);
        f(format!("{prefix}/ln2_bias"), &mut self.ln2_bias);
    }
}

/// Multi-head self-attention plus the per-head attention matrices (rows sum
/// to 1; kept for inspection dumps).
pub fn msa_with_attn(g: &Graph, layer: &EncoderLayer, e: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    if e.shape().len() != 2 || e.shape()[1] != layer.d_model {
        return Err(Error::Shape {
            op: "msa",
            detail: format!(
                "input {:?} does not match d_model {}",
                e.shape(),
                layer.d_model
            ),
        });
    }
    let d_head = layer.d_model / layer.heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut head_outs = Vec::with_capacity(layer.heads);
    let mut attns = Vec::with_capacity(layer.heads);
    for j in 0..layer.heads {
        let q = g.matmul(e, &layer.wq[j])?;
        let k = g.matmul(e, &layer.wk[j])?;
        let v = g.matmul(e, &layer.wv[j])?;
        let scores = g.scale(&g.matmul(&q, &g.transpose(&k)?)?, scale)?;
        let attn = g.softmax_rows(&scores)?;
        head_outs.push(g.matmul(&attn, &v)?);
        attns.push(attn);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    let joined = g.concat_cols(&refs)?;
    Ok((g.matmul(&joined, &layer.fuse)?, attns))
}

pub fn msa(g: &Graph, layer: &EncoderLayer, e: &Tensor) -> Result<Tensor> {
    msa_with_attn(g, layer, e).map(|(t, _)| t)
}

/// One encoder layer: `H = LN(MSA(E)) + E; E' = LN(FFN(H)) + H`. Also
/// returns the per-head attention rows for inspection dumps.
pub fn encoder_layer_with_attn(
    g: &Graph,
    layer: &EncoderLayer,
    e: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (attn_out, attns) = msa_with_attn(g, layer, e)?;
    let h = g.add(
        &g.layer_norm(&attn_out, &layer.ln1_gain, &layer.ln1_bias, LN_EPS)?,
        e,
    )?;
    let f = ffn_forward(
        g,
        &h,
        &layer.ffn_w1,
        &layer.ffn_b1,
        &layer.ffn_w2,
        &layer.ffn_b2,
        layer.ffn,
    )?;
    Ok((
        g.add(
            &g.layer_norm(&f, &layer.ln2_gain, &layer.ln2_bias, LN_EPS)?,
            &h,
        )?,
        attns,
    ))
}

pub fn encoder_layer(g: &Graph, layer: &EncoderLayer, e: &Tensor) -> Result<Tensor> {
    encoder_layer_with_attn(g, layer, e).map(|(t, _)| t)
}

/// Sequential application of every layer. The references fed to the decoder
/// are the rows of the result.
pub fn encode(g: &Graph, layers: &[EncoderLayer], e: &Tensor) -> Result<Tensor> {
    encode_with_attn(g, layers, e).map(|(t, _)| t)
}

/// `encode`, additionally collecting each layer's per-head attention maps.
pub fn encode_with_attn(
    g: &Graph,
    layers: &[EncoderLayer],
    e: &Tensor,
) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
    if layers.is_empty() {
        return Err(Error::Shape {
            op: "encode",
            detail: "encoder needs at least one layer".into(),
        });
    }
    let mut cur = e.clone();
    let mut records = Vec::with_capacity(layers.len());
    for layer in layers {
        let (next, attns) = encoder_layer_with_attn(g, layer, &cur)?;
        cur = next;
        records.push(attns);
    }
    Ok((cur, records))
}
