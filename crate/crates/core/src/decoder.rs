//! Structure-texture matching decoder.
//!
//! Each layer reconstructs the coarse-filled patches against the texture
//! references along two routes and blends them with a mixing weight
//! `lambda`:
//!
//! ```text
//! direct:  S_d = (m.Wq)(R.Wk)^T / sqrt(d)
//! bridge:  S_b = [(m.Wqc)(O.Wkc)^T / sqrt(d)] . [(O.Wqr)(R.Wkr)^T / sqrt(d)]
//! output:  lambda.softmax(S_d).(R.Wv_d) + (1-lambda).softmax(S_b).(R.Wv_b)
//! ```
//!
//! The bridge factors the match through the known patches `O`: how much a
//! coarse patch resembles each known patch, times how much that known patch
//! resembles each reference. Known patches are never reconstructed; a
//! decoder layer only passes them through its FFN sublayer.
//!
//! Path selection is arranged so the extremes share code with the ablation
//! switches: `lambda = 1` runs the direct branch alone and is bit-identical
//! to a build with the bridge disabled, and symmetrically for `lambda = 0`.

use crate::encoder::{ffn_forward, FfnKind, LN_EPS};
use crate::error::Error;
use crate::rng;
use crate::tensor::{Graph, Tensor};
use crate::Result;

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    /// Working width of patch representations (`d_D`).
    pub d: usize,
    /// Reference width (`d_E`).
    pub d_e: usize,
    /// Direct path: query `[d, d]`, key `[d_e, d]`, value `[d_e, d]`.
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    /// Bridge path: coarse query `[d, d]`, known key `[d, d]`, known query
    /// `[d, d]`, reference key `[d_e, d]`, reference value `[d_e, d]`.
    pub bqc: Tensor,
    pub bkc: Tensor,
    pub bqr: Tensor,
    pub bkr: Tensor,
    pub bv: Tensor,
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

impl DecoderLayer {
    pub fn seeded(
        seed: u64,
        tag: &str,
        d: usize,
        d_e: usize,
        ffn: FfnKind,
    ) -> Result<DecoderLayer> {
        let mat = |name: &str, rows: usize, cols: usize| -> Result<Tensor> {
            let mut r = rng::stream(seed, &format!("{tag}/{name}"));
            Tensor::new(vec![rows, cols], rng::xavier_uniform(rows, cols, &mut r))
        };
        let hidden = 4 * d;
        Ok(DecoderLayer {
            d,
            d_e,
            dq: mat("dq", d, d)?,
            dk: mat("dk", d_e, d)?,
            dv: mat("dv", d_e, d)?,
            bqc: mat("bqc", d, d)?,
            bkc: mat("bkc", d, d)?,
            bqr: mat("bqr", d, d)?,
            bkr: mat("bkr", d_e, d)?,
            bv: mat("bv", d_e, d)?,
            ffn_w1: mat("ffn_w1", d, hidden)?,
            ffn_b1: Tensor::zeros(vec![hidden]),
            ffn_w2: mat("ffn_w2", hidden, d)?,
            ffn_b2: Tensor::zeros(vec![d]),
            ln1_gain: Tensor::new(vec![d], vec![1.0; d])?,
            ln1_bias: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::new(vec![d], vec![1.0; d])?,
            ln2_bias: Tensor::zeros(vec![d]),
            ffn,
        })
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}/dq"), &mut self.dq);
        f(format!("{prefix}/dk"), &mut self.dk);
        f(format!("{prefix}/dv"), &mut self.dv);
        f(format!("{prefix}/bqc"), &mut self.bqc);
        f(format!("{prefix}/bkc"), &mut self.bkc);
        f(format!("{prefix}/bqr"), &mut self.bqr);
        f(format!("{prefix}/bkr"), &mut self.bkr);
        f(format!("{prefix}/bv"), &mut self.bv);
        f(format!("{prefix}/ffn_w1"), &mut self.ffn_w1);
        f(format!("{prefix}/ffn_b1"), &mut self.ffn_b1);
        f(format!("{prefix}/ffn_w2"), &mut self.ffn_w2);
        f(format!("{prefix}/ffn_b2"), &mut self.ffn_b2);
        f(format!("{prefix}/ln1_gain"), &mut self.ln1_gain);
        f(format!("{prefix}/ln1_bias"), &mut self.ln1_bias);
        f(format!("{prefix}/ln2_gain"), &mut self.ln2_gain);
        f(format!("{prefix}/ln2_bias"), &mut self.ln2_bias);
    }

    fn scale(&self) -> f64 {
        1.0 / (self.d as f64).sqrt()
    }
}

/// Which reconstruction branches a `(lambda, bridge switch)` pair activates.
/// `lambda = 1` deactivates the bridge and `lambda = 0` the direct branch,
/// so the ablation flag and the extreme weights execute identical code.
pub fn active_paths(lambda: f64, bridge_enabled: bool) -> Result<(bool, bool)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config {
            field: "lambda".into(),
            detail: format!("{lambda} outside [0, 1]"),
        });
    }
    let use_direct = lambda > 0.0;
    let use_bridge = bridge_enabled && lambda < 1.0;
    if !use_direct && !use_bridge {
        return Err(Error::Diffusion {
            detail: "no reconstruction path: lambda = 0 with the bridge disabled".into(),
        });
    }
    Ok((use_direct, use_bridge))
}

/// Unnormalized direct scores `(m.Wq)(R.Wk)^T / sqrt(d)`, shape `[n, N_e]`.
pub fn direct_scores(g: &Graph, layer: &DecoderLayer, m: &Tensor, refs: &Tensor) -> Result<Tensor> {
    let q = g.matmul(m, &layer.dq)?;
    let k = g.matmul(refs, &layer.dk)?;
    g.scale(&g.matmul(&q, &g.transpose(&k)?)?, layer.scale())
}

/// Unnormalized bridge scores: the coarse-to-known score matrix composed
/// with the known-to-reference score matrix, shape `[n, N_e]`. Errors when
/// the known set is empty (nothing to route through).
pub fn bridge_scores(
    g: &Graph,
    layer: &DecoderLayer,
    m: &Tensor,
    known: &Tensor,
    refs: &Tensor,
) -> Result<Tensor> {
    if known.shape()[0] == 0 {
        return Err(Error::Diffusion {
            detail: "bridge unavailable: known set is empty".into(),
        });
    }
    let a = {
        let q = g.matmul(m, &layer.bqc)?;
        let k = g.matmul(known, &layer.bkc)?;
        g.scale(&g.matmul(&q, &g.transpose(&k)?)?, layer.scale())?
    };
    let b = {
        let q = g.matmul(known, &layer.bqr)?;
        let k = g.matmul(refs, &layer.bkr)?;
        g.scale(&g.matmul(&q, &g.transpose(&k)?)?, layer.scale())?
    };
    g.matmul(&a, &b)
}

/// Structure-texture matching attention: reconstruct the rows of `m`
/// against the references.
pub fn stma(
    g: &Graph,
    layer: &DecoderLayer,
    m: &Tensor,
    known: &Tensor,
    refs: &Tensor,
    lambda: f64,
    bridge_enabled: bool,
) -> Result<Tensor> {
    let (use_direct, use_bridge) = active_paths(lambda, bridge_enabled)?;
    let direct = if use_direct {
        let attn = g.softmax_rows(&direct_scores(g, layer, m, refs)?)?;
        Some(g.matmul(&attn, &g.matmul(refs, &layer.dv)?)?)
    } else {
        None
    };
    let bridge = if use_bridge {
        let attn = g.softmax_rows(&bridge_scores(g, layer, m, known, refs)?)?;
        Some(g.matmul(&attn, &g.matmul(refs, &layer.bv)?)?)
    } else {
        None
    };
    match (direct, bridge) {
        (Some(d), None) => Ok(d),
        (None, Some(b)) => Ok(b),
        (Some(d), Some(b)) => g.add(&g.scale(&d, lambda)?, &g.scale(&b, 1.0 - lambda)?),
        (None, None) => unreachable!("active_paths guarantees at least one branch"),
    }
}

/// One decoder layer. Coarse rows get the full STMA + FFN treatment with
/// the literal normalize-then-add residuals; known rows only pass through
/// the FFN sublayer (they must not be reconstructed). The bridge reads the
/// known representations as they enter this layer.
pub fn decoder_layer(
    g: &Graph,
    layer: &DecoderLayer,
    coarse: &Tensor,
    known: &Tensor,
    refs: &Tensor,
    lambda: f64,
    bridge_enabled: bool,
) -> Result<(Tensor, Tensor)> {
    let coarse_out = if coarse.shape()[0] > 0 {
        let s = stma(g, layer, coarse, known, refs, lambda, bridge_enabled)?;
        let h = g.add(
            &g.layer_norm(&s, &layer.ln1_gain, &layer.ln1_bias, LN_EPS)?,
            coarse,
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
        g.add(
            &g.layer_norm(&f, &layer.ln2_gain, &layer.ln2_bias, LN_EPS)?,
            &h,
        )?
    } else {
        coarse.clone()
    };
    let known_out = if known.shape()[0] > 0 {
        let f = ffn_forward(
            g,
            known,
            &layer.ffn_w1,
            &layer.ffn_b1,
            &layer.ffn_w2,
            &layer.ffn_b2,
            layer.ffn,
        )?;
        g.add(
            &g.layer_norm(&f, &layer.ln2_gain, &layer.ln2_bias, LN_EPS)?,
            known,
        )?
    } else {
        known.clone()
    };
    Ok((coarse_out, known_out))
}

/// Run the full layer stack; returns final coarse and known representations.
pub fn decode(
    g: &Graph,
    layers: &[DecoderLayer],
    coarse: &Tensor,
    known: &Tensor,
    refs: &Tensor,
    lambda: f64,
    bridge_enabled: bool,
) -> Result<(Tensor, Tensor)> {
    if layers.is_empty() {
        return Err(Error::Shape {
            op: "decode",
            detail: "decoder needs at least one layer".into(),
        });
    }
    let mut c = coarse.clone();
    let mut o = known.clone();
    for layer in layers {
        let (nc, no) = decoder_layer(g, layer, &c, &o, refs, lambda, bridge_enabled)?;
        c = nc;
        o = no;
    }
    Ok((c, o))
}
