//! Coarse filled attention.
//!
//! Masked patches are pre-filled one at a time, in ascending mask-ratio
//! order (ties broken by raster index): the emptier a patch, the more of its
//! own pixels survive in the query, so it is filled while the context is
//! still small and then serves as context for worse patches. Each step
//! attends from the patch's embedding to the growing set `P` of known plus
//! previously filled patches:
//!
//! ```text
//! filled_k = softmax((q_k.Wq)(P.Wk)^T / sqrt(d)) . (P.Wv)
//! ```
//!
//! The attention is single-headed and `P` rows are kept in raster order, so
//! every run of the same ledger reproduces the same sequence bit for bit.

use crate::error::Error;
use crate::ledger::{PatchLedger, PatchState};
use crate::rng;
use crate::tensor::{Graph, Tensor};
use crate::Result;

#[derive(Clone, Debug)]
pub struct CfaWeights {
    pub d: usize,
    /// `[d, d]` each.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl CfaWeights {
    pub fn seeded(seed: u64, tag: &str, d: usize) -> Result<CfaWeights> {
        let mat = |name: &str| -> Result<Tensor> {
            let mut r = rng::stream(seed, &format!("{tag}/{name}"));
            Tensor::new(vec![d, d], rng::xavier_uniform(d, d, &mut r))
        };
        Ok(CfaWeights {
            d,
            wq: mat("wq")?,
            wk: mat("wk")?,
            wv: mat("wv")?,
        })
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}/wq"), &mut self.wq);
        f(format!("{prefix}/wk"), &mut self.wk);
        f(format!("{prefix}/wv"), &mut self.wv);
    }
}

/// One executed fill step, kept for inspection and invariant checks.
#[derive(Clone, Debug)]
pub struct CfaRecord {
    /// Raster index of the patch that was filled.
    pub patch: usize,
    /// Raster indices of the context rows the attention ranged over.
    pub keys: Vec<usize>,
    /// The softmax row (same length as `keys`).
    pub attention: Vec<f64>,
}

/// Masked patches in the order they will be filled: ascending mask ratio,
/// ties by raster index. Errors when there is nothing to attend to.
pub fn fill_order(ledger: &PatchLedger) -> Result<Vec<usize>> {
    if ledger.indices_in_state(PatchState::Known).is_empty() {
        return Err(Error::Ledger {
            detail: "no known patches: nothing can seed the coarse fill".into(),
        });
    }
    let mut order = ledger.indices_in_state(PatchState::Masked);
    order.sort_by(|&a, &b| {
        ledger
            .entry(a)
            .mask_ratio()
            .partial_cmp(&ledger.entry(b).mask_ratio())
            .expect("mask ratios are finite")
            .then(a.cmp(&b))
    });
    Ok(order)
}

/// Fill patch `k` from the current context; the ledger moves it to
/// `CoarseFilled` and its embedding becomes the attention output.
pub fn coarse_fill_step(
    g: &Graph,
    w: &CfaWeights,
    ledger: &mut PatchLedger,
    k: usize,
) -> Result<CfaRecord> {
    let keys = ledger.fill_context();
    if keys.is_empty() {
        return Err(Error::Ledger {
            detail: format!("patch {k}: empty fill context"),
        });
    }
    if ledger.entry(k).state() != PatchState::Masked {
        return Err(Error::Ledger {
            detail: format!(
                "patch {k} is {:?}, expected Masked",
                ledger.entry(k).state()
            ),
        });
    }
    let query = ledger
        .entry(k)
        .embedding()
        .cloned()
        .ok_or_else(|| Error::Ledger {
            detail: format!("patch {k} has no embedding"),
        })?;
    let rows: Vec<Tensor> = keys
        .iter()
        .map(|&i| {
            ledger
                .entry(i)
                .embedding()
                .cloned()
                .ok_or_else(|| Error::Ledger {
                    detail: format!("context patch {i} has no embedding"),
                })
        })
        .collect::<Result<_>>()?;
    let row_refs: Vec<&Tensor> = rows.iter().collect();
    let context = g.concat_rows(&row_refs)?;

    let q = g.matmul(&query, &w.wq)?;
    let keys_proj = g.matmul(&context, &w.wk)?;
    let values = g.matmul(&context, &w.wv)?;
    let scores = g.scale(
        &g.matmul(&q, &g.transpose(&keys_proj)?)?,
        1.0 / (w.d as f64).sqrt(),
    )?;
    let attn = g.softmax_rows(&scores)?;
    let filled = g.matmul(&attn, &values)?;

    let record = CfaRecord {
        patch: k,
        keys,
        attention: attn.data().to_vec(),
    };
    ledger.fill(k, filled)?;
    Ok(record)
}

/// Run every fill in order. Afterwards no patch is `Masked`.
pub fn coarse_fill_all(
    g: &Graph,
    w: &CfaWeights,
    ledger: &mut PatchLedger,
) -> Result<Vec<CfaRecord>> {
    let order = fill_order(ledger)?;
    let mut records = Vec::with_capacity(order.len());
    for k in order {
        records.push(coarse_fill_step(g, w, ledger, k)?);
    }
    Ok(records)
}
