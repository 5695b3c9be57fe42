//! Incremental maintenance of the selection-stage attention maps.
//!
//! Patch selection repeatedly asks "how strongly does each remaining
//! candidate attend to the references, directly and through the known
//! set?" Rebuilding those score maps from scratch after every selection
//! costs a fresh candidates-by-known, known-by-reference, and
//! candidates-by-reference pass each round. Only a sliver actually
//! changes: promoting candidate `z` to the known set deletes its rows and
//! adds one known column/row. This module stores the three unnormalized
//! scaled score maps and edits them in place:
//!
//! * `CK` — candidate-to-known scores, `[n_c, n_k]`
//! * `KR` — known-to-reference scores, `[n_k, N_e]`
//! * `CR` — candidate-to-reference (direct) scores, `[n_c, N_e]`
//!
//! `promote(z)` removes `z`'s row from `CK` and `CR`, appends a column to
//! `CK` (survivors scoring the new known) and a row to `KR` (the new known
//! scoring the references) — `(n_c - 1) + N_e` new entries, against the
//! full-rebuild bill the cache also tracks for its cost report. Storage is
//! physically compacted on every promote; no tombstones, no stale entries.
//!
//! All arithmetic here is detached scalar math over final-layer
//! representations; gradients never flow through the cache.

use std::fmt;

use crate::decoder::DecoderLayer;
use crate::error::Error;
use crate::Result;

/// Detached copies of the projection matrices the selection maps need.
#[derive(Clone, Debug)]
pub struct CacheProjections {
    pub d: usize,
    pub d_e: usize,
    /// Direct: candidate query `[d, d]`, reference key `[d_e, d]`.
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    /// Bridge: candidate query `[d, d]`, known key `[d, d]`, known query
    /// `[d, d]`, reference key `[d_e, d]`.
    pub bqc: Vec<f64>,
    pub bkc: Vec<f64>,
    pub bqr: Vec<f64>,
    pub bkr: Vec<f64>,
}

impl CacheProjections {
    /// Capture the selection projections of the decoder layer whose outputs
    /// feed patch selection (the final one).
    pub fn from_layer(layer: &DecoderLayer) -> CacheProjections {
        CacheProjections {
            d: layer.d,
            d_e: layer.d_e,
            dq: layer.dq.data().to_vec(),
            dk: layer.dk.data().to_vec(),
            bqc: layer.bqc.data().to_vec(),
            bkc: layer.bkc.data().to_vec(),
            bqr: layer.bqr.data().to_vec(),
            bkr: layer.bkr.data().to_vec(),
        }
    }
}

/// `row . mat` for a `[d_in, d_out]` row-major matrix.
fn project(row: &[f64], mat: &[f64], d_out: usize) -> Vec<f64> {
    let d_in = row.len();
    debug_assert_eq!(mat.len(), d_in * d_out, "projection extent mismatch");
    let mut out = vec![0.0; d_out];
    for (i, &x) in row.iter().enumerate() {
        let base = i * d_out;
        for j in 0..d_out {
            out[j] += x * mat[base + j];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Entry counts for the incremental path and the rebuild-every-round
/// counterfactual.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub incremental: u64,
    pub full: u64,
}

impl CostReport {
    pub fn ratio(&self) -> f64 {
        self.incremental as f64 / self.full as f64
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "incremental={} full={} ratio={:.6}",
            self.incremental,
            self.full,
            self.ratio()
        )
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    proj: CacheProjections,
    n_refs: usize,
    inv_sqrt_d: f64,
    /// Live candidate patch indices, row order of `ck`/`cr`.
    cand_ids: Vec<usize>,
    /// Known patch indices, column order of `ck` and row order of `kr`.
    known_ids: Vec<usize>,
    ck: Vec<f64>,
    kr: Vec<f64>,
    cr: Vec<f64>,
    /// Cached bridge queries `rep . bqc` per live candidate so a promote can
    /// fill the new `CK` column without touching raw representations.
    cand_bridge_q: Vec<Vec<f64>>,
    /// Projected reference keys `ref . bkr`, fixed for the cache lifetime.
    ref_keys: Vec<Vec<f64>>,
    ops: u64,
    full_ops: u64,
    promotes: u64,
}

impl AttentionCache {
    /// Build all three maps from scratch. `cands`/`known` carry the
    /// final-layer representation of each patch (width `d`), `refs` the
    /// texture references (width `d_e`).
    pub fn build(
        proj: CacheProjections,
        cand_ids: &[usize],
        cands: &[Vec<f64>],
        known_ids: &[usize],
        known: &[Vec<f64>],
        refs: &[Vec<f64>],
    ) -> Result<AttentionCache> {
        if cand_ids.len() != cands.len() || known_ids.len() != known.len() {
            return Err(Error::Cache {
                detail: format!(
                    "id/representation count mismatch: {} ids / {} candidates, {} ids / {} known",
                    cand_ids.len(),
                    cands.len(),
                    known_ids.len(),
                    known.len()
                ),
            });
        }
        for rep in cands.iter().chain(known) {
            if rep.len() != proj.d {
                return Err(Error::Cache {
                    detail: format!("representation width {} != d {}", rep.len(), proj.d),
                });
            }
        }
        for r in refs {
            if r.len() != proj.d_e {
                return Err(Error::Cache {
                    detail: format!("reference width {} != d_e {}", r.len(), proj.d_e),
                });
            }
        }
        let d = proj.d;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let n_c = cands.len();
        let n_k = known.len();
        let n_e = refs.len();

        let cand_bridge_q: Vec<Vec<f64>> = cands.iter().map(|c| project(c, &proj.bqc, d)).collect();
        let known_keys: Vec<Vec<f64>> = known.iter().map(|o| project(o, &proj.bkc, d)).collect();
        let known_q: Vec<Vec<f64>> = known.iter().map(|o| project(o, &proj.bqr, d)).collect();
        let ref_keys: Vec<Vec<f64>> = refs.iter().map(|r| project(r, &proj.bkr, d)).collect();
        let cand_direct_q: Vec<Vec<f64>> = cands.iter().map(|c| project(c, &proj.dq, d)).collect();
        let ref_direct_keys: Vec<Vec<f64>> = refs.iter().map(|r| project(r, &proj.dk, d)).collect();

        let mut ck = vec![0.0; n_c * n_k];
        for i in 0..n_c {
            for j in 0..n_k {
                ck[i * n_k + j] = dot(&cand_bridge_q[i], &known_keys[j]) * inv_sqrt_d;
            }
        }
        let mut kr = vec![0.0; n_k * n_e];
        for j in 0..n_k {
            for e in 0..n_e {
                kr[j * n_e + e] = dot(&known_q[j], &ref_keys[e]) * inv_sqrt_d;
            }
        }
        let mut cr = vec![0.0; n_c * n_e];
        for i in 0..n_c {
            for e in 0..n_e {
                cr[i * n_e + e] = dot(&cand_direct_q[i], &ref_direct_keys[e]) * inv_sqrt_d;
            }
        }
        let build_cost = Self::build_cost(n_c, n_k, n_e);
        Ok(AttentionCache {
            proj,
            n_refs: n_e,
            inv_sqrt_d,
            cand_ids: cand_ids.to_vec(),
            known_ids: known_ids.to_vec(),
            ck,
            kr,
            cr,
            cand_bridge_q,
            ref_keys,
            ops: build_cost,
            full_ops: build_cost,
            promotes: 0,
        })
    }

    /// Entries a from-scratch build materializes for the given state.
    fn build_cost(n_c: usize, n_k: usize, n_e: usize) -> u64 {
        (n_c * n_k + n_k * n_e + n_c * n_e) as u64
    }

    /// Move candidate `patch` into the known set, carrying its fresh
    /// reconstruction `new_rep`. Rows vanish, one column and one row appear.
    pub fn promote(&mut self, patch: usize, new_rep: &[f64]) -> Result<()> {
        let pos = self
            .cand_ids
            .iter()
            .position(|&id| id == patch)
            .ok_or(Error::Cache {
                detail: format!("promote of patch {patch} which is not a live candidate"),
            })?;
        if new_rep.len() != self.proj.d {
            return Err(Error::Cache {
                detail: format!("promoted width {} != d {}", new_rep.len(), self.proj.d),
            });
        }
        let n_c = self.cand_ids.len();
        let n_k = self.known_ids.len();
        let n_e = self.n_refs;
        let d = self.proj.d;

        self.cand_ids.remove(pos);
        self.cand_bridge_q.remove(pos);
        // Drop the promoted candidate's CK and CR rows, compacting storage.
        self.ck.drain(pos * n_k..(pos + 1) * n_k);
        self.cr.drain(pos * n_e..(pos + 1) * n_e);

        // Surviving candidates score the new known patch: one CK column.
        let new_key = project(new_rep, &self.proj.bkc, d);
        let survivors = n_c - 1;
        let mut ck = Vec::with_capacity(survivors * (n_k + 1));
        for i in 0..survivors {
            ck.extend_from_slice(&self.ck[i * n_k..(i + 1) * n_k]);
            ck.push(dot(&self.cand_bridge_q[i], &new_key) * self.inv_sqrt_d);
        }
        self.ck = ck;

        // The new known patch scores every reference: one KR row.
        let new_q = project(new_rep, &self.proj.bqr, d);
        for key in &self.ref_keys {
            self.kr.push(dot(&new_q, key) * self.inv_sqrt_d);
        }
        self.known_ids.push(patch);

        self.ops += (survivors + n_e) as u64;
        self.full_ops += Self::build_cost(survivors, n_k + 1, n_e);
        self.promotes += 1;
        Ok(())
    }

    pub fn cost_report(&self) -> CostReport {
        CostReport {
            incremental: self.ops,
            full: self.full_ops,
        }
    }

    pub fn promotes(&self) -> u64 {
        self.promotes
    }

    pub fn candidate_ids(&self) -> &[usize] {
        &self.cand_ids
    }

    pub fn known_ids(&self) -> &[usize] {
        &self.known_ids
    }

    pub fn ref_count(&self) -> usize {
        self.n_refs
    }

    /// Candidate-to-known map, row-major `[candidates, known]`.
    pub fn ck(&self) -> &[f64] {
        &self.ck
    }

    /// Known-to-reference map, row-major `[known, refs]`.
    pub fn kr(&self) -> &[f64] {
        &self.kr
    }

    /// Direct candidate-to-reference map, row-major `[candidates, refs]`.
    pub fn cr(&self) -> &[f64] {
        &self.cr
    }

    /// Composed bridge scores `CK . KR` for one live candidate row.
    pub fn bridge_row(&self, row: usize) -> Vec<f64> {
        let n_k = self.known_ids.len();
        let n_e = self.n_refs;
        let mut out = vec![0.0; n_e];
        for j in 0..n_k {
            let s = self.ck[row * n_k + j];
            for (o, k) in out.iter_mut().zip(&self.kr[j * n_e..(j + 1) * n_e]) {
                *o += s * k;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{bridge_scores, direct_scores};
    use crate::encoder::FfnKind;
    use crate::tensor::{Graph, Tensor};
    use rand::Rng;

    fn reps(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = crate::rng::stream(seed, "test/cache");
        (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect()
    }

    fn projections(seed: u64, d: usize) -> CacheProjections {
        let layer = DecoderLayer::seeded(seed, "test/cache-layer", d, d, FfnKind::Relu).unwrap();
        CacheProjections::from_layer(&layer)
    }

    fn flat(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn build_matches_decoder_score_tensors() {
        let d = 6;
        let layer = DecoderLayer::seeded(77, "test/cache-layer", d, d, FfnKind::Relu).unwrap();
        let proj = CacheProjections::from_layer(&layer);
        let cands = reps(1, 4, d);
        let known = reps(2, 3, d);
        let refs = reps(3, 5, d);
        let cache =
            AttentionCache::build(proj, &[0, 1, 2, 3], &cands, &[10, 11, 12], &known, &refs)
                .unwrap();

        let g = Graph::new();
        let m = flat(&cands);
        let o = flat(&known);
        let r = flat(&refs);
        let cr = direct_scores(&g, &layer, &m, &r).unwrap();
        for (a, b) in cache.cr().iter().zip(cr.data()) {
            assert!(
                (a - b).abs() < 1e-12,
                "CR disagrees with the decoder computation"
            );
        }
        // CK . KR must equal the composed bridge scores.
        let sb = bridge_scores(&g, &layer, &m, &o, &r).unwrap();
        for i in 0..4 {
            let row = cache.bridge_row(i);
            for (e, v) in row.iter().enumerate() {
                assert!(
                    (v - sb.data()[i * 5 + e]).abs() < 1e-12,
                    "bridge composition disagrees at ({i},{e})"
                );
            }
        }
    }

    #[test]
    fn zero_candidates_builds_reference_map_only() {
        let proj = projections(5, 4);
        let known = reps(6, 2, 4);
        let refs = reps(7, 3, 4);
        let cache = AttentionCache::build(proj, &[], &[], &[0, 1], &known, &refs).unwrap();
        assert!(cache.ck().is_empty());
        assert!(cache.cr().is_empty());
        assert_eq!(cache.kr().len(), 2 * 3);
        let report = cache.cost_report();
        assert_eq!(
            report.incremental, report.full,
            "zero promotes means one build on each side"
        );
        assert_eq!(report.incremental, 6);
    }

    #[test]
    fn promote_matches_rebuild_from_updated_sets() {
        let d = 5;
        let proj = projections(8, d);
        let cand_ids = [3usize, 7, 9, 12];
        let cands = reps(9, 4, d);
        let known_ids = [0usize, 1];
        let known = reps(10, 2, d);
        let refs = reps(11, 6, d);
        let mut cache =
            AttentionCache::build(proj.clone(), &cand_ids, &cands, &known_ids, &known, &refs)
                .unwrap();

        // Promote the middle candidate with a brand-new representation.
        let fresh = reps(12, 1, d).remove(0);
        cache.promote(9, &fresh).unwrap();

        let mut new_known = known.to_vec();
        new_known.push(fresh.clone());
        let rebuilt = AttentionCache::build(
            proj,
            &[3, 7, 12],
            &[cands[0].clone(), cands[1].clone(), cands[3].clone()],
            &[0, 1, 9],
            &new_known,
            &refs,
        )
        .unwrap();
        assert_eq!(cache.candidate_ids(), rebuilt.candidate_ids());
        assert_eq!(cache.known_ids(), rebuilt.known_ids());
        for (a, b) in cache.ck().iter().zip(rebuilt.ck()) {
            assert!((a - b).abs() < 1e-12, "CK drifted from the rebuild oracle");
        }
        for (a, b) in cache.kr().iter().zip(rebuilt.kr()) {
            assert!((a - b).abs() < 1e-12, "KR drifted from the rebuild oracle");
        }
        for (a, b) in cache.cr().iter().zip(rebuilt.cr()) {
            assert!((a - b).abs() < 1e-12, "CR drifted from the rebuild oracle");
        }
    }

    #[test]
    fn promote_chain_stays_consistent() {
        let d = 4;
        let proj = projections(13, d);
        let ids: Vec<usize> = (0..6).collect();
        let cands = reps(14, 6, d);
        let known = reps(15, 1, d);
        let refs = reps(16, 3, d);
        let mut cache =
            AttentionCache::build(proj.clone(), &ids, &cands, &[99], &known, &refs).unwrap();
        let mut live: Vec<usize> = ids.clone();
        let mut reps_by_id: Vec<(usize, Vec<f64>)> =
            ids.iter().cloned().zip(cands.iter().cloned()).collect();
        let mut known_ids = vec![99usize];
        let mut known_reps = known.clone();
        // Promote in a scrambled order, checking against a rebuild each time.
        for (step, &z) in [4usize, 0, 5, 2, 1, 3].iter().enumerate() {
            let fresh = reps(20 + step as u64, 1, d).remove(0);
            cache.promote(z, &fresh).unwrap();
            live.retain(|&id| id != z);
            reps_by_id.retain(|(id, _)| *id != z);
            known_ids.push(z);
            known_reps.push(fresh);
            let live_reps: Vec<Vec<f64>> = reps_by_id.iter().map(|(_, r)| r.clone()).collect();
            let rebuilt = AttentionCache::build(
                proj.clone(),
                &live,
                &live_reps,
                &known_ids,
                &known_reps,
                &refs,
            )
            .unwrap();
            for (a, b) in cache.ck().iter().zip(rebuilt.ck()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in cache.kr().iter().zip(rebuilt.kr()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in cache.cr().iter().zip(rebuilt.cr()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(cache.candidate_ids().is_empty());
        assert_eq!(cache.ck().len(), 0, "no live rows may remain");
        assert_eq!(cache.kr().len(), 7 * 3);
    }

    #[test]
    fn promote_cost_delta_is_survivors_plus_refs() {
        let d = 4;
        let proj = projections(30, d);
        let ids: Vec<usize> = (0..8).collect();
        let cands = reps(31, 8, d);
        let known = reps(32, 2, d);
        let refs = reps(33, 16, d);
        let mut cache =
            AttentionCache::build(proj, &ids, &cands, &[100, 101], &known, &refs).unwrap();
        let before = cache.cost_report();
        cache.promote(3, &reps(34, 1, d)[0]).unwrap();
        let after = cache.cost_report();
        assert_eq!(
            after.incremental - before.incremental,
            7 + 16,
            "delta must be (n_c - 1) + N_e"
        );
        assert_eq!(
            after.full - before.full,
            (7 * 3 + 3 * 16 + 7 * 16) as u64,
            "counterfactual adds a fresh build at the new state"
        );
        assert_eq!(cache.promotes(), 1);
    }

    #[test]
    fn incremental_cost_beats_rebuilds_once_work_accumulates() {
        let d = 4;
        let proj = projections(40, d);
        let ids: Vec<usize> = (0..8).collect();
        let cands = reps(41, 8, d);
        let known = reps(42, 2, d);
        let refs = reps(43, 12, d);
        let mut cache =
            AttentionCache::build(proj, &ids, &cands, &[50, 51], &known, &refs).unwrap();
        for z in 0..6 {
            cache.promote(z, &reps(60 + z as u64, 1, d)[0]).unwrap();
        }
        let report = cache.cost_report();
        assert!(
            report.incremental < report.full,
            "after several promotes the incremental bill must be strictly lower: {report}"
        );
        assert!(report.ratio() < 1.0);
    }

    #[test]
    fn stale_promote_is_rejected() {
        let d = 4;
        let proj = projections(70, d);
        let cands = reps(71, 2, d);
        let known = reps(72, 1, d);
        let refs = reps(73, 2, d);
        let mut cache = AttentionCache::build(proj, &[5, 6], &cands, &[0], &known, &refs).unwrap();
        cache.promote(5, &reps(74, 1, d)[0]).unwrap();
        let err = cache.promote(5, &reps(75, 1, d)[0]).unwrap_err();
        assert!(
            matches!(err, Error::Cache { .. }),
            "double promote must fail: {err}"
        );
    }

    #[test]
    fn display_formats_cost_report() {
        let report = CostReport {
            incremental: 50,
            full: 100,
        };
        assert_eq!(
            format!("{report}"),
            "incremental=50 full=100 ratio=0.500000"
        );
    }
}
