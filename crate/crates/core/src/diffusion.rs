//! Probabilistic patch selection and image finalization.
//!
//! After the decoder stack has run once, every coarse patch owns a frozen
//! final-layer reconstruction and every known patch a frozen pass-through
//! representation. Selection then iterates: score each remaining candidate
//! by how much attention mass it claims against the references, promote the
//! argmax into the known set, and rescore the survivors (whose bridge route
//! now passes through one more known patch). Representations never change
//! during the loop — only the score maps do — which is what makes the
//! incremental cache equal to a from-scratch rebuild.
//!
//! Per-candidate raw score: `lambda * sum_i A_d(z, i) + (1 - lambda) *
//! sum_i A_b(z, i)`. A row-wise softmax would hand every candidate exactly
//! mass 1 and collapse the argmax, so `A_d`/`A_b` are normalized jointly
//! over all remaining (candidate, reference) pairs; the denominator then
//! runs over candidates, and per-candidate mass genuinely varies. A second
//! strategy, `score-sum`, skips the softmax and uses the raw score sums —
//! kept for experimentation; it errors if the sums do not form a
//! distribution.
//!
//! The trace records `(t, chosen patch, probability)` per iteration and is
//! byte-stable for a fixed seed: ties break to the lowest raster index.

use std::sync::Arc;

use crate::cache::{AttentionCache, CacheProjections, CostReport};
use crate::error::Error;
use crate::image::{Image, Mask};
use crate::ledger::{PatchLedger, PatchState};
use crate::patch::unpatchify_gather_index;
use crate::rng;
use crate::tensor::{Graph, Tensor};
use crate::Result;

// ── Selection ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffusionMode {
    /// Maintain the score maps across iterations (row removal, column and
    /// row supplement). The default.
    Incremental,
    /// Rebuild all maps from scratch every iteration. Same trace, more work;
    /// kept as the oracle for the incremental path.
    Exact,
}

impl DiffusionMode {
    pub fn parse(s: &str) -> Result<DiffusionMode> {
        match s {
            "incremental" => Ok(DiffusionMode::Incremental),
            "exact" => Ok(DiffusionMode::Exact),
            other => Err(Error::Config {
                field: "diffusion".into(),
                detail: format!("unknown mode {other:?} (expected incremental|exact)"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DiffusionMode::Incremental => "incremental",
            DiffusionMode::Exact => "exact",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreStrategy {
    /// Joint softmax over all remaining (candidate, reference) pairs; a
    /// candidate's score is its share of the total attention mass.
    SoftmaxMass,
    /// Pre-softmax score sums, normalized directly.
    ScoreSum,
}

impl ScoreStrategy {
    pub fn parse(s: &str) -> Result<ScoreStrategy> {
        match s {
            "softmax-mass" => Ok(ScoreStrategy::SoftmaxMass),
            "score-sum" => Ok(ScoreStrategy::ScoreSum),
            other => Err(Error::Config {
                field: "score_strategy".into(),
                detail: format!("unknown strategy {other:?} (expected softmax-mass|score-sum)"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreStrategy::SoftmaxMass => "softmax-mass",
            ScoreStrategy::ScoreSum => "score-sum",
        }
    }
}

/// One selection event. `distribution` holds `(patch, probability)` for
/// every candidate that was still live when the choice was made.
#[derive(Clone, Debug)]
pub struct SelectionStep {
    pub t: usize,
    pub chosen: usize,
    pub probability: f64,
    pub distribution: Vec<(usize, f64)>,
}

/// Text form of a trace: one `"t index probability"` line per iteration.
pub fn format_trace(trace: &[SelectionStep]) -> String {
    let mut out = String::new();
    for step in trace {
        out.push_str(&format!(
            "{} {} {:.12}\n",
            step.t, step.chosen, step.probability
        ));
    }
    out
}

/// Per-candidate mass under a joint softmax over every entry of `scores`
/// (`n_c` rows by `n_e` columns). Masses sum to 1 across candidates.
fn joint_softmax_mass(scores: &[f64], n_c: usize, n_e: usize) -> Vec<f64> {
    debug_assert_eq!(scores.len(), n_c * n_e);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut row_sums = vec![0.0; n_c];
    let mut total = 0.0;
    for z in 0..n_c {
        let mut s = 0.0;
        for e in 0..n_e {
            s += (scores[z * n_e + e] - max).exp();
        }
        row_sums[z] = s;
        total += s;
    }
    row_sums.iter().map(|s| s / total).collect()
}

/// Probability per live candidate, in the cache's candidate row order.
pub fn selection_scores(
    cache: &AttentionCache,
    lambda: f64,
    bridge_enabled: bool,
    strategy: ScoreStrategy,
) -> Result<Vec<f64>> {
    let (use_direct, use_bridge) = crate::decoder::active_paths(lambda, bridge_enabled)?;
    let n_c = cache.candidate_ids().len();
    let n_e = cache.ref_count();
    if n_c == 0 {
        return Err(Error::Diffusion {
            detail: "no candidates left to score".into(),
        });
    }
    if use_bridge && cache.known_ids().is_empty() {
        return Err(Error::Diffusion {
            detail: "bridge unavailable: known set is empty".into(),
        });
    }

    let bridge_scores: Option<Vec<f64>> = if use_bridge {
        let mut m = Vec::with_capacity(n_c * n_e);
        for z in 0..n_c {
            m.extend(cache.bridge_row(z));
        }
        Some(m)
    } else {
        None
    };

    let raw: Vec<f64> = match strategy {
        ScoreStrategy::SoftmaxMass => {
            let direct_mass = if use_direct {
                Some(joint_softmax_mass(cache.cr(), n_c, n_e))
            } else {
                None
            };
            let bridge_mass = bridge_scores
                .as_ref()
                .map(|sb| joint_softmax_mass(sb, n_c, n_e));
            (0..n_c)
                .map(|z| match (&direct_mass, &bridge_mass) {
                    (Some(d), Some(b)) => lambda * d[z] + (1.0 - lambda) * b[z],
                    (Some(d), None) => d[z],
                    (None, Some(b)) => b[z],
                    (None, None) => unreachable!("active_paths guarantees a branch"),
                })
                .collect()
        }
        ScoreStrategy::ScoreSum => {
            let row_sum = |m: &[f64], z: usize| -> f64 { m[z * n_e..(z + 1) * n_e].iter().sum() };
            (0..n_c)
                .map(|z| {
                    let d = if use_direct {
                        row_sum(cache.cr(), z)
                    } else {
                        0.0
                    };
                    let b = bridge_scores.as_ref().map_or(0.0, |sb| row_sum(sb, z));
                    match (use_direct, use_bridge) {
                        (true, true) => lambda * d + (1.0 - lambda) * b,
                        (true, false) => d,
                        (false, true) => b,
                        (false, false) => unreachable!(),
                    }
                })
                .collect()
        }
    };

    let total: f64 = raw.iter().sum();
    if !total.is_finite() || total <= 0.0 || raw.iter().any(|&r| r < 0.0) {
        return Err(Error::Diffusion {
            detail: format!(
                "degenerate selection distribution under strategy {}: raw scores do not \
                 normalize (total {total})",
                strategy.name()
            ),
        });
    }
    Ok(raw.iter().map(|r| r / total).collect())
}

// ── The diffusion loop ──────────────────────────────────────────────────────

/// Detached snapshot of a score map for text dumps.
#[derive(Clone, Debug)]
pub struct MapSnapshot {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DiffusionOutcome {
    pub trace: Vec<SelectionStep>,
    pub cost: CostReport,
    /// Direct scores S_d at loop entry (for dumps).
    pub initial_direct: MapSnapshot,
    /// Composed bridge scores S_b at loop entry, when the bridge is active.
    pub initial_bridge: Option<MapSnapshot>,
    /// Final cache state, for map-equality checks between modes.
    pub cache: AttentionCache,
}

/// Run the selection loop to completion. `cand`/`known` pair raster patch
/// indices with frozen final-layer representations; candidates must arrive
/// in ascending raster order (ties in the argmax resolve to the earliest
/// row). Every candidate is marked `Inpainted` in the ledger exactly once.
#[allow(clippy::too_many_arguments)]
pub fn diffuse(
    ledger: &mut PatchLedger,
    proj: CacheProjections,
    cand: &[(usize, Vec<f64>)],
    known: &[(usize, Vec<f64>)],
    refs: &[Vec<f64>],
    lambda: f64,
    bridge_enabled: bool,
    mode: DiffusionMode,
    strategy: ScoreStrategy,
) -> Result<DiffusionOutcome> {
    let (_, use_bridge) = crate::decoder::active_paths(lambda, bridge_enabled)?;
    if use_bridge && known.is_empty() {
        return Err(Error::Diffusion {
            detail: "bridge unavailable: diffusion started with an empty known set".into(),
        });
    }
    let cand_ids: Vec<usize> = cand.iter().map(|(i, _)| *i).collect();
    let cand_reps: Vec<Vec<f64>> = cand.iter().map(|(_, r)| r.clone()).collect();
    let known_ids: Vec<usize> = known.iter().map(|(i, _)| *i).collect();
    let known_reps: Vec<Vec<f64>> = known.iter().map(|(_, r)| r.clone()).collect();
    let mut cache = AttentionCache::build(
        proj.clone(),
        &cand_ids,
        &cand_reps,
        &known_ids,
        &known_reps,
        refs,
    )?;

    let n_e = cache.ref_count();
    let initial_direct = MapSnapshot {
        rows: cand_ids.len(),
        cols: n_e,
        values: cache.cr().to_vec(),
    };
    let initial_bridge = use_bridge.then(|| MapSnapshot {
        rows: cand_ids.len(),
        cols: n_e,
        values: (0..cand_ids.len())
            .flat_map(|z| cache.bridge_row(z))
            .collect(),
    });

    // Reps by patch id so promotions can hand the cache the frozen
    // representation of whichever candidate wins.
    let rep_of = |id: usize| -> &Vec<f64> {
        let pos = cand_ids
            .iter()
            .position(|&c| c == id)
            .expect("id came from the cache");
        &cand_reps[pos]
    };

    // Exact mode's scratch state: current candidate/known sets, rebuilt into
    // a fresh cache every iteration.
    let mut exact_cands: Vec<(usize, Vec<f64>)> = cand.to_vec();
    let mut exact_known: Vec<(usize, Vec<f64>)> = known.to_vec();

    let mut trace = Vec::new();
    let mut t = 1;
    while !cache.candidate_ids().is_empty() {
        let probs = match mode {
            DiffusionMode::Incremental => {
                selection_scores(&cache, lambda, bridge_enabled, strategy)?
            }
            DiffusionMode::Exact => {
                let ids: Vec<usize> = exact_cands.iter().map(|(i, _)| *i).collect();
                let reps: Vec<Vec<f64>> = exact_cands.iter().map(|(_, r)| r.clone()).collect();
                let kids: Vec<usize> = exact_known.iter().map(|(i, _)| *i).collect();
                let kreps: Vec<Vec<f64>> = exact_known.iter().map(|(_, r)| r.clone()).collect();
                let scratch =
                    AttentionCache::build(proj.clone(), &ids, &reps, &kids, &kreps, refs)?;
                selection_scores(&scratch, lambda, bridge_enabled, strategy)?
            }
        };
        let live = cache.candidate_ids().to_vec();
        debug_assert_eq!(probs.len(), live.len());

        // Argmax with ties to the lowest raster index: rows are kept in
        // ascending raster order, so "strictly greater replaces" suffices.
        let mut best = 0;
        for i in 1..probs.len() {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        let chosen = live[best];
        let probability = probs[best];
        trace.push(SelectionStep {
            t,
            chosen,
            probability,
            distribution: live.iter().cloned().zip(probs.iter().cloned()).collect(),
        });

        let rep = rep_of(chosen).clone();
        cache.promote(chosen, &rep)?;
        if mode == DiffusionMode::Exact {
            let pos = exact_cands
                .iter()
                .position(|(i, _)| *i == chosen)
                .expect("live candidate");
            let entry = exact_cands.remove(pos);
            exact_known.push(entry);
        }
        ledger.mark_inpainted(chosen)?;
        t += 1;
    }

    Ok(DiffusionOutcome {
        trace,
        cost: cache.cost_report(),
        initial_direct,
        initial_bridge,
        cache,
    })
}

// ── Neighbor averaging shortcut ─────────────────────────────────────────────

/// Finalize lightly-masked patches (mask ratio at most `rho`) by averaging
/// the known pixels of the patch itself and its 4-neighbor patches instead
/// of sending them through the selection loop. Patches whose neighborhood
/// holds no known pixel are left for diffusion. Returns the raster indices
/// of the averaged patches; their ledger state becomes `Inpainted` with the
/// averaged pixels filled in.
pub fn neighbor_average(ledger: &mut PatchLedger, mask: &Mask, rho: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config {
            field: "avg_threshold".into(),
            detail: format!("{rho} outside [0, 1]"),
        });
    }
    let p = ledger.patch();
    let (gh, gw) = (ledger.grid_h(), ledger.grid_w());
    let c = ledger.channels();
    if mask.height() != gh * p || mask.width() != gw * p {
        return Err(Error::Shape {
            op: "neighbor_average",
            detail: format!(
                "mask {}x{} does not cover the {}x{} patch grid at patch {p}",
                mask.height(),
                mask.width(),
                gh,
                gw
            ),
        });
    }

    let targets: Vec<usize> = ledger
        .indices_in_state(PatchState::CoarseFilled)
        .into_iter()
        .filter(|&i| ledger.entry(i).mask_ratio() <= rho)
        .collect();

    let mut averaged = Vec::new();
    for idx in targets {
        let (py, px) = (idx / gw, idx % gw);
        // Known pixel sums over the patch and its 4-neighbors, per channel.
        let mut sums = vec![0.0; c];
        let mut count = 0usize;
        let mut absorb = |ny: isize, nx: isize| {
            if ny < 0 || nx < 0 || ny as usize >= gh || nx as usize >= gw {
                return;
            }
            let nidx = ny as usize * gw + nx as usize;
            let pixels = ledger.entry(nidx).pixels().to_vec();
            for yy in 0..p {
                for xx in 0..p {
                    if mask.known(ny as usize * p + yy, nx as usize * p + xx) {
                        for ch in 0..c {
                            sums[ch] += pixels[ch * p * p + yy * p + xx];
                        }
                        count += 1;
                    }
                }
            }
        };
        absorb(py as isize, px as isize);
        absorb(py as isize - 1, px as isize);
        absorb(py as isize + 1, px as isize);
        absorb(py as isize, px as isize - 1);
        absorb(py as isize, px as isize + 1);
        if count == 0 {
            continue; // nothing known nearby; leave it to the selection loop
        }
        let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
        let mut pixels = ledger.entry(idx).pixels().to_vec();
        for yy in 0..p {
            for xx in 0..p {
                if !mask.known(py * p + yy, px * p + xx) {
                    for ch in 0..c {
                        pixels[ch * p * p + yy * p + xx] = means[ch];
                    }
                }
            }
        }
        ledger.set_pixels(idx, pixels)?;
        ledger.mark_inpainted(idx)?;
        averaged.push(idx);
    }
    Ok(averaged)
}

// ── Output head and finalization ────────────────────────────────────────────

/// Trainable linear map from final representations to patch pixel values.
/// The bias starts at 0.5 (mid-gray) so early outputs sit inside the [0, 1]
/// clamp window where gradients flow.
#[derive(Clone, Debug)]
pub struct OutputHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl OutputHead {
    /// Fraction of the Xavier limit used for the weight. Representations
    /// reaching the head carry residual-chain magnitudes of several units;
    /// at full Xavier scale the pre-clamp values land far outside [0, 1]
    /// and the clamp silences every gradient at initialization.
    const INIT_SCALE: f64 = 0.1;

    pub fn seeded(seed: u64, tag: &str, d: usize, pixel_dim: usize) -> Result<OutputHead> {
        let mut r = rng::stream(seed, tag);
        let weight: Vec<f64> = rng::xavier_uniform(d, pixel_dim, &mut r)
            .into_iter()
            .map(|v| v * Self::INIT_SCALE)
            .collect();
        Ok(OutputHead {
            weight: Tensor::new(vec![d, pixel_dim], weight)?,
            bias: Tensor::new(vec![pixel_dim], vec![0.5; pixel_dim])?,
        })
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}/weight"), &mut self.weight);
        f(format!("{prefix}/bias"), &mut self.bias);
    }

    /// Map one `[n, d]` block of representations to `[n, pixel_dim]` values
    /// clamped to the displayable range.
    pub fn apply(&self, g: &Graph, reps: &Tensor) -> Result<Tensor> {
        g.clamp(
            &g.add_bias(&g.matmul(reps, &self.weight)?, &self.bias)?,
            0.0,
            1.0,
        )
    }
}

/// Assemble the output image. Patches that went through selection emit
/// `head(representation)`; known patches — and averaged patches, whose
/// pixels were already written into the ledger — emit their stored pixels
/// verbatim. `reps` maps raster patch index to the frozen final
/// representation (`[1, d]`) for exactly the selection-loop patches.
///
/// Returns the tracked image tensor (`[H'*W', channels]`, interleaved row
/// order, ready for the perceptual losses) and its detached `Image`.
pub fn finalize_image(
    g: &Graph,
    ledger: &PatchLedger,
    reps: &[(usize, Tensor)],
    head: &OutputHead,
) -> Result<(Tensor, Image)> {
    let p = ledger.patch();
    let c = ledger.channels();
    let dim = c * p * p;
    let n = ledger.count();
    let mut rep_rows: Vec<Option<&Tensor>> = vec![None; n];
    for (idx, rep) in reps {
        if *idx >= n {
            return Err(Error::Diffusion {
                detail: format!("representation for out-of-range patch {idx} (count {n})"),
            });
        }
        rep_rows[*idx] = Some(rep);
    }

    let mut rows: Vec<Tensor> = Vec::with_capacity(n);
    for (idx, rep_row) in rep_rows.iter().enumerate() {
        let entry = ledger.entry(idx);
        match (entry.state(), *rep_row) {
            (PatchState::Inpainted, Some(rep)) => rows.push(head.apply(g, rep)?),
            (PatchState::Known, None) | (PatchState::Inpainted, None) => {
                rows.push(Tensor::new(vec![1, dim], entry.pixels().to_vec())?)
            }
            (PatchState::Known, Some(_)) => {
                return Err(Error::Diffusion {
                    detail: format!("known patch {idx} must not carry a reconstruction"),
                })
            }
            (state, _) => {
                return Err(Error::Diffusion {
                    detail: format!("patch {idx} still {state:?}: ledger is not finalized"),
                })
            }
        }
    }
    let row_refs: Vec<&Tensor> = rows.iter().collect();
    let stacked = g.concat_rows(&row_refs)?;
    let (h, w) = (ledger.grid_h() * p, ledger.grid_w() * p);
    let index = unpatchify_gather_index(ledger.grid_h(), ledger.grid_w(), p, c);
    let flat = g.gather(&stacked, Arc::clone(&index), vec![h * w, c])?;
    let image = Image::new(h, w, c, flat.data().to_vec())?;
    Ok((flat, image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderLayer;
    use crate::encoder::FfnKind;
    use crate::image::Mask;
    use crate::patch::patchify;
    use rand::Rng;

    fn proj(seed: u64, d: usize) -> CacheProjections {
        let layer = DecoderLayer::seeded(seed, "test/diff-layer", d, d, FfnKind::Relu).unwrap();
        CacheProjections::from_layer(&layer)
    }

    fn reps(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = crate::rng::stream(seed, "test/diff");
        (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect()
    }

    fn pairs(ids: &[usize], reps: &[Vec<f64>]) -> Vec<(usize, Vec<f64>)> {
        ids.iter().cloned().zip(reps.iter().cloned()).collect()
    }

    /// A ledger whose masked patches are already coarse-filled, over a
    /// `grid*2 x grid*2` single-channel image with patch size 2.
    fn filled_ledger(grid: usize, masked: &[usize]) -> PatchLedger {
        let p = 2;
        let h = grid * p;
        let img = Image::new(h, h, 1, (0..h * h).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let mut entries = vec![1u8; h * h];
        for &m in masked {
            let (py, px) = (m / grid, m % grid);
            for yy in 0..p {
                for xx in 0..p {
                    entries[(py * p + yy) * h + (px * p + xx)] = 0;
                }
            }
        }
        let mask = Mask::new(h, h, entries).unwrap();
        let seq = patchify(&img, &mask, p).unwrap();
        let mut ledger = PatchLedger::from_sequence(&seq);
        for i in 0..ledger.count() {
            if ledger.entry(i).state() == PatchState::Known {
                ledger
                    .set_embedding(i, Tensor::new(vec![1, 4], vec![0.1; 4]).unwrap())
                    .unwrap();
            }
        }
        for &m in masked {
            ledger
                .fill(m, Tensor::new(vec![1, 4], vec![0.2; 4]).unwrap())
                .unwrap();
        }
        ledger
    }

    #[test]
    fn single_candidate_gets_probability_one() {
        let d = 4;
        let cache = AttentionCache::build(
            proj(1, d),
            &[7],
            &reps(2, 1, d),
            &[0, 1],
            &reps(3, 2, d),
            &reps(4, 3, d),
        )
        .unwrap();
        let p = selection_scores(&cache, 0.5, true, ScoreStrategy::SoftmaxMass).unwrap();
        assert_eq!(
            p,
            vec![1.0],
            "a lone candidate takes the whole distribution"
        );
    }

    #[test]
    fn identical_candidates_split_mass_evenly() {
        let d = 4;
        let rep = reps(5, 1, d).remove(0);
        let cache = AttentionCache::build(
            proj(6, d),
            &[2, 9],
            &[rep.clone(), rep],
            &[0],
            &reps(7, 1, d),
            &reps(8, 3, d),
        )
        .unwrap();
        let p = selection_scores(&cache, 0.5, true, ScoreStrategy::SoftmaxMass).unwrap();
        assert!(
            (p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15,
            "{p:?}"
        );
    }

    #[test]
    fn probabilities_match_brute_force_enumeration() {
        let d = 5;
        let lambda = 0.3;
        let cache = AttentionCache::build(
            proj(9, d),
            &[0, 1, 2],
            &reps(10, 3, d),
            &[5, 6],
            &reps(11, 2, d),
            &reps(12, 2, d),
        )
        .unwrap();
        let got = selection_scores(&cache, lambda, true, ScoreStrategy::SoftmaxMass).unwrap();

        // Brute force: enumerate every (candidate, reference) entry of both
        // maps, exponentiate, and accumulate per-candidate shares.
        let mass = |m: &[f64]| -> Vec<f64> {
            let mx = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = m.iter().map(|s| (s - mx).exp()).sum();
            (0..3)
                .map(|z| {
                    m[z * 2..(z + 1) * 2]
                        .iter()
                        .map(|s| (s - mx).exp())
                        .sum::<f64>()
                        / total
                })
                .collect()
        };
        let sb: Vec<f64> = (0..3).flat_map(|z| cache.bridge_row(z)).collect();
        let md = mass(cache.cr());
        let mb = mass(&sb);
        let raw: Vec<f64> = (0..3)
            .map(|z| lambda * md[z] + (1.0 - lambda) * mb[z])
            .collect();
        let total: f64 = raw.iter().sum();
        for z in 0..3 {
            assert!(
                (got[z] - raw[z] / total).abs() < 1e-12,
                "candidate {z} off the oracle"
            );
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_score_sum_distribution_is_an_error() {
        let d = 4;
        let zeros = vec![vec![0.0; d]; 2];
        let cache = AttentionCache::build(
            proj(13, d),
            &[0, 1],
            &zeros,
            &[2],
            &reps(14, 1, d),
            &reps(15, 2, d),
        )
        .unwrap();
        let err = selection_scores(&cache, 1.0, true, ScoreStrategy::ScoreSum).unwrap_err();
        assert!(
            matches!(err, Error::Diffusion { .. }),
            "all-zero raw scores: {err}"
        );
        // The softmax strategy always yields a valid distribution here.
        let ok = selection_scores(&cache, 1.0, true, ScoreStrategy::SoftmaxMass).unwrap();
        assert!((ok.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_candidates_yield_an_empty_trace() {
        let d = 4;
        let mut ledger = filled_ledger(2, &[]);
        let known: Vec<(usize, Vec<f64>)> = pairs(&[0, 1, 2, 3], &reps(16, 4, d));
        let out = diffuse(
            &mut ledger,
            proj(17, d),
            &[],
            &known,
            &reps(18, 3, d),
            0.5,
            true,
            DiffusionMode::Incremental,
            ScoreStrategy::SoftmaxMass,
        )
        .unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.cost.incremental, out.cost.full);
    }

    #[test]
    fn single_coarse_patch_is_chosen_with_certainty() {
        let d = 4;
        let mut ledger = filled_ledger(2, &[2]);
        let known: Vec<(usize, Vec<f64>)> = pairs(&[0, 1, 3], &reps(19, 3, d));
        let cand = pairs(&[2], &reps(20, 1, d));
        let out = diffuse(
            &mut ledger,
            proj(21, d),
            &cand,
            &known,
            &reps(22, 3, d),
            0.5,
            true,
            DiffusionMode::Incremental,
            ScoreStrategy::SoftmaxMass,
        )
        .unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace[0].chosen, 2);
        assert_eq!(out.trace[0].probability, 1.0);
        assert_eq!(ledger.entry(2).state(), PatchState::Inpainted);
    }

    #[test]
    fn incremental_and_exact_modes_agree() {
        let d = 6;
        let masked = [1usize, 2, 4, 5, 6, 8, 9, 11];
        let cand_reps = reps(23, 8, d);
        let known_ids = [0usize, 3, 7, 10, 12, 13, 14, 15];
        let known_reps = reps(24, 8, d);
        let refs = reps(25, 4, d);
        let run = |mode: DiffusionMode| {
            let mut ledger = filled_ledger(4, &masked);
            diffuse(
                &mut ledger,
                proj(26, d),
                &pairs(&masked, &cand_reps),
                &pairs(&known_ids, &known_reps),
                &refs,
                0.5,
                true,
                mode,
                ScoreStrategy::SoftmaxMass,
            )
            .unwrap()
        };
        let inc = run(DiffusionMode::Incremental);
        let exact = run(DiffusionMode::Exact);
        assert_eq!(inc.trace.len(), exact.trace.len());
        for (a, b) in inc.trace.iter().zip(&exact.trace) {
            assert_eq!((a.t, a.chosen), (b.t, b.chosen), "selection order diverged");
            assert!((a.probability - b.probability).abs() < 1e-12);
        }
        for (a, b) in inc.cache.kr().iter().zip(exact.cache.kr()) {
            assert!((a - b).abs() < 1e-12, "final known-reference maps diverged");
        }
    }

    #[test]
    fn every_candidate_is_selected_exactly_once() {
        let d = 5;
        let masked = [0usize, 3, 5, 6];
        let mut ledger = filled_ledger(3, &masked);
        let known_ids: Vec<usize> = (0..9).filter(|i| !masked.contains(i)).collect();
        let out = diffuse(
            &mut ledger,
            proj(27, d),
            &pairs(&masked, &reps(28, 4, d)),
            &pairs(&known_ids, &reps(29, 5, d)),
            &reps(30, 3, d),
            0.5,
            true,
            DiffusionMode::Incremental,
            ScoreStrategy::SoftmaxMass,
        )
        .unwrap();
        let mut chosen: Vec<usize> = out.trace.iter().map(|s| s.chosen).collect();
        chosen.sort_unstable();
        assert_eq!(chosen, masked.to_vec(), "each masked patch exactly once");
        for (i, step) in out.trace.iter().enumerate() {
            assert_eq!(step.t, i + 1, "t must count iterations from 1");
            let sum: f64 = step.distribution.iter().map(|(_, p)| p).sum();
            assert!(
                (sum - 1.0).abs() < 1e-12,
                "distribution at t={} sums to {sum}",
                step.t
            );
        }
        assert_eq!(out.cache.known_ids().len(), 9, "all patches end up known");
    }

    #[test]
    fn trace_formats_one_line_per_iteration() {
        let trace = vec![SelectionStep {
            t: 1,
            chosen: 5,
            probability: 0.25,
            distribution: vec![(5, 0.25)],
        }];
        assert_eq!(format_trace(&trace), "1 5 0.250000000000\n");
    }

    #[test]
    fn averaging_fills_from_the_four_neighborhood() {
        // 3x3 patch grid, patch 2, single channel. Patch 4 (center) is
        // fully masked; everything else known.
        let mut ledger = filled_ledger(3, &[4]);
        let mask = {
            let mut entries = vec![1u8; 36];
            for yy in 2..4 {
                for xx in 2..4 {
                    entries[yy * 6 + xx] = 0;
                }
            }
            Mask::new(6, 6, entries).unwrap()
        };
        let averaged = neighbor_average(&mut ledger, &mask, 1.0).unwrap();
        assert_eq!(averaged, vec![4]);
        assert_eq!(ledger.entry(4).state(), PatchState::Inpainted);
        // Oracle: mean over the known pixels of patches 1, 3, 5, 7 (the
        // center patch itself has none).
        let mut sum = 0.0;
        let mut count = 0;
        for &n in &[1usize, 3, 5, 7] {
            for v in ledger.entry(n).pixels() {
                sum += v;
                count += 1;
            }
        }
        let want = sum / count as f64;
        for &v in ledger.entry(4).pixels() {
            assert!(
                (v - want).abs() < 1e-15,
                "averaged pixel {v} != oracle {want}"
            );
        }
    }

    #[test]
    fn averaging_respects_the_ratio_threshold() {
        let mut ledger = filled_ledger(3, &[4]);
        let mask = {
            let mut entries = vec![1u8; 36];
            for yy in 2..4 {
                for xx in 2..4 {
                    entries[yy * 6 + xx] = 0;
                }
            }
            Mask::new(6, 6, entries).unwrap()
        };
        // Ratio of patch 4 is 1.0 > 0.5: nothing may be averaged.
        let averaged = neighbor_average(&mut ledger, &mask, 0.5).unwrap();
        assert!(averaged.is_empty());
        assert_eq!(ledger.entry(4).state(), PatchState::CoarseFilled);
    }

    #[test]
    fn averaging_skips_patches_with_no_known_neighborhood() {
        // Everything masked: no known pixel anywhere, so averaging must
        // leave the ledger alone rather than divide by zero.
        let p = 2;
        let img = Image::new(4, 4, 1, vec![0.3; 16]).unwrap();
        let mask = Mask::new(4, 4, vec![0; 16]).unwrap();
        let seq = patchify(&img, &mask, p).unwrap();
        let mut ledger = PatchLedger::from_sequence(&seq);
        for i in 0..4 {
            ledger
                .fill(i, Tensor::new(vec![1, 2], vec![0.5; 2]).unwrap())
                .unwrap();
        }
        let averaged = neighbor_average(&mut ledger, &mask, 1.0).unwrap();
        assert!(averaged.is_empty());
    }

    #[test]
    fn all_known_image_passes_through_finalization_exactly() {
        let ledger = filled_ledger(2, &[]);
        let head = OutputHead::seeded(31, "test/head", 4, 4).unwrap();
        let g = Graph::new();
        let (flat, img) = finalize_image(&g, &ledger, &[], &head).unwrap();
        // Rebuild the source image the fixture used and compare bit-exactly.
        let want = Image::new(4, 4, 1, (0..16).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        assert_eq!(
            img.pixels(),
            want.pixels(),
            "known patches must pass through verbatim"
        );
        assert_eq!(flat.shape(), &[16, 1]);
    }

    #[test]
    fn head_clamps_out_of_range_outputs() {
        let g = Graph::new();
        let head = OutputHead {
            weight: Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap(),
            bias: Tensor::new(vec![2], vec![0.7, 0.3]).unwrap(),
        };
        let rep = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let out = head.apply(&g, &rep).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0], "1.7 clamps to 1.0 and -0.7 to 0.0");
    }

    #[test]
    fn finalization_rejects_unfinished_ledgers() {
        let ledger = filled_ledger(2, &[1]);
        let head = OutputHead::seeded(32, "test/head2", 4, 4).unwrap();
        let g = Graph::new();
        let err = finalize_image(&g, &ledger, &[], &head).unwrap_err();
        assert!(
            matches!(err, Error::Diffusion { .. }),
            "coarse patch must be rejected: {err}"
        );
    }

    #[test]
    fn finalization_reassembles_patch_geometry() {
        // One inpainted patch whose head output is a known constant: check
        // it lands in the right pixel block of the image.
        let mut ledger = filled_ledger(2, &[3]);
        ledger.mark_inpainted(3).unwrap();
        let d = 4;
        let head = OutputHead {
            weight: Tensor::zeros(vec![d, 4]),
            bias: Tensor::new(vec![4], vec![0.25; 4]).unwrap(),
        };
        let g = Graph::new();
        let rep = Tensor::new(vec![1, d], vec![0.9; d]).unwrap();
        let (_, img) = finalize_image(&g, &ledger, &[(3, rep)], &head).unwrap();
        for yy in 2..4 {
            for xx in 2..4 {
                let got = img.pixels()[yy * 4 + xx];
                assert!(
                    (got - 0.25).abs() < 1e-15,
                    "patch 3 pixel ({yy},{xx}) = {got}"
                );
            }
        }
        // A known pixel elsewhere still matches the source.
        assert!((img.pixels()[0] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn strategy_and_mode_names_round_trip() {
        assert_eq!(
            DiffusionMode::parse("incremental").unwrap(),
            DiffusionMode::Incremental
        );
        assert_eq!(DiffusionMode::parse("exact").unwrap(), DiffusionMode::Exact);
        assert!(DiffusionMode::parse("both").is_err());
        assert_eq!(
            ScoreStrategy::parse("softmax-mass").unwrap(),
            ScoreStrategy::SoftmaxMass
        );
        assert_eq!(
            ScoreStrategy::parse("score-sum").unwrap(),
            ScoreStrategy::ScoreSum
        );
        assert!(ScoreStrategy::parse("mass").is_err());
    }
}
