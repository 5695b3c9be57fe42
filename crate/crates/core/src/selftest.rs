//! Built-in invariant suites, runnable from the CLI without a test harness.
//!
//! Every suite runs at fixed seeds, so the run count, suite names, and
//! verdicts are identical across invocations. `corrupt_gradients` is a
//! negative-test switch: it injects a drifting corruption into the function
//! evaluations of the gradient suite — as if a weight were silently
//! mutating between measurements — which must make exactly that suite fail.

use std::cell::Cell;

use rand::Rng;

use crate::cache::{AttentionCache, CacheProjections};
use crate::cfa::{coarse_fill_all, fill_order, CfaWeights};
use crate::config::RunConfig;
use crate::decoder::DecoderLayer;
use crate::diffusion::DiffusionMode;
use crate::encoder::{encode, EncoderLayer, FfnKind};
use crate::gradcheck::check_gradients;
use crate::image::{Image, Mask};
use crate::ledger::PatchLedger;
use crate::loss::{l_rec, l_total, symmetric_eigenvalues, LossWeights, Reduction};
use crate::model::{run_pipeline, Model, PipelineOptions};
use crate::patch::patchify;
use crate::rng;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Render one line per suite plus a summary; stable across runs.
pub fn format_report(results: &[SuiteResult]) -> String {
    let mut out = String::new();
    for r in results {
        if r.passed {
            out.push_str(&format!("{}: ok\n", r.name));
        } else {
            out.push_str(&format!("{}: FAILED — {}\n", r.name, r.detail));
        }
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} suites, {} failed\n", results.len(), failed));
    out
}

pub fn all_passed(results: &[SuiteResult]) -> bool {
    results.iter().all(|r| r.passed)
}

type Check = std::result::Result<(), String>;

fn fail(detail: impl Into<String>) -> Check {
    Err(detail.into())
}

fn approx(a: f64, b: f64, tol: f64, what: &str) -> Check {
    if (a - b).abs() <= tol {
        Ok(())
    } else {
        fail(format!("{what}: {a} vs {b} (tol {tol})"))
    }
}

// ── Suites ──────────────────────────────────────────────────────────────────

fn suite_gradient_ops(corrupt: bool) -> Check {
    let mut r = rng::stream(501, "selftest/grad");
    let x = Tensor::new(
        vec![3, 4],
        (0..12).map(|_| r.random::<f64>() + 0.5).collect(),
    )
    .map_err(|e| e.to_string())?;
    let w = Tensor::new(
        vec![4, 2],
        (0..8).map(|_| r.random::<f64>() - 0.5).collect(),
    )
    .map_err(|e| e.to_string())?;
    // The corruption drifts the function between evaluations, exactly what
    // a silently mutating weight would do to a finite-difference probe.
    let evals = Cell::new(0u32);
    let drift = move || {
        if !corrupt {
            return 0.0;
        }
        let n = evals.get();
        evals.set(n + 1);
        n as f64 * 1e-3
    };
    type GradCase = (
        &'static str,
        Box<dyn Fn(&Graph, &Tensor) -> crate::Result<Tensor>>,
    );
    let cases: Vec<GradCase> = vec![
        ("matmul", {
            let w = w.clone();
            Box::new(move |g, v| g.sum_all(&g.matmul(v, &w)?))
        }),
        (
            "softmax_rows",
            Box::new(|g, v| g.mean_all(&g.softmax_rows(v)?)),
        ),
        ("layer_norm", {
            let gain = Tensor::new(vec![4], vec![1.0; 4]).map_err(|e| e.to_string())?;
            let bias = Tensor::new(vec![4], vec![0.0; 4]).map_err(|e| e.to_string())?;
            Box::new(move |g: &Graph, v: &Tensor| {
                g.sum_all(&g.mul(&g.layer_norm(v, &gain, &bias, crate::encoder::LN_EPS)?, v)?)
            })
        }),
        ("gelu", Box::new(|g, v| g.sum_all(&g.gelu(v)?))),
    ];
    for (name, f) in cases {
        let err = check_gradients(
            |g, v| {
                let y = f(g, v)?;
                g.add(&y, &Tensor::scalar(drift()))
            },
            &x,
            1e-5,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        if err > 1e-6 {
            return fail(format!("{name}: gradient error {err:.3e} exceeds 1e-6"));
        }
    }
    Ok(())
}

fn suite_cache_oracle() -> Check {
    let mut r = rng::stream(502, "selftest/cache");
    let layer = DecoderLayer::seeded(502, "selftest/cache-layer", 6, 5, FfnKind::Relu)
        .map_err(|e| e.to_string())?;
    let proj = CacheProjections::from_layer(&layer);
    let rand_rows = |r: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| r.random::<f64>() - 0.5).collect())
            .collect()
    };
    let cands = rand_rows(&mut r, 6, 6);
    let known = rand_rows(&mut r, 2, 6);
    let refs = rand_rows(&mut r, 4, 5);
    let cand_ids: Vec<usize> = (0..6).collect();
    let known_ids = vec![6, 7];
    let mut cache =
        AttentionCache::build(proj.clone(), &cand_ids, &cands, &known_ids, &known, &refs)
            .map_err(|e| e.to_string())?;
    // Promote in a scrambled order; after each step the maps must match a
    // from-scratch build over the updated sets.
    let mut live_c: Vec<usize> = cand_ids.clone();
    let mut all_known_ids = known_ids.clone();
    let mut all_known = known.clone();
    for &pick in &[3usize, 0, 5, 1, 4, 2] {
        let new_rep: Vec<f64> = (0..6).map(|_| r.random::<f64>() - 0.5).collect();
        cache.promote(pick, &new_rep).map_err(|e| e.to_string())?;
        live_c.retain(|&c| c != pick);
        all_known_ids.push(pick);
        all_known.push(new_rep);
        let live_reps: Vec<Vec<f64>> = live_c.iter().map(|&c| cands[c].clone()).collect();
        let fresh = AttentionCache::build(
            proj.clone(),
            &live_c,
            &live_reps,
            &all_known_ids,
            &all_known,
            &refs,
        )
        .map_err(|e| e.to_string())?;
        for (name, a, b) in [
            ("CK", cache.ck(), fresh.ck()),
            ("KR", cache.kr(), fresh.kr()),
            ("CR", cache.cr(), fresh.cr()),
        ] {
            if a.len() != b.len() {
                return fail(format!("{name} size drifted after promoting {pick}"));
            }
            for (x, y) in a.iter().zip(b) {
                approx(
                    *x,
                    *y,
                    1e-12,
                    &format!("{name} entry after promoting {pick}"),
                )?;
            }
        }
    }
    let report = cache.cost_report();
    if report.incremental >= report.full {
        return fail(format!(
            "incremental {} not below counterfactual {}",
            report.incremental, report.full
        ));
    }
    Ok(())
}

fn pipeline_fixture(seed: u64) -> crate::Result<(RunConfig, Model, Image, Mask)> {
    let cfg = RunConfig {
        height: 16,
        width: 16,
        patch: 2,
        d_e: 8,
        d_d: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        backbone_stages: 2,
        seed,
        ..RunConfig::default()
    };
    let model = Model::new(&cfg)?;
    let mut r = rng::stream(seed, "selftest/pipeline-img");
    let img = Image::new(16, 16, 3, (0..16 * 16 * 3).map(|_| r.random()).collect())?;
    // Mask patches 1 and 2 of the 2x2 decoder grid.
    let mut entries = vec![1u8; 256];
    for y in 0..8 {
        for x in 8..16 {
            entries[y * 16 + x] = 0;
        }
    }
    for y in 8..16 {
        for x in 0..8 {
            entries[y * 16 + x] = 0;
        }
    }
    let mask = Mask::new(16, 16, entries)?;
    Ok((cfg, model, img, mask))
}

fn suite_diffusion_contract() -> Check {
    let (cfg, model, img, mask) = pipeline_fixture(503).map_err(|e| e.to_string())?;
    let mut opts = PipelineOptions::from_config(&cfg);
    let g = Graph::new();
    let run = run_pipeline(&g, &model, &img, &mask, &opts).map_err(|e| e.to_string())?;
    let mut chosen: Vec<usize> = run.trace.iter().map(|s| s.chosen).collect();
    chosen.sort_unstable();
    if chosen != vec![1, 2] {
        return fail(format!(
            "selection visited {chosen:?}, expected each masked patch once"
        ));
    }
    for step in &run.trace {
        if !(step.probability > 0.0 && step.probability <= 1.0) {
            return fail(format!(
                "step {} probability {} outside (0, 1]",
                step.t, step.probability
            ));
        }
        let total: f64 = step.distribution.iter().map(|(_, p)| p).sum();
        approx(
            total,
            1.0,
            1e-12,
            &format!("step {} distribution mass", step.t),
        )?;
    }
    opts.mode = DiffusionMode::Exact;
    let g2 = Graph::new();
    let exact = run_pipeline(&g2, &model, &img, &mask, &opts).map_err(|e| e.to_string())?;
    if exact.trace.len() != run.trace.len() {
        return fail("exact mode changed the trace length".to_string());
    }
    for (a, b) in run.trace.iter().zip(&exact.trace) {
        if a.chosen != b.chosen || a.probability.to_bits() != b.probability.to_bits() {
            return fail(format!(
                "exact mode disagrees at t={}: {} p={} vs {} p={}",
                a.t, a.chosen, a.probability, b.chosen, b.probability
            ));
        }
    }
    Ok(())
}

fn suite_cfa_ordering() -> Check {
    let mut r = rng::stream(504, "selftest/cfa");
    let img =
        Image::new(8, 8, 3, (0..192).map(|_| r.random()).collect()).map_err(|e| e.to_string())?;
    // A staircase mask gives the four 4x4 patches distinct mask ratios.
    let mut entries = vec![1u8; 64];
    for (patch, masked) in [(1usize, 4usize), (2, 12), (3, 8)] {
        let (py, px) = (patch / 2, patch % 2);
        let mut placed = 0;
        'place: for y in 0..4 {
            for x in 0..4 {
                if placed == masked {
                    break 'place;
                }
                entries[(py * 4 + y) * 8 + (px * 4 + x)] = 0;
                placed += 1;
            }
        }
    }
    let mask = Mask::new(8, 8, entries).map_err(|e| e.to_string())?;
    let seq = patchify(&img, &mask, 4).map_err(|e| e.to_string())?;
    let mut ledger = PatchLedger::from_sequence(&seq);
    let order = fill_order(&ledger).map_err(|e| e.to_string())?;
    if order != vec![1, 3, 2] {
        return fail(format!(
            "fill order {order:?}, expected ascending ratio [1, 3, 2]"
        ));
    }
    let g = Graph::new();
    let weights =
        CfaWeights::seeded(504, "selftest/cfa-w", seq.dim()).map_err(|e| e.to_string())?;
    for i in 0..seq.count() {
        let emb = g.var(
            &Tensor::new(vec![1, seq.dim()], seq.vector(i).to_vec()).map_err(|e| e.to_string())?,
        );
        ledger.set_embedding(i, emb).map_err(|e| e.to_string())?;
    }
    let records = coarse_fill_all(&g, &weights, &mut ledger).map_err(|e| e.to_string())?;
    if records.len() != 3 {
        return fail(format!("{} fill records, expected 3", records.len()));
    }
    for rec in &records {
        let total: f64 = rec.attention.iter().sum();
        approx(
            total,
            1.0,
            1e-12,
            &format!("attention mass for patch {}", rec.patch),
        )?;
        let mut sorted = rec.keys.clone();
        sorted.sort_unstable();
        if sorted != rec.keys {
            return fail(format!(
                "context for patch {} is not in raster order",
                rec.patch
            ));
        }
    }
    Ok(())
}

fn suite_loss_identities() -> Check {
    let g = Graph::new();
    let mut r = rng::stream(505, "selftest/loss");
    let a = Tensor::new(vec![6, 3], (0..18).map(|_| r.random()).collect())
        .map_err(|e| e.to_string())?;
    let zero = l_rec(&g, &a, &a, Reduction::Mean).map_err(|e| e.to_string())?;
    if zero.item().map_err(|e| e.to_string())? != 0.0 {
        return fail("reconstruction loss of identical inputs is not exactly zero".to_string());
    }
    // Canonical combination: components (1, 1, 1) under default weights.
    let one = Tensor::scalar(1.0);
    let bundle =
        l_total(&g, &one, &one, &one, LossWeights::default()).map_err(|e| e.to_string())?;
    approx(bundle.tran, 260.1, 1e-9, "combined loss at unit components")?;
    // Gram matrices are symmetric and positive semidefinite.
    let act: Vec<f64> = (0..15).map(|_| r.random::<f64>() - 0.5).collect();
    let t = Tensor::new(vec![3, 5], act).map_err(|e| e.to_string())?;
    let gm = crate::loss::gram(&g, &t).map_err(|e| e.to_string())?;
    let gd = gm.data();
    for i in 0..3 {
        for j in 0..3 {
            approx(gd[i * 3 + j], gd[j * 3 + i], 0.0, "gram symmetry")?;
        }
    }
    for ev in symmetric_eigenvalues(gd, 3) {
        if ev < -1e-12 {
            return fail(format!("gram eigenvalue {ev} below -1e-12"));
        }
    }
    Ok(())
}

fn suite_encoder_equivariance() -> Check {
    let mut r = rng::stream(506, "selftest/encoder");
    let layers = vec![
        EncoderLayer::seeded(506, "selftest/enc0", 8, 2, FfnKind::Relu)
            .map_err(|e| e.to_string())?,
    ];
    let rows = 5usize;
    let base: Vec<f64> = (0..rows * 8).map(|_| r.random::<f64>() - 0.5).collect();
    let perm = [2usize, 0, 4, 1, 3];
    let permuted: Vec<f64> = perm
        .iter()
        .flat_map(|&p| base[p * 8..(p + 1) * 8].to_vec())
        .collect();
    let g = Graph::new();
    let e = Tensor::new(vec![rows, 8], base).map_err(|e| e.to_string())?;
    let ep = Tensor::new(vec![rows, 8], permuted).map_err(|e| e.to_string())?;
    let out = encode(&g, &layers, &e).map_err(|e| e.to_string())?;
    let outp = encode(&g, &layers, &ep).map_err(|e| e.to_string())?;
    let od = out.data();
    let opd = outp.data();
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..8 {
            approx(
                opd[i * 8 + c],
                od[p * 8 + c],
                1e-10,
                "self-attention must commute with row permutation",
            )?;
        }
    }
    Ok(())
}

fn suite_determinism() -> Check {
    let (cfg, model, img, mask) = pipeline_fixture(507).map_err(|e| e.to_string())?;
    let opts = PipelineOptions::from_config(&cfg);
    let g1 = Graph::new();
    let a = run_pipeline(&g1, &model, &img, &mask, &opts).map_err(|e| e.to_string())?;
    let g2 = Graph::new();
    let b = run_pipeline(&g2, &model, &img, &mask, &opts).map_err(|e| e.to_string())?;
    let bits = |img: &Image| -> Vec<u64> { img.pixels().iter().map(|v| v.to_bits()).collect() };
    if bits(&a.out_small) != bits(&b.out_small) || bits(&a.out_full) != bits(&b.out_full) {
        return fail("same seed produced different pixels".to_string());
    }
    if a.cost != b.cost {
        return fail("same seed produced different cost reports".to_string());
    }
    Ok(())
}

// ── Runner ──────────────────────────────────────────────────────────────────

/// Run every suite at fixed seeds. `corrupt_gradients` injects the
/// drifting-evaluation fault into the gradient suite.
pub fn run_all(corrupt_gradients: bool) -> Vec<SuiteResult> {
    type Suite = (&'static str, Box<dyn Fn() -> Check>);
    let suites: Vec<Suite> = vec![
        (
            "gradient-ops",
            Box::new(move || suite_gradient_ops(corrupt_gradients)),
        ),
        ("cache-oracle", Box::new(suite_cache_oracle)),
        ("diffusion-contract", Box::new(suite_diffusion_contract)),
        ("cfa-ordering", Box::new(suite_cfa_ordering)),
        ("loss-identities", Box::new(suite_loss_identities)),
        ("encoder-equivariance", Box::new(suite_encoder_equivariance)),
        ("determinism", Box::new(suite_determinism)),
    ];
    suites
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(()) => SuiteResult {
                name,
                passed: true,
                detail: String::new(),
            },
            Err(detail) => SuiteResult {
                name,
                passed: false,
                detail,
            },
        })
        .collect()
}
