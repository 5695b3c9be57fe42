//! The assembled model and the end-to-end inpainting pipeline.
//!
//! A `Model` owns every parameter tensor: the reference backbone and its
//! 1x1 projection, encoder layers and positional tables, the patch
//! embedding, coarse-fill weights, decoder layers, and the output head —
//! plus the frozen perceptual stack used only by the losses. Parameters
//! live as plain (untracked) tensors; `bind` clones the model onto a
//! `Graph`, turning each parameter into a differentiable leaf for one
//! forward/backward pass. The optimizer walks `visit_params_mut` on the
//! original to apply updates, relying on both walks enumerating tensors in
//! the same order.
//!
//! `run_pipeline` wires the five stages together:
//!
//! 1. texture references: backbone features, projected, plus positional
//!    rows, optionally self-attended (the `no_tte` switch skips that);
//! 2. the decoder-resolution stream: downsample by 4, patchify, embed;
//! 3. coarse fill of every masked patch in ascending mask-ratio order;
//! 4. decoder stack + probabilistic selection over the candidates;
//! 5. output head + reassembly into the small and upsampled images.

use std::sync::Arc;

use crate::backbone::{image_tensor, ConvStack, Projection1x1, CHANNEL_PLAN};
use crate::cache::{CacheProjections, CostReport};
use crate::cfa::{coarse_fill_all, CfaRecord, CfaWeights};
use crate::config::{PosChoice, RunConfig};
use crate::decoder::{decode, DecoderLayer};
use crate::diffusion::{
    diffuse, finalize_image, neighbor_average, DiffusionMode, MapSnapshot, OutputHead,
    ScoreStrategy, SelectionStep,
};
use crate::encoder::{encode, encode_with_attn, EncoderLayer, FfnKind};
use crate::error::Error;
use crate::image::{apply_mask, downsample, downsample_mask, Image, Mask};
use crate::ledger::{PatchLedger, PatchState};
use crate::loss::{
    feature_pair, l_prec_from_features, l_rec, l_style_from_features, l_total, LossBundle,
    LossWeights, Reduction,
};
use crate::patch::{patchify, positional_embedding, PosKind};
use crate::rng;
use crate::tensor::{Graph, Tensor};
use crate::Result;

// ── Model ───────────────────────────────────────────────────────────────────

/// Optimizer parameter group; the backbone trains at a lower rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Transformer,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d_e: usize,
    pub d_d: usize,
    pub pos_choice: PosChoice,
    pub ffn: FfnKind,
    pub backbone: ConvStack,
    pub projection: Projection1x1,
    /// `[n_refs, d_e]`, added to the projected backbone features.
    pub pos_enc: Tensor,
    pub enc_layers: Vec<EncoderLayer>,
    /// Patch pixel vector to decoder width, `[patch_dim, d_d]`.
    pub embed_w: Tensor,
    /// `[n_patches, d_d]`, added per patch row.
    pub pos_dec: Tensor,
    pub cfa: CfaWeights,
    pub dec_layers: Vec<DecoderLayer>,
    pub head: OutputHead,
    /// Frozen perceptual stack for the losses; never trained, never bound.
    pub phi: ConvStack,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Model> {
        cfg.validate()?;
        let seed = cfg.seed;
        let pos_kind = |tag: &str| match cfg.pos {
            PosChoice::Learned => PosKind::Learned {
                seed: rng::derive(seed, tag),
            },
            PosChoice::Sinusoidal => PosKind::Sinusoidal,
        };
        let backbone = ConvStack::seeded(seed, "backbone", cfg.backbone_stages)?;
        let projection = Projection1x1::seeded(
            seed,
            "projection",
            CHANNEL_PLAN[cfg.backbone_stages],
            cfg.d_e,
        )?;
        let pos_enc = positional_embedding(cfg.n_refs(), cfg.d_e, pos_kind("pos-enc"))?;
        let enc_layers = (0..cfg.enc_layers)
            .map(|i| {
                EncoderLayer::seeded(
                    seed,
                    &format!("encoder/layer{i}"),
                    cfg.d_e,
                    cfg.heads,
                    cfg.ffn,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let embed_w = {
            let mut r = rng::stream(seed, "embed");
            Tensor::new(
                vec![cfg.patch_dim(), cfg.d_d],
                rng::xavier_uniform(cfg.patch_dim(), cfg.d_d, &mut r),
            )?
        };
        let pos_dec = positional_embedding(cfg.n_patches(), cfg.d_d, pos_kind("pos-dec"))?;
        let cfa = CfaWeights::seeded(seed, "cfa", cfg.d_d)?;
        let dec_layers = (0..cfg.dec_layers)
            .map(|i| {
                DecoderLayer::seeded(
                    seed,
                    &format!("decoder/layer{i}"),
                    cfg.d_d,
                    cfg.d_e,
                    cfg.ffn,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = OutputHead::seeded(seed, "head", cfg.d_d, cfg.patch_dim())?;
        let phi = ConvStack::seeded(seed, "phi", cfg.phi_stages())?;
        Ok(Model {
            height: cfg.height,
            width: cfg.width,
            patch: cfg.patch,
            d_e: cfg.d_e,
            d_d: cfg.d_d,
            pos_choice: cfg.pos,
            ffn: cfg.ffn,
            backbone,
            projection,
            pos_enc,
            enc_layers,
            embed_w,
            pos_dec,
            cfa,
            dec_layers,
            head,
            phi,
        })
    }

    /// Walk every trainable parameter in a fixed order. The frozen
    /// perceptual stack is deliberately absent; sinusoidal positional
    /// tables are constants and are skipped as well.
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, ParamGroup, &mut Tensor)) {
        self.backbone
            .visit_params_mut(&mut |name, t| f(name, ParamGroup::Backbone, t));
        self.projection
            .visit_params_mut(&mut |name, t| f(name, ParamGroup::Transformer, t));
        if self.pos_choice == PosChoice::Learned {
            f("pos_enc".into(), ParamGroup::Transformer, &mut self.pos_enc);
        }
        for (i, layer) in self.enc_layers.iter_mut().enumerate() {
            layer.visit_params_mut(&format!("encoder/layer{i}"), &mut |name, t| {
                f(name, ParamGroup::Transformer, t)
            });
        }
        f(
            "embed/weight".into(),
            ParamGroup::Transformer,
            &mut self.embed_w,
        );
        if self.pos_choice == PosChoice::Learned {
            f("pos_dec".into(), ParamGroup::Transformer, &mut self.pos_dec);
        }
        self.cfa
            .visit_params_mut("cfa", &mut |name, t| f(name, ParamGroup::Transformer, t));
        for (i, layer) in self.dec_layers.iter_mut().enumerate() {
            layer.visit_params_mut(&format!("decoder/layer{i}"), &mut |name, t| {
                f(name, ParamGroup::Transformer, t)
            });
        }
        self.head
            .visit_params_mut("head", &mut |name, t| f(name, ParamGroup::Transformer, t));
    }

    /// Snapshot of every trainable parameter (cheap: tensors share data).
    pub fn params(&self) -> Vec<(String, ParamGroup, Tensor)> {
        let mut clone = self.clone();
        let mut out = Vec::new();
        clone.visit_params_mut(&mut |name, group, t| out.push((name, group, t.clone())));
        out
    }

    /// Clone the model onto a graph: every trainable parameter becomes a
    /// differentiable leaf. The returned model is what a training step runs.
    pub fn bind(&self, g: &Graph) -> Model {
        let mut bound = self.clone();
        bound.visit_params_mut(&mut |_, _, t| *t = g.var(t));
        bound
    }
}

// ── Pipeline ────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct PipelineOptions {
    pub lambda: f64,
    pub no_tte: bool,
    pub bridge_enabled: bool,
    pub mode: DiffusionMode,
    pub strategy: ScoreStrategy,
    pub avg_threshold: f64,
    /// Collect attention maps and CFA rows for text dumps.
    pub collect_records: bool,
}

impl PipelineOptions {
    pub fn from_config(cfg: &RunConfig) -> PipelineOptions {
        PipelineOptions {
            lambda: cfg.lambda,
            no_tte: cfg.no_tte,
            bridge_enabled: !cfg.no_bridge,
            mode: cfg.diffusion,
            strategy: cfg.score_strategy,
            avg_threshold: cfg.avg_threshold,
            collect_records: false,
        }
    }
}

/// Inspection artifacts gathered when `collect_records` is on.
#[derive(Clone, Debug)]
pub struct PipelineRecords {
    /// Per encoder layer, per head: the row-stochastic attention map.
    pub encoder_attn: Vec<Vec<MapSnapshot>>,
    pub cfa: Vec<CfaRecord>,
    pub sel_direct: MapSnapshot,
    pub sel_bridge: Option<MapSnapshot>,
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    /// Tracked output at decoder resolution, `[H'*W', 3]` interleaved.
    pub out_tensor: Tensor,
    pub out_small: Image,
    /// Nearest-neighbor x4 upsample of `out_small`.
    pub out_full: Image,
    /// Ground truth downsampled to decoder resolution, and as a constant
    /// tensor for the losses.
    pub gt_small: Image,
    pub gt_tensor: Tensor,
    /// The masked decoder-resolution input the pipeline actually saw.
    pub input_small: Image,
    pub trace: Vec<SelectionStep>,
    pub cost: CostReport,
    pub records: Option<PipelineRecords>,
}

fn row_gather(g: &Graph, x: &Tensor, row: usize, cols: usize) -> Result<Tensor> {
    let index: Arc<Vec<Option<usize>>> =
        Arc::new((0..cols).map(|c| Some(row * cols + c)).collect());
    g.gather(x, index, vec![1, cols])
}

fn detached_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(|c| c.to_vec()).collect()
}

pub fn run_pipeline(
    g: &Graph,
    model: &Model,
    img: &Image,
    mask: &Mask,
    opts: &PipelineOptions,
) -> Result<PipelineRun> {
    if img.height() != model.height || img.width() != model.width {
        return Err(Error::Shape {
            op: "run_pipeline",
            detail: format!(
                "image {}x{} does not match the configured {}x{}",
                img.height(),
                img.width(),
                model.height,
                model.width
            ),
        });
    }
    if img.channels() != 3 {
        return Err(Error::Image {
            detail: "pipeline input must be a 3-channel image".into(),
        });
    }
    if mask.height() != img.height() || mask.width() != img.width() {
        return Err(Error::Shape {
            op: "run_pipeline",
            detail: format!(
                "mask {}x{} does not match image {}x{}",
                mask.height(),
                mask.width(),
                img.height(),
                img.width()
            ),
        });
    }

    // Stage 1: texture references from the masked image.
    let masked = apply_mask(img, mask)?;
    let feats = model.backbone.extract_features(g, &masked)?;
    let e_t = g.add(&model.projection.apply(g, &feats)?, &model.pos_enc)?;
    let (refs, encoder_attn) = if opts.no_tte {
        (e_t, Vec::new())
    } else if opts.collect_records {
        let (r, attns) = encode_with_attn(g, &model.enc_layers, &e_t)?;
        (r, attns)
    } else {
        (encode(g, &model.enc_layers, &e_t)?, Vec::new())
    };

    // Stage 2: the decoder-resolution stream.
    let small = downsample(&masked, 4)?;
    let mask_small = downsample_mask(mask, 4)?;
    let input_small = apply_mask(&small, &mask_small)?;
    let gt_small = downsample(img, 4)?;
    let seq = patchify(&input_small, &mask_small, model.patch)?;
    let mut ledger = PatchLedger::from_sequence(&seq);
    let dim = seq.dim();
    for i in 0..seq.count() {
        let pix = Tensor::new(vec![1, dim], seq.vector(i).to_vec())?;
        let pos = row_gather(g, &model.pos_dec, i, model.d_d)?;
        let emb = g.add(&g.matmul(&pix, &model.embed_w)?, &pos)?;
        ledger.set_embedding(i, emb)?;
    }

    // Stage 3: coarse fill, then the optional neighbor-averaging shortcut.
    let cfa_records = coarse_fill_all(g, &model.cfa, &mut ledger)?;
    if opts.avg_threshold > 0.0 {
        neighbor_average(&mut ledger, &mask_small, opts.avg_threshold)?;
    }

    // Stage 4: decoder stack over coarse and known rows.
    let coarse_ids = ledger.indices_in_state(PatchState::CoarseFilled);
    let known_ids: Vec<usize> = (0..ledger.count())
        .filter(|&i| {
            matches!(
                ledger.entry(i).state(),
                PatchState::Known | PatchState::Inpainted
            )
        })
        .collect();
    let gather_embeddings = |ids: &[usize]| -> Result<Tensor> {
        if ids.is_empty() {
            return Ok(Tensor::zeros(vec![0, model.d_d]));
        }
        let rows: Vec<&Tensor> = ids
            .iter()
            .map(|&i| ledger.entry(i).embedding().expect("embedding set above"))
            .collect();
        g.concat_rows(&rows)
    };
    let coarse = gather_embeddings(&coarse_ids)?;
    let known = gather_embeddings(&known_ids)?;
    let (coarse_f, known_f) = decode(
        g,
        &model.dec_layers,
        &coarse,
        &known,
        &refs,
        opts.lambda,
        opts.bridge_enabled,
    )?;

    // Stage 5: selection over frozen representations, then the head.
    let cand_rows: Vec<(usize, Tensor)> = coarse_ids
        .iter()
        .enumerate()
        .map(|(j, &id)| Ok((id, row_gather(g, &coarse_f, j, model.d_d)?)))
        .collect::<Result<Vec<_>>>()?;
    let cand_detached: Vec<(usize, Vec<f64>)> = coarse_ids
        .iter()
        .cloned()
        .zip(detached_rows(&coarse_f))
        .collect();
    let known_detached: Vec<(usize, Vec<f64>)> = known_ids
        .iter()
        .cloned()
        .zip(detached_rows(&known_f))
        .collect();
    let ref_rows = detached_rows(&refs);
    let last_layer = model
        .dec_layers
        .last()
        .expect("validated: at least one layer");
    let outcome = diffuse(
        &mut ledger,
        CacheProjections::from_layer(last_layer),
        &cand_detached,
        &known_detached,
        &ref_rows,
        opts.lambda,
        opts.bridge_enabled,
        opts.mode,
        opts.strategy,
    )?;

    let (out_tensor, out_small) = finalize_image(g, &ledger, &cand_rows, &model.head)?;
    let out_full = out_small.upsample_nearest(4)?;
    let gt_tensor = image_tensor(&gt_small);

    let records = opts.collect_records.then(|| PipelineRecords {
        encoder_attn: encoder_attn
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|t| MapSnapshot {
                        rows: t.shape()[0],
                        cols: t.shape()[1],
                        values: t.data().to_vec(),
                    })
                    .collect()
            })
            .collect(),
        cfa: cfa_records,
        sel_direct: outcome.initial_direct.clone(),
        sel_bridge: outcome.initial_bridge.clone(),
    });

    Ok(PipelineRun {
        out_tensor,
        out_small,
        out_full,
        gt_small,
        gt_tensor,
        input_small,
        trace: outcome.trace,
        cost: outcome.cost,
        records,
    })
}

/// Run the pipeline and evaluate the combined objective against the
/// downsampled ground truth.
pub fn pipeline_loss(
    g: &Graph,
    model: &Model,
    img: &Image,
    mask: &Mask,
    opts: &PipelineOptions,
    weights: LossWeights,
    reduction: Reduction,
) -> Result<(PipelineRun, LossBundle)> {
    let run = run_pipeline(g, model, img, mask, opts)?;
    let (dh, dw) = (run.gt_small.height(), run.gt_small.width());
    let rec = l_rec(g, &run.out_tensor, &run.gt_tensor, reduction)?;
    let (fo, fg) = feature_pair(g, &model.phi, &run.out_tensor, &run.gt_tensor, dh, dw)?;
    let prec = l_prec_from_features(g, &fo, &fg)?;
    let style = l_style_from_features(g, &fo, &fg, reduction)?;
    let bundle = l_total(g, &rec, &prec, &style, weights)?;
    Ok((run, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    /// 16x16 test geometry: 4x4 decoder grid, patch 2 (4 patches of 12
    /// values), 2 backbone stages (4x4 reference grid).
    fn small_config(seed: u64) -> RunConfig {
        RunConfig {
            height: 16,
            width: 16,
            patch: 2,
            d_e: 8,
            d_d: 8,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            backbone_stages: 2,
            seed,
            ..RunConfig::default()
        }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = crate::rng::stream(seed, "test/model-img");
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
    }

    /// Mask one decoder-resolution patch (all 16 source pixels behind it).
    fn mask_patches(h: usize, w: usize, patches: &[usize], grid_w: usize, patch: usize) -> Mask {
        let mut entries = vec![1u8; h * w];
        for &p in patches {
            let (py, px) = (p / grid_w, p % grid_w);
            // One decoder pixel covers a 4x4 source block.
            for yy in 0..patch * 4 {
                for xx in 0..patch * 4 {
                    entries[(py * patch * 4 + yy) * w + (px * patch * 4 + xx)] = 0;
                }
            }
        }
        Mask::new(h, w, entries).unwrap()
    }

    #[test]
    fn parameter_names_are_unique_and_grouped() {
        let model = Model::new(&small_config(1)).unwrap();
        let params = model.params();
        let names: HashSet<&str> = params.iter().map(|(n, _, _)| n.as_str()).collect();
        assert_eq!(names.len(), params.len(), "duplicate parameter name");
        for (name, group, _) in &params {
            let want = if name.starts_with("backbone/") {
                ParamGroup::Backbone
            } else {
                ParamGroup::Transformer
            };
            assert_eq!(*group, want, "{name} in the wrong group");
        }
        assert!(names.contains("pos_enc") && names.contains("pos_dec"));
        assert!(names.contains("head/weight"));
        assert!(
            !names.iter().any(|n| n.starts_with("phi")),
            "the perceptual stack must stay frozen"
        );
    }

    #[test]
    fn bind_tracks_every_parameter() {
        let model = Model::new(&small_config(2)).unwrap();
        let g = Graph::new();
        let bound = model.bind(&g);
        for ((name, _, raw), (_, _, b)) in model.params().iter().zip(bound.params().iter()) {
            assert!(
                !raw.is_tracked(),
                "{name} in the template must stay untracked"
            );
            assert!(b.is_tracked(), "{name} must be bound to the graph");
            assert_eq!(
                raw.data(),
                b.data(),
                "{name} binding must not change values"
            );
        }
    }

    #[test]
    fn zero_mask_passes_the_input_through() {
        let cfg = small_config(3);
        let model = Model::new(&cfg).unwrap();
        let g = Graph::new();
        let img = random_image(4, 16, 16);
        let mask = Mask::all_known(16, 16);
        let run =
            run_pipeline(&g, &model, &img, &mask, &PipelineOptions::from_config(&cfg)).unwrap();
        assert!(run.trace.is_empty(), "nothing to select");
        let want = downsample(&img, 4).unwrap();
        assert_eq!(
            run.out_small.pixels(),
            want.pixels(),
            "known pixels must pass through"
        );
        assert_eq!(run.out_full.height(), 16);
    }

    #[test]
    fn masked_run_inpaints_every_masked_patch_deterministically() {
        let cfg = small_config(5);
        let model = Model::new(&cfg).unwrap();
        let img = random_image(6, 16, 16);
        let mask = mask_patches(16, 16, &[1, 2], 2, 2);
        let opts = PipelineOptions::from_config(&cfg);
        let g1 = Graph::new();
        let run1 = run_pipeline(&g1, &model, &img, &mask, &opts).unwrap();
        let mut chosen: Vec<usize> = run1.trace.iter().map(|s| s.chosen).collect();
        chosen.sort_unstable();
        assert_eq!(chosen, vec![1, 2]);
        // Determinism: a second run is bit-identical.
        let g2 = Graph::new();
        let run2 = run_pipeline(&g2, &model, &img, &mask, &opts).unwrap();
        assert_eq!(run1.out_small.pixels(), run2.out_small.pixels());
        assert_eq!(run1.cost, run2.cost);
        for (a, b) in run1.trace.iter().zip(&run2.trace) {
            assert_eq!((a.t, a.chosen), (b.t, b.chosen));
            assert_eq!(a.probability.to_bits(), b.probability.to_bits());
        }
        // Known patches (0 and 3) keep their source pixels bit-exactly.
        let small_in = downsample(&img, 4).unwrap();
        for (py, px) in [(0usize, 0usize), (1, 1)] {
            for y in 0..2 {
                for x in 0..2 {
                    for c in 0..3 {
                        assert_eq!(
                            run1.out_small.get(py * 2 + y, px * 2 + x, c),
                            small_in.get(py * 2 + y, px * 2 + x, c),
                            "known pixel drifted"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn lambda_one_matches_bridge_ablated_run_bitwise() {
        let cfg = small_config(7);
        let model = Model::new(&cfg).unwrap();
        let img = random_image(8, 16, 16);
        let mask = mask_patches(16, 16, &[0, 3], 2, 2);
        let mut opts = PipelineOptions::from_config(&cfg);
        opts.lambda = 1.0;
        let g1 = Graph::new();
        let full = run_pipeline(&g1, &model, &img, &mask, &opts).unwrap();
        opts.bridge_enabled = false;
        let g2 = Graph::new();
        let ablated = run_pipeline(&g2, &model, &img, &mask, &opts).unwrap();
        assert_eq!(full.out_small.pixels(), ablated.out_small.pixels());
        assert_eq!(full.cost, ablated.cost);
        for (a, b) in full.trace.iter().zip(&ablated.trace) {
            assert_eq!(a.probability.to_bits(), b.probability.to_bits());
        }
    }

    #[test]
    fn disabling_the_texture_encoder_changes_the_output() {
        let cfg = small_config(9);
        let model = Model::new(&cfg).unwrap();
        let img = random_image(10, 16, 16);
        let mask = mask_patches(16, 16, &[1], 2, 2);
        let mut opts = PipelineOptions::from_config(&cfg);
        let g1 = Graph::new();
        let full = run_pipeline(&g1, &model, &img, &mask, &opts).unwrap();
        opts.no_tte = true;
        let g2 = Graph::new();
        let raw_refs = run_pipeline(&g2, &model, &img, &mask, &opts).unwrap();
        assert_ne!(
            full.out_small.pixels(),
            raw_refs.out_small.pixels(),
            "references without self-attention must lead elsewhere"
        );
    }

    #[test]
    fn grayscale_input_is_rejected() {
        let cfg = small_config(11);
        let model = Model::new(&cfg).unwrap();
        let g = Graph::new();
        let img = Image::new(16, 16, 1, vec![0.5; 256]).unwrap();
        let mask = Mask::all_known(16, 16);
        let err =
            run_pipeline(&g, &model, &img, &mask, &PipelineOptions::from_config(&cfg)).unwrap_err();
        assert!(matches!(err, Error::Image { .. }), "{err}");
    }

    #[test]
    fn pipeline_loss_is_finite_and_differentiable() {
        let cfg = small_config(12);
        let model = Model::new(&cfg).unwrap();
        let img = random_image(13, 16, 16);
        let mask = mask_patches(16, 16, &[2], 2, 2);
        let g = Graph::new();
        let bound = model.bind(&g);
        let (_, bundle) = pipeline_loss(
            &g,
            &bound,
            &img,
            &mask,
            &PipelineOptions::from_config(&cfg),
            LossWeights::default(),
            Reduction::Mean,
        )
        .unwrap();
        assert!(bundle.tran.is_finite() && bundle.tran > 0.0);
        let grads = g.backward(&bundle.tran_tensor).unwrap();
        // At least the head weight must receive gradient signal.
        let head_grad = grads
            .get(&bound.head.weight)
            .expect("head weight on the tape");
        assert!(
            head_grad.iter().any(|&v| v != 0.0),
            "head gradient is identically zero"
        );
    }

    #[test]
    fn records_are_collected_on_request() {
        let cfg = small_config(14);
        let model = Model::new(&cfg).unwrap();
        let img = random_image(15, 16, 16);
        let mask = mask_patches(16, 16, &[1], 2, 2);
        let mut opts = PipelineOptions::from_config(&cfg);
        opts.collect_records = true;
        let g = Graph::new();
        let run = run_pipeline(&g, &model, &img, &mask, &opts).unwrap();
        let rec = run.records.expect("records requested");
        assert_eq!(rec.encoder_attn.len(), 2, "one entry per encoder layer");
        assert_eq!(rec.encoder_attn[0].len(), 2, "one map per head");
        let map = &rec.encoder_attn[0][0];
        assert_eq!((map.rows, map.cols), (16, 16));
        for row in map.values.chunks(map.cols) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "attention rows are stochastic");
        }
        assert_eq!(rec.cfa.len(), 1);
        assert_eq!(rec.sel_direct.rows, 1);
        assert!(rec.sel_bridge.is_some());
    }
}
