//! Toy training: decoupled-weight-decay Adam over the full pipeline.
//!
//! Each optimizer step evaluates the combined objective on the whole toy
//! dataset (accumulated in chunks of `batch` images, a memory knob that
//! does not change the math). Full-batch steps keep the logged loss a pure
//! function of the weights, so a zero learning rate yields a bit-for-bit
//! constant curve and fixed seeds yield identical curves across reruns.
//!
//! Two parameter groups train at different rates: the reference backbone
//! at `lr_backbone`, everything else at `lr`. Weight decay is decoupled —
//! applied directly to the weights, scaled by the group's learning rate,
//! never mixed into the moment estimates.

use std::collections::HashMap;

use rand::Rng;

use crate::config::RunConfig;
use crate::error::Error;
use crate::image::{Image, Mask};
use crate::model::{Model, ParamGroup, PipelineOptions};
use crate::rng;
use crate::tensor::Graph;
use crate::Result;

/// Size of the synthetic toy dataset.
pub const TOY_IMAGE_COUNT: usize = 8;

// ── Optimizer ───────────────────────────────────────────────────────────────

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay and per-group learning rates.
pub struct AdamW {
    lr_transformer: f64,
    lr_backbone: f64,
    weight_decay: f64,
    step: usize,
    moments: HashMap<String, Moments>,
}

impl AdamW {
    pub fn from_config(cfg: &RunConfig) -> AdamW {
        AdamW {
            lr_transformer: cfg.lr,
            lr_backbone: cfg.lr_backbone,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one update from per-parameter gradient sums keyed by name.
    /// A parameter absent from `grads` (a branch the forward never took)
    /// receives a zero gradient: its moments decay and only weight decay
    /// moves it.
    pub fn apply(&mut self, model: &mut Model, grads: &HashMap<String, Vec<f64>>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let mut failure: Option<Error> = None;
        model.visit_params_mut(&mut |name, group, tensor| {
            if failure.is_some() {
                return;
            }
            let n = tensor.numel();
            let zero;
            let grad: &[f64] = match grads.get(&name) {
                Some(g) => g,
                None => {
                    zero = vec![0.0; n];
                    &zero
                }
            };
            if grad.len() != n {
                failure = Some(Error::Train {
                    step: self.step,
                    detail: format!(
                        "gradient for {name} has {} values, parameter has {n}",
                        grad.len()
                    ),
                });
                return;
            }
            let lr = match group {
                ParamGroup::Backbone => self.lr_backbone,
                ParamGroup::Transformer => self.lr_transformer,
            };
            let slot = self.moments.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let mut values = tensor.data().to_vec();
            for i in 0..n {
                slot.m[i] = BETA1 * slot.m[i] + (1.0 - BETA1) * grad[i];
                slot.v[i] = BETA2 * slot.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                values[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + self.weight_decay * values[i]);
            }
            *tensor = crate::tensor::Tensor::new(tensor.shape().to_vec(), values)
                .expect("same shape as before");
        });
        match failure {
            Some(err) => Err(err),
            None => Ok(()),
        }
    }
}

// ── Synthetic data ──────────────────────────────────────────────────────────

/// Deterministic toy images: smooth gradients, stripes, and radial blobs,
/// each with a seeded tint so no two are alike. Values stay in [0, 1].
pub fn synthetic_images(seed: u64, count: usize, h: usize, w: usize) -> Vec<Image> {
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, &format!("synthetic/image/{i}"));
            let tint: [f64; 3] = [r.random(), r.random(), r.random()];
            let freq = 1.0 + r.random::<f64>() * 3.0;
            let phase = r.random::<f64>() * std::f64::consts::TAU;
            let (cy, cx) = (r.random::<f64>() * h as f64, r.random::<f64>() * w as f64);
            let mut pixels = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
                    let base = match i % 3 {
                        0 => 0.5 * (fy + fx),
                        1 => {
                            0.5 + 0.5
                                * (std::f64::consts::TAU * freq * (fx + 0.5 * fy) + phase).sin()
                        }
                        _ => {
                            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                            (-d * 4.0 / (h + w) as f64).exp()
                        }
                    };
                    for &t in &tint {
                        pixels.push((base * (0.4 + 0.6 * t)).clamp(0.0, 1.0));
                    }
                }
            }
            Image::new(h, w, 3, pixels).expect("constructed to extent")
        })
        .collect()
}

/// Rectangular holes confined to the top half of the frame, so the bottom
/// half always supplies fully known patches for the decoder's known set.
pub fn synthetic_masks(seed: u64, count: usize, h: usize, w: usize) -> Vec<Mask> {
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, &format!("synthetic/mask/{i}"));
            let half = h / 2;
            let rh = (half / 2).max(1) + r.random_range(0..(half / 2).max(1));
            let rw = (w / 4).max(1) + r.random_range(0..(w / 2).max(1));
            let y0 = r.random_range(0..=(half - rh.min(half)));
            let x0 = r.random_range(0..=(w - rw.min(w)));
            let mut entries = vec![1u8; h * w];
            for y in y0..(y0 + rh).min(half) {
                for x in x0..(x0 + rw).min(w) {
                    entries[y * w + x] = 0;
                }
            }
            Mask::new(h, w, entries).expect("constructed to extent")
        })
        .collect()
}

// ── The training loop ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub rec: f64,
    pub prec: f64,
    pub style: f64,
}

/// Render the loss curve as text: one header, one line per step.
pub fn format_curve(entries: &[TrainLogEntry]) -> String {
    let mut out = String::from("# step loss rec prec style\n");
    for e in entries {
        out.push_str(&format!(
            "{:>6} {:>20.12} {:>20.12} {:>20.12} {:>20.12}\n",
            e.step, e.loss, e.rec, e.prec, e.style
        ));
    }
    out
}

/// The built-in toy dataset for a config's geometry and seed.
pub fn toy_dataset(cfg: &RunConfig) -> (Vec<Image>, Vec<Mask>) {
    (
        synthetic_images(cfg.seed, TOY_IMAGE_COUNT, cfg.height, cfg.width),
        synthetic_masks(cfg.seed, TOY_IMAGE_COUNT, cfg.height, cfg.width),
    )
}

/// One full-batch gradient evaluation: mean losses and mean gradient sums
/// over all image/mask pairs. The forward runs in chunks of `batch` images,
/// each on its own graph, so tape memory stays proportional to one image.
/// Public so a reloaded snapshot can be probed for its next-step loss.
pub fn evaluate_full_batch(
    model: &Model,
    images: &[Image],
    masks: &[Mask],
    opts: &PipelineOptions,
    cfg: &RunConfig,
    step: usize,
) -> Result<(TrainLogEntry, HashMap<String, Vec<f64>>)> {
    let n = images.len() as f64;
    let mut sums = HashMap::<String, Vec<f64>>::new();
    let (mut loss, mut rec, mut prec, mut style) = (0.0, 0.0, 0.0, 0.0);
    for chunk in images
        .iter()
        .zip(masks)
        .collect::<Vec<_>>()
        .chunks(cfg.batch)
    {
        for (img, mask) in chunk {
            let g = Graph::new();
            let bound = model.bind(&g);
            let (_, bundle) = crate::model::pipeline_loss(
                &g,
                &bound,
                img,
                mask,
                opts,
                cfg.loss_weights(),
                cfg.reduction,
            )?;
            if !bundle.tran.is_finite() {
                return Err(Error::Train {
                    step,
                    detail: format!("loss diverged to {}", bundle.tran),
                });
            }
            loss += bundle.tran / n;
            rec += bundle.rec / n;
            prec += bundle.prec / n;
            style += bundle.style / n;
            let grads = g.backward(&bundle.tran_tensor)?;
            for (name, _, tensor) in bound.params() {
                if let Some(gvals) = grads.get(&tensor) {
                    let slot = sums.entry(name).or_insert_with(|| vec![0.0; gvals.len()]);
                    for (s, &v) in slot.iter_mut().zip(gvals) {
                        *s += v / n;
                    }
                }
            }
        }
    }
    Ok((
        TrainLogEntry {
            step,
            loss,
            rec,
            prec,
            style,
        },
        sums,
    ))
}

/// Train on the built-in synthetic dataset for `cfg.steps` steps. Returns
/// the trained model and the per-step loss curve. Aborts with the step
/// number if the loss leaves the finite range.
pub fn train_toy(cfg: &RunConfig) -> Result<(Model, Vec<TrainLogEntry>)> {
    cfg.validate()?;
    let mut model = Model::new(cfg)?;
    let (images, masks) = toy_dataset(cfg);
    let opts = PipelineOptions::from_config(cfg);
    let mut optimizer = AdamW::from_config(cfg);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let (entry, grads) = evaluate_full_batch(&model, &images, &masks, &opts, cfg, step)?;
        optimizer.apply(&mut model, &grads)?;
        curve.push(entry);
    }
    Ok((model, curve))
}
