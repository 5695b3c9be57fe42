//! Reconstruction, perceptual, and style losses.
//!
//! All three compare the inpainted output against the ground truth at the
//! working (decoder) resolution and combine into the training objective
//!
//! ```text
//! l_tran = w_rec * l_rec + w_prec * l_prec + w_style * l_style
//! ```
//!
//! with default weights (10, 0.1, 250). The perceptual and style terms run
//! both images through a frozen random convolution stack and compare
//! activations; random features are a standing-in for a pretrained net and
//! are plenty to give the losses distinct minima.
//!
//! L1 norms in the reconstruction and style terms are taken as *means* so
//! magnitudes do not scale with resolution (a `Reduction` knob restores
//! plain sums). The perceptual term carries its own per-stage `1/N_i`
//! normalizer and ignores the knob. Gram matrices are normalized by
//! `C * HW` to keep the style term bounded on random features.

use crate::backbone::{ConvStack, StageFeatures};
use crate::error::Error;
use crate::tensor::{Graph, Tensor};
use crate::Result;

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub prec: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 10.0,
            prec: 0.1,
            style: 250.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Mean absolute difference (the default; resolution-independent).
    Mean,
    /// Plain summed absolute difference.
    Sum,
}

impl Reduction {
    fn apply(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        match self {
            Reduction::Mean => g.mean_all(x),
            Reduction::Sum => g.sum_all(x),
        }
    }
}

// ── Individual losses ───────────────────────────────────────────────────────

/// Pixel-wise absolute difference between two equally-shaped tensors.
pub fn l_rec(g: &Graph, out: &Tensor, gt: &Tensor, reduction: Reduction) -> Result<Tensor> {
    if out.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "l_rec",
            detail: format!("output {:?} vs ground truth {:?}", out.shape(), gt.shape()),
        });
    }
    reduction.apply(g, &g.abs(&g.sub(out, gt)?)?)
}

/// Run both images through the frozen feature stack once; the perceptual
/// and style losses share these activations.
pub fn feature_pair(
    g: &Graph,
    phi: &ConvStack,
    out: &Tensor,
    gt: &Tensor,
    h: usize,
    w: usize,
) -> Result<(StageFeatures, StageFeatures)> {
    if out.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "feature_pair",
            detail: format!("output {:?} vs ground truth {:?}", out.shape(), gt.shape()),
        });
    }
    Ok((phi.features(g, out, h, w)?, phi.features(g, gt, h, w)?))
}

/// Perceptual term from precomputed activations: per stage, the summed
/// absolute activation difference over its own entry count `N_i`.
pub fn l_prec_from_features(
    g: &Graph,
    fo: &[(Tensor, usize, usize)],
    fg: &[(Tensor, usize, usize)],
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for ((a, _, _), (b, _, _)) in fo.iter().zip(fg) {
        let n = a.numel() as f64;
        let term = g.scale(&g.sum_all(&g.abs(&g.sub(a, b)?)?)?, 1.0 / n)?;
        total = Some(match total {
            Some(t) => g.add(&t, &term)?,
            None => term,
        });
    }
    total.ok_or(Error::Shape {
        op: "l_prec",
        detail: "feature stack produced no stages".into(),
    })
}

/// Perceptual loss between two `[H*W, C]` image tensors.
pub fn l_prec(
    g: &Graph,
    phi: &ConvStack,
    out: &Tensor,
    gt: &Tensor,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let (fo, fg) = feature_pair(g, phi, out, gt, h, w)?;
    l_prec_from_features(g, &fo, &fg)
}

/// Normalized Gram matrix `A A^T / (C * HW)` of a `[C, HW]` activation.
pub fn gram(g: &Graph, a: &Tensor) -> Result<Tensor> {
    let (c, hw) = a.dims2("gram")?;
    g.scale(&g.matmul(a, &g.transpose(a)?)?, 1.0 / (c * hw) as f64)
}

/// Style term from precomputed activations: mean over stages of the
/// (reduced) absolute Gram difference. Stage activations arrive in the
/// `[H*W, C]` layout the feature stack emits and are transposed here.
pub fn l_style_from_features(
    g: &Graph,
    fo: &[(Tensor, usize, usize)],
    fg: &[(Tensor, usize, usize)],
    reduction: Reduction,
) -> Result<Tensor> {
    if fo.is_empty() {
        return Err(Error::Shape {
            op: "l_style",
            detail: "feature stack produced no stages".into(),
        });
    }
    let mut total: Option<Tensor> = None;
    for ((a, _, _), (b, _, _)) in fo.iter().zip(fg) {
        let ga = gram(g, &g.transpose(a)?)?;
        let gb = gram(g, &g.transpose(b)?)?;
        let term = reduction.apply(g, &g.abs(&g.sub(&ga, &gb)?)?)?;
        total = Some(match total {
            Some(t) => g.add(&t, &term)?,
            None => term,
        });
    }
    g.scale(&total.expect("at least one stage"), 1.0 / fo.len() as f64)
}

/// Style loss between two `[H*W, C]` image tensors.
pub fn l_style(
    g: &Graph,
    phi: &ConvStack,
    out: &Tensor,
    gt: &Tensor,
    h: usize,
    w: usize,
    reduction: Reduction,
) -> Result<Tensor> {
    let (fo, fg) = feature_pair(g, phi, out, gt, h, w)?;
    l_style_from_features(g, &fo, &fg, reduction)
}

// ── Combination ─────────────────────────────────────────────────────────────

/// The combined objective with scalar copies of every component.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub rec: f64,
    pub prec: f64,
    pub style: f64,
    pub tran: f64,
    /// Tracked scalar for the backward pass.
    pub tran_tensor: Tensor,
}

/// Weighted combination, computed in the canonical order
/// `(w_r*rec + w_p*prec) + w_s*style` so the bundle invariant
/// `tran == w_r*rec + w_p*prec + w_s*style` holds bit-for-bit.
pub fn l_total(
    g: &Graph,
    rec: &Tensor,
    prec: &Tensor,
    style: &Tensor,
    weights: LossWeights,
) -> Result<LossBundle> {
    for (name, w) in [
        ("rec", weights.rec),
        ("prec", weights.prec),
        ("style", weights.style),
    ] {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::Config {
                field: format!("loss_weight_{name}"),
                detail: format!("{w} is not a nonnegative finite weight"),
            });
        }
    }
    for (name, t) in [("rec", rec), ("prec", prec), ("style", style)] {
        if t.numel() != 1 {
            return Err(Error::Shape {
                op: "l_total",
                detail: format!("component {name} is not a scalar: {:?}", t.shape()),
            });
        }
    }
    let tran_tensor = g.add(
        &g.add(&g.scale(rec, weights.rec)?, &g.scale(prec, weights.prec)?)?,
        &g.scale(style, weights.style)?,
    )?;
    Ok(LossBundle {
        rec: rec.item()?,
        prec: prec.item()?,
        style: style.item()?,
        tran: tran_tensor.item()?,
        tran_tensor,
    })
}

// ── Eigenvalue oracle ───────────────────────────────────────────────────────

/// Eigenvalues of a symmetric `n x n` matrix by cyclic Jacobi rotations.
/// This is a verification oracle (used to certify Gram matrices positive
/// semidefinite), not a tuned numerical routine.
pub fn symmetric_eigenvalues(mat: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(mat.len(), n * n, "matrix must be square");
    let mut a = mat.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= 1e-28 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::image_tensor;
    use crate::image::Image;
    use rand::Rng;

    fn tensor(seed: u64, n: usize, c: usize) -> Tensor {
        let mut rng = crate::rng::stream(seed, "test/loss");
        Tensor::new(
            vec![n, c],
            (0..n * c).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    fn phi(seed: u64, stages: usize) -> ConvStack {
        ConvStack::seeded(seed, "test/phi", stages).unwrap()
    }

    fn rgb_image_tensor(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = crate::rng::stream(seed, "test/loss-img");
        let img = Image::new(
            h,
            w,
            3,
            (0..h * w * 3).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        image_tensor(&img)
    }

    #[test]
    fn identical_arguments_zero_every_loss() {
        let g = Graph::new();
        let x = rgb_image_tensor(1, 4, 4);
        let p = phi(2, 2);
        assert_eq!(
            l_rec(&g, &x, &x, Reduction::Mean).unwrap().item().unwrap(),
            0.0
        );
        assert_eq!(l_prec(&g, &p, &x, &x, 4, 4).unwrap().item().unwrap(), 0.0);
        assert_eq!(
            l_style(&g, &p, &x, &x, 4, 4, Reduction::Mean)
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn unit_gap_has_unit_mean_reconstruction() {
        let g = Graph::new();
        let a = Tensor::zeros(vec![3, 5]);
        let b = Tensor::new(vec![3, 5], vec![1.0; 15]).unwrap();
        assert_eq!(
            l_rec(&g, &a, &b, Reduction::Mean).unwrap().item().unwrap(),
            1.0
        );
        assert_eq!(
            l_rec(&g, &a, &b, Reduction::Sum).unwrap().item().unwrap(),
            15.0
        );
    }

    #[test]
    fn reconstruction_matches_per_pixel_oracle() {
        let g = Graph::new();
        let a = tensor(3, 4, 3);
        let b = tensor(4, 4, 3);
        let got = l_rec(&g, &a, &b, Reduction::Mean).unwrap().item().unwrap();
        let want: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 12.0;
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn mismatched_extents_are_rejected() {
        let g = Graph::new();
        let a = Tensor::zeros(vec![2, 2]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(
            l_rec(&g, &a, &b, Reduction::Mean),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn perceptual_loss_matches_stagewise_oracle() {
        let g = Graph::new();
        let p = phi(5, 2);
        let out = rgb_image_tensor(6, 4, 4);
        let gt = rgb_image_tensor(7, 4, 4);
        let got = l_prec(&g, &p, &out, &gt, 4, 4).unwrap().item().unwrap();
        let (fo, fg) = feature_pair(&g, &p, &out, &gt, 4, 4).unwrap();
        let mut want = 0.0;
        for ((a, _, _), (b, _, _)) in fo.iter().zip(&fg) {
            let sum: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .sum();
            want += sum / a.numel() as f64;
        }
        assert!((got - want).abs() < 1e-12, "{got} vs oracle {want}");
    }

    #[test]
    fn zero_images_have_zero_perceptual_loss() {
        // Stage biases start at zero, so zero inputs produce zero activations.
        let g = Graph::new();
        let p = phi(8, 2);
        let z = Tensor::zeros(vec![16, 3]);
        assert_eq!(l_prec(&g, &p, &z, &z, 4, 4).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn gram_closed_form_and_zero_cases() {
        let g = Graph::new();
        let a = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(
            gram(&g, &a).unwrap().data(),
            &[1.0],
            "[1,1] self-product over C*HW=2"
        );
        let z = Tensor::zeros(vec![3, 4]);
        assert!(gram(&g, &z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gram_is_symmetric_and_positive_semidefinite() {
        let g = Graph::new();
        for seed in 0..10u64 {
            let a = tensor(100 + seed, 3, 5); // [C=3, HW=5]
            let gm = gram(&g, &a).unwrap();
            let d = gm.data();
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(d[i * 3 + j], d[j * 3 + i], "gram must be exactly symmetric");
                }
            }
            for ev in symmetric_eigenvalues(d, 3) {
                assert!(
                    ev >= -1e-12,
                    "eigenvalue {ev} below PSD tolerance (seed {seed})"
                );
            }
        }
    }

    #[test]
    fn jacobi_oracle_recovers_known_spectra() {
        // Diagonal matrix: eigenvalues are the diagonal.
        let mut evs = symmetric_eigenvalues(&[3.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 2.0], 3);
        evs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((evs[0] + 1.0).abs() < 1e-12 && (evs[2] - 3.0).abs() < 1e-12);
        // 2x2 with known closed form: [[2,1],[1,2]] -> {1, 3}.
        let mut evs = symmetric_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        evs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((evs[0] - 1.0).abs() < 1e-12 && (evs[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn style_loss_matches_stagewise_oracle() {
        let g = Graph::new();
        let p = phi(9, 2);
        let out = rgb_image_tensor(10, 4, 4);
        let gt = rgb_image_tensor(11, 4, 4);
        let got = l_style(&g, &p, &out, &gt, 4, 4, Reduction::Mean)
            .unwrap()
            .item()
            .unwrap();
        let (fo, fg) = feature_pair(&g, &p, &out, &gt, 4, 4).unwrap();
        let mut want = 0.0;
        for ((a, _, _), (b, _, _)) in fo.iter().zip(&fg) {
            let ga = gram(&g, &g.transpose(a).unwrap()).unwrap();
            let gb = gram(&g, &g.transpose(b).unwrap()).unwrap();
            let n = ga.numel() as f64;
            want += ga
                .data()
                .iter()
                .zip(gb.data())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / n;
        }
        want /= fo.len() as f64;
        assert!((got - want).abs() < 1e-12, "{got} vs oracle {want}");
    }

    #[test]
    fn single_stage_style_reduces_to_one_gram_difference() {
        let g = Graph::new();
        let p = phi(12, 1);
        let out = rgb_image_tensor(13, 4, 4);
        let gt = rgb_image_tensor(14, 4, 4);
        let got = l_style(&g, &p, &out, &gt, 4, 4, Reduction::Mean)
            .unwrap()
            .item()
            .unwrap();
        let (fo, fg) = feature_pair(&g, &p, &out, &gt, 4, 4).unwrap();
        let ga = gram(&g, &g.transpose(&fo[0].0).unwrap()).unwrap();
        let gb = gram(&g, &g.transpose(&fg[0].0).unwrap()).unwrap();
        let want = ga
            .data()
            .iter()
            .zip(gb.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / ga.numel() as f64;
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn paper_weights_combine_unit_components_to_260_point_1() {
        let g = Graph::new();
        let one = Tensor::scalar(1.0);
        let bundle = l_total(&g, &one, &one, &one, LossWeights::default()).unwrap();
        assert!(
            (bundle.tran - 260.1).abs() < 1e-9,
            "10 + 0.1 + 250 = {}",
            bundle.tran
        );
        let zero = Tensor::scalar(0.0);
        let z = l_total(&g, &zero, &zero, &zero, LossWeights::default()).unwrap();
        assert_eq!(z.tran, 0.0);
    }

    #[test]
    fn combination_is_the_exact_weighted_sum() {
        let g = Graph::new();
        let (r, p, s) = (0.37, 1.91, 0.0042);
        let bundle = l_total(
            &g,
            &Tensor::scalar(r),
            &Tensor::scalar(p),
            &Tensor::scalar(s),
            LossWeights::default(),
        )
        .unwrap();
        let want = (10.0 * r + 0.1 * p) + 250.0 * s;
        assert_eq!(
            bundle.tran, want,
            "canonical-order weighted sum must match bitwise"
        );
        assert_eq!((bundle.rec, bundle.prec, bundle.style), (r, p, s));
    }

    #[test]
    fn negative_weights_are_rejected() {
        let g = Graph::new();
        let one = Tensor::scalar(1.0);
        let bad = LossWeights {
            rec: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(
            l_total(&g, &one, &one, &one, bad),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        // Gradient of the combined loss with respect to output pixels. The
        // ground truth sits a comfortable margin away from the output so the
        // absolute-value kinks stay out of the difference stencil.
        let p = phi(15, 1);
        let mut rng = crate::rng::stream(16, "test/loss-fd");
        let n = 16; // 4x4 RGB
        let out0: Vec<f64> = (0..n * 3)
            .map(|_| 0.3 + 0.4 * rng.random::<f64>())
            .collect();
        let gt: Vec<f64> = out0
            .iter()
            .map(|v| v + 0.15 + 0.05 * (v * 37.0).sin())
            .collect();
        let gt = Tensor::new(vec![n, 3], gt).unwrap();
        let x0 = Tensor::new(vec![n, 3], out0).unwrap();
        let err = crate::gradcheck::check_gradients(
            |g, x| {
                let rec = l_rec(g, x, &gt, Reduction::Mean)?;
                let (fo, fg) = feature_pair(g, &p, x, &gt, 4, 4)?;
                let prec = l_prec_from_features(g, &fo, &fg)?;
                let style = l_style_from_features(g, &fo, &fg, Reduction::Mean)?;
                Ok(l_total(g, &rec, &prec, &style, LossWeights::default())?.tran_tensor)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative gradient error {err}");
    }
}
