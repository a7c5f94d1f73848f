//! Smooth rationale masks built from per-token weights and kernel widths,
//! and the continuous blending of embeddings toward a background vector.
//!
//! Each token `i` contributes `w_i * exp(-d(i, j)^2 / sigma_i)` to the logit
//! of every token `j`; the mask value is the sigmoid of the summed
//! contributions. Wide kernels let one strong weight switch on a whole
//! neighbourhood, which biases masks toward contiguous spans.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower bound of the kernel width produced by [`sigma_transform`].
pub const SIGMA_MIN: f64 = 0.1;
/// Upper bound of the kernel width produced by [`sigma_transform`].
pub const SIGMA_MAX: f64 = 100.0;

/// Raw per-class outputs of the rationale head after the width transform.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskHeadOutput {
    /// `[num_classes x seq_len]` token weights.
    pub w: Array2<f64>,
    /// `[num_classes x seq_len]` kernel widths, all within `[SIGMA_MIN, SIGMA_MAX]`.
    pub sigma: Array2<f64>,
}

/// Per-class, per-token mask values in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RationaleMask {
    /// `[num_classes x seq_len]`.
    pub m: Array2<f64>,
}

impl RationaleMask {
    pub fn num_classes(&self) -> usize {
        self.m.nrows()
    }

    pub fn len(&self) -> usize {
        self.m.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.m.ncols() == 0
    }

    pub fn class(&self, c: usize) -> ArrayView1<'_, f64> {
        self.m.row(c)
    }
}

/// Keep/drop inputs produced by [`blend_inputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlendedPair {
    /// Rows retain the masked evidence, the rest fades to `background`.
    pub x_keep: Array2<f64>,
    /// Complement: the masked evidence fades to `background`.
    pub x_drop: Array2<f64>,
    pub background: Array1<f64>,
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Default token coordinates `0, 1, ..., len - 1`.
pub fn default_positions(len: usize) -> Vec<f64> {
    (0..len).map(|i| i as f64).collect()
}

fn check_mask_inputs(w: &[f64], sigma: &[f64], positions: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::shape("mask needs at least one token"));
    }
    if w.len() != sigma.len() || w.len() != positions.len() {
        return Err(Error::shape(format!(
            "w has {} entries, sigma {}, positions {}",
            w.len(),
            sigma.len(),
            positions.len()
        )));
    }
    if let Some((i, s)) = sigma.iter().enumerate().find(|(_, s)| s.is_nan() || **s <= 0.0) {
        return Err(Error::invalid(format!("sigma[{i}] = {s} is not positive")));
    }
    Ok(())
}

/// Mask logits `z_j = sum_i w_i * exp(-d(i,j)^2 / sigma_i)`.
fn mask_logits(w: &[f64], sigma: &[f64], positions: &[f64]) -> Vec<f64> {
    let n = w.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let inv = 1.0 / sigma[i];
        for (j, zj) in z.iter_mut().enumerate() {
            let d = positions[i] - positions[j];
            *zj += w[i] * (-d * d * inv).exp();
        }
    }
    z
}

/// Mask values `m_j = sigmoid(sum_i w_i * exp(-d(i,j)^2 / sigma_i))` with
/// `d(i, j) = |positions[i] - positions[j]|`.
pub fn compute_mask(w: &[f64], sigma: &[f64], positions: &[f64]) -> Result<Vec<f64>> {
    check_mask_inputs(w, sigma, positions)?;
    Ok(mask_logits(w, sigma, positions)
        .into_iter()
        .map(sigmoid)
        .collect())
}

/// Vector-Jacobian product of [`compute_mask`].
///
/// Given the forward result `m` and an upstream gradient `grad_m`, returns
/// `(dL/dw, dL/dsigma)`.
pub fn compute_mask_backward(
    w: &[f64],
    sigma: &[f64],
    positions: &[f64],
    m: &[f64],
    grad_m: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = w.len();
    let grad_z: Vec<f64> = m
        .iter()
        .zip(grad_m)
        .map(|(&mj, &g)| g * mj * (1.0 - mj))
        .collect();
    let mut grad_w = vec![0.0; n];
    let mut grad_sigma = vec![0.0; n];
    for i in 0..n {
        let inv = 1.0 / sigma[i];
        let mut gw = 0.0;
        let mut gs = 0.0;
        for j in 0..n {
            let d = positions[i] - positions[j];
            let d2 = d * d;
            let k = (-d2 * inv).exp();
            gw += grad_z[j] * k;
            gs += grad_z[j] * k * d2;
        }
        grad_w[i] = gw;
        grad_sigma[i] = gs * w[i] * inv * inv;
    }
    (grad_w, grad_sigma)
}

/// Row-wise [`compute_mask`] over a `[classes x len]` head output, using
/// default token positions.
pub fn compute_masks(head: &MaskHeadOutput) -> Result<RationaleMask> {
    if head.w.dim() != head.sigma.dim() {
        return Err(Error::shape(format!(
            "w is {:?} but sigma is {:?}",
            head.w.dim(),
            head.sigma.dim()
        )));
    }
    let (classes, len) = head.w.dim();
    let positions = default_positions(len);
    let mut m = Array2::zeros((classes, len));
    for c in 0..classes {
        let w = head.w.row(c).to_vec();
        let s = head.sigma.row(c).to_vec();
        let row = compute_mask(&w, &s, &positions)?;
        m.row_mut(c).assign(&Array1::from(row));
    }
    Ok(RationaleMask { m })
}

/// Positive kernel width: `sigma_min + softplus(raw)`, clipped at `sigma_max`.
pub fn sigma_transform(raw: f64, sigma_min: f64, sigma_max: f64) -> f64 {
    (sigma_min + softplus(raw)).min(sigma_max)
}

/// Derivative of [`sigma_transform`] with respect to `raw` (zero once clipped).
pub fn sigma_transform_grad(raw: f64, sigma_min: f64, sigma_max: f64) -> f64 {
    if sigma_min + softplus(raw) >= sigma_max {
        0.0
    } else {
        sigmoid(raw)
    }
}

/// Raw value whose transform equals `target`; used to offset the head so
/// initial widths start at a chosen value.
pub fn sigma_transform_inverse(target: f64, sigma_min: f64) -> f64 {
    let y = target - sigma_min;
    // softplus^-1(y) = ln(e^y - 1)
    y + (-(-y).exp()).ln_1p()
}

/// Blend embeddings toward `background` according to one mask value per row.
///
/// Rows flagged in `keep` are copied unchanged into both outputs.
pub fn blend_inputs(
    x: ArrayView2<'_, f64>,
    m: &[f64],
    background: ArrayView1<'_, f64>,
    keep: &[bool],
) -> Result<BlendedPair> {
    let (rows, dim) = x.dim();
    if m.len() != rows || keep.len() != rows {
        return Err(Error::shape(format!(
            "{rows} embedding rows but {} mask values and {} keep flags",
            m.len(),
            keep.len()
        )));
    }
    if background.len() != dim {
        return Err(Error::shape(format!(
            "embedding dim {dim} but background has {}",
            background.len()
        )));
    }
    let mut x_keep = x.to_owned();
    let mut x_drop = x.to_owned();
    for j in 0..rows {
        if keep[j] {
            continue;
        }
        let mj = m[j];
        let xr = x.row(j);
        let mut kr = x_keep.row_mut(j);
        for d in 0..dim {
            kr[d] = mj * xr[d] + (1.0 - mj) * background[d];
        }
        let mut dr = x_drop.row_mut(j);
        for d in 0..dim {
            dr[d] = (1.0 - mj) * xr[d] + mj * background[d];
        }
    }
    Ok(BlendedPair {
        x_keep,
        x_drop,
        background: background.to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn naive_mask(w: &[f64], sigma: &[f64]) -> Vec<f64> {
        let n = w.len();
        (0..n)
            .map(|j| {
                let mut s = 0.0;
                for i in 0..n {
                    let d = (i as f64 - j as f64).abs();
                    s += w[i] * (-(d * d) / sigma[i]).exp();
                }
                1.0 / (1.0 + (-s).exp())
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_half() {
        let m = compute_mask(&[0.0; 5], &[1.0; 5], &default_positions(5)).unwrap();
        assert!(m.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_token() {
        let m = compute_mask(&[2.0], &[1.0], &[0.0]).unwrap();
        assert!((m[0] - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn two_tokens_share_influence() {
        let m = compute_mask(&[1.0, 1.0], &[1.0, 1.0], &default_positions(2)).unwrap();
        let expected = sigmoid(1.0 + (-1.0f64).exp());
        assert!((m[0] - expected).abs() < 1e-12);
        assert!((m[1] - expected).abs() < 1e-12);
        assert!((expected - 0.797_037_329_327_218_9).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_sigma_and_shapes() {
        assert!(compute_mask(&[1.0], &[0.0], &[0.0]).is_err());
        assert!(compute_mask(&[1.0], &[-1.0], &[0.0]).is_err());
        assert!(compute_mask(&[1.0, 2.0], &[1.0], &[0.0, 1.0]).is_err());
        assert!(compute_mask(&[], &[], &[]).is_err());
    }

    #[test]
    fn sigma_transform_values() {
        assert!((sigma_transform(-800.0, SIGMA_MIN, SIGMA_MAX) - SIGMA_MIN).abs() < 1e-12);
        assert!((sigma_transform(0.0, 0.1, SIGMA_MAX) - (0.1 + 2f64.ln())).abs() < 1e-12);
        assert!((sigma_transform(0.0, 0.1, SIGMA_MAX) - 0.79315).abs() < 1e-5);
        assert!((sigma_transform(50.0, SIGMA_MIN, 100.0) - 50.1).abs() < 1e-12);
        assert_eq!(sigma_transform(150.0, SIGMA_MIN, 100.0), 100.0);
        assert_eq!(sigma_transform(500.0, SIGMA_MIN, 100.0), 100.0);
        assert_eq!(sigma_transform_grad(150.0, SIGMA_MIN, 100.0), 0.0);
        let raw = sigma_transform_inverse(3.0, SIGMA_MIN);
        assert!((sigma_transform(raw, SIGMA_MIN, SIGMA_MAX) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn blend_boundaries() {
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let b = array![0.5, -0.5];
        let keep = [false; 3];
        let ones = blend_inputs(x.view(), &[1.0; 3], b.view(), &keep).unwrap();
        assert_eq!(ones.x_keep, x);
        for r in ones.x_drop.rows() {
            assert_eq!(r, b);
        }
        let zeros = blend_inputs(x.view(), &[0.0; 3], b.view(), &keep).unwrap();
        assert_eq!(zeros.x_drop, x);
        for r in zeros.x_keep.rows() {
            assert_eq!(r, b);
        }
        let half = blend_inputs(x.view(), &[0.5; 3], b.view(), &keep).unwrap();
        assert_eq!(half.x_keep, half.x_drop);
        for (r, xr) in half.x_keep.rows().into_iter().zip(x.rows()) {
            let expected = (&xr + &b) / 2.0;
            assert_eq!(r, expected);
        }
    }

    #[test]
    fn blend_copies_keep_flagged_rows() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![0.0, 0.0];
        let out = blend_inputs(x.view(), &[0.3, 0.3], b.view(), &[true, false]).unwrap();
        assert_eq!(out.x_keep.row(0), x.row(0));
        assert_eq!(out.x_drop.row(0), x.row(0));
        assert!(blend_inputs(x.view(), &[0.3], b.view(), &[true, false]).is_err());
        assert!(blend_inputs(x.view(), &[0.3, 0.3], array![0.0].view(), &[false, false]).is_err());
    }

    #[test]
    fn batched_masks_match_rows() {
        let head = MaskHeadOutput {
            w: array![[1.0, -2.0, 0.5], [0.0, 0.0, 3.0]],
            sigma: array![[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]],
        };
        let masks = compute_masks(&head).unwrap();
        for c in 0..2 {
            let w = head.w.row(c).to_vec();
            let s = head.sigma.row(c).to_vec();
            for (a, b) in masks.class(c).iter().zip(naive_mask(&w, &s)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..16).prop_flat_map(|n| {
            (
                prop::collection::vec(-3.0f64..3.0, n),
                prop::collection::vec(0.2f64..8.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn mask_in_open_unit_interval((w, s) in instance()) {
            let m = compute_mask(&w, &s, &default_positions(w.len())).unwrap();
            prop_assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn mask_monotone_in_weights((w, s) in instance(), i in 0usize..16) {
            let n = w.len();
            let i = i % n;
            let pos = default_positions(n);
            let base = compute_mask(&w, &s, &pos).unwrap();
            let mut up = w.clone();
            up[i] += 1e-3;
            let bumped = compute_mask(&up, &s, &pos).unwrap();
            for j in 0..n {
                prop_assert!(bumped[j] >= base[j]);
            }
        }

        #[test]
        fn widening_follows_weight_sign((w, s) in instance(), i in 0usize..16) {
            let n = w.len();
            let i = i % n;
            let pos = default_positions(n);
            let base = compute_mask(&w, &s, &pos).unwrap();
            let mut wider = s.clone();
            wider[i] += 1e-3;
            let bumped = compute_mask(&w, &wider, &pos).unwrap();
            prop_assert_eq!(bumped[i], base[i]);
            for j in (0..n).filter(|&j| j != i) {
                let delta = bumped[j] - base[j];
                if w[i] > 0.0 {
                    prop_assert!(delta >= 0.0);
                } else if w[i] < 0.0 {
                    prop_assert!(delta <= 0.0);
                }
            }
        }

        #[test]
        fn backward_matches_central_differences((w, s) in instance()) {
            let n = w.len();
            let pos = default_positions(n);
            let m = compute_mask(&w, &s, &pos).unwrap();
            let (gw, gs) = compute_mask_backward(&w, &s, &pos, &m, &vec![1.0; n]);
            let total = |w: &[f64], s: &[f64]| -> f64 {
                compute_mask(w, s, &pos).unwrap().iter().sum()
            };
            let h = 1e-4;
            for i in 0..n {
                let (mut a, mut b) = (w.clone(), w.clone());
                a[i] += h;
                b[i] -= h;
                let fd = (total(&a, &s) - total(&b, &s)) / (2.0 * h);
                prop_assert!((fd - gw[i]).abs() <= 1e-3 * fd.abs().max(gw[i].abs()).max(1e-6));
                let (mut a, mut b) = (s.clone(), s.clone());
                a[i] += h;
                b[i] -= h;
                let fd = (total(&w, &a) - total(&w, &b)) / (2.0 * h);
                prop_assert!((fd - gs[i]).abs() <= 1e-3 * fd.abs().max(gs[i].abs()).max(1e-6));
            }
        }

        #[test]
        fn blend_conserves_sum(rows in 1usize..8, dim in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((rows, dim), |_| rng.random_range(-2.0..2.0));
            let b = Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0));
            let m: Vec<f64> = (0..rows).map(|_| rng.random_range(0.01..0.99)).collect();
            let out = blend_inputs(x.view(), &m, b.view(), &vec![false; rows]).unwrap();
            let residual = &out.x_keep + &out.x_drop - &x;
            for r in residual.rows() {
                for (v, bv) in r.iter().zip(b.iter()) {
                    prop_assert!((v - bv).abs() <= 1e-12);
                }
            }
        }
    }
}
