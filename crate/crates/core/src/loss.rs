//! Weighted triplet ranking loss, multilabel softmax loss, and their
//! analytic gradients.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{check_len, Error, Result};
use crate::model::{outer_add, HashActivation, MultiHot};

/// Dataset indices of an (anchor, positive, negative) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
}

impl LossConfig {
    pub fn new(margin: f64) -> Result<Self> {
        if margin > 0.0 && margin.is_finite() {
            Ok(LossConfig { margin })
        } else {
            Err(Error::Precondition(format!("margin must be positive, got {margin}")))
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 1.0 }
    }
}

/// Gradients of one triplet's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGradients {
    pub d_anchor: Array1<f64>,
    pub d_positive: Array1<f64>,
    pub d_negative: Array1<f64>,
    /// `c x q`; only the anchor's label rows are nonzero.
    pub d_weights: Array2<f64>,
}

/// `sum_k w_k^2 (a_k - b_k)^2`
pub fn weighted_sq_euclidean(
    w_row: ArrayView1<'_, f64>,
    h_a: &HashActivation,
    h_b: &HashActivation,
) -> Result<f64> {
    check_len("weighted distance activation", w_row.len(), h_a.len())?;
    check_len("weighted distance activation", w_row.len(), h_b.len())?;
    Ok(w_row
        .iter()
        .zip(h_a.values())
        .zip(h_b.values())
        .map(|((&w, &a), &b)| {
            let d = a - b;
            w * w * (d * d)
        })
        .sum())
}

/// Hinge argument `m + d_w(a, p) - d_w(a, n)`.
fn hinge_argument(
    cfg: &LossConfig,
    w_row: ArrayView1<'_, f64>,
    h_anchor: &HashActivation,
    h_pos: &HashActivation,
    h_neg: &HashActivation,
) -> Result<f64> {
    let d_pos = weighted_sq_euclidean(w_row, h_anchor, h_pos)?;
    let d_neg = weighted_sq_euclidean(w_row, h_anchor, h_neg)?;
    Ok(cfg.margin + d_pos - d_neg)
}

/// Relaxed weighted triplet loss `max(0, m + d_w(a, p) - d_w(a, n))`,
/// with `w_row` the anchor's fused class-weight row.
pub fn triplet_loss(
    cfg: &LossConfig,
    w_row: ArrayView1<'_, f64>,
    h_anchor: &HashActivation,
    h_pos: &HashActivation,
    h_neg: &HashActivation,
) -> Result<f64> {
    Ok(hinge_argument(cfg, w_row, h_anchor, h_pos, h_neg)?.max(0.0))
}

/// Gradients of [`triplet_loss`] with respect to the three activations and
/// the class-weight matrix. `w_row` must be the fused row of `anchor_label`.
pub fn triplet_grads(
    cfg: &LossConfig,
    w_row: ArrayView1<'_, f64>,
    h_anchor: &HashActivation,
    h_pos: &HashActivation,
    h_neg: &HashActivation,
    anchor_label: &MultiHot,
) -> Result<TripletGradients> {
    let q = w_row.len();
    let c = anchor_label.len();
    let label_count = anchor_label.count();
    if label_count == 0 {
        return Err(Error::NoLabel);
    }
    let mut grads = TripletGradients {
        d_anchor: Array1::zeros(q),
        d_positive: Array1::zeros(q),
        d_negative: Array1::zeros(q),
        d_weights: Array2::zeros((c, q)),
    };
    if hinge_argument(cfg, w_row, h_anchor, h_pos, h_neg)? <= 0.0 {
        return Ok(grads);
    }

    let (a, p, n) = (h_anchor.values(), h_pos.values(), h_neg.values());
    let share = 1.0 / label_count as f64;
    let mut d_row = Array1::zeros(q);
    for k in 0..q {
        let w2 = 2.0 * w_row[k] * w_row[k];
        grads.d_anchor[k] = w2 * (n[k] - p[k]);
        grads.d_positive[k] = w2 * (p[k] - a[k]);
        grads.d_negative[k] = w2 * (a[k] - n[k]);
        let dp = a[k] - p[k];
        let dn = a[k] - n[k];
        d_row[k] = share * 2.0 * w_row[k] * (dp * dp - dn * dn);
    }
    for j in anchor_label.classes() {
        grads.d_weights.row_mut(j).assign(&d_row);
    }
    Ok(grads)
}

fn log_softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let log_sum = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - max - log_sum)
}

/// Multilabel softmax cross-entropy `-sum_{j: y_j = 1} log softmax_j(z)`.
pub fn softmax_xent_loss(logits: ArrayView1<'_, f64>, label: &MultiHot) -> Result<f64> {
    check_len("softmax label", logits.len(), label.len())?;
    if label.count() == 0 {
        return Err(Error::NoLabel);
    }
    let log_p = log_softmax(logits);
    Ok(-label.classes().map(|j| log_p[j]).sum::<f64>())
}

/// Gradient of [`softmax_xent_loss`] with respect to the logits:
/// `|Y| p_j - y_j`, which for a single label is `p_j - y_j`.
pub fn softmax_logit_grad(logits: ArrayView1<'_, f64>, label: &MultiHot) -> Result<Array1<f64>> {
    check_len("softmax label", logits.len(), label.len())?;
    let count = label.count();
    if count == 0 {
        return Err(Error::NoLabel);
    }
    let p = crate::model::softmax(logits);
    Ok(Array1::from_shape_fn(p.len(), |j| {
        count as f64 * p[j] - if label.is_set(j) { 1.0 } else { 0.0 }
    }))
}

/// Classifier gradients of one item's softmax loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxGrads {
    /// `d_f x c`; column `j` is `f_x * (|Y| p_j - y_j)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub fn softmax_grad(
    f_x: ArrayView1<'_, f64>,
    logits: ArrayView1<'_, f64>,
    label: &MultiHot,
) -> Result<SoftmaxGrads> {
    let bias = softmax_logit_grad(logits, label)?;
    let mut weight = Array2::zeros((f_x.len(), logits.len()));
    outer_add(&mut weight, f_x, bias.view());
    Ok(SoftmaxGrads { weight, bias })
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` against central differences of `loss_fn` at `x`.
///
/// The per-coordinate error is `|a - n| / max(1e-12, |a| + |n|)`.
pub fn finite_diff_check<F>(mut loss_fn: F, x: &[f64], analytic: &[f64], step: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Precondition(format!("finite-difference step must be positive, got {step}")));
    }
    check_len("analytic gradient", x.len(), analytic.len())?;
    let mut probe = x.to_vec();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = loss_fn(&probe);
        probe[i] = x[i] - step;
        let minus = loss_fn(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite near coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        if err > worst.max_rel_error || i == 0 {
            worst = GradCheck {
                max_rel_error: err.max(worst.max_rel_error),
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn h(v: Array1<f64>) -> HashActivation {
        HashActivation(v)
    }

    fn unit() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn margin_must_be_positive() {
        assert!(LossConfig::new(0.0).is_err());
        assert!(LossConfig::new(-1.0).is_err());
        assert_eq!(LossConfig::new(1.0).unwrap().margin, 1.0);
    }

    #[test]
    fn weighted_distance_cases() {
        let a = h(array![0.2, 0.7]);
        assert_eq!(weighted_sq_euclidean(array![3.0, 2.0].view(), &a, &a).unwrap(), 0.0);
        let b = h(array![0.5, 0.1]);
        let plain = 0.3f64.powi(2) + 0.6f64.powi(2);
        let got = weighted_sq_euclidean(array![1.0, 1.0].view(), &a, &b).unwrap();
        assert!((got - plain).abs() < 1e-15);
        let d = weighted_sq_euclidean(
            array![2.0, 0.0].view(),
            &h(array![1.0, 0.0]),
            &h(array![0.0, 1.0]),
        )
        .unwrap();
        assert_eq!(d, 4.0);
        assert!(weighted_sq_euclidean(array![1.0].view(), &a, &b).is_err());
    }

    #[test]
    fn triplet_loss_cases() {
        let w = array![1.0, 1.0];
        let a = h(array![1.0, 0.0]);
        let far = h(array![0.0, 1.0]);
        assert_eq!(triplet_loss(&unit(), w.view(), &a, &a, &far).unwrap(), 0.0);
        assert_eq!(triplet_loss(&unit(), w.view(), &a, &a, &a).unwrap(), 1.0);
        let loss = triplet_loss(
            &unit(),
            w.view(),
            &h(array![1.0, 0.0]),
            &h(array![0.0, 0.0]),
            &h(array![1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn inactive_hinge_has_zero_gradients() {
        let label = MultiHot::single(3, 1).unwrap();
        let g = triplet_grads(
            &unit(),
            array![1.0, 1.0].view(),
            &h(array![1.0, 0.0]),
            &h(array![1.0, 0.0]),
            &h(array![0.0, 1.0]),
            &label,
        )
        .unwrap();
        assert!(g.d_anchor.iter().chain(&g.d_positive).chain(&g.d_negative).all(|&v| v == 0.0));
        assert!(g.d_weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_weight_anchor_gradient() {
        let label = MultiHot::single(2, 0).unwrap();
        let (a, p, n) = (array![0.3, 0.6], array![0.4, 0.2], array![0.35, 0.55]);
        let g = triplet_grads(&unit(), array![1.0, 1.0].view(), &h(a), &h(p.clone()), &h(n.clone()), &label)
            .unwrap();
        assert_eq!(g.d_anchor, 2.0 * (n - p));
        assert!(g.d_weights.row(1).iter().all(|&v| v == 0.0));
    }

    fn random_activation(rng: &mut ChaCha8Rng, q: usize) -> Array1<f64> {
        Array1::from_shape_fn(q, |_| rng.gen_range(0.05..0.95))
    }

    #[test]
    fn triplet_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = unit();
        let mut checked = 0;
        while checked < 50 {
            let q = rng.gen_range(1..=8);
            let c = rng.gen_range(2..=5);
            let classes: Vec<usize> = (0..c).filter(|_| rng.gen_bool(0.5)).collect();
            let classes = if classes.is_empty() { vec![0] } else { classes };
            let label = MultiHot::from_classes(c, &classes).unwrap();
            let weights = Array2::from_shape_fn((c, q), |_| rng.gen_range(0.2..2.0));
            let (a, p, n) = (
                random_activation(&mut rng, q),
                random_activation(&mut rng, q),
                random_activation(&mut rng, q),
            );
            let fused = |w: &Array2<f64>| {
                let mut row = Array1::zeros(q);
                for &j in &classes {
                    row += &w.row(j);
                }
                row / classes.len() as f64
            };
            let arg = hinge_argument(&cfg, fused(&weights).view(), &h(a.clone()), &h(p.clone()), &h(n.clone()))
                .unwrap();
            if arg.abs() < 1e-3 {
                continue;
            }
            let g = triplet_grads(&cfg, fused(&weights).view(), &h(a.clone()), &h(p.clone()), &h(n.clone()), &label)
                .unwrap();

            // flatten (a, p, n, W)
            let mut x: Vec<f64> = a.iter().chain(&p).chain(&n).copied().collect();
            x.extend(weights.iter());
            let mut analytic: Vec<f64> = g.d_anchor.iter().chain(&g.d_positive).chain(&g.d_negative).copied().collect();
            analytic.extend(g.d_weights.iter());
            let loss = |v: &[f64]| {
                let a = h(Array1::from(v[..q].to_vec()));
                let p = h(Array1::from(v[q..2 * q].to_vec()));
                let n = h(Array1::from(v[2 * q..3 * q].to_vec()));
                let w = Array2::from_shape_vec((c, q), v[3 * q..].to_vec()).unwrap();
                triplet_loss(&cfg, fused(&w).view(), &a, &p, &n).unwrap()
            };
            let check = finite_diff_check(loss, &x, &analytic, 1e-6).unwrap();
            assert!(check.max_rel_error <= 1e-5, "{check:?}");
            checked += 1;
        }
    }

    #[test]
    fn softmax_loss_cases() {
        let label = MultiHot::single(4, 2).unwrap();
        let uniform = softmax_xent_loss(array![0.5, 0.5, 0.5, 0.5].view(), &label).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-15);
        let dominant = softmax_xent_loss(array![0.0, 0.0, 50.0, 0.0].view(), &label).unwrap();
        assert!(dominant.abs() < 1e-9);

        let logits = array![0.2, -0.4, 1.1];
        let both = MultiHot::from_classes(3, &[0, 2]).unwrap();
        let l0 = softmax_xent_loss(logits.view(), &MultiHot::single(3, 0).unwrap()).unwrap();
        let l2 = softmax_xent_loss(logits.view(), &MultiHot::single(3, 2).unwrap()).unwrap();
        let denom: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        let direct = -(logits[0].exp() / denom).ln() - (logits[2].exp() / denom).ln();
        let summed = softmax_xent_loss(logits.view(), &both).unwrap();
        assert!((summed - (l0 + l2)).abs() < 1e-14);
        assert!((summed - direct).abs() < 1e-14);

        assert!(matches!(
            softmax_xent_loss(logits.view(), &MultiHot::new(vec![false; 3])),
            Err(Error::NoLabel)
        ));
    }

    #[test]
    fn softmax_grad_perfect_prediction_is_zero() {
        // p_j == y_j exactly once the true logit saturates past f64 precision
        let label = MultiHot::single(3, 1).unwrap();
        let g = softmax_grad(array![1.0, -2.0].view(), array![0.0, 1000.0, 0.0].view(), &label).unwrap();
        assert!(g.weight.iter().chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_grad_uniform_single_label() {
        let c = 4;
        let f = array![0.5, -1.5, 2.0];
        let label = MultiHot::single(c, 3).unwrap();
        let g = softmax_grad(f.view(), Array1::zeros(c).view(), &label).unwrap();
        let expected = f.mapv(|v| -v * (1.0 - 1.0 / c as f64));
        for (got, e) in g.weight.column(3).iter().zip(&expected) {
            assert!((got - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let c = rng.gen_range(2..=5);
            let d = rng.gen_range(1..=6);
            let f = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
            let theta = Array2::from_shape_fn((d, c), |_| rng.gen_range(-1.0..1.0));
            let bias = Array1::from_shape_fn(c, |_| rng.gen_range(-1.0..1.0));
            let classes: Vec<usize> = (0..c).filter(|_| rng.gen_bool(0.4)).collect();
            let label = MultiHot::from_classes(c, if classes.is_empty() { &[1] } else { &classes }).unwrap();

            let logits = theta.t().dot(&f) + &bias;
            let g = softmax_grad(f.view(), logits.view(), &label).unwrap();
            let mut x: Vec<f64> = theta.iter().copied().collect();
            x.extend(bias.iter());
            let mut analytic: Vec<f64> = g.weight.iter().copied().collect();
            analytic.extend(g.bias.iter());
            let loss = |v: &[f64]| {
                let t = Array2::from_shape_vec((d, c), v[..d * c].to_vec()).unwrap();
                let b = Array1::from(v[d * c..].to_vec());
                softmax_xent_loss((t.t().dot(&f) + &b).view(), &label).unwrap()
            };
            let check = finite_diff_check(loss, &x, &analytic, 1e-6).unwrap();
            assert!(check.max_rel_error <= 1e-5, "{check:?}");
        }
    }

    #[test]
    fn finite_diff_on_quadratic() {
        // f(x) = sum_i (i + 1) x_i^2, grad = 2 (i + 1) x_i
        let x = [0.5, -1.0, 2.0, 0.25];
        let grad: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let f = |v: &[f64]| v.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum::<f64>();
        let check = finite_diff_check(f, &x, &grad, 1e-4).unwrap();
        assert!(check.max_rel_error <= 1e-8, "{check:?}");
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_nan() {
        let f = |v: &[f64]| v[0];
        assert!(matches!(finite_diff_check(f, &[1.0], &[1.0], 0.0), Err(Error::Precondition(_))));
        let nan = |_: &[f64]| f64::NAN;
        assert!(matches!(finite_diff_check(nan, &[1.0], &[1.0], 1e-6), Err(Error::Numeric(_))));
    }
}
