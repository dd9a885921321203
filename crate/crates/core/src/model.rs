//! Network parameters and forward passes.
//!
//! The network is a small stack of affine layers (tanh between hidden
//! layers, linear output) feeding two heads: a sigmoid hash layer producing
//! `q` activations, and a softmax classifier over `c` classes. A nonnegative
//! `c x q` matrix of class-wise bit weights sits on top of the hash layer.

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use crate::dataset::{Dataset, MultiHot};
use crate::error::{check_len, Error, Result};

/// One affine map `z = W^T a + b`, with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineLayer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        AffineLayer {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    fn apply(&self, a: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.t().dot(&a) + &self.bias
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Feature stack; empty means `f(x) = x`.
    pub feature_layers: Vec<AffineLayer>,
    /// `d_f x q`
    pub hash_weight: Array2<f64>,
    pub hash_bias: Array1<f64>,
    /// `c x q`, kept elementwise nonnegative by the trainer.
    pub class_weights: Array2<f64>,
    /// `d_f x c`
    pub classifier_weight: Array2<f64>,
    pub classifier_bias: Array1<f64>,
}

/// Sigmoid outputs of the hash layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HashActivation(pub Array1<f64>);

impl HashActivation {
    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Softmax output of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities(pub Array1<f64>);

impl ClassProbabilities {
    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }
}

/// Identifies one parameter tensor inside [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    FeatureWeight(usize),
    FeatureBias(usize),
    HashWeight,
    HashBias,
    ClassWeights,
    ClassifierWeight,
    ClassifierBias,
}

impl ParamKind {
    pub fn name(&self) -> String {
        match self {
            ParamKind::FeatureWeight(i) => format!("feature.{i}.weight"),
            ParamKind::FeatureBias(i) => format!("feature.{i}.bias"),
            ParamKind::HashWeight => "hash.weight".into(),
            ParamKind::HashBias => "hash.bias".into(),
            ParamKind::ClassWeights => "class_weights".into(),
            ParamKind::ClassifierWeight => "classifier.weight".into(),
            ParamKind::ClassifierBias => "classifier.bias".into(),
        }
    }
}

/// Borrowed view of one tensor; vectors report one row.
#[derive(Debug)]
pub struct ParamTensor<'a> {
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct ParamTensorMut<'a> {
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a mut [f64],
}

/// Intermediate values kept by [`ModelParams::forward_features_traced`].
#[derive(Debug, Clone)]
pub struct FeatureTrace {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    pub activations: Vec<Array1<f64>>,
}

impl FeatureTrace {
    pub fn output(&self) -> &Array1<f64> {
        self.activations.last().expect("trace holds the input")
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Thresholds activations at 0.5; a tie maps to bit 1.
pub fn binarize(h: &HashActivation) -> Vec<bool> {
    h.0.iter().map(|&v| v >= 0.5).collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

impl ModelParams {
    /// Random initialization.
    ///
    /// `dims` lists the feature stack sizes starting with the input dimension,
    /// so `[d]` alone means no feature layers and `[d, h, d_f]` two layers.
    /// Affine weights are drawn from `N(0, 1/fan_in)`, biases start at zero and
    /// the class-wise weights at all ones.
    pub fn init(dims: &[usize], code_length: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidDims("layer size list is empty".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidDims(format!("layer size {pos} is zero")));
        }
        if code_length == 0 {
            return Err(Error::InvalidDims("code length must be at least 1".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidDims("need at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |rows: usize, cols: usize| {
            let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
            Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
        };

        let feature_layers = dims
            .windows(2)
            .map(|w| AffineLayer {
                weight: gaussian(w[0], w[1]),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        let d_f = *dims.last().unwrap();
        let hash_weight = gaussian(d_f, code_length);
        let classifier_weight = gaussian(d_f, num_classes);
        Ok(ModelParams {
            feature_layers,
            hash_weight,
            hash_bias: Array1::zeros(code_length),
            class_weights: Array2::ones((num_classes, code_length)),
            classifier_weight,
            classifier_bias: Array1::zeros(num_classes),
        })
    }

    /// All-zero parameters with the same shapes; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.fill(0.0);
        }
        out
    }

    pub fn input_dim(&self) -> usize {
        self.feature_layers
            .first()
            .map_or(self.hash_weight.nrows(), AffineLayer::fan_in)
    }

    pub fn feature_dim(&self) -> usize {
        self.hash_weight.nrows()
    }

    pub fn code_length(&self) -> usize {
        self.hash_weight.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.nrows()
    }

    /// Layer sizes in the form accepted by [`ModelParams::init`].
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.feature_layers.iter().map(AffineLayer::fan_out));
        dims
    }

    /// Verifies that all tensor shapes agree with each other.
    pub fn check_consistent(&self) -> Result<()> {
        let mut width = self.input_dim();
        for layer in &self.feature_layers {
            check_len("feature layer fan-in", width, layer.fan_in())?;
            check_len("feature layer bias", layer.fan_out(), layer.bias.len())?;
            width = layer.fan_out();
        }
        let (q, c) = (self.code_length(), self.num_classes());
        check_len("hash weight rows", width, self.hash_weight.nrows())?;
        check_len("hash bias", q, self.hash_bias.len())?;
        check_len("class weight columns", q, self.class_weights.ncols())?;
        check_len("classifier rows", width, self.classifier_weight.nrows())?;
        check_len("classifier columns", c, self.classifier_weight.ncols())?;
        check_len("classifier bias", c, self.classifier_bias.len())?;
        if q == 0 || c < 2 {
            return Err(Error::InvalidDims(format!("q={q}, c={c}")));
        }
        Ok(())
    }

    pub fn forward_features(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_len("feature input", self.input_dim(), x.len())?;
        let mut a = x.to_owned();
        let last = self.feature_layers.len().saturating_sub(1);
        for (l, layer) in self.feature_layers.iter().enumerate() {
            a = layer.apply(a.view());
            if l < last {
                a.mapv_inplace(f64::tanh);
            }
        }
        Ok(a)
    }

    /// Same as [`ModelParams::forward_features`] but keeps every activation.
    pub fn forward_features_traced(&self, x: ArrayView1<'_, f64>) -> Result<FeatureTrace> {
        check_len("feature input", self.input_dim(), x.len())?;
        let mut activations = Vec::with_capacity(self.feature_layers.len() + 1);
        activations.push(x.to_owned());
        let last = self.feature_layers.len().saturating_sub(1);
        for (l, layer) in self.feature_layers.iter().enumerate() {
            let mut z = layer.apply(activations[l].view());
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(z);
        }
        Ok(FeatureTrace { activations })
    }

    /// Accumulates parameter gradients of the feature stack given
    /// `grad_out = dL/df(x)`.
    pub fn backward_features(&self, trace: &FeatureTrace, grad_out: Array1<f64>, grads: &mut ModelParams) {
        let last = self.feature_layers.len().saturating_sub(1);
        let mut g = grad_out;
        for l in (0..self.feature_layers.len()).rev() {
            if l < last {
                // tanh'(z) = 1 - tanh(z)^2
                g = g * trace.activations[l + 1].mapv(|a| 1.0 - a * a);
            }
            let input = &trace.activations[l];
            let layer_grad = &mut grads.feature_layers[l];
            outer_add(&mut layer_grad.weight, input.view(), g.view());
            layer_grad.bias += &g;
            if l > 0 {
                g = self.feature_layers[l].weight.dot(&g);
            }
        }
    }

    pub fn hash_logits(&self, f_x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_len("hash layer input", self.feature_dim(), f_x.len())?;
        Ok(self.hash_weight.t().dot(&f_x) + &self.hash_bias)
    }

    /// `h = sigmoid(W_h^T f + v)`.
    pub fn forward_hash(&self, f_x: ArrayView1<'_, f64>) -> Result<HashActivation> {
        Ok(HashActivation(self.hash_logits(f_x)?.mapv(sigmoid)))
    }

    pub fn class_logits(&self, f_x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_len("classifier input", self.feature_dim(), f_x.len())?;
        Ok(self.classifier_weight.t().dot(&f_x) + &self.classifier_bias)
    }

    pub fn forward_class_probs(&self, f_x: ArrayView1<'_, f64>) -> Result<ClassProbabilities> {
        Ok(ClassProbabilities(softmax(self.class_logits(f_x)?.view())))
    }

    /// Mean of the class-weight rows selected by `label`.
    pub fn class_weight_row(&self, label: &MultiHot) -> Result<Array1<f64>> {
        check_len("label", self.num_classes(), label.len())?;
        let count = label.count();
        if count == 0 {
            return Err(Error::NoLabel);
        }
        if count == 1 {
            let j = label.classes().next().unwrap();
            return Ok(self.class_weights.row(j).to_owned());
        }
        let mut row = Array1::zeros(self.code_length());
        for j in label.classes() {
            row += &self.class_weights.row(j);
        }
        Ok(row / count as f64)
    }

    /// Binary code of a raw input vector.
    pub fn encode(&self, x: ArrayView1<'_, f64>) -> Result<Vec<bool>> {
        let f = self.forward_features(x)?;
        Ok(binarize(&self.forward_hash(f.view())?))
    }

    pub fn tensors(&self) -> Vec<ParamTensor<'_>> {
        fn view<'a>(kind: ParamKind, rows: usize, cols: usize, data: &'a [f64]) -> ParamTensor<'a> {
            ParamTensor { kind, rows, cols, data }
        }
        let mut out = Vec::new();
        for (i, layer) in self.feature_layers.iter().enumerate() {
            let (r, c) = layer.weight.dim();
            out.push(view(ParamKind::FeatureWeight(i), r, c, slice(&layer.weight)));
            out.push(view(ParamKind::FeatureBias(i), 1, c, slice1(&layer.bias)));
        }
        let (r, q) = self.hash_weight.dim();
        out.push(view(ParamKind::HashWeight, r, q, slice(&self.hash_weight)));
        out.push(view(ParamKind::HashBias, 1, q, slice1(&self.hash_bias)));
        let (c, _) = self.class_weights.dim();
        out.push(view(ParamKind::ClassWeights, c, q, slice(&self.class_weights)));
        out.push(view(ParamKind::ClassifierWeight, r, c, slice(&self.classifier_weight)));
        out.push(view(ParamKind::ClassifierBias, 1, c, slice1(&self.classifier_bias)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamTensorMut<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.feature_layers.iter_mut().enumerate() {
            let (r, c) = layer.weight.dim();
            out.push(ParamTensorMut {
                kind: ParamKind::FeatureWeight(i),
                rows: r,
                cols: c,
                data: layer.weight.as_slice_mut().expect("standard layout"),
            });
            out.push(ParamTensorMut {
                kind: ParamKind::FeatureBias(i),
                rows: 1,
                cols: c,
                data: layer.bias.as_slice_mut().expect("standard layout"),
            });
        }
        let (r, q) = self.hash_weight.dim();
        let c = self.class_weights.nrows();
        let fixed = [
            (ParamKind::HashWeight, r, q, self.hash_weight.as_slice_mut()),
            (ParamKind::HashBias, 1, q, self.hash_bias.as_slice_mut()),
            (ParamKind::ClassWeights, c, q, self.class_weights.as_slice_mut()),
            (ParamKind::ClassifierWeight, r, c, self.classifier_weight.as_slice_mut()),
            (ParamKind::ClassifierBias, 1, c, self.classifier_bias.as_slice_mut()),
        ];
        for (kind, rows, cols, data) in fixed {
            out.push(ParamTensorMut {
                kind,
                rows,
                cols,
                data: data.expect("standard layout"),
            });
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Concatenates every tensor in [`ModelParams::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameter vector", self.num_parameters(), flat.len())?;
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// `m += a ⊗ b`
pub(crate) fn outer_add(m: &mut Array2<f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) {
    for (mut row, &ai) in m.rows_mut().into_iter().zip(a.iter()) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::Rng;

    fn random_params(seed: u64) -> ModelParams {
        ModelParams::init(&[5, 4, 3], 6, 3, seed).unwrap()
    }

    #[test]
    fn init_sets_all_one_class_weights() {
        let p = ModelParams::init(&[10, 6], 8, 4, 7).unwrap();
        assert_eq!(p.class_weights.dim(), (4, 8));
        assert!(p.class_weights.iter().all(|&w| w == 1.0));
        p.check_consistent().unwrap();
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(&[10, 6], 8, 4, 7).unwrap();
        let b = ModelParams::init(&[10, 6], 8, 4, 7).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        let c = ModelParams::init(&[10, 6], 8, 4, 8).unwrap();
        assert_ne!(a.to_flat(), c.to_flat());
    }

    #[test]
    fn init_rejects_degenerate_dims() {
        assert!(ModelParams::init(&[4, 0], 8, 4, 7).is_err());
        assert!(ModelParams::init(&[], 8, 4, 7).is_err());
        assert!(ModelParams::init(&[4], 0, 4, 7).is_err());
        assert!(ModelParams::init(&[4], 8, 1, 7).is_err());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut p = ModelParams::init(&[3, 3], 2, 2, 1).unwrap();
        p.feature_layers[0].weight = Array2::eye(3);
        p.feature_layers[0].bias.fill(0.0);
        let x = array![0.3, -2.0, 5.0];
        assert_eq!(p.forward_features(x.view()).unwrap(), x);
    }

    #[test]
    fn zero_layers_give_zero_features() {
        let p = random_params(3).zeros_like();
        let f = p.forward_features(array![1.0, 2.0, 3.0, 4.0, 5.0].view()).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_match_naive_affine_chain() {
        let p = random_params(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            // naive loops over the stored in x out weights
            let mut a = x.clone();
            for (l, layer) in p.feature_layers.iter().enumerate() {
                let mut z = vec![0.0; layer.fan_out()];
                for (j, zj) in z.iter_mut().enumerate() {
                    let mut s = layer.bias[j];
                    for (i, ai) in a.iter().enumerate() {
                        s += layer.weight[[i, j]] * ai;
                    }
                    *zj = if l + 1 < p.feature_layers.len() { s.tanh() } else { s };
                }
                a = z;
            }
            let got = p.forward_features(Array::from(x).view()).unwrap();
            for (g, e) in got.iter().zip(&a) {
                assert!((g - e).abs() <= 1e-12 * (1.0 + e.abs()));
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let p = random_params(1);
        assert!(matches!(
            p.forward_features(array![1.0, 2.0].view()),
            Err(Error::Dimension { .. })
        ));
        assert!(p.forward_hash(array![1.0].view()).is_err());
        assert!(p.forward_class_probs(array![1.0].view()).is_err());
    }

    #[test]
    fn hash_of_zero_params_is_one_half() {
        let p = random_params(1).zeros_like();
        let h = p.forward_hash(array![1.0, -1.0, 2.0].view()).unwrap();
        assert!(h.values().iter().all(|&v| v == 0.5));
        assert_eq!(binarize(&h), vec![true; 6]);
    }

    #[test]
    fn hash_saturates() {
        let mut p = random_params(1).zeros_like();
        p.hash_bias[2] = 50.0;
        let h = p.forward_hash(array![0.0, 0.0, 0.0].view()).unwrap();
        assert!((h.values()[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hash_matches_scalar_sigmoid() {
        let p = random_params(9);
        let f = array![0.7, -1.3, 2.1];
        let h = p.forward_hash(f.view()).unwrap();
        for k in 0..p.code_length() {
            let mut z = p.hash_bias[k];
            for i in 0..3 {
                z += p.hash_weight[[i, k]] * f[i];
            }
            let expected = 1.0 / (1.0 + (-z).exp());
            assert!((h.values()[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn binarize_threshold_and_tie() {
        let h = HashActivation(array![0.9, 0.1, 0.5]);
        assert_eq!(binarize(&h), vec![true, false, true]);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(array![2.0, 2.0, 2.0, 2.0].view());
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax(array![0.0, 50.0, 0.0].view());
        assert!((p[1] - 1.0).abs() < 1e-9);
        let logits = array![0.3, -1.2, 2.5, 0.0];
        let p = softmax(logits.view());
        let denom: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        for (pi, li) in p.iter().zip(logits.iter()) {
            assert!((pi - li.exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn class_weight_row_fusion() {
        let mut p = ModelParams::init(&[3], 2, 2, 1).unwrap();
        p.class_weights = array![[1.0, 1.0], [3.0, 1.0]];
        let single = MultiHot::single(2, 1).unwrap();
        assert_eq!(p.class_weight_row(&single).unwrap(), array![3.0, 1.0]);
        let both = MultiHot::from_classes(2, &[0, 1]).unwrap();
        assert_eq!(p.class_weight_row(&both).unwrap(), array![2.0, 1.0]);
        let none = MultiHot::new(vec![false, false]);
        assert!(matches!(p.class_weight_row(&none), Err(Error::NoLabel)));
    }

    #[test]
    fn flat_round_trip() {
        let p = random_params(4);
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&[1.0]).is_err());
    }
}
