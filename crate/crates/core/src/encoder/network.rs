use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::rng;

/// Affine map `x -> x W + b` with `W` stored `d_in x d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_in, d_out),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul(&self.weight)?;
        for i in 0..z.rows() {
            z.row_mut(i).iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        Ok(z)
    }
}

/// Backbone layers (each followed by ReLU) produce the evaluation feature;
/// head layers (ReLU between them, none after the last) produce the
/// projection, which is l2-normalized row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub backbone: Vec<Linear>,
    pub head: Vec<Linear>,
}

impl EncoderParams {
    pub fn new(backbone: Vec<Linear>, head: Vec<Linear>) -> Result<Self> {
        if head.is_empty() {
            return Err(Error::Config("encoder needs at least one projection layer".into()));
        }
        let p = Self { backbone, head };
        for (i, w) in p.layers().collect::<Vec<_>>().windows(2).enumerate() {
            if w[0].d_out() != w[1].d_in() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].d_out(),
                    i + 1,
                    w[1].d_in()
                )));
            }
        }
        for (i, l) in p.layers().enumerate() {
            if l.bias.len() != l.d_out() {
                return Err(Error::Shape(format!("layer {i} bias length {} != {}", l.bias.len(), l.d_out())));
            }
        }
        Ok(p)
    }

    /// He-normal weights for layers feeding a ReLU, `N(0, 1/d_in)` for the
    /// final projection layer, zero biases.
    pub fn init(input_dim: usize, hidden: &[usize], head: &[usize], seed: u64) -> Result<Self> {
        if head.is_empty() {
            return Err(Error::Config("encoder needs at least one projection layer".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.extend_from_slice(head);
        if dims.contains(&0) {
            return Err(Error::Config(format!("layer widths must be positive, got {dims:?}")));
        }
        let total = dims.len() - 1;
        let mut layers: Vec<Linear> = Vec::with_capacity(total);
        for (i, w) in dims.windows(2).enumerate() {
            let (d_in, d_out) = (w[0], w[1]);
            let var = if i + 1 == total { 1.0 } else { 2.0 } / d_in as f64;
            let mut r = rng::stream(seed, &[rng::TAG_INIT, i as u64]);
            let weight = Matrix::from_fn(d_in, d_out, |_, _| {
                let z: f64 = StandardNormal.sample(&mut r);
                z * var.sqrt()
            });
            layers.push(Linear { weight, bias: vec![0.0; d_out] });
        }
        let head_layers = layers.split_off(hidden.len());
        Self::new(layers, head_layers)
    }

    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.backbone.iter().chain(&self.head)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.backbone.iter_mut().chain(self.head.iter_mut())
    }

    pub fn input_dim(&self) -> usize {
        self.layers().next().map_or(0, Linear::d_in)
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.last().map_or(self.input_dim(), Linear::d_out)
    }

    pub fn embed_dim(&self) -> usize {
        self.head.last().map_or(0, Linear::d_out)
    }

    /// All-zero parameters of the same shape.
    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.iter().map(|l| Linear::zeros(l.d_in(), l.d_out())).collect(),
            head: self.head.iter().map(|l| Linear::zeros(l.d_in(), l.d_out())).collect(),
        }
    }

    /// Parameter tensors in declaration order: per layer, weight then bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.backbone.len() == other.backbone.len()
            && self.head.len() == other.head.len()
            && self
                .layers()
                .zip(other.layers())
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer, in order.
    inputs: Vec<Matrix>,
    /// Pre-activation output of every layer (the last one is the
    /// unnormalized projection).
    pre: Vec<Matrix>,
    norms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Unit-norm projections, one row per input.
    pub embeddings: Matrix,
    /// Backbone output before projection (the evaluation representation).
    pub features: Matrix,
    /// Rows whose projection was exactly zero and were replaced by `e_0`.
    pub degenerate_rows: Vec<usize>,
    pub cache: ForwardCache,
}

fn relu(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}

pub fn forward(params: &EncoderParams, x: &Matrix) -> Result<ForwardOutput> {
    if x.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input width {} but encoder expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    if !x.is_finite() {
        return Err(Error::InvalidInput("non-finite encoder input".into()));
    }
    let n_back = params.backbone.len();
    let n_layers = n_back + params.head.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut h = x.clone();
    let mut features = if n_back == 0 { Some(x.clone()) } else { None };
    for (i, layer) in params.layers().enumerate() {
        let z = layer.apply(&h)?;
        if !z.is_finite() {
            return Err(Error::NonFinite { layer: i });
        }
        inputs.push(std::mem::replace(&mut h, z.clone()));
        pre.push(z);
        if i + 1 < n_layers {
            relu(&mut h);
        }
        if i + 1 == n_back {
            features = Some(h.clone());
        }
    }
    let mut embeddings = h;
    let mut norms = Vec::with_capacity(embeddings.rows());
    let mut degenerate_rows = Vec::new();
    for i in 0..embeddings.rows() {
        let row = embeddings.row_mut(i);
        let n = norm(row);
        norms.push(n);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[0] = 1.0;
            degenerate_rows.push(i);
        }
    }
    Ok(ForwardOutput {
        embeddings,
        features: features.expect("feature layer is always visited"),
        degenerate_rows,
        cache: ForwardCache { inputs, pre, norms },
    })
}

/// Reverse-mode gradients of a scalar loss given `∂L/∂U` for the normalized
/// embeddings of one forward pass.
pub fn backward_cached(
    params: &EncoderParams,
    out: &ForwardOutput,
    upstream: &Matrix,
) -> Result<EncoderParams> {
    if upstream.shape() != out.embeddings.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} vs embeddings {:?}",
            upstream.shape(),
            out.embeddings.shape()
        )));
    }
    let cache = &out.cache;
    // Through the normalization: (I - u uᵀ) g / ‖z‖.
    let mut dz = upstream.clone();
    for i in 0..dz.rows() {
        let n = cache.norms[i];
        let u = out.embeddings.row(i);
        let g = dz.row_mut(i);
        if n > 0.0 {
            let proj = dot(u, g);
            g.iter_mut().zip(u).for_each(|(gv, uv)| *gv = (*gv - proj * uv) / n);
        } else {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    let mut grads = params.zeros_like();
    let layers: Vec<&Linear> = params.layers().collect();
    let mut grad_layers: Vec<&mut Linear> = grads.layers_mut().collect();
    for i in (0..layers.len()).rev() {
        let input = &cache.inputs[i];
        grad_layers[i].weight = input.t_matmul(&dz)?;
        let bias = &mut grad_layers[i].bias;
        for r in dz.row_iter() {
            bias.iter_mut().zip(r).for_each(|(b, v)| *b += v);
        }
        if i == 0 {
            break;
        }
        let mut dh = dz.matmul_t(&layers[i].weight)?;
        // Layer i's input is ReLU(pre[i - 1]).
        for (d, &p) in dh.as_mut_slice().iter_mut().zip(cache.pre[i - 1].as_slice()) {
            if p <= 0.0 {
                *d = 0.0;
            }
        }
        dz = dh;
    }
    Ok(grads)
}

pub fn backward(params: &EncoderParams, x: &Matrix, upstream: &Matrix) -> Result<EncoderParams> {
    let out = forward(params, x)?;
    backward_cached(params, &out, upstream)
}

/// Forward pass returning l2-normalized backbone features, the
/// representation used for evaluation.
pub fn eval_features(params: &EncoderParams, x: &Matrix) -> Result<Matrix> {
    let mut f = forward(params, x)?.features;
    for i in 0..f.rows() {
        let row = f.row_mut(i);
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[0] = 1.0;
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, &[99]);
        Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    fn random_params(dims: &[usize], n_head: usize, seed: u64) -> EncoderParams {
        let mut r = rng::stream(seed, &[98]);
        let mut layers: Vec<Linear> = dims
            .windows(2)
            .map(|w| Linear {
                weight: Matrix::from_fn(w[0], w[1], |_, _| r.random_range(-1.0..1.0)),
                bias: (0..w[1]).map(|_| r.random_range(-0.5..0.5)).collect(),
            })
            .collect();
        let head = layers.split_off(layers.len() - n_head);
        EncoderParams::new(layers, head).unwrap()
    }

    /// Independent straight-line evaluation: explicit loops, no caching.
    fn oracle_forward(p: &EncoderParams, x: &Matrix) -> Vec<Vec<f64>> {
        let layers: Vec<&Linear> = p.layers().collect();
        (0..x.rows())
            .map(|r| {
                let mut h: Vec<f64> = x.row(r).to_vec();
                for (li, l) in layers.iter().enumerate() {
                    let mut z = vec![0.0; l.d_out()];
                    for (j, zj) in z.iter_mut().enumerate() {
                        let mut acc = l.bias[j];
                        for (k, hk) in h.iter().enumerate() {
                            acc += hk * l.weight[(k, j)];
                        }
                        *zj = acc;
                    }
                    if li + 1 < layers.len() {
                        z.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.0 });
                    }
                    h = z;
                }
                let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
                h.iter().map(|v| v / n).collect()
            })
            .collect()
    }

    #[test]
    fn identity_layer_passes_unit_rows() {
        let id = Linear { weight: Matrix::identity(3), bias: vec![0.0; 3] };
        let p = EncoderParams::new(vec![], vec![id]).unwrap();
        let x = Matrix::from_rows(&[vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let out = forward(&p, &x).unwrap();
        assert_eq!(out.embeddings, x);
        assert_eq!(out.features, x);
    }

    #[test]
    fn outputs_are_unit_norm() {
        let p = EncoderParams::init(7, &[16, 8], &[5], 3).unwrap();
        let x = random_matrix(20, 7, 1);
        let out = forward(&p, &x).unwrap();
        for r in out.embeddings.row_iter() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
        assert_eq!(out.features.shape(), (20, 8));
    }

    #[test]
    fn matches_straight_line_oracle() {
        let p = random_params(&[6, 9, 4], 1, 5);
        let x = random_matrix(5, 6, 2);
        let out = forward(&p, &x).unwrap();
        let want = oracle_forward(&p, &x);
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((out.embeddings[(i, j)] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_projection_is_flagged() {
        let p = EncoderParams::new(vec![], vec![Linear::zeros(2, 3)]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let out = forward(&p, &x).unwrap();
        assert_eq!(out.degenerate_rows, vec![0]);
        assert_eq!(out.embeddings.row(0), &[1.0, 0.0, 0.0]);
        let g = backward_cached(&p, &out, &Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap()).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn shape_errors() {
        let p = EncoderParams::init(4, &[3], &[2], 0).unwrap();
        assert!(forward(&p, &Matrix::zeros(2, 5)).is_err());
        let out = forward(&p, &random_matrix(2, 4, 0)).unwrap();
        assert!(backward_cached(&p, &out, &Matrix::zeros(3, 2)).is_err());
        assert!(EncoderParams::new(vec![Linear::zeros(4, 3)], vec![Linear::zeros(2, 2)]).is_err());
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut p = EncoderParams::init(2, &[2], &[2], 0).unwrap();
        p.head[0].weight[(0, 0)] = f64::INFINITY;
        match forward(&p, &Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap()) {
            Err(Error::NonFinite { layer: 1 }) | Ok(_) => {}
            Err(e) => panic!("unexpected {e}"),
        }
        p.backbone[0].bias[0] = f64::NAN;
        assert!(matches!(
            forward(&p, &Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap()),
            Err(Error::NonFinite { layer: 0 })
        ));
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let p = EncoderParams::init(5, &[6], &[3], 1).unwrap();
        let x = random_matrix(4, 5, 3);
        let g = backward(&p, &x, &Matrix::zeros(4, 3)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn relu_passes_positive_preactivation() {
        // 1 -> 1 (ReLU) -> 2 network; the hidden unit is active, so the
        // gradient into the first weight is the head's backprop times x.
        let back = Linear { weight: Matrix::from_rows(&[vec![2.0]]).unwrap(), bias: vec![0.5] };
        let head = Linear { weight: Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), bias: vec![0.0, 1.0] };
        let p = EncoderParams::new(vec![back], vec![head]).unwrap();
        let x = Matrix::from_rows(&[vec![1.5]]).unwrap();
        let up = Matrix::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let out = forward(&p, &x).unwrap();
        let g = backward_cached(&p, &out, &up).unwrap();
        // dL/dh (hidden activation) via the head, then times local ReLU derivative 1.
        let gh = g.head[0].bias.iter().zip(p.head[0].weight.row(0)).map(|(a, b)| a * b).sum::<f64>();
        assert!((g.backbone[0].bias[0] - gh).abs() < 1e-15);
        assert!((g.backbone[0].weight[(0, 0)] - 1.5 * gh).abs() < 1e-15);
    }

    #[test]
    fn normalization_gradient_is_tangent() {
        let p = EncoderParams::init(4, &[], &[6], 2).unwrap();
        let x = random_matrix(8, 4, 4);
        let up = random_matrix(8, 6, 5);
        let out = forward(&p, &x).unwrap();
        // With a single head layer, dW = xᵀ dz, so recover dz row by row via
        // the bias gradient of a one-row batch.
        for i in 0..8 {
            let xi = x.select_rows(&[i]);
            let oi = forward(&p, &xi).unwrap();
            let gi = backward_cached(&p, &oi, &up.select_rows(&[i])).unwrap();
            let dz = &gi.head[0].bias;
            assert!(dot(out.embeddings.row(i), dz).abs() < 1e-9);
        }
    }

    fn fd_check(p: &EncoderParams, x: &Matrix, up: &Matrix) -> f64 {
        let loss = |q: &EncoderParams| {
            let e = forward(q, x).unwrap().embeddings;
            dot(e.as_slice(), up.as_slice())
        };
        let g = backward(p, x, up).unwrap();
        let analytic: Vec<f64> = g.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let scale = analytic.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut worst = 0.0f64;
        let mut q = p.clone();
        let mut idx = 0;
        let sizes: Vec<usize> = p.tensors().iter().map(|t| t.len()).collect();
        for (ti, len) in sizes.into_iter().enumerate() {
            for k in 0..len {
                let h = 1e-6;
                let orig = q.tensors()[ti][k];
                q.tensors_mut()[ti][k] = orig + h;
                let lp = loss(&q);
                q.tensors_mut()[ti][k] = orig - h;
                let lm = loss(&q);
                q.tensors_mut()[ti][k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic[idx];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3 * scale));
                idx += 1;
            }
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..10 {
            let hidden: &[usize] = match seed % 3 {
                0 => &[],
                1 => &[7],
                _ => &[6, 5],
            };
            let p = EncoderParams::init(4, hidden, &[3], seed).unwrap();
            let x = random_matrix(5, 4, 100 + seed);
            let up = random_matrix(5, 3, 200 + seed);
            let err = fd_check(&p, &x, &up);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }
}
