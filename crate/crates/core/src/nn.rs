//! Parameter storage and the differentiable layers the model is built from.
//!
//! Every parameter is a 2-D `f64` array held in a [`ParamStore`]; layers
//! keep [`ParamId`] handles into it. Forward passes return the values the
//! matching backward pass needs, and backward passes accumulate into a
//! [`Grads`] mirror of the store.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Frame encoder, attentive pooling and embedding head.
    Embedder,
    /// AAM-softmax class weights.
    Speaker,
    /// Pairwise augmentation discriminator.
    Discriminator,
    /// Per-embedding augmentation classifier (multiclass mode).
    AugClassifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Array2<f64>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn numel(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            values: self
                .params
                .iter()
                .map(|p| Array2::zeros(p.value.raw_dim()))
                .collect(),
        }
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<Array2<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.values {
            a.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn normal_init(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub(crate) fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output `out` was clamped.
pub(crate) fn relu_backward<D: ndarray::Dimension>(
    grad: &mut ndarray::Array<f64, D>,
    out: &ndarray::Array<f64, D>,
) {
    ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Fully connected layer `y = x Wᵀ + b`, weights stored `out × in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            group,
            normal_init(rng, out_dim, in_dim, std),
        );
        let bias = ps.add(format!("{name}.bias"), group, Array2::zeros((1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Rows of `x` are samples.
    pub fn forward(&self, ps: &ParamStore, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&ps.get(self.weight).t());
        y += &ps.get(self.bias).row(0);
        y
    }

    pub fn forward_vec(&self, ps: &ParamStore, x: ArrayView1<f64>) -> Array1<f64> {
        ps.get(self.weight).dot(&x) + &ps.get(self.bias).row(0)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        ps: &ParamStore,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        *grads.get_mut(self.weight) += &dy.t().dot(&x);
        let db = dy.sum_axis(Axis(0));
        grads.get_mut(self.bias).row_mut(0).scaled_add(1.0, &db);
        dy.dot(ps.get(self.weight))
    }

    pub fn backward_vec(
        &self,
        ps: &ParamStore,
        x: ArrayView1<f64>,
        dy: ArrayView1<f64>,
        grads: &mut Grads,
    ) -> Array1<f64> {
        let dy2 = dy.insert_axis(Axis(1));
        let x2 = x.insert_axis(Axis(0));
        *grads.get_mut(self.weight) += &dy2.dot(&x2);
        grads.get_mut(self.bias).row_mut(0).scaled_add(1.0, &dy);
        ps.get(self.weight).t().dot(&dy)
    }
}

/// 2-D convolution over a `channels × time × freq` map via im2col.
/// Square odd kernel, zero padding `kernel / 2`, independent strides.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: (usize, usize),
        rng: &mut Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = ps.add(
            format!("{name}.weight"),
            group,
            normal_init(rng, out_ch, fan_in, std),
        );
        let bias = ps.add(format!("{name}.bias"), group, Array2::zeros((1, out_ch)));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Output size; equals `ceil(n / stride)` for the padding used here.
    pub fn out_dims(&self, t: usize, f: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (t + 2 * p - self.kernel) / self.stride.0 + 1,
            (f + 2 * p - self.kernel) / self.stride.1 + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, t, f) = x.dim();
        let (to, fo) = self.out_dims(t, f);
        let k = self.kernel;
        let p = self.pad() as isize;
        let (st, sf) = self.stride;
        let xs = x.as_slice().expect("standard layout");
        let mut cols = vec![0.0; c * k * k * to * fo];
        let mut row = 0;
        for ci in 0..c {
            for dt in 0..k {
                for df in 0..k {
                    let base = row * to * fo;
                    for ot in 0..to {
                        let it = (ot * st) as isize + dt as isize - p;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        let src = (ci * t + it as usize) * f;
                        let dst = base + ot * fo;
                        for of in 0..fo {
                            let jf = (of * sf) as isize + df as isize - p;
                            if jf >= 0 && jf < f as isize {
                                cols[dst + of] = xs[src + jf as usize];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        Array2::from_shape_vec((c * k * k, to * fo), cols).expect("shape")
    }

    fn col2im(&self, dcols: &Array2<f64>, t: usize, f: usize) -> Array3<f64> {
        let (to, fo) = self.out_dims(t, f);
        let k = self.kernel;
        let p = self.pad() as isize;
        let (st, sf) = self.stride;
        let mut dx = vec![0.0; self.in_ch * t * f];
        let dc = dcols.as_slice().expect("standard layout");
        let mut row = 0;
        for ci in 0..self.in_ch {
            for dt in 0..k {
                for df in 0..k {
                    let base = row * to * fo;
                    for ot in 0..to {
                        let it = (ot * st) as isize + dt as isize - p;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        let dst = (ci * t + it as usize) * f;
                        let src = base + ot * fo;
                        for of in 0..fo {
                            let jf = (of * sf) as isize + df as isize - p;
                            if jf >= 0 && jf < f as isize {
                                dx[dst + jf as usize] += dc[src + of];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        Array3::from_shape_vec((self.in_ch, t, f), dx).expect("shape")
    }

    /// Returns the output map and the im2col matrix for the backward pass.
    pub fn forward(&self, ps: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, t, f) = x.dim();
        let (to, fo) = self.out_dims(t, f);
        let cols = self.im2col(x);
        let mut y = ps.get(self.weight).dot(&cols);
        y += &ps.get(self.bias).row(0).insert_axis(Axis(1));
        let y = y.into_shape_with_order((self.out_ch, to, fo)).expect("shape");
        (y, cols)
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `input_grad`.
    pub fn backward(
        &self,
        ps: &ParamStore,
        cols: &Array2<f64>,
        in_tf: (usize, usize),
        dy: &Array3<f64>,
        grads: &mut Grads,
        input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (o, to, fo) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, to * fo))
            .expect("shape");
        *grads.get_mut(self.weight) += &dy2.dot(&cols.t());
        let db = dy2.sum_axis(Axis(1));
        grads.get_mut(self.bias).row_mut(0).scaled_add(1.0, &db);
        input_grad.then(|| {
            let dcols = ps.get(self.weight).t().dot(&dy2);
            self.col2im(&dcols, in_tf.0, in_tf.1)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    /// Direct nested-loop convolution, independent of im2col.
    fn conv_direct(conv: &Conv2d, ps: &ParamStore, x: &Array3<f64>) -> Array3<f64> {
        let (c, t, f) = x.dim();
        let (to, fo) = conv.out_dims(t, f);
        let w = ps.get(conv.weight);
        let b = ps.get(conv.bias);
        let k = conv.kernel as isize;
        let p = k / 2;
        let mut y = Array3::zeros((conv.out_ch, to, fo));
        for o in 0..conv.out_ch {
            for ot in 0..to {
                for of in 0..fo {
                    let mut acc = b[[0, o]];
                    for ci in 0..c {
                        for dt in 0..k {
                            for df in 0..k {
                                let it = (ot * conv.stride.0) as isize + dt - p;
                                let jf = (of * conv.stride.1) as isize + df - p;
                                if it >= 0 && jf >= 0 && (it as usize) < t && (jf as usize) < f {
                                    let wi = (ci as isize * k * k + dt * k + df) as usize;
                                    acc += w[[o, wi]] * x[[ci, it as usize, jf as usize]];
                                }
                            }
                        }
                    }
                    y[[o, ot, of]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn im2col_conv_matches_direct() {
        let mut rng = seed::rng(&[1]);
        for &(k, st, sf) in &[(3, 1, 1), (3, 2, 2), (1, 2, 4), (3, 1, 4), (5, 2, 1)] {
            let mut ps = ParamStore::new();
            let conv = Conv2d::new(&mut ps, "c", ParamGroup::Embedder, 2, 3, k, (st, sf), &mut rng);
            *ps.get_mut(conv.bias) = normal_init(&mut rng, 1, 3, 1.0);
            let x = Array3::from_shape_vec(
                (2, 7, 9),
                normal_init(&mut rng, 1, 2 * 7 * 9, 1.0).into_raw_vec_and_offset().0,
            )
            .unwrap();
            let (y, _) = conv.forward(&ps, &x);
            let d = conv_direct(&conv, &ps, &x);
            assert_eq!(y.dim(), d.dim());
            assert_eq!(y.dim().1, 7usize.div_ceil(st));
            assert_eq!(y.dim().2, 9usize.div_ceil(sf));
            for (a, b) in y.iter().zip(d.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = seed::rng(&[2]);
        let mut ps = ParamStore::new();
        let conv = Conv2d::new(&mut ps, "c", ParamGroup::Embedder, 2, 3, 3, (2, 1), &mut rng);
        let x = Array3::from_shape_vec(
            (2, 5, 4),
            normal_init(&mut rng, 1, 40, 1.0).into_raw_vec_and_offset().0,
        )
        .unwrap();
        // L = sum(y * r) for a fixed random r.
        let (y, cols) = conv.forward(&ps, &x);
        let r = Array3::from_shape_vec(
            y.dim(),
            normal_init(&mut rng, 1, y.len(), 1.0).into_raw_vec_and_offset().0,
        )
        .unwrap();
        let mut grads = ps.zero_grads();
        let dx = conv
            .backward(&ps, &cols, (5, 4), &r, &mut grads, true)
            .unwrap();
        let loss = |ps: &ParamStore, x: &Array3<f64>| (conv.forward(ps, x).0 * &r).sum();
        let h = 1e-5;
        for idx in [0usize, 7, 20, 33] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&ps, &xp) - loss(&ps, &xm)) / (2.0 * h);
            assert!((fd - dx.as_slice().unwrap()[idx]).abs() < 1e-7);
        }
        for idx in [0usize, 5, 17, 53] {
            let mut pp = ps.clone();
            pp.get_mut(conv.weight).as_slice_mut().unwrap()[idx] += h;
            let mut pm = ps.clone();
            pm.get_mut(conv.weight).as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!((fd - grads.get(conv.weight).as_slice().unwrap()[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_backward_shapes_and_values() {
        let mut rng = seed::rng(&[3]);
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "l", ParamGroup::Embedder, 4, 3, 1.0, &mut rng);
        let x = normal_init(&mut rng, 5, 4, 1.0);
        let y = lin.forward(&ps, x.view());
        assert_eq!(y.dim(), (5, 3));
        let v = lin.forward_vec(&ps, x.row(2));
        for (a, b) in v.iter().zip(y.row(2)) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut g = ps.zero_grads();
        let dy = Array2::ones((5, 3));
        let dx = lin.backward(&ps, x.view(), dy.view(), &mut g);
        assert_eq!(dx.dim(), (5, 4));
        assert_eq!(g.get(lin.bias)[[0, 1]], 5.0);
    }
}
