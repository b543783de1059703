//! Dense row-major tensors and the handful of forward/backward kernels the
//! ranking model is built from.
//!
//! Representation matrices are laid out `[dim × batch]`: row `m` holds
//! dimension `m` for every column (sample) of the batch, so per-dimension
//! feature scaling walks contiguous memory.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Default floor for the row norm in [`batch_feature_scale`].
pub const NORM_EPS: f64 = 1e-12;

/// Scalar type the model can be instantiated with. Training uses `f32`;
/// the gradient checker re-runs the same code in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension; 1 for scalars.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing dimensions; 1 for vectors.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `-ln σ(x)`, evaluated without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// `σ(W·x + b)` applied column-wise to `x: [d_in × l]`.
pub fn affine_sigmoid<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (d_in, l) = (x.rows(), x.cols());
    let (d_out, w_in) = (w.rows(), w.cols());
    if w.shape().len() != 2 || w_in != d_in || b.len() != d_out {
        return Err(Error::shape(
            "affine_sigmoid",
            format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[d_out, l]);
    let mut acc = vec![0f64; l];
    for i in 0..d_out {
        acc.iter_mut().for_each(|a| *a = b.data[i].as_f64());
        let w_row = w.row(i);
        for (k, &wk) in w_row.iter().enumerate() {
            let wk = wk.as_f64();
            if wk == 0.0 {
                continue;
            }
            for (a, &xv) in acc.iter_mut().zip(x.row(k)) {
                *a += wk * xv.as_f64();
            }
        }
        for (o, &a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = sigmoid(T::of(a));
        }
    }
    Ok(out)
}

/// Backward pass of [`affine_sigmoid`] given its output `y` and upstream
/// gradient `dy`. Accumulates into `dw`/`db`; returns `dx` when requested.
pub fn affine_sigmoid_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    y: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
    want_dx: bool,
) -> Option<Tensor<T>> {
    let (d_in, l) = (x.rows(), x.cols());
    let d_out = w.rows();
    // dz = dy ⊙ y(1-y)
    let dz: Vec<T> = y
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&yv, &g)| g * yv * (T::one() - yv))
        .collect();
    for i in 0..d_out {
        let dz_row = &dz[i * l..(i + 1) * l];
        let sum: f64 = dz_row.iter().map(|v| v.as_f64()).sum();
        db.data[i] = db.data[i] + T::of(sum);
        for k in 0..d_in {
            let dot: f64 = dz_row
                .iter()
                .zip(x.row(k))
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum();
            let idx = i * d_in + k;
            dw.data[idx] = dw.data[idx] + T::of(dot);
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = Tensor::zeros(&[d_in, l]);
    let mut acc = vec![0f64; l];
    for k in 0..d_in {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..d_out {
            let wik = w.data[i * d_in + k].as_f64();
            for (a, dzv) in acc.iter_mut().zip(&dz[i * l..(i + 1) * l]) {
                *a += wik * dzv.as_f64();
            }
        }
        for (o, &a) in dx.row_mut(k).iter_mut().zip(&acc) {
            *o = T::of(a);
        }
    }
    Some(dx)
}

/// Record of the per-row divisors applied by a scaling step, kept for the
/// backward pass. `adaptive[m]` is true when the divisor of row `m` was
/// the row's own L2 norm (and so depends on the row's values).
#[derive(Clone, Debug)]
pub struct RowScale<T> {
    pub divisor: Vec<T>,
    pub adaptive: Vec<bool>,
}

/// Per-dimension scaling across a batch: row `m` of `v: [d × l]` becomes
/// `V_m / max(‖V_m‖₂, eps)`.
pub fn batch_feature_scale<T: Real>(v: &Tensor<T>, eps: f64) -> Tensor<T> {
    scale_rows_by_norm(v, eps).0
}

pub fn scale_rows_by_norm<T: Real>(v: &Tensor<T>, eps: f64) -> (Tensor<T>, RowScale<T>) {
    let d = v.rows();
    let mut divisor = Vec::with_capacity(d);
    let mut adaptive = Vec::with_capacity(d);
    for m in 0..d {
        let norm = v
            .row(m)
            .iter()
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        if norm >= eps {
            divisor.push(T::of(norm));
            adaptive.push(true);
        } else {
            divisor.push(T::of(eps));
            adaptive.push(false);
        }
    }
    let out = divide_rows(v, &divisor);
    (out, RowScale { divisor, adaptive })
}

/// Divide each row by a fixed, precomputed divisor.
pub fn scale_rows_fixed<T: Real>(v: &Tensor<T>, divisor: &[T]) -> (Tensor<T>, RowScale<T>) {
    let out = divide_rows(v, divisor);
    (
        out,
        RowScale {
            divisor: divisor.to_vec(),
            adaptive: vec![false; divisor.len()],
        },
    )
}

fn divide_rows<T: Real>(v: &Tensor<T>, divisor: &[T]) -> Tensor<T> {
    let mut out = v.clone();
    for (m, &div) in divisor.iter().enumerate() {
        out.row_mut(m).iter_mut().for_each(|x| *x = *x / div);
    }
    out
}

/// Backward of row scaling: for an adaptive row with output `y` and norm
/// `n`, `dx = (dy − y·(yᵀdy)) / n`; for a fixed divisor, `dx = dy / n`.
pub fn scale_rows_backward<T: Real>(
    y: &Tensor<T>,
    scale: &RowScale<T>,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = dy.clone();
    for m in 0..y.rows() {
        let div = scale.divisor[m].as_f64();
        let (yr, dyr) = (y.row(m), dy.row(m));
        let proj = if scale.adaptive[m] {
            yr.iter()
                .zip(dyr)
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum::<f64>()
        } else {
            0.0
        };
        for ((o, &yv), &g) in dx.row_mut(m).iter_mut().zip(yr).zip(dyr) {
            *o = T::of((g.as_f64() - yv.as_f64() * proj) / div);
        }
    }
    dx
}

/// Column-wise dot products of two `[d × l]` matrices.
pub fn column_dots<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let l = a.cols();
    let mut acc = vec![0f64; l];
    for m in 0..a.rows() {
        for ((s, x), y) in acc.iter_mut().zip(a.row(m)).zip(b.row(m)) {
            *s += x.as_f64() * y.as_f64();
        }
    }
    acc.into_iter().map(T::of).collect()
}

/// `out[:, j] += coef[j] · src[:, j]`.
pub fn add_scaled_columns<T: Real>(out: &mut Tensor<T>, src: &Tensor<T>, coef: &[T]) {
    let l = out.cols();
    for m in 0..out.rows() {
        let s = &src.data[m * l..(m + 1) * l];
        for ((o, &x), &c) in out.row_mut(m).iter_mut().zip(s).zip(coef) {
            *o = *o + c * x;
        }
    }
}

/// Average groups of `group` consecutive columns: `[d × l·group] → [d × l]`.
pub fn mean_column_groups<T: Real>(src: &Tensor<T>, group: usize) -> Tensor<T> {
    let d = src.rows();
    let l = src.cols() / group;
    let mut out = Tensor::zeros(&[d, l]);
    for m in 0..d {
        let row = src.row(m);
        for (j, o) in out.row_mut(m).iter_mut().enumerate() {
            let s: f64 = row[j * group..(j + 1) * group]
                .iter()
                .map(|x| x.as_f64())
                .sum();
            *o = T::of(s / group as f64);
        }
    }
    out
}

/// Adjoint of [`mean_column_groups`].
pub fn spread_column_groups<T: Real>(d_mean: &Tensor<T>, group: usize) -> Tensor<T> {
    let d = d_mean.rows();
    let l = d_mean.cols();
    let mut out = Tensor::zeros(&[d, l * group]);
    let inv = T::of(1.0 / group as f64);
    for m in 0..d {
        let src = d_mean.row(m).to_vec();
        let row = out.row_mut(m);
        for (j, &g) in src.iter().enumerate() {
            row[j * group..(j + 1) * group]
                .iter_mut()
                .for_each(|x| *x = g * inv);
        }
    }
    out
}
