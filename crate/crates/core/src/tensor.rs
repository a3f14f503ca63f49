//! Dense row-major `f64` tensors and the numeric kernels the layers are built on.
//!
//! Layout is fixed: the last dimension varies fastest. Activations are
//! `[N, C, H, W]`, convolution kernels `[K, C, kH, kW]`, dense weights
//! `[in, out]`.
//!
//! Convolution is valid (no padding) cross-correlation: the kernel is not
//! flipped, so `out[n,k,i,j] = b[k] + sum_{c,u,v} x[n,c,i*s+u,j*s+v] * w[k,c,u,v]`.
//! [`conv2d_backward`] is the exact adjoint of that convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::InvalidShape {
                dims,
                reason: "at least one dimension is required".into(),
            });
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape {
                dims,
                reason: "every dimension must be >= 1".into(),
            });
        }
        if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(Error::InvalidShape {
                dims,
                reason: "element count overflows".into(),
            });
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Shorthand for building a shape from literal dims; panics on an invalid shape.
#[macro_export]
macro_rules! shape {
    ($($d:expr),+ $(,)?) => {
        $crate::tensor::Shape::new(vec![$($d),+]).expect("valid literal shape")
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Shape,
    #[serde(with = "nonfinite_as_string")]
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        Tensor::from_vec(r.shape, r.data)
    }
}

impl From<Tensor> for TensorRepr {
    fn from(t: Tensor) -> Self {
        TensorRepr {
            shape: t.shape,
            data: t.data,
        }
    }
}

/// JSON has no NaN or infinity; those elements are written as the strings
/// `"NaN"`, `"inf"` and `"-inf"` so diverged parameters still round-trip.
mod nonfinite_as_string {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Elem {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(data: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(data.iter().map(|&v| {
            if v.is_finite() {
                Elem::Num(v)
            } else {
                Elem::Text(v.to_string())
            }
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Elem>::deserialize(d)?
            .into_iter()
            .map(|e| match e {
                Elem::Num(v) => Ok(v),
                Elem::Text(t) => t.parse().map_err(serde::de::Error::custom),
            })
            .collect()
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        let data = vec![value; shape.numel()];
        Tensor { shape, data }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape {
                dims: shape.0,
                reason: format!("data has {} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.0,
                right: shape.0,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns the `[rows, cols]` of a rank-2 tensor.
    fn matrix_dims(&self, op: &'static str, other: &Tensor) -> Result<(usize, usize)> {
        match self.dims() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            }),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (rows, cols) = self.matrix_dims("transpose", self)?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Tensor::from_vec(Shape(vec![cols, rows]), out)
    }
}

/// `[M, K] x [K, N] -> [M, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul", b)?;
    let (k2, n) = b.matrix_dims("matmul", a).map_err(|_| mismatch("matmul", a, b))?;
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(Shape(vec![m, n]), out)
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.dims().to_vec(),
        right: b.dims().to_vec(),
    }
}

/// Geometry of a valid 2-d convolution, validated once and shared by forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        let bad = || Error::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        };
        let (&[n, c, h, w], &[k, kc, kh, kw]) = (input, kernel) else {
            return Err(bad());
        };
        if c != kc || kh > h || kw > w || stride == 0 {
            return Err(bad());
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: k,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
        })
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.dims(), kernel.dims(), stride)?;
    if bias.dims() != [g.out_channels] {
        return Err(mismatch("conv2d bias", kernel, bias));
    }
    let (x, w) = (input.data(), kernel.data());
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let k_slab = g.in_channels * g.kernel_h * g.kernel_w;
    let mut out = vec![0.0; g.batch * g.out_channels * out_plane];

    for n in 0..g.batch {
        for k in 0..g.out_channels {
            let dst = &mut out[(n * g.out_channels + k) * out_plane..][..out_plane];
            dst.fill(bias.data[k]);
            for c in 0..g.in_channels {
                let src = &x[(n * g.in_channels + c) * in_plane..][..in_plane];
                for u in 0..g.kernel_h {
                    for v in 0..g.kernel_w {
                        let wv = w[k * k_slab + (c * g.kernel_h + u) * g.kernel_w + v];
                        for i in 0..g.out_h {
                            let row = &src[(i * g.stride + u) * g.width + v..];
                            let drow = &mut dst[i * g.out_w..(i + 1) * g.out_w];
                            for (j, d) in drow.iter_mut().enumerate() {
                                *d += wv * row[j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(Shape(g.output_dims().to_vec()), out)
}

/// Gradients of [`conv2d_forward`] with respect to its input, kernel and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad_out: &Tensor, stride: usize) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.dims(), kernel.dims(), stride)?;
    if grad_out.dims() != g.output_dims() {
        return Err(mismatch("conv2d backward", input, grad_out));
    }
    let (x, w, dy) = (input.data(), kernel.data(), grad_out.data());
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let k_slab = g.in_channels * g.kernel_h * g.kernel_w;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_channels];

    for n in 0..g.batch {
        for k in 0..g.out_channels {
            let src_dy = &dy[(n * g.out_channels + k) * out_plane..][..out_plane];
            db[k] += src_dy.iter().sum::<f64>();
            for c in 0..g.in_channels {
                let base = (n * g.in_channels + c) * in_plane;
                for u in 0..g.kernel_h {
                    for v in 0..g.kernel_w {
                        let widx = k * k_slab + (c * g.kernel_h + u) * g.kernel_w + v;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for i in 0..g.out_h {
                            let off = base + (i * g.stride + u) * g.width + v;
                            let drow = &src_dy[i * g.out_w..(i + 1) * g.out_w];
                            for (j, &d) in drow.iter().enumerate() {
                                let xi = off + j * g.stride;
                                acc += d * x[xi];
                                dx[xi] += d * wv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape().clone(), dx)?,
        kernel: Tensor::from_vec(kernel.shape().clone(), dw)?,
        bias: Tensor::from_vec(Shape(vec![g.out_channels]), db)?,
    })
}
