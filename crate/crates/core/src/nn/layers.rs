use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mat::{gemm, vec_mat_acc, Mat};
use super::NnError;

/// Trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        }
    }

    /// Uniform in `[-scale, scale]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        p.values.iter_mut().for_each(|v| *v = rng.gen_range(-scale..=scale));
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Values rounded through f32, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        self.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }

    fn as_mat(&self) -> Mat {
        Mat::from_vec(self.shape[0], self.shape[1], self.values.clone())
    }
}

/// Anything owning parameters in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    Tanh,
    Sigmoid,
    Relu,
}

impl Act {
    pub fn apply(self, x: &Mat) -> Mat {
        x.map(|v| self.scalar(v))
    }

    pub fn scalar(self, v: f64) -> f64 {
        match self {
            Act::Tanh => v.tanh(),
            Act::Sigmoid => sigmoid(v),
            Act::Relu => v.max(0.0),
        }
    }

    /// Input gradient from the activation output `y`.
    pub fn backward(self, y: &Mat, gy: &Mat) -> Mat {
        let mut g = gy.clone();
        for (gi, &yi) in g.data.iter_mut().zip(&y.data) {
            *gi *= match self {
                Act::Tanh => 1.0 - yi * yi,
                Act::Sigmoid => yi * (1.0 - yi),
                Act::Relu => {
                    if yi > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
        }
        g
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Activation(Act),
    GruCell,
    CausalConv,
}

/// Shape record stored in checkpoint layer tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        Self { kind: LayerKind::Dense, in_dim, out_dim, kernel: 1, dilation: 1 }
    }

    pub fn activation(act: Act, dim: usize) -> Self {
        Self { kind: LayerKind::Activation(act), in_dim: dim, out_dim: dim, kernel: 1, dilation: 1 }
    }

    pub fn gru(in_dim: usize, hidden: usize) -> Self {
        Self { kind: LayerKind::GruCell, in_dim, out_dim: hidden, kernel: 1, dilation: 1 }
    }

    pub fn causal_conv(in_dim: usize, out_dim: usize, kernel: usize, dilation: usize) -> Self {
        Self { kind: LayerKind::CausalConv, in_dim, out_dim, kernel, dilation }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.in_dim == 0 || self.out_dim == 0 || self.kernel == 0 || self.dilation == 0 {
            return Err(NnError::Dimension(format!("invalid layer spec {self:?}")));
        }
        if matches!(self.kind, LayerKind::Activation(_)) && self.in_dim != self.out_dim {
            return Err(NnError::Dimension("activation must preserve width".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_cols(x: &Mat, cols: usize, what: &str) -> Result<(), NnError> {
    if x.cols != cols {
        return Err(NnError::Dimension(format!("{what}: input has {} columns, expected {cols}", x.cols)));
    }
    Ok(())
}

/// `y = x W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Param,
    pub b: Param,
}

impl Dense {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let scale = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            w: Param::uniform(format!("{name}.w"), &[in_dim, out_dim], scale, rng),
            b: Param::zeros(format!("{name}.b"), &[out_dim]),
        }
    }

    pub fn zeros(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Param::zeros(format!("{name}.w"), &[in_dim, out_dim]),
            b: Param::zeros(format!("{name}.b"), &[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::dense(self.in_dim(), self.out_dim())
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat, NnError> {
        check_cols(x, self.in_dim(), &self.w.name)?;
        let mut y = Mat::zeros(x.rows, self.out_dim());
        for r in 0..y.rows {
            y.row_mut(r).copy_from_slice(&self.b.values);
        }
        gemm(1.0, x, false, &self.w.as_mat(), false, 1.0, &mut y);
        Ok(y)
    }

    pub fn forward_row(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&self.b.values);
        vec_mat_acc(x, &self.w.values, y);
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Mat, gy: &Mat) -> Mat {
        self.accumulate(x, gy);
        let mut gx = Mat::zeros(x.rows, self.in_dim());
        gemm(1.0, gy, false, &self.w.as_mat(), true, 0.0, &mut gx);
        gx
    }

    /// Parameter gradients only, for layers fed by data.
    pub fn accumulate(&mut self, x: &Mat, gy: &Mat) {
        let mut gw = Mat::from_vec(self.in_dim(), self.out_dim(), std::mem::take(&mut self.w.grad));
        gemm(1.0, x, true, gy, false, 1.0, &mut gw);
        self.w.grad = gw.data;
        for r in 0..gy.rows {
            self.b.grad.iter_mut().zip(gy.row(r)).for_each(|(g, v)| *g += v);
        }
    }
}

impl Parameterized for Dense {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Dilated causal convolution: `y[t] = b + sum_k x[t - k*dilation] W_k`,
/// with `x` zero before the first row.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalConv {
    pub kernel: usize,
    pub dilation: usize,
    /// Shape `(kernel * in, out)`; tap `k` occupies rows `k*in .. (k+1)*in`.
    pub w: Param,
    pub b: Param,
}

impl CausalConv {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel >= 1 && dilation >= 1);
        let scale = (6.0 / (kernel * in_dim + out_dim) as f64).sqrt();
        Self {
            kernel,
            dilation,
            w: Param::uniform(format!("{name}.w"), &[kernel * in_dim, out_dim], scale, rng),
            b: Param::zeros(format!("{name}.b"), &[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[0] / self.kernel
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::causal_conv(self.in_dim(), self.out_dim(), self.kernel, self.dilation)
    }

    fn im2col(&self, x: &Mat) -> Mat {
        let c = self.in_dim();
        let mut col = Mat::zeros(x.rows, self.kernel * c);
        for t in 0..x.rows {
            for k in 0..self.kernel {
                let back = k * self.dilation;
                if t >= back {
                    col.row_mut(t)[k * c..(k + 1) * c].copy_from_slice(x.row(t - back));
                }
            }
        }
        col
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat, NnError> {
        check_cols(x, self.in_dim(), &self.w.name)?;
        let col = self.im2col(x);
        let mut y = Mat::zeros(x.rows, self.out_dim());
        for r in 0..y.rows {
            y.row_mut(r).copy_from_slice(&self.b.values);
        }
        gemm(1.0, &col, false, &self.w.as_mat(), false, 1.0, &mut y);
        Ok(y)
    }

    /// One output row from the tap inputs `taps[k] = x[t - k*dilation]`
    /// (`None` before the start of the sequence).
    pub fn step(&self, taps: &[Option<&[f64]>], y: &mut [f64]) {
        let c = self.in_dim();
        let n = self.out_dim();
        y.copy_from_slice(&self.b.values);
        for (k, tap) in taps.iter().enumerate().take(self.kernel) {
            if let Some(x) = tap {
                vec_mat_acc(x, &self.w.values[k * c * n..(k + 1) * c * n], y);
            }
        }
    }

    pub fn backward(&mut self, x: &Mat, gy: &Mat) -> Mat {
        let col = self.im2col(x);
        let mut gw = Mat::from_vec(self.w.shape[0], self.w.shape[1], std::mem::take(&mut self.w.grad));
        gemm(1.0, &col, true, gy, false, 1.0, &mut gw);
        self.w.grad = gw.data;
        for r in 0..gy.rows {
            self.b.grad.iter_mut().zip(gy.row(r)).for_each(|(g, v)| *g += v);
        }
        let mut gcol = Mat::zeros(x.rows, self.w.shape[0]);
        gemm(1.0, gy, false, &self.w.as_mat(), true, 0.0, &mut gcol);
        let c = self.in_dim();
        let mut gx = Mat::zeros(x.rows, c);
        for t in 0..x.rows {
            for k in 0..self.kernel {
                let back = k * self.dilation;
                if t >= back {
                    let src = &gcol.row(t)[k * c..(k + 1) * c];
                    gx.row_mut(t - back).iter_mut().zip(src).for_each(|(g, v)| *g += v);
                }
            }
        }
        gx
    }
}

impl Parameterized for CausalConv {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// `1 + sum_i (kernel - 1) * dilation_i`.
pub fn receptive_field(dilations: &[usize], kernel: usize) -> usize {
    1 + dilations.iter().map(|d| (kernel.saturating_sub(1)) * d).sum::<usize>()
}
