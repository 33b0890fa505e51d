//! Differentiable primitives on [`Var`].

mod attention;
mod conv;
mod layout;
mod norm;
pub mod spectral;

pub use layout::{reflect_index, tokens_to_windows_map, windows_map_to_tokens};

use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{op}: operand shapes differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        Ok(self
            .graph
            .op(out, &[self, other], |g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        Ok(self
            .graph
            .op(out, &[self, other], |g| vec![g.clone(), g.map(|v| -v)]))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.graph.op(out, &[self, other], move |g| {
            vec![
                g.zip_map(&b, |g, y| g * y).unwrap(),
                g.zip_map(&a, |g, x| g * x).unwrap(),
            ]
        }))
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "div")?;
        let out = a.zip_map(&b, |x, y| x / y)?;
        Ok(self.graph.op(out, &[self, other], move |g| {
            let da = g.zip_map(&b, |g, y| g / y).unwrap();
            let mut db = g.clone();
            for ((d, &x), &y) in db.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *d *= -x / (y * y);
            }
            vec![da, db]
        }))
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let out = self.value().map(|v| v * factor);
        self.graph
            .op(out, &[self], move |g| vec![g.map(|v| v * factor)])
    }

    pub fn add_scalar(self, offset: f64) -> Var<'g> {
        let out = self.value().map(|v| v + offset);
        self.graph.op(out, &[self], |g| vec![g.clone()])
    }

    /// `gain · self` for a learnable one-element `gain`.
    pub fn mul_gain(self, gain: Var<'g>) -> Result<Var<'g>> {
        let (x, s) = (self.value(), gain.value());
        if s.numel() != 1 {
            return Err(shape_err!("gain must hold one scalar, got {:?}", s.shape()));
        }
        let k = s.data()[0];
        let out = x.map(|v| v * k);
        Ok(self.graph.op(out, &[self, gain], move |g| {
            let ds: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            vec![g.map(|v| v * k), Tensor::scalar(ds)]
        }))
    }

    pub fn abs(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(f64::abs);
        self.graph.op(out, &[self], move |g| {
            vec![g
                .zip_map(&x, |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .unwrap()]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = x.numel() as f64;
        let out = Tensor::scalar(x.sum() / n);
        self.graph
            .op(out, &[self], move |g| vec![Tensor::full(&shape, g.data()[0] / n)])
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph
            .op(out, &[self], move |g| vec![Tensor::full(&shape, g.data()[0])])
    }

    /// `Σ self ⊙ weights` for constant `weights`; used to project outputs to
    /// a scalar objective.
    pub fn dot_const(self, weights: &Tensor) -> Result<Var<'g>> {
        let x = self.value();
        same_shape(&x, weights, "dot_const")?;
        let s: f64 = x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let w = weights.clone();
        Ok(self
            .graph
            .op(Tensor::scalar(s), &[self], move |g| vec![w.map(|v| v * g.data()[0])]))
    }

    pub fn gelu(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(gelu);
        self.graph
            .op(out, &[self], move |g| vec![g.zip_map(&x, |g, v| g * gelu_grad(v)).unwrap()])
    }

    pub fn sigmoid(self) -> Var<'g> {
        let out = self.value().map(sigmoid);
        let y = std::rc::Rc::new(out.clone());
        self.graph.op(out, &[self], move |g| {
            vec![g.zip_map(&y, |g, s| g * s * (1.0 - s)).unwrap()]
        })
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `C = A·B` (or `C += A·B` when `accumulate`) for row-major operands with
/// explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (a_rs, a_cs): (usize, usize),
    b: &[f64],
    (b_rs, b_cs): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * a_rs + (k - 1) * a_cs < a.len());
    assert!(k == 0 || (k - 1) * b_rs + (n - 1) * b_cs < b.len());
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
