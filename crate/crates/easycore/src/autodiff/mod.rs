//! Dense tensors and reverse-mode differentiation.
//!
//! Gradients are available with respect to anything inserted on a tape
//! with requires_grad set, which is how both parameter gradients (training)
//! and input gradients (hardness scoring, attacks) come out of the same
//! machinery. All arithmetic is 64-bit.

mod tape;

pub use tape::{Tape, VarId};

use crate::error::{Error, Result};

/// A dense n-dimensional array of 64-bit reals with an optional gradient
/// buffer of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape("tensor", &shape, &[values.len()]));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    /// Builder-style toggle for gradient tracking.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, yes: bool) {
        self.requires_grad = yes;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.values[r * cols..(r + 1) * cols]
    }

    /// Add into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.values.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (acc, &v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Compare the analytic gradient of a scalar-valued program against central
/// finite differences at `point`, returning the maximum relative error over
/// coordinates: |analytic - central| / max(|analytic|, |central|, 1e-12).
///
/// The program maps an input variable to a scalar loss variable on a fresh
/// tape; anything else it needs (parameters, labels) is captured by the
/// closure. This is the independent oracle used by the gradient test
/// suites; it never reuses the analytic path it is checking.
pub fn finite_diff_check<F>(program: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    if h <= 0.0 {
        return Err(Error::config(format!("finite difference step must be > 0, got {h}")));
    }
    let eval = |values: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let x = tape.leaf_from(point.shape().to_vec(), values.to_vec(), want_grad);
        let loss = program(&mut tape, x)?;
        let value = tape.scalar_value(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_diff_check program evaluation".into(),
            });
        }
        if want_grad {
            tape.backward(loss)?;
            Ok((value, Some(tape.grad(x).to_vec())))
        } else {
            Ok((value, None))
        }
    };

    let (_, analytic) = eval(point.values(), true)?;
    let analytic = analytic.expect("gradient requested");

    let mut max_rel: f64 = 0.0;
    let mut perturbed = point.values().to_vec();
    for i in 0..perturbed.len() {
        let orig = perturbed[i];
        perturbed[i] = orig + h;
        let (up, _) = eval(&perturbed, false)?;
        perturbed[i] = orig - h;
        let (down, _) = eval(&perturbed, false)?;
        perturbed[i] = orig;
        let central = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(central.abs()).max(1e-12);
        max_rel = max_rel.max((analytic[i] - central).abs() / denom);
    }
    Ok(max_rel)
}
