//! Adaptive-moment optimizers for network parameters and codebook rows.

use crate::archive::Archive;
use crate::autodiff::Arr;
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;

/// Adam over a fixed-order list of parameter tensors. Moment buffers are
/// sized lazily on the first step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    m: Vec<Arr>,
    v: Vec<Arr>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam { lr, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. `params` and `grads` must align with the order used on
    /// every previous step.
    pub fn step(&mut self, params: Vec<&mut Arr>, grads: &[Arr]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state size changed".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            });
            let lr = self.lr;
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
            });
        }
        Ok(())
    }

    pub(crate) fn to_archive(&self, ar: &mut Archive, prefix: &str) {
        ar.put_u64(&format!("{prefix}t"), self.t);
        ar.put_u64(&format!("{prefix}n"), self.m.len() as u64);
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ar.put_f32_array(&format!("{prefix}m{i}"), m);
            ar.put_f32_array(&format!("{prefix}v{i}"), v);
        }
    }

    pub(crate) fn from_archive(ar: &Archive, prefix: &str, lr: f32) -> Result<Self> {
        let t = ar.get_u64(&format!("{prefix}t"))?;
        let n = ar.get_u64(&format!("{prefix}n"))? as usize;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            m.push(ar.get_f32_array(&format!("{prefix}m{i}"))?);
            v.push(ar.get_f32_array(&format!("{prefix}v{i}"))?);
        }
        Ok(Adam { lr, m, v, t })
    }
}

/// Adam over the rows of the code matrix, with independent step counts so
/// bias correction tracks how often each code was actually touched. Rows
/// outside a batch keep their moments and values bit-identical.
#[derive(Debug, Clone)]
pub struct RowAdam {
    pub lr: f32,
    m: Array2<f32>,
    v: Array2<f32>,
    t: Vec<u64>,
}

impl RowAdam {
    pub fn new(lr: f32, rows: usize, dim: usize) -> Self {
        RowAdam {
            lr,
            m: Array2::zeros((rows, dim)),
            v: Array2::zeros((rows, dim)),
            t: vec![0; rows],
        }
    }

    /// Applies one Adam update to `row` given its gradient, writing the new
    /// value into `out`.
    pub fn step_row(&mut self, row: usize, current: &[f32], grad: &[f32], out: &mut Vec<f32>) {
        self.t[row] += 1;
        let bc1 = 1.0 - BETA1.powi(self.t[row] as i32);
        let bc2 = 1.0 - BETA2.powi(self.t[row] as i32);
        out.clear();
        for k in 0..current.len() {
            let m = &mut self.m[[row, k]];
            let v = &mut self.v[[row, k]];
            *m = BETA1 * *m + (1.0 - BETA1) * grad[k];
            *v = BETA2 * *v + (1.0 - BETA2) * grad[k] * grad[k];
            out.push(current[k] - self.lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS));
        }
    }

    pub(crate) fn to_archive(&self, ar: &mut Archive, prefix: &str) {
        ar.put_f32_array(&format!("{prefix}m"), &self.m.clone().into_dyn());
        ar.put_f32_array(&format!("{prefix}v"), &self.v.clone().into_dyn());
        let t: Vec<i64> = self.t.iter().map(|x| *x as i64).collect();
        ar.put_i64_slice(&format!("{prefix}t"), &t);
    }

    pub(crate) fn from_archive(ar: &Archive, prefix: &str, lr: f32) -> Result<Self> {
        let m = ar.get_f32_array(&format!("{prefix}m"))?;
        let v = ar.get_f32_array(&format!("{prefix}v"))?;
        let t = ar.get_i64_slice(&format!("{prefix}t"))?;
        let to2 = |a: ArrayD<f32>| {
            a.into_dimensionality::<ndarray::Ix2>()
                .map_err(|_| Error::Integrity("row-adam state is not 2-d".into()))
        };
        let m = to2(m)?;
        let v = to2(v)?;
        if m.nrows() != t.len() || m.raw_dim() != v.raw_dim() {
            return Err(Error::Integrity("row-adam sections disagree".into()));
        }
        Ok(RowAdam { lr, m, v, t: t.iter().map(|x| *x as u64).collect() })
    }
}

/// SGD with classical momentum, used by the downstream classifier.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Arr>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32) -> Self {
        SgdMomentum { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Arr>, grads: &[Arr]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        for ((p, g), vel) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            let (mu, lr) = (self.momentum, self.lr);
            ndarray::Zip::from(&mut *vel).and(g).for_each(|v, &g| {
                *v = mu * *v + g;
            });
            ndarray::Zip::from(p).and(&*vel).for_each(|p, &v| {
                *p -= lr * v;
            });
        }
        Ok(())
    }
}
