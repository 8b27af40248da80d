//! Dense row-major feature matrices and the small set of kernels Apply
//! operators are built from.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision. `F32` keeps the f64 kernels but rounds every stored
/// value through `f32`, which is what a single-precision run observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
        }
    }
}

/// A feature matrix. Rows are vertices or edges depending on where it lives.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `(-s, s)` with `s = 1 / sqrt(cols)`.
    Uniform,
    Zeros,
    Ones,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self { rows: rows.len(), cols, data }
    }

    pub fn init_seeded(rows: usize, cols: usize, seed: u64, init: Init) -> Self {
        match init {
            Init::Zeros => Self::zeros(rows, cols),
            Init::Ones => Self::filled(rows, cols, 1.0),
            Init::Uniform => {
                let s = 1.0 / (cols.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
                Self { rows, cols, data }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Little-endian dump: two u64 dims followed by row-major f64 values.
    pub fn write_dump(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(mut r: impl Read) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let rows = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let cols = u64::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Ok(Self { rows, cols, data })
    }
}

/// A learnable parameter with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self { name: name.into(), value, grad: None }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.value.rows, self.value.cols)
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        let (r, c) = self.shape();
        self.grad.get_or_insert_with(|| Tensor::zeros(r, c))
    }
}

// ── Elementwise kernels ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    LeakyRelu(f64),
    Exp,
    Copy,
    Relu,
    Sigmoid,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[inline]
pub fn leaky_relu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Elementwise {
    pub fn arity(self) -> usize {
        match self {
            Self::Add | Self::Sub | Self::Mul | Self::Div => 2,
            _ => 1,
        }
    }

    #[inline]
    pub fn unary(self, x: f64) -> f64 {
        match self {
            Self::LeakyRelu(a) => leaky_relu(x, a),
            Self::Exp => x.exp(),
            Self::Copy => x,
            Self::Relu => x.max(0.0),
            Self::Sigmoid => sigmoid(x),
            _ => unreachable!("binary op used as unary"),
        }
    }

    #[inline]
    pub fn binary(self, a: f64, b: f64) -> f64 {
        match self {
            Self::Add => a + b,
            Self::Sub => a - b,
            Self::Mul => a * b,
            Self::Div => a / b,
            _ => unreachable!("unary op used as binary"),
        }
    }
}

/// Applies `op` entry by entry. With `debug_checks`, non-finite results are
/// reported instead of returned.
pub fn elementwise(op: Elementwise, inputs: &[&Tensor], debug_checks: bool) -> Result<Tensor> {
    if inputs.len() != op.arity() {
        return Err(Error::Shape(format!("{op:?} takes {} inputs, got {}", op.arity(), inputs.len())));
    }
    let first = inputs[0];
    if let Some(other) = inputs.iter().find(|t| (t.rows, t.cols) != (first.rows, first.cols)) {
        return Err(Error::Shape(format!(
            "{op:?}: {}x{} vs {}x{}",
            first.rows, first.cols, other.rows, other.cols
        )));
    }
    let data: Vec<f64> = match op.arity() {
        1 => first.data.iter().map(|&x| op.unary(x)).collect(),
        _ => first.data.iter().zip(&inputs[1].data).map(|(&a, &b)| op.binary(a, b)).collect(),
    };
    let out = Tensor { rows: first.rows, cols: first.cols, data };
    if debug_checks && !out.all_finite() {
        return Err(Error::Check(format!("{op:?} produced a non-finite value")));
    }
    Ok(out)
}

/// `a (r x i) * b (i x c)`. Returns the product and the FLOPs charged,
/// `2 * r * i * c`.
pub fn dense_matmul(a: &Tensor, b: &Tensor) -> Result<(Tensor, u64)> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul inner dims {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let orow = out.row_mut(r);
        for (k, &x) in arow.iter().enumerate() {
            let brow = b.row(k);
            for (o, &w) in orow.iter_mut().zip(brow) {
                *o += x * w;
            }
        }
    }
    Ok((out, 2 * (a.rows * a.cols * b.cols) as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_variants() {
        assert!(Tensor::init_seeded(2, 3, 1, Init::Zeros).data.iter().all(|&x| x == 0.0));
        assert_eq!(Tensor::init_seeded(1, 1, 1, Init::Ones).data, vec![1.0]);
        let a = Tensor::init_seeded(4, 4, 42, Init::Uniform);
        let b = Tensor::init_seeded(4, 4, 42, Init::Uniform);
        assert_eq!(a, b);
        assert!(a.data.iter().all(|x| x.abs() < 0.5));
        assert_ne!(a, Tensor::init_seeded(4, 4, 43, Init::Uniform));
    }

    #[test]
    fn elementwise_semantics() {
        let x = Tensor::from_rows(&[&[-1.0, 2.0]]);
        let y = elementwise(Elementwise::LeakyRelu(0.2), &[&x], true).unwrap();
        assert_eq!(y.data, vec![-0.2, 2.0]);
        let a = Tensor::from_rows(&[&[1.0, 2.0]]);
        let b = Tensor::from_rows(&[&[3.0, 4.0]]);
        assert_eq!(elementwise(Elementwise::Add, &[&a, &b], true).unwrap().data, vec![4.0, 6.0]);
        let z = Tensor::from_rows(&[&[0.0]]);
        assert_eq!(elementwise(Elementwise::Exp, &[&z], true).unwrap().data, vec![1.0]);
        assert!(matches!(elementwise(Elementwise::Add, &[&a, &z], true), Err(Error::Shape(_))));
        let zero = Tensor::from_rows(&[&[0.0, 1.0]]);
        assert!(matches!(elementwise(Elementwise::Div, &[&a, &zero], true), Err(Error::Check(_))));
        let inf = elementwise(Elementwise::Div, &[&a, &zero], false).unwrap();
        assert!(inf.data[0].is_infinite());
    }

    #[test]
    fn matmul_small_cases() {
        let id = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = Tensor::from_rows(&[&[1.5, -2.0], &[3.0, 4.25]]);
        let (p, flops) = dense_matmul(&id, &m).unwrap();
        assert_eq!(p, m);
        assert_eq!(flops, 16);
        let (p, _) = dense_matmul(&Tensor::from_rows(&[&[1.0, 2.0]]), &Tensor::from_rows(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(p.data, vec![11.0]);
        assert!(dense_matmul(&id, &Tensor::zeros(3, 1)).is_err());
        // X * I = X exactly.
        let x = Tensor::init_seeded(5, 2, 3, Init::Uniform);
        assert_eq!(dense_matmul(&x, &id).unwrap().0, x);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::init_seeded(5, 4, 11, Init::Uniform);
        let b = Tensor::init_seeded(4, 3, 12, Init::Uniform);
        let (p, flops) = dense_matmul(&a, &b).unwrap();
        assert_eq!(flops, 2 * 5 * 4 * 3);
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data[i * 4 + k] * b.data[k * 3 + j];
                }
                assert!((p.data[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let t = Tensor::init_seeded(3, 2, 5, Init::Uniform);
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 8);
        assert_eq!(&buf[..8], &3u64.to_le_bytes());
        assert_eq!(Tensor::read_dump(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn f32_rounding() {
        let x = 0.1f64;
        assert_eq!(Precision::F64.round(x), x);
        assert_eq!(Precision::F32.round(x), 0.1f32 as f64);
    }
}
