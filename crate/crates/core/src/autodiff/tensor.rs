use crate::error::{Error, Result};

/// Dense row-major `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// `rows x cols` matrix from a row-major slice.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a matrix, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (n, k) = self.dims2()?;
        let (k2, m) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: vec![n, m],
            data: matmul_raw(&self.data, &other.data, n, k, m),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `[n,k] x [k,m]` on raw row-major buffers.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: [k,n]`, `b: [k,m]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a[p * n + i];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * m..(i + 1) * m].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: [n,k]`, `b: [m,k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = arow
                .iter()
                .zip(&b[j * k..(j + 1) * k])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

/// Output shape of an elementwise binary op.
///
/// Operands broadcast when they have equal rank and each dimension pair is
/// equal or contains a 1, or when one side holds a single element.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if nb == 1 && b.len() <= a.len() {
        return Ok(a.to_vec());
    }
    if na == 1 && a.len() <= b.len() {
        return Ok(b.to_vec());
    }
    if a.len() != b.len() {
        return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// For every flat index of `out`, the flat index into an operand of shape
/// `src` broadcast against it.
pub(crate) fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let ns: usize = src.iter().product();
    if src == out {
        return (0..n).collect();
    }
    if ns == 1 {
        return vec![0; n];
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let mut idx = vec![0usize; rank];
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        res.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    res
}
