use super::{invalid, mismatch, NnError};

/// Row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self, NnError> {
        let dims = dims.into();
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(invalid("tensor", format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Self { dims, data: vec![0.0; n] }
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f32) -> Self {
        let mut t = Self::zeros(dims);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self { dims: vec![data.len()], data }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.chunks(64).all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()))
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), NnError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NnError::NonFinite { op })
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize), NnError> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(invalid(op, format!("expected rank 2, got {:?}", self.dims))),
        }
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self, NnError> {
        let dims = dims.into();
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(mismatch("reshape", &self.dims, &dims));
        }
        Ok(Self { dims, data: self.data })
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.dims[self.dims.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Rows `start..end` of a rank-2 tensor as a new tensor.
    pub fn rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.dims[1];
        Tensor { dims: vec![end - start, c], data: self.data[start * c..end * c].to_vec() }
    }

    /// Vertical concatenation of rank-2 tensors with equal column counts.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, NnError> {
        let Some(first) = parts.first() else {
            return Err(invalid("concat_rows", "no parts"));
        };
        let c = first.matrix_dims("concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = p.matrix_dims("concat_rows")?;
            if pc != c {
                return Err(mismatch("concat_rows", first.dims(), p.dims()));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { dims: vec![rows, c], data })
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Tensor) -> Result<Tensor, NnError> {
        if self.dims != other.dims {
            return Err(mismatch("add", &self.dims, &other.dims));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { dims: self.dims.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), NnError> {
        if self.dims != other.dims {
            return Err(mismatch("add_assign", &self.dims, &other.dims));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}
