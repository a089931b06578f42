//! Dense row-major float64 tensors with at most three axes.

use crate::error::{KudaError, Result};

pub const MAX_RANK: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(KudaError::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: "element count does not match data length",
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(KudaError::InvalidShape {
                op: "from_rows",
                shape: vec![rows.len(), cols],
                reason: "ragged rows",
            });
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(KudaError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
        return Err(KudaError::InvalidShape {
            op: "tensor",
            shape: shape.to_vec(),
            reason: "expected 1 to 3 positive axes",
        });
    }
    Ok(())
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(KudaError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

const MR: usize = 4;
const NR: usize = 4;

/// `out[n×m] += A · b[k×m]` where `A(i, p) = a[i * rs + p * cs]`.
///
/// Both operands are packed into zero-padded `MR`- and `NR`-wide panels so
/// the inner loop works on fixed-size register tiles. Each output element
/// sums over `p` in order before being added to `out`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    a: &[f64],
    rs: usize,
    cs: usize,
    b: &[f64],
    out: &mut [f64],
    n: usize,
    k: usize,
    m: usize,
) {
    if n == 0 || k == 0 || m == 0 {
        return;
    }
    let (n_blocks, m_blocks) = (n.div_ceil(MR), m.div_ceil(NR));
    let mut ap = vec![0.0; n_blocks * k * MR];
    for i in 0..n {
        let (blk, r) = (i / MR, i % MR);
        let panel = &mut ap[blk * k * MR..(blk + 1) * k * MR];
        for p in 0..k {
            panel[p * MR + r] = a[i * rs + p * cs];
        }
    }
    let mut bp = vec![0.0; m_blocks * k * NR];
    for p in 0..k {
        let row = &b[p * m..(p + 1) * m];
        for (j, &v) in row.iter().enumerate() {
            bp[(j / NR) * k * NR + p * NR + j % NR] = v;
        }
    }
    for (bi, a_panel) in ap.chunks_exact(k * MR).enumerate() {
        let i = bi * MR;
        let mr = MR.min(n - i);
        for (bj, b_panel) in bp.chunks_exact(k * NR).enumerate() {
            let j = bj * NR;
            let nr = NR.min(m - j);
            let mut acc = [[0.0f64; NR]; MR];
            for (av, bv) in a_panel.chunks_exact(MR).zip(b_panel.chunks_exact(NR)) {
                let av: &[f64; MR] = av.try_into().expect("panel width");
                let bv: &[f64; NR] = bv.try_into().expect("panel width");
                for r in 0..MR {
                    for c in 0..NR {
                        acc[r][c] += av[r] * bv[c];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate().take(mr) {
                let row = &mut out[(i + r) * m + j..(i + r) * m + j + nr];
                for (o, v) in row.iter_mut().zip(acc_row) {
                    *o += v;
                }
            }
        }
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    gemm_strided(a, k, 1, b, out, n, k, m);
}

/// `out[n×m] += a[n×k] · b[m×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    let mut bt = vec![0.0; k * m];
    for j in 0..m {
        for p in 0..k {
            bt[p * m + j] = b[j * k + p];
        }
    }
    gemm_strided(a, k, 1, &bt, out, n, k, m);
}

/// `out[k×m] += a[n×k]ᵀ · b[n×m]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    gemm_strided(a, 1, k, b, out, k, n, m);
}
