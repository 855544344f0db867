use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("shape {shape:?} needs {expected} values, got {actual}")]
pub struct ShapeError {
    pub shape: Vec<usize>,
    pub expected: usize,
    pub actual: usize,
}

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ShapeError {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = beta·c + op(a)·op(b)` for 2-D row-major tensors, where `op` is the
/// identity or the transpose.
pub(crate) fn gemm(
    a: &Tensor,
    trans_a: bool,
    b: &Tensor,
    trans_b: bool,
    beta: f64,
    c: &mut Tensor,
) {
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(c.shape, [m, n], "gemm output shape");
    let (rsa, csa) = if trans_a {
        (1, ac as isize)
    } else {
        (ac as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, bc as isize)
    } else {
        (bc as isize, 1)
    };
    // SAFETY: the strides above describe exactly the row-major buffers
    // `a.data`, `b.data` and `c.data`, whose lengths match the asserted
    // shapes, so every element addressed lies inside its buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Vec<f64> {
        let get = |t: &Tensor, tr: bool, i: usize, j: usize| {
            if tr {
                t.data[j * t.shape[1] + i]
            } else {
                t.data[i * t.shape[1] + j]
            }
        };
        let m = if ta { a.shape[1] } else { a.shape[0] };
        let k = if ta { a.shape[0] } else { a.shape[1] };
        let n = if tb { b.shape[0] } else { b.shape[1] };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|l| get(a, ta, i, l) * get(b, tb, l, j)).sum();
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let a = Tensor::from_vec(&[3, 4], (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let b = Tensor::from_vec(&[4, 3], (0..12).map(|v| (v as f64).sin()).collect()).unwrap();
        for (ta, tb) in [(false, false), (true, true)] {
            let m = if ta { 4 } else { 3 };
            let n = if tb { 4 } else { 3 };
            let mut c = Tensor::zeros(&[m, n]);
            gemm(&a, ta, &b, tb, 0.0, &mut c);
            let want = naive(&a, ta, &b, tb);
            for (x, y) in c.data().iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let mut c = Tensor::zeros(&[3, 3]);
        gemm(&a, false, &a, true, 0.0, &mut c);
        let want = naive(&a, false, &a, true);
        assert!(c
            .data()
            .iter()
            .zip(&want)
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::zeros(&[2, 3]).len(), 6);
    }
}
