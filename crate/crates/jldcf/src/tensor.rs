use crate::error::OpError;

/// Dense N-dimensional array of `f64` in row-major layout.
///
/// The canonical 4-d layout is batch x channels x height x width. `grad`,
/// when present, always has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Interpret as NCHW, failing with a rank error otherwise.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize), OpError> {
        if self.shape.len() != 4 {
            return Err(OpError::RankMismatch {
                op,
                expected: 4,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Allocate (or keep) the gradient buffer, zero-filled.
    pub fn ensure_grad(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
        assert!(t.is_finite());
    }

    #[test]
    #[should_panic]
    fn shape_mismatch_panics() {
        let _ = Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn grad_matches_len() {
        let mut t = Tensor::zeros(&[4, 1, 2, 2]);
        t.ensure_grad();
        assert_eq!(t.grad.as_ref().unwrap().len(), t.numel());
    }
}
