use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Low-rank update `ΔW = scale · B·A` in column-vector convention.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Scalar> {
    /// `d × r`
    pub b: Array2<T>,
    /// `r × k`
    pub a: Array2<T>,
    pub scale: T,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(b: Array2<T>, a: Array2<T>, scale: T) -> Result<Self> {
        if b.ncols() != a.nrows() {
            return Err(Error::domain(format!("LoRA rank mismatch: B is {:?}, A is {:?}", b.dim(), a.dim())));
        }
        Ok(LoraAdapter { b, a, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn delta(&self) -> Array2<T> {
        self.b.dot(&self.a).mapv(|v| v * self.scale)
    }

    fn check(&self, w0: &Array2<T>) -> Result<()> {
        if w0.dim() != (self.b.nrows(), self.a.ncols()) {
            return Err(Error::domain(format!(
                "base weight {:?} incompatible with adapter {}×{}",
                w0.dim(),
                self.b.nrows(),
                self.a.ncols()
            )));
        }
        Ok(())
    }
}

/// `h' = W0·h + scale·B·(A·h)`.
pub fn lora_forward<T: Scalar>(w0: &Array2<T>, adapter: &LoraAdapter<T>, h: &Array1<T>) -> Result<Array1<T>> {
    adapter.check(w0)?;
    if h.len() != w0.ncols() {
        return Err(Error::domain(format!("input of length {} for weight {:?}", h.len(), w0.dim())));
    }
    let low = adapter.b.dot(&adapter.a.dot(h));
    Ok(w0.dot(h) + low.mapv(|v| v * adapter.scale))
}

/// `W = W0 + scale·B·A`.
pub fn lora_merge<T: Scalar>(w0: &Array2<T>, adapter: &LoraAdapter<T>) -> Result<Array2<T>> {
    adapter.check(w0)?;
    Ok(w0 + &adapter.delta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn hand_case() {
        let w0 = Array2::<f64>::eye(2);
        let ad = LoraAdapter::new(array![[1.0], [0.0]], array![[0.0, 1.0]], 1.0).unwrap();
        assert_eq!(lora_forward(&w0, &ad, &array![3.0, 5.0]).unwrap(), array![8.0, 5.0]);
    }

    #[test]
    fn zero_b_and_merge_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w0 = random(6, 5, &mut rng);
        let a = random(2, 5, &mut rng);
        let h = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let zero = LoraAdapter::new(Array2::zeros((6, 2)), a.clone(), 1.0).unwrap();
        assert_eq!(lora_forward(&w0, &zero, &h).unwrap(), w0.dot(&h));
        assert_eq!(lora_merge(&w0, &zero).unwrap(), w0);
        let ad = LoraAdapter::new(random(6, 2, &mut rng), a, 0.7).unwrap();
        let merged = lora_merge(&w0, &ad).unwrap().dot(&h);
        let direct = lora_forward(&w0, &ad, &h).unwrap();
        assert!(merged.iter().zip(direct.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn rank_mismatch_is_rejected() {
        assert!(LoraAdapter::new(Array2::<f64>::zeros((3, 2)), Array2::zeros((3, 4)), 1.0).is_err());
        let ad = LoraAdapter::new(Array2::<f64>::zeros((3, 2)), Array2::zeros((2, 4)), 1.0).unwrap();
        assert!(lora_forward(&Array2::zeros((3, 3)), &ad, &Array1::zeros(3)).is_err());
    }
}
