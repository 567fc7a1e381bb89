use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::nn;
use crate::scalar::Scalar;
use crate::tape::{Bind, Graph, NodeId};

/// The two affine maps of one modulation layer, `γ(c) = Wγ·c + bγ` and
/// `β(c) = Wβ·c + bβ`, weights stored `dim × cond_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmLayer<T: Scalar> {
    pub gamma_w: Array2<T>,
    pub gamma_b: Array1<T>,
    pub beta_w: Array2<T>,
    pub beta_b: Array1<T>,
}

impl<T: Scalar> FilmLayer<T> {
    pub fn dim(&self) -> usize {
        self.gamma_b.len()
    }

    pub fn cond_dim(&self) -> usize {
        self.gamma_w.ncols()
    }

    /// Reads the layer stored under `name` in a parameter store.
    pub fn from_bind(p: &Bind<T>, name: &str) -> Self {
        let row = |n: &str| p.value(n).row(0).to_owned();
        FilmLayer {
            gamma_w: p.value(&format!("{name}.gamma.w")).clone(),
            gamma_b: row(&format!("{name}.gamma.b")),
            beta_w: p.value(&format!("{name}.beta.w")).clone(),
            beta_b: row(&format!("{name}.beta.b")),
        }
    }
}

/// `γ(c) ⊙ h + β(c)` with the modulation broadcast over tokens.
pub fn film<T: Scalar>(h: &Array2<T>, c: &Array1<T>, layer: &FilmLayer<T>) -> Result<Array2<T>> {
    if h.ncols() != layer.dim() || c.len() != layer.cond_dim() {
        return Err(Error::domain(format!(
            "features of width {} and condition of length {} do not fit a {}→{} modulation",
            h.ncols(),
            c.len(),
            layer.cond_dim(),
            layer.dim()
        )));
    }
    let gamma = layer.gamma_w.dot(c) + &layer.gamma_b;
    let beta = layer.beta_w.dot(c) + &layer.beta_b;
    Ok(h * &gamma.insert_axis(Axis(0)) + &beta.insert_axis(Axis(0)))
}

/// Graph form for a batch: `cond` is `batch × cond_dim`, `h` holds
/// `tokens_per_example` consecutive rows per example.
pub fn film_node<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bind<T>,
    name: &str,
    h: NodeId,
    cond: NodeId,
    tokens_per_example: usize,
) -> NodeId {
    let gamma = nn::linear(g, p, &format!("{name}.gamma"), cond, 0.0);
    let beta = nn::linear(g, p, &format!("{name}.beta"), cond, 0.0);
    let batch = g.shape(cond).0;
    let owner: Arc<Vec<usize>> = Arc::new((0..batch * tokens_per_example).map(|i| i / tokens_per_example).collect());
    let gamma = g.gather_rows(gamma, Arc::clone(&owner));
    let beta = g.gather_rows(beta, owner);
    let y = g.mul(h, gamma);
    g.add(y, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn layer(gb: Array1<f64>, bb: Array1<f64>) -> FilmLayer<f64> {
        let d = gb.len();
        FilmLayer { gamma_w: Array2::zeros((d, 3)), gamma_b: gb, beta_w: Array2::zeros((d, 3)), beta_b: bb }
    }

    #[test]
    fn cases() {
        let c = array![0.3, -0.2, 0.9];
        let h = array![[2.0, 3.0], [-1.0, 4.0]];
        assert_eq!(film(&h, &c, &layer(array![1.0, 1.0], array![0.0, 0.0])).unwrap(), h);
        let zero = film(&h, &c, &layer(array![0.0, 0.0], array![7.0, -7.0])).unwrap();
        assert!(zero.rows().into_iter().all(|r| r.to_vec() == vec![7.0, -7.0]));
        let hand = film(&array![[2.0, 3.0]], &c, &layer(array![0.5, 2.0], array![1.0, -1.0])).unwrap();
        assert_eq!(hand, array![[2.0, 5.0]]);
        assert!(film(&array![[1.0, 2.0, 3.0]], &c, &layer(array![1.0, 1.0], array![0.0, 0.0])).is_err());
    }
}
