use ndarray::Array2;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{CustomOp, Graph, Mat, NodeId};

/// Residual floors are this fraction of the reference (or projection) energy,
/// which caps both ratios at 80 dB.
pub const EPS_REL: f64 = 1e-8;

const DB: f64 = 10.0;

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.to_f64_lossy() * y.to_f64_lossy()).sum()
}

fn check<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::domain(format!("estimate has {} samples, reference {}", est.len(), reference.len())));
    }
    let e = dot(reference, reference);
    if !(e > 0.0) {
        return Err(Error::domain("reference signal is silent"));
    }
    Ok(e)
}

pub fn sdr_slices<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    let energy = check(est, reference)?;
    let resid: f64 = est
        .iter()
        .zip(reference)
        .map(|(&e, &r)| {
            let d = r.to_f64_lossy() - e.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(DB * (energy / resid.max(EPS_REL * energy)).log10())
}

pub fn sisdr_slices<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    let energy = check(est, reference)?;
    let alpha = dot(est, reference) / energy;
    let mut s2 = 0.0;
    let mut e2 = 0.0;
    for (&e, &r) in est.iter().zip(reference) {
        let s = alpha * r.to_f64_lossy();
        let d = e.to_f64_lossy() - s;
        s2 += s * s;
        e2 += d * d;
    }
    if !(s2 > 0.0) {
        return Err(Error::domain("estimate has no component along the reference"));
    }
    Ok(DB * (s2 / e2.max(EPS_REL * s2)).log10())
}

/// `10·log10(‖x‖² / ‖x − x̂‖²)`.
pub fn sdr<T: Scalar>(est: &Waveform<T>, reference: &Waveform<T>) -> Result<f64> {
    sdr_slices(est.samples(), reference.samples())
}

/// Scale-invariant SDR: `x̂` against its projection onto `x`.
pub fn sisdr<T: Scalar>(est: &Waveform<T>, reference: &Waveform<T>) -> Result<f64> {
    sisdr_slices(est.samples(), reference.samples())
}

/// `−λ·SDR − (1 − λ)·SISDR`.
pub fn loss_value<T: Scalar>(est: &Waveform<T>, reference: &Waveform<T>, lambda: f64) -> Result<f64> {
    Ok(-lambda * sdr(est, reference)? - (1.0 - lambda) * sisdr(est, reference)?)
}

/// Per-row loss terms and their gradients with respect to the estimate.
fn row_loss<T: Scalar>(est: &[T], reference: &[T], lambda: f64) -> (f64, f64, f64, Vec<f64>) {
    let k = DB / std::f64::consts::LN_10;
    let n = est.len();
    let x: Vec<f64> = reference.iter().map(|v| v.to_f64_lossy()).collect();
    let y: Vec<f64> = est.iter().map(|v| v.to_f64_lossy()).collect();
    let ex: f64 = x.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut grad = vec![0.0; n];

    let r: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
    let er: f64 = r.iter().map(|v| v * v).sum();
    let floor = EPS_REL * ex;
    let sdr = DB * (ex / er.max(floor)).log10();
    if er > floor {
        // d SDR / d y = 2k · r / ‖r‖²
        for i in 0..n {
            grad[i] -= lambda * 2.0 * k * r[i] / er;
        }
    }

    let alpha = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / ex;
    let s: Vec<f64> = x.iter().map(|v| alpha * v).collect();
    let e: Vec<f64> = y.iter().zip(&s).map(|(a, b)| a - b).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE * ex);
    let ee: f64 = e.iter().map(|v| v * v).sum();
    let floor = EPS_REL * ss;
    let sisdr = DB * (ss / ee.max(floor)).log10();
    if ee > floor {
        // d SISDR / d y = 2k · (s / ‖s‖² − e / ‖e‖²)
        for i in 0..n {
            grad[i] -= (1.0 - lambda) * 2.0 * k * (s[i] / ss - e[i] / ee);
        }
    }
    (-lambda * sdr - (1.0 - lambda) * sisdr, sdr, sisdr, grad)
}

/// Mean separation loss over the rows of an estimate node.
pub struct SeparationLoss<T: Scalar> {
    targets: Array2<T>,
    lambda: f64,
    grads: Array2<T>,
    pub sdr: Vec<f64>,
    pub sisdr: Vec<f64>,
}

impl<T: Scalar> SeparationLoss<T> {
    /// Adds the loss node; returns it together with per-row SDR and SISDR.
    pub fn apply(g: &mut Graph<T>, est: NodeId, targets: Array2<T>, lambda: f64) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let y = g.value(est);
        if y.dim() != targets.dim() {
            return Err(Error::domain(format!("estimates {:?} vs targets {:?}", y.dim(), targets.dim())));
        }
        let rows = targets.nrows();
        let mut grads = Array2::zeros(targets.dim());
        let (mut total, mut sdrs, mut sisdrs) = (0.0, Vec::new(), Vec::new());
        for b in 0..rows {
            let yr = y.row(b).to_vec();
            let xr = targets.row(b).to_vec();
            if !(xr.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() > 0.0) {
                return Err(Error::domain("silent training target"));
            }
            let (l, s1, s2, gr) = row_loss(&yr, &xr, lambda);
            total += l;
            sdrs.push(s1);
            sisdrs.push(s2);
            for (j, v) in gr.into_iter().enumerate() {
                grads[[b, j]] = T::of(v / rows as f64);
            }
        }
        let out = Array2::from_elem((1, 1), T::of(total / rows as f64));
        let op = SeparationLoss { targets, lambda, grads, sdr: sdrs.clone(), sisdr: sisdrs.clone() };
        Ok((g.custom(&[est], out, Box::new(op)), sdrs, sisdrs))
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn targets(&self) -> &Array2<T> {
        &self.targets
    }
}

impl<T: Scalar> CustomOp<T> for SeparationLoss<T> {
    fn name(&self) -> &'static str {
        "separation_loss"
    }

    fn backward(&self, _inputs: &[&Mat<T>], _output: &Mat<T>, grad: &Mat<T>, needs: &[bool]) -> Vec<Option<Mat<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let k = grad[[0, 0]];
        vec![Some(self.grads.mapv(|v| v * k))]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{Bind, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn w(v: &[f64]) -> Waveform<f64> {
        Waveform::new(v.to_vec(), 8000).unwrap()
    }

    #[test]
    fn hand_cases() {
        let x = w(&[1.0, 0.0, 0.0, 0.0]);
        assert!((sdr(&w(&[1.0, 0.0, 0.0, 0.1]), &x).unwrap() - 20.0).abs() < 1e-9);
        assert!(sdr(&x, &x).unwrap() >= 80.0 - 1e-9);
        assert!(sdr(&w(&[2.0, 0.0, 0.0, 0.0]), &x).unwrap().abs() < 1e-12);
        let r = w(&[1.0, 2.0, 3.0]);
        assert!((sisdr(&w(&[1.0, 1.0, 1.0]), &r).unwrap() - 6f64.log10() * 10.0).abs() < 1e-9);
        assert!(sisdr(&r, &r).unwrap() >= 80.0 - 1e-9);
        assert!(sdr(&x, &w(&[0.0; 4])).is_err());
        assert!(sdr(&x, &w(&[1.0; 3])).is_err());
    }

    #[test]
    fn loss_combination() {
        let x = w(&[1.0, 2.0, 3.0]);
        let y = w(&[1.1, 1.9, 3.2]);
        let l = loss_value(&y, &x, 1.0).unwrap();
        assert_eq!(l, -sdr(&y, &x).unwrap());
        let l9 = loss_value(&y, &x, 0.9).unwrap();
        assert!((l9 - (-0.9 * sdr(&y, &x).unwrap() - 0.1 * sisdr(&y, &x).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((2, 16), |_| rng.random_range(-1.0..1.0));
        let mut s = ParamStore::new();
        s.insert("y", Array2::from_shape_fn((2, 16), |_| rng.random_range(-1.0..1.0)), true);
        let eval = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let y = Bind::trainable(s).node(&mut g, "y");
            let (l, _, _) = SeparationLoss::apply(&mut g, y, x.clone(), 0.9).unwrap();
            (g.scalar(l), g.backward(l))
        };
        let id = s.id("y").unwrap();
        let an = eval(&s).1.get(id).unwrap().clone();
        let h = 1e-6;
        for i in 0..32 {
            let mut p = s.clone();
            let mut m = s.clone();
            p.value_mut(id).as_slice_mut().unwrap()[i] += h;
            m.value_mut(id).as_slice_mut().unwrap()[i] -= h;
            let fd = (eval(&p).0 - eval(&m).0) / (2.0 * h);
            let a = an.as_slice().unwrap()[i];
            assert!((fd - a).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {a} vs {fd}");
        }
    }
}
