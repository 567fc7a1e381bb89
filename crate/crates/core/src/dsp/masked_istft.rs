use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use super::mask::MagPhase;
use super::stft::StftPlan;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{CustomOp, Graph, Mat, NodeId};

/// Reconstructs waveforms from mixture spectrograms and a stacked mask node.
///
/// The mask holds `frames` consecutive rows per mixture; the output has one
/// `source_length` row per mixture. Mixtures enter as constants.
pub struct MaskedIstft<T: Scalar> {
    plan: Arc<StftPlan<T>>,
    re: Array2<T>,
    im: Array2<T>,
    frames: usize,
    source_length: usize,
}

impl<T: Scalar> MaskedIstft<T> {
    pub fn new(mixtures: &[MagPhase<T>]) -> Result<Self> {
        let first = mixtures.first().ok_or_else(|| Error::domain("no mixture spectrograms"))?;
        if mixtures
            .iter()
            .any(|m| m.dim() != first.dim() || m.config != first.config || m.source_length != first.source_length)
        {
            return Err(Error::domain("batched spectrograms must share geometry"));
        }
        let plan = StftPlan::new(&first.config)?;
        let parts: Vec<(Array2<T>, Array2<T>)> = mixtures.iter().map(|m| m.cartesian()).collect();
        let re_views: Vec<_> = parts.iter().map(|p| p.0.view()).collect();
        let im_views: Vec<_> = parts.iter().map(|p| p.1.view()).collect();
        Ok(MaskedIstft {
            plan: Arc::new(plan),
            re: ndarray::concatenate(Axis(0), &re_views).expect("equal widths"),
            im: ndarray::concatenate(Axis(0), &im_views).expect("equal widths"),
            frames: first.dim().0,
            source_length: first.source_length,
        })
    }

    pub fn apply(self, g: &mut Graph<T>, mask: NodeId) -> Result<NodeId> {
        if g.shape(mask) != self.re.dim() {
            return Err(Error::domain(format!(
                "mask shape {:?} does not match spectrogram {:?}",
                g.shape(mask),
                self.re.dim()
            )));
        }
        let m = g.value(mask);
        let re = m * &self.re;
        let im = m * &self.im;
        let batch = self.re.nrows() / self.frames;
        let mut out = Array2::zeros((batch, self.source_length));
        for b in 0..batch {
            let rows = s![b * self.frames..(b + 1) * self.frames, ..];
            let y = self.plan.inverse(&re.slice(rows).to_owned(), &im.slice(rows).to_owned(), self.source_length);
            out.row_mut(b).assign(&ndarray::Array1::from(y));
        }
        Ok(g.custom(&[mask], out, Box::new(self)))
    }
}

impl<T: Scalar> CustomOp<T> for MaskedIstft<T> {
    fn name(&self) -> &'static str {
        "masked_istft"
    }

    fn backward(&self, _inputs: &[&Mat<T>], _output: &Mat<T>, grad: &Mat<T>, needs: &[bool]) -> Vec<Option<Mat<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let mut d = Array2::zeros(self.re.dim());
        for (b, gr) in grad.rows().into_iter().enumerate() {
            let (d_re, d_im) = self.plan.inverse_adjoint(&gr.to_vec(), self.frames);
            let rows = s![b * self.frames..(b + 1) * self.frames, ..];
            let v = &d_re * &self.re.slice(rows) + &d_im * &self.im.slice(rows);
            d.slice_mut(rows).assign(&v);
        }
        vec![Some(d)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{apply_mask, istft, magphase, stft, StftConfig, Waveform};
    use crate::tape::{Bind, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_istft_and_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = StftConfig { window_length: 32, hop: 8, n_fft: 32, ..StftConfig::toy() };
        let w = Waveform::new((0..100).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(), 8000).unwrap();
        let mp = magphase(&stft(&w, &cfg).unwrap());
        let mut store = ParamStore::new();
        let (f, b) = mp.dim();
        store.insert("m", Array2::from_shape_fn((f, b), |_| rng.random_range(0.1..0.9)), true);
        let weights: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let m = Bind::trainable(s).node(&mut g, "m");
            let y = MaskedIstft::new(std::slice::from_ref(&mp)).unwrap().apply(&mut g, m).unwrap();
            let wv = g.input(Array2::from_shape_vec((1, 100), weights.clone()).unwrap());
            let p = g.mul(y, wv);
            let l = g.sum_all(p);
            (g.value(y).clone(), g.scalar(l), g.backward(l))
        };
        let (y, _, grads) = eval(&store);
        let direct = istft(&apply_mask(store.get("m").unwrap(), &mp).unwrap()).unwrap();
        for (a, b) in y.iter().zip(direct.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
        let id = store.id("m").unwrap();
        let an = grads.get(id).unwrap().clone();
        let h = 1e-6;
        for idx in (0..f * b).step_by(7) {
            let mut p = store.clone();
            let mut q = store.clone();
            p.value_mut(id).as_slice_mut().unwrap()[idx] += h;
            q.value_mut(id).as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(&p).1 - eval(&q).1) / (2.0 * h);
            let a = an.as_slice().unwrap()[idx];
            assert!((fd - a).abs() < 1e-6 * (1.0 + fd.abs()), "{idx}: {a} vs {fd}");
        }
    }
}
