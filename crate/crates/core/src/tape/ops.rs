use ndarray::{s, Array2, Axis};

use super::{accumulate, Graph, Mat, Node, NodeId, Op};
use crate::scalar::Scalar;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Sigmoid clamped to `[eps, 1 - eps]` so the output never rounds to 0 or 1.
#[inline]
pub(crate) fn sigmoid_open<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let eps = T::epsilon();
    s.max(eps).min(T::one() - eps)
}

pub(crate) fn normalize<T: Scalar>(x: &Mat<T>, eps: T) -> (Mat<T>, Vec<T>) {
    let c = T::of(x.ncols() as f64);
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c;
        let is = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        inv.push(is);
    }
    (xhat, inv)
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

fn gather<T: Scalar>(x: &Mat<T>, rows: &[usize]) -> Mat<T> {
    x.select(Axis(0), rows)
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    groups: &[Vec<usize>],
    heads: usize,
    scale: T,
) -> (Mat<T>, Vec<Mat<T>>) {
    let (n, d) = q.dim();
    let dh = d / heads;
    let mut out = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(groups.len() * heads);
    for g in groups {
        let qg = gather(q, g);
        let kg = gather(k, g);
        let vg = gather(v, g);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = qg.slice(cols).dot(&kg.slice(cols).t());
            scores.mapv_inplace(|x| x * scale);
            let p = softmax_rows(&scores);
            let o = p.dot(&vg.slice(cols));
            for (local, &tok) in g.iter().enumerate() {
                out.slice_mut(s![tok, h * dh..(h + 1) * dh]).assign(&o.row(local));
            }
            probs.push(p);
        }
    }
    (out, probs)
}

fn row_sum<T: Scalar>(g: &Mat<T>) -> Mat<T> {
    g.sum_axis(Axis(0)).insert_axis(Axis(0))
}

pub(crate) fn backward_node<T: Scalar>(
    graph: &Graph<T>,
    node: &Node<T>,
    g: &Mat<T>,
    grads: &mut [Option<Mat<T>>],
) {
    let val = |id: NodeId| -> &Mat<T> { graph.value(id) };
    let needs = |id: NodeId| graph.needs(id);
    let push = |id: NodeId, grad: Mat<T>, grads: &mut [Option<Mat<T>>]| {
        accumulate(&mut grads[id.0], grad);
    };
    match &node.op {
        Op::Input | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            if needs(*a) {
                push(*a, g.dot(&val(*b).t()), grads);
            }
            if needs(*b) {
                push(*b, val(*a).t().dot(g), grads);
            }
        }
        Op::MatMulNT(a, b) => {
            if needs(*a) {
                push(*a, g.dot(val(*b)), grads);
            }
            if needs(*b) {
                push(*b, g.t().dot(val(*a)), grads);
            }
        }
        Op::Add(a, b) => {
            if needs(*a) {
                push(*a, g.clone(), grads);
            }
            if needs(*b) {
                push(*b, g.clone(), grads);
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                push(*a, g.clone(), grads);
            }
            if needs(*b) {
                push(*b, g.mapv(|x| -x), grads);
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                push(*a, g * val(*b), grads);
            }
            if needs(*b) {
                push(*b, g * val(*a), grads);
            }
        }
        Op::AddRow(a, r) => {
            if needs(*a) {
                push(*a, g.clone(), grads);
            }
            if needs(*r) {
                push(*r, row_sum(g), grads);
            }
        }
        Op::MulRow(a, r) => {
            if needs(*a) {
                push(*a, g * val(*r), grads);
            }
            if needs(*r) {
                push(*r, row_sum(&(g * val(*a))), grads);
            }
        }
        Op::Scale(a, k) => {
            let k = *k;
            push(*a, g.mapv(|x| x * k), grads);
        }
        Op::Gelu(a) => {
            let mut d = val(*a).mapv(gelu_grad);
            d *= g;
            push(*a, d, grads);
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            let mut d = y.mapv(|s| s * (T::one() - s));
            d *= g;
            push(*a, d, grads);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            if needs(*beta) {
                push(*beta, row_sum(g), grads);
            }
            if needs(*gamma) {
                push(*gamma, row_sum(&(g * xhat)), grads);
            }
            if needs(*x) {
                let gam = val(*gamma);
                let c = T::of(xhat.ncols() as f64);
                let gx = g * gam;
                let mut dx = Array2::zeros(xhat.dim());
                for (i, mut out_row) in dx.rows_mut().into_iter().enumerate() {
                    let gr = gx.row(i);
                    let xr = xhat.row(i);
                    let mean_g = gr.sum() / c;
                    let mean_gx = gr.dot(&xr) / c;
                    let is = inv_std[i];
                    for j in 0..out_row.len() {
                        out_row[j] = is * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                push(*x, dx, grads);
            }
        }
        Op::Attention { q, k, v, groups, heads, scale, probs } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (n, d) = qv.dim();
            let dh = d / heads;
            let mut dq = Array2::zeros((n, d));
            let mut dk = Array2::zeros((n, d));
            let mut dv = Array2::zeros((n, d));
            let mut pi = 0;
            for grp in groups.iter() {
                let qg = gather(qv, grp);
                let kg = gather(kv, grp);
                let vg = gather(vv, grp);
                let gg = gather(g, grp);
                for h in 0..*heads {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let p = &probs[pi];
                    pi += 1;
                    let go = gg.slice(cols);
                    let dvg = p.t().dot(&go);
                    let dp = go.dot(&vg.slice(cols).t());
                    // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
                    let mut ds = dp.clone();
                    for (mut r, (pr, dpr)) in ds.rows_mut().into_iter().zip(p.rows().into_iter().zip(dp.rows())) {
                        let dot = pr.dot(&dpr);
                        for j in 0..r.len() {
                            r[j] = pr[j] * (dpr[j] - dot);
                        }
                    }
                    ds.mapv_inplace(|x| x * *scale);
                    let dqg = ds.dot(&kg.slice(cols));
                    let dkg = ds.t().dot(&qg.slice(cols));
                    for (local, &tok) in grp.iter().enumerate() {
                        let dst = s![tok, h * dh..(h + 1) * dh];
                        dq.slice_mut(dst).assign(&dqg.row(local));
                        dk.slice_mut(dst).assign(&dkg.row(local));
                        dv.slice_mut(dst).assign(&dvg.row(local));
                    }
                }
            }
            if needs(*q) {
                push(*q, dq, grads);
            }
            if needs(*k) {
                push(*k, dk, grads);
            }
            if needs(*v) {
                push(*v, dv, grads);
            }
        }
        Op::GatherRows { x, index } => {
            let src = val(*x);
            let mut dx = Array2::zeros(src.dim());
            for (dst, &i) in index.iter().enumerate() {
                let mut r = dx.row_mut(i);
                r += &g.row(dst);
            }
            push(*x, dx, grads);
        }
        Op::Reshape(x) => {
            let (r, c) = val(*x).dim();
            let dx = Array2::from_shape_vec((r, c), g.iter().copied().collect()).expect("reshape grad");
            push(*x, dx, grads);
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let w = val(p).ncols();
                if needs(p) {
                    push(p, g.slice(s![.., off..off + w]).to_owned(), grads);
                }
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let h = val(p).nrows();
                if needs(p) {
                    push(p, g.slice(s![off..off + h, ..]).to_owned(), grads);
                }
                off += h;
            }
        }
        Op::SliceCols(x, start) => {
            let src = val(*x);
            let mut dx = Array2::zeros(src.dim());
            dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
            push(*x, dx, grads);
        }
        Op::MeanRows(x) => {
            let src = val(*x);
            let n = T::of(src.nrows() as f64);
            let row = g.mapv(|v| v / n);
            let dx = Array2::from_shape_fn(src.dim(), |(_, j)| row[[0, j]]);
            push(*x, dx, grads);
        }
        Op::SumAll(x) => {
            let src = val(*x);
            push(*x, Array2::from_elem(src.dim(), g[[0, 0]]), grads);
        }
        Op::NormalizeRows { x, norms } => {
            let y = &node.value;
            let mut dx = g.clone();
            for (i, mut r) in dx.rows_mut().into_iter().enumerate() {
                let yr = y.row(i);
                let dot = yr.dot(&g.row(i));
                let n = norms[i];
                for j in 0..r.len() {
                    r[j] = (r[j] - yr[j] * dot) / n;
                }
            }
            push(*x, dx, grads);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let n = T::of(targets.len() as f64);
            let mut d = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                d[[i, t]] -= T::one();
            }
            let scale = g[[0, 0]] / n;
            d.mapv_inplace(|v| v * scale);
            push(*logits, d, grads);
        }
        Op::Custom { inputs, op } => {
            let in_vals: Vec<&Mat<T>> = inputs.iter().map(|&i| val(i)).collect();
            let need: Vec<bool> = inputs.iter().map(|&i| needs(i)).collect();
            let gs = op.backward(&in_vals, &node.value, g, &need);
            assert_eq!(gs.len(), inputs.len(), "custom op {} gradient arity", op.name());
            for (&i, gi) in inputs.iter().zip(gs) {
                if let Some(gi) = gi {
                    if needs(i) {
                        push(i, gi, grads);
                    }
                }
            }
        }
    }
}
