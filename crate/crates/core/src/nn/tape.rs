//! Reverse-mode differentiation over time-major activations `[rows × channels]`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Silu(Var),
    Conv { x: Var, w: Var, b: Var, k: usize, stride: usize, cols: Array2<T> },
    GroupNorm { x: Var, groups: usize, rstd: Vec<T> },
    ScaleShift { x: Var, scale: Var, shift: Var },
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    PadRows { x: Var },
    Upsample2(Var),
}

struct Node<T> {
    value: Option<Array2<T>>,
    op: Op<T>,
    grad: bool,
}

/// Records a forward pass over a borrowed parameter set.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_grads: bool,
}

/// Gradients of a seeded backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.nodes[v.0].take()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// `[out_rows × k·C]` patches of a "same"-padded strided convolution.
pub(crate) fn im2col<T: Scalar>(x: ArrayView2<'_, T>, k: usize, stride: usize) -> Array2<T> {
    let (n, c) = x.dim();
    let pad = (k - 1) / 2;
    let out_rows = n.div_ceil(stride);
    let mut cols = Array2::zeros((out_rows, k * c));
    for i in 0..out_rows {
        for kk in 0..k {
            let src = (i * stride + kk) as isize - pad as isize;
            if src < 0 || src as usize >= n {
                continue;
            }
            cols.slice_mut(s![i, kk * c..(kk + 1) * c]).assign(&x.row(src as usize));
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(cols: ArrayView2<'_, T>, n: usize, c: usize, k: usize, stride: usize) -> Array2<T> {
    let pad = (k - 1) / 2;
    let mut dx = Array2::zeros((n, c));
    for i in 0..cols.nrows() {
        for kk in 0..k {
            let src = (i * stride + kk) as isize - pad as isize;
            if src < 0 || src as usize >= n {
                continue;
            }
            let mut row = dx.row_mut(src as usize);
            row += &cols.slice(s![i, kk * c..(kk + 1) * c]);
        }
    }
    dx
}

fn row_sum<T: Scalar>(a: &Array2<T>) -> Array2<T> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// `param_grads` decides whether parameters take part in the backward
    /// pass; input gradients are always available for inputs created with
    /// `requires_grad`.
    pub fn new(params: &'p ParamStore<T>, param_grads: bool) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_grads,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let grad = inputs.iter().any(|v| self.nodes[v.0].grad);
        self.nodes.push(Node { value: Some(value), op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("non-parameter nodes own a value"),
        }
    }

    pub fn input(&mut self, value: Array2<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Input, grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id), grad: self.param_grads });
        Var(self.nodes.len() - 1)
    }

    /// `x·W + b` with `W: [in × out]`, `b: [1 × out]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (self.param(w), self.param(b));
        let y = self.value(x).dot(self.value(w)) + self.value(b);
        self.push(y, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(silu);
        self.push(y, Op::Silu(x), &[x])
    }

    /// Temporal convolution with "same" padding. `W: [k·in × out]`.
    pub fn conv1d(&mut self, x: Var, w: ParamId, b: ParamId, k: usize, stride: usize) -> Var {
        let (w, b) = (self.param(w), self.param(b));
        let cols = im2col(self.value(x).view(), k, stride);
        let y = cols.dot(self.value(w)) + self.value(b);
        self.push(y, Op::Conv { x, w, b, k, stride, cols }, &[x, w, b])
    }

    /// Normalizes each channel group over all rows; no affine part.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.dim();
        assert!(c % groups == 0, "{c} channels do not split into {groups} groups");
        let gs = c / groups;
        let m = (n * gs) as f64;
        let mut y = Array2::zeros((n, c));
        let mut rstd = Vec::with_capacity(groups);
        for g in 0..groups {
            let block = xv.slice(s![.., g * gs..(g + 1) * gs]);
            let mean = block.iter().map(|v| v.as_f64()).sum::<f64>() / m;
            let var = block.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m;
            let r = 1.0 / (var + 1e-5).sqrt();
            let (mean_t, r_t) = (T::lit(mean), T::lit(r));
            Zip::from(y.slice_mut(s![.., g * gs..(g + 1) * gs]))
                .and(&block)
                .for_each(|o, &v| *o = (v - mean_t) * r_t);
            rstd.push(r_t);
        }
        self.push(y, Op::GroupNorm { x, groups, rstd }, &[x])
    }

    /// `x ⊙ (1 + scale) + shift` with `[1 × C]` rows broadcast over time.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let one_plus = self.value(scale).mapv(|s| T::one() + s);
        let y = self.value(x) * &one_plus + self.value(shift);
        self.push(y, Op::ScaleShift { x, scale, shift }, &[x, scale, shift])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let y = concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()]).expect("row counts agree");
        self.push(y, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let y = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(y, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let y = self.value(x).slice(s![start..end, ..]).to_owned();
        self.push(y, Op::SliceRows { x, start }, &[x])
    }

    /// Appends zero rows up to `rows`.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Var {
        let v = self.value(x);
        let mut y = Array2::zeros((rows, v.ncols()));
        y.slice_mut(s![..v.nrows(), ..]).assign(v);
        self.push(y, Op::PadRows { x }, &[x])
    }

    /// Nearest-neighbour upsampling by two along time.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut y = Array2::zeros((2 * v.nrows(), v.ncols()));
        for (i, row) in v.axis_iter(Axis(0)).enumerate() {
            y.row_mut(2 * i).assign(&row);
            y.row_mut(2 * i + 1).assign(&row);
        }
        self.push(y, Op::Upsample2(x), &[x])
    }

    fn acc(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    /// Propagates `seed` (the gradient of a scalar with respect to `out`)
    /// back through the tape. Parameter gradients are added into
    /// `param_grads` when given.
    pub fn backward(&self, out: Var, seed: Array2<T>, mut param_grads: Option<&mut ParamStore<T>>) -> Gradients<T> {
        assert_eq!(seed.dim(), self.value(out).dim(), "seed shape");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let need = |v: &Var| self.nodes[v.0].grad;
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(dy);
                }
                Op::Param(id) => {
                    if let Some(store) = param_grads.as_deref_mut() {
                        *store.get_mut(*id) += &dy;
                    }
                }
                Op::Linear { x, w, b } => {
                    if need(w) {
                        Self::acc(&mut grads, *w, self.value(*x).t().dot(&dy));
                        Self::acc(&mut grads, *b, row_sum(&dy));
                    }
                    if need(x) {
                        Self::acc(&mut grads, *x, dy.dot(&self.value(*w).t()));
                    }
                }
                Op::Add(a, b) => {
                    if need(a) {
                        Self::acc(&mut grads, *a, dy.clone());
                    }
                    if need(b) {
                        Self::acc(&mut grads, *b, dy);
                    }
                }
                Op::Silu(x) => {
                    let g = Zip::from(&dy).and(self.value(*x)).map_collect(|&d, &v| {
                        let sg = sigmoid(v);
                        d * (sg + v * sg * (T::one() - sg))
                    });
                    Self::acc(&mut grads, *x, g);
                }
                Op::Conv { x, w, b, k, stride, cols } => {
                    if need(w) {
                        Self::acc(&mut grads, *w, cols.t().dot(&dy));
                        Self::acc(&mut grads, *b, row_sum(&dy));
                    }
                    if need(x) {
                        let dcols = dy.dot(&self.value(*w).t());
                        let (n, c) = self.value(*x).dim();
                        Self::acc(&mut grads, *x, col2im(dcols.view(), n, c, *k, *stride));
                    }
                }
                Op::GroupNorm { x, groups, rstd } => {
                    let xhat = node.value.as_ref().expect("owned");
                    let (n, c) = xhat.dim();
                    let gs = c / groups;
                    let m = T::lit((n * gs) as f64);
                    let mut dx = Array2::zeros((n, c));
                    for g in 0..*groups {
                        let cols = s![.., g * gs..(g + 1) * gs];
                        let dyg = dy.slice(cols);
                        let xg = xhat.slice(cols);
                        let sum_dy: T = dyg.iter().copied().sum();
                        let sum_dyx: T = Zip::from(&dyg).and(&xg).fold(T::zero(), |acc, &d, &v| acc + d * v);
                        let r = rstd[g] / m;
                        Zip::from(dx.slice_mut(cols))
                            .and(&dyg)
                            .and(&xg)
                            .for_each(|o, &d, &v| *o = r * (m * d - sum_dy - v * sum_dyx));
                    }
                    Self::acc(&mut grads, *x, dx);
                }
                Op::ScaleShift { x, scale, shift } => {
                    if need(x) {
                        let one_plus = self.value(*scale).mapv(|s| T::one() + s);
                        Self::acc(&mut grads, *x, &dy * &one_plus);
                    }
                    if need(scale) {
                        Self::acc(&mut grads, *scale, row_sum(&(&dy * self.value(*x))));
                    }
                    if need(shift) {
                        Self::acc(&mut grads, *shift, row_sum(&dy));
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    if need(a) {
                        Self::acc(&mut grads, *a, dy.slice(s![.., ..ca]).to_owned());
                    }
                    if need(b) {
                        Self::acc(&mut grads, *b, dy.slice(s![.., ca..]).to_owned());
                    }
                }
                Op::SliceCols { x, start } => {
                    let mut g = Array2::zeros(self.value(*x).dim());
                    g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    Self::acc(&mut grads, *x, g);
                }
                Op::SliceRows { x, start } => {
                    let mut g = Array2::zeros(self.value(*x).dim());
                    g.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(&dy);
                    Self::acc(&mut grads, *x, g);
                }
                Op::PadRows { x } => {
                    let n = self.value(*x).nrows();
                    Self::acc(&mut grads, *x, dy.slice(s![..n, ..]).to_owned());
                }
                Op::Upsample2(x) => {
                    let n = self.value(*x).nrows();
                    let g = Array2::from_shape_fn((n, dy.ncols()), |(i, j)| dy[[2 * i, j]] + dy[[2 * i + 1, j]]);
                    Self::acc(&mut grads, *x, g);
                }
            }
        }
        Gradients { nodes: grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        use rand::Rng;
        Array::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, (9, 3));
        let w = rand_mat(&mut rng, (5 * 3, 2));
        for stride in [1, 2] {
            let y = im2col(x.view(), 5, stride).dot(&w);
            for i in 0..y.nrows() {
                for o in 0..2 {
                    let mut acc = 0.0;
                    for kk in 0..5 {
                        let src = (i * stride + kk) as isize - 2;
                        if (0..9).contains(&src) {
                            for c in 0..3 {
                                acc += x[[src as usize, c]] * w[[kk * 3 + c, o]];
                            }
                        }
                    }
                    assert!((y[[i, o]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    /// Every op composed once; gradients checked against central differences.
    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", rand_mat(&mut rng, (5 * 4, 4)));
        let b = store.insert("b", rand_mat(&mut rng, (1, 4)));
        let wd = store.insert("wd", rand_mat(&mut rng, (3 * 4, 4)));
        let bd = store.insert("bd", rand_mat(&mut rng, (1, 4)));
        let lw = store.insert("lw", rand_mat(&mut rng, (3, 8)));
        let lb = store.insert("lb", rand_mat(&mut rng, (1, 8)));
        let x0 = rand_mat(&mut rng, (6, 4));
        let e0 = rand_mat(&mut rng, (1, 3));
        let probe = rand_mat(&mut rng, (8, 4));

        let run = |store: &ParamStore<f64>, x: &Array2<f64>, e: &Array2<f64>, grads: Option<&mut ParamStore<f64>>| {
            let mut tape = Tape::new(store, grads.is_some());
            let xv = tape.input(x.clone(), true);
            let ev = tape.input(e.clone(), true);
            let padded = tape.pad_rows(xv, 8);
            let h = tape.conv1d(padded, w, b, 5, 1);
            let h = tape.group_norm(h, 2);
            let emb = tape.silu(ev);
            let ss = tape.linear(emb, lw, lb);
            let sc = tape.slice_cols(ss, 0, 4);
            let sh = tape.slice_cols(ss, 4, 8);
            let h = tape.scale_shift(h, sc, sh);
            let h = tape.silu(h);
            let d = tape.conv1d(h, wd, bd, 3, 2);
            let u = tape.upsample2(d);
            let cat = tape.concat_cols(u, h);
            let left = tape.slice_cols(cat, 0, 4);
            let right = tape.slice_cols(cat, 4, 8);
            let sum = tape.add(left, right);
            let out = tape.slice_rows(sum, 0, 8);
            let loss = (tape.value(out) * &probe).sum();
            let g = tape.backward(out, probe.clone(), grads);
            (loss, g.wrt(xv).cloned(), g.wrt(ev).cloned())
        };

        let mut pg = store.zeros_like();
        let (_, gx, ge) = run(&store, &x0, &e0, Some(&mut pg));
        let gx = gx.unwrap();
        let ge = ge.unwrap();
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / (1e-6 + a.abs().max(b.abs()));
        for i in 0..6 {
            for j in 0..4 {
                let mut xp = x0.clone();
                xp[[i, j]] += h;
                let mut xm = x0.clone();
                xm[[i, j]] -= h;
                let fd = (run(&store, &xp, &e0, None).0 - run(&store, &xm, &e0, None).0) / (2.0 * h);
                assert!(rel(fd, gx[[i, j]]) < 1e-5, "x[{i},{j}] fd {fd} vs {}", gx[[i, j]]);
            }
        }
        for j in 0..3 {
            let mut ep = e0.clone();
            ep[[0, j]] += h;
            let mut em = e0.clone();
            em[[0, j]] -= h;
            let fd = (run(&store, &x0, &ep, None).0 - run(&store, &x0, &em, None).0) / (2.0 * h);
            assert!(rel(fd, ge[[0, j]]) < 1e-5);
        }
        for id in [w, b, wd, bd, lw, lb] {
            let shape = store.get(id).dim();
            for i in 0..shape.0.min(4) {
                for j in 0..shape.1 {
                    let mut sp = store.clone();
                    sp.get_mut(id)[[i, j]] += h;
                    let mut sm = store.clone();
                    sm.get_mut(id)[[i, j]] -= h;
                    let fd = (run(&sp, &x0, &e0, None).0 - run(&sm, &x0, &e0, None).0) / (2.0 * h);
                    let an = pg.get(id)[[i, j]];
                    assert!(rel(fd, an) < 1e-5, "{} [{i},{j}] fd {fd} vs {an}", store.name(id));
                }
            }
        }
    }
}
