//! Reverse-mode differentiation over a small, fixed set of layer kinds.
//!
//! A [`Tape`] records every forward operation together with its output. The
//! backward sweep walks the record in reverse, accumulating adjoints into the
//! inputs of each operation. Leaves may be tagged with a [`ParamId`] so that
//! their gradients can be collected into a [`GradMap`].

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, GradMap, ParamId, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    /// `y = x W^T + b` with `x: (batch, in)` and `W: (out, in)` or `(out, in, 1, 1)`.
    Affine,
    /// Stride 1, zero padding that preserves the spatial size. Kernels must
    /// have odd extents.
    Conv2d,
    Relu,
    /// Non-overlapping average pooling with a square window.
    AvgPool { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Node {
    Leaf,
    Affine {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu {
        input: Var,
    },
    AvgPool {
        input: Var,
        window: usize,
    },
    Reshape {
        input: Var,
    },
}

#[derive(Debug, Clone)]
struct Entry<T> {
    node: Node,
    value: DenseArray<T>,
    param: Option<ParamId>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    entries: Vec<Entry<T>>,
}

#[cfg(test)]
thread_local! {
    /// Mutation hook for gradient-check tests: scales the relu backward rule.
    pub(crate) static CORRUPT_RELU_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

fn shape_err(layer: &str, expected: Vec<usize>, actual: &[usize]) -> Error {
    Error::Shape {
        layer: layer.to_owned(),
        expected,
        actual: actual.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, node: Node, value: DenseArray<T>, param: Option<ParamId>) -> Var {
        self.entries.push(Entry { node, value, param });
        Var(self.entries.len() - 1)
    }

    /// Constant or externally differentiated input.
    pub fn leaf(&mut self, value: DenseArray<T>) -> Var {
        self.push(Node::Leaf, value, None)
    }

    /// Leaf whose gradient is reported under `id` by [`TapeGrads::param_grads`].
    pub fn param(&mut self, id: ParamId, value: DenseArray<T>) -> Var {
        self.push(Node::Leaf, value, Some(id))
    }

    pub fn value(&self, var: Var) -> &DenseArray<T> {
        &self.entries[var.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Collapses all trailing dimensions: `(batch, ...) -> (batch, rest)`.
    pub fn flatten(&mut self, input: Var) -> Var {
        let value = self.value(input).clone();
        let batch = value.shape()[0];
        let rest = value.len() / batch;
        let value = value
            .reshape(&[batch, rest])
            .expect("flatten keeps the element count");
        self.push(Node::Reshape { input }, value, None)
    }

    /// Applies one layer and records it for the backward sweep. `name`
    /// identifies the layer in shape errors.
    pub fn layer_forward(
        &mut self,
        name: &str,
        kind: OpKind,
        input: Var,
        weights: Option<Var>,
        bias: Option<Var>,
    ) -> Result<Var> {
        match kind {
            OpKind::Affine => {
                let weight = weights.ok_or_else(|| Error::Member(format!("{name}: affine needs weights")))?;
                let value = affine_forward(
                    name,
                    self.value(input),
                    self.value(weight),
                    bias.map(|b| self.value(b)),
                )?;
                Ok(self.push(Node::Affine { input, weight, bias }, value, None))
            }
            OpKind::Conv2d => {
                let weight = weights.ok_or_else(|| Error::Member(format!("{name}: conv2d needs weights")))?;
                let value = conv2d_forward(
                    name,
                    self.value(input),
                    self.value(weight),
                    bias.map(|b| self.value(b)),
                )?;
                Ok(self.push(Node::Conv2d { input, weight, bias }, value, None))
            }
            OpKind::Relu => {
                let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
                Ok(self.push(Node::Relu { input }, value, None))
            }
            OpKind::AvgPool { window } => {
                let value = avgpool_forward(name, self.value(input), window)?;
                Ok(self.push(Node::AvgPool { input, window }, value, None))
            }
        }
    }

    /// Reverse sweep seeded with `d loss / d var` for each given output.
    pub fn backward(&self, seeds: Vec<(Var, DenseArray<T>)>) -> Result<TapeGrads<T>> {
        let mut grads: Vec<Option<DenseArray<T>>> = vec![None; self.entries.len()];
        for (var, seed) in seeds {
            if seed.shape() != self.value(var).shape() {
                return Err(shape_err("backward seed", self.value(var).shape().to_vec(), seed.shape()));
            }
            accumulate(&mut grads, var, seed)?;
        }

        for idx in (0..self.entries.len()).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            match &self.entries[idx].node {
                Node::Leaf => {}
                Node::Affine { input, weight, bias } => {
                    let (dx, dw, db) =
                        affine_backward(self.value(*input), self.value(*weight), &upstream);
                    accumulate(&mut grads, *input, dx)?;
                    accumulate(&mut grads, *weight, dw)?;
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, db.reshape(self.value(*b).shape())?)?;
                    }
                }
                Node::Conv2d { input, weight, bias } => {
                    let (dx, dw, db) =
                        conv2d_backward(self.value(*input), self.value(*weight), &upstream);
                    accumulate(&mut grads, *input, dx)?;
                    accumulate(&mut grads, *weight, dw)?;
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, db.reshape(self.value(*b).shape())?)?;
                    }
                }
                Node::Relu { input } => {
                    let x = self.value(*input);
                    #[allow(unused_mut)]
                    let mut pass = T::one();
                    #[cfg(test)]
                    if CORRUPT_RELU_BACKWARD.with(|c| c.get()) {
                        pass = T::lit(1.5);
                    }
                    let dx = DenseArray::from_fn(x.shape(), |i| {
                        if x.values()[i] > T::zero() {
                            upstream.values()[i] * pass
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *input, dx)?;
                }
                Node::AvgPool { input, window } => {
                    let dx = avgpool_backward(self.value(*input).shape(), &upstream, *window);
                    accumulate(&mut grads, *input, dx)?;
                }
                Node::Reshape { input } => {
                    let dx = upstream.clone().reshape(self.value(*input).shape())?;
                    accumulate(&mut grads, *input, dx)?;
                }
            }
            // Leaves keep their gradients for the caller.
            if matches!(self.entries[idx].node, Node::Leaf) {
                grads[idx] = Some(upstream);
            }
        }

        let params = self
            .entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.param.map(|p| (p, i)))
            .collect();
        Ok(TapeGrads { grads, params })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<DenseArray<T>>], var: Var, grad: DenseArray<T>) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => {
            *slot = Some(grad);
            Ok(())
        }
    }
}

/// Gradients produced by [`Tape::backward`]; only leaves retain entries.
#[derive(Debug, Clone)]
pub struct TapeGrads<T> {
    grads: Vec<Option<DenseArray<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> TapeGrads<T> {
    pub fn get(&self, var: Var) -> Option<&DenseArray<T>> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<DenseArray<T>> {
        self.grads[var.0].take()
    }

    /// Gradients of all parameter-tagged leaves that were reached.
    pub fn param_grads(&self) -> Result<GradMap<T>> {
        let mut map = GradMap::new();
        for &(id, idx) in &self.params {
            if let Some(g) = &self.grads[idx] {
                map.accumulate(id, g.clone())?;
            }
        }
        Ok(map)
    }
}

fn affine_dims<T: Scalar>(name: &str, x: &DenseArray<T>, w: &DenseArray<T>) -> Result<(usize, usize, usize)> {
    let ws = w.shape();
    let (out, inp) = match ws {
        [o, i] => (*o, *i),
        [o, i, 1, 1] => (*o, *i),
        _ => return Err(shape_err(name, vec![ws[0], x.shape().get(1).copied().unwrap_or(0)], ws)),
    };
    let xs = x.shape();
    if xs.len() != 2 || xs[1] != inp {
        return Err(shape_err(name, vec![xs[0], inp], xs));
    }
    Ok((xs[0], inp, out))
}

fn affine_forward<T: Scalar>(
    name: &str,
    x: &DenseArray<T>,
    w: &DenseArray<T>,
    b: Option<&DenseArray<T>>,
) -> Result<DenseArray<T>> {
    let (batch, inp, out) = affine_dims(name, x, w)?;
    if let Some(b) = b {
        if b.len() != out {
            return Err(shape_err(name, vec![out], b.shape()));
        }
    }
    let xv = x.values();
    let wv = w.values();
    let mut y = vec![T::zero(); batch * out];
    for r in 0..batch {
        let xr = &xv[r * inp..(r + 1) * inp];
        for o in 0..out {
            let wr = &wv[o * inp..(o + 1) * inp];
            let mut s = b.map_or(T::zero(), |b| b.values()[o]);
            for (&a, &c) in xr.iter().zip(wr) {
                s += a * c;
            }
            y[r * out + o] = s;
        }
    }
    DenseArray::new(vec![batch, out], y)
}

fn affine_backward<T: Scalar>(
    x: &DenseArray<T>,
    w: &DenseArray<T>,
    dy: &DenseArray<T>,
) -> (DenseArray<T>, DenseArray<T>, DenseArray<T>) {
    let batch = x.shape()[0];
    let inp = x.shape()[1];
    let out = dy.shape()[1];
    let (xv, wv, dyv) = (x.values(), w.values(), dy.values());
    let mut dx = vec![T::zero(); batch * inp];
    let mut dw = vec![T::zero(); out * inp];
    let mut db = vec![T::zero(); out];
    for r in 0..batch {
        let xr = &xv[r * inp..(r + 1) * inp];
        let dxr = &mut dx[r * inp..(r + 1) * inp];
        for o in 0..out {
            let g = dyv[r * out + o];
            if g == T::zero() {
                continue;
            }
            db[o] += g;
            let wr = &wv[o * inp..(o + 1) * inp];
            let dwr = &mut dw[o * inp..(o + 1) * inp];
            for i in 0..inp {
                dxr[i] += g * wr[i];
                dwr[i] += g * xr[i];
            }
        }
    }
    (
        DenseArray::new(x.shape().to_vec(), dx).expect("dx shape"),
        DenseArray::new(w.shape().to_vec(), dw).expect("dw shape"),
        DenseArray::new(vec![out], db).expect("db shape"),
    )
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

fn conv_dims<T: Scalar>(name: &str, x: &DenseArray<T>, w: &DenseArray<T>) -> Result<ConvDims> {
    let ws = w.shape();
    let xs = x.shape();
    if ws.len() != 4 {
        return Err(shape_err(name, vec![0, 0, 0, 0], ws));
    }
    if xs.len() != 4 || xs[1] != ws[1] {
        return Err(shape_err(name, vec![xs[0], ws[1], 0, 0], xs));
    }
    if ws[2].is_multiple_of(2) || ws[3].is_multiple_of(2) {
        return Err(Error::Member(format!(
            "{name}: same-padding convolution needs odd kernel extents, got {}x{}",
            ws[2], ws[3]
        )));
    }
    Ok(ConvDims {
        batch: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
    })
}

/// Range of output positions `o` such that `o + k - pad` stays inside `0..len`.
#[inline]
fn valid_range(k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

fn conv2d_forward<T: Scalar>(
    name: &str,
    x: &DenseArray<T>,
    w: &DenseArray<T>,
    b: Option<&DenseArray<T>>,
) -> Result<DenseArray<T>> {
    let d = conv_dims(name, x, w)?;
    if let Some(b) = b {
        if b.len() != d.cout {
            return Err(shape_err(name, vec![d.cout], b.shape()));
        }
    }
    let (ph, pw) = (d.kh / 2, d.kw / 2);
    let plane = d.h * d.w;
    let (xv, wv) = (x.values(), w.values());
    let mut y = vec![T::zero(); d.batch * d.cout * plane];
    for n in 0..d.batch {
        for o in 0..d.cout {
            let out = &mut y[(n * d.cout + o) * plane..(n * d.cout + o + 1) * plane];
            if let Some(b) = b {
                out.fill(b.values()[o]);
            }
            for c in 0..d.cin {
                let xin = &xv[(n * d.cin + c) * plane..(n * d.cin + c + 1) * plane];
                for p in 0..d.kh {
                    let (h0, h1) = valid_range(p, ph, d.h);
                    for q in 0..d.kw {
                        let wval = wv[((o * d.cin + c) * d.kh + p) * d.kw + q];
                        let (w0, w1) = valid_range(q, pw, d.w);
                        for hh in h0..h1 {
                            let src = (hh + p - ph) * d.w;
                            for ww in w0..w1 {
                                out[hh * d.w + ww] += wval * xin[src + ww + q - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    DenseArray::new(vec![d.batch, d.cout, d.h, d.w], y)
}

fn conv2d_backward<T: Scalar>(
    x: &DenseArray<T>,
    w: &DenseArray<T>,
    dy: &DenseArray<T>,
) -> (DenseArray<T>, DenseArray<T>, DenseArray<T>) {
    let d = conv_dims("conv2d backward", x, w).expect("shapes validated in forward");
    let (ph, pw) = (d.kh / 2, d.kw / 2);
    let plane = d.h * d.w;
    let (xv, wv, dyv) = (x.values(), w.values(), dy.values());
    let mut dx = vec![T::zero(); xv.len()];
    let mut dw = vec![T::zero(); wv.len()];
    let mut db = vec![T::zero(); d.cout];
    for n in 0..d.batch {
        for o in 0..d.cout {
            let g = &dyv[(n * d.cout + o) * plane..(n * d.cout + o + 1) * plane];
            db[o] += g.iter().copied().sum::<T>();
            for c in 0..d.cin {
                let base = (n * d.cin + c) * plane;
                for p in 0..d.kh {
                    let (h0, h1) = valid_range(p, ph, d.h);
                    for q in 0..d.kw {
                        let widx = ((o * d.cin + c) * d.kh + p) * d.kw + q;
                        let wval = wv[widx];
                        let (w0, w1) = valid_range(q, pw, d.w);
                        let mut acc = T::zero();
                        for hh in h0..h1 {
                            let src = base + (hh + p - ph) * d.w;
                            for ww in w0..w1 {
                                let gy = g[hh * d.w + ww];
                                let xi = src + ww + q - pw;
                                acc += gy * xv[xi];
                                dx[xi] += wval * gy;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        DenseArray::new(x.shape().to_vec(), dx).expect("dx shape"),
        DenseArray::new(w.shape().to_vec(), dw).expect("dw shape"),
        DenseArray::new(vec![d.cout], db).expect("db shape"),
    )
}

fn avgpool_forward<T: Scalar>(name: &str, x: &DenseArray<T>, k: usize) -> Result<DenseArray<T>> {
    let xs = x.shape();
    if xs.len() != 4 || k == 0 || !xs[2].is_multiple_of(k) || !xs[3].is_multiple_of(k) {
        return Err(shape_err(
            name,
            vec![xs[0], xs.get(1).copied().unwrap_or(0), k, k],
            xs,
        ));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::lit((k * k) as f64);
    let xv = x.values();
    let mut y = vec![T::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = T::zero();
                for p in 0..k {
                    for q in 0..k {
                        s += xv[nc * h * w + (i * k + p) * w + j * k + q];
                    }
                }
                y[(nc * oh + i) * ow + j] = s * scale;
            }
        }
    }
    DenseArray::new(vec![n, c, oh, ow], y)
}

fn avgpool_backward<T: Scalar>(in_shape: &[usize], dy: &DenseArray<T>, k: usize) -> DenseArray<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::lit((k * k) as f64);
    let dyv = dy.values();
    DenseArray::from_fn(in_shape, |idx| {
        let nc = idx / (h * w);
        let r = idx % (h * w);
        let (hh, ww) = (r / w, r % w);
        dyv[(nc * oh + hh / k) * ow + ww / k] * scale
    })
    .reshape(&[n, c, h, w])
    .expect("pool gradient shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> DenseArray<f64> {
        DenseArray::from_f64(shape, v).unwrap()
    }

    #[test]
    fn affine_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(arr(&[2], &[0.0, 0.0]));
        let y = tape.layer_forward("fc", OpKind::Affine, x, Some(w), Some(b)).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr(&[1, 3], &[-1.0, 0.0, 3.0]));
        let y = tape.layer_forward("act", OpKind::Relu, x, None, None).unwrap();
        assert_eq!(tape.value(y).values(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn conv_scalar_kernel_scales() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(arr(&[1, 1, 1, 1], &[2.0]));
        let y = tape.layer_forward("conv", OpKind::Conv2d, x, Some(w), None).unwrap();
        assert_eq!(tape.value(y).values(), &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv_same_padding_3x3_matches_direct_sum() {
        // 3x3 all-ones kernel sums each cell's in-bounds neighbourhood.
        let mut tape = Tape::new();
        let x = tape.leaf(arr(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = tape.leaf(DenseArray::filled(&[1, 1, 3, 3], 1.0));
        let y = tape.layer_forward("conv", OpKind::Conv2d, x, Some(w), None).unwrap();
        assert_eq!(
            tape.value(y).values(),
            &[12., 21., 16., 27., 45., 33., 24., 39., 28.]
        );
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(arr(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = tape.leaf(DenseArray::zeros(&[2, 2]));
        let err = tape
            .layer_forward("layer7", OpKind::Affine, x, Some(w), None)
            .unwrap_err();
        match err {
            Error::Shape { layer, expected, actual } => {
                assert_eq!(layer, "layer7");
                assert_eq!(expected, vec![1, 2]);
                assert_eq!(actual, vec![1, 3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn avgpool_averages_windows() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 6.0]));
        let y = tape
            .layer_forward("pool", OpKind::AvgPool { window: 2 }, x, None, None)
            .unwrap();
        assert_eq!(tape.value(y).values(), &[3.0]);
        let g = tape.backward(vec![(y, arr(&[1, 1, 1, 1], &[4.0]))]).unwrap();
        assert_eq!(g.get(x).unwrap().values(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
