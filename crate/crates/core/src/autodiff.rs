//! Reverse-mode gradients for the fixed set of primitives used by the block
//! and the toy classifier head.
//!
//! A [`Tape`] records each primitive as it executes together with its
//! output. [`Tape::backward`] walks the record in reverse, applying one
//! vector-Jacobian product per entry. [`finite_diff_grad`] and
//! [`grad_check`] provide an independent central-difference oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{init_params, BlockDims, NlRoiOutput, NlRoiParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::tensor::{
    concat_channels, conv1x1, conv3x3, dims2, dims4, flatten_rois, global_avg_pool, matmul, relu,
    rel_err, row_softmax, tap_range, tile_spatial, Real, Tensor,
};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Leaf,
    Conv1x1 { x: ValueId, w: ValueId, b: Option<ValueId> },
    Conv3x3 { x: ValueId, w: ValueId, b: Option<ValueId> },
    Relu { x: ValueId },
    Reshape { x: ValueId },
    Transpose { x: ValueId },
    Matmul { a: ValueId, b: ValueId },
    RowSoftmax { x: ValueId },
    AvgPool { x: ValueId },
    Tile { x: ValueId, h: usize, w: usize },
    Concat { a: ValueId, b: ValueId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1x1 { .. } => "conv1x1",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::Relu { .. } => "relu",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Matmul { .. } => "matmul",
            Op::RowSoftmax { .. } => "row_softmax",
            Op::AvgPool { .. } => "global_avg_pool",
            Op::Tile { .. } => "tile_spatial",
            Op::Concat { .. } => "concat_channels",
        }
    }
}

/// How the softmax vector-Jacobian product is applied. Anything other than
/// `Exact` exists to prove the gradient checker can catch a broken backward.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftmaxVjp {
    #[default]
    Exact,
    SignFlipped,
}

/// Ordered record of executed primitives and their outputs.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    ops: Vec<Op>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-value cotangents produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Adjoints<T> {
    grads: Vec<Option<Tensor<T>>>,
    visit_order: Vec<ValueId>,
}

impl<T: Real> Adjoints<T> {
    /// Gradient for `id`, or zeros shaped like the value if nothing reached it.
    pub fn get(&self, tape: &Tape<T>, id: ValueId) -> Tensor<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
    }

    /// Non-leaf entries in the order backward processed them.
    pub fn visit_order(&self) -> &[ValueId] {
        &self.visit_order
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Primitive names in execution order, leaves included.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.ops.iter().map(Op::name).collect()
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> ValueId {
        self.ops.push(op);
        self.values.push(value);
        ValueId(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.push(Op::Leaf, value)
    }

    pub fn conv1x1(&mut self, x: ValueId, w: ValueId, b: Option<ValueId>) -> Result<ValueId> {
        let op = Op::Conv1x1 { x, w, b };
        let out = self.eval(&op)?;
        Ok(self.push(op, out))
    }

    pub fn conv3x3(&mut self, x: ValueId, w: ValueId, b: Option<ValueId>) -> Result<ValueId> {
        let op = Op::Conv3x3 { x, w, b };
        let out = self.eval(&op)?;
        Ok(self.push(op, out))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = relu(self.value(x));
        self.push(Op::Relu { x }, out)
    }

    pub fn flatten_rois(&mut self, x: ValueId) -> Result<ValueId> {
        let out = flatten_rois(self.value(x))?;
        Ok(self.push(Op::Reshape { x }, out))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, out))
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let out = self.value(x).transpose()?;
        Ok(self.push(Op::Transpose { x }, out))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let op = Op::Matmul { a, b };
        let out = self.eval(&op)?;
        Ok(self.push(op, out))
    }

    pub fn row_softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let out = row_softmax(self.value(x))?;
        Ok(self.push(Op::RowSoftmax { x }, out))
    }

    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let out = global_avg_pool(self.value(x))?;
        Ok(self.push(Op::AvgPool { x }, out))
    }

    pub fn tile_spatial(&mut self, x: ValueId, h: usize, w: usize) -> Result<ValueId> {
        let out = tile_spatial(self.value(x), h, w)?;
        Ok(self.push(Op::Tile { x, h, w }, out))
    }

    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let op = Op::Concat { a, b };
        let out = self.eval(&op)?;
        Ok(self.push(op, out))
    }

    /// Recomputes one entry from the current values of its inputs.
    fn eval(&self, op: &Op) -> Result<Tensor<T>> {
        let v = |id: &ValueId| self.value(*id);
        match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Conv1x1 { x, w, b } => conv1x1(v(x), v(w), b.as_ref().map(v)),
            Op::Conv3x3 { x, w, b } => conv3x3(v(x), v(w), b.as_ref().map(v)),
            Op::Relu { x } => Ok(relu(v(x))),
            Op::Reshape { .. } => unreachable!("reshape target shape lives on the output"),
            Op::Transpose { x } => v(x).transpose(),
            Op::Matmul { a, b } => matmul(v(a), v(b)),
            Op::RowSoftmax { x } => row_softmax(v(x)),
            Op::AvgPool { x } => global_avg_pool(v(x)),
            Op::Tile { x, h, w } => tile_spatial(v(x), *h, *w),
            Op::Concat { a, b } => concat_channels(v(a), v(b)),
        }
    }

    /// Re-executes every recorded primitive from the leaf values and returns
    /// the value of every entry.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut replayed = Tape::new();
        for (op, recorded) in self.ops.iter().zip(&self.values) {
            let value = match op {
                Op::Leaf => recorded.clone(),
                Op::Reshape { x } => replayed.value(*x).reshape(recorded.shape())?,
                other => replayed.eval(other)?,
            };
            replayed.push(op.clone(), value);
        }
        Ok(replayed.values)
    }

    /// Reverse-mode sweep seeded with cotangents for some recorded values.
    pub fn backward(&self, seeds: &[(ValueId, Tensor<T>)]) -> Result<Adjoints<T>> {
        self.backward_with(seeds, SoftmaxVjp::Exact)
    }

    #[doc(hidden)]
    pub fn backward_with(&self, seeds: &[(ValueId, Tensor<T>)], softmax: SoftmaxVjp) -> Result<Adjoints<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        for (id, seed) in seeds {
            if seed.shape() != self.value(*id).shape() {
                return Err(Error::shape("backward", seed.shape(), self.value(*id).shape()));
            }
            accumulate(&mut grads, *id, seed.clone())?;
        }
        let mut visit_order = Vec::new();
        for idx in (0..self.ops.len()).rev() {
            let op = &self.ops[idx];
            if matches!(op, Op::Leaf) {
                continue;
            }
            visit_order.push(ValueId(idx));
            let Some(g) = grads[idx].take() else { continue };
            let v = |id: &ValueId| &self.values[id.0];
            match op {
                Op::Leaf => unreachable!(),
                Op::Conv1x1 { x, w, b } => {
                    let (dx, dw, db) = conv1x1_backward(v(x), v(w), &g)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Conv3x3 { x, w, b } => {
                    let (dx, dw, db) = conv3x3_backward(v(x), v(w), &g)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Relu { x } => {
                    let dx = v(x).zip_map(&g, |pre, gi| if pre > T::zero() { gi } else { T::zero() })?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Reshape { x } => {
                    let dx = g.reshape(v(x).shape())?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Transpose { x } => accumulate(&mut grads, *x, g.transpose()?)?,
                Op::Matmul { a, b } => {
                    let da = matmul(&g, &v(b).transpose()?)?;
                    let db = matmul(&v(a).transpose()?, &g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::RowSoftmax { x } => {
                    let mut dx = row_softmax_backward(&self.values[idx], &g)?;
                    if softmax == SoftmaxVjp::SignFlipped {
                        dx = dx.map(|v| -v);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::AvgPool { x } => accumulate(&mut grads, *x, avg_pool_backward(v(x).shape(), &g)?)?,
                Op::Tile { x, h, w } => accumulate(&mut grads, *x, tile_backward(&g, *h, *w)?)?,
                Op::Concat { a, b } => {
                    let c1 = v(a).shape()[1];
                    let c2 = v(b).shape()[1];
                    accumulate(&mut grads, *a, g.slice_channels(0, c1)?)?;
                    accumulate(&mut grads, *b, g.slice_channels(c1, c1 + c2)?)?;
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Adjoints { grads, visit_order })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: ValueId, g: Tensor<T>) -> Result<()> {
    let slot = &mut grads[id.0];
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

/// Gradients of `y = conv1x1(x, w, b)` given `dy`: returns `(dx, dw, db)`.
pub fn conv1x1_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, d_in, h, wd] = dims4("conv1x1_backward", x)?;
    let [d_out, _] = dims2("conv1x1_backward", w)?;
    if dy.shape() != [n, d_out, h, wd] {
        return Err(Error::shape("conv1x1_backward", dy.shape(), &[n, d_out, h, wd]));
    }
    let plane = h * wd;
    let (xs, ws, gs) = (x.data(), w.data(), dy.data());
    let mut dx = vec![T::zero(); xs.len()];
    let mut dw = vec![T::zero(); ws.len()];
    let mut db = vec![T::zero(); d_out];
    for roi in 0..n {
        for o in 0..d_out {
            let g = &gs[(roi * d_out + o) * plane..(roi * d_out + o + 1) * plane];
            db[o] += g.iter().copied().sum::<T>();
            for d in 0..d_in {
                let xi = (roi * d_in + d) * plane;
                let coef = ws[o * d_in + d];
                let mut acc = T::zero();
                for p in 0..plane {
                    acc += g[p] * xs[xi + p];
                    dx[xi + p] += coef * g[p];
                }
                dw[o * d_in + d] += acc;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(w.shape(), dw)?,
        Tensor::new([d_out], db)?,
    ))
}

/// Gradients of the padded, stride-1 `y = conv3x3(x, w, b)`: `(dx, dw, db)`.
pub fn conv3x3_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, d_in, h, wd] = dims4("conv3x3_backward", x)?;
    let d_out = w.shape()[0];
    if dy.shape() != [n, d_out, h, wd] {
        return Err(Error::shape("conv3x3_backward", dy.shape(), &[n, d_out, h, wd]));
    }
    let plane = h * wd;
    let (xs, ws, gs) = (x.data(), w.data(), dy.data());
    let mut dx = vec![T::zero(); xs.len()];
    let mut dw = vec![T::zero(); ws.len()];
    let mut db = vec![T::zero(); d_out];
    for roi in 0..n {
        for o in 0..d_out {
            let g = &gs[(roi * d_out + o) * plane..(roi * d_out + o + 1) * plane];
            db[o] += g.iter().copied().sum::<T>();
            for d in 0..d_in {
                let xi = (roi * d_in + d) * plane;
                let ki = (o * d_in + d) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let coef = ws[ki + ky * 3 + kx];
                        let (r0, r1) = tap_range(ky, h);
                        let (c0, c1) = tap_range(kx, wd);
                        let mut acc = T::zero();
                        for r in r0..r1 {
                            for c in c0..c1 {
                                let src = xi + (r + ky - 1) * wd + c + kx - 1;
                                let gv = g[r * wd + c];
                                acc += gv * xs[src];
                                dx[src] += coef * gv;
                            }
                        }
                        dw[ki + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(w.shape(), dw)?,
        Tensor::new([d_out], db)?,
    ))
}

/// Applies the per-row softmax Jacobian `diag(p) - p p^T` to `dp`.
pub fn row_softmax_backward<T: Real>(p: &Tensor<T>, dp: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, cols] = dims2("row_softmax_backward", p)?;
    if p.shape() != dp.shape() {
        return Err(Error::shape("row_softmax_backward", p.shape(), dp.shape()));
    }
    let mut out = Vec::with_capacity(p.len());
    for (prow, grow) in p.data().chunks_exact(cols).zip(dp.data().chunks_exact(cols)) {
        let dot: T = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
        out.extend(prow.iter().zip(grow).map(|(&pi, &gi)| pi * (gi - dot)));
    }
    Tensor::new(p.shape(), out)
}

fn avg_pool_backward<T: Real>(x_shape: &[usize], g: &Tensor<T>) -> Result<Tensor<T>> {
    let plane = x_shape[2] * x_shape[3];
    let count = T::from_usize(plane).expect("plane size fits in a float");
    let mut data = Vec::with_capacity(g.len() * plane);
    for &v in g.data() {
        data.extend(std::iter::repeat_n(v / count, plane));
    }
    Tensor::new(x_shape, data)
}

fn tile_backward<T: Real>(g: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c, _, _] = dims4("tile_backward", g)?;
    let data = g.data().chunks_exact(h * w).map(|p| p.iter().copied().sum()).collect();
    Tensor::new([n, c], data)
}

/// Tape handles of one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockParamIds {
    pub ids: [ValueId; 6],
}

impl BlockParamIds {
    pub fn record<T: Real>(tape: &mut Tape<T>, params: &NlRoiParams<T>) -> Self {
        Self {
            ids: params.tensors().map(|t| tape.leaf(t.clone())),
        }
    }
}

/// Tape handles of one block's outputs.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutputIds {
    pub augmented: ValueId,
    pub attention: ValueId,
    pub pooled_nl: ValueId,
}

/// Records the block's forward computation on `tape`. The primitive sequence
/// matches [`crate::block::nlroi_forward`], so the recorded values are
/// bit-identical to the untraced path.
pub fn record_block<T: Real>(
    tape: &mut Tape<T>,
    x: ValueId,
    params: &BlockParamIds,
) -> Result<BlockOutputIds> {
    let [w_phi, w_psi, g1_w, g1_b, g2_w, g2_b] = params.ids;
    let [n, d, h, w] = dims4("nlroi_forward", tape.value(x))?;
    let expected = tape.value(w_phi).shape()[1];
    if n == 0 {
        return Err(Error::invalid("nlroi_forward", "at least one RoI is required"));
    }
    if d != expected {
        return Err(Error::invalid(
            "nlroi_forward",
            format!("input has {d} channels but params expect D={expected}"),
        ));
    }
    let phi = tape.conv1x1(x, w_phi, None)?;
    let phi = tape.flatten_rois(phi)?;
    let psi = tape.conv1x1(x, w_psi, None)?;
    let psi = tape.flatten_rois(psi)?;
    let psi_t = tape.transpose(psi)?;
    let logits = tape.matmul(phi, psi_t)?;
    let attention = tape.row_softmax(logits)?;
    let reduced = tape.conv1x1(x, g1_w, Some(g1_b))?;
    let act = tape.relu(reduced);
    let maps = tape.conv3x3(act, g2_w, Some(g2_b))?;
    let pooled = tape.global_avg_pool(maps)?;
    let pooled_nl = tape.matmul(attention, pooled)?;
    let tiled = tape.tile_spatial(pooled_nl, h, w)?;
    let augmented = tape.concat_channels(x, tiled)?;
    Ok(BlockOutputIds {
        augmented,
        attention,
        pooled_nl,
    })
}

/// A block forward pass recorded for differentiation.
#[derive(Debug, Clone)]
pub struct BlockTrace<T> {
    tape: Tape<T>,
    input: ValueId,
    params: BlockParamIds,
    outputs: BlockOutputIds,
    dims: BlockDims,
}

impl<T: Real> BlockTrace<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn outputs(&self) -> BlockOutputIds {
        self.outputs
    }

    /// Replays the tape and returns the attention matrix it reproduces.
    pub fn replay_attention(&self) -> Result<Tensor<T>> {
        Ok(self.tape.replay()?.swap_remove(self.outputs.attention.0))
    }
}

/// Gradients of a scalar with respect to every block parameter and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub params: NlRoiParams<T>,
    pub input: Tensor<T>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        match name {
            "input" => Some(&self.input),
            _ => self.params.get(name),
        }
    }

    /// Parameter gradients followed by the input gradient.
    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        self.params.named().chain(std::iter::once(("input", &self.input)))
    }

    pub fn all_finite(&self) -> bool {
        self.named().all(|(_, t)| t.all_finite())
    }
}

pub fn forward_traced<T: Real>(
    x: &Tensor<T>,
    params: &NlRoiParams<T>,
) -> Result<(NlRoiOutput<T>, BlockTrace<T>)> {
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let param_ids = BlockParamIds::record(&mut tape, params);
    let outputs = record_block(&mut tape, input, &param_ids)?;
    let out = NlRoiOutput {
        augmented: tape.value(outputs.augmented).clone(),
        attention: tape.value(outputs.attention).clone(),
        pooled_nl: tape.value(outputs.pooled_nl).clone(),
    };
    let trace = BlockTrace {
        tape,
        input,
        params: param_ids,
        outputs,
        dims: params.dims(),
    };
    Ok((out, trace))
}

/// Gradients of `sum(d_out * augmented)`.
pub fn backward<T: Real>(trace: &BlockTrace<T>, d_out: &Tensor<T>) -> Result<Gradients<T>> {
    backward_with(trace, d_out, SoftmaxVjp::Exact)
}

#[doc(hidden)]
pub fn backward_with<T: Real>(
    trace: &BlockTrace<T>,
    d_out: &Tensor<T>,
    softmax: SoftmaxVjp,
) -> Result<Gradients<T>> {
    let adj = trace
        .tape
        .backward_with(&[(trace.outputs.augmented, d_out.clone())], softmax)?;
    let params = NlRoiParams::from_tensors(trace.dims, trace.params.ids.map(|id| adj.get(&trace.tape, id)))?;
    Ok(Gradients {
        params,
        input: adj.get(&trace.tape, trace.input),
    })
}

/// Central-difference gradient of `loss` at `(x, params)` for every
/// coordinate of every parameter and of the input.
pub fn finite_diff_grad<F>(loss: F, x: &Tensor<f64>, params: &NlRoiParams<f64>, eps: f64) -> Result<Gradients<f64>>
where
    F: Fn(&Tensor<f64>, &NlRoiParams<f64>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_diff_grad", format!("eps must be positive, got {eps}")));
    }
    let central = |t: &Tensor<f64>, eval: &dyn Fn(Tensor<f64>) -> Result<f64>| -> Result<Tensor<f64>> {
        let mut out = Vec::with_capacity(t.len());
        for k in 0..t.len() {
            let mut plus = t.clone().into_data();
            let mut minus = plus.clone();
            plus[k] += eps;
            minus[k] -= eps;
            let hi = eval(Tensor::new(t.shape(), plus)?)?;
            let lo = eval(Tensor::new(t.shape(), minus)?)?;
            out.push((hi - lo) / (2.0 * eps));
        }
        Tensor::new(t.shape(), out)
    };
    let mut grads = Vec::with_capacity(6);
    for name in PARAM_NAMES {
        let t = params.get(name).expect("canonical name");
        grads.push(central(t, &|p| loss(x, &params.with(name, p)?))?);
    }
    let input = central(x, &|xp| loss(&xp, params))?;
    let grads: [Tensor<f64>; 6] = grads.try_into().expect("six parameters");
    Ok(Gradients {
        params: NlRoiParams::from_tensors(params.dims(), grads)?,
        input,
    })
}

/// Shape of one gradient-check instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckDims {
    pub n: usize,
    pub d: usize,
    pub d_f: usize,
    pub d_g: usize,
    pub h: usize,
    pub w: usize,
}

impl CheckDims {
    pub fn new(n: usize, d: usize, d_f: usize, d_g: usize, h: usize, w: usize) -> Self {
        Self { n, d, d_f, d_g, h, w }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error per gradient, in [`Gradients::named`] order.
    pub max_rel_err: Vec<(&'static str, f64)>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Seeded binary64 instance for gradient checking: input uniform in
/// `(-1, 1)`, weights from [`init_params`], biases uniform in `(-0.5, 0.5)`.
pub fn check_instance(seed: u64, dims: CheckDims) -> Result<(Tensor<f64>, NlRoiParams<f64>)> {
    let block = BlockDims::new(dims.d, dims.d_f, dims.d_g)?;
    if dims.n == 0 || dims.h == 0 || dims.w == 0 {
        return Err(Error::invalid("grad_check", format!("degenerate dims {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let x = Tensor::uniform([dims.n, dims.d, dims.h, dims.w], -1.0, 1.0, &mut rng);
    let params = init_params::<f64>(block, seed)
        .with("g1_b", Tensor::uniform([dims.d_g], -0.5, 0.5, &mut rng))?
        .with("g2_b", Tensor::uniform([dims.d_g], -0.5, 0.5, &mut rng))?;
    Ok((x, params))
}

/// Compares [`backward`] against [`finite_diff_grad`] on the loss
/// `sum(augmented^2)` for a seeded instance. Per-coordinate error is
/// `|a - b| / max(1, |a|, |b|)`; the check passes iff every error is below `tol`.
pub fn grad_check(seed: u64, dims: CheckDims, eps: f64, tol: f64) -> Result<GradCheckReport> {
    grad_check_with(seed, dims, eps, tol, SoftmaxVjp::Exact)
}

#[doc(hidden)]
pub fn grad_check_with(seed: u64, dims: CheckDims, eps: f64, tol: f64, softmax: SoftmaxVjp) -> Result<GradCheckReport> {
    let (x, params) = check_instance(seed, dims)?;
    let (out, trace) = forward_traced(&x, &params)?;
    let analytic = backward_with(&trace, &out.augmented.scale(2.0), softmax)?;
    let numeric = finite_diff_grad(sum_of_squares_loss, &x, &params, eps)?;
    let max_rel_err: Vec<_> = analytic
        .named()
        .zip(numeric.named())
        .map(|((name, a), (_, b))| {
            let worst = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&u, &v)| rel_err(u, v))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect();
    let passed = max_rel_err.iter().all(|(_, e)| *e < tol);
    Ok(GradCheckReport {
        max_rel_err,
        tol,
        passed,
    })
}

/// `sum(augmented^2)`, the scalar used by [`grad_check`].
pub fn sum_of_squares_loss(x: &Tensor<f64>, params: &NlRoiParams<f64>) -> Result<f64> {
    let out = crate::block::nlroi_forward(x, params)?;
    Ok(out.augmented.data().iter().map(|v| v * v).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::nlroi_forward;

    fn instance(seed: u64, dims: CheckDims) -> (Tensor<f64>, NlRoiParams<f64>) {
        check_instance(seed, dims).unwrap()
    }

    #[test]
    fn traced_output_is_bit_identical() {
        for (seed, n) in [(1, 1), (2, 5)] {
            let (x, p) = instance(seed, CheckDims::new(n, 4, 2, 3, 3, 2));
            let (traced, trace) = forward_traced(&x, &p).unwrap();
            let plain = nlroi_forward(&x, &p).unwrap();
            assert!(traced.augmented.bit_eq(&plain.augmented));
            assert!(traced.attention.bit_eq(&plain.attention));
            assert!(trace.replay_attention().unwrap().bit_eq(&plain.attention));
        }
    }

    #[test]
    fn replay_reproduces_every_value() {
        let (x, p) = instance(3, CheckDims::new(3, 4, 2, 2, 2, 2));
        let (_, trace) = forward_traced(&x, &p).unwrap();
        let replayed = trace.tape().replay().unwrap();
        assert_eq!(replayed.len(), trace.tape().len());
        for (i, v) in replayed.iter().enumerate() {
            assert!(v.bit_eq(trace.tape().value(ValueId(i))));
        }
    }

    #[test]
    fn backward_visits_in_reverse_execution_order() {
        let (x, p) = instance(4, CheckDims::new(2, 2, 1, 1, 1, 1));
        let (out, trace) = forward_traced(&x, &p).unwrap();
        let adj = trace.tape().backward(&[(trace.outputs().augmented, out.augmented.clone())]).unwrap();
        let order: Vec<usize> = adj.visit_order().iter().map(|id| id.0).collect();
        let mut expected: Vec<usize> = trace
            .tape()
            .op_names()
            .iter()
            .enumerate()
            .filter(|(_, n)| **n != "leaf")
            .map(|(i, _)| i)
            .collect();
        expected.reverse();
        assert_eq!(order, expected);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let (x, p) = instance(5, CheckDims::new(3, 4, 2, 2, 2, 2));
        let (out, trace) = forward_traced(&x, &p).unwrap();
        let g = backward(&trace, &Tensor::zeros(out.augmented.shape())).unwrap();
        assert!(g.named().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identity_path_gradient_is_exact() {
        let dims = CheckDims::new(3, 4, 2, 2, 2, 3);
        let (x, p) = instance(6, dims);
        let (_, trace) = forward_traced(&x, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let upstream = Tensor::<f64>::uniform([3, 4, 2, 3], -1.0, 1.0, &mut rng);
        let d_out = concat_channels(&upstream, &Tensor::zeros([3, 2, 2, 3])).unwrap();
        let g = backward(&trace, &d_out).unwrap();
        assert_eq!(g.input.data(), upstream.data());
        for (name, t) in g.params.named() {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        // Cross-check against central differences of sum(d_out * augmented).
        let loss = |x: &Tensor<f64>, p: &NlRoiParams<f64>| -> Result<f64> {
            let out = nlroi_forward(x, p)?;
            Ok(out.augmented.data().iter().zip(d_out.data()).map(|(a, b)| a * b).sum())
        };
        let fd = finite_diff_grad(loss, &x, &p, 1e-5).unwrap();
        assert!(fd.input.max_rel_diff(&g.input).unwrap() < 1e-8);
    }

    #[test]
    fn softmax_jacobian_at_uniform_pair() {
        let p = Tensor::new([1, 2], vec![0.5, 0.5]).unwrap();
        let col0 = row_softmax_backward(&p, &Tensor::new([1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let col1 = row_softmax_backward(&p, &Tensor::new([1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(col0.data(), &[0.25, -0.25]);
        assert_eq!(col1.data(), &[-0.25, 0.25]);
    }

    #[test]
    fn relu_backward_masks_nonpositive_preactivations() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([4], vec![-1.0, 0.0, 1e-300, 2.0]).unwrap());
        let y = tape.relu(x);
        let adj = tape.backward(&[(y, Tensor::full([4], 3.0))]).unwrap();
        assert_eq!(adj.get(&tape, x).data(), &[0.0, 0.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_rejects_mismatched_seed() {
        let (x, p) = instance(7, CheckDims::new(2, 2, 1, 1, 2, 2));
        let (_, trace) = forward_traced(&x, &p).unwrap();
        assert!(backward(&trace, &Tensor::zeros([2, 2, 2, 2])).is_err());
    }

    #[test]
    fn identical_rois_have_stationary_embedding_gradient() {
        // With g's last layer zeroed the loss is sum(augmented) = sum(x), so
        // the embeddings cannot matter; identical RoIs also pin the softmax at
        // the uniform point.
        let (x1, p) = instance(8, CheckDims::new(1, 3, 2, 2, 2, 2));
        let x = Tensor::new([3, 3, 2, 2], x1.data().repeat(3)).unwrap();
        let p = p
            .with("g2_w", Tensor::zeros([2, 2, 3, 3]))
            .unwrap()
            .with("g2_b", Tensor::zeros([2]))
            .unwrap();
        let loss = |x: &Tensor<f64>, p: &NlRoiParams<f64>| Ok(nlroi_forward(x, p)?.augmented.sum());
        let fd = finite_diff_grad(loss, &x, &p, 1e-5).unwrap();
        assert!(fd.params.w_phi().data().iter().all(|v| v.abs() < 1e-9));
        assert!(fd.params.w_psi().data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn finite_differences_are_second_order() {
        let (x, p) = instance(11, CheckDims::new(3, 4, 2, 2, 2, 2));
        let (out, trace) = forward_traced(&x, &p).unwrap();
        let exact = backward(&trace, &out.augmented.scale(2.0)).unwrap();
        let err = |eps: f64| {
            let fd = finite_diff_grad(sum_of_squares_loss, &x, &p, eps).unwrap();
            fd.params.w_psi().max_rel_diff(exact.params.w_psi()).unwrap()
        };
        let coarse = err(4e-2);
        let fine = err(2e-2);
        let ratio = coarse / fine;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio} ({coarse} -> {fine})");
    }

    #[test]
    fn central_instance_matches() {
        let report = grad_check(7, CheckDims::new(3, 4, 2, 2, 2, 2), 1e-5, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.max_rel_err.len(), 7);
    }

    #[test]
    fn small_and_single_roi_instances_pass() {
        assert!(grad_check(1, CheckDims::new(2, 2, 1, 1, 1, 1), 1e-5, 1e-6).unwrap().passed);
        assert!(grad_check(2, CheckDims::new(1, 3, 2, 2, 2, 2), 1e-5, 1e-6).unwrap().passed);
    }

    #[test]
    fn flipped_softmax_jacobian_is_caught() {
        let report = grad_check_with(7, CheckDims::new(3, 4, 2, 2, 2, 2), 1e-5, 1e-6, SoftmaxVjp::SignFlipped).unwrap();
        assert!(!report.passed);
        assert!(report.worst() > 1e-2, "{report:?}");
    }

    #[test]
    fn gradients_are_deterministic() {
        let (x, p) = instance(12, CheckDims::new(4, 3, 2, 2, 3, 3));
        let run = || {
            let (out, trace) = forward_traced(&x, &p).unwrap();
            backward(&trace, &out.augmented).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.named().zip(b.named()).all(|((_, u), (_, v))| u.bit_eq(v)));
        assert!(a.all_finite());
    }
}
