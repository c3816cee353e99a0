use std::ops::Range;

use super::{argmax, Batch, InputShape, LayerSlice, Layout, ModelError, ModelKind, ModelSpec};

const CNN_CONV1_FILTERS: usize = 32;
const CNN_CONV2_FILTERS: usize = 64;
const CNN_KERNEL: usize = 5;
const CNN_FC_WIDTH: usize = 512;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    /// `out = W x + b`, W row-major `(out, inp)` at `offset`, then `b`.
    Dense { inp: usize, out: usize, offset: usize },
    /// Stride-1 convolution with zero "same" padding. Filters `(cout, cin, k, k)` then biases.
    Conv { cin: usize, cout: usize, h: usize, w: usize, k: usize, offset: usize },
    Relu,
    /// 2x2 max-pool, stride 2, over `(c, h, w)`.
    MaxPool { c: usize, h: usize, w: usize },
}

/// Parameter ranges of one weighted layer.
#[derive(Debug, Clone)]
pub(crate) struct WeightBlock {
    pub weights: Range<usize>,
    pub biases: Range<usize>,
    pub fan_in: usize,
    /// Index of the op owning these parameters.
    pub op: usize,
}

/// Activation pattern of the piecewise-linear parts of a forward pass:
/// per op, ReLU on/off flags or max-pool winner indices. Empty for other ops.
pub(crate) type Pattern = Vec<Vec<u32>>;

#[derive(Debug, Clone)]
pub(crate) struct Network {
    ops: Vec<Op>,
    layout: Layout,
    blocks: Vec<WeightBlock>,
    input_len: usize,
    num_classes: usize,
}

struct Builder {
    ops: Vec<Op>,
    slices: Vec<LayerSlice>,
    blocks: Vec<WeightBlock>,
    offset: usize,
}

impl Builder {
    fn weighted(&mut self, name: String, op: Op, weights: usize, biases: usize, fan_in: usize) {
        let start = self.offset;
        self.blocks.push(WeightBlock {
            weights: start..start + weights,
            biases: start + weights..start + weights + biases,
            fan_in,
            op: self.ops.len(),
        });
        self.slices.push(LayerSlice { name, start, len: weights + biases });
        self.offset += weights + biases;
        self.ops.push(op);
    }

    fn dense(&mut self, name: String, inp: usize, out: usize) {
        let offset = self.offset;
        self.weighted(name, Op::Dense { inp, out, offset }, inp * out, out, inp);
    }
}

impl Network {
    pub fn build(spec: &ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut b = Builder { ops: Vec::new(), slices: Vec::new(), blocks: Vec::new(), offset: 0 };
        let c = spec.num_classes;
        match (&spec.kind, spec.input) {
            (ModelKind::Logistic, input) => b.dense("fc1".into(), input.len(), c),
            (ModelKind::Mlp(hidden), input) => {
                let mut width = input.len();
                for (i, &h) in hidden.iter().enumerate() {
                    b.dense(format!("fc{}", i + 1), width, h);
                    b.ops.push(Op::Relu);
                    width = h;
                }
                b.dense(format!("fc{}", hidden.len() + 1), width, c);
            }
            (ModelKind::PaperCnn, InputShape::Image { channels, height, width }) => {
                let k = CNN_KERNEL;
                let (f1, f2) = (CNN_CONV1_FILTERS, CNN_CONV2_FILTERS);
                let off = b.offset;
                b.weighted(
                    "conv1".into(),
                    Op::Conv { cin: channels, cout: f1, h: height, w: width, k, offset: off },
                    f1 * channels * k * k,
                    f1,
                    channels * k * k,
                );
                b.ops.push(Op::Relu);
                b.ops.push(Op::MaxPool { c: f1, h: height, w: width });
                let (h2, w2) = (height / 2, width / 2);
                let off = b.offset;
                b.weighted(
                    "conv2".into(),
                    Op::Conv { cin: f1, cout: f2, h: h2, w: w2, k, offset: off },
                    f2 * f1 * k * k,
                    f2,
                    f1 * k * k,
                );
                b.ops.push(Op::Relu);
                b.ops.push(Op::MaxPool { c: f2, h: h2, w: w2 });
                let flat = f2 * (h2 / 2) * (w2 / 2);
                b.dense("fc1".into(), flat, CNN_FC_WIDTH);
                b.ops.push(Op::Relu);
                b.dense("fc2".into(), CNN_FC_WIDTH, c);
            }
            (ModelKind::PaperCnn, InputShape::Flat(_)) => unreachable!("rejected by validate"),
        }
        Ok(Self {
            ops: b.ops,
            layout: Layout::new(b.slices)?,
            blocks: b.blocks,
            input_len: spec.input.len(),
            num_classes: c,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn weight_blocks(&self) -> &[WeightBlock] {
        &self.blocks
    }

    /// Op index owning parameter coordinate `i`.
    pub fn op_of_param(&self, i: usize) -> usize {
        self.blocks
            .iter()
            .find(|b| i >= b.weights.start && i < b.biases.end)
            .map(|b| b.op)
            .expect("coordinate inside layout")
    }

    pub fn check(&self, params: &super::ParamVector, batch: &Batch) -> Result<(), ModelError> {
        if *params.layout() != self.layout {
            return Err(ModelError::Shape("parameter layout does not match the model".into()));
        }
        if batch.feature_len() != self.input_len {
            return Err(ModelError::Shape(format!(
                "batch samples have {} features, model expects {}",
                batch.feature_len(),
                self.input_len
            )));
        }
        if let Some(&bad) = batch.labels().iter().find(|&&y| y >= self.num_classes) {
            return Err(ModelError::Shape(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Runs ops `start..` on `input`, returning every intermediate activation
    /// (`acts[0] == input`), the pattern of the piecewise-linear ops and the
    /// im2col buffers of convolutions.
    fn forward_from(&self, params: &[f64], start: usize, input: &[f64]) -> Forward {
        let mut acts = Vec::with_capacity(self.ops.len() - start + 1);
        acts.push(input.to_vec());
        let mut pattern = vec![Vec::new(); self.ops.len()];
        let mut cols = vec![Vec::new(); self.ops.len()];
        for (i, op) in self.ops.iter().enumerate().skip(start) {
            let x = acts.last().expect("at least the input");
            let y = match *op {
                Op::Dense { inp, out, offset } => dense_forward(params, offset, inp, out, x),
                Op::Conv { cin, cout, h, w, k, offset } => {
                    let col = im2col(x, cin, h, w, k);
                    let y = conv_forward(params, offset, cin, cout, h * w, k, &col);
                    cols[i] = col;
                    y
                }
                Op::Relu => {
                    pattern[i] = x.iter().map(|&v| u32::from(v > 0.0)).collect();
                    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
                }
                Op::MaxPool { c, h, w } => {
                    let (y, winners) = maxpool_forward(x, c, h, w);
                    pattern[i] = winners;
                    y
                }
            };
            acts.push(y);
        }
        Forward { acts, pattern, cols, start }
    }

    pub fn loss_sum_and_correct(&self, params: &[f64], batch: &Batch) -> (f64, usize) {
        let mut total = 0.0;
        let mut correct = 0;
        for (i, &y) in batch.labels().iter().enumerate() {
            let fwd = self.forward_from(params, 0, batch.sample(i));
            let logits = fwd.acts.last().expect("logits");
            total += cross_entropy(logits, y).0;
            if argmax(logits) == y {
                correct += 1;
            }
        }
        (total, correct)
    }

    /// Mean loss and its gradient over the batch.
    pub fn loss_and_grad(&self, params: &[f64], batch: &Batch) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; params.len()];
        let mut total = 0.0;
        for (i, &y) in batch.labels().iter().enumerate() {
            let fwd = self.forward_from(params, 0, batch.sample(i));
            let (l, dlogits) = cross_entropy(fwd.acts.last().expect("logits"), y);
            total += l;
            self.backward(params, &fwd, dlogits, &mut grad);
        }
        let n = batch.len() as f64;
        for g in &mut grad {
            *g /= n;
        }
        (total / n, grad)
    }

    /// Per-sample activations at the input of every op plus the pattern, for
    /// gradient checking with partial re-evaluation.
    pub fn sample_trace(&self, params: &[f64], input: &[f64]) -> (Vec<Vec<f64>>, Pattern) {
        let fwd = self.forward_from(params, 0, input);
        (fwd.acts, fwd.pattern)
    }

    /// Loss of one sample evaluated from op `start` given that op's input.
    pub fn loss_from(&self, params: &[f64], start: usize, input: &[f64], label: usize) -> (f64, Pattern) {
        let fwd = self.forward_from(params, start, input);
        (cross_entropy(fwd.acts.last().expect("logits"), label).0, fwd.pattern)
    }

    fn backward(&self, params: &[f64], fwd: &Forward, mut delta: Vec<f64>, grad: &mut [f64]) {
        debug_assert_eq!(fwd.start, 0);
        for (i, op) in self.ops.iter().enumerate().rev() {
            let x = &fwd.acts[i];
            let need_input_grad = i > 0;
            delta = match *op {
                Op::Dense { inp, out, offset } => {
                    let (gw, rest) = grad[offset..].split_at_mut(inp * out);
                    for o in 0..out {
                        let d = delta[o];
                        if d == 0.0 {
                            continue;
                        }
                        for (g, &xv) in gw[o * inp..(o + 1) * inp].iter_mut().zip(x) {
                            *g += d * xv;
                        }
                        rest[o] += d;
                    }
                    if !need_input_grad {
                        break;
                    }
                    let w = &params[offset..offset + inp * out];
                    let mut dx = vec![0.0; inp];
                    for o in 0..out {
                        let d = delta[o];
                        if d == 0.0 {
                            continue;
                        }
                        for (dxv, &wv) in dx.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                            *dxv += d * wv;
                        }
                    }
                    dx
                }
                Op::Conv { cin, cout, h, w, k, offset } => {
                    let hw = h * w;
                    let ckk = cin * k * k;
                    let col = &fwd.cols[i];
                    let (gw, rest) = grad[offset..].split_at_mut(cout * ckk);
                    for o in 0..cout {
                        let drow = &delta[o * hw..(o + 1) * hw];
                        rest[o] += drow.iter().sum::<f64>();
                        for q in 0..ckk {
                            let crow = &col[q * hw..(q + 1) * hw];
                            gw[o * ckk + q] += dot(drow, crow);
                        }
                    }
                    if !need_input_grad {
                        break;
                    }
                    let wts = &params[offset..offset + cout * ckk];
                    let mut dcol = vec![0.0; ckk * hw];
                    for o in 0..cout {
                        let drow = &delta[o * hw..(o + 1) * hw];
                        for q in 0..ckk {
                            let wv = wts[o * ckk + q];
                            for (dc, &d) in dcol[q * hw..(q + 1) * hw].iter_mut().zip(drow) {
                                *dc += wv * d;
                            }
                        }
                    }
                    col2im(&dcol, cin, h, w, k)
                }
                Op::Relu => {
                    for (d, &xv) in delta.iter_mut().zip(x) {
                        if xv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    delta
                }
                Op::MaxPool { .. } => {
                    let mut dx = vec![0.0; x.len()];
                    for (&src, &d) in fwd.pattern[i].iter().zip(&delta) {
                        dx[src as usize] += d;
                    }
                    dx
                }
            };
        }
    }
}

struct Forward {
    acts: Vec<Vec<f64>>,
    pattern: Pattern,
    cols: Vec<Vec<f64>>,
    start: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dense_forward(params: &[f64], offset: usize, inp: usize, out: usize, x: &[f64]) -> Vec<f64> {
    let w = &params[offset..offset + inp * out];
    let b = &params[offset + inp * out..offset + inp * out + out];
    (0..out).map(|o| b[o] + dot(&w[o * inp..(o + 1) * inp], x)).collect()
}

/// Rows are `(c, ky, kx)`, columns are output pixels `(y, x)`.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![0.0; cin * k * k * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + xx] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut dx = vec![0.0; cin * hw];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &dcol[((c * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            dx[c * hw + sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward(params: &[f64], offset: usize, cin: usize, cout: usize, hw: usize, k: usize, col: &[f64]) -> Vec<f64> {
    let ckk = cin * k * k;
    let wts = &params[offset..offset + cout * ckk];
    let bias = &params[offset + cout * ckk..offset + cout * ckk + cout];
    let mut y = vec![0.0; cout * hw];
    for o in 0..cout {
        let yrow = &mut y[o * hw..(o + 1) * hw];
        yrow.fill(bias[o]);
        for q in 0..ckk {
            let wv = wts[o * ckk + q];
            for (yv, &cv) in yrow.iter_mut().zip(&col[q * hw..(q + 1) * hw]) {
                *yv += wv * cv;
            }
        }
    }
    y
}

/// Ties go to the first maximal element in row-major window order.
fn maxpool_forward(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut winners = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                y.push(x[best]);
                winners.push(best as u32);
            }
        }
    }
    (y, winners)
}

/// Fused softmax cross-entropy: `(loss, d loss / d logits)`.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = (max + sum.ln() - logits[label]).max(0.0);
    let mut d: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    d[label] -= 1.0;
    (loss, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_tie_routes_to_first() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let (y, win) = maxpool_forward(&x, 1, 2, 2);
        assert_eq!(y, vec![1.0]);
        assert_eq!(win, vec![0]);
        let x = [0.0, 2.0, 2.0, 1.0];
        assert_eq!(maxpool_forward(&x, 1, 2, 2).1, vec![1]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1 input channel 3x3, 1 filter 3x3 with "same" padding
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut params = vec![0.0; 10];
        for (i, p) in params.iter_mut().take(9).enumerate() {
            *p = (i as f64) * 0.1 - 0.4;
        }
        params[9] = 0.5;
        let col = im2col(&x, 1, 3, 3, 3);
        let y = conv_forward(&params, 0, 1, 1, 9, 3, &col);
        for oy in 0..3i32 {
            for ox in 0..3i32 {
                let mut expect = 0.5;
                for ky in 0..3i32 {
                    for kx in 0..3i32 {
                        let (sy, sx) = (oy + ky - 1, ox + kx - 1);
                        if (0..3).contains(&sy) && (0..3).contains(&sx) {
                            expect += params[(ky * 3 + kx) as usize] * x[(sy * 3 + sx) as usize];
                        }
                    }
                }
                assert!((y[(oy * 3 + ox) as usize] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let (l, d) = cross_entropy(&[1000.0, 0.0, -1000.0], 0);
        assert!(l.is_finite() && l < 1e-12);
        assert!(d.iter().all(|v| v.is_finite()));
        let (l, _) = cross_entropy(&[1000.0, 0.0], 1);
        assert!((l - 1000.0).abs() < 1e-9);
    }
}
