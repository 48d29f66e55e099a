//! Coordinate-wise LSTM over a flat parameter vector.
//!
//! Every coordinate of the optimizee is one row of the batch; all rows share
//! the same weights. The forward pass can record a [`Tape`] of the cell,
//! projection and readout operations it performed, and [`backward`] walks that
//! tape in reverse. Feature construction never appears on the tape, so the
//! inputs are constants of the reverse pass.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub inputs: usize,
    pub projection: Option<usize>,
    pub hidden: usize,
    pub layers: usize,
    blocks: Vec<Block>,
    len: usize,
}

impl Layout {
    pub fn new(inputs: usize, projection: Option<usize>, hidden: usize, layers: usize) -> Self {
        let mut blocks = Vec::new();
        let mut off = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let b = Block { name, shape, offset: off };
            off += b.len();
            blocks.push(b);
        };
        let mut width = inputs;
        if let Some(p) = projection {
            push("proj.w".into(), vec![inputs, p]);
            push("proj.b".into(), vec![p]);
            width = p;
        }
        for l in 0..layers {
            push(format!("lstm{l}.wx"), vec![width, 4 * hidden]);
            push(format!("lstm{l}.wh"), vec![hidden, 4 * hidden]);
            push(format!("lstm{l}.b"), vec![4 * hidden]);
            width = hidden;
        }
        push("out.w".into(), vec![hidden]);
        push("out.b".into(), vec![1]);
        Self { inputs, projection, hidden, layers, blocks, len: off }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    fn first_layer_block(&self) -> usize {
        if self.projection.is_some() { 2 } else { 0 }
    }

    fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let b = &self.blocks[idx];
        b.offset..b.offset + b.len()
    }

    fn mat<'a>(&self, p: &'a [f64], idx: usize) -> ArrayView2<'a, f64> {
        let b = &self.blocks[idx];
        ArrayView2::from_shape((b.shape[0], b.shape[1]), &p[self.range(idx)]).expect("block shape")
    }

    fn vec<'a>(&self, p: &'a [f64], idx: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.range(idx)])
    }

    /// Uniform(±1/√fan_in) weights, zero biases except a forget-gate bias of 1.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.len];
        for b in &self.blocks {
            let r = b.offset..b.offset + b.len();
            if b.shape.len() == 2 {
                let bound = 1.0 / (b.shape[0] as f64).sqrt();
                p[r].iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            } else if b.name == "out.w" {
                let bound = 1.0 / (self.hidden as f64).sqrt();
                p[r].iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            } else if b.name.starts_with("lstm") {
                let h = self.hidden;
                p[b.offset + h..b.offset + 2 * h].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        p
    }
}

/// Per-layer recurrent state, one row per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Hidden {
    pub h: Vec<Array2<f64>>,
    pub c: Vec<Array2<f64>>,
}

impl Hidden {
    pub fn zeros(layout: &Layout, rows: usize) -> Self {
        let z = Array2::zeros((rows, layout.hidden));
        Self { h: vec![z.clone(); layout.layers], c: vec![z; layout.layers] }
    }
}

#[derive(Debug, Clone)]
pub struct CellCache {
    input: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    tanh_c: Array2<f64>,
}

#[derive(Debug, Clone)]
pub enum TapeEntry {
    Project { z: Array2<f64> },
    Cell { layer: usize, cache: Box<CellCache> },
    Readout { step: usize, h: Array2<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeOp {
    Project,
    Cell,
    Readout,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    entries: Vec<TapeEntry>,
}

impl Tape {
    pub fn ops(&self) -> Vec<TapeOp> {
        self.entries
            .iter()
            .map(|e| match e {
                TapeEntry::Project { .. } => TapeOp::Project,
                TapeEntry::Cell { .. } => TapeOp::Cell,
                TapeEntry::Readout { .. } => TapeOp::Readout,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One step for all rows of `z`; returns the scaled readout per row.
pub fn forward(
    layout: &Layout,
    params: &[f64],
    z: &Array2<f64>,
    hidden: &mut Hidden,
    scale: f64,
    mut tape: Option<(&mut Tape, usize)>,
) -> Array1<f64> {
    let h = layout.hidden;
    let mut a = match layout.projection {
        Some(_) => {
            if let Some((t, _)) = tape.as_mut() {
                t.entries.push(TapeEntry::Project { z: z.clone() });
            }
            z.dot(&layout.mat(params, 0)) + &layout.vec(params, 1)
        }
        None => z.clone(),
    };
    let base = layout.first_layer_block();
    for l in 0..layout.layers {
        let wx = layout.mat(params, base + 3 * l);
        let wh = layout.mat(params, base + 3 * l + 1);
        let b = layout.vec(params, base + 3 * l + 2);
        let gates = a.dot(&wx) + hidden.h[l].dot(&wh) + &b;
        let i = gates.slice(s![.., 0..h]).mapv(sigmoid);
        let f = gates.slice(s![.., h..2 * h]).mapv(sigmoid);
        let g = gates.slice(s![.., 2 * h..3 * h]).mapv(f64::tanh);
        let o = gates.slice(s![.., 3 * h..4 * h]).mapv(sigmoid);
        let c_new = &f * &hidden.c[l] + &i * &g;
        let tanh_c = c_new.mapv(f64::tanh);
        let h_new = &o * &tanh_c;
        let h_prev = std::mem::replace(&mut hidden.h[l], h_new.clone());
        let c_prev = std::mem::replace(&mut hidden.c[l], c_new);
        if let Some((t, _)) = tape.as_mut() {
            let cache = CellCache { input: a, h_prev, c_prev, i, f, g, o, tanh_c };
            t.entries.push(TapeEntry::Cell { layer: l, cache: Box::new(cache) });
        }
        a = h_new;
    }
    let out = layout.blocks.len() - 2;
    let bo = params[layout.blocks[out + 1].offset];
    let u = (a.dot(&layout.vec(params, out)) + bo) * scale;
    if let Some((t, step)) = tape {
        t.entries.push(TapeEntry::Readout { step, h: a });
    }
    u
}

fn add_into(dst: &mut [f64], src: impl IntoIterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradient of Σ_k ⟨du[k], u_k⟩ w.r.t. the parameters, where u_k is the
/// readout recorded with step index k. Recurrent state entering the tape is a
/// constant.
pub fn backward(layout: &Layout, params: &[f64], tape: &Tape, du: &[Array1<f64>], scale: f64) -> Vec<f64> {
    let mut grad = vec![0.0; layout.len];
    let hsz = layout.hidden;
    let base = layout.first_layer_block();
    let out = layout.blocks.len() - 2;
    let wo = layout.vec(params, out);
    let mut dh_next: Vec<Option<Array2<f64>>> = vec![None; layout.layers];
    let mut dc_next: Vec<Option<Array2<f64>>> = vec![None; layout.layers];
    let mut pending: Option<Array2<f64>> = None;
    for entry in tape.entries.iter().rev() {
        match entry {
            TapeEntry::Readout { step, h } => {
                let d = &du[*step] * scale;
                add_into(&mut grad[layout.range(out)], h.t().dot(&d));
                grad[layout.blocks[out + 1].offset] += d.sum();
                let col = d.insert_axis(Axis(1));
                pending = Some(col.dot(&wo.view().insert_axis(Axis(0))));
            }
            TapeEntry::Cell { layer, cache } => {
                let l = *layer;
                let c = cache.as_ref();
                let mut dh = pending.take().unwrap_or_else(|| Array2::zeros(c.o.raw_dim()));
                if let Some(x) = &dh_next[l] {
                    dh += x;
                }
                let mut dc = &dh * &c.o * &c.tanh_c.mapv(|t| 1.0 - t * t);
                if let Some(x) = &dc_next[l] {
                    dc += x;
                }
                let d_o = &dh * &c.tanh_c * &c.o.mapv(|v| v * (1.0 - v));
                let d_i = &dc * &c.g * &c.i.mapv(|v| v * (1.0 - v));
                let d_f = &dc * &c.c_prev * &c.f.mapv(|v| v * (1.0 - v));
                let d_g = &dc * &c.i * &c.g.mapv(|v| 1.0 - v * v);
                let dgates = concatenate![Axis(1), d_i, d_f, d_g, d_o];
                let wx_idx = base + 3 * l;
                add_into(&mut grad[layout.range(wx_idx)], c.input.t().dot(&dgates));
                add_into(&mut grad[layout.range(wx_idx + 1)], c.h_prev.t().dot(&dgates));
                add_into(&mut grad[layout.range(wx_idx + 2)], dgates.sum_axis(Axis(0)));
                let wx = layout.mat(params, wx_idx);
                let wh = layout.mat(params, wx_idx + 1);
                dh_next[l] = Some(dgates.dot(&wh.t()));
                dc_next[l] = Some(dc * &c.f);
                pending = if l == 0 && layout.projection.is_none() {
                    None
                } else {
                    Some(dgates.dot(&wx.t()))
                };
                debug_assert_eq!(dh_next[l].as_ref().map(|a| a.ncols()), Some(hsz));
            }
            TapeEntry::Project { z } => {
                let d = pending.take().expect("projection feeds the first cell");
                add_into(&mut grad[layout.range(0)], z.t().dot(&d));
                add_into(&mut grad[layout.range(1)], d.sum_axis(Axis(0)));
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn inputs(steps: usize, rows: usize, cols: usize) -> Vec<Array2<f64>> {
        (0..steps)
            .map(|k| Array2::from_shape_fn((rows, cols), |(r, c)| ((k * 7 + r * 3 + c) as f64 * 0.77).sin()))
            .collect()
    }

    fn objective(layout: &Layout, p: &[f64], zs: &[Array2<f64>], w: &[Array1<f64>]) -> f64 {
        let mut hid = Hidden::zeros(layout, zs[0].nrows());
        zs.iter().zip(w).map(|(z, w)| forward(layout, p, z, &mut hid, 0.1, None).dot(w)).sum()
    }

    fn check(layout: Layout) {
        let p = layout.init(&mut rng_for(5, &[]));
        let zs = inputs(4, 3, layout.inputs);
        let w: Vec<Array1<f64>> = (0..4).map(|k| Array1::from_shape_fn(3, |r| 1.0 + (k + r) as f64 * 0.3)).collect();
        let mut tape = Tape::default();
        let mut hid = Hidden::zeros(&layout, 3);
        for (k, z) in zs.iter().enumerate() {
            forward(&layout, &p, z, &mut hid, 0.1, Some((&mut tape, k)));
        }
        let g = backward(&layout, &p, &tape, &w, 0.1);
        for j in 0..layout.len() {
            let h = 1e-6;
            let mut a = p.clone();
            a[j] += h;
            let mut b = p.clone();
            b[j] -= h;
            let fd = (objective(&layout, &a, &zs, &w) - objective(&layout, &b, &zs, &w)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-7 + 1e-5 * fd.abs(), "param {j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        check(Layout::new(2, None, 3, 1));
        check(Layout::new(2, Some(4), 3, 2));
        check(Layout::new(1, None, 2, 2));
    }

    #[test]
    fn zero_parameters_give_zero_update() {
        let layout = Layout::new(3, Some(5), 4, 2);
        let p = vec![0.0; layout.len()];
        let mut hid = Hidden::zeros(&layout, 2);
        let z = Array2::from_elem((2, 3), 1.7);
        assert!(forward(&layout, &p, &z, &mut hid, 0.1, None).iter().all(|u| *u == 0.0));
    }

    #[test]
    fn tape_holds_only_network_ops() {
        let layout = Layout::new(2, Some(4), 3, 2);
        let p = layout.init(&mut rng_for(1, &[]));
        let mut tape = Tape::default();
        let mut hid = Hidden::zeros(&layout, 2);
        for k in 0..3 {
            forward(&layout, &p, &Array2::ones((2, 2)), &mut hid, 0.1, Some((&mut tape, k)));
        }
        let ops = tape.ops();
        assert_eq!(ops.len(), 3 * 4);
        assert_eq!(&ops[..4], &[TapeOp::Project, TapeOp::Cell, TapeOp::Cell, TapeOp::Readout]);
    }
}
