use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use super::data::Dataset;
use crate::util::rng_for;

/// Softmax cross-entropy of a relu MLP with a flat parameter vector.
///
/// Parameters are laid out layer by layer as a row-major (fan_in × fan_out)
/// weight block followed by the fan_out bias.
#[derive(Debug, Clone)]
pub struct Mlp {
    data: Arc<Dataset>,
    sizes: Vec<usize>,
    pub x0: Vec<f64>,
    batch: usize,
    shuffle_seed: u64,
}

impl Mlp {
    /// `hidden` are the hidden widths; input and output widths come from the data.
    pub fn sample(data: Arc<Dataset>, hidden: &[usize], batch: usize, shuffle_seed: u64, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![data.dim];
        sizes.extend_from_slice(hidden);
        sizes.push(data.classes);
        let mut x0 = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            x0.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
            x0.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Self { data, sizes, x0, batch, shuffle_seed }
    }

    pub fn dim(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Sample indices of the minibatch used at inner step `step`.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.data.len();
        if self.batch == 0 || self.batch >= n {
            return (0..n).collect();
        }
        let per_epoch = n / self.batch;
        let epoch = step / per_epoch;
        let k = step % per_epoch;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng_for(self.shuffle_seed, &[epoch as u64]));
        perm[k * self.batch..(k + 1) * self.batch].to_vec()
    }

    fn layers<'a>(&self, x: &'a [f64]) -> Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
        let mut off = 0;
        self.sizes
            .windows(2)
            .map(|w| {
                let wv = ArrayView2::from_shape((w[0], w[1]), &x[off..off + w[0] * w[1]]).expect("layout");
                off += w[0] * w[1];
                let bv = ArrayView1::from(&x[off..off + w[1]]);
                off += w[1];
                (wv, bv)
            })
            .collect()
    }

    fn inputs(&self, rows: &[usize]) -> Array2<f64> {
        let d = self.data.dim;
        let mut a = Array2::zeros((rows.len(), d));
        for (r, &i) in rows.iter().enumerate() {
            a.row_mut(r).assign(&ArrayView1::from(self.data.row(i)));
        }
        a
    }

    /// Mean cross-entropy over `rows`, and its gradient when requested.
    pub fn loss_grad_rows(&self, x: &[f64], rows: &[usize], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let layers = self.layers(x);
        let mut acts = vec![self.inputs(rows)];
        let mut pre = Vec::new();
        for (l, (w, b)) in layers.iter().enumerate() {
            let z = acts[l].dot(w) + b;
            if l + 1 < layers.len() {
                acts.push(z.mapv(|v| v.max(0.0)));
            }
            pre.push(z);
        }
        let logits = pre.last().expect("at least one layer");
        let n = rows.len() as f64;
        let mut loss = 0.0;
        let mut dz = Array2::zeros(logits.raw_dim());
        for (r, row) in logits.axis_iter(Axis(0)).enumerate() {
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let y = self.data.labels[rows[r]];
            loss += mx + sum.ln() - row[y];
            if want_grad {
                for (k, v) in row.iter().enumerate() {
                    dz[[r, k]] = ((v - mx).exp() / sum - if k == y { 1.0 } else { 0.0 }) / n;
                }
            }
        }
        loss /= n;
        if !want_grad {
            return (loss, None);
        }
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(layers.len());
        for l in (0..layers.len()).rev() {
            let dw = acts[l].t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            if l > 0 {
                let mut da = dz.dot(&layers[l].0.t());
                da.zip_mut_with(&pre[l - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
                dz = da;
            }
            grads.push((dw, db));
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(x.len());
        for (dw, db) in grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        (loss, Some(flat))
    }

    pub fn loss_grad(&self, x: &[f64], step: usize) -> (f64, Vec<f64>) {
        let rows = self.batch_indices(step);
        let (l, g) = self.loss_grad_rows(x, &rows, true);
        (l, g.expect("requested"))
    }

    /// Loss over the whole dataset.
    pub fn full_loss(&self, x: &[f64]) -> f64 {
        let n = self.data.len();
        let mut total = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + 1024).min(n);
            let rows: Vec<usize> = (start..end).collect();
            total += self.loss_grad_rows(x, &rows, false).0 * rows.len() as f64;
            start = end;
        }
        total / n as f64
    }
}
