//! Per-coordinate optimization features and their lagged history.
//!
//! Every step the tracker receives the gradient vector and updates, for each
//! coordinate, the normalized momentum `mhat = m/sqrt(v)`, the normalized
//! gradient `ghat = g/sqrt(v)` and the parametric `nhat`, whose moment
//! inputs are power mixtures of the gradient. The last `horizon` values of
//! each stream are kept so that an expression over lagged inputs can be
//! evaluated column-wise over all coordinates. Lags that precede the first
//! step read as zero.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::expr::{pow_s, ColumnSource, VarRef};

pub const STREAM_G: &str = "g";
pub const STREAM_MHAT: &str = "mhat";
pub const STREAM_GHAT: &str = "ghat";
pub const STREAM_NHAT: &str = "nhat";
/// Step index (0 at the first gradient), identical on every coordinate.
pub const STREAM_T: &str = "t";

pub const ALL_STREAMS: [&str; 5] = [STREAM_G, STREAM_MHAT, STREAM_GHAT, STREAM_NHAT, STREAM_T];

/// Number of trainable parameters inside `nhat`.
pub const N_FEATURE_PARAMS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureParams {
    pub k1: f64,
    pub k2: f64,
    pub l1: f64,
    pub l2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            k1: 0.5,
            k2: 0.5,
            l1: 0.5,
            l2: 0.5,
            alpha1: 0.5,
            alpha2: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl FeatureParams {
    /// (k1, k2, l1, l2, alpha1, alpha2), the trainable part.
    pub fn trainable(&self) -> [f64; N_FEATURE_PARAMS] {
        [self.k1, self.k2, self.l1, self.l2, self.alpha1, self.alpha2]
    }

    pub fn with_trainable(&self, p: &[f64]) -> Self {
        Self {
            k1: p[0],
            k2: p[1],
            l1: p[2],
            l2: p[3],
            alpha1: p[4],
            alpha2: p[5],
            ..*self
        }
    }

    /// First-moment input k1·g^(1+α1) + k2·g^(1−α1) with its partials.
    fn first_input(&self, g: f64) -> (f64, [f64; N_FEATURE_PARAMS]) {
        let a = pow_s(g, 1.0 + self.alpha1);
        let b = pow_s(g, 1.0 - self.alpha1);
        let ln = if g == 0.0 { 0.0 } else { g.abs().ln() };
        let value = self.k1 * a + self.k2 * b;
        (value, [a, b, 0.0, 0.0, (self.k1 * a - self.k2 * b) * ln, 0.0])
    }

    /// Second-moment input max(0, l1·|g|^(2+α2) + l2·|g|^(2−α2)) with partials.
    fn second_input(&self, g: f64) -> (f64, [f64; N_FEATURE_PARAMS]) {
        let mag = g.abs();
        if mag == 0.0 {
            return (0.0, [0.0; N_FEATURE_PARAMS]);
        }
        let a = mag.powf(2.0 + self.alpha2);
        let b = mag.powf(2.0 - self.alpha2);
        let value = self.l1 * a + self.l2 * b;
        if value <= 0.0 {
            return (0.0, [0.0; N_FEATURE_PARAMS]);
        }
        let ln = mag.ln();
        (value, [0.0, 0.0, a, b, 0.0, (self.l1 * a - self.l2 * b) * ln])
    }
}

/// Running moments and lagged feature history for a vector of coordinates.
#[derive(Debug, Clone)]
pub struct FeatureTracker {
    params: FeatureParams,
    horizon: usize,
    dim: usize,
    t: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    n1: Vec<f64>,
    n2: Vec<f64>,
    // Streams in ALL_STREAMS order; each deque holds `horizon` columns, newest first.
    history: Vec<VecDeque<Vec<f64>>>,
    tangents: Option<Tangents>,
}

/// Forward-mode derivatives of nhat w.r.t. the trainable feature parameters.
#[derive(Debug, Clone)]
struct Tangents {
    dn1: Vec<[f64; N_FEATURE_PARAMS]>,
    dn2: Vec<[f64; N_FEATURE_PARAMS]>,
    history: VecDeque<Vec<[f64; N_FEATURE_PARAMS]>>,
}

impl FeatureTracker {
    pub fn new(dim: usize, horizon: usize, params: FeatureParams) -> Self {
        let history = ALL_STREAMS
            .iter()
            .map(|_| (0..horizon).map(|_| vec![0.0; dim]).collect())
            .collect();
        Self {
            params,
            horizon,
            dim,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            n1: vec![0.0; dim],
            n2: vec![0.0; dim],
            history,
            tangents: None,
        }
    }

    /// Also track ∂nhat/∂(k1, k2, l1, l2, α1, α2) for every lag.
    pub fn with_tangents(mut self) -> Self {
        self.tangents = Some(Tangents {
            dn1: vec![[0.0; N_FEATURE_PARAMS]; self.dim],
            dn2: vec![[0.0; N_FEATURE_PARAMS]; self.dim],
            history: (0..self.horizon)
                .map(|_| vec![[0.0; N_FEATURE_PARAMS]; self.dim])
                .collect(),
        });
        self
    }

    pub fn params(&self) -> &FeatureParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of gradients observed so far.
    pub fn steps(&self) -> usize {
        self.t
    }

    /// Consumes one gradient vector and updates all streams.
    pub fn observe(&mut self, grad: &[f64]) {
        assert_eq!(grad.len(), self.dim, "gradient dimension");
        self.t += 1;
        let p = self.params;
        let t = self.t as i32;
        let c1 = 1.0 - p.beta1.powi(t);
        let c2 = 1.0 - p.beta2.powi(t);
        let mut cols: Vec<Vec<f64>> = self
            .history
            .iter_mut()
            .map(|h| h.pop_back().unwrap_or_else(|| vec![0.0; grad.len()]))
            .collect();
        let mut tan_col = self.tangents.as_mut().map(|tg| {
            tg.history.pop_back().unwrap_or_else(|| vec![[0.0; N_FEATURE_PARAMS]; grad.len()])
        });
        for (i, &g) in grad.iter().enumerate() {
            self.m[i] = p.beta1 * self.m[i] + (1.0 - p.beta1) * g;
            self.v[i] = p.beta2 * self.v[i] + (1.0 - p.beta2) * g * g;
            let denom = (self.v[i] / c2).sqrt() + p.eps;
            let (a, da) = p.first_input(g);
            let (b, db) = p.second_input(g);
            self.n1[i] = p.beta1 * self.n1[i] + (1.0 - p.beta1) * a;
            self.n2[i] = p.beta2 * self.n2[i] + (1.0 - p.beta2) * b;
            let s = (self.n2[i] / c2).sqrt();
            let n1c = self.n1[i] / c1;
            cols[0][i] = g;
            cols[1][i] = (self.m[i] / c1) / denom;
            cols[2][i] = g / denom;
            cols[3][i] = n1c / (s + p.eps);
            cols[4][i] = (self.t - 1) as f64;
            if let (Some(tg), Some(col)) = (self.tangents.as_mut(), tan_col.as_mut()) {
                let mut out = [0.0; N_FEATURE_PARAMS];
                for k in 0..N_FEATURE_PARAMS {
                    tg.dn1[i][k] = p.beta1 * tg.dn1[i][k] + (1.0 - p.beta1) * da[k];
                    tg.dn2[i][k] = p.beta2 * tg.dn2[i][k] + (1.0 - p.beta2) * db[k];
                    let ds = if s > 0.0 { tg.dn2[i][k] / c2 / (2.0 * s) } else { 0.0 };
                    out[k] = tg.dn1[i][k] / c1 / (s + p.eps) - n1c / ((s + p.eps) * (s + p.eps)) * ds;
                }
                col[i] = out;
            }
        }
        for (h, c) in self.history.iter_mut().zip(cols) {
            h.push_front(c);
        }
        if let (Some(tg), Some(col)) = (self.tangents.as_mut(), tan_col) {
            tg.history.push_front(col);
        }
    }

    fn stream_index(name: &str) -> Option<usize> {
        ALL_STREAMS.iter().position(|s| *s == name)
    }

    /// Column of one (stream, lag) over all coordinates.
    pub fn column_of(&self, stream: &str, lag: usize) -> Option<&[f64]> {
        let s = Self::stream_index(stream)?;
        self.history[s].get(lag).map(Vec::as_slice)
    }

    /// Newest value of a stream on one coordinate.
    pub fn current(&self, stream: &str, coord: usize) -> f64 {
        self.column_of(stream, 0).map_or(f64::NAN, |c| c[coord])
    }

    /// The `horizon` most recent values of a stream on one coordinate, newest first.
    pub fn window(&self, stream: &str, coord: usize) -> Vec<f64> {
        let s = Self::stream_index(stream).expect("known stream");
        self.history[s].iter().map(|c| c[coord]).collect()
    }

    /// ∂nhat[lag]/∂p_k on every coordinate; requires [`with_tangents`](Self::with_tangents).
    pub fn nhat_tangent(&self, lag: usize) -> Option<&[[f64; N_FEATURE_PARAMS]]> {
        self.tangents.as_ref()?.history.get(lag).map(Vec::as_slice)
    }
}

impl ColumnSource for FeatureTracker {
    fn column(&self, var: &VarRef) -> Option<&[f64]> {
        self.column_of(&var.stream, var.lag)
    }

    fn n_rows(&self) -> usize {
        self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_corrected_at_first_step() {
        let p = FeatureParams { beta1: 0.9, beta2: 0.9, ..Default::default() };
        let mut tr = FeatureTracker::new(1, 4, p);
        tr.observe(&[2.0]);
        assert!((tr.current(STREAM_MHAT, 0) - 1.0).abs() < 1e-8);
        assert!((tr.current(STREAM_GHAT, 0) - 1.0).abs() < 1e-8);
        assert_eq!(tr.current(STREAM_T, 0), 0.0);
    }

    #[test]
    fn degenerate_params_reduce_nhat_to_mhat() {
        let p = FeatureParams { k1: 1.0, k2: 0.0, l1: 1.0, l2: 0.0, alpha1: 0.0, alpha2: 0.0, ..Default::default() };
        let mut tr = FeatureTracker::new(3, 5, p);
        for g in [[0.3, -1.0, 0.0], [2.0, 0.5, -0.1], [-0.7, 0.2, 4.0]] {
            tr.observe(&g);
            for c in 0..3 {
                let (m, n) = (tr.current(STREAM_MHAT, c), tr.current(STREAM_NHAT, c));
                assert!((m - n).abs() <= 1e-12 * m.abs().max(1.0), "{m} vs {n}");
            }
        }
    }

    #[test]
    fn lags_shift_and_start_at_zero() {
        let mut tr = FeatureTracker::new(2, 3, FeatureParams::default());
        tr.observe(&[1.0, 2.0]);
        tr.observe(&[3.0, 4.0]);
        assert_eq!(tr.window(STREAM_G, 1), vec![4.0, 2.0, 0.0]);
        assert_eq!(tr.column_of(STREAM_T, 0), Some(&[1.0, 1.0][..]));
    }

    #[test]
    fn nhat_tangents_match_finite_differences() {
        let base = FeatureParams { k1: 0.7, k2: 0.4, l1: 0.6, l2: 0.3, alpha1: 0.3, alpha2: 0.2, ..Default::default() };
        let grads = [[0.5, -1.2], [1.5, 0.3], [-0.2, -0.8], [0.9, 2.0]];
        let run = |p: FeatureParams| {
            let mut tr = FeatureTracker::new(2, 4, p).with_tangents();
            for g in &grads {
                tr.observe(g);
            }
            tr
        };
        let tr = run(base);
        for lag in 0..3 {
            for k in 0..N_FEATURE_PARAMS {
                let h = 1e-6;
                let mut up = base.trainable();
                let mut dn = base.trainable();
                up[k] += h;
                dn[k] -= h;
                let fu = run(base.with_trainable(&up));
                let fd = run(base.with_trainable(&dn));
                for c in 0..2 {
                    let fdv = (fu.column_of(STREAM_NHAT, lag).unwrap()[c]
                        - fd.column_of(STREAM_NHAT, lag).unwrap()[c])
                        / (2.0 * h);
                    let an = tr.nhat_tangent(lag).unwrap()[c][k];
                    assert!((an - fdv).abs() <= 1e-6 * fdv.abs().max(1.0), "lag {lag} p{k}: {an} vs {fdv}");
                }
            }
        }
    }
}
