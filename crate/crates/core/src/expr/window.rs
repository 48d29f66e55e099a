use std::collections::{BTreeMap, VecDeque};

use super::VarRef;

/// The last `horizon` values of each named stream; lag 0 is the newest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureWindow {
    horizon: usize,
    streams: BTreeMap<String, VecDeque<f64>>,
}

impl FeatureWindow {
    pub fn new(horizon: usize) -> Self {
        Self { horizon, streams: BTreeMap::new() }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Pushes a new newest value, dropping anything older than the horizon.
    pub fn push(&mut self, stream: &str, value: f64) {
        let buf = self.streams.entry(stream.to_string()).or_default();
        buf.push_front(value);
        buf.truncate(self.horizon);
    }

    /// Replaces a stream with `values` given newest first.
    pub fn set(&mut self, stream: &str, mut values: Vec<f64>) {
        values.truncate(self.horizon);
        self.streams.insert(stream.to_string(), values.into());
    }

    pub fn get(&self, var: &VarRef) -> Option<f64> {
        self.streams.get(&var.stream)?.get(var.lag).copied()
    }

    pub fn stream(&self, name: &str) -> Option<&VecDeque<f64>> {
        self.streams.get(name)
    }

    pub fn stream_names(&self) -> impl Iterator<Item = &str> {
        self.streams.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newest_is_lag_zero() {
        let mut w = FeatureWindow::new(3);
        for v in [1.0, 2.0, 3.0, 4.0] {
            w.push("g", v);
        }
        assert_eq!(w.get(&VarRef::new("g", 0)), Some(4.0));
        assert_eq!(w.get(&VarRef::new("g", 2)), Some(2.0));
        assert_eq!(w.get(&VarRef::new("g", 3)), None);
        assert_eq!(w.get(&VarRef::new("m", 0)), None);
    }
}
