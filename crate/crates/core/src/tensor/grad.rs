use std::collections::BTreeMap;

use super::ParamId;

/// Gradient of one parameter.
///
/// Embedding tables only receive gradient on looked-up rows, so those are
/// kept as a sparse row map instead of a full dense buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Gradient {
    Dense(Vec<f64>),
    Rows {
        width: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl Gradient {
    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        match self {
            Gradient::Dense(v) => v.clone(),
            Gradient::Rows { width, rows } => {
                let mut out = vec![0.0; len];
                for (&r, row) in rows {
                    out[r * width..(r + 1) * width].copy_from_slice(row);
                }
                out
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        match self {
            Gradient::Dense(v) => v.iter().map(|x| x * x).sum(),
            Gradient::Rows { rows, .. } => rows.values().flatten().map(|x| x * x).sum(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Gradient::Dense(v) => v.iter().all(|x| x.is_finite()),
            Gradient::Rows { rows, .. } => rows.values().flatten().all(|x| x.is_finite()),
        }
    }

    fn scale(&mut self, s: f64) {
        match self {
            Gradient::Dense(v) => v.iter_mut().for_each(|x| *x *= s),
            Gradient::Rows { rows, .. } => rows.values_mut().flatten().for_each(|x| *x *= s),
        }
    }

    /// Visits every (flat index, gradient) pair that may be non-zero, in
    /// increasing index order.
    pub fn for_each_entry(&self, mut f: impl FnMut(usize, f64)) {
        match self {
            Gradient::Dense(v) => v.iter().enumerate().for_each(|(i, &g)| f(i, g)),
            Gradient::Rows { width, rows } => {
                for (&r, row) in rows {
                    for (j, &g) in row.iter().enumerate() {
                        f(r * width + j, g);
                    }
                }
            }
        }
    }
}

/// Parameter identity to gradient. Parameters that did not take part in the
/// loss have no entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<ParamId, Gradient>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Gradient> {
        self.entries.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Gradient)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn dense(&self, id: ParamId, len: usize) -> Option<Vec<f64>> {
        self.entries.get(&id).map(|g| g.to_dense(len))
    }

    pub(crate) fn add_dense(&mut self, id: ParamId, values: &[f64], scale: f64) {
        match self.entries.get_mut(&id) {
            None => {
                self.entries
                    .insert(id, Gradient::Dense(values.iter().map(|v| v * scale).collect()));
            }
            Some(Gradient::Dense(acc)) => {
                for (a, v) in acc.iter_mut().zip(values) {
                    *a += v * scale;
                }
            }
            Some(g @ Gradient::Rows { .. }) => {
                let mut acc = g.to_dense(values.len());
                for (a, v) in acc.iter_mut().zip(values) {
                    *a += v * scale;
                }
                *g = Gradient::Dense(acc);
            }
        }
    }

    pub(crate) fn add_row(&mut self, id: ParamId, row: usize, width: usize, values: &[f64], scale: f64) {
        let entry = self.entries.entry(id).or_insert_with(|| Gradient::Rows {
            width,
            rows: BTreeMap::new(),
        });
        match entry {
            Gradient::Rows { rows, .. } => {
                let acc = rows.entry(row).or_insert_with(|| vec![0.0; width]);
                for (a, v) in acc.iter_mut().zip(values) {
                    *a += v * scale;
                }
            }
            Gradient::Dense(acc) => {
                for (a, v) in acc[row * width..(row + 1) * width].iter_mut().zip(values) {
                    *a += v * scale;
                }
            }
        }
    }

    /// Adds `other` into `self`, coordinatewise.
    pub fn merge(&mut self, other: &GradientMap) {
        for (&id, g) in &other.entries {
            match g {
                Gradient::Dense(v) => self.add_dense(id, v, 1.0),
                Gradient::Rows { width, rows } => {
                    for (&r, row) in rows {
                        self.add_row(id, r, *width, row, 1.0);
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.entries.values_mut().for_each(|g| g.scale(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.entries.values().map(Gradient::norm_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Gradient::is_finite)
    }
}
