//! Uniform per-dimension discretization of phase space.
//!
//! A [`GridSpec`] splits the bounding box `[lo, hi]` into `axis_len` equal
//! segments along every dimension. Segments are half-open
//! `[lo + i w, lo + (i + 1) w)`, the last one also closed on the right, and
//! states outside the box clamp to the boundary segments.

use serde::{Deserialize, Serialize};

use crate::dynamics::TrajectorySet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Segments per dimension (uniform across dimensions).
    pub axis_len: usize,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, axis_len: usize) -> Result<Self> {
        let g = GridSpec { lo, hi, axis_len };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.len() != self.hi.len() || self.lo.is_empty() {
            return Err(Error::Shape("lo and hi must be nonempty and equally long".into()));
        }
        if self.axis_len < 2 {
            return Err(Error::invalid(format!(
                "axis_len must be >= 2, got {}",
                self.axis_len
            )));
        }
        for (k, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l < h) {
                return Err(Error::invalid(format!(
                    "dimension {k}: need lo < hi, got [{l}, {h}]"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Segment width along dimension `k`.
    pub fn width(&self, k: usize) -> f64 {
        (self.hi[k] - self.lo[k]) / self.axis_len as f64
    }

    /// Segment index per dimension, clamped to `[0, axis_len - 1]`.
    pub fn encode(&self, state: &[f64]) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        self.encode_into(state, &mut out);
        out
    }

    pub fn encode_into(&self, state: &[f64], out: &mut [usize]) {
        let top = (self.axis_len - 1) as f64;
        for k in 0..self.dim() {
            let u = ((state[k] - self.lo[k]) / self.width(k)).floor();
            // NaN clamps to 0 via the comparisons below
            out[k] = if u >= top {
                self.axis_len - 1
            } else if u > 0.0 {
                u as usize
            } else {
                0
            };
        }
    }

    /// Center of the addressed segment.
    pub fn decode(&self, index: &[usize]) -> Result<Vec<f64>> {
        if index.len() != self.dim() {
            return Err(Error::Shape(format!(
                "multi-index has {} entries, grid has {} dimensions",
                index.len(),
                self.dim()
            )));
        }
        index
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                if i >= self.axis_len {
                    Err(Error::IndexOutOfRange {
                        dim: k,
                        index: i,
                        axis_len: self.axis_len,
                    })
                } else {
                    Ok(self.lo[k] + (i as f64 + 0.5) * self.width(k))
                }
            })
            .collect()
    }

    /// Same box, `axis_len -> 2 axis_len - 1`.
    pub fn refine(&self) -> GridSpec {
        GridSpec {
            lo: self.lo.clone(),
            hi: self.hi.clone(),
            axis_len: 2 * self.axis_len - 1,
        }
    }

    pub fn contains(&self, state: &[f64]) -> bool {
        state
            .iter()
            .enumerate()
            .all(|(k, &x)| x >= self.lo[k] && x <= self.hi[k])
    }

    /// Encodes every trajectory of `data` on this grid.
    pub fn encode_set(&self, data: &TrajectorySet) -> Result<Vec<MultiIndexSeq>> {
        if data.dim != self.dim() {
            return Err(Error::Shape(format!(
                "data has {} dimensions, grid has {}",
                data.dim,
                self.dim()
            )));
        }
        Ok((0..data.count)
            .map(|i| self.encode_trajectory(data.trajectory(i)))
            .collect())
    }

    /// Encodes a row-major `[T][d]` trajectory.
    pub fn encode_trajectory(&self, states: &[f64]) -> MultiIndexSeq {
        let d = self.dim();
        let mut indices = vec![0; states.len()];
        for (row, out) in states.chunks(d).zip(indices.chunks_mut(d)) {
            self.encode_into(row, out);
        }
        MultiIndexSeq {
            indices,
            dim: d,
            axis_len: self.axis_len,
        }
    }
}

/// Per-dimension min/max envelope of `data`, expanded by `margin` times the
/// range on both sides.
pub fn fit_bounds(data: &TrajectorySet, margin: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if data.count == 0 || data.steps == 0 {
        return Err(Error::invalid("cannot fit bounds on empty data"));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::invalid(format!("margin must be >= 0, got {margin}")));
    }
    let d = data.dim;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in data.states.chunks(d) {
        for k in 0..d {
            lo[k] = lo[k].min(row[k]);
            hi[k] = hi[k].max(row[k]);
        }
    }
    for k in 0..d {
        let range = hi[k] - lo[k];
        if !(range > 0.0) {
            return Err(Error::DegenerateDimension { dim: k, value: lo[k] });
        }
        lo[k] -= margin * range;
        hi[k] += margin * range;
    }
    Ok((lo, hi))
}

/// A quantized trajectory: row-major `[T][dim]` indices in `[0, axis_len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiIndexSeq {
    pub indices: Vec<usize>,
    pub dim: usize,
    pub axis_len: usize,
}

impl MultiIndexSeq {
    pub fn new(indices: Vec<usize>, dim: usize, axis_len: usize) -> Result<Self> {
        if dim == 0 || indices.len() % dim != 0 {
            return Err(Error::Shape("index buffer is not a whole number of rows".into()));
        }
        if let Some(pos) = indices.iter().position(|&i| i >= axis_len) {
            return Err(Error::IndexOutOfRange {
                dim: pos % dim,
                index: indices[pos],
                axis_len,
            });
        }
        Ok(MultiIndexSeq {
            indices,
            dim,
            axis_len,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, t: usize) -> &[usize] {
        &self.indices[t * self.dim..(t + 1) * self.dim]
    }

    /// Rows `[start, end)`.
    pub fn window(&self, start: usize, end: usize) -> MultiIndexSeq {
        MultiIndexSeq {
            indices: self.indices[start * self.dim..end * self.dim].to_vec(),
            dim: self.dim,
            axis_len: self.axis_len,
        }
    }

    /// Decodes every row to segment centers.
    pub fn decode(&self, grid: &GridSpec) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.indices.len());
        for t in 0..self.len() {
            out.extend(grid.decode(self.row(t))?);
        }
        Ok(out)
    }
}
