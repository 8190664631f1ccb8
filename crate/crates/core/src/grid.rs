//! Uniform rectilinear grids over a box, scalar fields on them, and
//! multilinear interpolation with clamp-to-box boundary handling.
//!
//! Nodes are stored row-major with axis 0 slowest. Node `i` along an axis
//! sits at `lo + i * spacing`, and interpolation reproduces node values
//! exactly.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::operators::QviForm;

/// Largest supported state dimension; interpolation visits `2^dim` corners.
pub const MAX_DIM: usize = 8;

/// Offsets this close to an integer (in units of the spacing) snap to the node.
const NODE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    nodes: Vec<usize>,
    spacing: Vec<f64>,
    /// Row-major strides, axis 0 slowest.
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(lo: &[f64], hi: &[f64], nodes_per_axis: &[usize]) -> Result<Self> {
        let dim = lo.len();
        if hi.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: hi.len() });
        }
        if nodes_per_axis.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: nodes_per_axis.len() });
        }
        if dim == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        if dim > MAX_DIM {
            return Err(Error::TooManyDimensions(dim));
        }
        for axis in 0..dim {
            let (l, h) = (lo[axis], hi[axis]);
            if !l.is_finite() || !h.is_finite() {
                return Err(Error::NonFinite(format!("box corner on axis {axis}")));
            }
            if !(l < h) {
                return Err(Error::DegenerateBox { axis, lo: l, hi: h });
            }
            if nodes_per_axis[axis] < 2 {
                return Err(Error::TooFewNodes { axis, nodes: nodes_per_axis[axis] });
            }
        }
        let len = nodes_per_axis
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or(Error::NodeCountOverflow)?;
        // Keep room for flat index arithmetic on the values buffer.
        if len > isize::MAX as usize / std::mem::size_of::<f64>() {
            return Err(Error::NodeCountOverflow);
        }
        let spacing = (0..dim)
            .map(|a| (hi[a] - lo[a]) / (nodes_per_axis[a] - 1) as f64)
            .collect();
        let mut strides = vec![1usize; dim];
        for a in (0..dim.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * nodes_per_axis[a + 1];
        }
        Ok(Self {
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            nodes: nodes_per_axis.to_vec(),
            spacing,
            strides,
            len,
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Multi-index of a flat node index.
    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for a in 0..self.dim() {
            out[a] = flat / self.strides[a];
            flat %= self.strides[a];
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Coordinates of a node, `lo + i * spacing` per axis.
    pub fn node_into(&self, flat: usize, out: &mut [f64]) {
        let mut rest = flat;
        for a in 0..self.dim() {
            let i = rest / self.strides[a];
            rest %= self.strides[a];
            out[a] = self.lo[a] + i as f64 * self.spacing[a];
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.node_into(flat, &mut x);
        x
    }

    /// Flat index of the node nearest to `x` after clamping into the box.
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut flat = 0;
        for a in 0..self.dim() {
            let s = ((x[a].clamp(self.lo[a], self.hi[a]) - self.lo[a]) / self.spacing[a]).round();
            let i = (s.max(0.0) as usize).min(self.nodes[a] - 1);
            flat += i * self.strides[a];
        }
        flat
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(a, &v)| v >= self.lo[a] && v <= self.hi[a])
    }

    /// True when `x` lies within `cells` spacings of the box on every axis.
    pub fn within_cells(&self, x: &[f64], cells: f64) -> bool {
        x.iter().enumerate().all(|(a, &v)| {
            let pad = cells * self.spacing[a];
            v >= self.lo[a] - pad && v <= self.hi[a] + pad
        })
    }
}

/// Scalar field on a grid: one finite value per node.
#[derive(Debug, Clone)]
pub struct ValueField {
    grid: Arc<Grid>,
    values: Vec<f64>,
    form: Option<QviForm>,
}

impl ValueField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at node {i}")));
        }
        Ok(Self { grid, values, form: None })
    }

    pub fn constant(grid: Arc<Grid>, value: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n])
    }

    pub fn from_fn(grid: Arc<Grid>, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|i| {
                grid.node_into(i, &mut x);
                f(&x)
            })
            .collect();
        Self::new(grid, values)
    }

    /// Builds a field without the finiteness scan; callers guarantee it.
    pub(crate) fn from_parts(grid: Arc<Grid>, values: Vec<f64>, form: Option<QviForm>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values, form }
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn with_form(mut self, form: QviForm) -> Self {
        self.form = Some(form);
        self
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn form(&self) -> Option<QviForm> {
        self.form
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Componentwise clamp into the box, then multilinear interpolation.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64> {
        if let Some(a) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("interpolation point component {a}")));
        }
        if x.len() != self.grid.dim() {
            return Err(Error::DimensionMismatch { expected: self.grid.dim(), got: x.len() });
        }
        Ok(self.interp_unchecked(x))
    }

    /// Interpolation for callers that already guarantee a finite point of
    /// the right dimension.
    pub(crate) fn interp_unchecked(&self, x: &[f64]) -> f64 {
        let g = &*self.grid;
        let dim = g.dim();
        let mut frac = [0.0f64; MAX_DIM];
        let mut origin = 0usize;
        for a in 0..dim {
            let n = g.nodes[a];
            let s = (x[a].clamp(g.lo[a], g.hi[a]) - g.lo[a]) / g.spacing[a];
            let mut i = s.floor();
            let mut t = s - i;
            if t < NODE_SNAP {
                t = 0.0;
            } else if t > 1.0 - NODE_SNAP {
                t = 0.0;
                i += 1.0;
            }
            let mut i = (i.max(0.0) as usize).min(n - 1);
            if i == n - 1 {
                // Upper face: last cell with full weight on its far corner.
                i = n - 2;
                t = 1.0;
            }
            frac[a] = t;
            origin += i * g.strides[a];
        }
        if dim == 1 {
            let t = frac[0];
            let v0 = self.values[origin];
            if t == 0.0 {
                return v0;
            }
            if t == 1.0 {
                return self.values[origin + 1];
            }
            return (1.0 - t) * v0 + t * self.values[origin + 1];
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut idx = origin;
            for a in 0..dim {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    idx += g.strides[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        acc
    }

    /// Nodewise max of `|self - other|`.
    pub fn sup_norm_diff(&self, other: &ValueField) -> Result<f64> {
        if !Arc::ptr_eq(&self.grid, &other.grid) && *self.grid != *other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Discrete Lipschitz seminorm: largest difference quotient between
    /// axis neighbours.
    pub fn lipschitz_seminorm(&self) -> f64 {
        let g = &*self.grid;
        let mut idx = vec![0usize; g.dim()];
        let mut best = 0.0f64;
        for flat in 0..g.len() {
            g.multi_index(flat, &mut idx);
            for a in 0..g.dim() {
                if idx[a] + 1 < g.nodes[a] {
                    let d = (self.values[flat + g.strides[a]] - self.values[flat]).abs() / g.spacing[a];
                    best = best.max(d);
                }
            }
        }
        best
    }

    /// CSV with header `x0,...,x{n-1},value`, one node per line in
    /// row-major order, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let g = &*self.grid;
        let mut out = String::new();
        for a in 0..g.dim() {
            let _ = write!(out, "x{a},");
        }
        out.push_str("value\n");
        let mut x = vec![0.0; g.dim()];
        for (flat, v) in self.values.iter().enumerate() {
            g.node_into(flat, &mut x);
            for c in &x {
                let _ = write!(out, "{c:.16e},");
            }
            let _ = writeln!(out, "{v:.16e}");
        }
        out
    }

    /// Parses a field written by [`ValueField::to_csv`] onto `grid`. Node
    /// coordinates must agree with the grid to within a millionth of a cell.
    pub fn from_csv(text: &str, grid: Arc<Grid>) -> Result<Self> {
        let dim = grid.dim();
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::FieldCsv("empty input".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let expected: Vec<String> = (0..dim)
            .map(|a| format!("x{a}"))
            .chain(std::iter::once("value".to_string()))
            .collect();
        if cols.len() != expected.len() || cols.iter().zip(&expected).any(|(c, e)| c != e) {
            return Err(Error::FieldCsv(format!(
                "header `{header}` does not match `{}`",
                expected.join(",")
            )));
        }
        let mut values = Vec::with_capacity(grid.len());
        let mut node = vec![0.0; dim];
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let flat = values.len();
            if flat >= grid.len() {
                return Err(Error::FieldCsv(format!("more than {} data rows", grid.len())));
            }
            let nums = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::FieldCsv(format!("line {}: {e}", lineno + 2)))?;
            if nums.len() != dim + 1 {
                return Err(Error::FieldCsv(format!(
                    "line {}: expected {} columns, got {}",
                    lineno + 2,
                    dim + 1,
                    nums.len()
                )));
            }
            grid.node_into(flat, &mut node);
            for a in 0..dim {
                if !((nums[a] - node[a]).abs() <= 1e-6 * grid.spacing()[a]) {
                    return Err(Error::FieldCsv(format!(
                        "line {}: coordinate x{a}={} does not match node {}",
                        lineno + 2,
                        nums[a],
                        node[a]
                    )));
                }
            }
            values.push(nums[dim]);
        }
        if values.len() != grid.len() {
            return Err(Error::FieldCsv(format!(
                "expected {} data rows, got {}",
                grid.len(),
                values.len()
            )));
        }
        Self::new(grid, values).map_err(|e| Error::FieldCsv(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(lo: f64, hi: f64, n: usize) -> Arc<Grid> {
        Arc::new(Grid::new(&[lo], &[hi], &[n]).unwrap())
    }

    #[test]
    fn three_nodes_on_unit_box() {
        let g = Grid::new(&[-1.0], &[1.0], &[3]).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.node(0), vec![-1.0]);
        assert_eq!(g.node(1), vec![0.0]);
        assert_eq!(g.node(2), vec![1.0]);
    }

    #[test]
    fn two_d_grid_is_row_major() {
        let g = Grid::new(&[0.0, 0.0], &[1.0, 2.0], &[2, 3]).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.spacing(), &[1.0, 1.0]);
        let nodes: Vec<_> = (0..6).map(|i| g.node(i)).collect();
        assert_eq!(
            nodes,
            vec![
                vec![0.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, 2.0],
                vec![1.0, 0.0],
                vec![1.0, 1.0],
                vec![1.0, 2.0]
            ]
        );
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(matches!(
            Grid::new(&[1.0], &[0.0], &[2]),
            Err(Error::DegenerateBox { axis: 0, .. })
        ));
        assert!(matches!(Grid::new(&[0.0], &[1.0], &[1]), Err(Error::TooFewNodes { .. })));
        assert!(matches!(
            Grid::new(&[0.0; 4], &[1.0; 4], &[usize::MAX / 2, 4, 4, 4]),
            Err(Error::NodeCountOverflow)
        ));
    }

    #[test]
    fn linear_interpolation_and_clamping() {
        let g = grid1(0.0, 1.0, 2);
        let f = ValueField::new(g, vec![0.0, 10.0]).unwrap();
        assert_eq!(f.interpolate(&[0.25]).unwrap(), 2.5);
        assert_eq!(f.interpolate(&[1.0]).unwrap(), 10.0);
        assert_eq!(f.interpolate(&[5.0]).unwrap(), 10.0);
        assert_eq!(f.interpolate(&[-5.0]).unwrap(), 0.0);
        assert!(f.interpolate(&[f64::NAN]).is_err());
    }

    #[test]
    fn exact_at_every_node() {
        let g = Arc::new(Grid::new(&[-3.0, -1.0], &[3.0, 2.0], &[241, 7]).unwrap());
        let f = ValueField::from_fn(g.clone(), |x| x[0].sin() + x[1] * x[1]).unwrap();
        for i in 0..g.len() {
            let x = g.node(i);
            assert_eq!(f.interpolate(&x).unwrap(), f.values()[i], "node {i}");
        }
    }

    #[test]
    fn bilinear_cell_is_convex_combination() {
        let g = Arc::new(Grid::new(&[0.0, 0.0], &[1.0, 1.0], &[2, 2]).unwrap());
        let f = ValueField::new(g, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // f(x, y) = 1 + 2x + y on the unit square.
        let v = f.interpolate(&[0.5, 0.25]).unwrap();
        assert!((v - 2.25).abs() < 1e-15);
    }

    #[test]
    fn sup_norm_examples() {
        let g = grid1(0.0, 1.0, 2);
        let a = ValueField::new(g.clone(), vec![0.0, 4.0]).unwrap();
        let b = ValueField::new(g.clone(), vec![1.0, 1.0]).unwrap();
        assert_eq!(a.sup_norm_diff(&a).unwrap(), 0.0);
        assert_eq!(a.sup_norm_diff(&b).unwrap(), 3.0);
        let three = ValueField::constant(g.clone(), 3.0).unwrap();
        let one = ValueField::constant(g, 1.0).unwrap();
        assert_eq!(three.sup_norm_diff(&one).unwrap(), 2.0);
        let other = ValueField::constant(grid1(0.0, 2.0, 2), 1.0).unwrap();
        assert!(matches!(one.sup_norm_diff(&other), Err(Error::GridMismatch)));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let g = Arc::new(Grid::new(&[-1.0, 0.0], &[1.0, 0.5], &[5, 4]).unwrap());
        let f = ValueField::from_fn(g.clone(), |x| (x[0] * 3.1).exp() - x[1] / 7.0).unwrap();
        let text = f.to_csv();
        assert!(text.starts_with("x0,x1,value\n"));
        let back = ValueField::from_csv(&text, g).unwrap();
        assert_eq!(back.values(), f.values());
    }

    #[test]
    fn csv_rejects_misaligned_rows() {
        let g = grid1(0.0, 1.0, 3);
        assert!(ValueField::from_csv("x0,value\n0,1\n0.5,2\n", g.clone()).is_err());
        assert!(ValueField::from_csv("x0,value\n0,1\n0.7,2\n1,3\n", g.clone()).is_err());
        assert!(ValueField::from_csv("x1,value\n0,1\n0.5,2\n1,3\n", g.clone()).is_err());
        assert!(ValueField::from_csv("x0,value\n0,1\n0.5,nan\n1,3\n", g.clone()).is_err());
        assert!(ValueField::from_csv("x0,value\n0,1\n0.5,2\n1,3\n", g).is_ok());
    }
}
