use std::io::{Read, Write};

use super::lattice::{Axis, GridSpec};
use crate::error::{Error, Result};

/// Values of a scalar or vector function tabulated on a [`GridSpec`].
///
/// Storage order is `[t][y][x][component]`; the `y` block has a single entry
/// when the grid has no `y` lattice. Off-lattice evaluation is multilinear.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: GridSpec,
    arity: usize,
    values: Vec<f64>,
}

const BINARY_MAGIC: &[u8; 4] = b"TIGF";
const BINARY_VERSION: u16 = 1;

impl GridFunction {
    pub fn from_values(grid: GridSpec, arity: usize, values: Vec<f64>) -> Result<Self> {
        if arity == 0 {
            return Err(Error::domain("grid function arity must be positive"));
        }
        let expected = grid.t.len() * grid.nodes_per_slice() * arity;
        if values.len() != expected {
            return Err(Error::domain(format!(
                "grid function needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "grid function value #{i} is not finite"
            )));
        }
        Ok(GridFunction {
            grid,
            arity,
            values,
        })
    }

    /// Tabulates `f(t, x, y, out)` at every node; `y` is `None` without a
    /// `y` lattice.
    pub fn from_fn<F>(grid: GridSpec, arity: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(f64, &[f64], Option<&[f64]>, &mut [f64]) -> Result<()>,
    {
        let n = grid.dim();
        let nx = grid.x.size();
        let ny = grid.ny();
        let mut values = vec![0.0; grid.t.len() * ny * nx * arity];
        let mut x = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut pos = 0;
        for &t in grid.t.nodes() {
            for iy in 0..ny {
                if let Some(yl) = &grid.y {
                    yl.coords(iy, &mut y);
                }
                for ix in 0..nx {
                    grid.x.coords(ix, &mut x);
                    let yy = grid.y.as_ref().map(|_| y.as_slice());
                    f(t, &x, yy, &mut values[pos..pos + arity])?;
                    pos += arity;
                }
            }
        }
        GridFunction::from_values(grid, arity, values)
    }

    pub(crate) fn from_values_unchecked(grid: GridSpec, arity: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.t.len() * grid.nodes_per_slice() * arity);
        GridFunction {
            grid,
            arity,
            values,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn slice_len(&self) -> usize {
        self.grid.nodes_per_slice() * self.arity
    }

    /// All values at time node `k`.
    pub fn slice(&self, k: usize) -> &[f64] {
        let len = self.slice_len();
        &self.values[k * len..(k + 1) * len]
    }

    /// Values over the x lattice at time node `k` and y node `iy`.
    pub fn x_slice(&self, k: usize, iy: usize) -> &[f64] {
        let len = self.grid.x.size() * self.arity;
        let start = k * self.slice_len() + iy * len;
        &self.values[start..start + len]
    }

    pub fn index(&self, k: usize, iy: usize, ix: usize, comp: usize) -> usize {
        ((k * self.grid.ny() + iy) * self.grid.x.size() + ix) * self.arity + comp
    }

    pub fn at(&self, k: usize, iy: usize, ix: usize, comp: usize) -> f64 {
        self.values[self.index(k, iy, ix, comp)]
    }

    /// Multilinear interpolation in `(t, y, x)`; arguments outside the box
    /// are clamped.
    pub fn interpolate(&self, t: f64, x: &[f64], y: Option<&[f64]>, out: &mut [f64]) -> Result<()> {
        let n = self.grid.dim();
        if x.len() != n || out.len() != self.arity {
            return Err(Error::domain(
                "interpolation argument has the wrong dimension",
            ));
        }
        let (kt, wt) = self.grid.t.bracket(t);
        let mut brackets: Vec<(usize, f64, usize)> = Vec::with_capacity(2 * n);
        let ylat = match (&self.grid.y, y) {
            (Some(yl), Some(y)) => {
                if y.len() != n {
                    return Err(Error::domain("y argument has the wrong dimension"));
                }
                Some((yl, y))
            }
            (Some(_), None) => return Err(Error::domain("grid function needs a y argument")),
            (None, _) => None,
        };
        let ny_stride = self.grid.x.size();
        if let Some((yl, y)) = ylat {
            for (i, v) in y.iter().enumerate() {
                let (j, w) = yl.axis(i).bracket(*v);
                brackets.push((j, w, yl.stride(i) * ny_stride));
            }
        }
        for (i, v) in x.iter().enumerate() {
            let (j, w) = self.grid.x.axis(i).bracket(*v);
            brackets.push((j, w, self.grid.x.stride(i)));
        }
        out.fill(0.0);
        let corners = 1usize << brackets.len();
        for (dk, tw) in [(0usize, 1.0 - wt), (1, wt)] {
            if tw == 0.0 {
                continue;
            }
            let slice = self.slice(kt + dk);
            for c in 0..corners {
                let mut w = tw;
                let mut node = 0;
                for (b, &(j, wb, stride)) in brackets.iter().enumerate() {
                    if c >> b & 1 == 1 {
                        w *= wb;
                        node += (j + 1) * stride;
                    } else {
                        w *= 1.0 - wb;
                        node += j * stride;
                    }
                }
                if w == 0.0 {
                    continue;
                }
                for (comp, o) in out.iter_mut().enumerate() {
                    *o += w * slice[node * self.arity + comp];
                }
            }
        }
        Ok(())
    }

    pub fn interpolate_scalar(&self, t: f64, x: &[f64], y: Option<&[f64]>) -> Result<f64> {
        let mut out = [0.0];
        self.interpolate(t, x, y, &mut out)?;
        Ok(out[0])
    }

    /// Pointwise combination with another function on the same lattice.
    pub fn zip_with(
        &self,
        other: &GridFunction,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<GridFunction> {
        if self.grid != other.grid || self.arity != other.arity {
            return Err(Error::domain("grid functions live on different lattices"));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| f(*a, *b))
            .collect();
        GridFunction::from_values(self.grid.clone(), self.arity, values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<GridFunction> {
        GridFunction::from_values(
            self.grid.clone(),
            self.arity,
            self.values.iter().map(|v| f(*v)).collect(),
        )
    }

    fn column_names(&self) -> Vec<String> {
        let n = self.grid.dim();
        let mut cols = vec!["t".to_owned()];
        cols.extend((0..n).map(|i| format!("x{i}")));
        if self.grid.y.is_some() {
            cols.extend((0..n).map(|i| format!("y{i}")));
        }
        cols.extend((0..self.arity).map(|i| format!("v{i}")));
        cols
    }

    /// One row per lattice node: `t, x…, y…, value…`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.column_names())?;
        let n = self.grid.dim();
        let mut x = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut row: Vec<String> = Vec::new();
        for k in 0..self.grid.t.len() {
            let t = self.grid.t.node(k);
            for ix in 0..self.grid.x.size() {
                self.grid.x.coords(ix, &mut x);
                for iy in 0..self.grid.ny() {
                    row.clear();
                    row.push(t.to_string());
                    row.extend(x.iter().map(f64::to_string));
                    if let Some(yl) = &self.grid.y {
                        yl.coords(iy, &mut y);
                        row.extend(y.iter().map(f64::to_string));
                    }
                    for c in 0..self.arity {
                        row.push(self.at(k, iy, ix, c).to_string());
                    }
                    wr.write_record(&row)?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`GridFunction::write_csv`],
    /// reconstructing the lattice from the node coordinates.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
        let count = |p: char| {
            header
                .iter()
                .filter(|h| h.starts_with(p) && h[1..].parse::<usize>().is_ok())
                .count()
        };
        let n = count('x');
        let ny = count('y');
        let arity = count('v');
        if header.first().map(String::as_str) != Some("t")
            || n == 0
            || arity == 0
            || (ny != 0 && ny != n)
        {
            return Err(Error::Format(format!(
                "unrecognised grid CSV header {header:?}"
            )));
        }
        if header.len() != 1 + n + ny + arity {
            return Err(Error::Format(format!(
                "unexpected columns in grid CSV header {header:?}"
            )));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad number '{s}': {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != header.len() {
                return Err(Error::Format("ragged grid CSV row".into()));
            }
            rows.push(row);
        }
        let axis_from = |col: usize| -> Result<Axis> {
            let mut v: Vec<f64> = rows.iter().map(|r| r[col]).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            v.dedup();
            Axis::from_nodes(v)
        };
        let t = axis_from(0)?;
        let x_axes = (0..n)
            .map(|i| axis_from(1 + i))
            .collect::<Result<Vec<_>>>()?;
        let y_axes = if ny > 0 {
            Some(
                (0..n)
                    .map(|i| axis_from(1 + n + i))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let grid = GridSpec::new(t, x_axes, y_axes)?;
        let total = grid.t.len() * grid.nodes_per_slice();
        if rows.len() != total {
            return Err(Error::Format(format!(
                "grid CSV has {} rows but the lattice has {total} nodes",
                rows.len()
            )));
        }
        let mut values = vec![f64::NAN; total * arity];
        let mut seen = vec![false; total];
        for row in &rows {
            let k = grid
                .t
                .locate(row[0])
                .ok_or_else(|| Error::Format("off-lattice time".into()))?;
            let ix = grid
                .x
                .locate(&row[1..1 + n])
                .ok_or_else(|| Error::Format("off-lattice state".into()))?;
            let iy = match &grid.y {
                Some(yl) => yl
                    .locate(&row[1 + n..1 + 2 * n])
                    .ok_or_else(|| Error::Format("off-lattice y".into()))?,
                None => 0,
            };
            let node = (k * grid.ny() + iy) * grid.x.size() + ix;
            if std::mem::replace(&mut seen[node], true) {
                return Err(Error::Format("duplicate node in grid CSV".into()));
            }
            values[node * arity..(node + 1) * arity].copy_from_slice(&row[1 + n + ny..]);
        }
        GridFunction::from_values(grid, arity, values)
    }

    /// Versioned little-endian binary encoding.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&BINARY_VERSION.to_le_bytes())?;
        w.write_all(&(self.arity as u32).to_le_bytes())?;
        w.write_all(&(self.grid.dim() as u32).to_le_bytes())?;
        w.write_all(&[u8::from(self.grid.y.is_some())])?;
        let mut put_axis = |a: &Axis| -> Result<()> {
            w.write_all(&(a.len() as u32).to_le_bytes())?;
            for v in a.nodes() {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        put_axis(&self.grid.t)?;
        for a in self.grid.x.axes() {
            put_axis(a)?;
        }
        if let Some(yl) = &self.grid.y {
            for a in yl.axes() {
                put_axis(a)?;
            }
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Format("not a grid function file".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != BINARY_VERSION {
            return Err(Error::Format(format!(
                "unsupported grid function version {version}"
            )));
        }
        let mut b4 = [0u8; 4];
        let mut get_u32 = |r: &mut R| -> Result<usize> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4) as usize)
        };
        let arity = get_u32(&mut r)?;
        let n = get_u32(&mut r)?;
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let has_y = b1[0] != 0;
        let get_f64 = |r: &mut R| -> Result<f64> {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            Ok(f64::from_le_bytes(b8))
        };
        let mut get_axis = |r: &mut R| -> Result<Axis> {
            let len = get_u32(r)?;
            let nodes = (0..len).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
            Axis::from_nodes(nodes)
        };
        let t = get_axis(&mut r)?;
        let x = (0..n)
            .map(|_| get_axis(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let y = if has_y {
            Some(
                (0..n)
                    .map(|_| get_axis(&mut r))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let grid = GridSpec::new(t, x, y)?;
        let total = grid.t.len() * grid.nodes_per_slice() * arity;
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            values.push(get_f64(&mut r)?);
        }
        GridFunction::from_values(grid, arity, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::uniform(1.0, 5, &[(-1.0, 1.0, 5)]).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_wrong_shape() {
        let g = grid();
        assert!(GridFunction::from_values(g.clone(), 1, vec![0.0; 3]).is_err());
        let mut v = vec![0.0; 5 * 25];
        v[3] = f64::NAN;
        assert!(GridFunction::from_values(g, 1, v).is_err());
    }

    #[test]
    fn multilinear_reproduces_bilinear_functions() {
        let g = grid();
        let f = GridFunction::from_fn(g, 1, |t, x, y, o| {
            o[0] = 1.0 + 2.0 * t + 3.0 * x[0] - y.unwrap()[0] + t * x[0];
            Ok(())
        })
        .unwrap();
        let v = f.interpolate_scalar(0.3, &[0.1], Some(&[-0.7])).unwrap();
        let exact = 1.0 + 0.6 + 0.3 + 0.7 + 0.03;
        assert!((v - exact).abs() < 1e-12);
        // node values are returned exactly
        assert_eq!(
            f.interpolate_scalar(0.25, &[0.5], Some(&[0.0])).unwrap(),
            f.at(1, 2, 3, 0)
        );
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let g = grid();
        let f = GridFunction::from_fn(g, 2, |t, x, y, o| {
            o[0] = (t + x[0]).sin() / 3.0;
            o[1] = y.unwrap()[0] * 0.1;
            Ok(())
        })
        .unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let back = GridFunction::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn binary_rejects_bad_magic() {
        assert!(GridFunction::read_binary(&b"NOPE\x01\x00"[..]).is_err());
    }

    proptest! {
        #[test]
        fn binary_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 5 * 9), lo in -5.0f64..0.0) {
            let g = GridSpec::new(
                Axis::uniform(0.0, 1.0, 5).unwrap(),
                vec![Axis::uniform(lo, lo + 2.0, 9).unwrap()],
                None,
            ).unwrap();
            let f = GridFunction::from_values(g, 1, vals).unwrap();
            let mut buf = Vec::new();
            f.write_binary(&mut buf).unwrap();
            prop_assert_eq!(GridFunction::read_binary(buf.as_slice()).unwrap(), f);
        }
    }
}
