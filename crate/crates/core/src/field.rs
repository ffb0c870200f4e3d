//! Space-time fields on a masked grid and their binary file format.
//!
//! File layout (little endian): magic `MFGF`, `u32` version, `u8` kind
//! (0 value, 1 density), `u8` dim, `u64 n[0], n[1]`, `f64 lo[0], lo[1], h, T, dt`,
//! `u64` number of slices, `u64` drift signature, `u64` metadata count followed
//! by `(u32 len, utf-8 key, f64 value)` entries, `u64` number of mask runs and
//! the run lengths (alternating, starting with an inactive run), then all
//! values slice by slice in active-cell order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Deref;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CartesianGrid, MaskedGrid};
use crate::types::Vector;

const MAGIC: &[u8; 4] = b"MFGF";
const VERSION: u32 = 1;

/// Uniform time axis `t_n = n T / N`, `n = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub t_final: f64,
    pub n_steps: usize,
}

impl TimeAxis {
    pub fn new(t_final: f64, n_steps: usize) -> Result<Self> {
        if !(t_final > 0.0 && t_final.is_finite()) || n_steps == 0 {
            return Err(Error::InvalidInput(format!("bad time axis T={t_final}, N={n_steps}")));
        }
        Ok(Self { t_final, n_steps })
    }

    /// Axis with step `dt`; `T / dt` must be an integer up to rounding.
    pub fn with_step(t_final: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        let n = (t_final / dt).round();
        if n < 1.0 || (n * dt - t_final).abs() > 1e-9 * t_final {
            return Err(Error::InvalidInput(format!("T = {t_final} is not a multiple of dt = {dt}")));
        }
        Self::new(t_final, n as usize)
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.n_steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t_final * n as f64 / self.n_steps as f64
    }

    pub fn n_slices(&self) -> usize {
        self.n_steps + 1
    }
}

/// Scalar values per time slice and active cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub grid: MaskedGrid,
    pub time: TimeAxis,
    values: Vec<f64>,
    pub meta: BTreeMap<String, f64>,
}

impl SpaceTimeField {
    pub fn new(grid: MaskedGrid, time: TimeAxis, values: Vec<f64>) -> Result<Self> {
        let expected = time.n_slices() * grid.len();
        if values.len() != expected {
            return Err(Error::GridMismatch(format!("{} values for {} slices x {} cells", values.len(), time.n_slices(), grid.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { grid, time, values, meta: BTreeMap::new() })
    }

    pub fn constant(grid: MaskedGrid, time: TimeAxis, c: f64) -> Self {
        let values = vec![c; time.n_slices() * grid.len()];
        Self { grid, time, values, meta: BTreeMap::new() }
    }

    pub fn from_fn(grid: MaskedGrid, time: TimeAxis, f: impl Fn(f64, &Vector) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(time.n_slices() * grid.len());
        for n in 0..time.n_slices() {
            let t = time.time(n);
            values.extend((0..grid.len()).map(|c| f(t, &grid.center(c))));
        }
        Self::new(grid, time, values)
    }

    pub(crate) fn from_slices(grid: MaskedGrid, time: TimeAxis, slices: Vec<Vec<f64>>) -> Self {
        let values = slices.concat();
        debug_assert_eq!(values.len(), time.n_slices() * grid.len());
        Self { grid, time, values, meta: BTreeMap::new() }
    }

    pub fn n_slices(&self) -> usize {
        self.time.n_slices()
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        let m = self.grid.len();
        &self.values[n * m..(n + 1) * m]
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.grid.len().max(1))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn with_meta(mut self, key: &str, value: f64) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn same_layout(&self, other: &SpaceTimeField) -> bool {
        self.grid.same_layout(&other.grid) && self.time == other.time
    }
}

/// Nonnegative density with the signature of the drift that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    field: SpaceTimeField,
    /// Hash of the discrete drift; zero when unknown.
    pub drift_signature: u64,
}

impl Deref for DensityField {
    type Target = SpaceTimeField;
    fn deref(&self) -> &SpaceTimeField {
        &self.field
    }
}

impl DensityField {
    pub fn new(field: SpaceTimeField, drift_signature: u64) -> Self {
        Self { field, drift_signature }
    }

    pub fn into_field(self) -> SpaceTimeField {
        self.field
    }

    pub fn field(&self) -> &SpaceTimeField {
        &self.field
    }

    /// `sum m h^N` on slice `n`.
    pub fn mass(&self, n: usize) -> f64 {
        self.slice(n).iter().sum::<f64>() * self.grid.cart.cell_volume()
    }

    pub fn mass_trace(&self) -> Vec<f64> {
        (0..self.n_slices()).map(|n| self.mass(n)).collect()
    }

    pub fn min_value(&self) -> f64 {
        self.values().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `sup_t || m(t) - other(t) ||_{L^1}`.
    pub fn sup_l1_distance(&self, other: &DensityField) -> Result<f64> {
        if !self.same_layout(other) {
            return Err(Error::GridMismatch("densities live on different grids".into()));
        }
        let vol = self.grid.cart.cell_volume();
        Ok((0..self.n_slices())
            .map(|n| self.slice(n).iter().zip(other.slice(n)).map(|(a, b)| (a - b).abs()).sum::<f64>() * vol)
            .fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Value,
    Density,
}

fn mask_runs(mask: &[bool]) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u64;
    for &b in mask {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn write_header(w: &mut impl Write, kind: FieldKind, f: &SpaceTimeField, signature: u64) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u8(match kind {
        FieldKind::Value => 0,
        FieldKind::Density => 1,
    })?;
    let cart = &f.grid.cart;
    w.write_u8(cart.dim as u8)?;
    for k in 0..2 {
        w.write_u64::<LittleEndian>(cart.n[k] as u64)?;
    }
    for v in [cart.lo[0], cart.lo[1], cart.h, f.time.t_final, f.time.dt()] {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.write_u64::<LittleEndian>(f.n_slices() as u64)?;
    w.write_u64::<LittleEndian>(signature)?;
    w.write_u64::<LittleEndian>(f.meta.len() as u64)?;
    for (k, v) in &f.meta {
        w.write_u32::<LittleEndian>(k.len() as u32)?;
        w.write_all(k.as_bytes())?;
        w.write_f64::<LittleEndian>(*v)?;
    }
    let runs = mask_runs(&f.grid.mask);
    w.write_u64::<LittleEndian>(runs.len() as u64)?;
    for r in runs {
        w.write_u64::<LittleEndian>(r)?;
    }
    Ok(())
}

pub fn write_field(w: &mut impl Write, field: &SpaceTimeField) -> Result<()> {
    write_header(w, FieldKind::Value, field, 0)?;
    for v in field.values() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

pub fn write_density(w: &mut impl Write, m: &DensityField) -> Result<()> {
    write_header(w, FieldKind::Density, m, m.drift_signature)?;
    for v in m.values() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

/// Reads either kind of field file, returning the kind and the drift signature.
pub fn read_any(r: &mut impl Read) -> Result<(FieldKind, SpaceTimeField, u64)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = match r.read_u8()? {
        0 => FieldKind::Value,
        1 => FieldKind::Density,
        k => return Err(Error::Format(format!("unknown field kind {k}"))),
    };
    let dim = r.read_u8()? as usize;
    let n = [r.read_u64::<LittleEndian>()? as usize, r.read_u64::<LittleEndian>()? as usize];
    let mut f = [0.0; 5];
    for v in f.iter_mut() {
        *v = r.read_f64::<LittleEndian>()?;
    }
    let [lo0, lo1, h, t_final, dt] = f;
    let n_slices = r.read_u64::<LittleEndian>()? as usize;
    let signature = r.read_u64::<LittleEndian>()?;
    let n_meta = r.read_u64::<LittleEndian>()? as usize;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut key = vec![0u8; len];
        r.read_exact(&mut key)?;
        let key = String::from_utf8(key).map_err(|e| Error::Format(e.to_string()))?;
        meta.insert(key, r.read_f64::<LittleEndian>()?);
    }
    if !(1..=2).contains(&dim) || n_slices < 2 {
        return Err(Error::Format(format!("bad header: dim {dim}, {n_slices} slices")));
    }
    let cart = CartesianGrid { dim, n, lo: [lo0, lo1], h };
    let n_runs = r.read_u64::<LittleEndian>()? as usize;
    let mut mask = Vec::with_capacity(cart.len());
    for i in 0..n_runs {
        let len = r.read_u64::<LittleEndian>()? as usize;
        mask.extend(std::iter::repeat_n(i % 2 == 1, len));
    }
    if mask.len() != cart.len() {
        return Err(Error::Format(format!("mask covers {} cells, grid has {}", mask.len(), cart.len())));
    }
    let grid = MaskedGrid::new(cart, mask)?;
    let time = TimeAxis { t_final, n_steps: n_slices - 1 };
    if (time.dt() - dt).abs() > 1e-12 * dt.abs().max(1.0) {
        return Err(Error::Format(format!("dt {dt} inconsistent with T = {t_final} and {n_slices} slices")));
    }
    let mut values = vec![0.0; n_slices * grid.len()];
    r.read_f64_into::<LittleEndian>(&mut values)?;
    let mut field = SpaceTimeField::new(grid, time, values)?;
    field.meta = meta;
    Ok((kind, field, signature))
}

pub fn read_field(r: &mut impl Read) -> Result<SpaceTimeField> {
    Ok(read_any(r)?.1)
}

pub fn read_density(r: &mut impl Read) -> Result<DensityField> {
    let (kind, field, sig) = read_any(r)?;
    if kind != FieldKind::Density {
        return Err(Error::Format("file holds a value field, not a density".into()));
    }
    Ok(DensityField::new(field, sig))
}

/// Writes one slice as `x,y,value` CSV rows.
pub fn write_slice_csv(w: &mut impl Write, field: &SpaceTimeField, n: usize) -> Result<()> {
    writeln!(w, "x,y,value")?;
    for (c, v) in field.slice(n).iter().enumerate() {
        let x = field.grid.center(c);
        writeln!(w, "{},{},{}", x[0], x[1], v)?;
    }
    Ok(())
}
