//! Flat binary containers for fields and kernel tables, plus CSV forms for
//! small grids.
//!
//! Field container layout (all little-endian):
//! magic `NLF1`, u32 version, u32 d, u32 N, f64 L, u32 rank tag, then
//! f64 values in row-major node order with the components of each node
//! consecutive.

use crate::error::{Error, Result};
use crate::grid::{FieldRank, GridSpec, SampledField};
use std::io::{Read, Write};
use std::path::Path;

const FIELD_MAGIC: &[u8; 4] = b"NLF1";
const TABLE_MAGIC: &[u8; 4] = b"NLKT";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format("container truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serialize a field to the flat binary container.
pub fn field_to_bytes(f: &SampledField) -> Vec<u8> {
    let grid = f.grid();
    let nodes = grid.node_count();
    let comps = f.components();
    let mut buf = Vec::with_capacity(28 + 8 * nodes * comps);
    buf.extend_from_slice(FIELD_MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, grid.dimension() as u32);
    put_u32(&mut buf, grid.points_per_axis() as u32);
    put_f64(&mut buf, grid.half_width());
    put_u32(&mut buf, f.rank().tag());
    // node-major order: all components of node 0, then node 1, ...
    for node in 0..nodes {
        for c in 0..comps {
            put_f64(&mut buf, f.value(node, c));
        }
    }
    buf
}

pub fn field_from_bytes(data: &[u8]) -> Result<SampledField> {
    let mut cur = Cursor::new(data);
    if cur.take(4)? != FIELD_MAGIC {
        return Err(Error::Format("bad field magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported field version {version}")));
    }
    let d = cur.u32()? as usize;
    let n = cur.u32()? as usize;
    let l = cur.f64()?;
    let rank = FieldRank::from_tag(cur.u32()?)?;
    let grid = GridSpec::new(d, l, n)?;
    let nodes = grid.node_count();
    let comps = rank.components(d);
    let mut values = vec![0.0; nodes * comps];
    for node in 0..nodes {
        for c in 0..comps {
            values[c * nodes + node] = cur.f64()?;
        }
    }
    SampledField::from_values(grid, rank, values)
}

pub fn write_field(path: &Path, f: &SampledField) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&field_to_bytes(f))?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<SampledField> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    field_from_bytes(&data)
}

/// CSV form: header `x1,..,xd,c0,..,ck`, one row per node, 17 significant
/// digits.
pub fn field_to_csv(f: &SampledField) -> String {
    let grid = f.grid();
    let d = grid.dimension();
    let comps = f.components();
    let mut out = String::new();
    for k in 0..d {
        out.push_str(&format!("x{},", k + 1));
    }
    let headers: Vec<String> = (0..comps).map(|c| format!("c{c}")).collect();
    out.push_str(&headers.join(","));
    out.push('\n');
    let mut x = [0.0; 3];
    for node in 0..grid.node_count() {
        grid.position(node, &mut x[..d]);
        for xk in x.iter().take(d) {
            out.push_str(&format!("{xk:.16e},"));
        }
        let vals: Vec<String> = (0..comps).map(|c| format!("{:.16e}", f.value(node, c))).collect();
        out.push_str(&vals.join(","));
        out.push('\n');
    }
    out
}

/// Parse a CSV produced by [`field_to_csv`]; the grid must be supplied since
/// CSV carries coordinates, not the grid header.
pub fn field_from_csv(grid: GridSpec, rank: FieldRank, csv: &str) -> Result<SampledField> {
    let d = grid.dimension();
    let comps = rank.components(d);
    let nodes = grid.node_count();
    let mut values = vec![0.0; nodes * comps];
    let mut seen = 0usize;
    for (lineno, line) in csv.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + comps {
            return Err(Error::Format(format!(
                "csv line {} has {} fields, expected {}",
                lineno + 1,
                fields.len(),
                d + comps
            )));
        }
        let mut coord = [0.0; 3];
        for k in 0..d {
            coord[k] = fields[k]
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("csv line {}: {e}", lineno + 1)))?;
        }
        let node = grid.nearest_node(&coord[..d]);
        for c in 0..comps {
            values[c * nodes + node] = fields[d + c]
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("csv line {}: {e}", lineno + 1)))?;
        }
        seen += 1;
    }
    if seen != nodes {
        return Err(Error::Format(format!(
            "csv carries {seen} rows for a grid of {nodes} nodes"
        )));
    }
    SampledField::from_values(grid, rank, values)
}

/// Kernel-table container: table-of-contents header (sources, time ladder,
/// per-slice diagnostics), then the slices as scalar fields.
pub fn table_to_bytes(table: &crate::solver::KernelTable) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TABLE_MAGIC);
    put_u32(&mut buf, VERSION);
    let grid = table.grid();
    put_u32(&mut buf, grid.dimension() as u32);
    put_u32(&mut buf, grid.points_per_axis() as u32);
    put_f64(&mut buf, grid.half_width());
    put_u32(&mut buf, table.sources().len() as u32);
    put_u32(&mut buf, table.times().len() as u32);
    for &s in table.sources() {
        buf.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for &t in table.times() {
        put_f64(&mut buf, t);
    }
    for diag in table.diagnostics() {
        put_f64(&mut buf, diag.time);
        put_f64(&mut buf, diag.mass);
        put_f64(&mut buf, diag.min);
        put_f64(&mut buf, diag.max);
        put_f64(&mut buf, diag.boundary_leak);
        put_f64(&mut buf, diag.drift_mass_defect);
    }
    for si in 0..table.sources().len() {
        for ti in 0..table.times().len() {
            let slice = table.slice(si, ti);
            for &v in slice.values() {
                put_f64(&mut buf, v);
            }
        }
    }
    buf
}

pub fn table_from_bytes(data: &[u8]) -> Result<crate::solver::KernelTable> {
    let mut cur = Cursor::new(data);
    if cur.take(4)? != TABLE_MAGIC {
        return Err(Error::Format("bad kernel table magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported table version {version}")));
    }
    let d = cur.u32()? as usize;
    let n = cur.u32()? as usize;
    let l = cur.f64()?;
    let grid = GridSpec::new(d, l, n)?;
    let ns = cur.u32()? as usize;
    let nt = cur.u32()? as usize;
    let mut sources = Vec::with_capacity(ns);
    for _ in 0..ns {
        sources.push(cur.u64()? as usize);
    }
    let mut times = Vec::with_capacity(nt);
    for _ in 0..nt {
        times.push(cur.f64()?);
    }
    let mut diags = Vec::with_capacity(ns * nt);
    for _ in 0..ns * nt {
        diags.push(crate::solver::SliceDiagnostics {
            time: cur.f64()?,
            mass: cur.f64()?,
            min: cur.f64()?,
            max: cur.f64()?,
            boundary_leak: cur.f64()?,
            drift_mass_defect: cur.f64()?,
        });
    }
    let nodes = grid.node_count();
    let mut slices = Vec::with_capacity(ns * nt);
    for _ in 0..ns * nt {
        let mut values = Vec::with_capacity(nodes);
        for _ in 0..nodes {
            values.push(cur.f64()?);
        }
        slices.push(SampledField::from_values(grid, FieldRank::Scalar, values)?);
    }
    crate::solver::KernelTable::from_parts(grid, sources, times, slices, diags)
}

pub fn write_table(path: &Path, t: &crate::solver::KernelTable) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&table_to_bytes(t))?;
    Ok(())
}

pub fn read_table(path: &Path) -> Result<crate::solver::KernelTable> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    table_from_bytes(&data)
}

/// Diagnostics CSV: one row per (source, time) slice.
pub fn table_diagnostics_csv(table: &crate::solver::KernelTable) -> String {
    let mut out = String::from("source,time,mass,min,max,boundary_leak,drift_mass_defect\n");
    let nt = table.times().len();
    for (k, diag) in table.diagnostics().iter().enumerate() {
        let si = k / nt;
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            table.sources()[si],
            diag.time,
            diag.mass,
            diag.min,
            diag.max,
            diag.boundary_leak,
            diag.drift_mass_defect
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn field_roundtrip_binary() {
        let g = GridSpec::new(2, 1.0, 5).unwrap();
        let f = SampledField::from_vector_fn(g, |x, c| x[c] + 0.5).unwrap();
        let bytes = field_to_bytes(&f);
        let f2 = field_from_bytes(&bytes).unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn field_roundtrip_csv() {
        let g = GridSpec::new(2, 1.0, 5).unwrap();
        let f = SampledField::from_scalar_fn(g, |x| x[0] * 2.0 - x[1]).unwrap();
        let csv = field_to_csv(&f);
        let f2 = field_from_csv(g, FieldRank::Scalar, &csv).unwrap();
        for idx in 0..g.node_count() {
            assert!((f.at(idx) - f2.at(idx)).abs() < 1e-14);
        }
    }

    #[test]
    fn corrupt_container_is_rejected() {
        let g = GridSpec::new(1, 1.0, 5).unwrap();
        let f = SampledField::constant(g, 1.0);
        let mut bytes = field_to_bytes(&f);
        bytes[0] = b'X';
        assert!(field_from_bytes(&bytes).is_err());
        let short = &field_to_bytes(&f)[..20];
        assert!(field_from_bytes(short).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn field_binary_roundtrip_is_exact(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = GridSpec::new(1, 2.0, 9).unwrap();
            let vals: Vec<f64> = (0..9).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let f = SampledField::from_values(g, FieldRank::Scalar, vals).unwrap();
            let f2 = field_from_bytes(&field_to_bytes(&f)).unwrap();
            prop_assert_eq!(f, f2);
        }
    }
}
