//! Flat binary field container and CSV export.
//!
//! Container layout: 8-byte magic `MALAB1F\0`, little-endian u32 header
//! length, a JSON header (dim, extents, spacing, bbox, field names, free-form
//! metadata), then one full-lattice f64 array per field, row-major,
//! little-endian. Exterior nodes carry the NaN sentinel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geom::{build_grid, ConvexDomain, Grid, ScalarField};

const MAGIC: &[u8; 8] = b"MALAB1F\0";

#[derive(Debug, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub version: u32,
    pub dim: usize,
    pub extents: [usize; 3],
    pub h: f64,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub domain: ConvexDomain,
    pub fields: Vec<String>,
    #[serde(default)]
    pub meta: Value,
}

pub struct Container {
    pub header: ContainerHeader,
    pub payloads: Vec<Vec<f64>>,
}

impl Container {
    pub fn new(grid: &Grid, meta: Value) -> Self {
        let mut bbox_max = grid.origin;
        for a in 0..3 {
            bbox_max[a] += (grid.n[a].saturating_sub(1)) as f64 * grid.h;
        }
        Container {
            header: ContainerHeader {
                version: 1,
                dim: grid.dim,
                extents: grid.n,
                h: grid.h,
                bbox_min: grid.origin,
                bbox_max,
                domain: grid.domain.clone(),
                fields: Vec::new(),
                meta,
            },
            payloads: Vec::new(),
        }
    }

    pub fn push_field(&mut self, name: &str, values: &[f64]) {
        self.header.fields.push(name.to_string());
        self.payloads.push(values.to_vec());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Format(format!("header encode: {e}")))?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for payload in &self.payloads {
            for &v in payload {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{}: not a field container", path.display())));
        }
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)?;
        let hlen = u32::from_le_bytes(len4) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: ContainerHeader = serde_json::from_slice(&hbuf)
            .map_err(|e| Error::Format(format!("header decode: {e}")))?;
        let lattice = header.extents[0] * header.extents[1] * header.extents[2];
        let mut payloads = Vec::with_capacity(header.fields.len());
        for _ in 0..header.fields.len() {
            let mut buf = vec![0u8; lattice * 8];
            r.read_exact(&mut buf)?;
            let vals = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payloads.push(vals);
        }
        Ok(Container { header, payloads })
    }

    /// Rebuild the grid recorded in the header.
    pub fn grid(&self) -> Result<Arc<Grid>> {
        let grid = build_grid(&self.header.domain, self.header.h)?;
        if grid.n != self.header.extents {
            return Err(Error::Format(format!(
                "grid extents mismatch: rebuilt {:?}, header {:?}",
                grid.n, self.header.extents
            )));
        }
        Ok(grid)
    }

    pub fn field(&self, name: &str, grid: &Arc<Grid>) -> Result<ScalarField> {
        let pos = self
            .header
            .fields
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::Format(format!("container has no field '{name}'")))?;
        Ok(ScalarField { grid: Arc::clone(grid), values: self.payloads[pos].clone() })
    }
}

/// Write a field as CSV rows `x,y[,z],value` over inside nodes.
pub fn write_field_csv(field: &ScalarField, path: &Path) -> Result<()> {
    let grid = &field.grid;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    if grid.dim == 2 {
        w.write_record(["x", "y", "value"]).map_err(|e| Error::Format(e.to_string()))?;
    } else {
        w.write_record(["x", "y", "z", "value"]).map_err(|e| Error::Format(e.to_string()))?;
    }
    for idx in 0..grid.len() {
        if !grid.is_inside(idx) {
            continue;
        }
        let p = grid.coords(idx);
        let v = field.get(idx);
        let mut rec: Vec<String> = p[..grid.dim].iter().map(|c| format!("{c:.12e}")).collect();
        rec.push(format!("{v:.12e}"));
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::NodeSet;

    #[test]
    fn container_roundtrip_preserves_fields() {
        let dir = std::env::temp_dir().join(format!("malab-io-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let grid = build_grid(&ConvexDomain::disk(1.0), 1.0 / 16.0).unwrap();
        let f = ScalarField::from_fn(&grid, |p| p[0] * p[0] - 0.5 * p[1]);
        let g = ScalarField::constant(&grid, 2.5);
        let mut c = Container::new(&grid, serde_json::json!({"note": "test"}));
        c.push_field("u", &f.values);
        c.push_field("f", &g.values);
        let path = dir.join("state.bin");
        c.write(&path).unwrap();

        let back = Container::read(&path).unwrap();
        let grid2 = back.grid().unwrap();
        assert_eq!(grid2.n, grid.n);
        let f2 = back.field("u", &grid2).unwrap();
        for idx in 0..grid.len() {
            if grid.is_inside(idx) {
                assert_eq!(f.get(idx).to_bits(), f2.get(idx).to_bits());
            }
        }
        assert!(back.field("missing", &grid2).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_has_one_row_per_inside_node() {
        let dir = std::env::temp_dir().join(format!("malab-csv-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let grid = build_grid(&ConvexDomain::disk(1.0), 1.0 / 16.0).unwrap();
        let f = ScalarField::constant(&grid, 1.0);
        let path = dir.join("f.csv");
        write_field_csv(&f, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let inside = NodeSet::from_nodes(grid.len(), grid.inside_nodes());
        assert_eq!(text.lines().count(), inside.len() + 1);
        assert!(text.starts_with("x,y,value"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
