//! CSV and manifest files. Numbers are written with Rust's shortest
//! round-trip formatting, so every stored double reads back bit-identically.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use crossdiff_core::{Field, Mesh, Table};
use sha2::{Digest, Sha256};

pub fn write_table(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(&table.headers)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| format_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut table = Table::new(&headers);
    for (k, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), k + 1))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("{}: row {} is not numeric", path.display(), k + 1))?;
        if row.len() != headers.len() {
            bail!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                k + 1,
                row.len(),
                headers.len()
            );
        }
        table.push(row);
    }
    Ok(table)
}

pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:?}")
    }
}

/// Field table with columns node, x, [y], r, b.
pub fn fields_table(mesh: &Mesh, r: &[f64], b: &[f64]) -> Table {
    let mut headers = vec!["node", "x"];
    if mesh.dim() == 2 {
        headers.push("y");
    }
    headers.extend(["r", "b"]);
    let mut t = Table::new(&headers);
    for i in 0..mesh.n_nodes() {
        let p = mesh.point(i);
        let mut row = vec![i as f64];
        row.extend_from_slice(p);
        row.extend([r[i], b[i]]);
        t.push(row);
    }
    t
}

pub fn read_fields(path: &Path, mesh: &Mesh) -> Result<(Field, Field)> {
    let t = read_table(path)?;
    let col = |name: &str| {
        t.column(name)
            .with_context(|| format!("{}: missing column `{name}`", path.display()))
    };
    let (node, r, b) = (col("node")?, col("r")?, col("b")?);
    if r.len() != mesh.n_nodes() {
        bail!(
            "{}: {} rows for a mesh of {} nodes",
            path.display(),
            r.len(),
            mesh.n_nodes()
        );
    }
    if node.iter().enumerate().any(|(i, &n)| n != i as f64) {
        bail!(
            "{}: node column must list 0..{} in order",
            path.display(),
            mesh.n_nodes()
        );
    }
    Ok((Field::new(r)?, Field::new(b)?))
}

pub fn write_mesh(path: &Path, mesh: &Mesh) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = std::io::BufWriter::new(f);
    mesh.write_text(&mut w)?;
    Ok(())
}

pub fn read_mesh(path: &Path) -> Result<Mesh> {
    let f = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(Mesh::read_text(std::io::BufReader::new(f)).with_context(|| path.display().to_string())?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash in git's blob framing (`blob <len>\0<content>`), over SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(
        &fs::read(path).with_context(|| format!("cannot read {}", path.display()))?,
    ))
}
