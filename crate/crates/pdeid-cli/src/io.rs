//! Solution-field files: little-endian f64 arrays or delimited text, plus a
//! text metadata sidecar that carries shape, generating parameters, and
//! provenance (config hash, seeds, code version).
//!
//! Record order is identical in both formats: the flattened grid
//! (`n_points * dim` values, row-major) followed by one record per
//! (snapshot, output) of `n_points` values.

use crate::config::{ConfigMap, FileFormat};
use crate::datagen::SolutionField;
use crate::HarnessError;
use pdeid_core::operator::ModelFamily;
use std::fs;
use std::path::{Path, PathBuf};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn format_float(v: f64) -> String {
    format!("{v:.12e}")
}

pub fn format_float_list(vs: &[f64]) -> String {
    vs.iter().map(|&v| format_float(v)).collect::<Vec<_>>().join(", ")
}

fn family_from_name(name: &str) -> Result<ModelFamily, HarnessError> {
    Ok(match name {
        "burgers" => ModelFamily::Burgers,
        "kdv" => ModelFamily::Kdv,
        "ks" => ModelFamily::Ks,
        "nls" => ModelFamily::Nls,
        "ns2d" => ModelFamily::Ns2d,
        "fractional_rl" => ModelFamily::FractionalRl,
        "fractional_laplacian" => ModelFamily::FractionalLaplacian,
        other => return Err(HarnessError::InvalidInput(format!("unknown family {other}"))),
    })
}

/// Write `field` under `dir/basename` and return (data path, sidecar path).
pub fn write_field(
    dir: &Path,
    basename: &str,
    field: &SolutionField,
    format: FileFormat,
    provenance: &[(String, String)],
) -> Result<(PathBuf, PathBuf), HarnessError> {
    fs::create_dir_all(dir)?;
    let ext = match format {
        FileFormat::Binary => "bin",
        FileFormat::Text => "txt",
    };
    let data_path = dir.join(format!("{basename}.{ext}"));
    let meta_path = dir.join(format!("{basename}.meta"));

    let records = record_iter(field);
    match format {
        FileFormat::Binary => {
            let mut bytes = Vec::new();
            for rec in &records {
                for &v in *rec {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            fs::write(&data_path, bytes)?;
        }
        FileFormat::Text => {
            let mut text = String::new();
            for rec in &records {
                let line: Vec<String> = rec.iter().map(|&v| format_float(v)).collect();
                text.push_str(&line.join(" "));
                text.push('\n');
            }
            fs::write(&data_path, text)?;
        }
    }

    let mut meta = String::new();
    meta.push_str("[field]\n");
    meta.push_str(&format!("family = {}\n", field.family.name()));
    meta.push_str(&format!("dim = {}\n", field.dim));
    meta.push_str(&format!("n_points = {}\n", field.n_points()));
    meta.push_str(&format!("n_snapshots = {}\n", field.n_snapshots()));
    meta.push_str(&format!("outputs = {}\n", field.outputs()));
    meta.push_str(&format!("t0 = {}\n", format_float(field.times[0])));
    meta.push_str(&format!("dt = {}\n", format_float(field.dt())));
    meta.push_str(&format!("true_lambda = {}\n", format_float_list(&field.true_lambda)));
    meta.push_str(&format!("validated = {}\n", field.validated()));
    meta.push_str(&format!("format = {}\n", if format == FileFormat::Binary { "binary" } else { "text" }));
    meta.push_str(&format!("data_file = {}\n", data_path.file_name().unwrap().to_string_lossy()));
    meta.push_str("\n[provenance]\n");
    meta.push_str(&format!("version = {VERSION}\n"));
    for (k, v) in provenance {
        meta.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(&meta_path, meta)?;
    Ok((data_path, meta_path))
}

fn record_iter(field: &SolutionField) -> Vec<&[f64]> {
    let mut records: Vec<&[f64]> = vec![&field.grid];
    for snap in &field.values {
        for out in snap {
            records.push(out);
        }
    }
    records
}

/// Load a field written by [`write_field`] given its sidecar path.
pub fn read_field(meta_path: &Path) -> Result<SolutionField, HarnessError> {
    let meta = ConfigMap::parse(&fs::read_to_string(meta_path)?)?;
    let need = |key: &str| {
        meta.get("field", key)
            .ok_or_else(|| HarnessError::InvalidInput(format!("sidecar missing field.{key}")))
    };
    let family = family_from_name(need("family")?)?;
    let dim: usize = need("dim")?.parse().map_err(|_| bad("dim"))?;
    let n_points: usize = need("n_points")?.parse().map_err(|_| bad("n_points"))?;
    let n_snapshots: usize = need("n_snapshots")?.parse().map_err(|_| bad("n_snapshots"))?;
    let outputs: usize = need("outputs")?.parse().map_err(|_| bad("outputs"))?;
    let t0: f64 = need("t0")?.parse().map_err(|_| bad("t0"))?;
    let dt: f64 = need("dt")?.parse().map_err(|_| bad("dt"))?;
    let true_lambda: Vec<f64> = need("true_lambda")?
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad("true_lambda")))
        .collect::<Result<_, _>>()?;
    let validated: bool = need("validated")?.parse().map_err(|_| bad("validated"))?;
    let format = need("format")?;
    let data_path = meta_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(need("data_file")?);

    let n_records = 1 + n_snapshots * outputs;
    let mut flat: Vec<Vec<f64>> = Vec::with_capacity(n_records);
    match format {
        "binary" => {
            let bytes = fs::read(&data_path)?;
            let grid_len = n_points * dim;
            let total = grid_len + n_snapshots * outputs * n_points;
            if bytes.len() != total * 8 {
                return Err(HarnessError::InvalidInput(format!(
                    "data file holds {} bytes, expected {}",
                    bytes.len(),
                    total * 8
                )));
            }
            let mut vals = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
            flat.push((&mut vals).take(grid_len).collect());
            for _ in 0..n_snapshots * outputs {
                flat.push((&mut vals).take(n_points).collect());
            }
        }
        "text" => {
            let text = fs::read_to_string(&data_path)?;
            for line in text.lines() {
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|p| p.parse::<f64>().map_err(|_| bad("data value")))
                    .collect::<Result<_, _>>()?;
                flat.push(row);
            }
            if flat.len() != n_records {
                return Err(HarnessError::InvalidInput(format!(
                    "text data holds {} records, expected {n_records}",
                    flat.len()
                )));
            }
        }
        other => return Err(HarnessError::InvalidInput(format!("unknown format {other}"))),
    }
    let grid = flat.remove(0);
    let mut values = Vec::with_capacity(n_snapshots);
    let mut it = flat.into_iter();
    for _ in 0..n_snapshots {
        let snap: Vec<Vec<f64>> = (&mut it).take(outputs).collect();
        values.push(snap);
    }
    let times = (0..n_snapshots).map(|i| t0 + i as f64 * dt).collect();
    SolutionField::from_parts(family, times, grid, dim, values, true_lambda, validated)
}

fn bad(key: &str) -> HarnessError {
    HarnessError::InvalidInput(format!("sidecar field {key} is unparsable"))
}
