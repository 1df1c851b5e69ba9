use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{FactorModel, HyperParams, TrainTrace};
use crate::error::{Error, Result};

/// Labelled matrix CSV: a key column followed by `phenotype_<r>` columns.
pub fn write_matrix(path: &Path, key: &str, labels: &[String], m: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![key.to_string()];
    header.extend((0..m.ncols()).map(|r| format!("phenotype_{r}")));
    w.write_record(&header)?;
    for (label, row) in labels.iter().zip(m.rows()) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len().saturating_sub(1);
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        labels.push(rec.get(0).unwrap_or_default().to_string());
        for s in rec.iter().skip(1) {
            values.push(s.parse::<f64>().map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                line: n + 2,
                message: e.to_string(),
            })?);
        }
    }
    let m = Array2::from_shape_vec((labels.len(), cols), values).map_err(|e| Error::artifact(path, e.to_string()))?;
    Ok((labels, m))
}

/// Writes `A.csv`, `B.csv`, `C.csv`, `theta.csv` and `hyperparams.toml`
/// into `dir`.
pub fn save_model(model: &FactorModel, codes: &[String], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let patients: Vec<String> = (0..model.a.nrows()).map(|i| i.to_string()).collect();
    write_matrix(&dir.join("A.csv"), "patient_id", &patients, &model.a)?;
    write_matrix(&dir.join("B.csv"), "code", codes, &model.b)?;
    write_matrix(&dir.join("C.csv"), "code", codes, &model.c)?;
    let r = model.rank();
    let mut w = csv::Writer::from_path(dir.join("theta.csv"))?;
    w.write_record(["term", "value"])?;
    for q in 0..r {
        w.write_record([format!("phenotype_{q}"), model.theta[q].to_string()])?;
    }
    w.write_record(["intercept".to_string(), model.theta[r].to_string()])?;
    w.flush()?;
    let hyper = toml::to_string(&model.hyper).map_err(|e| Error::artifact(dir.join("hyperparams.toml"), e.to_string()))?;
    fs::write(dir.join("hyperparams.toml"), hyper)?;
    Ok(())
}

/// Reads a model directory written by [`save_model`]; returns the entity
/// codes alongside.
pub fn load_model(dir: &Path) -> Result<(Vec<String>, FactorModel)> {
    let (_, a) = read_matrix(&dir.join("A.csv"))?;
    let (codes, b) = read_matrix(&dir.join("B.csv"))?;
    let (codes_c, c) = read_matrix(&dir.join("C.csv"))?;
    if codes != codes_c {
        return Err(Error::artifact(dir, "B.csv and C.csv list different codes"));
    }
    let (_, theta) = read_matrix(&dir.join("theta.csv"))?;
    let theta = Array1::from_iter(theta.iter().copied());
    let hyper_path = dir.join("hyperparams.toml");
    let hyper: HyperParams = toml::from_str(&fs::read_to_string(&hyper_path)?)
        .map_err(|e| Error::artifact(&hyper_path, e.to_string()))?;
    let model = FactorModel { a, b, c, theta, hyper };
    model.check()?;
    Ok((codes, model))
}

pub fn save_trace(trace: &TrainTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in &trace.records {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}
