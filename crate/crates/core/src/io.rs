//! Dataset files: a JSON manifest plus one grid CSV and one observation CSV
//! per split. Floats are written in shortest round-trip form, so reading a
//! dataset back reproduces it bit for bit.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obs_path::ObservedPath;
use crate::synth::{sample_paths_range, GeneratorSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: GeneratorSpec,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GeneratorSpec,
    pub seed: u64,
    pub train: Vec<ObservedPath>,
    pub test: Vec<ObservedPath>,
}

impl Dataset {
    /// Train samples take indices `0..n_train`, test samples the following
    /// `n_test` indices, drawn under [`GeneratorSpec::test_variant`].
    pub fn generate(spec: &GeneratorSpec, seed: u64, n_train: usize, n_test: usize) -> Result<Self> {
        let train = sample_paths_range(spec, seed, 0..n_train)?;
        let test = sample_paths_range(&spec.test_variant(), seed, n_train..n_train + n_test)?;
        Ok(Dataset {
            spec: spec.clone(),
            seed,
            train,
            test,
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            n_train: self.train.len(),
            n_test: self.test.len(),
            dim: self.spec.dim(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        for (name, paths) in [("train", &self.train), ("test", &self.test)] {
            write_grid(&dir.join(format!("{name}_grid.csv")), paths)?;
            write_observations(&dir.join(format!("{name}_obs.csv")), paths)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(format_err(format!(
                "dataset format {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let horizon = manifest.spec.horizon;
        let d = manifest.dim;
        let split = |name: &str, n: usize| -> Result<Vec<ObservedPath>> {
            let grids = read_grid(&dir.join(format!("{name}_grid.csv")), d, n)?;
            let obs = read_observations(&dir.join(format!("{name}_obs.csv")), d, n)?;
            let paths: Vec<ObservedPath> = grids
                .into_iter()
                .zip(obs)
                .map(|((gt, gv), (ot, ov, m))| ObservedPath {
                    dim: d,
                    horizon,
                    grid_times: gt,
                    grid_values: gv,
                    obs_times: ot,
                    obs_values: ov,
                    masks: m,
                })
                .collect();
            for (i, p) in paths.iter().enumerate() {
                let r = p.validate();
                if !r.is_valid() {
                    return Err(Error::InvalidPath(format!("{name} sample {i}: {:?}", r.violations)));
                }
            }
            Ok(paths)
        };
        let train = split("train", manifest.n_train)?;
        let test = split("test", manifest.n_test)?;
        Ok(Dataset {
            spec: manifest.spec,
            seed: manifest.seed,
            train,
            test,
        })
    }
}

fn write_grid(file: &Path, paths: &[ObservedPath]) -> Result<()> {
    let mut w = csv::Writer::from_path(file)?;
    let d = paths.first().map_or(0, |p| p.dim);
    let mut header = vec!["sample".to_string(), "time".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (s, p) in paths.iter().enumerate() {
        for (i, t) in p.grid_times.iter().enumerate() {
            let mut rec = vec![s.to_string(), t.to_string()];
            rec.extend(p.grid_values.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_observations(file: &Path, paths: &[ObservedPath]) -> Result<()> {
    let mut w = csv::Writer::from_path(file)?;
    let d = paths.first().map_or(0, |p| p.dim);
    let mut header = vec!["sample".to_string(), "time".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.extend((0..d).map(|j| format!("m{j}")));
    w.write_record(&header)?;
    for (s, p) in paths.iter().enumerate() {
        for (k, t) in p.obs_times.iter().enumerate() {
            let mut rec = vec![s.to_string(), t.to_string()];
            rec.extend(p.obs_values.row(k).iter().map(f64::to_string));
            rec.extend(p.masks.row(k).iter().map(|&m| u8::from(m).to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rows grouped by the leading sample column, which must count up from 0.
fn read_rows(file: &Path, width: usize, n: usize) -> Result<Vec<Vec<Vec<String>>>> {
    let mut r = csv::Reader::from_path(file)?;
    let mut out: Vec<Vec<Vec<String>>> = vec![Vec::new(); n];
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != width {
            return Err(format_err(format!(
                "{}: row with {} fields (expected {width})",
                file.display(),
                rec.len()
            )));
        }
        let s: usize = parse(&rec[0], file)?;
        let slot = out
            .get_mut(s)
            .ok_or_else(|| format_err(format!("{}: sample {s} out of range", file.display())))?;
        slot.push(rec.iter().skip(1).map(str::to_owned).collect());
    }
    Ok(out)
}

fn format_err(msg: String) -> Error {
    Error::Format { kind: "dataset", msg }
}

fn parse<T: std::str::FromStr>(s: &str, file: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| format_err(format!("{}: cannot parse `{s}`", file.display())))
}

type Grid = (Vec<f64>, Array2<f64>);

fn read_grid(file: &Path, d: usize, n: usize) -> Result<Vec<Grid>> {
    read_rows(file, 2 + d, n)?
        .into_iter()
        .map(|rows| {
            let times = rows.iter().map(|r| parse(&r[0], file)).collect::<Result<Vec<f64>>>()?;
            let mut values = Array2::zeros((rows.len(), d));
            for (i, r) in rows.iter().enumerate() {
                for j in 0..d {
                    values[[i, j]] = parse(&r[1 + j], file)?;
                }
            }
            Ok((times, values))
        })
        .collect()
}

type Observations = (Vec<f64>, Array2<f64>, Array2<bool>);

fn read_observations(file: &Path, d: usize, n: usize) -> Result<Vec<Observations>> {
    read_rows(file, 2 + 2 * d, n)?
        .into_iter()
        .map(|rows| {
            let times = rows.iter().map(|r| parse(&r[0], file)).collect::<Result<Vec<f64>>>()?;
            let mut values = Array2::zeros((rows.len(), d));
            let mut masks = Array2::from_elem((rows.len(), d), false);
            for (k, r) in rows.iter().enumerate() {
                for j in 0..d {
                    values[[k, j]] = parse(&r[1 + j], file)?;
                    masks[[k, j]] = match r[1 + d + j].as_str() {
                        "0" => false,
                        "1" => true,
                        other => return Err(format_err(format!("{}: mask `{other}`", file.display()))),
                    };
                }
            }
            Ok((times, values, masks))
        })
        .collect()
}
