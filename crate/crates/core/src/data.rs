//! Regression datasets and evaluation grids on the unit circle.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{streams, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    Sphere { radius: f64 },
    Freeform,
}

/// Training inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub geometry: Geometry,
}

/// `f(x, y) = 4xy² − 0.8x³ + 1.2y² − 0.8x²y`.
pub fn target_polynomial(x: f64, y: f64) -> f64 {
    4.0 * x * y * y - 0.8 * x * x * x + 1.2 * y * y - 0.8 * x * x * y
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), got: targets.len() });
        }
        let dim = inputs.first().map_or(0, Vec::len);
        if let Some(bad) = inputs.iter().find(|x| x.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: bad.len() });
        }
        let out = targets.first().map_or(0, Vec::len);
        if let Some(bad) = targets.iter().find(|y| y.len() != out) {
            return Err(Error::DimensionMismatch { expected: out, got: bad.len() });
        }
        Ok(Dataset { inputs, targets, geometry: Geometry::Freeform })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn output_dim(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    /// Inputs as a `d × n_0` matrix.
    pub fn input_matrix(&self) -> Result<Matrix> {
        Matrix::from_rows(&self.inputs)
    }

    /// Targets as a `d × n_L` matrix.
    pub fn target_matrix(&self) -> Result<Matrix> {
        Matrix::from_rows(&self.targets)
    }

    /// Targets stacked point-major into one vector.
    pub fn target_vector(&self) -> Vec<f64> {
        self.targets.iter().flatten().copied().collect()
    }

    /// Reads a CSV whose last `outputs` columns are targets; a header row is required.
    pub fn from_csv(path: &Path, outputs: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Io(e.to_string()))?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Parse { input: s.into(), reason: "not a number".into() }))
                .collect::<Result<_>>()?;
            if vals.len() <= outputs {
                return Err(Error::DimensionMismatch { expected: outputs + 1, got: vals.len() });
            }
            let split = vals.len() - outputs;
            inputs.push(vals[..split].to_vec());
            targets.push(vals[split..].to_vec());
        }
        Dataset::new(inputs, targets)
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
        let mut header: Vec<String> = (0..self.input_dim()).map(|i| format!("x{i}")).collect();
        header.extend((0..self.output_dim()).map(|i| format!("y{i}")));
        w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let row: Vec<String> = x.iter().chain(y).map(|v| format!("{v:.17e}")).collect();
            w.write_record(&row).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `count` points at seeded uniform angles on the unit circle, labelled by
/// [`target_polynomial`].
pub fn make_sphere_dataset(count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one point".into()));
    }
    let mut s = Stream::new(seed, streams::DATASET);
    let angles: Vec<f64> = (0..count).map(|_| TAU * s.next_uniform()).collect();
    Ok(sphere_dataset_from_angles(&angles))
}

/// Unit-circle dataset at the given angles.
pub fn sphere_dataset_from_angles(angles: &[f64]) -> Dataset {
    let inputs: Vec<Vec<f64>> = angles.iter().map(|&t| vec![t.cos(), t.sin()]).collect();
    let targets = inputs.iter().map(|p| vec![target_polynomial(p[0], p[1])]).collect();
    Dataset { inputs, targets, geometry: Geometry::Sphere { radius: 1.0 } }
}

/// `n` offsets `Δα_k = −π + 2πk/n`; even `n` includes `Δα = 0`.
pub fn angle_offsets(n: usize) -> Vec<f64> {
    (0..n).map(|k| -PI + TAU * k as f64 / n as f64).collect()
}

/// `n` angles `2πk/n` on `[0, 2π)`.
pub fn circle_angles(n: usize) -> Vec<f64> {
    (0..n).map(|k| TAU * k as f64 / n as f64).collect()
}

pub fn circle_points(angles: &[f64]) -> Vec<Vec<f64>> {
    angles.iter().map(|&t| vec![t.cos(), t.sin()]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_values() {
        assert!((target_polynomial(1.0, 0.0) + 0.8).abs() < 1e-15);
        assert!((target_polynomial(0.0, 1.0) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn sphere_dataset_is_on_circle_and_seeded() {
        let d = make_sphere_dataset(15, 7).unwrap();
        assert_eq!(d.len(), 15);
        for x in &d.inputs {
            assert!(((x[0] * x[0] + x[1] * x[1]).sqrt() - 1.0).abs() < 1e-12);
        }
        assert_eq!(d, make_sphere_dataset(15, 7).unwrap());
        assert_ne!(d, make_sphere_dataset(15, 8).unwrap());
    }

    #[test]
    fn grids() {
        let g = angle_offsets(128);
        assert_eq!(g[64], 0.0);
        assert_eq!(g[0], -PI);
        assert_eq!(circle_angles(4)[2], PI);
    }

    #[test]
    fn csv_round_trip() {
        let d = make_sphere_dataset(5, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        d.to_csv(&p).unwrap();
        let back = Dataset::from_csv(&p, 1).unwrap();
        assert_eq!(back.inputs, d.inputs);
        assert_eq!(back.targets, d.targets);
    }
}
