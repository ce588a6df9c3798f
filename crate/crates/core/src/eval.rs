//! Per-sample quality metrics, their CSV and table forms, and preview grids.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::SplitData;
use crate::error::Result;
use crate::io::save_pgm;
use crate::model::FsRwkvModel;
use crate::objectives::{psnr, rmse, ssim};
use crate::tensor::Tensor;

pub const VERSION: &str = concat!("fsrwkv ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<SampleMetrics>,
    pub config_hash: u64,
    pub seed: u64,
    pub version: String,
}

impl MetricsReport {
    fn mean(&self, f: impl Fn(&SampleMetrics) -> f64) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|r| r.psnr_db)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|r| r.ssim)
    }

    pub fn mean_rmse(&self) -> f64 {
        self.mean(|r| r.rmse)
    }

    /// `sample_id,psnr_db,ssim,rmse` rows followed by a `mean` row. Values are
    /// printed in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,psnr_db,ssim,rmse\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.id, r.psnr_db, r.ssim, r.rmse);
        }
        let _ = writeln!(s, "mean,{},{},{}", self.mean_psnr(), self.mean_ssim(), self.mean_rmse());
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} | config {:016x} | seed {} | {} samples",
            self.version,
            self.config_hash,
            self.seed,
            self.rows.len()
        );
        let _ = writeln!(s, "{:>8}  {:>9}  {:>7}  {:>8}", "sample", "PSNR(dB)", "SSIM", "RMSE");
        for r in &self.rows {
            let _ = writeln!(s, "{:>8}  {:>9.3}  {:>7.4}  {:>8.5}", r.id, r.psnr_db, r.ssim, r.rmse);
        }
        let _ = writeln!(
            s,
            "{:>8}  {:>9.3}  {:>7.4}  {:>8.5}",
            "mean",
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_rmse()
        );
        s
    }
}

fn as_batch(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = x.dims3()?;
    x.clone().reshape(&[1, c, h, w])
}

pub fn sample_metrics(id: usize, pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<SampleMetrics> {
    let (p, t) = (as_batch(pred)?, as_batch(target)?);
    Ok(SampleMetrics { id, psnr_db: psnr(&p, &t)?, ssim: ssim(&p, &t)?.0, rmse: rmse(&p, &t)? })
}

/// Model predictions for every input of `split`, each `[1, H, W]`.
pub fn predict_split(model: &FsRwkvModel<f32>, split: &SplitData) -> Result<Vec<Tensor<f32>>> {
    split
        .inputs
        .iter()
        .map(|x| {
            let y = model.predict(&as_batch(x)?)?;
            y.reshape(x.shape())
        })
        .collect()
}

pub fn report(preds: &[Tensor<f32>], split: &SplitData, config_hash: u64, seed: u64) -> Result<MetricsReport> {
    let rows = preds
        .iter()
        .zip(&split.targets)
        .enumerate()
        .map(|(i, (p, t))| sample_metrics(i, p, t))
        .collect::<Result<_>>()?;
    Ok(MetricsReport { rows, config_hash, seed, version: VERSION.to_string() })
}

pub fn evaluate(model: &FsRwkvModel<f32>, split: &SplitData) -> Result<MetricsReport> {
    let preds = predict_split(model, split)?;
    report(&preds, split, model.cfg.hash(), model.cfg.seed)
}

/// Metrics of the inputs themselves against the targets.
pub fn identity_baseline(split: &SplitData) -> Result<MetricsReport> {
    report(&split.inputs, split, 0, 0)
}

/// Writes `{i}_grid.pgm` with input, prediction and target side by side.
pub fn write_grids(dir: &Path, split: &SplitData, preds: &[Tensor<f32>]) -> Result<()> {
    for (i, ((x, p), t)) in split.inputs.iter().zip(preds).zip(&split.targets).enumerate() {
        let (_, h, w) = x.dims3()?;
        let grid = Tensor::from_fn(&[1, h, 3 * w], |k| {
            let (r, c) = (k / (3 * w), k % (3 * w));
            let src = [x, p, t][c / w];
            src.data()[r * w + c % w]
        });
        save_pgm(dir.join(format!("{i}_grid.pgm")), &grid)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{generate_split, DegradeSpec, Split};

    #[test]
    fn identity_model_reproduces_the_baseline() {
        let samples = generate_split(1, Split::Test, 3, 16, 16, &DegradeSpec::default()).unwrap();
        let split = SplitData::from_samples(&samples);
        let model = FsRwkvModel::<f32>::build(&ModelConfig::smoke()).unwrap();
        let r = evaluate(&model, &split).unwrap();
        let b = identity_baseline(&split).unwrap();
        assert_eq!(r.rows, b.rows);
        for (row, s) in r.rows.iter().zip(&samples) {
            assert_eq!(row.psnr_db, s.meta.psnr_db);
        }
    }

    #[test]
    fn means_are_row_averages() {
        let rows = vec![
            SampleMetrics { id: 0, psnr_db: 20.0, ssim: 0.5, rmse: 0.25 },
            SampleMetrics { id: 1, psnr_db: 31.0, ssim: 0.75, rmse: 0.125 },
        ];
        let r = MetricsReport { rows, config_hash: 1, seed: 2, version: VERSION.into() };
        assert!((r.mean_psnr() - 25.5).abs() < 1e-9);
        assert!((r.mean_ssim() - 0.625).abs() < 1e-9);
        assert!((r.mean_rmse() - 0.1875).abs() < 1e-9);
        let csv = r.to_csv();
        assert!(csv.starts_with("sample_id,psnr_db,ssim,rmse\n0,20,0.5,0.25\n"));
        assert!(csv.ends_with("mean,25.5,0.625,0.1875\n"));
        assert!(r.to_table().contains("25.500"));
    }

    #[test]
    fn grids_have_three_panels() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_split(2, Split::Test, 1, 8, 8, &DegradeSpec::default()).unwrap();
        let split = SplitData::from_samples(&samples);
        write_grids(dir.path(), &split, &split.targets).unwrap();
        let bytes = std::fs::read(dir.path().join("0_grid.pgm")).unwrap();
        assert!(bytes.starts_with(b"P5\n24 8\n255\n"));
        assert_eq!(bytes.len(), 12 + 24 * 8);
    }
}
