//! Plain-file exports of the training diagnostics: sparsity heatmaps (text
//! grid plus P2 graymap), correlation histograms and the per-epoch time
//! series.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! parsing a file reproduces the recorded values exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regularizers::CorrelationMatrix;
use crate::sparsity::SparsityHeatmap;
use crate::training::History;

/// Bins at −1.00, −0.99, …, 1.00.
pub const HISTOGRAM_BINS: usize = 201;
/// Entries this far outside `[−1, 1]` are clamped rather than rejected.
pub const CLAMP_TOLERANCE: f64 = 1e-6;
const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Per-epoch counts of rounded strict-lower-triangle correlations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub layer_id: String,
    pub epochs: Vec<i64>,
    /// One `HISTOGRAM_BINS`-long count array per entry of `epochs`.
    pub counts: Vec<Vec<u64>>,
}

impl CorrelationHistogram {
    pub fn new(layer_id: impl Into<String>) -> Self {
        Self {
            layer_id: layer_id.into(),
            epochs: Vec::new(),
            counts: Vec::new(),
        }
    }

    /// Value represented by bin `i`.
    pub fn bin_value(i: usize) -> f64 {
        (i as f64 - 100.0) / 100.0
    }

    pub fn counts_for(&self, epoch: i64) -> Option<&[u64]> {
        let i = self.epochs.iter().position(|&e| e == epoch)?;
        Some(&self.counts[i])
    }

    /// Bins the strict lower triangle of `corr` as a new epoch row.
    pub fn update(&mut self, epoch: i64, corr: &CorrelationMatrix) -> Result<()> {
        let row = histogram_row(corr.size, &corr.matrix)?;
        self.epochs.push(epoch);
        self.counts.push(row);
        Ok(())
    }
}

/// Counts for a row-major `d×d` matrix.
pub fn histogram_row(d: usize, matrix: &[f64]) -> Result<Vec<u64>> {
    if matrix.len() != d * d {
        return Err(Error::invalid(format!(
            "{} entries do not form a {d}×{d} matrix",
            matrix.len()
        )));
    }
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for i in 1..d {
        for j in 0..i {
            let c = matrix[i * d + j];
            if (c - matrix[j * d + i]).abs() > SYMMETRY_TOLERANCE {
                return Err(Error::invalid(format!(
                    "correlation matrix is not symmetric at ({i}, {j})"
                )));
            }
            counts[bin_index(c)?] += 1;
        }
    }
    Ok(counts)
}

/// Bin of `c` rounded half away from zero to two decimals.
pub fn bin_index(c: f64) -> Result<usize> {
    if !(c.abs() <= 1.0 + CLAMP_TOLERANCE) {
        return Err(Error::invalid(format!(
            "correlation {c} lies outside [-1, 1] beyond tolerance"
        )));
    }
    let a = c.abs().min(1.0);
    Ok(if c < 0.0 {
        100 - hundredths(a)
    } else {
        100 + hundredths(a)
    })
}

/// `round(a·100)` with ties away from zero, decided on the exact product
/// (each fused multiply-add below rounds only once, so its sign is exact).
fn hundredths(a: f64) -> usize {
    let mut m = (a * 100.0).floor();
    if a.mul_add(100.0, -m) < 0.0 {
        m -= 1.0;
    } else if a.mul_add(100.0, -(m + 1.0)) >= 0.0 {
        m += 1.0;
    }
    let up = a.mul_add(100.0, -(m + 0.5)) >= 0.0;
    m as usize + usize::from(up)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Files written for one heatmap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeatmapFiles {
    pub text: PathBuf,
    pub image: PathBuf,
}

pub fn heatmap_stem(layer_id: &str, epoch: i64) -> String {
    format!("layer_{layer_id}_epoch_{epoch}")
}

/// Gray level for an entropy, mapping `[0, ln D]` linearly onto `[0, 255]`.
pub fn gray_level(entropy: f64, channels: usize) -> u8 {
    let max = (channels as f64).ln();
    (entropy / max * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes `<stem>.txt` (one row of space-separated entropies per grid row)
/// and `<stem>.pgm` (P2 graymap, maxval 255).
pub fn export_heatmap(h: &SparsityHeatmap, dir: &Path) -> Result<HeatmapFiles> {
    let rows = h.grid.len();
    let cols = h.grid.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || h.grid.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("heatmap grid must be a non-empty rectangle"));
    }
    create_dir(dir)?;
    let stem = heatmap_stem(&h.layer_id, h.epoch);
    let mut text = String::new();
    let mut pgm = format!("P2\n{cols} {rows}\n255\n");
    for row in &h.grid {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
        let px: Vec<String> = row
            .iter()
            .map(|&v| gray_level(v, h.channels).to_string())
            .collect();
        pgm.push_str(&px.join(" "));
        pgm.push('\n');
    }
    Ok(HeatmapFiles {
        text: write(dir.join(format!("{stem}.txt")), &text)?,
        image: write(dir.join(format!("{stem}.pgm")), &pgm)?,
    })
}

fn parse_f64(path: &Path, offset: usize, s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: format!("`{s}` is not a number"),
    })
}

/// Reads a heatmap text grid back.
pub fn read_heatmap_text(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0;
    let mut grid = Vec::new();
    for line in text.lines() {
        let row = line
            .split_whitespace()
            .map(|cell| parse_f64(path, offset, cell))
            .collect::<Result<Vec<_>>>()?;
        grid.push(row);
        offset += line.len() + 1;
    }
    Ok(grid)
}

/// P2 graymap as `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        detail: detail.to_string(),
    };
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut number = || -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("malformed header or pixel"))
    };
    let (w, h, max) = (number()?, number()?, number()?);
    if max != 255 {
        return Err(bad("maxval must be 255"));
    }
    let px = (0..w * h)
        .map(|_| number().map(|v| v.min(255) as u8))
        .collect::<Result<Vec<_>>>()?;
    Ok((w, h, px))
}

pub const TIMESERIES_FILE: &str = "timeseries.csv";

/// Writes `timeseries.csv`: `epoch`, one mean-entropy column per monitored
/// layer, `train_loss`, `val_loss`, `val_accuracy`.
pub fn export_timeseries(history: &History, dir: &Path) -> Result<PathBuf> {
    if history.epochs.is_empty() {
        return Err(Error::invalid("time series needs at least one epoch"));
    }
    create_dir(dir)?;
    let mut out = String::from("epoch");
    for layer in &history.layers {
        let _ = write!(out, ",entropy_{layer}");
    }
    out.push_str(",train_loss,val_loss,val_accuracy\n");
    for r in &history.epochs {
        let _ = write!(out, "{}", r.epoch);
        for h in &r.mean_entropy {
            let _ = write!(out, ",{h}");
        }
        let _ = writeln!(out, ",{},{},{}", r.train_loss, r.val_loss, r.val_accuracy);
    }
    write(dir.join(TIMESERIES_FILE), &out)
}

/// Writes `correlation_<layer>.csv` per histogram: `epoch` then one column
/// per bin labelled with its two-decimal value.
pub fn export_histograms(history: &History, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    history
        .histograms
        .iter()
        .map(|hist| {
            let mut out = String::from("epoch");
            for i in 0..HISTOGRAM_BINS {
                let _ = write!(out, ",{:.2}", CorrelationHistogram::bin_value(i));
            }
            out.push('\n');
            for (epoch, counts) in hist.epochs.iter().zip(&hist.counts) {
                let _ = write!(out, "{epoch}");
                for c in counts {
                    let _ = write!(out, ",{c}");
                }
                out.push('\n');
            }
            write(dir.join(format!("correlation_{}.csv", hist.layer_id)), &out)
        })
        .collect()
}

pub const HISTORY_FILE: &str = "history.json";

pub fn export_history_json(history: &History, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let json = serde_json::to_string_pretty(history)
        .map_err(|e| Error::invalid(format!("serializing history: {e}")))?;
    write(dir.join(HISTORY_FILE), &(json + "\n"))
}

/// Writes every diagnostic of a run and returns the paths in write order.
pub fn export_all(history: &History, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = vec![export_timeseries(history, dir)?];
    paths.extend(export_histograms(history, dir)?);
    let heat_dir = dir.join("heatmaps");
    for h in &history.heatmaps {
        let f = export_heatmap(h, &heat_dir)?;
        paths.push(f.text);
        paths.push(f.image);
    }
    paths.push(export_history_json(history, dir)?);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heatmap(value: f64, channels: usize) -> SparsityHeatmap {
        SparsityHeatmap {
            layer_id: "conv3".into(),
            epoch: 4,
            channels,
            grid: vec![vec![value; 3]; 2],
        }
    }

    #[test]
    fn heatmap_range_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_heatmap(&heatmap(16f64.ln(), 16), dir.path()).unwrap();
        assert!(files.image.ends_with("layer_conv3_epoch_4.pgm"));
        let (w, h, px) = read_pgm(&files.image).unwrap();
        assert_eq!((w, h), (3, 2));
        assert!(px.iter().all(|&p| p == 255));
        let files = export_heatmap(&heatmap(0.0, 16), dir.path()).unwrap();
        assert!(read_pgm(&files.image).unwrap().2.iter().all(|&p| p == 0));
    }

    #[test]
    fn heatmap_text_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut h = heatmap(0.0, 8);
        h.grid = vec![
            vec![0.1, 1.0 / 3.0, 2.0794415416798357],
            vec![1e-17, 0.5, 1.25],
        ];
        let files = export_heatmap(&h, dir.path()).unwrap();
        assert_eq!(read_heatmap_text(&files.text).unwrap(), h.grid);
    }

    #[test]
    fn gray_levels_are_monotone() {
        let mut last = 0;
        for i in 0..=1000 {
            let g = gray_level(i as f64 / 1000.0 * 10f64.ln(), 10);
            assert!(g >= last);
            last = g;
        }
        assert_eq!(last, 255);
    }

    #[test]
    fn bins_round_half_away_from_zero() {
        assert_eq!(bin_index(1.0).unwrap(), 200);
        assert_eq!(bin_index(-1.0).unwrap(), 0);
        assert_eq!(bin_index(0.0).unwrap(), 100);
        assert_eq!(bin_index(-0.0).unwrap(), 100);
        // exactly representable ties
        assert_eq!(bin_index(0.125).unwrap(), 113);
        assert_eq!(bin_index(-0.125).unwrap(), 87);
        assert_eq!(bin_index(0.375).unwrap(), 138);
        // 0.285 is stored just below the tie and rounds down
        assert_eq!(bin_index(0.285).unwrap(), 128);
        assert_eq!(bin_index(0.28500000000000003).unwrap(), 129);
        assert_eq!(bin_index(1.0 + 5e-7).unwrap(), 200);
        assert_eq!(bin_index(-1.0 - 5e-7).unwrap(), 0);
        assert!(bin_index(1.0 + 2e-6).is_err());
        assert!(bin_index(f64::NAN).is_err());
    }

    #[test]
    fn small_matrices() {
        let row = histogram_row(2, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(row[200], 1);
        assert_eq!(row.iter().sum::<u64>(), 1);
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let row = histogram_row(3, &eye).unwrap();
        assert_eq!(row[100], 3);
        assert!(histogram_row(2, &[1.0, 0.5, 0.4, 1.0]).is_err());
    }
}
