//! Interaction-matrix extraction and export.
//!
//! For each TwistBlock and direction, the per-pair mean of `|phi|` over
//! spatial positions fills a symmetric `C_r x C_r` matrix; its scalar mean
//! over the P interaction channels is `mu`. The strongest-responding
//! direction is the argmax of `mu`. The `|phi|`-mean convention is recorded
//! in the export metadata (normalized products are signed, so the magnitude
//! is averaged).

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::arch::{ForwardOpts, Network};
use crate::data::write_pgm;
use crate::error::{Error, Result};
use crate::ops::upper_tri_indices;
use crate::stci::head_theta;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Per-head summary within one block.
#[derive(Clone, Debug, Serialize)]
pub struct HeadReport {
    pub theta_deg: f64,
    /// Mean of `|phi|` over interaction channels and positions.
    pub mu: f64,
    /// Symmetric `C_r x C_r` matrix, row-major.
    pub matrix: Vec<f64>,
}

/// Per-TwistBlock summary.
#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub stage: usize,
    pub block: usize,
    pub gate: f64,
    pub heads: Vec<HeadReport>,
    pub argmax_theta_deg: f64,
}

/// Interaction summary for one image.
#[derive(Clone, Debug, Serialize)]
pub struct InteractionReport {
    pub reduced_channels: usize,
    pub mu_statistic: String,
    pub blocks: Vec<BlockReport>,
    /// Mean `mu` per direction across blocks, in head order.
    pub aggregate_mu: Vec<f64>,
    pub aggregate_theta_deg: Vec<f64>,
    /// Direction whose aggregate `mu` is largest.
    pub argmax_theta_deg: f64,
}

/// Builds the symmetric matrix and `mu` from one head's `phi` tensor
/// (`[1, P, H, W]`).
fn summarize_phi(phi: &Tensor<f32>, c_r: usize) -> (Vec<f64>, f64) {
    let shape = phi.shape();
    let (p_count, hw) = (shape[1], shape[2] * shape[3]);
    let (idx_i, idx_j) = upper_tri_indices(c_r);
    debug_assert_eq!(idx_i.len(), p_count);
    let data = phi.data();
    let mut matrix = vec![0.0f64; c_r * c_r];
    let mut mu = 0.0f64;
    for p in 0..p_count {
        let mut acc = 0.0f64;
        for q in 0..hw {
            acc += data[p * hw + q].abs() as f64;
        }
        let mean = acc / hw as f64;
        mu += mean;
        let (i, j) = (idx_i[p], idx_j[p]);
        matrix[i * c_r + j] = mean;
        matrix[j * c_r + i] = mean;
    }
    (matrix, mu / p_count as f64)
}

/// Runs an eval-mode forward pass on one image and summarizes every
/// TwistBlock's interaction channels.
pub fn extract_interactions(net: &Network<f32>, image: &Tensor<f32>) -> Result<InteractionReport> {
    let s = image.shape();
    let expect = net.spec.input_size;
    if s.len() != 4 || s[0] != 1 || s[1] != 3 || s[2] != expect || s[3] != expect {
        return Err(Error::Input(format!(
            "expected [1, 3, {expect}, {expect}] image, got {:?}",
            s
        )));
    }
    let tape = Tape::new();
    let mut captured = Vec::new();
    net.forward_with_capture(
        &tape,
        image,
        ForwardOpts {
            training: false,
            zero_interactions: false,
        },
        Some(&mut captured),
    )?;

    let c_r = net.spec.stci.reduced;
    let heads = net.spec.stci.heads;
    let mut blocks = Vec::with_capacity(captured.len());
    let mut aggregate = vec![0.0f64; heads];
    for cap in &captured {
        let mut head_reports = Vec::with_capacity(cap.phis.len());
        for (k, phi) in cap.phis.iter().enumerate() {
            let (matrix, mu) = summarize_phi(phi, c_r);
            aggregate[k] += mu;
            head_reports.push(HeadReport {
                theta_deg: head_theta(k).to_degrees(),
                mu,
                matrix,
            });
        }
        let argmax = head_reports
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.mu.partial_cmp(&b.1.mu).expect("finite mu"))
            .map(|(k, _)| k)
            .unwrap_or(0);
        blocks.push(BlockReport {
            stage: cap.stage,
            block: cap.block,
            gate: cap.gate,
            argmax_theta_deg: head_theta(argmax).to_degrees(),
            heads: head_reports,
        });
    }
    if !blocks.is_empty() {
        for mu in aggregate.iter_mut() {
            *mu /= blocks.len() as f64;
        }
    }
    let argmax = aggregate
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite mu"))
        .map(|(k, _)| k)
        .unwrap_or(0);
    Ok(InteractionReport {
        reduced_channels: c_r,
        mu_statistic: "mean over interaction channels and positions of |phi|".into(),
        blocks,
        aggregate_mu: aggregate,
        aggregate_theta_deg: (0..heads).map(|k| head_theta(k).to_degrees()).collect(),
        argmax_theta_deg: head_theta(argmax).to_degrees(),
    })
}

/// Formats one value with six significant digits.
fn sig6(v: f64) -> String {
    format!("{v:.5e}")
}

/// Writes per-head CSV matrices, PGM heatmaps, and a JSON index.
///
/// Files: `block{stage}-{block}_head{deg}.csv` / `.pgm`, plus `index.json`.
pub fn export_report(report: &InteractionReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let c_r = report.reduced_channels;
    for block in &report.blocks {
        for head in &block.heads {
            let stem = format!(
                "block{}-{}_head{}",
                block.stage, block.block, head.theta_deg as i64
            );
            // CSV: C_r rows of comma-separated values, 6 significant digits.
            let mut csv = String::new();
            for row in 0..c_r {
                let cells: Vec<String> = (0..c_r)
                    .map(|col| sig6(head.matrix[row * c_r + col]))
                    .collect();
                csv.push_str(&cells.join(","));
                csv.push('\n');
            }
            fs::write(out_dir.join(format!("{stem}.csv")), csv)?;

            // PGM heatmap, min-max scaled; a constant matrix maps to 0.
            let min = head.matrix.iter().copied().fold(f64::INFINITY, f64::min);
            let max = head.matrix.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let scale = if max > min { 255.0 / (max - min) } else { 0.0 };
            let pixels: Vec<u8> = head
                .matrix
                .iter()
                .map(|&v| ((v - min) * scale).round().clamp(0.0, 255.0) as u8)
                .collect();
            write_pgm(&out_dir.join(format!("{stem}.pgm")), &pixels, c_r, c_r)?;
        }
    }
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("index encode: {e}")))?;
    fs::write(out_dir.join("index.json"), json)?;
    Ok(())
}

/// Parses a matrix CSV written by [`export_report`]; used by round-trip
/// checks and downstream tooling.
pub fn parse_matrix_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split(',')
                .map(|cell| {
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad csv cell '{cell}'")))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_network, preset};
    use crate::tensor::rng::Rng;

    fn micro_net() -> Network<f32> {
        let spec = preset("twistnet-micro", 8).unwrap();
        build_network(&spec, 21).unwrap()
    }

    #[test]
    fn zero_image_has_zero_mu_at_init() {
        let net = micro_net();
        let image = Tensor::<f32>::zeros(&[1, 3, 64, 64]);
        let report = extract_interactions(&net, &image).unwrap();
        assert_eq!(report.blocks.len(), 4);
        for block in &report.blocks {
            for head in &block.heads {
                assert_eq!(head.mu, 0.0, "stage {} head {}", block.stage, head.theta_deg);
            }
        }
    }

    #[test]
    fn mu_is_bounded_by_one_for_any_input() {
        let net = micro_net();
        let mut rng = Rng::new(3);
        let image: Tensor<f32> = rng.normal_tensor(&[1, 3, 64, 64], 0.5, 0.8);
        let report = extract_interactions(&net, &image).unwrap();
        for block in &report.blocks {
            for head in &block.heads {
                assert!(head.mu >= 0.0 && head.mu <= 1.0, "mu {}", head.mu);
            }
            assert!(block.gate > 0.0 && block.gate < 1.0);
        }
    }

    #[test]
    fn wrong_size_is_input_error() {
        let net = micro_net();
        let image = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        assert!(matches!(
            extract_interactions(&net, &image),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn reports_are_pure_functions_of_inputs() {
        let net = micro_net();
        let mut rng = Rng::new(4);
        let image: Tensor<f32> = rng.normal_tensor(&[1, 3, 64, 64], 0.5, 0.3);
        let a = extract_interactions(&net, &image).unwrap();
        let b = extract_interactions(&net, &image).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn symmetric_fill_roundtrips_upper_triangle() {
        let c_r = 4;
        let (idx_i, idx_j) = upper_tri_indices(c_r);
        let p = idx_i.len();
        let hw = 1;
        let values: Vec<f32> = (0..p).map(|v| v as f32 - 3.0).collect();
        let phi = Tensor::from_vec(&[1, p, 1, hw], values.clone()).unwrap();
        let (matrix, _) = summarize_phi(&phi, c_r);
        for (pos, (&i, &j)) in idx_i.iter().zip(&idx_j).enumerate() {
            assert_eq!(matrix[i * c_r + j], values[pos].abs() as f64);
            assert_eq!(matrix[j * c_r + i], values[pos].abs() as f64);
        }
    }

    #[test]
    fn export_writes_expected_files_and_roundtrips() {
        let net = micro_net();
        let mut rng = Rng::new(5);
        let image: Tensor<f32> = rng.normal_tensor(&[1, 3, 64, 64], 0.5, 0.3);
        let report = extract_interactions(&net, &image).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_report(&report, dir.path()).unwrap();

        // 4 TwistBlocks x 4 heads: 16 CSVs, 16 PGMs, one index.
        let mut csvs = 0;
        let mut pgms = 0;
        for entry in fs::read_dir(dir.path()).unwrap() {
            let name = entry.unwrap().file_name().to_string_lossy().into_owned();
            if name.ends_with(".csv") {
                csvs += 1;
            }
            if name.ends_with(".pgm") {
                pgms += 1;
            }
        }
        assert_eq!(csvs, 16);
        assert_eq!(pgms, 16);
        assert!(dir.path().join("index.json").exists());

        // Round-trip one CSV and compare at 6 significant digits.
        let text = fs::read_to_string(dir.path().join("block3-0_head0.csv")).unwrap();
        let parsed = parse_matrix_csv(&text).unwrap();
        let original = &report.blocks[0].heads[0].matrix;
        assert_eq!(parsed.len(), 4);
        for (row_idx, row) in parsed.iter().enumerate() {
            for (col_idx, &value) in row.iter().enumerate() {
                let want = original[row_idx * 4 + col_idx];
                let scale = want.abs().max(1e-300);
                assert!(
                    ((value - want) / scale).abs() < 1e-5 || (value - want).abs() < 1e-12,
                    "({row_idx},{col_idx}): {value} vs {want}"
                );
            }
        }
    }

    #[test]
    fn constant_matrix_maps_to_black_heatmap() {
        let report = InteractionReport {
            reduced_channels: 2,
            mu_statistic: "test".into(),
            blocks: vec![BlockReport {
                stage: 3,
                block: 0,
                gate: 0.5,
                argmax_theta_deg: 0.0,
                heads: vec![HeadReport {
                    theta_deg: 0.0,
                    mu: 0.25,
                    matrix: vec![0.25; 4],
                }],
            }],
            aggregate_mu: vec![0.25],
            aggregate_theta_deg: vec![0.0],
            argmax_theta_deg: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        export_report(&report, dir.path()).unwrap();
        let img = crate::data::read_netpbm(&dir.path().join("block3-0_head0.pgm")).unwrap();
        assert!(img.bytes.iter().all(|&b| b == 0));
    }
}
