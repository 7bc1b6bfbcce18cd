//! Attention-map export: one CSV per attention block holding the two
//! softmax maps side by side, `u` rows by `2u` columns.
//!
//! The header row is `n1_0,...,n1_{u-1},n2_0,...,n2_{u-1}`; row `i` holds
//! row `i` of N1 followed by row `i` of N2, so each half of every row sums
//! to one.

use crate::config::default_out_dir;
use crate::error::{CliError, Result};
use crate::{create_dir, write_file, ExportArgs};
use mtmm_core::checkpoint;
use mtmm_core::data::load_dataset;
use mtmm_core::model::infer;
use mtmm_core::tensor::Tensor;
use mtmm_core::training::check_dims;
use std::fmt::Write as _;
use std::path::PathBuf;

pub fn attention_csv(n1: &Tensor, n2: &Tensor) -> String {
    let u = n1.rows();
    let mut s = String::new();
    let header: Vec<String> = (0..n1.cols())
        .map(|j| format!("n1_{j}"))
        .chain((0..n2.cols()).map(|j| format!("n2_{j}")))
        .collect();
    let _ = writeln!(s, "{}", header.join(","));
    for i in 0..u {
        let row: Vec<String> = n1
            .row(i)
            .iter()
            .chain(n2.row(i))
            .map(|v| v.to_string())
            .collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

const CELL: usize = 24;
const GAP: usize = 24;
const TOP: usize = 36;
const LEFT: usize = 12;

fn shade(v: f64) -> String {
    // white at 0, dark blue at 1
    let v = v.clamp(0.0, 1.0);
    let mix = |lo: f64| (255.0 - (255.0 - lo) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(8.0), mix(48.0), mix(107.0))
}

/// Two heatmaps, N1 on the left and N2 on the right.
pub fn attention_svg(label: &str, n1: &Tensor, n2: &Tensor) -> String {
    let u = n1.rows();
    let block = u * CELL;
    let width = 2 * LEFT + 2 * block + GAP;
    let height = TOP + block + LEFT;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    for (k, (name, m)) in [("N1", n1), ("N2", n2)].into_iter().enumerate() {
        let x0 = LEFT + k * (block + GAP);
        let _ = writeln!(
            s,
            r#"<text x="{x0}" y="{}">{label} {name}</text>"#,
            TOP - 12
        );
        for i in 0..u {
            for j in 0..m.cols() {
                let v = m.get(i, j);
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"><title>{v}</title></rect>"#,
                    x0 + j * CELL,
                    TOP + i * CELL,
                    shade(v)
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn cmd_export_attention(a: &ExportArgs) -> Result<()> {
    let (params, model) = checkpoint::load(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    check_dims(&model, &ds)?;
    let video = ds
        .video(&a.video_id)
        .ok_or_else(|| CliError::Data(format!("unknown video id {:?}", a.video_id)))?;
    let out = infer(video, &params, &model)?;
    let dir = a
        .out
        .clone()
        .or_else(default_out_dir)
        .unwrap_or_else(|| PathBuf::from(crate::config::DEFAULT_OUT_DIR));

    create_dir(&dir)?;
    for (label, pair) in &out.attention {
        let csv = dir.join(format!("attention_{label}.csv"));
        write_file(&csv, attention_csv(&pair.n1, &pair.n2))?;
        println!("{}", csv.display());
        if a.svg {
            let svg = dir.join(format!("attention_{label}.svg"));
            write_file(&svg, attention_svg(label, &pair.n1, &pair.n2))?;
            println!("{}", svg.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let n1 = Tensor::from_rows(&[vec![0.25, 0.75], vec![1.0, 0.0]]).unwrap();
        let n2 = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
        assert_eq!(
            attention_csv(&n1, &n2),
            "n1_0,n1_1,n2_0,n2_1\n0.25,0.75,0.5,0.5\n1,0,0.1,0.9\n"
        );
    }

    #[test]
    fn svg_has_one_cell_per_entry() {
        let n = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        let svg = attention_svg("TV", &n, &n);
        assert_eq!(svg.matches("<rect x=").count(), 8);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(shade(0.0), "#ffffff");
        assert_eq!(shade(1.0), "#08306b");
    }
}
