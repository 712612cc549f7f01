//! Grouped bar chart of a transfer report, drawn straight into pixels.
//!
//! One group per patch row, one bar per adapter column, bar height mAP/100.
//! White-box cells get a black cap. There is no text; `report.txt` carries
//! the labels and numbers.

use patchattack::eval::TransferReport;
use patchattack::image::Image;

const PLOT_HEIGHT: usize = 200;
const MARGIN: usize = 16;
const BAR: usize = 14;
const GAP: usize = 12;

const PALETTE: [[f64; 3]; 6] = [
    [0.26, 0.45, 0.70],
    [0.87, 0.52, 0.20],
    [0.35, 0.63, 0.33],
    [0.77, 0.27, 0.27],
    [0.55, 0.43, 0.70],
    [0.55, 0.55, 0.55],
];

fn fill(img: &mut Image, y0: usize, y1: usize, x0: usize, x1: usize, rgb: [f64; 3]) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            for (c, v) in rgb.iter().enumerate() {
                img.set(y, x, c, *v);
            }
        }
    }
}

pub fn bar_chart(report: &TransferReport) -> Image {
    let ncol = report.columns.len().max(1);
    let group = ncol * BAR + GAP;
    let width = 2 * MARGIN + report.rows.len().max(1) * group;
    let height = PLOT_HEIGHT + 2 * MARGIN;
    let mut img = Image::filled(height, width, 1.0);
    let base = MARGIN + PLOT_HEIGHT;

    for q in 0..=4 {
        let y = base - q * PLOT_HEIGHT / 4;
        fill(&mut img, y, y + 1, MARGIN, width - MARGIN, [0.85; 3]);
    }
    for (r, row) in report.rows.iter().enumerate() {
        let x0 = MARGIN + GAP / 2 + r * group;
        for (c, (&map, name)) in row.cells.iter().zip(&report.columns).enumerate() {
            let h = ((map.clamp(0.0, 100.0) / 100.0) * PLOT_HEIGHT as f64).round() as usize;
            let x = x0 + c * BAR;
            fill(&mut img, base - h, base, x + 1, x + BAR - 1, PALETTE[c % PALETTE.len()]);
            if row.is_white_box(name) {
                let top = base - h;
                fill(&mut img, top.saturating_sub(3), top, x + 1, x + BAR - 1, [0.0; 3]);
            }
        }
    }
    fill(&mut img, base, base + 1, MARGIN, width - MARGIN, [0.0; 3]);
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use patchattack::eval::ReportRow;

    #[test]
    fn bar_heights_follow_map() {
        let report = TransferReport {
            dataset: "d".into(),
            iou_thr: 0.5,
            columns: vec!["a".into(), "b".into()],
            rows: vec![ReportRow {
                patch_id: "p".into(),
                is_control: false,
                white_box: Some("a".into()),
                cells: vec![100.0, 50.0],
                black_box_avg: Some(50.0),
            }],
        };
        let img = bar_chart(&report);
        let base = MARGIN + PLOT_HEIGHT;
        let xa = MARGIN + GAP / 2 + BAR / 2;
        let xb = xa + BAR;
        // Column b is half as tall as column a.
        assert!(img.get(base - PLOT_HEIGHT / 2 + 1, xb, 2) < 0.5);
        assert_eq!(img.get(base - PLOT_HEIGHT / 2 - 2, xb, 0), 1.0);
        assert!(img.get(base - PLOT_HEIGHT + 1, xa, 0) < 0.5);
        // White-box cap above column a.
        assert_eq!(img.get(base - PLOT_HEIGHT - 1, xa, 1), 0.0);
    }
}
