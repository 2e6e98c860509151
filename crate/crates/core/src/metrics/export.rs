use std::fmt::Write as _;

use super::{ConfusionMatrix, Metrics, SweepTable};
use crate::train::TrainLog;

/// Grid with a `true\pred` header row; counts, or row fractions when
/// `normalized`.
pub fn confusion_csv(cm: &ConfusionMatrix, normalized: bool) -> String {
    let mut out = String::from("true\\pred");
    for j in 0..cm.classes {
        let _ = write!(out, ",{j}");
    }
    out.push('\n');
    let fractions = cm.row_normalized();
    for k in 0..cm.classes {
        let _ = write!(out, "{k}");
        for j in 0..cm.classes {
            if normalized {
                let _ = write!(out, ",{:.6}", fractions[k][j]);
            } else {
                let _ = write!(out, ",{}", cm.get(k, j));
            }
        }
        out.push('\n');
    }
    out
}

/// One row per model: name, accuracy, recall, precision, f1 (macro averaged).
pub fn metrics_csv(rows: &[(String, Metrics)]) -> String {
    let mut out = String::from("# recall, precision and f1 are macro averages over classes\nmodel,accuracy,recall,precision,f1\n");
    for (name, m) in rows {
        let _ = writeln!(out, "{name},{},{},{},{}", m.accuracy, m.recall, m.precision, m.f1);
    }
    out
}

/// Models as rows, noise levels (percent) as columns, accuracy in percent.
pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out = String::from("model");
    for level in &table.levels {
        let _ = write!(out, ",noise_{}pct", level * 100.0);
    }
    out.push('\n');
    for (kind, row) in table.models.iter().zip(&table.accuracy) {
        let _ = write!(out, "{kind}");
        for acc in row {
            let _ = write!(out, ",{:.2}", acc * 100.0);
        }
        out.push('\n');
    }
    out
}

const CELL: usize = 36;
const MARGIN: usize = 40;

/// Row-normalized heatmap with the count printed in every cell.
pub fn confusion_svg(cm: &ConfusionMatrix) -> String {
    let size = MARGIN + cm.classes * CELL + 10;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let fractions = cm.row_normalized();
    for k in 0..cm.classes {
        let y = MARGIN + k * CELL;
        let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{k}</text>", MARGIN - 6, y + CELL / 2 + 4);
        let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{k}</text>", y + CELL / 2, MARGIN - 8);
        for j in 0..cm.classes {
            let x = MARGIN + j * CELL;
            let f = fractions[k][j];
            let shade = (255.0 * (1.0 - f)).round() as u8;
            let ink = if f > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                out,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#ccc\"/>\
                 <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{ink}\">{}</text>",
                x + CELL / 2,
                y + CELL / 2 + 4,
                cm.get(k, j)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Loss and accuracy curves over epochs, each scaled to its own range.
pub fn curves_svg(log: &[TrainLog]) -> String {
    let (w, h) = (640.0, 360.0);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect x=\"40\" y=\"20\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>\n",
        w - 60.0,
        h - 60.0
    );
    let series: [(&str, &str, Vec<f64>); 3] = [
        ("loss", "#d62728", log.iter().map(|r| r.loss).collect()),
        ("train_acc", "#1f77b4", log.iter().map(|r| r.train_acc).collect()),
        ("test_acc", "#2ca02c", log.iter().map(|r| r.test_acc).collect()),
    ];
    let n = log.len().max(2) - 1;
    for (i, (name, colour, ys)) in series.iter().enumerate() {
        let (lo, hi) = if *name == "loss" {
            (0.0, ys.iter().cloned().fold(1e-12, f64::max))
        } else {
            (0.0, 1.0)
        };
        let points: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(e, y)| {
                let px = 40.0 + (w - 60.0) * e as f64 / n as f64;
                let py = 20.0 + (h - 60.0) * (1.0 - (y - lo) / (hi - lo));
                format!("{px:.1},{py:.1}")
            })
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\
             <text x=\"{}\" y=\"{}\" fill=\"{colour}\">{name}</text>",
            points.join(" "),
            50 + 90 * i,
            h - 15.0
        );
    }
    out.push_str("</svg>\n");
    out
}
