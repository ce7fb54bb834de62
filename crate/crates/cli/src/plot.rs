//! SVG figures: AP versus SNR per (metric, channel) and the lossless CR
//! ablation. Each figure's plotted means are also written as CSV.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use semcom_core::channel::ChannelKind;
use semcom_core::evaluation::{mean_over_seeds, AblationRow, MaskMethod, MetricsRow};
use semcom_core::pipeline::Scheme;
use semcom_core::Error;

const PALETTE: [RGBColor; 5] = [RED, BLUE, GREEN, MAGENTA, BLACK];

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn draw_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn line_chart(path: &Path, title: &str, x_label: &str, log_x: bool, series: &[Series]) -> Result<(), Error> {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let (mut lo, mut hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if log_x {
        lo = lo.max(1e-6).log10();
        hi = hi.max(1e-6).log10();
    }
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let tx = |x: f64| if log_x { x.max(1e-6).log10() } else { x };

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(lo..hi, 0.0..1.0)
        .map_err(|e| draw_err(path, e))?;
    let x_desc = if log_x { format!("log10 {x_label}") } else { x_label.to_string() };
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc("AP")
        .draw()
        .map_err(|e| draw_err(path, e))?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s.points.iter().map(|&(x, y)| (tx(x), y)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| draw_err(path, e))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| draw_err(path, e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| draw_err(path, e))?;
    root.present().map_err(|e| draw_err(path, e))
}

fn snr_series(rows: &[MetricsRow], channel: ChannelKind, ap70: bool) -> Vec<Series> {
    let schemes: BTreeSet<Scheme> = rows.iter().filter(|r| r.channel == channel).map(|r| r.scheme).collect();
    let mut snrs: Vec<f64> = rows.iter().filter(|r| r.channel == channel).map(|r| r.snr_db).collect();
    snrs.sort_by(f64::total_cmp);
    snrs.dedup();
    schemes
        .into_iter()
        .map(|s| Series {
            label: s.name().to_string(),
            points: snrs
                .iter()
                .filter_map(|&snr| {
                    mean_over_seeds(rows, s, channel, snr, |r| if ap70 { r.ap70 } else { r.ap50 }).map(|v| (snr, v))
                })
                .collect(),
        })
        .collect()
}

fn ablation_series(rows: &[AblationRow], ap70: bool) -> Vec<Series> {
    [MaskMethod::Selector, MaskMethod::Random]
        .into_iter()
        .filter_map(|m| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.method == m).collect();
            let mut crs: Vec<f64> = mine.iter().map(|r| r.cr).collect();
            crs.sort_by(f64::total_cmp);
            crs.dedup();
            let points: Vec<(f64, f64)> = crs
                .iter()
                .map(|&cr| {
                    let v: Vec<f64> = mine
                        .iter()
                        .filter(|r| r.cr == cr)
                        .map(|r| if ap70 { r.ap70 } else { r.ap50 })
                        .collect();
                    (cr, v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect();
            let label = match m {
                MaskMethod::Selector => "selector",
                MaskMethod::Random => "random",
            };
            (!points.is_empty()).then(|| Series {
                label: format!("{label} AP{}", if ap70 { 70 } else { 50 }),
                points,
            })
        })
        .collect()
}

/// Renders every figure the results support; returns the written files.
pub fn render(rows: &[MetricsRow], ablation: &[AblationRow], dir: &Path) -> Result<Vec<PathBuf>, Error> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    let mut csv = String::from("figure,series,x,ap\n");
    let channels: BTreeSet<&str> = rows.iter().map(|r| r.channel.name()).collect();
    for ch in channels {
        let kind: ChannelKind = ch.parse().map_err(Error::Config)?;
        for ap70 in [false, true] {
            let metric = if ap70 { "ap70" } else { "ap50" };
            let name = format!("{metric}_vs_snr_{ch}");
            let series = snr_series(rows, kind, ap70);
            let path = dir.join(format!("{name}.svg"));
            let title = format!("{} vs SNR ({ch})", metric.to_uppercase());
            line_chart(&path, &title, "SNR (dB)", false, &series)?;
            for s in &series {
                for (x, y) in &s.points {
                    csv.push_str(&format!("{name},{},{x},{y}\n", s.label));
                }
            }
            written.push(path);
        }
    }
    if !ablation.is_empty() {
        let mut series = ablation_series(ablation, false);
        series.extend(ablation_series(ablation, true));
        let path = dir.join("ablation_cr.svg");
        line_chart(&path, "Lossless sharing vs compression ratio", "CR", true, &series)?;
        for s in &series {
            for (x, y) in &s.points {
                csv.push_str(&format!("ablation_cr,{},{x},{y}\n", s.label));
            }
        }
        written.push(path);
    }
    let csv_path = dir.join("plot_data.csv");
    std::fs::write(&csv_path, csv).map_err(io(&csv_path))?;
    written.push(csv_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scheme: Scheme, channel: ChannelKind, snr_db: f64, seed: u64, ap: f64) -> MetricsRow {
        MetricsRow {
            scheme,
            channel,
            snr_db,
            cr: 0.01,
            channel_uses: 100.0,
            ap50: ap,
            ap70: ap / 2.0,
            seed,
        }
    }

    #[test]
    fn renders_one_figure_per_metric_and_channel() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            row(Scheme::Scomcp, ChannelKind::Awgn, 0.0, 0, 0.4),
            row(Scheme::Scomcp, ChannelKind::Awgn, 0.0, 1, 0.6),
            row(Scheme::Scomcp, ChannelKind::Awgn, 10.0, 0, 0.8),
            row(Scheme::EgoOnly, ChannelKind::Rayleigh, 0.0, 0, 0.3),
        ];
        let abl = vec![AblationRow {
            method: MaskMethod::Selector,
            cr: 0.01,
            cells: 20,
            ap50: 0.5,
            ap70: 0.2,
            seed: 0,
        }];
        let files = render(&rows, &abl, dir.path()).unwrap();
        assert_eq!(files.len(), 4 + 1 + 1);
        let svg = std::fs::read_to_string(dir.path().join("ap50_vs_snr_awgn.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
        let csv = std::fs::read_to_string(dir.path().join("plot_data.csv")).unwrap();
        // Seed mean at 0 dB.
        assert!(csv.contains("ap50_vs_snr_awgn,scomcp,0,0.5"));
    }
}
