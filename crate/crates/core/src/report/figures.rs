//! Learning-curve and probe-accuracy figures.
//!
//! Each figure is written as SVG, PNG and the CSV it was drawn from. Text
//! needs a TrueType font; when none can be found the CSV is still written and
//! the images are skipped with a warning.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::coord::Shift;
use plotters::prelude::*;
use serde::Serialize;

use crate::probes::{ProbeResult, ProbeTask, Source};
use crate::store::write_atomic;
use crate::trainer::EpochRecord;

use super::{PipelineError, Result};

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

const SIZE: (u32, u32) = (800, 500);
const SERIES_COLORS: [RGBColor; 3] = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(127, 127, 127)];

/// Register a sans-serif font once; `DUALLEX_FONT` names an explicit file.
pub fn font_available() -> bool {
    static LOADED: OnceLock<bool> = OnceLock::new();
    *LOADED.get_or_init(|| {
        let explicit = std::env::var("DUALLEX_FONT").ok();
        let candidates = explicit.iter().map(String::as_str).chain(FONT_CANDIDATES.iter().copied());
        for path in candidates {
            if let Ok(bytes) = std::fs::read(path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable TrueType font found; figures will be written as CSV only (set DUALLEX_FONT)");
        false
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FigureSummary {
    pub name: String,
    pub series: Vec<String>,
    pub groups: Vec<String>,
    pub bars: usize,
    pub lines: usize,
    pub chance_lines: usize,
    pub files: Vec<PathBuf>,
    /// False when the images were skipped for lack of a font.
    pub rendered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub group: usize,
    pub series: usize,
    pub x0: f64,
    pub x1: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChanceLine {
    pub group: usize,
    pub x0: f64,
    pub x1: f64,
    pub level: f64,
}

/// Geometry of a grouped bar chart in data coordinates; group `g` spans
/// `[g, g + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarLayout {
    pub groups: Vec<String>,
    pub series: Vec<String>,
    pub bars: Vec<Bar>,
    pub chance: Vec<ChanceLine>,
}

impl BarLayout {
    /// Tasks in their canonical order, sources in dorsal/ventral/control
    /// order; only combinations present in `results` get a bar.
    pub fn from_results(results: &[ProbeResult]) -> BarLayout {
        let tasks: Vec<ProbeTask> = ProbeTask::ALL
            .into_iter()
            .filter(|t| results.iter().any(|r| r.task == t.name()))
            .collect();
        let sources: Vec<Source> = Source::ALL
            .into_iter()
            .filter(|s| results.iter().any(|r| r.source == s.name()))
            .collect();
        let width = 0.8 / sources.len().max(1) as f64;
        let mut bars = Vec::new();
        let mut chance = Vec::new();
        for (g, t) in tasks.iter().enumerate() {
            for (s, src) in sources.iter().enumerate() {
                if let Some(r) = results.iter().find(|r| r.task == t.name() && r.source == src.name()) {
                    let x0 = g as f64 + 0.1 + s as f64 * width;
                    bars.push(Bar {
                        group: g,
                        series: s,
                        x0,
                        x1: x0 + width,
                        value: r.accuracy,
                    });
                }
            }
            chance.push(ChanceLine {
                group: g,
                x0: g as f64 + 0.05,
                x1: g as f64 + 0.95,
                level: t.chance(),
            });
        }
        BarLayout {
            groups: tasks.iter().map(|t| t.name().to_string()).collect(),
            series: sources.iter().map(|s| s.name().to_string()).collect(),
            bars,
            chance,
        }
    }
}

fn draw_err<E: std::error::Error + Send + Sync>(e: DrawingAreaErrorKind<E>) -> String {
    e.to_string()
}

fn draw_bars<DB: DrawingBackend>(root: &DrawingArea<DB, Shift>, layout: &BarLayout, title: &str) -> std::result::Result<(), String>
where
    DB::ErrorType: 'static,
{
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0f64..layout.groups.len().max(1) as f64, 0f64..1f64)
        .map_err(draw_err)?;
    let groups = layout.groups.clone();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(layout.groups.len() * 2 + 1)
        .x_label_formatter(&move |x| {
            let g = x.floor();
            if (x - g - 0.5).abs() < 1e-6 && (g as usize) < groups.len() {
                groups[g as usize].clone()
            } else {
                String::new()
            }
        })
        .y_desc("accuracy")
        .draw()
        .map_err(draw_err)?;
    for (s, name) in layout.series.iter().enumerate() {
        let color = SERIES_COLORS[s % SERIES_COLORS.len()];
        let rects: Vec<_> = layout
            .bars
            .iter()
            .filter(|b| b.series == s)
            .map(|b| Rectangle::new([(b.x0, 0.0), (b.x1, b.value)], color.filled()))
            .collect();
        chart
            .draw_series(rects)
            .map_err(draw_err)?
            .label(name.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    for (i, c) in layout.chance.iter().enumerate() {
        let series = chart
            .draw_series(DashedLineSeries::new(
                [(c.x0, c.level), (c.x1, c.level)],
                8,
                5,
                BLACK.stroke_width(2),
            ))
            .map_err(draw_err)?;
        if i == 0 {
            series
                .label("chance")
                .legend(|(x, y)| PathElement::new([(x, y), (x + 12, y)], BLACK.stroke_width(2)));
        }
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

fn draw_curves<DB: DrawingBackend>(root: &DrawingArea<DB, Shift>, epochs: &[EpochRecord], title: &str) -> std::result::Result<(), String>
where
    DB::ErrorType: 'static,
{
    root.fill(&WHITE).map_err(draw_err)?;
    let n = epochs.len().max(1) as f64;
    let mut chart = ChartBuilder::on(root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0.5f64..n + 0.5, 0f64..1f64)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_label_formatter(&|x| format!("{x:.0}"))
        .x_desc("epoch")
        .y_desc("accuracy")
        .draw()
        .map_err(draw_err)?;
    let series: [(&str, fn(&EpochRecord) -> f64, RGBColor); 2] = [
        ("training", |e| e.train_acc, SERIES_COLORS[0]),
        ("validation", |e| e.val_acc, SERIES_COLORS[1]),
    ];
    for (name, f, color) in series {
        chart
            .draw_series(LineSeries::new(
                epochs.iter().map(|e| (e.epoch as f64, f(e))),
                color.stroke_width(2),
            ))
            .map_err(draw_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 12, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Report(e.to_string()))?;
    Ok(write_atomic(path, &bytes)?)
}

/// Training and validation accuracy per epoch for one network.
pub fn learning_curve_figure(dir: &Path, name: &str, network: &str, epochs: &[EpochRecord]) -> Result<FigureSummary> {
    let csv_path = dir.join(format!("{name}.csv"));
    write_csv(&csv_path, epochs)?;
    let title = format!("{network} network");
    let (mut files, rendered) = render_with(dir, name, |r| draw_curves(r, epochs, &title), |r| draw_curves(r, epochs, &title))?;
    files.insert(0, csv_path);
    Ok(FigureSummary {
        name: name.to_string(),
        series: vec!["training".into(), "validation".into()],
        groups: Vec::new(),
        bars: 0,
        lines: 2,
        chance_lines: 0,
        files,
        rendered,
    })
}

#[derive(Serialize)]
struct BarRow<'a> {
    task: &'a str,
    source: &'a str,
    accuracy: f64,
    chance: f64,
    n_test: usize,
    chance_low: f64,
    chance_high: f64,
}

/// Grouped bars of probe accuracy per task with a dashed chance line per task.
pub fn probe_figure(dir: &Path, name: &str, results: &[ProbeResult]) -> Result<FigureSummary> {
    let layout = BarLayout::from_results(results);
    let rows: Vec<BarRow> = results
        .iter()
        .map(|r| {
            let (lo, hi) = r.chance_interval();
            BarRow {
                task: &r.task,
                source: &r.source,
                accuracy: r.accuracy,
                chance: r.chance,
                n_test: r.n_test,
                chance_low: lo,
                chance_high: hi,
            }
        })
        .collect();
    let csv_path = dir.join(format!("{name}.csv"));
    write_csv(&csv_path, &rows)?;
    let title = "probe accuracy";
    let (mut files, rendered) = render_with(dir, name, |r| draw_bars(r, &layout, title), |r| draw_bars(r, &layout, title))?;
    files.insert(0, csv_path);
    Ok(FigureSummary {
        name: name.to_string(),
        series: layout.series.clone(),
        groups: layout.groups.clone(),
        bars: layout.bars.len(),
        lines: 0,
        chance_lines: layout.chance.len(),
        files,
        rendered,
    })
}

fn render_with(
    dir: &Path,
    name: &str,
    svg: impl Fn(&DrawingArea<SVGBackend, Shift>) -> std::result::Result<(), String>,
    png: impl Fn(&DrawingArea<BitMapBackend, Shift>) -> std::result::Result<(), String>,
) -> Result<(Vec<PathBuf>, bool)> {
    if !font_available() {
        return Ok((Vec::new(), false));
    }
    let fail = |e: String| PipelineError::Report(format!("{name}: {e}"));
    let svg_path = dir.join(format!("{name}.svg"));
    let png_path = dir.join(format!("{name}.png"));
    svg(&SVGBackend::new(&svg_path, SIZE).into_drawing_area()).map_err(fail)?;
    png(&BitMapBackend::new(&png_path, SIZE).into_drawing_area()).map_err(fail)?;
    Ok((vec![svg_path, png_path], true))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(task: ProbeTask, source: Source, acc: f64) -> ProbeResult {
        ProbeResult {
            task: task.name().into(),
            source: source.name().into(),
            accuracy: acc,
            chance: task.chance(),
            n_train: 80,
            n_test: 20,
            seed: 0,
            split: "word".into(),
            lambda: 0.01,
        }
    }

    fn two_networks() -> Vec<ProbeResult> {
        let mut rs = Vec::new();
        for t in ProbeTask::ALL {
            rs.push(result(t, Source::Dorsal, 0.4));
            rs.push(result(t, Source::Ventral, 0.6));
        }
        rs
    }

    #[test]
    fn two_networks_four_tasks_gives_eight_bars_and_four_chance_lines() {
        let layout = BarLayout::from_results(&two_networks());
        assert_eq!(layout.bars.len(), 8);
        assert_eq!(layout.chance.len(), 4);
        assert_eq!(layout.series, vec!["dorsal", "ventral"]);
        let levels: Vec<f64> = layout.chance.iter().map(|c| c.level).collect();
        assert_eq!(levels, vec![0.2, 0.25, 0.5, 0.5]);
        // bars of a group sit inside the group's span and do not overlap
        for g in 0..4 {
            let bs: Vec<&Bar> = layout.bars.iter().filter(|b| b.group == g).collect();
            assert_eq!(bs.len(), 2);
            assert!(bs[0].x1 <= bs[1].x0 + 1e-12);
            assert!(bs.iter().all(|b| b.x0 >= g as f64 && b.x1 <= g as f64 + 1.0));
            assert_ne!(bs[0].series, bs[1].series);
        }
        assert_ne!(SERIES_COLORS[0], SERIES_COLORS[1]);
    }

    #[test]
    fn missing_combinations_get_no_bar() {
        let mut rs = two_networks();
        rs.retain(|r| !(r.task == "animacy" && r.source == "ventral"));
        let layout = BarLayout::from_results(&rs);
        assert_eq!(layout.bars.len(), 7);
        assert_eq!(layout.chance.len(), 4);
    }

    #[test]
    fn figures_write_csv_and_images() {
        let dir = tempfile::tempdir().unwrap();
        let s = probe_figure(dir.path(), "fig3", &two_networks()).unwrap();
        assert_eq!((s.bars, s.chance_lines), (8, 4));
        let csv = std::fs::read_to_string(dir.path().join("fig3.csv")).unwrap();
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.starts_with("task,source,accuracy,chance,n_test,chance_low,chance_high"));

        let epochs: Vec<EpochRecord> = (1..=5)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 1.0 / e as f64,
                train_acc: 0.1 * e as f64,
                val_loss: 1.2 / e as f64,
                val_acc: 0.08 * e as f64,
            })
            .collect();
        let c = learning_curve_figure(dir.path(), "fig2_dorsal", "dorsal", &epochs).unwrap();
        assert_eq!(c.lines, 2);
        assert_eq!(std::fs::read_to_string(dir.path().join("fig2_dorsal.csv")).unwrap().lines().count(), 6);
        if s.rendered {
            for f in ["fig3.svg", "fig3.png", "fig2_dorsal.svg", "fig2_dorsal.png"] {
                assert!(std::fs::metadata(dir.path().join(f)).unwrap().len() > 0, "{f}");
            }
            let svg = std::fs::read_to_string(dir.path().join("fig3.svg")).unwrap();
            assert!(svg.contains("stroke-dasharray") || svg.matches("<line").count() + svg.matches("<polyline").count() > 8);
        }
    }
}
