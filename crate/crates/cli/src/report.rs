use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use plotters::prelude::*;
use stereo_ssc::error::{Error, Result};
use stereo_ssc::harness::{self, EvalReport, StepRecord};
use stereo_ssc::scenes::io::{Dataset, Split};
use stereo_ssc::Tensor;

const WIDTH: u32 = 720;
const HEIGHT: u32 = 360;

fn plot_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e:?}")))
}

fn loss_svg(log: &[StepRecord]) -> Result<String> {
    let series: [(&str, fn(&StepRecord) -> f64, RGBColor); 6] = [
        ("total", |r| r.losses.l_total, BLACK),
        ("occ", |r| r.losses.l_occ, RGBColor(31, 119, 180)),
        ("sem", |r| r.losses.l_sem, RGBColor(255, 127, 14)),
        ("depth", |r| r.losses.l_depth, RGBColor(44, 160, 44)),
        ("scal_sem", |r| r.losses.l_scal_sem, RGBColor(214, 39, 40)),
        ("scal_geo", |r| r.losses.l_scal_geo, RGBColor(148, 103, 189)),
    ];
    let x_max = log.last().map_or(1, |r| r.step.max(1)) as f64;
    let y_max = log.iter().map(|r| r.losses.l_total).fold(1e-6, f64::max) * 1.05;
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (WIDTH, HEIGHT)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("training loss", ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..x_max, 0f64..y_max)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("step").draw().map_err(plot_err)?;
        for (name, get, color) in series {
            chart
                .draw_series(LineSeries::new(log.iter().map(|r| (r.step as f64, get(r))), color))
                .map_err(plot_err)?
                .label(name)
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

fn iou_svg(report: &EvalReport, names: &[String]) -> Result<String> {
    let bars: Vec<(String, f64)> = report
        .aggregate
        .per_class_iou
        .iter()
        .map(|(c, v)| (names.get(*c).cloned().unwrap_or_else(|| c.to_string()), *v))
        .collect();
    let n = bars.len().max(1);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (WIDTH, HEIGHT)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("per-class IoU ({})", report.split), ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..n as f64, 0f64..1f64)
            .map_err(plot_err)?;
        let labels = bars.iter().map(|(name, _)| name.clone()).collect::<Vec<_>>();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| labels.get(x.floor() as usize).cloned().unwrap_or_default())
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
                Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, *v)], RGBColor(31, 119, 180).filled())
            }))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Heatmap of the depth distribution along the middle image row: one column
/// per pixel, one row per depth bin.
fn depth_svg(probs: &Tensor) -> Result<String> {
    let s = probs.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("depth distribution {s:?} is not [H, W, D]")));
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    let row = h / 2;
    let peak = (0..w * d).map(|i| probs.data()[row * w * d + i]).fold(1e-12, f64::max);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (WIDTH, HEIGHT)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("depth distribution, middle row (left view)", ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0..w, 0..d)
            .map_err(plot_err)?;
        chart.configure_mesh().disable_mesh().x_desc("column").y_desc("bin").draw().map_err(plot_err)?;
        chart
            .draw_series((0..w).flat_map(|x| (0..d).map(move |b| (x, b))).map(|(x, b)| {
                let p = probs.data()[(row * w + x) * d + b] / peak;
                let shade = (255.0 * (1.0 - p)).round().clamp(0.0, 255.0) as u8;
                Rectangle::new([(x, b), (x + 1, b + 1)], RGBColor(shade, shade, 255).filled())
            }))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

fn stored_reports(run: &Path) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let path = run.join(format!("metrics_{}.json", split.name()));
        if path.is_file() {
            out.push(serde_json::from_slice(&fs::read(path)?)?);
        }
    }
    Ok(out)
}

/// Write a self-contained HTML report for a run. Metrics come from the
/// run's `metrics_*.json` files, or are computed on the test split when
/// none exist and the dataset is reachable.
pub fn write_report(run: &Path, dataset: Option<&Dataset>, out: &Path) -> Result<()> {
    let (cfg, net) = harness::load_run(run)?;
    let log = harness::read_loss_log(run)?;
    let mut reports = stored_reports(run)?;
    if reports.is_empty() {
        if let Some(ds) = dataset {
            let samples = ds.load_split(Split::Test)?;
            if !samples.is_empty() {
                reports.push(harness::evaluate_samples(&net, &cfg, &samples, Split::Test.name())?);
            }
        }
    }
    let names = dataset.map(|d| d.manifest.class_names.clone()).unwrap_or_default();

    let mut html = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>run report</title>\n");
    html.push_str("<style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}td,th{border:1px solid #aaa;padding:4px 8px}</style>\n</head><body>\n");
    let _ = writeln!(html, "<h1>{}</h1>", escape(&run.display().to_string()));

    html.push_str("<h2>Summary</h2>\n<table><tr><th>key</th><th>value</th></tr>\n");
    let mut row = |k: &str, v: String| {
        let _ = writeln!(html, "<tr><td>{}</td><td>{}</td></tr>", escape(k), escape(&v));
    };
    row("steps", cfg.steps.to_string());
    row("seed", cfg.seed.to_string());
    row("parameters", net.n_parameters().to_string());
    row("stereo_sfa / oad / distill", format!("{} / {} / {}", cfg.stereo_sfa, cfg.oad, cfg.distill));
    row("discretization", cfg.discretization.name().to_string());
    if let (Some(a), Some(b)) = (log.first(), log.last()) {
        row("l_total first / last", format!("{:.4} / {:.4}", a.losses.l_total, b.losses.l_total));
    }
    for r in &reports {
        row(&format!("{} SC IoU", r.split), format!("{:.4}", r.aggregate.sc_iou));
        row(&format!("{} SSC mIoU", r.split), format!("{:.4}", r.aggregate.ssc_miou));
    }
    html.push_str("</table>\n");

    if !log.is_empty() {
        html.push_str("<h2>Loss curves</h2>\n");
        html.push_str(&loss_svg(&log)?);
    }
    for r in &reports {
        html.push_str("<h2>Per-class IoU</h2>\n");
        html.push_str(&iou_svg(r, &names)?);
    }
    if let Some(ds) = dataset {
        let split = [Split::Test, Split::Val, Split::Train].into_iter().find(|s| !ds.manifest.ids(*s).is_empty());
        if let Some(split) = split {
            let sample = ds.load(&ds.manifest.ids(split)[0])?;
            let [left, _] = harness::predict_depth(&net, &cfg, &sample)?;
            let _ = writeln!(html, "<h2>Depth distribution ({})</h2>", escape(&sample.sample_id));
            html.push_str(&depth_svg(&left)?);
        }
    }
    html.push_str("\n</body></html>\n");

    let mut tmp_name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".partial");
    let tmp = out.with_file_name(tmp_name);
    fs::write(&tmp, html)?;
    fs::rename(tmp, out)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
