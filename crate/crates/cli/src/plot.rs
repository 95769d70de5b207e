//! Static SVG charts for training logs and ablation tables.

use std::error::Error;
use std::path::Path;

use attrseg::ablation::AblationTable;
use attrseg::train::LogRecord;
use plotters::prelude::*;

type PlotResult = Result<(), Box<dyn Error>>;

pub fn loss_curve(path: &Path, log: &[LogRecord]) -> PlotResult {
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE)?;
    let max_loss = log.iter().map(|r| r.loss).fold(0.0, f64::max).max(1e-6) * 1.05;
    let epochs = log.len().max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..epochs, 0.0..max_loss)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("pixel BCE")
        .draw()?;
    chart.draw_series(LineSeries::new(
        log.iter().map(|r| (r.epoch as f64 + 1.0, r.loss)),
        &BLUE,
    ))?;
    root.present()?;
    Ok(())
}

pub fn ablation_bars(path: &Path, table: &AblationTable) -> PlotResult {
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE)?;
    let labels: Vec<String> = table.rows.iter().map(|r| r.label.clone()).collect();
    let n = labels.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} ablation", table.kind), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((0..n).into_segmented(), 0.0..1.0f64)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("novel mIoU")
        .x_label_formatter(&|x| match x {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .draw()?;
    chart.draw_series(table.rows.iter().enumerate().map(|(i, r)| {
        let mut bar = Rectangle::new(
            [
                (SegmentValue::Exact(i), 0.0),
                (SegmentValue::Exact(i + 1), r.miou),
            ],
            BLUE.mix(0.6).filled(),
        );
        bar.set_margin(0, 0, 8, 8);
        bar
    }))?;
    root.present()?;
    Ok(())
}
