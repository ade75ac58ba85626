// SPDX-License-Identifier: MIT OR Apache-2.0

//! SVG charts for evidence reports.

use patchlens_core::attribution::HeadProfile;
use patchlens_core::experiments::EvidenceReport;
use patchlens_core::{Error, Result};
use plotters::prelude::*;

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Heat grid of head shares, layers on the y axis.
pub fn head_grid_svg(profile: &HeadProfile, title: &str) -> Result<String> {
    let (nl, nh) = (profile.n_layers, profile.n_heads);
    let cell = 28u32;
    let (w, h) = (120 + cell * nh as u32, 90 + cell * nl as u32);
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let max = profile
            .shares
            .iter()
            .cloned()
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 16))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .build_cartesian_2d(0..nh, 0..nl)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_mesh()
            .x_desc("head")
            .y_desc("layer")
            .x_labels(nh.min(16))
            .y_labels(nl.min(16))
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(
                (0..nl)
                    .flat_map(|l| (0..nh).map(move |hh| (l, hh)))
                    .map(|(l, hh)| {
                        let v = profile.shares[l * nh + hh] / max;
                        let shade = (255.0 * (1.0 - v)).round() as u8;
                        Rectangle::new(
                            [(hh, l), (hh + 1, l + 1)],
                            RGBColor(255, shade, shade).filled(),
                        )
                    }),
            )
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(out)
}

/// One horizontal bar per statistic.
pub fn statistics_svg(report: &EvidenceReport) -> Result<String> {
    let stats = &report.statistics;
    let n = stats.len().max(1);
    let (w, h) = (760u32, 70 + 24 * n as u32);
    let lo = stats.iter().map(|s| s.value).fold(0.0f64, f64::min);
    let hi = stats.iter().map(|s| s.value).fold(1.0f64, f64::max);
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let title = format!(
            "{} ({} of {} cases)",
            report.pipeline, report.included, report.ingested
        );
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 16))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(300)
            .build_cartesian_2d(lo..hi, (0..n).into_segmented())
            .map_err(plot_err)?;
        let names: Vec<String> = stats.iter().map(|s| s.name.clone()).collect();
        chart
            .configure_mesh()
            .disable_y_mesh()
            .y_labels(n)
            .y_label_formatter(&|v| match v {
                SegmentValue::CenterOf(i) => names.get(*i).cloned().unwrap_or_default(),
                _ => String::new(),
            })
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(stats.iter().enumerate().map(|(i, s)| {
                let (a, b) = if s.value >= 0.0 {
                    (0.0, s.value)
                } else {
                    (s.value, 0.0)
                };
                Rectangle::new(
                    [(a, SegmentValue::Exact(i)), (b, SegmentValue::Exact(i + 1))],
                    BLUE.mix(0.6).filled(),
                )
            }))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(out)
}
