//! Static SVG plots for sweep and ablation outputs.

use std::path::Path;

use anyhow::{bail, Result};
use plotters::prelude::*;

use ddro_core::metrics::{ConsistencyCurve, ScalingFit};

const SERIES_COLORS: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
];

/// Log-log error-versus-n plot with the fitted power law overlaid.
pub fn plot_consistency_curve(
    path: &Path,
    curve: &ConsistencyCurve,
    fit: &ScalingFit,
) -> Result<()> {
    let points: Vec<(f64, f64)> = curve
        .points()
        .iter()
        .filter(|p| p.error_mean > 0.0)
        .map(|p| ((p.n as f64).log10(), p.error_mean.log10()))
        .collect();
    if points.is_empty() {
        bail!("no positive errors to plot");
    }
    let (x_lo, x_hi) = pad_range(points.iter().map(|p| p.0));
    let (y_lo, y_hi) = pad_range(points.iter().map(|p| p.1));

    let path_str = path.to_string_lossy().to_string();
    let root = SVGBackend::new(&path_str, (800, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(50)
        .y_label_area_size(70)
        .caption(
            format!(
                "error vs n (slope {:.3}, r2 {:.3})",
                fit.slope, fit.r_squared
            ),
            ("sans-serif", 22),
        )
        .build_cartesian_2d(x_lo..x_hi, y_lo..y_hi)?;
    chart
        .configure_mesh()
        .x_desc("log10 n")
        .y_desc("log10 L2(p+) error")
        .draw()?;

    // Fitted line in natural-log space mapped to log10 axes.
    let ln10 = std::f64::consts::LN_10;
    let line: Vec<(f64, f64)> = [x_lo, x_hi]
        .iter()
        .map(|&x| (x, (fit.intercept + fit.slope * x * ln10) / ln10))
        .collect();
    chart
        .draw_series(LineSeries::new(line, &SERIES_COLORS[1]))?
        .label(format!("fit: slope {:.3}", fit.slope))
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], SERIES_COLORS[1]));
    chart
        .draw_series(
            points
                .iter()
                .map(|&(x, y)| Circle::new((x, y), 4, SERIES_COLORS[0].filled())),
        )?
        .label("measured")
        .legend(|(x, y)| Circle::new((x + 9, y), 4, SERIES_COLORS[0].filled()));
    chart.configure_series_labels().border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}

/// Overlay of per-step series (e.g. gradient norms per smoothing variant)
/// on a log10 y-axis.
pub fn plot_series_overlay(
    path: &Path,
    title: &str,
    y_label: &str,
    series: &[(String, Vec<(usize, f64)>)],
) -> Result<()> {
    let mut x_max = 1.0f64;
    let mut y_vals: Vec<f64> = Vec::new();
    for (_, pts) in series {
        for &(step, v) in pts {
            x_max = x_max.max(step as f64);
            if v > 0.0 {
                y_vals.push(v.log10());
            }
        }
    }
    if y_vals.is_empty() {
        bail!("no positive values to plot");
    }
    let (y_lo, y_hi) = pad_range(y_vals.iter().copied());

    let path_str = path.to_string_lossy().to_string();
    let root = SVGBackend::new(&path_str, (800, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(50)
        .y_label_area_size(70)
        .caption(title, ("sans-serif", 22))
        .build_cartesian_2d(0.0..x_max * 1.02, y_lo..y_hi)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc(y_label)
        .draw()?;

    for (i, (name, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let line: Vec<(f64, f64)> = pts
            .iter()
            .filter(|(_, v)| *v > 0.0)
            .map(|&(s, v)| (s as f64, v.log10()))
            .collect();
        chart
            .draw_series(LineSeries::new(line, &color))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}

fn pad_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(0.1);
    (lo - 0.1 * span, hi + 0.1 * span)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ddro_core::metrics::CurvePoint;
    use tempfile::tempdir;

    #[test]
    fn curve_plot_renders_deterministically() {
        let curve = ConsistencyCurve::new(
            [100usize, 1000, 10_000]
                .iter()
                .map(|&n| CurvePoint {
                    n,
                    error_mean: 4.0 / (n as f64).sqrt(),
                    error_stderr: 0.0,
                    seeds: 1,
                })
                .collect(),
        )
        .unwrap();
        let fit = ddro_core::metrics::scaling_fit(&curve).unwrap();
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.svg");
        let b = dir.path().join("b.svg");
        plot_consistency_curve(&a, &curve, &fit).unwrap();
        plot_consistency_curve(&b, &curve, &fit).unwrap();
        let bytes_a = std::fs::read(&a).unwrap();
        assert!(!bytes_a.is_empty());
        assert_eq!(bytes_a, std::fs::read(&b).unwrap());
    }

    #[test]
    fn overlay_plot_renders() {
        let series = vec![
            (
                "identity".to_string(),
                vec![(0usize, 1.0), (1, 0.5), (2, 2.0)],
            ),
            ("logsig".to_string(), vec![(0, 0.8), (1, 0.4), (2, 0.3)]),
        ];
        let dir = tempdir().unwrap();
        let path = dir.path().join("overlay.svg");
        plot_series_overlay(&path, "grad norms", "log10 grad norm", &series).unwrap();
        assert!(path.exists());
    }
}
