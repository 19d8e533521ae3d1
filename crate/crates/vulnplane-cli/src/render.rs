//! Deterministic SVG rendering of the vulnerability plane and metric
//! curves. No raster dependencies; identical inputs give identical bytes.

use std::fmt::Write as _;

use vulnplane::plane::{Trajectory, VulnerabilityState};

const PALETTE: [&str; 8] = [
    "#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d35400", "#16a085", "#7f8c8d", "#f39c12",
];

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

/// Options for [`render_plane`].
#[derive(Debug, Clone)]
pub struct PlaneOptions {
    pub title: String,
    /// Draw FPR/TPR density histograms along the top and right edges.
    pub marginals: bool,
}

impl Default for PlaneOptions {
    fn default() -> Self {
        PlaneOptions {
            title: String::new(),
            marginals: true,
        }
    }
}

/// Scatter of per-sample states on the unit square with the non-vulnerable
/// diagonal, optional trajectory polylines, and optional marginal
/// histograms.
pub fn render_plane(
    states: &[VulnerabilityState],
    overlays: &[&Trajectory],
    opts: &PlaneOptions,
) -> String {
    let (size, margin, strip) = (420.0, 50.0, if opts.marginals { 70.0 } else { 0.0 });
    let width = margin * 2.0 + size + strip;
    let height = margin * 2.0 + size + strip;
    let x0 = margin;
    let y0 = margin + strip; // plot square below the top strip
    let px = |fpr: f64| x0 + fpr * size;
    let py = |tpr: f64| y0 + (1.0 - tpr) * size;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(s, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>");
    if !opts.title.is_empty() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
            width / 2.0,
            xml_escape(&opts.title)
        );
    }

    // frame and diagonal
    let _ = writeln!(
        s,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999999\" stroke-dasharray=\"6 4\"/>",
        fmt(px(0.0)),
        fmt(py(0.0)),
        fmt(px(1.0)),
        fmt(py(1.0))
    );

    // axis labels and ticks
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">FPR</text>",
        fmt(x0 + size / 2.0),
        fmt(y0 + size + 36.0)
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 {} {})\">TPR</text>",
        fmt(x0 - 34.0),
        fmt(y0 + size / 2.0),
        fmt(x0 - 34.0),
        fmt(y0 + size / 2.0)
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            fmt(px(t)),
            fmt(y0 + size + 16.0),
            fmt(t)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            fmt(x0 - 6.0),
            fmt(py(t) + 3.0),
            fmt(t)
        );
    }

    // marginal density strips
    if opts.marginals && !states.is_empty() {
        let bins = 20usize;
        let mut fpr_hist = vec![0usize; bins];
        let mut tpr_hist = vec![0usize; bins];
        for st in states {
            fpr_hist[((st.fpr * bins as f64) as usize).min(bins - 1)] += 1;
            tpr_hist[((st.tpr * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let fmax = *fpr_hist.iter().max().unwrap() as f64;
        let tmax = *tpr_hist.iter().max().unwrap() as f64;
        let bw = size / bins as f64;
        for (b, &c) in fpr_hist.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let h = (strip - 8.0) * c as f64 / fmax;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#b0c4de\"/>",
                fmt(x0 + b as f64 * bw),
                fmt(y0 - 4.0 - h),
                fmt(bw - 1.0),
                fmt(h)
            );
        }
        for (b, &c) in tpr_hist.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let w = (strip - 8.0) * c as f64 / tmax;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#b0c4de\"/>",
                fmt(x0 + size + 4.0),
                fmt(py((b + 1) as f64 / bins as f64)),
                fmt(w),
                fmt(size / bins as f64 - 1.0)
            );
        }
    }

    // one marker per sample
    for st in states {
        let _ = writeln!(
            s,
            "<circle cx=\"{}\" cy=\"{}\" r=\"2\" fill=\"#2c3e50\" fill-opacity=\"0.45\"/>",
            fmt(px(st.fpr)),
            fmt(py(st.tpr))
        );
    }

    // trajectory overlays
    for (i, traj) in overlays.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = traj
            .states
            .iter()
            .map(|st| format!("{},{}", fmt(px(st.fpr)), fmt(py(st.tpr))))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" stroke-opacity=\"0.9\"/>",
            points.join(" ")
        );
        if let Some(last) = traj.states.last() {
            let _ = writeln!(
                s,
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>",
                fmt(px(last.fpr)),
                fmt(py(last.tpr))
            );
        }
    }

    s.push_str("</svg>\n");
    s
}

/// One labeled line in a curve chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct CurveOptions {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// When set, values outside the range are clipped (with a warning).
    pub y_range: Option<(f64, f64)>,
}

/// Epoch-indexed line chart for exposure curves, transition-probability
/// series, entropy series and similar. Returns the document plus clip
/// warnings for the manifest.
pub fn render_curves(series: &[Series], opts: &CurveOptions) -> (String, Vec<String>) {
    let (w, h) = (560.0, 360.0);
    let (ml, mr, mt, mb) = (60.0, 130.0, 40.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let mut warnings = Vec::new();
    let mut clipped: Vec<Series> = series.to_vec();
    let (xmin, xmax) = clipped
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        });
    let (mut ymin, mut ymax) = match opts.y_range {
        Some((lo, hi)) => (lo, hi),
        None => clipped
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| {
                (lo.min(y), hi.max(y))
            }),
    };
    if let Some((lo, hi)) = opts.y_range {
        for s in clipped.iter_mut() {
            let n = s
                .points
                .iter()
                .filter(|p| p.1 < lo || p.1 > hi)
                .count();
            if n > 0 {
                warnings.push(format!(
                    "curve `{}`: {n} values outside [{lo}, {hi}] were clipped",
                    s.label
                ));
                for p in s.points.iter_mut() {
                    p.1 = p.1.clamp(lo, hi);
                }
            }
        }
    }
    if !ymin.is_finite() || !ymax.is_finite() {
        ymin = 0.0;
        ymax = 1.0;
    }
    if (ymax - ymin).abs() < 1e-12 {
        ymax = ymin + 1.0;
    }
    let xspan = if (xmax - xmin).abs() < 1e-12 { 1.0 } else { xmax - xmin };

    let px = |x: f64| ml + (x - xmin) / xspan * pw;
    let py = |y: f64| mt + (1.0 - (y - ymin) / (ymax - ymin)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    if !opts.title.is_empty() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>",
            ml + pw / 2.0,
            xml_escape(&opts.title)
        );
    }
    let _ = writeln!(
        s,
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        fmt(ml + pw / 2.0),
        fmt(h - 12.0),
        xml_escape(&opts.x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        fmt(mt + ph / 2.0),
        fmt(mt + ph / 2.0),
        xml_escape(&opts.y_label)
    );

    // axis ticks
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = xmin + t * xspan;
        let yv = ymin + t * (ymax - ymin);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            fmt(px(xv)),
            fmt(mt + ph + 16.0),
            fmt(xv)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            fmt(ml - 6.0),
            fmt(py(yv) + 3.0),
            fmt(yv)
        );
        let _ = writeln!(
            s,
            "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#eeeeee\"/>",
            fmt(py(yv)),
            fmt(ml + pw),
            fmt(py(yv))
        );
    }

    for (i, ser) in clipped.iter().enumerate() {
        if ser.points.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt(px(x)), fmt(py(y))))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>",
            pts.join(" ")
        );
        // legend
        let ly = mt + 14.0 + i as f64 * 18.0;
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            fmt(ml + pw + 8.0),
            fmt(ly),
            fmt(ml + pw + 28.0),
            fmt(ly)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            fmt(ml + pw + 33.0),
            fmt(ly + 4.0),
            xml_escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    (s, warnings)
}

/// One labeled group in a histogram comparison.
#[derive(Debug, Clone)]
pub struct HistGroup {
    pub label: String,
    pub values: Vec<f64>,
}

/// Grouped histogram over a shared binning, as used for member-loss
/// distributions of sample groups.
pub fn render_histogram(groups: &[HistGroup], n_bins: usize, title: &str) -> String {
    let (w, h) = (560.0, 360.0);
    let (ml, mr, mt, mb) = (60.0, 130.0, 40.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let all: Vec<f64> = groups.iter().flat_map(|g| g.values.iter().copied()).collect();
    let (lo, hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let (lo, hi) = if all.is_empty() || (hi - lo).abs() < 1e-12 {
        (0.0, 1.0)
    } else {
        (lo, hi)
    };
    let bins = n_bins.max(1);
    let bw = (hi - lo) / bins as f64;

    let mut hists: Vec<Vec<f64>> = Vec::new();
    let mut peak = 0.0f64;
    for g in groups {
        let mut hist = vec![0.0; bins];
        for &v in &g.values {
            let b = (((v - lo) / bw) as usize).min(bins - 1);
            hist[b] += 1.0;
        }
        if !g.values.is_empty() {
            for x in hist.iter_mut() {
                *x /= g.values.len() as f64;
            }
        }
        peak = peak.max(hist.iter().cloned().fold(0.0, f64::max));
        hists.push(hist);
    }
    if peak == 0.0 {
        peak = 1.0;
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    if !title.is_empty() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>",
            ml + pw / 2.0,
            xml_escape(title)
        );
    }
    let _ = writeln!(
        s,
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
    );
    for k in 0..=4 {
        let xv = lo + k as f64 / 4.0 * (hi - lo);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            fmt(ml + k as f64 / 4.0 * pw),
            fmt(mt + ph + 16.0),
            fmt(xv)
        );
    }

    let group_w = pw / bins as f64;
    let bar_w = group_w / groups.len().max(1) as f64;
    for (gi, hist) in hists.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        for (b, &frac) in hist.iter().enumerate() {
            if frac == 0.0 {
                continue;
            }
            let bh = frac / peak * ph;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\" fill-opacity=\"0.7\"/>",
                fmt(ml + b as f64 * group_w + gi as f64 * bar_w),
                fmt(mt + ph - bh),
                fmt((bar_w - 0.5).max(0.5)),
                fmt(bh)
            );
        }
        let ly = mt + 14.0 + gi as f64 * 18.0;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"14\" height=\"10\" fill=\"{color}\" fill-opacity=\"0.7\"/>",
            fmt(ml + pw + 8.0),
            fmt(ly - 8.0)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            fmt(ml + pw + 27.0),
            fmt(ly + 1.0),
            xml_escape(&groups[gi].label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(fpr: f64, tpr: f64) -> VulnerabilityState {
        VulnerabilityState::new(fpr, tpr).unwrap()
    }

    #[test]
    fn plane_has_markers_and_diagonal() {
        let states = vec![st(0.1, 0.2), st(0.5, 0.5), st(0.9, 0.95)];
        let svg = render_plane(&states, &[], &PlaneOptions::default());
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("FPR") && svg.contains("TPR"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_overlay_list_is_plain_scatter() {
        let states = vec![st(0.3, 0.3)];
        let svg = render_plane(&states, &[], &PlaneOptions::default());
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn overlays_add_polylines() {
        let states = vec![st(0.3, 0.3)];
        let traj = Trajectory::new(0, vec![0, 1], vec![st(0.1, 0.1), st(0.2, 0.6)]).unwrap();
        let svg = render_plane(&states, &[&traj], &PlaneOptions::default());
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn rendering_is_deterministic() {
        let states: Vec<_> = (0..40)
            .map(|i| st(i as f64 / 40.0, (i as f64 / 40.0).powi(2)))
            .collect();
        let a = render_plane(&states, &[], &PlaneOptions::default());
        let b = render_plane(&states, &[], &PlaneOptions::default());
        assert_eq!(a, b);
    }

    #[test]
    fn constant_series_is_a_horizontal_line() {
        let series = vec![Series {
            label: "flat".into(),
            points: (0..5).map(|i| (i as f64, 0.4)).collect(),
        }];
        let (svg, warnings) = render_curves(&series, &CurveOptions::default());
        assert!(warnings.is_empty());
        let line = svg
            .lines()
            .find(|l| l.starts_with("<polyline"))
            .expect("polyline present");
        let ys: Vec<&str> = line
            .split_whitespace()
            .filter_map(|tok| tok.split(',').nth(1))
            .map(|y| y.trim_end_matches('"'))
            .collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]), "{line}");
    }

    #[test]
    fn two_series_get_two_legend_entries() {
        let series = vec![
            Series { label: "sgd".into(), points: vec![(0.0, 0.1), (1.0, 0.2)] },
            Series { label: "sam".into(), points: vec![(0.0, 0.05), (1.0, 0.1)] },
        ];
        let (svg, _) = render_curves(&series, &CurveOptions::default());
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">sgd</text>") && svg.contains(">sam</text>"));
    }

    #[test]
    fn out_of_range_values_are_clipped_with_warning() {
        let series = vec![Series {
            label: "cov".into(),
            points: vec![(0.0, 0.5), (1.0, 1.4)],
        }];
        let (_, warnings) = render_curves(
            &series,
            &CurveOptions {
                y_range: Some((0.0, 1.0)),
                ..Default::default()
            },
        );
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("clipped"));
    }

    #[test]
    fn histogram_renders_groups() {
        let groups = vec![
            HistGroup { label: "high-travel".into(), values: vec![0.1, 0.2, 2.0, 2.1] },
            HistGroup { label: "low-travel".into(), values: vec![0.05, 0.06, 0.04] },
        ];
        let svg = render_histogram(&groups, 10, "member losses");
        assert!(svg.contains("high-travel") && svg.contains("low-travel"));
        assert!(svg.matches("<rect").count() > 4);
    }
}
