//! Minimal hand-rolled SVG line charts for diagnostic plots. Output is
//! fully deterministic (no timestamps, no randomness).

/// One named line in a chart.
pub struct Series {
    pub label: String,
    pub color: String,
    pub points: Vec<(f64, f64)>,
}

/// Vertical marker line at an x position.
pub struct Marker {
    pub x: f64,
    pub color: String,
}

const W: f64 = 800.0;
const H: f64 = 220.0;
const PAD_L: f64 = 55.0;
const PAD_R: f64 = 15.0;
const PAD_T: f64 = 28.0;
const PAD_B: f64 = 30.0;

fn fmt(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

/// Render one panel at vertical offset `y0` into `out`.
fn panel(out: &mut String, title: &str, series: &[Series], markers: &[Marker], y0: f64) {
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            xs.push(x);
            ys.push(y);
        }
    }
    for m in markers {
        xs.push(m.x);
    }
    if xs.is_empty() {
        return;
    }
    let (x_min, x_max) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let (y_min, y_max) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let x_span = (x_max - x_min).max(1e-12);
    let y_span = (y_max - y_min).max(1e-12);
    let sx = |x: f64| PAD_L + (x - x_min) / x_span * (W - PAD_L - PAD_R);
    let sy = |y: f64| y0 + H - PAD_B - (y - y_min) / y_span * (H - PAD_T - PAD_B);

    out.push_str(&format!(
        "<text x=\"{PAD_L}\" y=\"{}\" font-size=\"13\" font-family=\"monospace\">{title}</text>\n",
        y0 + 16.0
    ));
    // Frame and y-range labels.
    out.push_str(&format!(
        "<rect x=\"{PAD_L}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>\n",
        y0 + PAD_T,
        W - PAD_L - PAD_R,
        H - PAD_T - PAD_B
    ));
    out.push_str(&format!(
        "<text x=\"4\" y=\"{}\" font-size=\"10\" font-family=\"monospace\">{}</text>\n",
        y0 + PAD_T + 8.0,
        fmt(y_max)
    ));
    out.push_str(&format!(
        "<text x=\"4\" y=\"{}\" font-size=\"10\" font-family=\"monospace\">{}</text>\n",
        y0 + H - PAD_B,
        fmt(y_min)
    ));
    out.push_str(&format!(
        "<text x=\"{PAD_L}\" y=\"{}\" font-size=\"10\" font-family=\"monospace\">{}</text>\n",
        y0 + H - 8.0,
        fmt(x_min)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" font-family=\"monospace\" text-anchor=\"end\">{}</text>\n",
        W - PAD_R,
        y0 + H - 8.0,
        fmt(x_max)
    ));

    for m in markers {
        let x = sx(m.x);
        out.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"{}\" stroke-dasharray=\"4 3\"/>\n",
            y0 + PAD_T,
            y0 + H - PAD_B,
            m.color
        ));
    }
    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\" points=\"{}\"/>\n",
            s.color,
            pts.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" font-family=\"monospace\" fill=\"{}\">{}</text>\n",
            W - PAD_R - 120.0,
            y0 + 16.0 + 12.0 * i as f64,
            s.color,
            s.label
        ));
    }
}

/// Stacked panels in one SVG document; each entry is (title, series, markers).
pub fn chart(panels: &[(&str, Vec<Series>, Vec<Marker>)]) -> String {
    let total_h = H * panels.len() as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{total_h}\" viewBox=\"0 0 {W} {total_h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, (title, series, markers)) in panels.iter().enumerate() {
        panel(&mut out, title, series, markers, H * i as f64);
    }
    out.push_str("</svg>\n");
    out
}
