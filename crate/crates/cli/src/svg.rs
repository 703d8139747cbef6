//! Plot of one instance: true means, noisy points, predicted means and 1-σ circles.

use std::fmt::Write as _;

use cu_core::losses::PredictiveParams;
use cu_core::prob::SquareMatrix;
use cu_core::synthgen::Instance;

const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Frame {
    min: [f64; 2],
    scale: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
        Self {
            min: lo,
            scale: (SIZE - 2.0 * MARGIN) / span,
        }
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        (
            MARGIN + (p[0] - self.min[0]) * self.scale,
            SIZE - MARGIN - (p[1] - self.min[1]) * self.scale,
        )
    }
}

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str, dash: bool) {
    let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{}/>"#,
        path.join(" "),
        if dash { r#" stroke-dasharray="5,3""# } else { "" }
    );
}

pub fn render_instance(inst: &Instance, pred: &PredictiveParams, cov: Option<&SquareMatrix>) -> String {
    let (m, t_len) = (inst.x.agents, inst.x.timesteps);
    let cols = 2 * t_len;
    let mu = pred.mu.values();
    let pt = |coords: &[f64], i: usize, t: usize| [coords[i * cols + 2 * t], coords[i * cols + 2 * t + 1]];
    let all = (0..m).flat_map(|i| (0..t_len).flat_map(move |t| [(i, t)]));
    let frame = Frame::fit(
        all.clone()
            .flat_map(|(i, t)| [pt(&inst.mu_gt.coords, i, t), pt(&inst.x.coords, i, t), pt(mu, i, t)]),
    );

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for i in 0..m {
        let color = COLORS[i % COLORS.len()];
        for t in 0..t_len {
            let (x, y) = frame.map(pt(&inst.x.coords, i, t));
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.8" fill="{color}" fill-opacity="0.45"/>"#);
        }
        let gt: Vec<_> = (0..t_len).map(|t| frame.map(pt(&inst.mu_gt.coords, i, t))).collect();
        polyline(&mut out, &gt, color, false);
        let est: Vec<_> = (0..t_len).map(|t| frame.map(pt(mu, i, t))).collect();
        polyline(&mut out, &est, color, true);
        if let Some(c) = cov {
            let r = c.get(i, i).sqrt() * frame.scale;
            for t in (0..t_len).step_by(10.max(t_len / 5)) {
                let (x, y) = frame.map(pt(mu, i, t));
                let _ = writeln!(
                    out,
                    r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="none" stroke="{color}" stroke-opacity="0.6"/>"#
                );
            }
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="8" y="16" font-family="monospace" font-size="11">solid: true mean, dashed: predicted mean ({})</text>"#,
        pred.family
    );
    if let Some(c) = cov {
        for i in 0..m {
            let row: Vec<String> = (0..m)
                .map(|j| format!("{:+.2}", c.get(i, j) / (c.get(i, i) * c.get(j, j)).sqrt()))
                .collect();
            let _ = writeln!(
                out,
                r#"<text x="8" y="{}" font-family="monospace" font-size="11">corr {}</text>"#,
                32 + 14 * i,
                row.join(" ")
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
