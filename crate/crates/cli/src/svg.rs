//! Side-by-side BEV lane maps as SVG: groundtruth on the left, predictions
//! on the right. Forward (x) points up and left (y) points left, with metre
//! ticks on both axes.

use std::fmt::Write as _;

use laneseg_core::geometry::{BevExtent, Vec2};
use laneseg_core::heads_loss::{LaneSegment, CLASS_CROSSING, CLASS_LANE};

/// Predictions below this score are not drawn.
pub const MIN_SCORE: f64 = 0.3;

const SCALE: f64 = 10.0;
const MARGIN_LEFT: f64 = 50.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 50.0;
const LATERAL_TICK: f64 = 4.0;
const FORWARD_TICK: f64 = 8.0;

fn class_color(class_id: u8) -> &'static str {
    match class_id {
        CLASS_LANE => "#1f77b4",
        CLASS_CROSSING => "#d62728",
        _ => "#7f7f7f",
    }
}

fn class_name(class_id: u8) -> &'static str {
    match class_id {
        CLASS_LANE => "lane segment",
        CLASS_CROSSING => "pedestrian crossing",
        _ => "other",
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Panel<'a> {
    extent: &'a BevExtent,
}

impl Panel<'_> {
    fn width(&self) -> f64 {
        self.extent.y_span() * SCALE
    }

    fn height(&self) -> f64 {
        self.extent.x_span() * SCALE
    }

    /// Panel-local pixel position of an ego-frame point.
    fn pixel(&self, p: Vec2) -> (f64, f64) {
        ((self.extent.y_max - p[1]) * SCALE, (self.extent.x_max - p[0]) * SCALE)
    }

    fn polyline(&self, points: &[Vec2]) -> String {
        let mut s = String::new();
        for (i, p) in points.iter().enumerate() {
            let (u, v) = self.pixel(*p);
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{u:.2},{v:.2}");
        }
        s
    }

    fn draw(&self, out: &mut String, id: &str, label: &str, dx: f64, segments: &[LaneSegment]) {
        let (w, h) = (self.width(), self.height());
        let _ = writeln!(out, r#"<g id="{id}" transform="translate({dx:.2},{MARGIN_TOP:.2})">"#);
        let _ = writeln!(out, r##"<rect x="0" y="0" width="{w:.2}" height="{h:.2}" fill="#f4f4f4" stroke="#333"/>"##);
        let _ = writeln!(out, r#"<text x="{:.2}" y="-28" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(label));
        let e = self.extent;
        let mut y = (e.y_max / LATERAL_TICK).floor() * LATERAL_TICK;
        while y >= e.y_min - 1e-9 {
            let (u, _) = self.pixel([0.0, y]);
            let _ = writeln!(out, r##"<line class="tick" x1="{u:.2}" y1="{h:.2}" x2="{u:.2}" y2="{:.2}" stroke="#333"/>"##, h + 5.0);
            let _ = writeln!(out, r#"<text x="{u:.2}" y="{:.2}" text-anchor="middle" font-size="10">{y}</text>"#, h + 17.0);
            y -= LATERAL_TICK;
        }
        let mut x = (e.x_max / FORWARD_TICK).floor() * FORWARD_TICK;
        while x >= e.x_min - 1e-9 {
            let (_, v) = self.pixel([x, 0.0]);
            let _ = writeln!(out, r##"<line class="tick" x1="-5" y1="{v:.2}" x2="0" y2="{v:.2}" stroke="#333"/>"##);
            let _ = writeln!(out, r#"<text x="-8" y="{:.2}" text-anchor="end" font-size="10">{x}</text>"#, v + 3.5);
            x -= FORWARD_TICK;
        }
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">y (m, left)</text>"#, w / 2.0, h + 32.0);
        let _ = writeln!(
            out,
            r#"<text x="-36" y="{:.2}" text-anchor="middle" font-size="11" transform="rotate(-90 -36 {:.2})">x (m, forward)</text>"#,
            h / 2.0,
            h / 2.0
        );
        let (ex, ey) = self.pixel([0.0, 0.0]);
        let _ = writeln!(
            out,
            r##"<polygon class="ego" points="{ex:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="#2ca02c"/>"##,
            ey - 8.0,
            ex - 5.0,
            ey + 6.0,
            ex + 5.0,
            ey + 6.0
        );
        for seg in segments {
            let color = class_color(seg.class_id);
            let _ = writeln!(out, r#"<g class="segment class-{}" data-score="{:.4}">"#, seg.class_id, seg.score);
            for side in [&seg.left, &seg.right] {
                let _ = writeln!(
                    out,
                    r#"<polyline class="boundary" points="{}" fill="none" stroke="{color}" stroke-width="1" stroke-dasharray="4 3"/>"#,
                    self.polyline(side)
                );
            }
            let _ = writeln!(
                out,
                r#"<polyline class="centerline" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                self.polyline(&seg.centerline)
            );
            let _ = writeln!(out, "</g>");
        }
        let _ = writeln!(out, "</g>");
    }
}

/// Renders the groundtruth panel and, when given, the prediction panel.
pub fn render_bev(groundtruth: &[LaneSegment], predicted: Option<&[LaneSegment]>, extent: &BevExtent, title: &str) -> String {
    let panel = Panel { extent };
    let slot = MARGIN_LEFT + panel.width() + MARGIN_RIGHT;
    let panels = if predicted.is_some() { 2.0 } else { 1.0 };
    let width = slot * panels;
    let legend_y = MARGIN_TOP + panel.height() + MARGIN_BOTTOM;
    let height = legend_y + 30.0;
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="8" y="18" font-size="13">{}</text>"#, escape(title));
    panel.draw(&mut out, "groundtruth", "Groundtruth", MARGIN_LEFT, groundtruth);
    if let Some(pred) = predicted {
        let label = format!("Prediction (score >= {MIN_SCORE})");
        panel.draw(&mut out, "prediction", &label, slot + MARGIN_LEFT, pred);
    }
    for (i, class_id) in [CLASS_LANE, CLASS_CROSSING].into_iter().enumerate() {
        let x = MARGIN_LEFT + 150.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{legend_y:.2}" x2="{:.2}" y2="{legend_y:.2}" stroke="{}" stroke-width="2"/>"#,
            x + 20.0,
            class_color(class_id)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            x + 25.0,
            legend_y + 4.0,
            class_name(class_id)
        );
    }
    let _ = writeln!(out, "</svg>");
    out
}
