//! Static SVG frames: SDV red, other agents blue, crosswalks yellow, signal state
//! drawn on controlled lanes.

use std::fmt::Write;

use diffdrive::scene::{AgentKind, Extent, LightState, ScenarioLog};
use diffdrive::se2::Pose;

const HALF_VIEW: f64 = 40.0;
const PX_PER_M: f64 = 10.0;

/// Trajectories drawn on top of the scene.
pub struct Overlay {
    pub expert: Vec<[f64; 2]>,
    pub policy: Vec<Pose>,
    /// Frame of `policy[0]`.
    pub first_frame: usize,
}

struct View {
    cx: f64,
    cy: f64,
}

impl View {
    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (
            (p[0] - self.cx + HALF_VIEW) * PX_PER_M,
            (HALF_VIEW - (p[1] - self.cy)) * PX_PER_M,
        )
    }

    fn points(&self, pts: &[[f64; 2]]) -> String {
        let mut s = String::new();
        for p in pts {
            let (x, y) = self.px(*p);
            let _ = write!(s, "{x:.2},{y:.2} ");
        }
        s.trim_end().to_string()
    }
}

fn corners(p: &Pose, e: Extent) -> [[f64; 2]; 4] {
    let (hl, hw) = (e.length / 2.0, e.width / 2.0);
    let (c, s) = (p.yaw.cos(), p.yaw.sin());
    [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|[u, v]| [p.x + c * u - s * v, p.y + s * u + c * v])
}

fn light_color(s: Option<LightState>) -> &'static str {
    match s {
        Some(LightState::Red) => "#d62728",
        Some(LightState::Yellow) => "#e6c200",
        Some(LightState::Green) => "#2ca02c",
        _ => "#b0b0b0",
    }
}

pub fn render_frame(log: &ScenarioLog, t: usize, overlay: Option<&Overlay>) -> String {
    let frame = &log.frames[t];
    let center = overlay
        .and_then(|o| t.checked_sub(o.first_frame).and_then(|k| o.policy.get(k)))
        .copied()
        .unwrap_or(frame.sdv_pose);
    let view = View { cx: center.x, cy: center.y };
    let size = 2.0 * HALF_VIEW * PX_PER_M;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<text x="8" y="20" font-family="monospace" font-size="14">frame {t}</text>"#);

    for cw in &log.map.crosswalks {
        let _ = writeln!(
            s,
            r##"<polygon class="crosswalk" points="{}" fill="#ffd700" fill-opacity="0.6" stroke="#c8a800"/>"##,
            view.points(&cw.polygon)
        );
    }
    for lane in &log.map.lanes {
        for side in [&lane.left, &lane.right] {
            let _ = writeln!(
                s,
                r##"<polyline class="lane-boundary" points="{}" fill="none" stroke="#808080" stroke-width="1"/>"##,
                view.points(side)
            );
        }
        let state = lane.traffic_light.then(|| frame.traffic_light_states.get(&lane.id).copied()).flatten();
        let (class, width) = if lane.traffic_light { ("lane-light", 3) } else { ("lane-mid", 1) };
        let _ = writeln!(
            s,
            r#"<polyline class="{class}" points="{}" fill="none" stroke="{}" stroke-width="{width}" stroke-dasharray="6,4"/>"#,
            view.points(&lane.mid),
            if lane.traffic_light { light_color(state) } else { "#d0d0d0" }
        );
    }
    for a in &frame.agents {
        let opacity = if a.kind == AgentKind::Vehicle { "0.8" } else { "0.6" };
        let _ = writeln!(
            s,
            r##"<polygon class="agent" points="{}" fill="#1f77b4" fill-opacity="{opacity}" stroke="#0b3d66"/>"##,
            view.points(&corners(&a.pose, a.extent))
        );
    }
    if let Some(o) = overlay {
        let _ = writeln!(
            s,
            r##"<polyline class="expert-path" points="{}" fill="none" stroke="#000000" stroke-width="1.5"/>"##,
            view.points(&o.expert)
        );
        let path: Vec<[f64; 2]> = o.policy.iter().map(|p| [p.x, p.y]).collect();
        let _ = writeln!(
            s,
            r##"<polyline class="policy-path" points="{}" fill="none" stroke="#cc00cc" stroke-width="1.5"/>"##,
            view.points(&path)
        );
    }
    let _ = writeln!(
        s,
        r##"<polygon class="sdv-expert" points="{}" fill="none" stroke="#d62728" stroke-dasharray="3,2"/>"##,
        view.points(&corners(&frame.sdv_pose, log.sdv_extent))
    );
    let _ = writeln!(
        s,
        r##"<polygon class="sdv" points="{}" fill="#d62728" stroke="#7f1010"/>"##,
        view.points(&corners(&center, log.sdv_extent))
    );
    s.push_str("</svg>\n");
    s
}
