//! Per-frame plot data: one CSV and one SVG per rollout step.
//!
//! Positions are in the observer frame of the predicted frame (x right,
//! y forward, meters) with world coordinates alongside. The in-image
//! columns are the observation the prediction was made from.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crowdwm_core::datagen::{write_atomic, Episode};
use crowdwm_core::eval::{RolloutResult, RolloutStep};
use crowdwm_core::geometry::{Camera, Vec2};

use crate::{CliError, EXPORT_FORMAT};

fn cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn frame_csv(ep: &Episode, step: &RolloutStep, k: usize, config: &serde_json::Value) -> String {
    let frame = &ep.frames[step.tau];
    let next = &ep.frames[step.tau + 1];
    let gaussian = step.predicted.iter().any(|p| p.sigma.is_some());
    let mut s = String::new();
    let _ = writeln!(s, "# format {EXPORT_FORMAT}");
    let _ = writeln!(s, "# config {config}");
    let _ = writeln!(
        s,
        "# episode {} step {} observed_frame {} predicted_frame {}",
        ep.id,
        k + 1,
        frame.frame_id,
        next.frame_id
    );
    let _ = writeln!(
        s,
        "# observer x {:.6} y {:.6} heading {:.6}",
        step.pose.position.x, step.pose.position.y, step.pose.heading
    );
    s.push_str("ped_id,scored,camera,u,v,pred_x,pred_y,pred_dx,pred_dy");
    if gaussian {
        s.push_str(",sigma_x,sigma_y");
    }
    s.push_str(",true_x,true_y,pred_world_x,pred_world_y,true_world_x,true_world_y\n");
    for (i, &id) in step.ped_ids.iter().enumerate() {
        let obs = frame.find(id).and_then(|p| p.in_image);
        let p = &step.predicted[i];
        let pw = step.pose.to_world(p.state.position());
        let truth = step.truth[i];
        let tw = truth.map(|t| step.pose.to_world(t.position()));
        let camera = match obs.map(|o| o.camera) {
            Some(Camera::Front) => "front",
            Some(Camera::Rear) => "rear",
            None => "",
        };
        let _ = write!(
            s,
            "{id},{},{camera},{},{},{:.6},{:.6},{:.6},{:.6}",
            u8::from(step.scored[i]),
            cell(obs.map(|o| o.u)),
            cell(obs.map(|o| o.v)),
            p.state.x,
            p.state.y,
            p.state.dx,
            p.state.dy
        );
        if gaussian {
            let (sx, sy) = p.sigma.unzip();
            let _ = write!(s, ",{},{}", cell(sx), cell(sy));
        }
        let _ = writeln!(
            s,
            ",{},{},{:.6},{:.6},{},{}",
            cell(truth.map(|t| t.x)),
            cell(truth.map(|t| t.y)),
            pw.x,
            pw.y,
            cell(tw.map(|w| w.x)),
            cell(tw.map(|w| w.y))
        );
    }
    s
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

const PANEL: f64 = 400.0;

/// Top-down view (left) and both image planes (right).
pub fn frame_svg(ep: &Episode, step: &RolloutStep, config: &serde_json::Value) -> String {
    let frame = &ep.frames[step.tau];
    let intr = ep.rig.intrinsics;
    let mut pts: Vec<Vec2> = step.predicted.iter().map(|p| p.state.position()).collect();
    pts.extend(step.truth.iter().flatten().map(|t| t.position()));
    let extent = pts
        .iter()
        .fold(5.0_f64, |m, p| m.max(p.x.abs()).max(p.y.abs()))
        * 1.1;
    let scale = PANEL / (2.0 * extent);
    let to_screen = |p: Vec2| (PANEL / 2.0 + p.x * scale, PANEL / 2.0 - p.y * scale);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = PANEL * 2.0 + 20.0,
        h = PANEL
    );
    let _ = writeln!(
        s,
        "<metadata>format {EXPORT_FORMAT}; episode {}; frame {}; config {}</metadata>",
        escape_xml(&ep.id),
        ep.frames[step.tau + 1].frame_id,
        escape_xml(&config.to_string())
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{PANEL}" height="{PANEL}" fill="white" stroke="black"/>"#
    );
    let (ox, oy) = to_screen(Vec2::new(0.0, 0.0));
    let _ = writeln!(
        s,
        r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="black"/>"#,
        ox,
        oy - 8.0,
        ox - 5.0,
        oy + 5.0,
        ox + 5.0,
        oy + 5.0
    );
    for (i, p) in step.predicted.iter().enumerate() {
        let (x, y) = to_screen(p.state.position());
        let color = if step.scored[i] { "red" } else { "gray" };
        match p.sigma {
            Some((sx, sy)) => {
                let _ = writeln!(
                    s,
                    r#"<ellipse cx="{x:.2}" cy="{y:.2}" rx="{:.2}" ry="{:.2}" fill="{color}" fill-opacity="0.25" stroke="{color}"/>"#,
                    (sx * scale).max(1.0),
                    (sy * scale).max(1.0)
                );
            }
            None => {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#
                );
            }
        }
        if let Some(t) = step.truth[i] {
            let (tx, ty) = to_screen(t.position());
            let _ = writeln!(
                s,
                r#"<path d="M{:.2},{:.2}L{:.2},{:.2}M{:.2},{:.2}L{:.2},{:.2}" stroke="blue"/>"#,
                tx - 4.0,
                ty - 4.0,
                tx + 4.0,
                ty + 4.0,
                tx - 4.0,
                ty + 4.0,
                tx + 4.0,
                ty - 4.0
            );
        }
    }
    // image planes: front on top, rear below
    let img_scale = PANEL / (2.0 * intr.height).max(intr.width);
    let left = PANEL + 20.0;
    for (row, cam) in [Camera::Front, Camera::Rear].into_iter().enumerate() {
        let top = row as f64 * PANEL / 2.0;
        let _ = writeln!(
            s,
            r#"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            intr.width * img_scale,
            intr.height * img_scale
        );
        for p in &frame.peds {
            if let Some(o) = p.in_image.filter(|o| o.camera == cam) {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="green"/>"#,
                    left + o.u * img_scale,
                    top + o.v * img_scale
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `frame_NNN.csv` and `frame_NNN.svg` for every rollout step into
/// `dir` and returns the written paths.
pub fn export(
    dir: &Path,
    ep: &Episode,
    result: &RolloutResult,
    config: &serde_json::Value,
) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::with_capacity(2 * result.steps.len());
    for (k, step) in result.steps.iter().enumerate() {
        for (ext, body) in [
            ("csv", frame_csv(ep, step, k, config)),
            ("svg", frame_svg(ep, step, config)),
        ] {
            let path = dir.join(format!("frame_{:03}.{ext}", k + 1));
            write_atomic(&path, body.as_bytes())
                .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
            written.push(path);
        }
    }
    Ok(written)
}
