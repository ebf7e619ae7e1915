//! Depth-sorted painter's rasterizer for the wrist cameras.

use serde::{Deserialize, Serialize};

use super::camera::CameraModel;
use super::geometry::{Rigid, V3};
use super::scene::Scene;
use crate::image::Image;
use crate::scara::{JointState, ScaraParams};

pub const BACKGROUND: [u8; 3] = [77, 64, 51];
pub const RIPE: [u8; 3] = [217, 20, 20];
pub const UNRIPE: [u8; 3] = [237, 237, 219];
pub const STEM: [u8; 3] = [38, 128, 31];
pub const LEAF: [u8; 3] = [51, 158, 51];
pub const FINGER: [u8; 3] = [140, 140, 140];

const NEAR: f64 = 1e-3;

/// Finger geometry in the end-effector frame (m).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerGeom {
    pub back: f64,
    pub front: f64,
    pub width: f64,
    pub half_height: f64,
    pub half_gap_closed: f64,
    pub half_gap_open: f64,
}

impl Default for FingerGeom {
    fn default() -> Self {
        FingerGeom { back: -0.025, front: 0.005, width: 0.006, half_height: 0.01, half_gap_closed: 0.004, half_gap_open: 0.02 }
    }
}

impl FingerGeom {
    pub fn half_gap(&self, grip: f64) -> f64 {
        self.half_gap_closed + (self.half_gap_open - self.half_gap_closed) * grip.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub draw_gripper: bool,
    pub fingers: FingerGeom,
    pub stem_width: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { draw_gripper: true, fingers: FingerGeom::default(), stem_width: 0.003 }
    }
}

enum Prim {
    Disc { center: V3, radius: f64 },
    Segment { a: V3, b: V3, width: f64 },
    Polygon(Vec<V3>),
}

struct Item {
    depth: f64,
    color: [u8; 3],
    prim: Prim,
}

/// Renders `scene` as seen by `cam` with the arm at `q` and the gripper at
/// aperture `grip`. Primitives are painted far to near.
pub fn render_camera(
    scene: &Scene,
    q: &JointState<f64>,
    grip: f64,
    cam: &CameraModel,
    params: &ScaraParams<f64>,
    opts: &RenderOptions,
) -> Image {
    let pose = cam.world_pose(q, params);
    let to_cam = |p: V3| pose.to_child(p);
    let mut items: Vec<Item> = Vec::new();

    for b in &scene.berries {
        let top = to_cam(b.top());
        let anchor = to_cam(b.anchor);
        items.push(Item {
            depth: 0.5 * (top.z + anchor.z),
            color: STEM,
            prim: Prim::Segment { a: anchor, b: top, width: opts.stem_width },
        });
        let c = to_cam(b.cur_pos);
        items.push(Item {
            depth: c.z,
            color: if b.ripe { RIPE } else { UNRIPE },
            prim: Prim::Disc { center: c, radius: b.radius },
        });
    }
    for l in &scene.leaves {
        let (a1, a2) = l.axis_vectors();
        let pts: Vec<V3> = (0..24)
            .map(|i| {
                let t = i as f64 * std::f64::consts::TAU / 24.0;
                to_cam(l.cur_center + a1 * t.cos() + a2 * t.sin())
            })
            .collect();
        let depth = pts.iter().map(|p| p.z).sum::<f64>() / pts.len() as f64;
        items.push(Item { depth, color: LEAF, prim: Prim::Polygon(pts) });
    }
    if opts.draw_gripper {
        let ee = super::camera::ee_frame(q, params);
        for quad in finger_quads(&ee, &opts.fingers, grip) {
            let pts: Vec<V3> = quad.iter().map(|p| to_cam(*p)).collect();
            let depth = pts.iter().map(|p| p.z).sum::<f64>() / 4.0;
            items.push(Item { depth, color: FINGER, prim: Prim::Polygon(pts) });
        }
    }

    // Stable sort keeps insertion order for equal depths.
    items.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    let mut img = Image::filled(cam.width, cam.height, BACKGROUND);
    for it in &items {
        draw_item(&mut img, cam, it);
    }
    img
}

/// Top and bottom faces of both fingers, in world coordinates.
pub fn finger_quads(ee: &Rigid, f: &FingerGeom, grip: f64) -> Vec<[V3; 4]> {
    let gap = f.half_gap(grip);
    let mut out = Vec::with_capacity(4);
    for side in [-1.0, 1.0] {
        let (y0, y1) = (side * gap - f.width / 2.0, side * gap + f.width / 2.0);
        for z in [f.half_height, -f.half_height] {
            out.push([
                ee.to_parent(V3::new(f.back, y0, z)),
                ee.to_parent(V3::new(f.front, y0, z)),
                ee.to_parent(V3::new(f.front, y1, z)),
                ee.to_parent(V3::new(f.back, y1, z)),
            ]);
        }
    }
    out
}

fn draw_item(img: &mut Image, cam: &CameraModel, it: &Item) {
    match &it.prim {
        Prim::Disc { center, radius } => {
            if center.z <= NEAR {
                return;
            }
            let u = cam.cx + cam.fx * center.x / center.z;
            let v = cam.cy + cam.fy * center.y / center.z;
            fill_ellipse(img, u, v, cam.fx * radius / center.z, cam.fy * radius / center.z, it.color);
        }
        Prim::Segment { a, b, width } => {
            let Some((a, b)) = clip_near(*a, *b) else { return };
            let pa = px(cam, a);
            let pb = px(cam, b);
            let half = (cam.fx * width / (0.5 * (a.z + b.z))).max(1.0) / 2.0;
            draw_thick_line(img, pa, pb, half, it.color);
        }
        Prim::Polygon(pts) => {
            if pts.iter().any(|p| p.z <= NEAR) {
                return;
            }
            let poly: Vec<(f64, f64)> = pts.iter().map(|p| px(cam, *p)).collect();
            fill_convex(img, &poly, it.color);
        }
    }
}

fn px(cam: &CameraModel, p: V3) -> (f64, f64) {
    (cam.cx + cam.fx * p.x / p.z, cam.cy + cam.fy * p.y / p.z)
}

fn clip_near(a: V3, b: V3) -> Option<(V3, V3)> {
    match (a.z > NEAR, b.z > NEAR) {
        (true, true) => Some((a, b)),
        (false, false) => None,
        (a_in, _) => {
            let t = (NEAR - a.z) / (b.z - a.z);
            let m = a + (b - a) * t;
            Some(if a_in { (a, m) } else { (m, b) })
        }
    }
}

/// Pixel `(i, j)` is covered when its integer coordinate lies inside.
fn pixel_range(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let lo = lo.ceil().max(0.0);
    let hi = (hi.floor() + 1.0).min(n as f64);
    if !(lo < hi) {
        return 0..0;
    }
    lo as usize..hi as usize
}

pub fn fill_ellipse(img: &mut Image, u: f64, v: f64, ru: f64, rv: f64, color: [u8; 3]) {
    if !(ru > 0.0 && rv > 0.0) || !u.is_finite() || !v.is_finite() {
        return;
    }
    for j in pixel_range(v - rv, v + rv, img.height()) {
        for i in pixel_range(u - ru, u + ru, img.width()) {
            let du = (i as f64 - u) / ru;
            let dv = (j as f64 - v) / rv;
            if du * du + dv * dv <= 1.0 {
                img.set(i, j, color);
            }
        }
    }
}

pub fn draw_thick_line(img: &mut Image, a: (f64, f64), b: (f64, f64), half: f64, color: [u8; 3]) {
    if ![a.0, a.1, b.0, b.1].iter().all(|v| v.is_finite()) {
        return;
    }
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for j in pixel_range(a.1.min(b.1) - half, a.1.max(b.1) + half, img.height()) {
        for i in pixel_range(a.0.min(b.0) - half, a.0.max(b.0) + half, img.width()) {
            let (pu, pv) = (i as f64 - a.0, j as f64 - a.1);
            let t = if len2 > 0.0 { ((pu * dx + pv * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (ex, ey) = (pu - t * dx, pv - t * dy);
            if ex * ex + ey * ey <= half * half {
                img.set(i, j, color);
            }
        }
    }
}

pub fn fill_convex(img: &mut Image, poly: &[(f64, f64)], color: [u8; 3]) {
    if poly.len() < 3 || !poly.iter().all(|p| p.0.is_finite() && p.1.is_finite()) {
        return;
    }
    let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in poly {
        u0 = u0.min(p.0);
        u1 = u1.max(p.0);
        v0 = v0.min(p.1);
        v1 = v1.max(p.1);
    }
    let n = poly.len();
    for j in pixel_range(v0, v1, img.height()) {
        for i in pixel_range(u0, u1, img.width()) {
            let (x, y) = (i as f64, j as f64);
            let (mut pos, mut neg) = (false, false);
            for k in 0..n {
                let (a, b) = (poly[k], poly[(k + 1) % n]);
                let c = (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                pos |= c > 0.0;
                neg |= c < 0.0;
            }
            if !(pos && neg) {
                img.set(i, j, color);
            }
        }
    }
}
