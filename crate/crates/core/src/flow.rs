//! Pinhole camera, depth rendering and geometric optic flow.
//!
//! Image coordinates are centered: `u` grows to starboard, `v` grows downward,
//! and pixel `(i, j)` of a `W x H` image samples `u = i + 0.5 - W/2`,
//! `v = j + 0.5 - H/2`. The sample grid is symmetric about the optical axis.

use crate::world::{self, HitKind, TunnelSpec, Vec2, WorldError, FAR_PLANE};

/// Directions are only normalized where the flow magnitude exceeds this.
pub const FLOW_EPSILON: f64 = 1e-8;

pub const DEFAULT_WIDTH: usize = 64;
pub const DEFAULT_HEIGHT: usize = 48;
pub const DEFAULT_FOV_X: f64 = 120.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub width_px: usize,
    pub height_px: usize,
    pub fov_x: f64,
    pub fx: f64,
    pub fy: f64,
}

impl CameraModel {
    /// Square-pixel camera with the principal point at the image center.
    pub fn new(width_px: usize, height_px: usize, fov_x: f64) -> Self {
        assert!(width_px > 0 && height_px > 0, "camera needs a non-empty image");
        assert!(fov_x > 0.0 && fov_x < std::f64::consts::PI, "fov must be in (0, pi)");
        let fx = (width_px as f64 / 2.0) / (fov_x / 2.0).tan();
        Self {
            width_px,
            height_px,
            fov_x,
            fx,
            fy: fx,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width_px * self.height_px
    }

    /// Centered horizontal coordinate of column `i`.
    pub fn u_of(&self, i: usize) -> f64 {
        i as f64 + 0.5 - self.width_px as f64 / 2.0
    }

    /// Centered vertical coordinate of row `j`.
    pub fn v_of(&self, j: usize) -> f64 {
        j as f64 + 0.5 - self.height_px as f64 / 2.0
    }

    /// Unit ray through centered pixel `(u, v)` as (forward, starboard, down).
    pub fn pixel_ray(&self, u: f64, v: f64) -> [f64; 3] {
        let n = (self.fx * self.fx + u * u + v * v).sqrt();
        [self.fx / n, u / n, v / n]
    }

    /// Cosine of the elevation angle of the ray through `(u, v)`.
    pub fn elevation_cos(&self, u: f64, v: f64) -> f64 {
        let horiz = (self.fx * self.fx + u * u).sqrt();
        horiz / (horiz * horiz + v * v).sqrt()
    }
}

impl Default for CameraModel {
    fn default() -> Self {
        Self::new(DEFAULT_WIDTH, DEFAULT_HEIGHT, DEFAULT_FOV_X)
    }
}

/// Per-pixel distance to the scene, row-major `[v][u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub d: Vec<f64>,
}

impl DepthMap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[j * self.width + i]
    }
}

/// Egomotion in the camera axes used by the flow equation: `v[0]` to
/// starboard (image +u), `v[1]` down (image +v), `v[2]` forward along the
/// optical axis. `w` is the angular velocity about the same axes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VelocityState {
    pub v: [f64; 3],
    pub w: [f64; 3],
}

impl VelocityState {
    /// Pure translation given in body axes (forward, starboard, down).
    pub fn from_body(forward: f64, starboard: f64, down: f64) -> Self {
        Self {
            v: [starboard, down, forward],
            w: [0.0; 3],
        }
    }
}

/// Horizontal hit for every image column, plus the per-pixel slant depth.
#[derive(Debug, Clone)]
pub struct Render {
    pub depth: DepthMap,
    pub column_hits: Vec<world::RayHit>,
}

/// Slant distance to a vertical surface at horizontal distance `horizontal`.
pub fn slant_distance(horizontal: f64, elevation_cos: f64) -> f64 {
    (horizontal / elevation_cos).min(FAR_PLANE)
}

/// Depth image seen from `position` with the camera looking down +x.
///
/// Every surface is vertical, so each column needs one horizontal raycast and
/// rows differ only by the slant factor.
pub fn render(tunnel: &TunnelSpec, position: Vec2, camera: &CameraModel) -> Result<Render, WorldError> {
    let (w, h) = (camera.width_px, camera.height_px);
    let mut column_hits = Vec::with_capacity(w);
    for i in 0..w {
        let u = camera.u_of(i);
        let dir = Vec2::new(camera.fx, u).normalized();
        column_hits.push(world::raycast(tunnel, position, dir)?);
    }
    let mut d = vec![0.0; w * h];
    for j in 0..h {
        let v = camera.v_of(j);
        for (i, hit) in column_hits.iter().enumerate() {
            d[j * w + i] = if hit.kind == HitKind::FarPlane {
                FAR_PLANE
            } else {
                slant_distance(hit.distance, camera.elevation_cos(camera.u_of(i), v))
            };
        }
    }
    Ok(Render {
        depth: DepthMap { width: w, height: h, d },
        column_hits,
    })
}

pub fn render_depth(tunnel: &TunnelSpec, position: Vec2, camera: &CameraModel) -> Result<DepthMap, WorldError> {
    render(tunnel, position, camera).map(|r| r.depth)
}

/// Image-plane velocity of one pixel, with the 2x6 interaction matrix
/// applied verbatim to `[V; W]`.
pub fn pixel_flow(u: f64, v: f64, d: f64, fx: f64, fy: f64, vel: &VelocityState) -> (f64, f64) {
    let [v1, v2, v3] = vel.v;
    let [w1, w2, w3] = vel.w;
    let du = (fx * v1 - u * v3) / d - (u * v / fx) * w1 - ((fx * fx + u * u) / fx) * w2 - v * w3;
    let dv = (fy * v2 - v * v3) / d - ((fy * fy + u * u) / fy) * w1 + (u * v / fy) * w2 + u * w3;
    (du, dv)
}

/// Raw flow field `(u_dot, v_dot)` per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
}

pub fn optic_flow(depth: &DepthMap, vel: &VelocityState, camera: &CameraModel) -> FlowField {
    let (w, h) = (depth.width, depth.height);
    let mut du = vec![0.0; w * h];
    let mut dv = vec![0.0; w * h];
    for j in 0..h {
        let v = camera.v_of(j);
        for i in 0..w {
            let k = j * w + i;
            let (a, b) = pixel_flow(camera.u_of(i), v, depth.d[k], camera.fx, camera.fy, vel);
            du[k] = a;
            dv[k] = b;
        }
    }
    FlowField { width: w, height: h, du, dv }
}

/// Three-channel observation: magnitude plus unit direction.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowImage {
    pub width: usize,
    pub height: usize,
    pub magnitude: Vec<f64>,
    pub dir_x: Vec<f64>,
    pub dir_y: Vec<f64>,
}

impl FlowImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            magnitude: vec![0.0; n],
            dir_x: vec![0.0; n],
            dir_y: vec![0.0; n],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &FlowImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Network input, channel-major `[c][v][u]`. Magnitude is divided by
    /// `mag_scale` and clipped to [0, 1].
    pub fn to_input(&self, mag_scale: f64) -> Vec<f64> {
        let n = self.pixels();
        let mut out = Vec::with_capacity(3 * n);
        let inv = if mag_scale > 0.0 { 1.0 / mag_scale } else { 0.0 };
        out.extend(self.magnitude.iter().map(|m| (m * inv).clamp(0.0, 1.0)));
        out.extend_from_slice(&self.dir_x);
        out.extend_from_slice(&self.dir_y);
        out
    }

    /// CSV rows `u,v,mag,dir_x,dir_y` with pixel indices.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("u,v,mag,dir_x,dir_y\n");
        for j in 0..self.height {
            for i in 0..self.width {
                let k = j * self.width + i;
                s.push_str(&format!(
                    "{i},{j},{},{},{}\n",
                    self.magnitude[k], self.dir_x[k], self.dir_y[k]
                ));
            }
        }
        s
    }
}

pub fn encode_observation(flow: &FlowField) -> FlowImage {
    let n = flow.width * flow.height;
    let mut img = FlowImage::zeros(flow.width, flow.height);
    for k in 0..n {
        let (a, b) = (flow.du[k], flow.dv[k]);
        let m = a.hypot(b);
        img.magnitude[k] = m;
        if m > FLOW_EPSILON {
            img.dir_x[k] = a / m;
            img.dir_y[k] = b / m;
        }
    }
    img
}

/// Full observation pipeline for a drone at `position` moving with
/// `velocity` (global x forward, y starboard) and no rotation.
pub fn observe(
    tunnel: &TunnelSpec,
    position: Vec2,
    velocity: Vec2,
    camera: &CameraModel,
) -> Result<(FlowImage, Render), WorldError> {
    let r = render(tunnel, position, camera)?;
    let vel = VelocityState::from_body(velocity.x, velocity.y, 0.0);
    let img = encode_observation(&optic_flow(&r.depth, &vel, camera));
    Ok((img, r))
}
