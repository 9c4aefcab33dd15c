//! File exports: 8-bit PGM images, CSV grids, trajectory logs.

use std::fs;
use std::io;
use std::path::Path;

use crate::explain::AttentionMap;
use crate::flow::FlowImage;
use crate::world::{TunnelSpec, Vec2};

/// Binary (P5) 8-bit graymap.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> io::Result<()> {
    fs::write(path, pgm_bytes(width, height, pixels))
}

/// Linear map of `[lo, hi]` onto `0..=255`, clamped.
pub fn quantize(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

/// Magnitude normalized to its maximum; directions mapped from `[-1, 1]`.
pub fn flow_planes(img: &FlowImage) -> [Vec<u8>; 3] {
    [
        quantize(&img.magnitude, 0.0, max_of(&img.magnitude)),
        quantize(&img.dir_x, -1.0, 1.0),
        quantize(&img.dir_y, -1.0, 1.0),
    ]
}

/// Writes `{stem}_mag.pgm`, `{stem}_dirx.pgm`, `{stem}_diry.pgm`.
pub fn write_flow_pgms(dir: &Path, stem: &str, img: &FlowImage) -> io::Result<()> {
    let [m, x, y] = flow_planes(img);
    write_pgm(&dir.join(format!("{stem}_mag.pgm")), img.width, img.height, &m)?;
    write_pgm(&dir.join(format!("{stem}_dirx.pgm")), img.width, img.height, &x)?;
    write_pgm(&dir.join(format!("{stem}_diry.pgm")), img.width, img.height, &y)
}

pub fn attention_pgm(map: &AttentionMap) -> Vec<u8> {
    pgm_bytes(map.width, map.height, &quantize(&map.values, 0.0, max_of(&map.values)))
}

/// Flow magnitude, then each map, side by side with a one-pixel white gap.
pub fn composite(obs: &FlowImage, maps: &[&AttentionMap]) -> (usize, usize, Vec<u8>) {
    let (w, h) = (obs.width, obs.height);
    let mut panels = vec![flow_planes(obs)[0].clone()];
    for m in maps {
        assert_eq!((m.width, m.height), (w, h), "map and observation differ in size");
        panels.push(quantize(&m.values, 0.0, max_of(&m.values)));
    }
    let total_w = panels.len() * (w + 1) - 1;
    let mut px = vec![255u8; total_w * h];
    for (p, panel) in panels.iter().enumerate() {
        let x0 = p * (w + 1);
        for j in 0..h {
            px[j * total_w + x0..j * total_w + x0 + w].copy_from_slice(&panel[j * w..(j + 1) * w]);
        }
    }
    (total_w, h, px)
}

pub fn attention_metadata(map: &AttentionMap, region: (usize, usize), samples: usize) -> String {
    format!(
        "timestep = {}\nagents = {}\nsigma = {}\nregion = {}x{}\nsamples = {}\nwidth = {}\nheight = {}\n",
        map.timestep, map.agents, map.sigma, region.0, region.1, samples, map.width, map.height
    )
}

/// One row of a rollout log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub reward: f64,
    pub event: &'static str,
}

pub const TRAJECTORY_HEADER: &str = "step,t,x,y,vx,vy,ax,ay,reward,event";

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut s = format!("{TRAJECTORY_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.step, r.t, r.x, r.y, r.vx, r.vy, r.ax, r.ay, r.reward, r.event
        ));
    }
    s
}

/// Top-down image of a tunnel: free space light, walls and obstacles dark,
/// the start zone shaded, and an optional path drawn black.
pub fn render_tunnel(tunnel: &TunnelSpec, px_per_m: f64, path: &[Vec2]) -> (usize, usize, Vec<u8>) {
    let margin = 0.5;
    let w = ((tunnel.length + 2.0 * margin) * px_per_m).ceil() as usize;
    let h = ((tunnel.width + 2.0 * margin) * px_per_m).ceil() as usize;
    let to_world = |i: usize, j: usize| {
        Vec2::new(
            (i as f64 + 0.5) / px_per_m - margin,
            tunnel.half_width() + margin - (j as f64 + 0.5) / px_per_m,
        )
    };
    let start_end = tunnel.length * crate::world::START_ZONE_FRACTION;
    let mut px = vec![0u8; w * h];
    for j in 0..h {
        for i in 0..w {
            let p = to_world(i, j);
            px[j * w + i] = if !tunnel.is_free(p) {
                60
            } else if p.x < 0.0 || p.x > tunnel.length {
                150
            } else if p.x <= start_end {
                210
            } else {
                240
            };
        }
    }
    for seg in path.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let n = (((b - a).norm() * px_per_m * 2.0).ceil() as usize).max(1);
        for k in 0..=n {
            let p = a + (b - a) * (k as f64 / n as f64);
            let i = ((p.x + margin) * px_per_m).floor();
            let j = ((tunnel.half_width() + margin - p.y) * px_per_m).floor();
            if i >= 0.0 && j >= 0.0 && (i as usize) < w && (j as usize) < h {
                px[j as usize * w + i as usize] = 0;
            }
        }
    }
    if let [only] = path {
        let i = ((only.x + margin) * px_per_m).floor() as usize;
        let j = ((tunnel.half_width() + margin - only.y) * px_per_m).floor() as usize;
        if i < w && j < h {
            px[j * w + i] = 0;
        }
    }
    (w, h, px)
}
