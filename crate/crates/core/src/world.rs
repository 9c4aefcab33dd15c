//! Analytic tunnel world: two infinite side walls plus vertical cylinders.
//!
//! Everything here is two-dimensional. The drone flies at a fixed altitude and
//! all geometry is extruded vertically, so a horizontal raycast is enough to
//! recover the distance seen by any pixel of the camera.

use std::fmt;
use std::fs;
use std::ops::{Add, Mul, Neg, Sub};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Rays that travel this far without hitting anything report a far-plane hit.
pub const FAR_PLANE: f64 = 50.0;

/// Radius of the drone footprint used for collision tests.
pub const BODY_RADIUS: f64 = 0.3;

/// Fraction of the tunnel length, measured from x = 0, that is kept clear of
/// obstacles and used for start positions.
pub const START_ZONE_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("ray from occupied point ({x}, {y})")]
    OccupiedOrigin { x: f64, y: f64 },
    #[error("ray direction is not a unit vector (norm {0})")]
    NonUnitDirection(f64),
    #[error("invalid tunnel {name:?}: {reason}")]
    InvalidTunnel { name: String, reason: String },
    #[error("tunnel file {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec2 {
        self * (1.0 / self.norm())
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// A vertical cylinder of infinite height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub center: Vec2,
    pub radius: f64,
}

impl Obstacle {
    pub const fn new(x: f64, y: f64, radius: f64) -> Self {
        Self {
            center: Vec2::new(x, y),
            radius,
        }
    }
}

/// Geometry of one tunnel. Travel is along +x; the side walls are the lines
/// y = ±width/2 and the exit at x = length is open.
#[derive(Debug, Clone, PartialEq)]
pub struct TunnelSpec {
    pub id: u32,
    pub name: String,
    pub length: f64,
    pub width: f64,
    pub obstacles: Vec<Obstacle>,
}

impl TunnelSpec {
    pub fn new(
        id: u32,
        name: impl Into<String>,
        length: f64,
        width: f64,
        obstacles: Vec<Obstacle>,
    ) -> Result<Self, WorldError> {
        let spec = Self {
            id,
            name: name.into(),
            length,
            width,
            obstacles,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let fail = |reason: String| {
            Err(WorldError::InvalidTunnel {
                name: self.name.clone(),
                reason,
            })
        };
        if !(self.length.is_finite() && self.length > 0.0) {
            return fail(format!("length must be positive, got {}", self.length));
        }
        if !(self.width.is_finite() && self.width > 2.0 * BODY_RADIUS) {
            return fail(format!(
                "width must exceed the drone diameter {}, got {}",
                2.0 * BODY_RADIUS,
                self.width
            ));
        }
        let start_zone = START_ZONE_FRACTION * self.length;
        for (i, ob) in self.obstacles.iter().enumerate() {
            let c = ob.center;
            if !(ob.radius.is_finite() && ob.radius > 0.0) {
                return fail(format!("obstacle {i}: radius must be positive"));
            }
            if ob.radius >= self.width / 2.0 {
                return fail(format!("obstacle {i}: radius must be below width/2"));
            }
            if !(c.x > 0.0 && c.x < self.length && c.y.abs() < self.width / 2.0) {
                return fail(format!("obstacle {i}: center outside the tunnel footprint"));
            }
            if c.x - ob.radius - BODY_RADIUS <= start_zone {
                return fail(format!("obstacle {i}: intrudes into the start zone"));
            }
        }
        Ok(())
    }

    pub fn half_width(&self) -> f64 {
        self.width / 2.0
    }

    /// True when `p` lies strictly between the walls and outside every cylinder.
    pub fn is_free(&self, p: Vec2) -> bool {
        p.y.abs() < self.half_width()
            && self
                .obstacles
                .iter()
                .all(|ob| (p - ob.center).norm() > ob.radius)
    }

    /// Signed clearance: distance from `p` to the nearest surface, negative
    /// when `p` is inside a wall or an obstacle.
    pub fn clearance(&self, p: Vec2) -> f64 {
        let wall = self.half_width() - p.y.abs();
        self.obstacles
            .iter()
            .map(|ob| (p - ob.center).norm() - ob.radius)
            .fold(wall, f64::min)
    }

    /// Midpoint of the free lateral interval containing `p` at abscissa `p.x`.
    /// Falls back to the tunnel axis when `p` is not in free space.
    pub fn free_centerline(&self, p: Vec2) -> f64 {
        let hw = self.half_width();
        let mut blocked: Vec<(f64, f64)> = self
            .obstacles
            .iter()
            .filter_map(|ob| {
                let dx = p.x - ob.center.x;
                let r2 = ob.radius * ob.radius - dx * dx;
                (r2 > 0.0).then(|| {
                    let h = r2.sqrt();
                    (ob.center.y - h, ob.center.y + h)
                })
            })
            .collect();
        blocked.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut lo = -hw;
        for (b0, b1) in blocked {
            if p.y < b0 {
                return 0.5 * (lo + b0.min(hw));
            }
            lo = lo.max(b1);
        }
        if p.y >= lo && p.y <= hw {
            0.5 * (lo + hw)
        } else {
            0.0
        }
    }

    /// Serialize as the key-value tunnel file format.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "id = {}\nname = {}\nlength = {}\nwidth = {}\n",
            self.id, self.name, self.length, self.width
        );
        for ob in &self.obstacles {
            s.push_str(&format!(
                "obstacle = {}, {}, {}\n",
                ob.center.x, ob.center.y, ob.radius
            ));
        }
        s
    }

    /// Parse the key-value tunnel file format. `origin` only labels errors.
    pub fn from_text(text: &str, origin: &str) -> Result<Self, WorldError> {
        let perr = |reason: String| WorldError::Parse {
            path: origin.to_string(),
            reason,
        };
        let num = |key: &str, v: &str| -> Result<f64, WorldError> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| perr(format!("{key}: not a number: {v:?}")))
        };
        let mut id = None;
        let mut name = None;
        let mut length = None;
        let mut width = None;
        let mut obstacles = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "id" => {
                    id = Some(
                        value
                            .parse::<u32>()
                            .map_err(|_| perr(format!("id: not an integer: {value:?}")))?,
                    )
                }
                "name" => name = Some(value.to_string()),
                "length" => length = Some(num(key, value)?),
                "width" => width = Some(num(key, value)?),
                "obstacle" => {
                    let parts: Vec<&str> = value.split(',').collect();
                    if parts.len() != 3 {
                        return Err(perr(format!(
                            "line {}: obstacle needs x, y, r",
                            lineno + 1
                        )));
                    }
                    obstacles.push(Obstacle::new(
                        num("obstacle x", parts[0])?,
                        num("obstacle y", parts[1])?,
                        num("obstacle r", parts[2])?,
                    ));
                }
                other => return Err(perr(format!("unknown key {other:?}"))),
            }
        }
        let id = id.ok_or_else(|| perr("missing id".into()))?;
        let length = length.ok_or_else(|| perr("missing length".into()))?;
        let width = width.ok_or_else(|| perr("missing width".into()))?;
        let name = name.unwrap_or_else(|| format!("tunnel{id}"));
        TunnelSpec::new(id, name, length, width, obstacles)
    }
}

impl fmt::Display for TunnelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "#{} {} ({} m x {} m, {} obstacles)",
            self.id,
            self.name,
            self.length,
            self.width,
            self.obstacles.len()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HitKind {
    Wall,
    Obstacle,
    FarPlane,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    pub kind: HitKind,
    /// Index of the obstacle hit, when `kind` is `Obstacle`.
    pub obstacle: Option<usize>,
}

/// Nearest surface along a horizontal ray. Walls extend past the tunnel exit,
/// so nothing but the far plane bounds a ray.
pub fn raycast(tunnel: &TunnelSpec, origin: Vec2, direction: Vec2) -> Result<RayHit, WorldError> {
    let n = direction.norm();
    if !((n - 1.0).abs() <= 1e-9) {
        return Err(WorldError::NonUnitDirection(n));
    }
    if !tunnel.is_free(origin) {
        return Err(WorldError::OccupiedOrigin {
            x: origin.x,
            y: origin.y,
        });
    }
    let mut best = RayHit {
        distance: FAR_PLANE,
        kind: HitKind::FarPlane,
        obstacle: None,
    };

    let hw = tunnel.half_width();
    if direction.y != 0.0 {
        let wall_y = if direction.y > 0.0 { hw } else { -hw };
        let t = (wall_y - origin.y) / direction.y;
        if t > 0.0 && t < best.distance {
            best = RayHit {
                distance: t,
                kind: HitKind::Wall,
                obstacle: None,
            };
        }
    }

    for (i, ob) in tunnel.obstacles.iter().enumerate() {
        let oc = origin - ob.center;
        let b = oc.dot(direction);
        let c = oc.dot(oc) - ob.radius * ob.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            continue;
        }
        // Origin is outside the circle (c > 0), so the near root is the entry point.
        let t = -b - disc.sqrt();
        if t > 0.0 && t < best.distance {
            best = RayHit {
                distance: t,
                kind: HitKind::Obstacle,
                obstacle: Some(i),
            };
        }
    }
    Ok(best)
}

/// True iff the drone footprint at `position` overlaps a wall or obstacle.
pub fn check_collision(tunnel: &TunnelSpec, position: Vec2, body_radius: f64) -> bool {
    tunnel.clearance(position) < body_radius
}

/// The six built-in tunnels.
pub fn tunnel_library() -> Vec<TunnelSpec> {
    let specs = [
        (0, "corridor", 20.0, 4.0, vec![]),
        (
            1,
            "easy",
            25.0,
            5.0,
            vec![Obstacle::new(10.0, 1.2, 0.5), Obstacle::new(18.0, -1.2, 0.5)],
        ),
        (
            2,
            "difficult",
            25.0,
            4.5,
            vec![
                Obstacle::new(8.0, 1.2, 0.45),
                Obstacle::new(14.0, 0.0, 0.5),
                Obstacle::new(20.0, -1.2, 0.45),
            ],
        ),
        (3, "narrow", 20.0, 3.0, vec![Obstacle::new(12.0, 0.6, 0.4)]),
        (
            4,
            "wide",
            30.0,
            6.0,
            vec![
                Obstacle::new(8.0, -1.5, 0.8),
                Obstacle::new(14.0, 1.5, 0.7),
                Obstacle::new(20.0, -0.5, 0.6),
                Obstacle::new(25.0, 2.0, 0.6),
            ],
        ),
        (
            5,
            "slalom",
            30.0,
            3.5,
            vec![
                Obstacle::new(9.0, 0.8, 0.4),
                Obstacle::new(15.0, -0.8, 0.4),
                Obstacle::new(21.0, 0.8, 0.4),
            ],
        ),
    ];
    specs
        .into_iter()
        .map(|(id, name, length, width, obstacles)| {
            TunnelSpec::new(id, name, length, width, obstacles).expect("built-in tunnel is valid")
        })
        .collect()
}

/// Load every `*.tunnel` file in `dir`, sorted by id.
pub fn load_tunnel_dir(dir: &Path) -> Result<Vec<TunnelSpec>, WorldError> {
    let io = |source| WorldError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut specs = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("tunnel") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|source| WorldError::Io {
            path: path.display().to_string(),
            source,
        })?;
        specs.push(TunnelSpec::from_text(&text, &path.display().to_string())?);
    }
    specs.sort_by_key(|s| s.id);
    if specs.is_empty() {
        return Err(WorldError::Parse {
            path: dir.display().to_string(),
            reason: "no .tunnel files found".into(),
        });
    }
    Ok(specs)
}

/// SHA-256 over the canonical text form of each tunnel, hex encoded.
pub fn library_hash(tunnels: &[TunnelSpec]) -> String {
    let mut h = Sha256::new();
    for t in tunnels {
        h.update(t.to_text().as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Uniform start position in the obstacle-free start zone, at least
/// `BODY_RADIUS` from both walls.
pub fn sample_start(tunnel: &TunnelSpec, seed: u64) -> Vec2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_start_with(tunnel, &mut rng)
}

pub fn sample_start_with<R: Rng + ?Sized>(tunnel: &TunnelSpec, rng: &mut R) -> Vec2 {
    let x_max = START_ZONE_FRACTION * tunnel.length;
    // Keep a small margin so the snapped lattice point stays collision-free.
    let y_max = tunnel.half_width() - BODY_RADIUS - 1e-3;
    loop {
        let p = Vec2::new(
            rng.random_range(0.0..=x_max),
            rng.random_range(-y_max..=y_max),
        );
        if !check_collision(tunnel, p, BODY_RADIUS) {
            return p;
        }
    }
}
