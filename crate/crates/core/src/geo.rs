//! Coordinate types, spherical Web Mercator projection, and projected-geometry
//! measurements (area, bounds, aspect ratio).
//!
//! All geometry is computed in 64-bit floats on the spherical Web Mercator
//! plane with `R = 6378137 m`. Types are immutable after construction and
//! every operation here is a pure function.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Spherical earth radius used by Web Mercator, in meters.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Latitude band inside which Web Mercator is defined, degrees (exclusive).
///
/// Equals `atan(sinh(pi))` in degrees, so that a latitude strictly inside the
/// band always projects to `|y| < pi * R`.
pub const MAX_ABS_LAT_DEG: f64 = 85.051_128_779_806_59;

/// Half-width of the Web Mercator validity square, in meters (`pi * R`).
pub fn mercator_limit_m() -> f64 {
    PI * EARTH_RADIUS_M
}

/// Errors raised by coordinate validation and geometry measurements.
#[derive(Debug, Clone, PartialEq)]
pub enum GeoError {
    /// Latitude outside the open Web Mercator band.
    LatitudeOutOfBand(f64),
    /// A coordinate component is NaN or infinite.
    NonFinite(&'static str),
    /// A projected point lies outside the validity square.
    MercatorOutOfRange { x: f64, y: f64 },
    /// A ring has fewer than three distinct vertices.
    TooFewVertices(usize),
    /// The exterior ring crosses itself.
    SelfIntersection,
    /// Geometry collapses to zero extent (collinear ring, empty box).
    DegenerateGeometry(&'static str),
    /// Box corners are not ordered min <= max.
    InvalidBBox,
}

impl fmt::Display for GeoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeoError::LatitudeOutOfBand(lat) => {
                write!(f, "latitude {lat} outside the Web Mercator band (+/-{MAX_ABS_LAT_DEG})")
            }
            GeoError::NonFinite(what) => write!(f, "{what} is not finite"),
            GeoError::MercatorOutOfRange { x, y } => {
                write!(f, "mercator point ({x}, {y}) outside the validity square")
            }
            GeoError::TooFewVertices(n) => {
                write!(f, "ring has {n} distinct vertices, need at least 3")
            }
            GeoError::SelfIntersection => write!(f, "exterior ring is self-intersecting"),
            GeoError::DegenerateGeometry(what) => write!(f, "degenerate geometry: {what}"),
            GeoError::InvalidBBox => write!(f, "bounding box corners are not min/max ordered"),
        }
    }
}

impl std::error::Error for GeoError {}

/// Geographic coordinate in degrees, longitude wrapped into `[-180, 180]`,
/// latitude strictly inside the Web Mercator band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct LonLat {
    lon: f64,
    lat: f64,
}

impl LonLat {
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeoError> {
        if !lon.is_finite() {
            return Err(GeoError::NonFinite("longitude"));
        }
        if !lat.is_finite() {
            return Err(GeoError::NonFinite("latitude"));
        }
        if lat.abs() >= MAX_ABS_LAT_DEG {
            return Err(GeoError::LatitudeOutOfBand(lat));
        }
        let mut lon = lon;
        while lon > 180.0 {
            lon -= 360.0;
        }
        while lon < -180.0 {
            lon += 360.0;
        }
        Ok(LonLat { lon, lat })
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }
}

impl TryFrom<(f64, f64)> for LonLat {
    type Error = GeoError;

    fn try_from((lon, lat): (f64, f64)) -> Result<Self, Self::Error> {
        LonLat::new(lon, lat)
    }
}

impl From<LonLat> for (f64, f64) {
    fn from(p: LonLat) -> (f64, f64) {
        (p.lon, p.lat)
    }
}

/// Point on the Web Mercator plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MercatorPoint {
    pub x: f64,
    pub y: f64,
}

impl MercatorPoint {
    pub fn new(x: f64, y: f64) -> Result<Self, GeoError> {
        if !x.is_finite() || !y.is_finite() {
            return Err(GeoError::NonFinite("mercator coordinate"));
        }
        // Small relative slack so round-tripped boundary values survive.
        let limit = mercator_limit_m() * (1.0 + 1e-9);
        if x.abs() > limit || y.abs() > limit {
            return Err(GeoError::MercatorOutOfRange { x, y });
        }
        Ok(MercatorPoint { x, y })
    }
}

/// Project a geographic coordinate onto the Web Mercator plane.
///
/// `x = R * lon_rad`, `y = R * ln(tan(pi/4 + lat_rad/2))`, evaluated as
/// `R * asinh(tan(lat_rad))` which is the same function but exact at the
/// equator.
pub fn project(p: LonLat) -> MercatorPoint {
    let x = EARTH_RADIUS_M * p.lon().to_radians();
    let y = EARTH_RADIUS_M * p.lat().to_radians().tan().asinh();
    MercatorPoint { x, y }
}

/// Inverse of [`project`]. Fails for points outside the validity square.
pub fn unproject(p: MercatorPoint) -> Result<LonLat, GeoError> {
    let limit = mercator_limit_m() * (1.0 + 1e-9);
    if !p.x.is_finite() || !p.y.is_finite() || p.x.abs() > limit || p.y.abs() > limit {
        return Err(GeoError::MercatorOutOfRange { x: p.x, y: p.y });
    }
    let lon = (p.x / EARTH_RADIUS_M).to_degrees().clamp(-180.0, 180.0);
    let lat = (2.0 * (p.y / EARTH_RADIUS_M).exp().atan() - PI / 2.0).to_degrees();
    LonLat::new(lon, lat)
}

/// Axis-aligned box on the Web Mercator plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBBox {
    pub min: MercatorPoint,
    pub max: MercatorPoint,
}

impl GeoBBox {
    pub fn new(min: MercatorPoint, max: MercatorPoint) -> Result<Self, GeoError> {
        if min.x > max.x || min.y > max.y {
            return Err(GeoError::InvalidBBox);
        }
        Ok(GeoBBox { min, max })
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> MercatorPoint {
        MercatorPoint {
            x: (self.min.x + self.max.x) / 2.0,
            y: (self.min.y + self.max.y) / 2.0,
        }
    }

    pub fn intersects(&self, other: &GeoBBox) -> bool {
        self.min.x <= other.max.x
            && self.max.x >= other.min.x
            && self.min.y <= other.max.y
            && self.max.y >= other.min.y
    }

    pub fn contains_point(&self, p: &MercatorPoint) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    /// Box with width and height swapped around the same min corner.
    pub fn transpose(&self) -> GeoBBox {
        GeoBBox {
            min: self.min,
            max: MercatorPoint {
                x: self.min.x + self.height(),
                y: self.min.y + self.width(),
            },
        }
    }
}

/// Ratio of the longer box side to the shorter one, always >= 1.
pub fn aspect_ratio(b: &GeoBBox) -> Result<f64, GeoError> {
    let (w, h) = (b.width(), b.height());
    if w <= 0.0 || h <= 0.0 {
        return Err(GeoError::DegenerateGeometry("zero-extent box"));
    }
    Ok(w.max(h) / w.min(h))
}

/// Simple polygon in geographic coordinates: one exterior ring plus zero or
/// more hole rings. Rings are stored without the closing vertex and treated
/// as cyclic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    exterior: Vec<LonLat>,
    holes: Vec<Vec<LonLat>>,
}

impl Polygon {
    /// Validate and normalize rings. Accepts rings with or without an
    /// explicit closing vertex; consecutive duplicate vertices are dropped.
    pub fn new(exterior: Vec<LonLat>, holes: Vec<Vec<LonLat>>) -> Result<Self, GeoError> {
        let exterior = normalize_ring(exterior)?;
        if ring_self_intersects(&exterior) {
            return Err(GeoError::SelfIntersection);
        }
        let holes = holes
            .into_iter()
            .map(normalize_ring)
            .collect::<Result<Vec<_>, _>>()?;
        let poly = Polygon { exterior, holes };
        if poly.projected_area() <= 0.0 {
            return Err(GeoError::DegenerateGeometry("zero projected area"));
        }
        Ok(poly)
    }

    pub fn exterior(&self) -> &[LonLat] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<LonLat>] {
        &self.holes
    }

    /// Shoelace area of the projected exterior minus projected holes, m^2.
    /// Orientation-insensitive.
    pub fn projected_area(&self) -> f64 {
        let ext = ring_shoelace(&self.exterior).abs();
        let holes: f64 = self.holes.iter().map(|h| ring_shoelace(h).abs()).sum();
        ext - holes
    }

    /// Tight axis-aligned bounds of the projected exterior ring.
    pub fn projected_bbox(&self) -> GeoBBox {
        let mut min = MercatorPoint {
            x: f64::INFINITY,
            y: f64::INFINITY,
        };
        let mut max = MercatorPoint {
            x: f64::NEG_INFINITY,
            y: f64::NEG_INFINITY,
        };
        for v in &self.exterior {
            let p = project(*v);
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        GeoBBox { min, max }
    }
}

fn normalize_ring(mut ring: Vec<LonLat>) -> Result<Vec<LonLat>, GeoError> {
    if ring.len() >= 2 && ring.first() == ring.last() {
        ring.pop();
    }
    ring.dedup();
    if ring.len() >= 2 && ring.first() == ring.last() {
        ring.pop();
    }
    if ring.len() < 3 {
        return Err(GeoError::TooFewVertices(ring.len()));
    }
    Ok(ring)
}

/// Signed shoelace area of a cyclic ring after projection.
fn ring_shoelace(ring: &[LonLat]) -> f64 {
    let pts: Vec<MercatorPoint> = ring.iter().map(|v| project(*v)).collect();
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let a = &pts[i];
        let b = &pts[(i + 1) % pts.len()];
        acc += a.x * b.y - b.x * a.y;
    }
    acc / 2.0
}

/// Proper-crossing test between non-adjacent edges of a cyclic ring, done in
/// lon/lat space where the edges are defined.
fn ring_self_intersects(ring: &[LonLat]) -> bool {
    let n = ring.len();
    for i in 0..n {
        for j in (i + 1)..n {
            // Skip adjacent edges (they share an endpoint).
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (a1, a2) = (ring[i], ring[(i + 1) % n]);
            let (b1, b2) = (ring[j], ring[(j + 1) % n]);
            if segments_cross(a1, a2, b1, b2) {
                return true;
            }
        }
    }
    false
}

fn orient(a: LonLat, b: LonLat, c: LonLat) -> f64 {
    (b.lon() - a.lon()) * (c.lat() - a.lat()) - (b.lat() - a.lat()) * (c.lon() - a.lon())
}

fn segments_cross(a1: LonLat, a2: LonLat, b1: LonLat, b2: LonLat) -> bool {
    let d1 = orient(a1, a2, b1);
    let d2 = orient(a1, a2, b2);
    let d3 = orient(b1, b2, a1);
    let d4 = orient(b1, b2, a2);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}
