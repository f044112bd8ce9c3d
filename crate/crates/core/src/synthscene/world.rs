//! World model: roads as centreline polylines plus constant-velocity actors.

use serde::{Deserialize, Serialize};

pub const LANE_WIDTH: f64 = 3.5;
/// Painted divider line half-width in meters (image rendering).
pub const DIVIDER_HALF_WIDTH: f64 = 0.12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Truck,
    Pedestrian,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Truck, ObjectClass::Pedestrian];

    pub fn id(self) -> usize {
        match self {
            ObjectClass::Car => 0,
            ObjectClass::Truck => 1,
            ObjectClass::Pedestrian => 2,
        }
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    /// Nominal (length, width, height) in meters.
    pub fn nominal_size(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => [4.5, 1.9, 1.6],
            ObjectClass::Truck => [8.0, 2.5, 3.2],
            ObjectClass::Pedestrian => [0.7, 0.7, 1.8],
        }
    }

    pub fn color(self) -> [f32; 3] {
        match self {
            ObjectClass::Car => [0.85, 0.12, 0.1],
            ObjectClass::Truck => [0.12, 0.25, 0.85],
            ObjectClass::Pedestrian => [0.95, 0.8, 0.1],
        }
    }
}

/// Synthetic attribute set: `Moving` = 0, `Stopped` = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Moving,
    Stopped,
}

/// Speed above which an actor counts as moving, m/s.
pub const MOVING_SPEED: f64 = 0.5;

impl Attribute {
    pub fn id(self) -> usize {
        match self {
            Attribute::Moving => 0,
            Attribute::Stopped => 1,
        }
    }

    pub fn from_speed(speed: f64) -> Self {
        if speed > MOVING_SPEED {
            Attribute::Moving
        } else {
            Attribute::Stopped
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub centerline: Vec<[f64; 2]>,
    pub lanes: usize,
    pub lane_width: f64,
}

/// Closest point on a polyline: (distance along the line, signed lateral
/// offset with left positive, unit direction there).
pub(crate) fn polyline_frame(line: &[[f64; 2]], p: [f64; 2]) -> Option<(f64, f64, [f64; 2])> {
    let mut best: Option<(f64, f64, f64, [f64; 2])> = None;
    let mut s0 = 0.0;
    for w in line.windows(2) {
        let (a, b) = (w[0], w[1]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if len == 0.0 {
            continue;
        }
        let u = [d[0] / len, d[1] / len];
        let ap = [p[0] - a[0], p[1] - a[1]];
        let t = (ap[0] * u[0] + ap[1] * u[1]).clamp(0.0, len);
        let c = [a[0] + u[0] * t, a[1] + u[1] * t];
        let dist2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        let lateral = u[0] * ap[1] - u[1] * ap[0];
        if best.is_none_or(|b| dist2 < b.0) {
            best = Some((dist2, s0 + t, lateral, u));
        }
        s0 += len;
    }
    best.map(|(_, s, l, u)| (s, l, u))
}

impl Road {
    pub fn half_width(&self) -> f64 {
        self.lanes as f64 * self.lane_width / 2.0
    }

    pub fn length(&self) -> f64 {
        self.centerline
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        match polyline_frame(&self.centerline, p) {
            Some((s, lat, _)) => {
                // Road ends are cut square.
                s > 0.0 && s < self.length() && lat.abs() <= self.half_width()
            }
            None => false,
        }
    }

    /// True when `p` is within `tol` of a lane divider line.
    pub fn on_divider(&self, p: [f64; 2], tol: f64) -> bool {
        if self.lanes < 2 {
            return false;
        }
        let Some((s, lat, _)) = polyline_frame(&self.centerline, p) else {
            return false;
        };
        if s <= 0.0 || s >= self.length() {
            return false;
        }
        (1..self.lanes).any(|k| {
            let off = -self.half_width() + k as f64 * self.lane_width;
            (lat - off).abs() <= tol
        })
    }

    /// Point and heading at arc length `s` shifted `lateral` meters left.
    pub fn point_at(&self, s: f64, lateral: f64) -> ([f64; 2], f64) {
        let mut acc = 0.0;
        let n = self.centerline.len();
        for (i, w) in self.centerline.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if len == 0.0 {
                continue;
            }
            if s <= acc + len || i == n - 2 {
                let t = s - acc;
                let u = [d[0] / len, d[1] / len];
                let p = [a[0] + u[0] * t - u[1] * lateral, a[1] + u[1] * t + u[0] * lateral];
                return (p, u[1].atan2(u[0]));
            }
            acc += len;
        }
        (self.centerline[0], 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub instance_id: usize,
    pub class: ObjectClass,
    pub size: [f64; 3],
    /// World position at t = 0.
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    pub yaw: f64,
}

impl Actor {
    pub fn position_at(&self, t: f64) -> [f64; 2] {
        [self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t]
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub roads: Vec<Road>,
    pub actors: Vec<Actor>,
}

impl WorldModel {
    pub fn drivable(&self, p: [f64; 2]) -> bool {
        self.roads.iter().any(|r| r.contains(p))
    }

    /// Divider test that ignores divider paint crossing another road's surface.
    pub fn divider(&self, p: [f64; 2], tol: f64) -> bool {
        self.roads.iter().enumerate().any(|(i, r)| {
            r.on_divider(p, tol)
                && !self
                    .roads
                    .iter()
                    .enumerate()
                    .any(|(j, o)| j != i && o.contains(p))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_road_queries() {
        let r = Road {
            centerline: vec![[-50.0, 0.0], [50.0, 0.0]],
            lanes: 2,
            lane_width: LANE_WIDTH,
        };
        assert!(r.contains([0.0, 3.4]));
        assert!(!r.contains([0.0, 3.6]));
        assert!(!r.contains([60.0, 0.0]));
        assert!(r.on_divider([10.0, 0.05], 0.1));
        assert!(!r.on_divider([10.0, 1.0], 0.1));
        let (p, yaw) = r.point_at(55.0, -1.75);
        assert!((p[0] - 5.0).abs() < 1e-12 && (p[1] + 1.75).abs() < 1e-12 && yaw == 0.0);
    }
}
