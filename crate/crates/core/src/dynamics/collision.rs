//! Oriented-rectangle contact tests between car bodies and a simple
//! inelastic contact response.

use crate::geom::Vec2;

use super::{CarModel, VehicleState};

/// Damage added for every control step spent in contact.
pub const DAMAGE_QUANTUM: f64 = 1.0;

/// A car footprint: a rectangle centered on the car position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Obb {
    pub fn new(center: Vec2, heading: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            heading,
            half_length: 0.5 * length,
            half_width: 0.5 * width,
        }
    }

    pub fn of(state: &VehicleState, model: &CarModel) -> Self {
        Self::new(state.position, state.heading, model.length, model.width)
    }

    fn axes(&self) -> [Vec2; 2] {
        let fwd = Vec2::from_heading(self.heading);
        [fwd, fwd.perp()]
    }

    /// Corners in counterclockwise order.
    pub fn corners(&self) -> [Vec2; 4] {
        let [fwd, left] = self.axes();
        let f = fwd * self.half_length;
        let l = left * self.half_width;
        [
            self.center + f + l,
            self.center - f + l,
            self.center - f - l,
            self.center + f - l,
        ]
    }

    fn radius_along(&self, axis: Vec2) -> f64 {
        let [fwd, left] = self.axes();
        self.half_length * fwd.dot(axis).abs() + self.half_width * left.dot(axis).abs()
    }

    /// Minimum translation (unit normal pointing from `self` to `other`, depth)
    /// when the interiors overlap. Touching rectangles do not overlap.
    pub fn penetration(&self, other: &Obb) -> Option<(Vec2, f64)> {
        let d = other.center - self.center;
        let mut best: Option<(Vec2, f64)> = None;
        for axis in self.axes().into_iter().chain(other.axes()) {
            let dist = d.dot(axis);
            let depth = self.radius_along(axis) + other.radius_along(axis) - dist.abs();
            if depth <= 0.0 {
                return None;
            }
            if best.is_none_or(|(_, b)| depth < b) {
                let n = if dist < 0.0 { -axis } else { axis };
                best = Some((n, depth));
            }
        }
        best
    }

    pub fn overlaps(&self, other: &Obb) -> bool {
        self.penetration(other).is_some()
    }
}

/// All unordered pairs `(i, j)` with `i < j` whose footprints overlap.
pub fn detect_collisions(states: &[VehicleState], models: &[CarModel]) -> Vec<(usize, usize)> {
    assert_eq!(states.len(), models.len(), "one model per state");
    let boxes: Vec<Obb> = states.iter().zip(models).map(|(s, m)| Obb::of(s, m)).collect();
    let mut pairs = Vec::new();
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if boxes[i].overlaps(&boxes[j]) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Separate two overlapping cars and remove their approaching velocity along
/// the contact normal (perfectly inelastic along the normal, tangential motion kept).
pub fn resolve_contact(a: &mut VehicleState, a_model: &CarModel, b: &mut VehicleState, b_model: &CarModel) {
    let Some((n, depth)) = Obb::of(a, a_model).penetration(&Obb::of(b, b_model)) else {
        return;
    };
    a.position = a.position - n * (0.5 * depth);
    b.position = b.position + n * (0.5 * depth);

    let va = a.world_velocity();
    let vb = b.world_velocity();
    let closing = (va - vb).dot(n);
    if closing <= 0.0 {
        return;
    }
    let inv_a = 1.0 / a_model.mass;
    let inv_b = 1.0 / b_model.mass;
    let impulse = closing / (inv_a + inv_b);
    a.set_world_velocity(va - n * (impulse * inv_a));
    b.set_world_velocity(vb + n * (impulse * inv_b));
}

pub fn apply_damage(state: &VehicleState, collided: bool) -> VehicleState {
    let mut next = state.clone();
    if collided {
        next.damage += DAMAGE_QUANTUM;
    }
    next
}
