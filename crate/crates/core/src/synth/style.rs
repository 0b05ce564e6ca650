//! Fixed appearance of every object identity.
//!
//! Identity `i` gets a unique hue, one of six silhouettes and one of four
//! surface patterns. Patterns are defined in object-local coordinates so
//! they travel with the object.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Silhouette {
    Square,
    Circle,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
    Bullseye,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Style {
    pub silhouette: Silhouette,
    pub pattern: Pattern,
    pub primary: [f64; 3],
    pub secondary: [f64; 3],
}

const SILHOUETTES: [Silhouette; 6] = [
    Silhouette::Square,
    Silhouette::Circle,
    Silhouette::Triangle,
    Silhouette::Diamond,
    Silhouette::Cross,
    Silhouette::Ring,
];

const PATTERNS: [Pattern; 4] = [Pattern::Solid, Pattern::Stripes, Pattern::Checker, Pattern::Bullseye];

/// HSV in `[0, 1]` to RGB, on the usual six-sector hue wheel.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h - libm::floor(h)) * 6.0;
    let sector = libm::floor(h6);
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn style_of(object_id: usize, n_objects: usize) -> Style {
    let n = n_objects.max(1);
    // Co-prime stride spreads neighbouring ids around the hue wheel.
    let hue = ((object_id * 7) % n) as f64 / n as f64;
    let primary = hsv_to_rgb(hue, 0.85, 0.85);
    let secondary = hsv_to_rgb(hue + 0.5, 0.6, 0.35);
    Style {
        silhouette: SILHOUETTES[object_id % SILHOUETTES.len()],
        pattern: PATTERNS[(object_id / SILHOUETTES.len()) % PATTERNS.len()],
        primary,
        secondary,
    }
}

impl Style {
    /// Whether local coordinates `(u, v)` in `[-1, 1]²` fall on the object.
    pub fn covers(&self, u: f64, v: f64) -> bool {
        if u.abs() > 1.0 || v.abs() > 1.0 {
            return false;
        }
        match self.silhouette {
            Silhouette::Square => true,
            Silhouette::Circle => u * u + v * v <= 1.0,
            Silhouette::Triangle => u.abs() <= (v + 1.0) / 2.0,
            Silhouette::Diamond => u.abs() + v.abs() <= 1.0,
            Silhouette::Cross => u.abs() <= 0.4 || v.abs() <= 0.4,
            Silhouette::Ring => {
                let r2 = u * u + v * v;
                (0.25..=1.0).contains(&r2)
            }
        }
    }

    /// Surface colour at local coordinates.
    pub fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let alt = match self.pattern {
            Pattern::Solid => false,
            Pattern::Stripes => (libm::floor((v + 1.0) * 2.0) as i64) % 2 == 1,
            Pattern::Checker => {
                ((libm::floor((u + 1.0) * 1.5) as i64) + (libm::floor((v + 1.0) * 1.5) as i64)) % 2 == 1
            }
            Pattern::Bullseye => u * u + v * v <= 0.2,
        };
        if alt {
            self.secondary
        } else {
            self.primary
        }
    }
}
