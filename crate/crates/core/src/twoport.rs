//! Complex ABCD two-port blocks and cascade arithmetic.

use num_complex::Complex64;

pub type C64 = Complex64;

/// Transmission (ABCD) matrix of a two-port: [V1; I1] = M [V2; I2].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Abcd {
    pub a: C64,
    pub b: C64,
    pub c: C64,
    pub d: C64,
}

impl Abcd {
    pub fn identity() -> Self {
        Abcd {
            a: C64::new(1.0, 0.0),
            b: C64::new(0.0, 0.0),
            c: C64::new(0.0, 0.0),
            d: C64::new(1.0, 0.0),
        }
    }

    /// Series impedance element.
    pub fn series(z: C64) -> Self {
        Abcd {
            a: C64::new(1.0, 0.0),
            b: z,
            c: C64::new(0.0, 0.0),
            d: C64::new(1.0, 0.0),
        }
    }

    /// Shunt admittance element.
    pub fn shunt(y: C64) -> Self {
        Abcd {
            a: C64::new(1.0, 0.0),
            b: C64::new(0.0, 0.0),
            c: y,
            d: C64::new(1.0, 0.0),
        }
    }

    /// Conversion from Y-parameters; requires y21 != 0.
    pub fn from_y(y11: C64, y12: C64, y21: C64, y22: C64) -> Option<Self> {
        if y21.norm() == 0.0 {
            return None;
        }
        let det = y11 * y22 - y12 * y21;
        Some(Abcd {
            a: -y22 / y21,
            b: -C64::new(1.0, 0.0) / y21,
            c: -det / y21,
            d: -y11 / y21,
        })
    }

    pub fn determinant(&self) -> C64 {
        self.a * self.d - self.b * self.c
    }

    /// self followed by rhs (signal flows self -> rhs).
    pub fn cascade(&self, rhs: &Abcd) -> Abcd {
        Abcd {
            a: self.a * rhs.a + self.b * rhs.c,
            b: self.a * rhs.b + self.b * rhs.d,
            c: self.c * rhs.a + self.d * rhs.c,
            d: self.c * rhs.b + self.d * rhs.d,
        }
    }

    /// Input impedance at port 1 with port 2 terminated in `z_load`.
    pub fn input_impedance(&self, z_load: C64) -> C64 {
        (self.a * z_load + self.b) / (self.c * z_load + self.d)
    }

    /// Output impedance at port 2 with port 1 driven from `z_source`.
    pub fn output_impedance(&self, z_source: C64) -> C64 {
        (self.d * z_source + self.b) / (self.c * z_source + self.a)
    }

    /// S-parameters for a real reference impedance `z0` at both ports.
    pub fn to_s(&self, z0: f64) -> Option<[C64; 4]> {
        let z0c = C64::new(z0, 0.0);
        let den = self.a + self.b / z0c + self.c * z0c + self.d;
        if den.norm() == 0.0 || !den.is_finite() {
            return None;
        }
        let s11 = (self.a + self.b / z0c - self.c * z0c - self.d) / den;
        let s21 = C64::new(2.0, 0.0) / den;
        let s12 = C64::new(2.0, 0.0) * self.determinant() / den;
        let s22 = (-self.a + self.b / z0c - self.c * z0c + self.d) / den;
        Some([s11, s12, s21, s22])
    }
}

/// Magnitude in dB with a -100 dB floor so logs of exact zeros stay finite.
pub fn db20_floor(mag: f64) -> f64 {
    let db = 20.0 * mag.max(0.0).log10();
    db.max(-100.0)
}

/// Power ratio in dB with the same floor.
pub fn db10_floor(ratio: f64) -> f64 {
    let db = 10.0 * ratio.max(0.0).log10();
    db.max(-100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cascade_with_identity_is_noop() {
        let m = Abcd::series(C64::new(10.0, -3.0));
        let r = m.cascade(&Abcd::identity());
        assert_eq!(r, m);
    }

    #[test]
    fn series_resistor_sparams() {
        // 50 ohm series element between 50 ohm references:
        // S21 = 2/3, S11 = 1/3.
        let m = Abcd::series(C64::new(50.0, 0.0));
        let s = m.to_s(50.0).unwrap();
        assert!((s[2].norm() - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[0].norm() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn input_impedance_of_shunt_terminated_port() {
        let y = C64::new(0.02, 0.0); // 50 ohm shunt
        let m = Abcd::shunt(y);
        let zin = m.input_impedance(C64::new(50.0, 0.0));
        assert!((zin.re - 25.0).abs() < 1e-12);
        assert!(zin.im.abs() < 1e-12);
    }

    #[test]
    fn y_conversion_roundtrip_for_pi_network() {
        let y1 = C64::new(1e-3, 2e-3);
        let y2 = C64::new(5e-4, -1e-3);
        let z = C64::new(30.0, 12.0);
        let m = Abcd::shunt(y1).cascade(&Abcd::series(z)).cascade(&Abcd::shunt(y2));
        // Reciprocal network: determinant must be 1.
        let det = m.determinant();
        assert!((det.re - 1.0).abs() < 1e-12 && det.im.abs() < 1e-12);
    }

    #[test]
    fn db_floor_clamps() {
        assert_eq!(db20_floor(0.0), -100.0);
        assert!((db20_floor(1.0) - 0.0).abs() < 1e-12);
        assert!((db10_floor(100.0) - 20.0).abs() < 1e-12);
    }
}
