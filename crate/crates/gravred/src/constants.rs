//! Physical constants (CODATA 2018, SI units).

/// Newtonian constant of gravitation, m³ kg⁻¹ s⁻².
pub const G: f64 = 6.674_30e-11;

/// Reduced Planck constant, J s.
pub const HBAR: f64 = 1.054_571_817e-34;

/// Speed of light in vacuum, m/s.
pub const C: f64 = 299_792_458.0;

/// Density of liquid water used by the presets, kg/m³.
pub const WATER_DENSITY: f64 = 1000.0;
