/// Parameters of the relaxed logarithmic barrier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelaxedBarrierConfig {
    pub mu: f64,
    pub delta: f64,
}

impl Default for RelaxedBarrierConfig {
    fn default() -> Self {
        Self { mu: 0.1, delta: 1e-3 }
    }
}

impl RelaxedBarrierConfig {
    pub fn is_valid(&self) -> bool {
        self.mu > 0.0 && self.delta > 0.0 && self.mu.is_finite() && self.delta.is_finite()
    }
}

/// Penalty for the inequality `z ≥ 0`: `-μ ln z` above `δ`, a quadratic
/// extension matching value, slope and curvature below.
pub fn relaxed_barrier(z: f64, config: &RelaxedBarrierConfig) -> f64 {
    let RelaxedBarrierConfig { mu, delta } = *config;
    if z >= delta {
        -mu * z.ln()
    } else {
        let t = (z - 2.0 * delta) / delta;
        mu * (0.5 * t * t - delta.ln() - 0.5)
    }
}

/// First derivative of [`relaxed_barrier`].
pub fn relaxed_barrier_slope(z: f64, config: &RelaxedBarrierConfig) -> f64 {
    let RelaxedBarrierConfig { mu, delta } = *config;
    if z >= delta {
        -mu / z
    } else {
        mu * (z - 2.0 * delta) / (delta * delta)
    }
}

/// Second derivative of [`relaxed_barrier`].
pub fn relaxed_barrier_curvature(z: f64, config: &RelaxedBarrierConfig) -> f64 {
    let RelaxedBarrierConfig { mu, delta } = *config;
    if z >= delta {
        mu / (z * z)
    } else {
        mu / (delta * delta)
    }
}
