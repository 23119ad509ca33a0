//! Gauss–Legendre rules and quadrature settings.

use serde::{Deserialize, Serialize};

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// Newton iteration on P_n from the Chebyshev-like initial guesses.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// ∫_a^b f.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let h = 0.5 * (b - a);
        let m = 0.5 * (a + b);
        let mut s = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            s += w * f(m + h * x);
        }
        s * h
    }

    /// Nodes and weights mapped to [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = 0.5 * (b - a);
        let m = 0.5 * (a + b);
        self.nodes.iter().zip(&self.weights).map(move |(x, w)| (m + h * x, w * h))
    }

    /// Composite rule over `panels` equal subintervals of [a, b].
    pub fn composite(&self, a: f64, b: f64, panels: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
        let h = (b - a) / panels as f64;
        (0..panels).map(|p| self.integrate(a + h * p as f64, a + h * (p + 1) as f64, &mut f)).sum()
    }
}

/// (P_n(x), P_n'(x)) by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Per-axis quadrature order and membership subgrid resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub order: usize,
    pub resolution: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self { order: 5, resolution: 8 }
    }
}

impl Quadrature {
    pub fn new(order: usize, resolution: usize) -> Result<Self, QuadratureError> {
        if order < 2 {
            return Err(QuadratureError::Order(order));
        }
        if resolution == 0 {
            return Err(QuadratureError::Resolution);
        }
        Ok(Self { order, resolution })
    }

    pub fn rule(&self) -> GaussRule {
        GaussRule::new(self.order)
    }

    /// Midpoints of the resolution^3 subgrid of (-1, 1)^3.
    pub fn subgrid(&self) -> Vec<[f64; 3]> {
        let n = self.resolution;
        let c = |i: usize| -1.0 + (2 * i + 1) as f64 / n as f64;
        let mut out = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out.push([c(i), c(j), c(k)]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuadratureError {
    #[error("quadrature order must be at least 2, got {0}")]
    Order(usize),
    #[error("subgrid resolution must be positive")]
    Resolution,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_high_degree() {
        for n in 1..12 {
            let g = GaussRule::new(n);
            for deg in 0..(2 * n) {
                let got = g.integrate(0.0, 2.0, |x| x.powi(deg as i32));
                let want = 2f64.powi(deg as i32 + 1) / (deg + 1) as f64;
                assert!((got - want).abs() < 1e-12 * want.max(1.0), "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn composite_matches_single() {
        let g = GaussRule::new(4);
        let f = |x: f64| x.sin();
        assert!((g.composite(0.0, 3.0, 16, f) - (1.0 - 3f64.cos())).abs() < 1e-13);
    }

    #[test]
    fn rejects_low_order() {
        assert!(Quadrature::new(1, 8).is_err());
        assert_eq!(Quadrature::default().subgrid().len(), 512);
    }
}
