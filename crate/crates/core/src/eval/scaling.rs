//! Power-law fits of loss against a resource axis (training tokens or
//! non-embedding parameters), in the form L(x) = (C / x)^alpha, plus the
//! effective resource multipliers implied by two curves.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct ScalingFit {
    /// Scale constant (the x at which the fitted loss is 1).
    pub c: f64,
    /// Power-law exponent.
    pub alpha: f64,
    /// RMS error of the fit in log-loss space.
    pub residual: f64,
    pub n_points: usize,
}

impl ScalingFit {
    pub fn loss_at(&self, x: f64) -> f64 {
        (self.c / x).powf(self.alpha)
    }

    /// Invert the fitted law: the resource level at which the curve reaches
    /// the given loss.
    pub fn x_for_loss(&self, loss: f64) -> f64 {
        self.c * loss.powf(-1.0 / self.alpha)
    }
}

/// Least squares on ln L = alpha (ln C - ln x).
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 2 {
        return Err(Error::invalid("power-law fit needs at least two points"));
    }
    for &(x, l) in points {
        if x <= 0.0 || l <= 0.0 {
            return Err(Error::invalid(format!(
                "power-law fit needs positive coordinates, got ({}, {})",
                x, l
            )));
        }
    }
    let lx: Vec<f64> = points.iter().map(|&(x, _)| x.ln()).collect();
    let ll: Vec<f64> = points.iter().map(|&(_, l)| l.ln()).collect();
    let n = points.len() as f64;
    let mean_x = lx.iter().sum::<f64>() / n;
    let mean_y = ll.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("degenerate fit: all x values are equal"));
    }
    let sxy: f64 = lx
        .iter()
        .zip(&ll)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let alpha = -slope;
    if alpha.abs() < 1e-12 {
        return Err(Error::invalid("degenerate fit: loss is flat in x"));
    }
    let c = (intercept / alpha).exp();
    let mut sq = 0.0;
    for (x, y) in lx.iter().zip(&ll) {
        let pred = intercept + slope * x;
        sq += (pred - y) * (pred - y);
    }
    Ok(ScalingFit {
        c,
        alpha,
        residual: (sq / n).sqrt(),
        n_points: points.len(),
    })
}

/// Effective resource multipliers: for each achieved point (x, loss) of the
/// other model, how much of the resource the reference curve needs to reach
/// that same loss, divided by x.
pub fn effective_multipliers(reference: &ScalingFit, achieved: &[(f64, f64)]) -> Vec<(f64, f64)> {
    achieved
        .iter()
        .map(|&(x, loss)| (x, reference.x_for_loss(loss) / x))
        .collect()
}

/// Simple linear regression of y on ln x; returns (slope, intercept). Used
/// for probe NLL trends across dataset sizes.
pub fn log_linear_trend(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::invalid("trend needs at least two points"));
    }
    for &(x, _) in points {
        if x <= 0.0 {
            return Err(Error::invalid("trend needs positive x"));
        }
    }
    let lx: Vec<f64> = points.iter().map(|&(x, _)| x.ln()).collect();
    let y: Vec<f64> = points.iter().map(|&(_, y)| y).collect();
    let n = points.len() as f64;
    let mean_x = lx.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("degenerate trend: all x values are equal"));
    }
    let sxy: f64 = lx
        .iter()
        .zip(&y)
        .map(|(x, yy)| (x - mean_x) * (yy - mean_y))
        .sum();
    let slope = sxy / sxx;
    Ok((slope, mean_y - slope * mean_x))
}
