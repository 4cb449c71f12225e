use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NODE_CAP: usize = 2_000_000;

/// Rectangular tensor grid with 1 to 3 axes; the last axis varies fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    pub bounds: Vec<(f64, f64)>,
    pub points: Vec<usize>,
}

impl GridDomain {
    pub fn new(bounds: Vec<(f64, f64)>, points: Vec<usize>) -> Result<Self> {
        Self::with_cap(bounds, points, DEFAULT_NODE_CAP)
    }

    pub fn with_cap(bounds: Vec<(f64, f64)>, points: Vec<usize>, cap: usize) -> Result<Self> {
        if bounds.is_empty() || bounds.len() > 3 {
            return Err(Error::usage(format!("grid must have 1 to 3 axes, got {}", bounds.len())));
        }
        if bounds.len() != points.len() {
            return Err(Error::usage("grid bounds and points differ in length"));
        }
        for (k, (&(lo, hi), &n)) in bounds.iter().zip(&points).enumerate() {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::usage(format!("axis {k}: need finite lo < hi, got [{lo}, {hi}]")));
            }
            if n < 3 {
                return Err(Error::usage(format!("axis {k}: need at least 3 points, got {n}")));
            }
        }
        let total = points.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n));
        match total {
            Some(t) if t <= cap => Ok(Self { bounds, points }),
            _ => Err(Error::usage(format!("grid exceeds the node cap of {cap}"))),
        }
    }

    /// Same box and resolution on every axis.
    pub fn cube(dims: usize, lo: f64, hi: f64, points: usize) -> Result<Self> {
        Self::new(vec![(lo, hi); dims], vec![points; dims])
    }

    pub fn dims(&self) -> usize {
        self.bounds.len()
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        (hi - lo) / (self.points[axis] - 1) as f64
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        // Written about the midpoint so that symmetric boxes give exactly
        // mirrored coordinates.
        let (lo, hi) = self.bounds[axis];
        let n = (self.points[axis] - 1) as f64;
        let t = (2.0 * i as f64 - n) / n;
        0.5 * (lo + hi) + 0.5 * (hi - lo) * t
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.points[axis + 1..].iter().product()
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims()];
        for k in (0..self.dims()).rev() {
            out[k] = idx % self.points[k];
            idx /= self.points[k];
        }
        out
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.coord(k, i))
            .collect()
    }

    /// One-dimensional trapezoid weight along `axis` at index `i`.
    pub fn axis_weight(&self, axis: usize, i: usize) -> f64 {
        let h = self.spacing(axis);
        if i == 0 || i == self.points[axis] - 1 {
            0.5 * h
        } else {
            h
        }
    }

    /// Tensor trapezoid weights of all nodes.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        (0..self.len())
            .map(|idx| {
                self.multi_index(idx)
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| self.axis_weight(k, i))
                    .product()
            })
            .collect()
    }

    /// Nodes within the outer 2% (at least one node) of any axis.
    pub fn shell_mask(&self) -> Vec<bool> {
        let widths: Vec<usize> = self
            .points
            .iter()
            .map(|&n| ((0.02 * n as f64).ceil() as usize).max(1))
            .collect();
        (0..self.len())
            .map(|idx| {
                self.multi_index(idx)
                    .iter()
                    .enumerate()
                    .any(|(k, &i)| i < widths[k] || i + widths[k] >= self.points[k])
            })
            .collect()
    }

    /// Box enlarged by half its width on every side of every axis.
    pub fn suggested_enlargement(&self) -> Vec<(f64, f64)> {
        self.bounds
            .iter()
            .map(|&(lo, hi)| {
                let c = 0.5 * (lo + hi);
                let w = 0.75 * (hi - lo);
                (c - w, c + w)
            })
            .collect()
    }
}

/// Node values of a scalar field on a [`GridDomain`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub domain: GridDomain,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn new(domain: GridDomain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::Dimension { expected: domain.len(), got: values.len() });
        }
        if let Some(coord) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "grid field".into(), coord });
        }
        Ok(Self { domain, values })
    }

    pub fn from_fn<F: Fn(&[f64]) -> f64>(domain: &GridDomain, f: F) -> Result<Self> {
        let values = (0..domain.len()).map(|i| f(&domain.point(i))).collect();
        Self::new(domain.clone(), values)
    }

    pub fn zeros(domain: &GridDomain) -> Self {
        Self { domain: domain.clone(), values: vec![0.0; domain.len()] }
    }

    /// Trapezoid integral of the field against Lebesgue measure.
    pub fn integral(&self) -> f64 {
        self.domain
            .trapezoid_weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v)
            .sum()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
