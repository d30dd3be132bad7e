//! Static nonlinearities flanking the linear core.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural choice for a static block, without parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "order", rename_all = "lowercase")]
pub enum BlockKind {
    Identity,
    /// Piecewise linear with this many segments.
    Pwl(usize),
    /// Polynomial of this degree.
    Poly(usize),
}

impl BlockKind {
    pub fn n_params(&self) -> usize {
        match *self {
            BlockKind::Identity => 0,
            BlockKind::Pwl(k) => k + 1,
            BlockKind::Poly(d) => d + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BlockKind::Pwl(0) => Err(Error::Config("pwl block needs at least one segment".into())),
            BlockKind::Poly(d) if d > 3 => Err(Error::Config(format!("polynomial degree {d} exceeds 3"))),
            _ => Ok(()),
        }
    }

    /// Compact label such as `pwl-3`.
    pub fn label(&self) -> String {
        match *self {
            BlockKind::Identity => "identity".into(),
            BlockKind::Pwl(k) => format!("pwl-{k}"),
            BlockKind::Poly(d) => format!("poly-{d}"),
        }
    }
}

impl std::str::FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown block kind {s:?}"));
        if s == "identity" {
            return Ok(BlockKind::Identity);
        }
        let (kind, n) = s.split_once('-').ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        let k = match kind {
            "pwl" => BlockKind::Pwl(n),
            "poly" => BlockKind::Poly(n),
            _ => return Err(bad()),
        };
        k.validate()?;
        Ok(k)
    }
}

/// Parameterized static map `v ↦ block(v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StaticBlock {
    Identity,
    /// Uniform breakpoints over `[lo, hi]`; `values` holds one node per
    /// breakpoint. Linear extrapolation beyond both ends.
    Pwl { lo: f64, hi: f64, values: Vec<f64> },
    /// `coeffs[i]` multiplies `v^i`.
    Poly { coeffs: Vec<f64> },
}

impl StaticBlock {
    pub fn kind(&self) -> BlockKind {
        match self {
            StaticBlock::Identity => BlockKind::Identity,
            StaticBlock::Pwl { values, .. } => BlockKind::Pwl(values.len() - 1),
            StaticBlock::Poly { coeffs } => BlockKind::Poly(coeffs.len() - 1),
        }
    }

    /// Pwl block whose nodes lie on `v ↦ offset + slope·v`.
    pub fn pwl_line(segments: usize, lo: f64, hi: f64, offset: f64, slope: f64) -> Self {
        let (lo, hi) = widen(lo, hi);
        let values = (0..=segments)
            .map(|j| offset + slope * (lo + (hi - lo) * j as f64 / segments as f64))
            .collect();
        StaticBlock::Pwl { lo, hi, values }
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            StaticBlock::Pwl { lo, hi, values } => {
                let k = values.len() - 1;
                (0..=k).map(|j| lo + (hi - lo) * j as f64 / k as f64).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn eval(&self, v: f64) -> f64 {
        match self {
            StaticBlock::Identity => v,
            StaticBlock::Pwl { lo, hi, values } => {
                let k = values.len() - 1;
                let width = (hi - lo) / k as f64;
                let pos = (v - lo) / width;
                let seg = (pos.floor().max(0.0) as usize).min(k - 1);
                let frac = pos - seg as f64;
                values[seg] + frac * (values[seg + 1] - values[seg])
            }
            StaticBlock::Poly { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * v + c),
        }
    }

    /// Values of the basis functions at `v`; the block output is their
    /// dot product with [`Self::params`].
    pub fn basis(&self, v: f64, out: &mut Vec<f64>) {
        out.clear();
        match self {
            StaticBlock::Identity => {}
            StaticBlock::Pwl { lo, hi, values } => {
                let k = values.len() - 1;
                out.resize(k + 1, 0.0);
                let width = (hi - lo) / k as f64;
                let pos = (v - lo) / width;
                let seg = (pos.floor().max(0.0) as usize).min(k - 1);
                let frac = pos - seg as f64;
                out[seg] = 1.0 - frac;
                out[seg + 1] = frac;
            }
            StaticBlock::Poly { coeffs } => {
                let mut p = 1.0;
                for _ in coeffs {
                    out.push(p);
                    p *= v;
                }
            }
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            StaticBlock::Identity => &[],
            StaticBlock::Pwl { values, .. } => values,
            StaticBlock::Poly { coeffs } => coeffs,
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        match self {
            StaticBlock::Identity => {}
            StaticBlock::Pwl { values, .. } => values.copy_from_slice(p),
            StaticBlock::Poly { coeffs } => coeffs.copy_from_slice(p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StaticBlock::Identity => Ok(()),
            StaticBlock::Pwl { lo, hi, values } => {
                if values.len() < 2 || !(hi > lo) {
                    return Err(Error::Config("pwl block needs ≥ 2 nodes and increasing breakpoints".into()));
                }
                Ok(())
            }
            StaticBlock::Poly { coeffs } => {
                if coeffs.is_empty() || coeffs.len() > 4 {
                    return Err(Error::Config("polynomial degree must lie in 0..=3".into()));
                }
                Ok(())
            }
        }
    }
}

/// Guarantees a non-degenerate breakpoint interval.
fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo > 1e-9 * lo.abs().max(hi.abs()).max(1.0) {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_passes_through() {
        assert_eq!(StaticBlock::Identity.eval(3.25), 3.25);
    }

    #[test]
    fn one_segment_pwl_is_affine() {
        let b = StaticBlock::Pwl { lo: 2.0, hi: 6.0, values: vec![1.0, 9.0] };
        assert_eq!(b.eval(4.0), 5.0);
        assert_eq!(b.eval(8.0), 13.0);
        assert_eq!(b.eval(0.0), -3.0);
    }

    #[test]
    fn constant_polynomial() {
        let b = StaticBlock::Poly { coeffs: vec![2.5, 0.0, 0.0] };
        for v in [-10.0, 0.0, 3.0] {
            assert_eq!(b.eval(v), 2.5);
        }
    }

    #[test]
    fn pwl_is_continuous_at_breakpoints() {
        let b = StaticBlock::Pwl { lo: 0.0, hi: 3.0, values: vec![0.0, 2.0, -1.0, 4.0] };
        for bp in b.breakpoints() {
            let l = b.eval(bp - 1e-12);
            let r = b.eval(bp + 1e-12);
            assert!((l - r).abs() < 1e-9);
        }
        assert_eq!(b.eval(1.0), 2.0);
        assert_eq!(b.eval(1.5), 0.5);
    }

    #[test]
    fn basis_reproduces_eval() {
        let blocks = [
            StaticBlock::Pwl { lo: -1.0, hi: 2.0, values: vec![0.3, -2.0, 1.0, 0.5] },
            StaticBlock::Poly { coeffs: vec![1.0, -2.0, 0.5, 0.1] },
        ];
        let mut basis = Vec::new();
        for b in &blocks {
            for v in [-3.0, -0.4, 0.0, 1.7, 5.0] {
                b.basis(v, &mut basis);
                let dot: f64 = basis.iter().zip(b.params()).map(|(x, y)| x * y).sum();
                assert!((dot - b.eval(v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("pwl-3".parse::<BlockKind>().unwrap(), BlockKind::Pwl(3));
        assert_eq!("poly-2".parse::<BlockKind>().unwrap(), BlockKind::Poly(2));
        assert_eq!("identity".parse::<BlockKind>().unwrap(), BlockKind::Identity);
        assert!("poly-4".parse::<BlockKind>().is_err());
        assert!("spline-2".parse::<BlockKind>().is_err());
        assert_eq!(BlockKind::Pwl(4).n_params(), 5);
    }
}
