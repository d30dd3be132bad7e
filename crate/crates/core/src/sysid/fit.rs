//! Least-squares initialization, Levenberg–Marquardt refinement on
//! simulation error, and nAIC structure search.
//!
//! The core is fitted in controllable canonical form with denominator `a`
//! and numerator `c`. Parameter vectors are laid out `[H | a | c | W]`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_naic, spectral_radius, BlockKind, HwModel, LinearSsCore, Segment, StaticBlock};
use crate::error::{Error, Result};

const DT: f64 = 0.1;
const MAX_RADIUS: f64 = 0.999;

/// `(H kind, n_d, W kind)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Structure {
    pub input: BlockKind,
    pub order: usize,
    pub output: BlockKind,
}

impl Structure {
    pub fn n_params(&self) -> usize {
        self.input.n_params() + 2 * self.order + self.output.n_params()
    }

    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.input.label(), self.order, self.output.label())
    }

    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        self.output.validate()?;
        if !(1..=8).contains(&self.order) {
            return Err(Error::Config(format!("core order {} outside 1..=8", self.order)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Multi-start count for final fits (the unperturbed start is one of them).
    pub starts: usize,
    pub max_iter: usize,
    /// Starts and iterations used for each candidate during structure search.
    pub screen_starts: usize,
    pub screen_max_iter: usize,
    /// Relative cost decrease below which refinement stops.
    pub tol: f64,
    /// Relative jitter applied to parameters for the extra starts.
    pub jitter: f64,
    /// Upper bound on the spectral radius of the linear core.
    pub max_radius: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 3,
            max_iter: 150,
            screen_starts: 1,
            screen_max_iter: 60,
            tol: 1e-9,
            jitter: 0.05,
            max_radius: MAX_RADIUS,
        }
    }
}

impl FitOptions {
    fn screening(&self) -> Self {
        Self {
            starts: self.screen_starts.max(1),
            max_iter: self.screen_max_iter,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// Input map first (rich output map, highest order), then order, then
    /// output map.
    Staged,
    /// Every combination.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchGrid {
    pub mode: SearchMode,
    pub inputs: Vec<BlockKind>,
    pub orders: Vec<usize>,
    pub outputs: Vec<BlockKind>,
}

fn default_blocks() -> Vec<BlockKind> {
    let mut v = vec![BlockKind::Identity];
    v.extend((1..=5).map(BlockKind::Pwl));
    v.extend([BlockKind::Poly(2), BlockKind::Poly(3)]);
    v
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            mode: SearchMode::Staged,
            inputs: default_blocks(),
            orders: (2..=8).collect(),
            outputs: default_blocks(),
        }
    }
}

impl SearchGrid {
    pub fn normalized(&self) -> Result<Self> {
        let mut g = self.clone();
        for v in [&mut g.inputs, &mut g.outputs] {
            v.sort();
            v.dedup();
        }
        g.orders.sort();
        g.orders.dedup();
        if g.inputs.is_empty() || g.orders.is_empty() || g.outputs.is_empty() {
            return Err(Error::Config("structure grid is empty".into()));
        }
        for b in g.inputs.iter().chain(&g.outputs) {
            b.validate()?;
        }
        if let Some(&n) = g.orders.iter().find(|n| !(2..=8).contains(*n)) {
            return Err(Error::Config(format!("grid order {n} outside 2..=8")));
        }
        Ok(g)
    }

    /// Flexible block held fixed while other elements are screened.
    fn rich(blocks: &[BlockKind]) -> BlockKind {
        let pwl = blocks.iter().filter(|b| matches!(b, BlockKind::Pwl(_))).max();
        *pwl.unwrap_or_else(|| blocks.iter().max_by_key(|b| b.n_params()).unwrap())
    }
}

/// One evaluated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaicRow {
    pub structure: Structure,
    pub label: String,
    pub n_params: usize,
    pub mse: f64,
    pub naic: f64,
}

fn row_order(a: &NaicRow, b: &NaicRow) -> std::cmp::Ordering {
    a.naic
        .total_cmp(&b.naic)
        .then(a.n_params.cmp(&b.n_params))
        .then(a.structure.order.cmp(&b.structure.order))
        .then(a.structure.cmp(&b.structure))
}

// ---------------------------------------------------------------------------
// Fast companion-form simulation

struct Problem<'a> {
    segments: &'a [Segment],
    n_samples: usize,
    h: StaticBlock,
    w: StaticBlock,
    n_h: usize,
    n_d: usize,
    n_w: usize,
    max_radius: f64,
    /// The last numerator coefficient is implied by a unit DC gain, which
    /// removes the scale shared between the core and the static blocks.
    unit_gain: bool,
}

impl<'a> Problem<'a> {
    fn n_free_c(&self) -> usize {
        self.n_d - usize::from(self.unit_gain)
    }

    fn n_params(&self) -> usize {
        self.n_h + self.n_d + self.n_free_c() + self.n_w
    }

    fn blocks(&self, theta: &[f64]) -> (StaticBlock, StaticBlock) {
        let mut h = self.h.clone();
        h.set_params(&theta[..self.n_h]);
        let mut w = self.w.clone();
        w.set_params(&theta[self.n_h + self.n_d + self.n_free_c()..]);
        (h, w)
    }

    fn core<'t>(&self, theta: &'t [f64]) -> (&'t [f64], Vec<f64>) {
        let a = &theta[self.n_h..self.n_h + self.n_d];
        let mut c = theta[self.n_h + self.n_d..self.n_h + self.n_d + self.n_free_c()].to_vec();
        if self.unit_gain {
            c.push(1.0 + a.iter().sum::<f64>() - c.iter().sum::<f64>());
        }
        (a, c)
    }

    /// Residuals `prediction − y`; false on a non-finite rollout.
    fn residuals(&self, theta: &[f64], out: &mut Vec<f64>) -> bool {
        let (h, w) = self.blocks(theta);
        let (a, c) = self.core(theta);
        out.clear();
        for s in self.segments {
            let start = out.len();
            if !rollout(&h, a, &c, &w, s, out) {
                return false;
            }
            for (r, y) in out[start..].iter_mut().zip(&s.y) {
                *r -= y;
            }
        }
        true
    }

    /// Scales the denominator so all poles lie within `max_radius`.
    fn project(&self, theta: &mut [f64]) -> bool {
        let a = &mut theta[self.n_h..self.n_h + self.n_d];
        let rho = companion_radius(a);
        if rho <= self.max_radius + 1e-12 {
            return false;
        }
        let s = self.max_radius / rho;
        let mut f = 1.0;
        for ai in a.iter_mut() {
            f *= s;
            *ai *= f;
        }
        true
    }
}

fn companion_radius(a: &[f64]) -> f64 {
    let n = a.len();
    let mut m = DMatrix::zeros(n, n);
    for (j, v) in a.iter().enumerate() {
        m[(0, j)] = -v;
    }
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    spectral_radius(&m)
}

/// Post-step rollout from rest at `s.u_init`, appending one prediction per
/// input sample.
fn rollout(h: &StaticBlock, a: &[f64], c: &[f64], w: &StaticBlock, s: &Segment, out: &mut Vec<f64>) -> bool {
    let n = a.len();
    let gain = 1.0 + a.iter().sum::<f64>();
    if gain.abs() < 1e-12 {
        return false;
    }
    let mut r = [0.0f64; 8];
    r[..n].fill(h.eval(s.u_init) / gain);
    for &u in &s.u {
        let mut head = h.eval(u);
        for i in 0..n {
            head -= a[i] * r[i];
        }
        r.copy_within(0..n - 1, 1);
        r[0] = head;
        let wk: f64 = c.iter().zip(&r[..n]).map(|(x, y)| x * y).sum();
        let y = w.eval(wk);
        if !y.is_finite() {
            return false;
        }
        out.push(y);
    }
    true
}

fn lstsq(rows: &DMatrix<f64>, target: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = rows.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-12 * rows.nrows().max(rows.ncols()) as f64;
    svd.solve(target, tol).ok().filter(|x| x.iter().all(|v| v.is_finite()))
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// ARX fit `ỹ_k = −Σ a_i ỹ_{k−i} + Σ c_i ũ_{k−i+1}` on standardized data.
fn arx(segments: &[Segment], n: usize, su: (f64, f64), sy: (f64, f64)) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows: usize = segments.iter().map(|s| s.u.len().saturating_sub(n)).sum();
    if rows < 2 * n + 1 {
        return Err(Error::Dimension(format!("too few samples for order-{n} ARX")));
    }
    let mut x = DMatrix::zeros(rows, 2 * n);
    let mut t = DVector::zeros(rows);
    let mut row = 0;
    for s in segments {
        let u: Vec<f64> = s.u.iter().map(|v| (v - su.0) / su.1).collect();
        let y: Vec<f64> = s.y.iter().map(|v| (v - sy.0) / sy.1).collect();
        for k in n..u.len() {
            for i in 1..=n {
                x[(row, i - 1)] = -y[k - i];
                x[(row, n + i - 1)] = u[k + 1 - i];
            }
            t[row] = y[k];
            row += 1;
        }
    }
    let sol = lstsq(&x, &t).ok_or_else(|| Error::Config("ARX least squares failed".into()))?;
    Ok((sol.rows(0, n).iter().copied().collect(), sol.rows(n, n).iter().copied().collect()))
}

fn basis_template(kind: BlockKind, lo: f64, hi: f64) -> StaticBlock {
    match kind {
        BlockKind::Identity => StaticBlock::Identity,
        BlockKind::Pwl(k) => StaticBlock::pwl_line(k, lo, hi, 0.0, 1.0),
        BlockKind::Poly(d) => {
            let mut coeffs = vec![0.0; d + 1];
            if d >= 1 {
                coeffs[1] = 1.0;
            }
            StaticBlock::Poly { coeffs }
        }
    }
}

/// Least-squares fit of a block's parameters so that `block(v_k) ≈ y_k`.
fn fit_block_ls(block: &mut StaticBlock, v: &[f64], y: &[f64]) {
    let np = block.params().len();
    if np == 0 {
        return;
    }
    let mut x = DMatrix::zeros(v.len(), np);
    let mut basis = Vec::new();
    for (i, vi) in v.iter().enumerate() {
        block.basis(*vi, &mut basis);
        for j in 0..np {
            x[(i, j)] = basis[j];
        }
    }
    if let Some(p) = lstsq(&x, &DVector::from_column_slice(y)) {
        block.set_params(p.as_slice());
    }
}

/// Column `j` holds the rollout obtained with the `j`-th unit parameter
/// vector in the linear group being fitted.
fn ls_over_columns(columns: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let x = DMatrix::from_fn(y.len(), columns.len(), |i, j| columns[j][i]);
    lstsq(&x, &DVector::from_column_slice(y)).map(|p| p.as_slice().to_vec())
}

fn stacked(segments: &[Segment], f: impl Fn(&Segment, &mut Vec<f64>) -> bool) -> Option<Vec<f64>> {
    let mut out = Vec::new();
    for s in segments {
        if !f(s, &mut out) {
            return None;
        }
    }
    Some(out)
}

/// Rescales the numerator to unit DC gain, moving the gain into the input
/// map when there is one. Returns false and leaves everything unchanged when
/// the gain is too small to divide by.
fn normalize_gain(a: &[f64], c: &mut [f64], h: Option<&mut StaticBlock>) -> bool {
    let gain = c.iter().sum::<f64>() / (1.0 + a.iter().sum::<f64>());
    if !gain.is_finite() || gain.abs() < 1e-8 {
        return false;
    }
    c.iter_mut().for_each(|v| *v /= gain);
    if let Some(h) = h {
        let p: Vec<f64> = h.params().iter().map(|v| v * gain).collect();
        h.set_params(&p);
    }
    true
}

/// Stage (i): ARX core plus least-squares static maps.
fn initialize<'a>(segments: &'a [Segment], st: &Structure, max_radius: f64) -> Result<(Problem<'a>, Vec<f64>)> {
    let u_all = || segments.iter().flat_map(|s| s.u.iter().copied());
    let y_all: Vec<f64> = segments.iter().flat_map(|s| s.y.iter().copied()).collect();
    let (umean, ustd) = mean_std(u_all());
    let (ymean, ystd) = mean_std(y_all.iter().copied());
    if !(ystd > 0.0) {
        return Err(Error::DegenerateSignal("identification output is constant".into()));
    }
    if !(ustd > 0.0) {
        return Err(Error::DegenerateSignal("identification input is constant".into()));
    }
    let (ulo, uhi) = u_all().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let n = st.order;
    let (mut a, c_norm) = arx(segments, n, (umean, ustd), (ymean, ystd))?;
    let mut tmp = Problem {
        segments,
        n_samples: y_all.len(),
        h: StaticBlock::Identity,
        w: StaticBlock::Identity,
        n_h: 0,
        n_d: n,
        n_w: 0,
        max_radius,
        unit_gain: false,
    };
    tmp.project(&mut a);

    // Input map on the standardized identity line, so the ARX numerator applies as is.
    let mut h = match st.input {
        BlockKind::Identity => StaticBlock::Identity,
        BlockKind::Pwl(k) => StaticBlock::pwl_line(k, ulo, uhi, -umean / ustd, 1.0 / ustd),
        BlockKind::Poly(d) => {
            let mut coeffs = vec![0.0; d + 1];
            coeffs[0] = -umean / ustd;
            if d >= 1 {
                coeffs[1] = 1.0 / ustd;
            }
            StaticBlock::Poly { coeffs }
        }
    };
    let mut c: Vec<f64> = if st.input == BlockKind::Identity {
        c_norm.iter().map(|v| v / ustd).collect()
    } else {
        c_norm.clone()
    };
    let mut w;
    let mut unit_gain = false;
    if st.output == BlockKind::Identity {
        w = StaticBlock::Identity;
        if st.input == BlockKind::Identity {
            // y ≈ Σ c_i r_i: linear in the numerator.
            let cols: Option<Vec<Vec<f64>>> = (0..n)
                .map(|i| {
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    stacked(segments, |s, o| rollout(&h, &a, &e, &w, s, o))
                })
                .collect();
            if let Some(p) = cols.and_then(|cols| ls_over_columns(&cols, &y_all)) {
                c = p;
            }
        } else {
            // Numerator in output units, then input-map nodes by least squares.
            c = c_norm.iter().map(|v| v * ystd).collect();
            let np = h.params().len();
            let cols: Option<Vec<Vec<f64>>> = (0..np)
                .map(|j| {
                    let mut hj = h.clone();
                    let mut e = vec![0.0; np];
                    e[j] = 1.0;
                    hj.set_params(&e);
                    stacked(segments, |s, o| rollout(&hj, &a, &c, &w, s, o))
                })
                .collect();
            if let Some(p) = cols.and_then(|cols| ls_over_columns(&cols, &y_all)) {
                h.set_params(&p);
            }
            unit_gain = normalize_gain(&a, &mut c, Some(&mut h));
        }
    } else {
        unit_gain = normalize_gain(&a, &mut c, (st.input != BlockKind::Identity).then_some(&mut h));
        let wv = stacked(segments, |s, o| rollout(&h, &a, &c, &StaticBlock::Identity, s, o))
            .ok_or_else(|| Error::Config("initial core rollout is not finite".into()))?;
        let (wlo, whi) = wv.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        w = basis_template(st.output, wlo, whi);
        fit_block_ls(&mut w, &wv, &y_all);
    }

    let mut theta = Vec::with_capacity(st.n_params());
    theta.extend_from_slice(h.params());
    theta.extend_from_slice(&a);
    theta.extend_from_slice(&c[..n - usize::from(unit_gain)]);
    theta.extend_from_slice(w.params());
    tmp.unit_gain = unit_gain;
    tmp.n_h = h.params().len();
    tmp.n_w = w.params().len();
    tmp.h = h;
    tmp.w = w;
    Ok((tmp, theta))
}

// ---------------------------------------------------------------------------
// Levenberg–Marquardt

struct LmOutcome {
    theta: Vec<f64>,
    cost: f64,
    projections: usize,
}

fn fd_step(theta: &[f64], j: usize, scale: f64) -> f64 {
    1e-7 * theta[j].abs().max(1e-3 * scale).max(1e-12)
}

fn levenberg_marquardt(prob: &Problem, theta0: Vec<f64>, max_iter: usize, tol: f64) -> Option<LmOutcome> {
    let np = prob.n_params();
    let mut theta = theta0;
    let mut projections = usize::from(prob.project(&mut theta));
    let mut r = Vec::with_capacity(prob.n_samples);
    if !prob.residuals(&theta, &mut r) {
        return None;
    }
    let mut cost = 0.5 * r.iter().map(|v| v * v).sum::<f64>();
    let mut lambda = 1e-3;
    let mut probe = Vec::with_capacity(prob.n_samples);
    let mut cols = vec![vec![0.0; prob.n_samples]; np];
    let scale = theta.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    for _ in 0..max_iter {
        if cost == 0.0 {
            break;
        }
        for j in 0..np {
            let h = fd_step(&theta, j, scale);
            let mut tp = theta.clone();
            tp[j] += h;
            let (ok, step) = if prob.residuals(&tp, &mut probe) {
                (true, h)
            } else {
                tp[j] = theta[j] - h;
                (prob.residuals(&tp, &mut probe), -h)
            };
            for (i, col) in cols[j].iter_mut().enumerate() {
                *col = if ok { (probe[i] - r[i]) / step } else { 0.0 };
            }
        }
        let mut jtj = DMatrix::zeros(np, np);
        let mut g = DVector::zeros(np);
        for a in 0..np {
            g[a] = cols[a].iter().zip(&r).map(|(x, y)| x * y).sum::<f64>();
            for b in 0..=a {
                let v: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum();
                jtj[(a, b)] = v;
                jtj[(b, a)] = v;
            }
        }
        let dmax = (0..np).map(|i| jtj[(i, i)]).fold(0.0f64, f64::max);
        if dmax == 0.0 {
            break;
        }
        let mut accepted = None;
        while lambda < 1e12 {
            let mut m = jtj.clone();
            for i in 0..np {
                m[(i, i)] += lambda * jtj[(i, i)].max(1e-12 * dmax);
            }
            let Some(chol) = m.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-&g));
            let mut cand: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t + d).collect();
            let projected = prob.project(&mut cand);
            if prob.residuals(&cand, &mut probe) {
                let c = 0.5 * probe.iter().map(|v| v * v).sum::<f64>();
                if c < cost {
                    projections += usize::from(projected);
                    lambda = (lambda * 0.3).max(1e-12);
                    accepted = Some((cand, c));
                    break;
                }
            }
            lambda *= 10.0;
        }
        let Some((cand, c)) = accepted else { break };
        let rel = (cost - c) / cost;
        theta = cand;
        std::mem::swap(&mut r, &mut probe);
        cost = c;
        if rel < tol {
            break;
        }
    }
    Some(LmOutcome {
        theta,
        cost,
        projections,
    })
}

fn jittered(theta: &[f64], prob: &Problem, seed: u64, start: usize, rel: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let scale = theta.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut out: Vec<f64> = theta
        .iter()
        .map(|t| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            t * (1.0 + rel * a) + 1e-3 * rel * scale * b
        })
        .collect();
    prob.project(&mut out);
    out
}

/// Fits one structure: least-squares initialization, then multi-start
/// Levenberg–Marquardt on simulation error. The result never has a larger
/// training error than the initialization.
pub fn fit_hw(segments: &[Segment], structure: &Structure, seed: u64, opts: &FitOptions) -> Result<HwModel> {
    structure.validate()?;
    for s in segments {
        if s.u.len() != s.y.len() {
            return Err(Error::Dimension("segment input and output lengths differ".into()));
        }
    }
    let n_samples: usize = segments.iter().map(|s| s.y.len()).sum();
    if n_samples < 20 * structure.n_params() {
        return Err(Error::Config(format!(
            "{} samples is fewer than 20 per parameter for {}",
            n_samples,
            structure.label()
        )));
    }
    let (prob, theta0) = initialize(segments, structure, opts.max_radius)?;
    let mut r = Vec::new();
    let init_cost = if prob.residuals(&theta0, &mut r) {
        0.5 * r.iter().map(|v| v * v).sum::<f64>()
    } else {
        f64::INFINITY
    };

    let mut best: Option<LmOutcome> = None;
    for start in 0..opts.starts.max(1) {
        let t = if start == 0 {
            theta0.clone()
        } else {
            jittered(&theta0, &prob, seed, start, opts.jitter)
        };
        if let Some(out) = levenberg_marquardt(&prob, t, opts.max_iter, opts.tol) {
            if best.as_ref().map_or(true, |b| out.cost < b.cost) {
                best = Some(out);
            }
        }
    }
    let (theta, cost, projections) = match best {
        Some(b) if b.cost <= init_cost => (b.theta, b.cost, b.projections),
        _ if init_cost.is_finite() => (theta0, init_cost, 0),
        _ => return Err(Error::SimulationDiverged { step: 0 }),
    };
    let refined = cost < init_cost;

    let (h, w) = prob.blocks(&theta);
    let (a, c) = prob.core(&theta);
    let mut model = HwModel {
        input_channels: vec!["u".into()],
        output_channel: "y".into(),
        input_blocks: vec![h],
        core: LinearSsCore::companion(a, &c, DT),
        output_block: w,
        structure: *structure,
        training_nmse: 0.0,
        refined,
        projections,
    };
    model.training_nmse = super::segments_nmse(&model, segments)?;
    Ok(model)
}

fn evaluate(segments: &[Segment], st: Structure, seed: u64, opts: &FitOptions) -> Result<NaicRow> {
    let n: usize = segments.iter().map(|s| s.y.len()).sum();
    let model = fit_hw(segments, &st, seed, opts)?;
    let mut reference = Vec::with_capacity(n);
    let mut est = Vec::with_capacity(n);
    for s in segments {
        reference.extend_from_slice(&s.y);
        est.extend(model.rollout_siso(&s.u, s.u_init)?);
    }
    let mse = reference.iter().zip(&est).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    Ok(NaicRow {
        structure: st,
        label: st.label(),
        n_params: st.n_params(),
        mse,
        naic: compute_naic(mse.max(f64::MIN_POSITIVE), st.n_params(), n)?,
    })
}

fn evaluate_all(
    segments: &[Segment],
    cands: Vec<Structure>,
    seed: u64,
    opts: &FitOptions,
    done: &mut BTreeMap<Structure, NaicRow>,
) -> Result<NaicRow> {
    let todo: Vec<Structure> = cands.iter().filter(|s| !done.contains_key(s)).copied().collect();
    let rows = todo
        .into_par_iter()
        .map(|s| evaluate(segments, s, seed, opts))
        .collect::<Result<Vec<_>>>()?;
    for r in rows {
        done.insert(r.structure, r);
    }
    let best = cands
        .iter()
        .map(|s| &done[s])
        .min_by(|a, b| row_order(a, b))
        .expect("non-empty candidate list");
    Ok(best.clone())
}

/// Minimum-nAIC structure over `grid` and the table of evaluated candidates
/// sorted by ascending nAIC. Candidates are screened with the cheaper
/// screening settings in `opts`.
pub fn search_structure(
    segments: &[Segment],
    grid: &SearchGrid,
    seed: u64,
    opts: &FitOptions,
) -> Result<(Structure, Vec<NaicRow>)> {
    let g = grid.normalized()?;
    let screen = opts.screening();
    let mut done = BTreeMap::new();
    let best = match g.mode {
        SearchMode::Full => {
            let mut all = Vec::new();
            for &input in &g.inputs {
                for &order in &g.orders {
                    for &output in &g.outputs {
                        all.push(Structure { input, order, output });
                    }
                }
            }
            evaluate_all(segments, all, seed, &screen, &mut done)?
        }
        SearchMode::Staged => {
            let rich_w = SearchGrid::rich(&g.outputs);
            let top = *g.orders.last().unwrap();
            let stage1 = g
                .inputs
                .iter()
                .map(|&input| Structure { input, order: top, output: rich_w })
                .collect();
            let h = evaluate_all(segments, stage1, seed, &screen, &mut done)?.structure.input;
            let stage2 = g
                .orders
                .iter()
                .map(|&order| Structure { input: h, order, output: rich_w })
                .collect();
            let n = evaluate_all(segments, stage2, seed, &screen, &mut done)?.structure.order;
            let stage3 = g
                .outputs
                .iter()
                .map(|&output| Structure { input: h, order: n, output })
                .collect();
            evaluate_all(segments, stage3, seed, &screen, &mut done)?
        }
    };
    let mut table: Vec<NaicRow> = done.into_values().collect();
    table.sort_by(row_order);
    Ok((best.structure, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(u: Vec<f64>, y: Vec<f64>) -> Segment {
        let u_init = u[0];
        Segment { u, y, u_init }
    }

    #[test]
    fn projection_shrinks_radius() {
        let prob = Problem {
            segments: &[],
            n_samples: 0,
            h: StaticBlock::Identity,
            w: StaticBlock::Identity,
            n_h: 0,
            n_d: 2,
            n_w: 0,
            max_radius: MAX_RADIUS,
            unit_gain: false,
        };
        // Poles 1.2 and 0.5.
        let mut theta = vec![-1.7, 0.6, 1.0, 0.0];
        assert!(prob.project(&mut theta));
        assert!((companion_radius(&theta[..2]) - MAX_RADIUS).abs() < 1e-9);
        assert!(!prob.project(&mut theta.clone()));
    }

    #[test]
    fn arx_recovers_noise_free_first_order_system() {
        let u: Vec<f64> = (0..300).map(|k| if (k / 17) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let mut y = vec![0.0; 300];
        let mut prev = 0.0;
        for k in 0..300 {
            prev = 0.8 * prev + 0.5 * u[k];
            y[k] = prev;
        }
        let (a, c) = arx(&[seg(u, y)], 1, (0.0, 1.0), (0.0, 1.0)).unwrap();
        assert!((a[0] + 0.8).abs() < 1e-9 && (c[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn grid_order_does_not_matter() {
        let u: Vec<f64> = (0..600).map(|k| ((k / 13) % 3) as f64).collect();
        let mut y = vec![0.0; 600];
        let mut r = [0.0, 0.0];
        for k in 0..600 {
            let head = 1.1 * r[0] - 0.3 * r[1] + u[k];
            r = [head, r[0]];
            y[k] = 0.2 * r[0] + (k as f64 * 1.7).sin() * 0.01;
        }
        let segs = [Segment { u, y, u_init: 0.0 }];
        let grid = SearchGrid {
            mode: SearchMode::Full,
            inputs: vec![BlockKind::Pwl(1), BlockKind::Identity],
            orders: vec![3, 2],
            outputs: vec![BlockKind::Identity],
        };
        let mut flipped = grid.clone();
        flipped.inputs.reverse();
        flipped.orders.reverse();
        let opts = FitOptions::default();
        let (a, ta) = search_structure(&segs, &grid, 1, &opts).unwrap();
        let (b, tb) = search_structure(&segs, &flipped, 1, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 4);
        assert!(ta.windows(2).all(|w| w[0].naic <= w[1].naic));
    }

    #[test]
    fn empty_grid_is_rejected() {
        let segs = [seg(vec![0.0, 1.0], vec![0.0, 1.0])];
        let grid = SearchGrid { orders: vec![], ..SearchGrid::default() };
        assert!(search_structure(&segs, &grid, 0, &FitOptions::default()).is_err());
    }

    #[test]
    fn constant_output_is_degenerate() {
        let u: Vec<f64> = (0..400).map(|k| (k % 7) as f64).collect();
        let st = Structure { input: BlockKind::Identity, order: 2, output: BlockKind::Identity };
        let err = fit_hw(&[seg(u, vec![3.0; 400])], &st, 0, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateSignal(_)));
    }

    #[test]
    fn too_few_samples_rejected() {
        let u: Vec<f64> = (0..50).map(|k| (k % 7) as f64).collect();
        let st = Structure { input: BlockKind::Pwl(5), order: 8, output: BlockKind::Pwl(5) };
        assert!(fit_hw(&[seg(u.clone(), u)], &st, 0, &FitOptions::default()).is_err());
    }
}
