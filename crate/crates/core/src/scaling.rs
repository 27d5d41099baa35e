//! Compute-optimal scaling fits.
//!
//! Run records `(N, D, C, loss)` are grouped into iso-FLOP curves, each
//! curve's minimum is located with a parabola in `(log10 N, loss)`, and the
//! minima are fitted to power laws in `C`. Separately, the five-parameter
//! ansatz `L = E + A/N^a + B/D^b` is fitted directly to all records.
//! All logarithms are base 10.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Active parameters.
    #[serde(rename = "N")]
    pub n: f64,
    /// Atoms seen in training.
    #[serde(rename = "D")]
    pub d: f64,
    /// Training FLOPs.
    #[serde(rename = "C")]
    pub c: f64,
    pub loss: f64,
    pub tag: String,
}

impl RunRecord {
    pub fn validate(&self, row: usize) -> Result<()> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        if !(ok(self.n) && ok(self.d) && ok(self.c) && ok(self.loss)) {
            return Err(Error::Parse { line: row, msg: "N, D, C and loss must be positive and finite".into() });
        }
        Ok(())
    }
}

/// Reads `N,D,C,loss,tag` CSV with a header row.
pub fn parse_records(reader: impl Read) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RunRecord>().enumerate() {
        let line = i + 2;
        let rec = row.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        rec.validate(line)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(f)
}

pub fn write_records(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Records whose `C` deviates from `κ·N·D` by more than `tol` (relative).
pub fn kappa_outliers(records: &[RunRecord], kappa: f64, tol: f64) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| ((r.c - kappa * r.n * r.d) / r.c).abs() > tol)
        .map(|(i, _)| i)
        .collect()
}

/// Least-squares line `y = slope·x + intercept`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Fit("a line needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 1e-24) {
        return Err(Error::Fit("degenerate span in x".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Least-squares `y = a x² + b x + c`.
pub fn fit_parabola(xs: &[f64], ys: &[f64]) -> Result<[f64; 3]> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Fit("a parabola needs at least three points".into()));
    }
    // Centre x for conditioning, then shift back.
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let mut a = nalgebra::DMatrix::<f64>::zeros(xs.len(), 3);
    for (i, x) in xs.iter().enumerate() {
        let u = x - mx;
        a[(i, 0)] = u * u;
        a[(i, 1)] = u;
        a[(i, 2)] = 1.0;
    }
    let y = nalgebra::DVector::from_column_slice(ys);
    let svd = a.svd(true, true);
    let s = &svd.singular_values;
    if s.min() <= 1e-12 * s.max() {
        return Err(Error::Fit("parabola needs three distinct x values".into()));
    }
    let p = svd.solve(&y, 0.0).map_err(|e| Error::Fit(e.to_string()))?;
    let (qa, qb, qc) = (p[0], p[1], p[2]);
    Ok([qa, qb - 2.0 * qa * mx, qa * mx * mx - qb * mx + qc])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupStatus {
    Ok,
    TooFewPoints,
    /// Fitted parabola opens downward.
    Concave,
    /// Vertex lies outside the sampled `N` range.
    VertexOutside,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsoflopGroup {
    /// Geometric mean of the group's budgets.
    pub c: f64,
    pub n_star: f64,
    pub loss_star: f64,
    pub n_points: usize,
    pub status: GroupStatus,
}

/// Vertex of the parabola fitted to `(log10 N, loss)`.
pub fn parabola_minimum(ns: &[f64], losses: &[f64]) -> Result<(f64, f64, GroupStatus)> {
    let xs: Vec<f64> = ns.iter().map(|n| n.log10()).collect();
    let mut distinct = xs.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if distinct.len() < 3 {
        return Ok((f64::NAN, f64::NAN, GroupStatus::TooFewPoints));
    }
    let [a, b, c] = fit_parabola(&xs, losses)?;
    if !(a > 0.0) {
        return Ok((f64::NAN, f64::NAN, GroupStatus::Concave));
    }
    let x = -b / (2.0 * a);
    let loss = c - b * b / (4.0 * a);
    let status = if x < distinct[0] || x > distinct[distinct.len() - 1] { GroupStatus::VertexOutside } else { GroupStatus::Ok };
    Ok((10f64.powf(x), loss, status))
}

/// Groups records whose budgets agree within `rel_tol` (chained from the
/// smallest budget of each group), sorted by `C`.
pub fn group_by_flops(records: &[RunRecord], rel_tol: f64) -> Vec<Vec<&RunRecord>> {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.c.total_cmp(&b.c));
    let mut groups: Vec<Vec<&RunRecord>> = Vec::new();
    for r in sorted {
        match groups.last_mut() {
            Some(g) if r.c <= g[0].c * (1.0 + rel_tol) => g.push(r),
            _ => groups.push(vec![r]),
        }
    }
    groups
}

pub const FLOP_GROUP_TOLERANCE: f64 = 0.02;

pub fn isoflop_minima(records: &[RunRecord], rel_tol: f64) -> Result<Vec<IsoflopGroup>> {
    let mut out = Vec::new();
    for g in group_by_flops(records, rel_tol) {
        let ns: Vec<f64> = g.iter().map(|r| r.n).collect();
        let ls: Vec<f64> = g.iter().map(|r| r.loss).collect();
        let c = 10f64.powf(g.iter().map(|r| r.c.log10()).sum::<f64>() / g.len() as f64);
        let (n_star, loss_star, status) = parabola_minimum(&ns, &ls)?;
        out.push(IsoflopGroup { c, n_star, loss_star, n_points: g.len(), status });
    }
    Ok(out)
}

/// `log N* = α log C + A` and `log D* = β log C + B` with `D* = C/(κ N*)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub a: f64,
    pub beta: f64,
    pub b: f64,
    pub kappa: f64,
    pub n_points: usize,
}

pub fn fit_power_laws(minima: &[(f64, f64)], kappa: f64) -> Result<PowerLawFit> {
    if minima.iter().any(|(c, n)| !(*c > 0.0 && *n > 0.0)) || !(kappa > 0.0) {
        return Err(Error::Fit("C, N* and κ must be positive".into()));
    }
    let lc: Vec<f64> = minima.iter().map(|m| m.0.log10()).collect();
    let ln: Vec<f64> = minima.iter().map(|m| m.1.log10()).collect();
    let ld: Vec<f64> = minima.iter().map(|(c, n)| (c / (kappa * n)).log10()).collect();
    let (alpha, a) = fit_line(&lc, &ln)?;
    let (beta, b) = fit_line(&lc, &ld)?;
    Ok(PowerLawFit { alpha, a, beta, b, kappa, n_points: minima.len() })
}

/// `log L*(N*) = slope · log N* + γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReducedFit {
    /// Equals `−α̂` of the ansatz; this is the signed value tables quote.
    pub slope: f64,
    pub gamma: f64,
}

pub fn fit_reduced(minima: &[(f64, f64)]) -> Result<ReducedFit> {
    let x: Vec<f64> = minima.iter().map(|m| m.0.log10()).collect();
    let y: Vec<f64> = minima.iter().map(|m| m.1.log10()).collect();
    let (slope, gamma) = fit_line(&x, &y)?;
    Ok(ReducedFit { slope, gamma })
}

/// Parameters of `L = E + A/N^α̂ + B/D^β̂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ansatz {
    pub e: f64,
    pub a: f64,
    pub b: f64,
    pub alpha_hat: f64,
    pub beta_hat: f64,
}

impl Ansatz {
    pub fn loss(&self, n: f64, d: f64) -> f64 {
        self.e + self.a * n.powf(-self.alpha_hat) + self.b * d.powf(-self.beta_hat)
    }

    /// Exponents of `N*(C)` and `D*(C)` implied by the ansatz.
    pub fn mapped_exponents(&self) -> (f64, f64) {
        map_exponents(self.alpha_hat, self.beta_hat)
    }

    /// `log10((1 + α̂/β̂) Â)`: intercept of the reduced fit when `E ≈ 0`.
    pub fn gamma(&self) -> f64 {
        ((1.0 + self.alpha_hat / self.beta_hat) * self.a).log10()
    }
}

/// `α = β̂/(α̂+β̂)`, `β = α̂/(α̂+β̂)`.
pub fn map_exponents(alpha_hat: f64, beta_hat: f64) -> (f64, f64) {
    let s = alpha_hat + beta_hat;
    (beta_hat / s, alpha_hat / s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnsatzFit {
    pub params: Ansatz,
    /// Sum of squared log residuals.
    pub objective: f64,
    pub starts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnsatzOptions {
    /// Starting exponents; every pair is one start.
    pub exponent_grid: Vec<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for AnsatzOptions {
    fn default() -> Self {
        Self { exponent_grid: vec![0.1, 0.3, 0.6, 1.0], max_iter: 500, tol: 1e-14 }
    }
}

/// θ = (E, ln A, ln B, α̂, β̂); residuals ln L̃ − ln L.
fn ansatz_residuals(theta: &[f64; 5], data: &[(f64, f64, f64)], jac: Option<&mut Vec<[f64; 5]>>) -> Option<Vec<f64>> {
    let (e, la, lb, al, be) = (theta[0], theta[1], theta[2], theta[3], theta[4]);
    let mut r = Vec::with_capacity(data.len());
    let mut rows = Vec::with_capacity(if jac.is_some() { data.len() } else { 0 });
    for &(n, d, l) in data {
        let tn = (la - al * n.ln()).exp();
        let td = (lb - be * d.ln()).exp();
        let model = e + tn + td;
        if !(model > 0.0) || !model.is_finite() {
            return None;
        }
        r.push(model.ln() - l.ln());
        if jac.is_some() {
            rows.push([1.0 / model, tn / model, td / model, -n.ln() * tn / model, -d.ln() * td / model]);
        }
    }
    if let Some(j) = jac {
        *j = rows;
    }
    Some(r)
}

fn sumsq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Levenberg-Marquardt from one start.
fn levenberg_marquardt(start: [f64; 5], data: &[(f64, f64, f64)], opts: &AnsatzOptions) -> Option<([f64; 5], f64)> {
    let mut theta = start;
    let mut jac = Vec::new();
    let mut r = ansatz_residuals(&theta, data, Some(&mut jac))?;
    let mut cost = sumsq(&r);
    let mut lambda = 1e-3;
    for _ in 0..opts.max_iter {
        let mut jtj = nalgebra::Matrix5::<f64>::zeros();
        let mut jtr = nalgebra::Vector5::<f64>::zeros();
        for (row, ri) in jac.iter().zip(&r) {
            for a in 0..5 {
                jtr[a] += row[a] * ri;
                for b in 0..5 {
                    jtj[(a, b)] += row[a] * row[b];
                }
            }
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut m = jtj;
            for a in 0..5 {
                m[(a, a)] += lambda * (jtj[(a, a)] + 1e-12);
            }
            let Some(step) = m.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = theta;
            for a in 0..5 {
                trial[a] += step[a];
            }
            let mut tj = Vec::new();
            if let Some(tr) = ansatz_residuals(&trial, data, Some(&mut tj)) {
                let tc = sumsq(&tr);
                if tc < cost {
                    let rel = step.norm() / (1.0 + theta.iter().map(|x| x * x).sum::<f64>().sqrt());
                    let drop = cost - tc;
                    theta = trial;
                    r = tr;
                    jac = tj;
                    cost = tc;
                    lambda = (lambda / 10.0).max(1e-15);
                    improved = true;
                    if rel < opts.tol || drop < opts.tol * opts.tol {
                        return Some((theta, cost));
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Some((theta, cost))
}

/// Multi-start least squares on log residuals. Each start fixes the
/// exponents from the grid, sets `E = 0` and solves for `A`, `B` linearly.
pub fn fit_ansatz(records: &[RunRecord], opts: &AnsatzOptions) -> Result<AnsatzFit> {
    if records.len() < 5 {
        return Err(Error::Fit(format!("ansatz needs at least 5 records, got {}", records.len())));
    }
    let data: Vec<(f64, f64, f64)> = records.iter().map(|r| (r.n, r.d, r.loss)).collect();
    let mut best: Option<([f64; 5], f64)> = None;
    let mut starts = 0;
    for &al in &opts.exponent_grid {
        for &be in &opts.exponent_grid {
            starts += 1;
            // Linear least squares for A, B at fixed exponents.
            let (mut sxx, mut sxy, mut syy, mut sxl, mut syl) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &(n, d, l) in &data {
                let (x, y) = (n.powf(-al), d.powf(-be));
                sxx += x * x;
                sxy += x * y;
                syy += y * y;
                sxl += x * l;
                syl += y * l;
            }
            let det = sxx * syy - sxy * sxy;
            let (a, b) = if det.abs() > 1e-300 { ((syy * sxl - sxy * syl) / det, (sxx * syl - sxy * sxl) / det) } else { (0.0, 0.0) };
            let mean_l = data.iter().map(|p| p.2).sum::<f64>() / data.len() as f64;
            let a = if a > 0.0 { a } else { 0.5 * mean_l / (sxx / data.len() as f64).sqrt().max(1e-300) };
            let b = if b > 0.0 { b } else { 0.5 * mean_l / (syy / data.len() as f64).sqrt().max(1e-300) };
            let start = [0.0, a.ln(), b.ln(), al, be];
            if let Some((theta, cost)) = levenberg_marquardt(start, &data, opts) {
                if cost.is_finite() && best.as_ref().is_none_or(|b| cost < b.1) {
                    best = Some((theta, cost));
                }
            }
        }
    }
    let (theta, cost) = best.ok_or_else(|| Error::Fit("ansatz fit failed from every start".into()))?;
    let params = Ansatz { e: theta[0], a: theta[1].exp(), b: theta[2].exp(), alpha_hat: theta[3], beta_hat: theta[4] };
    if !(params.alpha_hat + params.beta_hat).is_finite() || params.alpha_hat + params.beta_hat == 0.0 {
        return Err(Error::Fit(format!("degenerate exponents; best residual {cost:e}")));
    }
    Ok(AnsatzFit { params, objective: cost, starts })
}

/// Nearest-rank percentile of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bands {
    pub p10: Vec<f64>,
    pub p90: Vec<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
}

impl Bands {
    /// Whether `value` lies in the band of coefficient `i` (either order).
    pub fn contains(&self, i: usize, value: f64) -> bool {
        let (lo, hi) = (self.p10[i].min(self.p90[i]), self.p10[i].max(self.p90[i]));
        (lo..=hi).contains(&value)
    }
}

/// How resamples are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resample {
    /// With replacement from all records.
    Pooled,
    /// With replacement within each iso-FLOP group (relative tolerance).
    WithinFlopGroups(f64),
}

/// Refits `fit` on `n` resamples and reports 10th/90th percentiles per
/// coefficient. Failed refits are skipped; more than 20% failures is an
/// error.
pub fn bootstrap<F>(records: &[RunRecord], n: usize, seed: u64, mode: Resample, fit: F) -> Result<Bands>
where
    F: Fn(&[RunRecord]) -> Result<Vec<f64>>,
{
    if records.len() < 3 || n == 0 {
        return Err(Error::Fit("bootstrap needs at least 3 records and 1 resample".into()));
    }
    let groups: Vec<Vec<&RunRecord>> = match mode {
        Resample::Pooled => vec![records.iter().collect()],
        Resample::WithinFlopGroups(tol) => group_by_flops(records, tol),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut failed = 0;
    for _ in 0..n {
        let mut draw = Vec::with_capacity(records.len());
        for g in &groups {
            for _ in 0..g.len() {
                draw.push(g[rng.random_range(0..g.len())].clone());
            }
        }
        match fit(&draw) {
            Ok(v) if v.iter().all(|x| x.is_finite()) => samples.push(v),
            _ => failed += 1,
        }
    }
    if failed * 5 > n {
        return Err(Error::Bootstrap { failed, total: n });
    }
    let k = samples[0].len();
    let column = |i: usize| samples.iter().map(|s| s[i]).collect::<Vec<_>>();
    Ok(Bands {
        p10: (0..k).map(|i| percentile(&column(i), 10.0)).collect(),
        p90: (0..k).map(|i| percentile(&column(i), 90.0)).collect(),
        n_ok: samples.len(),
        n_failed: failed,
    })
}

/// κ estimated as the median of `C/(N·D)` over the records.
pub fn estimate_kappa(records: &[RunRecord]) -> f64 {
    let v: Vec<f64> = records.iter().map(|r| r.c / (r.n * r.d)).collect();
    percentile(&v, 50.0)
}

/// Full iso-FLOP pipeline: minima, power laws and the reduced fit, using
/// only groups whose vertex is valid.
pub fn powerlaw_pipeline(records: &[RunRecord], kappa: Option<f64>) -> Result<(Vec<IsoflopGroup>, PowerLawFit, ReducedFit)> {
    let groups = isoflop_minima(records, FLOP_GROUP_TOLERANCE)?;
    let ok: Vec<&IsoflopGroup> = groups.iter().filter(|g| g.status == GroupStatus::Ok).collect();
    if ok.len() < 2 {
        return Err(Error::Fit(format!("only {} iso-FLOP groups have a valid minimum", ok.len())));
    }
    let kappa = kappa.unwrap_or_else(|| estimate_kappa(records));
    let minima: Vec<(f64, f64)> = ok.iter().map(|g| (g.c, g.n_star)).collect();
    let laws = fit_power_laws(&minima, kappa)?;
    let reduced = fit_reduced(&ok.iter().map(|g| (g.n_star, g.loss_star)).collect::<Vec<_>>())?;
    Ok((groups, laws, reduced))
}

/// One line per coefficient: name, estimate, (p10, p90).
pub fn format_table(rows: &[(&str, f64, Option<(f64, f64)>)]) -> String {
    let mut out = String::from("parameter      estimate  (p10, p90)\n");
    for (name, v, band) in rows {
        match band {
            Some((lo, hi)) => out.push_str(&format!("{name:<12} {v:>10.4}  ({lo:.4}, {hi:.4})\n")),
            None => out.push_str(&format!("{name:<12} {v:>10.4}\n")),
        }
    }
    out
}
