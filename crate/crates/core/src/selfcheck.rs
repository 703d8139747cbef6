//! Fast invariant batteries shared by the `selfcheck` command and the tests.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CuError, Result};
use crate::losses::{self, AgentColumns, LossFamily, LossGradients, Precision, PredictiveParams};
use crate::metrics::kl_gaussian;
use crate::model::{CuNetwork, MlpParams, NetworkConfig};
use crate::prob::density::{gaussian_logpdf, log_mixture_profile, optimal_z, LN_2PI};
use crate::prob::linalg::{assemble_precision, ldl_factorize, lower_len, Cholesky, PrecisionFactor, SquareMatrix};
use crate::prob::sampling::sample_gaussian;

pub type LossFn = fn(&AgentColumns, &PredictiveParams) -> Result<LossGradients>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Ldl,
    Gradients,
    Zstar,
    Kl,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Ldl, Suite::Gradients, Suite::Zstar, Suite::Kl];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ldl => "ldl",
            Suite::Gradients => "gradients",
            Suite::Zstar => "zstar",
            Suite::Kl => "kl",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}` (expected ldl|gradients|zstar|kl)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub suite: Suite,
    pub checks: usize,
    pub failures: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Which implementation each loss family is checked against; tests swap in broken ones.
#[derive(Clone)]
pub struct LossTable {
    entries: Vec<(LossFamily, LossFn)>,
}

impl Default for LossTable {
    fn default() -> Self {
        Self {
            entries: vec![
                (LossFamily::IdL2, losses::loss_id_l2),
                (LossFamily::IdL1, losses::loss_id_l1),
                (LossFamily::GaussianDia, losses::loss_gaussian_dia),
                (LossFamily::GaussianFull, losses::loss_gaussian_full),
                (LossFamily::LaplaceDia, losses::loss_laplace_dia),
                (LossFamily::LaplaceFull, losses::loss_laplace_full),
            ],
        }
    }
}

impl LossTable {
    pub fn with(mut self, family: LossFamily, f: LossFn) -> Self {
        for e in &mut self.entries {
            if e.0 == family {
                e.1 = f;
            }
        }
        self
    }

    pub fn get(&self, family: LossFamily) -> LossFn {
        self.entries.iter().find(|e| e.0 == family).map(|e| e.1).expect("every family present")
    }
}

pub fn run(suites: &[Suite], table: &LossTable) -> Vec<SuiteResult> {
    suites
        .iter()
        .map(|&s| match s {
            Suite::Ldl => ldl_suite(200, 0),
            Suite::Gradients => gradient_suite(table, 20, 0),
            Suite::Zstar => zstar_suite(200, 0),
            Suite::Kl => kl_suite(5, 0),
        })
        .collect()
}

pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, m: usize) -> SquareMatrix {
    let a: Vec<f64> = (0..m * m).map(|_| rng.sample(StandardNormal)).collect();
    let mut s = SquareMatrix::identity(m);
    for i in 0..m {
        for j in 0..m {
            let dot: f64 = (0..m).map(|k| a[i * m + k] * a[j * m + k]).sum();
            s.set(i, j, s.get(i, j) + dot);
        }
    }
    s
}

pub fn random_factor<R: Rng + ?Sized>(rng: &mut R, m: usize) -> PrecisionFactor {
    let lower = (0..lower_len(m)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let log_diag = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    PrecisionFactor::new(lower, log_diag).expect("finite")
}

pub fn ldl_suite(n: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for k in 0..n {
        let m = 1 + k % 8;
        let mat = random_spd(&mut rng, m);
        let check = (|| -> Result<Option<String>> {
            let f = ldl_factorize(&mat)?;
            let back = assemble_precision(&f);
            let scale = mat.max_abs();
            let err = mat.entries().iter().zip(back.entries()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if err > 1e-10 * scale {
                return Ok(Some(format!("round trip error {err:e} (m={m})")));
            }
            let ld = Cholesky::factorize(&mat)?.log_det();
            if (ld - f.log_det()).abs() > 1e-10 * ld.abs().max(1.0) {
                return Ok(Some(format!("log-det {} vs {ld} (m={m})", f.log_det())));
            }
            let y: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
            let mu = vec![0.0; m];
            let q = Cholesky::factorize(&ldl_inverse(&mat)?)?.mahalanobis(&y);
            let dense = -0.5 * m as f64 * LN_2PI + 0.5 * ld - 0.5 * q;
            let got = gaussian_logpdf(&y, &mu, &f)?;
            if (got - dense).abs() > 1e-8 * dense.abs().max(1.0) {
                return Ok(Some(format!("logpdf {got} vs {dense} (m={m})")));
            }
            Ok(None)
        })();
        match check {
            Ok(None) => {}
            Ok(Some(msg)) => failures.push(msg),
            Err(e) => failures.push(format!("matrix {k}: {e}")),
        }
    }
    SuiteResult {
        suite: Suite::Ldl,
        checks: n,
        failures,
    }
}

fn ldl_inverse(mat: &SquareMatrix) -> Result<SquareMatrix> {
    Ok(Cholesky::factorize(mat)?.inverse())
}

/// `|a − b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Random parameters for `family` over an `m × d` grid with residuals bounded away from 0.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    family: LossFamily,
    m: usize,
    d: usize,
    per_column: bool,
) -> (AgentColumns, PredictiveParams) {
    let mu: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = mu
        .iter()
        .map(|v| {
            let mag = rng.random_range(0.01..2.0);
            v + if rng.random::<bool>() { mag } else { -mag }
        })
        .collect();
    let mk = |rng: &mut R| {
        let f = random_factor(rng, m);
        if family.is_full() {
            f
        } else {
            PrecisionFactor::diagonal(f.log_diag().to_vec()).expect("finite")
        }
    };
    let precision = family.has_factor().then(|| {
        if per_column {
            Precision::PerColumn((0..d).map(|_| mk(rng)).collect())
        } else {
            Precision::Shared(mk(rng))
        }
    });
    let phi = family.has_phi().then(|| rng.random_range(0.3..3.0));
    let params = PredictiveParams::new(family, AgentColumns::new(m, d, mu).expect("shape"), precision, phi)
        .expect("consistent");
    (AgentColumns::new(m, d, y).expect("shape"), params)
}

/// Central differences of `f` over every decoder output; returns the worst relative error.
pub fn check_loss_gradient(f: LossFn, y: &AgentColumns, p: &PredictiveParams) -> Result<(f64, String)> {
    let g = f(y, p)?;
    let value = |q: &PredictiveParams| f(y, q).map(|g| g.value);
    let h_of = |t: f64| 1e-5 * t.abs().max(1.0);
    let mut worst = (0.0, String::new());
    let mut note = |err: f64, what: String| {
        if err > worst.0 {
            worst = (err, what);
        }
    };
    for k in 0..p.mu.values().len() {
        let t = p.mu.values()[k];
        let h = h_of(t);
        let (mut a, mut b) = (p.clone(), p.clone());
        a.mu.values_mut()[k] = t + h;
        b.mu.values_mut()[k] = t - h;
        note(rel_err(g.d_mu.values()[k], (value(&a)? - value(&b)?) / (2.0 * h)), format!("d_mu[{k}]"));
    }
    if let Some(prec) = &p.precision {
        let factors: Vec<PrecisionFactor> = match prec {
            Precision::Shared(f) => vec![f.clone()],
            Precision::PerColumn(fs) => fs.clone(),
        };
        let rebuild = |slot: usize, f: PrecisionFactor| {
            let mut q = p.clone();
            q.precision = Some(match prec {
                Precision::Shared(_) => Precision::Shared(f),
                Precision::PerColumn(fs) => {
                    let mut fs = fs.clone();
                    fs[slot] = f;
                    Precision::PerColumn(fs)
                }
            });
            q
        };
        for (slot, fac) in factors.iter().enumerate() {
            for k in 0..fac.lower().len() {
                let t = fac.lower()[k];
                let h = h_of(t);
                let bump = |dv: f64| {
                    let mut lower = fac.lower().to_vec();
                    lower[k] = t + dv;
                    rebuild(slot, PrecisionFactor::new(lower, fac.log_diag().to_vec()).expect("finite"))
                };
                let fd = (value(&bump(h))? - value(&bump(-h))?) / (2.0 * h);
                note(rel_err(g.d_factors[slot].d_lower[k], fd), format!("d_lower[{slot}][{k}]"));
            }
            for k in 0..fac.log_diag().len() {
                let t = fac.log_diag()[k];
                let h = h_of(t);
                let bump = |dv: f64| {
                    let mut ld = fac.log_diag().to_vec();
                    ld[k] = t + dv;
                    rebuild(slot, PrecisionFactor::new(fac.lower().to_vec(), ld).expect("finite"))
                };
                let fd = (value(&bump(h))? - value(&bump(-h))?) / (2.0 * h);
                note(rel_err(g.d_factors[slot].d_log_diag[k], fd), format!("d_log_diag[{slot}][{k}]"));
            }
        }
    }
    if let Some(phi) = p.phi {
        let h = h_of(phi);
        let (mut a, mut b) = (p.clone(), p.clone());
        a.phi = Some(phi + h);
        b.phi = Some(phi - h);
        let fd = (value(&a)? - value(&b)?) / (2.0 * h);
        note(rel_err(g.d_phi.unwrap_or(f64::NAN), fd), "d_phi".into());
    }
    Ok(worst)
}

/// Tiny network with outputs for a `3 × 4` grid and random nonzero biases.
///
/// Zero biases put every unit fed only by inactive units exactly on its
/// ReLU kink, where central differences are meaningless.
pub fn tiny_network(family: LossFamily, seed: u64) -> Result<CuNetwork> {
    let mut net = CuNetwork::init_params(
        NetworkConfig {
            family,
            agents: 3,
            cols: 4,
            hidden: 8,
            input_scale: 0.1,
            output_scale: 10.0,
        },
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mlps: Vec<MlpParams> = [Some(net.encoder()), Some(net.dec_mu()), net.dec_prec(), net.dec_phi()]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    for l in mlps.iter().flat_map(|m| &m.layers) {
        let start = l.offset + l.input * l.output;
        for b in &mut net.params_mut()[start..start + l.output] {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    Ok(net)
}

/// End-to-end check of `backward` against central differences of the summed batch loss.
pub fn check_network_gradient(net: &CuNetwork, x: &[f64], y: &[f64], batch: usize) -> Result<(f64, String)> {
    let cfg = *net.config();
    let loss_of = |n: &CuNetwork| -> Result<(f64, Vec<LossGradients>, crate::model::ForwardTape)> {
        let (params, tape) = n.forward(x, batch)?;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(batch);
        for (b, p) in params.iter().enumerate() {
            let yb = AgentColumns::new(cfg.agents, cfg.cols, y[b * cfg.input_dim()..(b + 1) * cfg.input_dim()].to_vec())?;
            let g = losses::loss(&yb, p)?;
            total += g.value;
            grads.push(g);
        }
        Ok((total, grads, tape))
    };
    let (_, grads, tape) = loss_of(net)?;
    let analytic = net.backward(&tape, &grads)?;
    let mut worst = (0.0, String::new());
    let mut probe = net.clone();
    for k in 0..net.param_count() {
        let t = net.params()[k];
        let h = 1e-5 * t.abs().max(1.0);
        probe.params_mut()[k] = t + h;
        let up = loss_of(&probe)?.0;
        probe.params_mut()[k] = t - h;
        let down = loss_of(&probe)?.0;
        probe.params_mut()[k] = t;
        let err = rel_err(analytic[k], (up - down) / (2.0 * h));
        if err > worst.0 {
            worst = (err, format!("param[{k}]"));
        }
    }
    Ok(worst)
}

/// Smallest ReLU pre-activation magnitude accepted by [`network_probe`].
pub const PROBE_RELU_MARGIN: f64 = 1e-3;

/// Input/target pair for [`check_network_gradient`] that keeps every ReLU
/// pre-activation and every residual at least `1e-3` away from its kink.
pub fn network_probe<R: Rng + ?Sized>(rng: &mut R, net: &CuNetwork, batch: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = net.config().input_dim();
    for _ in 0..1000 {
        let x: Vec<f64> = (0..batch * d).map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..batch * d).map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let (params, tape) = net.forward(&x, batch)?;
        let clear = tape.relu_margin() >= PROBE_RELU_MARGIN
            && params.iter().enumerate().all(|(b, p)| {
                p.mu.values().iter().zip(&y[b * d..(b + 1) * d]).all(|(m, t)| (t - m).abs() > 1e-3)
            });
        if clear {
            return Ok((x, y));
        }
    }
    Err(CuError::InvalidParameter("no probe point clear of kinks in 1000 draws".into()))
}

pub fn gradient_suite(table: &LossTable, per_family: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut checks = 0;
    for family in LossFamily::ALL {
        let f = table.get(family);
        let mut worst = (0.0, String::new());
        for k in 0..per_family {
            let (y, p) = random_instance(&mut rng, family, 3, 4, k % 4 == 3);
            checks += 1;
            match check_loss_gradient(f, &y, &p) {
                Ok(w) if w.0 > worst.0 => worst = w,
                Ok(_) => {}
                Err(e) => failures.push(format!("{family}: {e}")),
            }
        }
        if worst.0 > 1e-4 {
            failures.push(format!("{family}: {} off by {:.2e}", worst.1, worst.0));
        }
        let net = tiny_network(family, seed + 1).expect("valid tiny config");
        let probe = network_probe(&mut rng, &net, 2).and_then(|(x, y)| check_network_gradient(&net, &x, &y, 2));
        checks += 1;
        match probe {
            Ok(w) if w.0 > 1e-4 => failures.push(format!("network/{family}: {} off by {:.2e}", w.1, w.0)),
            Ok(_) => {}
            Err(e) => failures.push(format!("network/{family}: {e}")),
        }
    }
    SuiteResult {
        suite: Suite::Gradients,
        checks,
        failures,
    }
}

/// Maximizer of a unimodal `f` on `[lo, hi]` by golden-section search.
pub fn golden_section_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while (hi - lo) > tol * (c.abs() + d.abs()).max(f64::MIN_POSITIVE) {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

pub fn zstar_suite(n: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for _ in 0..n {
        let m = rng.random_range(1..=9usize);
        let q = 10f64.powf(rng.random_range(-2.0..2.0));
        let z_star = optimal_z(q, m).expect("q > 0");
        let scan = golden_section_max(|z| log_mixture_profile(z, q, m), 1e-12 * q, 10.0 * q, 1e-12);
        if rel_err_strict(scan, z_star) > 1e-6 {
            failures.push(format!("scan peak {scan} vs q/m = {z_star} (q={q}, m={m})"));
        }
        let (y, mut p) = random_instance(&mut rng, LossFamily::LaplaceFull, m, 1, false);
        let mu = p.mu.column(0);
        let Some(Precision::Shared(f)) = &p.precision else { unreachable!() };
        let q_obs = crate::prob::quadratic_form(&y.column(0), &mu, f).expect("dims");
        p.phi = Some(optimal_z(q_obs, m).expect("q > 0"));
        match losses::loss_laplace_full(&y, &p) {
            Ok(g) if g.d_phi.map_or(true, |d| d.abs() > 1e-10) => {
                failures.push(format!("d_phi = {:?} at phi = q/m (m={m})", g.d_phi))
            }
            Ok(_) => {}
            Err(e) => failures.push(e.to_string()),
        }
    }
    SuiteResult {
        suite: Suite::Zstar,
        checks: n,
        failures,
    }
}

fn rel_err_strict(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Monte-Carlo estimate of `E_g[log p_g − log p_e]` for Gaussians: `(mean, std error)`.
pub fn kl_gaussian_mc(
    mu_g: &[f64],
    sigma_g: &SquareMatrix,
    mu_e: &[f64],
    sigma_e: &SquareMatrix,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg = ldl_factorize(&Cholesky::factorize(sigma_g)?.inverse())?;
    let fe = ldl_factorize(&Cholesky::factorize(sigma_e)?.inverse())?;
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample_gaussian(mu_g, sigma_g, &mut rng)?.values;
        vals.push(gaussian_logpdf(&x, mu_g, &fg)? - gaussian_logpdf(&x, mu_e, &fe)?);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    Ok((mean, (var / n as f64).sqrt()))
}

pub fn kl_suite(pairs: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for k in 0..pairs {
        let (sg, se) = (random_spd(&mut rng, 3), random_spd(&mut rng, 3));
        let mg: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let me: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let outcome = kl_gaussian(&mg, &sg, &me, &se).and_then(|exact| {
            let (est, se_mc) = kl_gaussian_mc(&mg, &sg, &me, &se, 100_000, seed + k as u64)?;
            Ok((exact, est, se_mc))
        });
        match outcome {
            Ok((exact, est, se_mc)) if (exact - est).abs() > 3.0 * se_mc => {
                failures.push(format!("pair {k}: closed form {exact} vs MC {est} ± {se_mc}"))
            }
            Ok(_) => {}
            Err(e) => failures.push(format!("pair {k}: {e}")),
        }
        match kl_gaussian(&mg, &sg, &mg, &sg) {
            Ok(v) if v.abs() > 1e-10 => failures.push(format!("pair {k}: KL(p‖p) = {v}")),
            Ok(_) => {}
            Err(e) => failures.push(e.to_string()),
        }
    }
    SuiteResult {
        suite: Suite::Kl,
        checks: 2 * pairs,
        failures,
    }
}
