//! Two-component univariate Gaussian mixtures over per-example losses,
//! fitted by EM. The component with the smaller mean is the clean one.

use crate::error::{Error, Result};

/// Inputs whose total spread is below this are treated as degenerate.
const DEGENERATE_SPREAD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussComponent {
    pub mean: f64,
    pub variance: f64,
    pub weight: f64,
}

impl GaussComponent {
    fn log_density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * ((2.0 * std::f64::consts::PI * self.variance).ln() + d * d / self.variance)
    }

    fn log_weighted_density(&self, x: f64) -> f64 {
        if self.weight <= 0.0 {
            f64::NEG_INFINITY
        } else {
            self.weight.ln() + self.log_density(x)
        }
    }
}

/// A fitted two-component mixture; `clean` always has the smaller mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gmm1D2 {
    clean: GaussComponent,
    noisy: GaussComponent,
    degenerate: bool,
}

impl Gmm1D2 {
    pub fn clean(&self) -> &GaussComponent {
        &self.clean
    }

    pub fn noisy(&self) -> &GaussComponent {
        &self.noisy
    }

    /// Set when the input losses were effectively a single point and no
    /// meaningful two-component fit exists.
    pub fn degenerate(&self) -> bool {
        self.degenerate
    }

    /// Posterior probabilities `[clean, noisy]`, computed stably in log
    /// space. Underflow in both components resolves to 0.5/0.5.
    pub fn posteriors(&self, loss: f64) -> [f64; 2] {
        let lc = self.clean.log_weighted_density(loss);
        let ln = self.noisy.log_weighted_density(loss);
        let m = lc.max(ln);
        if m == f64::NEG_INFINITY {
            return [0.5, 0.5];
        }
        let ec = (lc - m).exp();
        let en = (ln - m).exp();
        let denom = ec + en;
        [ec / denom, en / denom]
    }
}

/// Posterior probability of the clean (small-mean) component.
pub fn clean_posterior(gmm: &Gmm1D2, loss: f64) -> f64 {
    gmm.posteriors(loss)[0]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmInit {
    /// Means at the given loss percentiles, both variances at the sample
    /// variance, equal weights.
    Percentiles { lower: f64, upper: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Variance floor as a fraction of the sample variance.
    pub var_floor: f64,
    pub init: EmInit,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 100,
            rel_tol: 1e-6,
            var_floor: 1e-6,
            init: EmInit::Percentiles { lower: 0.1, upper: 0.9 },
        }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("EM needs max_iters >= 1"));
        }
        if !(self.rel_tol > 0.0) || !(self.var_floor > 0.0) {
            return Err(Error::config("EM tolerances must be positive"));
        }
        let EmInit::Percentiles { lower, upper } = self.init;
        if !(0.0..=1.0).contains(&lower) || !(0.0..=1.0).contains(&upper) || lower >= upper {
            return Err(Error::config("init percentiles must satisfy 0 <= lower < upper <= 1"));
        }
        Ok(())
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Fit the mixture; see [`fit_em_traced`] for the likelihood trajectory.
pub fn fit_em(losses: &[f64], cfg: &EmConfig) -> Result<Gmm1D2> {
    fit_em_traced(losses, cfg).map(|(gmm, _)| gmm)
}

/// Fit the mixture and report the log-likelihood after each EM iteration
/// (on the original data scale).
pub fn fit_em_traced(losses: &[f64], cfg: &EmConfig) -> Result<(Gmm1D2, Vec<f64>)> {
    cfg.validate()?;
    if losses.len() < 2 {
        return Err(Error::contract(format!("EM needs at least 2 loss values, got {}", losses.len())));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::contract("EM requires finite loss values"));
    }

    // Sorting makes the fit invariant under permutations of the input;
    // standardizing makes it covariant under rescaling.
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mean: f64 = sorted.iter().sum::<f64>() / n;
    let variance: f64 = sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;

    if sorted[sorted.len() - 1] - sorted[0] <= DEGENERATE_SPREAD {
        let floor = cfg.var_floor * (variance + 1e-12);
        let comp = GaussComponent { mean, variance: floor.max(f64::MIN_POSITIVE), weight: 0.5 };
        return Ok((Gmm1D2 { clean: comp, noisy: comp, degenerate: true }, Vec::new()));
    }

    let scale = variance.sqrt();
    let z: Vec<f64> = sorted.iter().map(|x| (x - mean) / scale).collect();
    let z_var: f64 = z.iter().map(|v| v * v).sum::<f64>() / n;
    let var_floor = cfg.var_floor * (z_var + 1e-12);
    // Constant shift between standardized and original log-likelihood.
    let ll_shift = -n * scale.ln();

    let EmInit::Percentiles { lower, upper } = cfg.init;
    let mut comps = [
        GaussComponent { mean: percentile(&z, lower), variance: z_var, weight: 0.5 },
        GaussComponent { mean: percentile(&z, upper), variance: z_var, weight: 0.5 },
    ];

    let mut resp = vec![0.0f64; z.len()];
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut prev_comps = comps;

    for _ in 0..cfg.max_iters {
        // E-step: responsibility of the first component, plus the LL.
        let mut ll = 0.0;
        for (i, &x) in z.iter().enumerate() {
            let l0 = comps[0].log_weighted_density(x);
            let l1 = comps[1].log_weighted_density(x);
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            resp[i] = e0 / (e0 + e1);
            ll += m + (e0 + e1).ln();
        }

        if ll < prev_ll - 1e-12 {
            // Variance flooring can in rare cases push the likelihood
            // backwards; keep the previous parameters.
            comps = prev_comps;
            break;
        }
        trace.push(ll + ll_shift);
        let converged = prev_ll.is_finite() && (ll - prev_ll).abs() <= cfg.rel_tol * prev_ll.abs();
        prev_ll = ll;
        if converged {
            break;
        }

        // M-step.
        prev_comps = comps;
        for (k, comp) in comps.iter_mut().enumerate() {
            let weight_of = |r: f64| if k == 0 { r } else { 1.0 - r };
            let nk: f64 = resp.iter().map(|&r| weight_of(r)).sum();
            if nk < 1e-12 {
                // Component lost all responsibility; freeze it.
                *comp = GaussComponent { weight: nk / n, ..prev_comps[k] };
                continue;
            }
            let mu: f64 = z.iter().zip(&resp).map(|(&x, &r)| weight_of(r) * x).sum::<f64>() / nk;
            let var: f64 = z
                .iter()
                .zip(&resp)
                .map(|(&x, &r)| weight_of(r) * (x - mu) * (x - mu))
                .sum::<f64>()
                / nk;
            *comp = GaussComponent { mean: mu, variance: var.max(var_floor), weight: nk / n };
        }
    }

    // Undo standardization and order components by mean.
    let restore = |c: GaussComponent| GaussComponent {
        mean: mean + scale * c.mean,
        variance: scale * scale * c.variance,
        weight: c.weight,
    };
    let a = restore(comps[0]);
    let b = restore(comps[1]);
    let (clean, noisy) = if a.mean <= b.mean { (a, b) } else { (b, a) };
    Ok((Gmm1D2 { clean, noisy, degenerate: false }, trace))
}
