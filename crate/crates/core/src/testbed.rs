//! Linear-Gaussian conditional model with closed-form scores at every noise
//! level: an exact oracle for samplers and guided score combinations.
//!
//! Observations follow `y_j = A_j x + n_j`, `n_j ~ N(0, R_j)`, with prior
//! `x ~ N(mu_0, S_0)`. Conditioning on any subset of groups gives a Gaussian
//! posterior in closed form; the variance-preserving forward process maps a
//! Gaussian `N(m, S)` to `N(sqrt(ab) m, ab S + (1 - ab) I)`.
//!
//! Tensors of shape `[d, h, w]` are treated as `h * w` independent
//! `d`-vectors, so one sampler call draws a whole Monte Carlo batch.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::grid::GroupMask;
use crate::guidance::{Denoiser, SubsetWeights};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationGroup {
    pub name: String,
    pub gain: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
    pub observed: DVector<f64>,
}

/// A Gaussian in moment form.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Information form: log density `-x^T P x / 2 + h^T x + const`.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl NaturalParams {
    pub fn to_gaussian(&self) -> Result<Gaussian> {
        let chol = self
            .precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("combined precision is not positive definite".into()))?;
        Ok(Gaussian {
            mean: chol.solve(&self.shift),
            cov: chol.inverse(),
        })
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.shift - &self.precision * x
    }

    /// Unnormalized log density.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        -0.5 * x.dot(&(&self.precision * x)) + self.shift.dot(x)
    }

    fn axpy(&mut self, w: f64, other: &NaturalParams) {
        self.precision += &other.precision * w;
        self.shift += &other.shift * w;
    }
}

impl Gaussian {
    pub fn standard(d: usize) -> Gaussian {
        Gaussian {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
        }
    }

    pub fn natural(&self) -> Result<NaturalParams> {
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
        Ok(NaturalParams {
            shift: chol.solve(&self.mean),
            precision: chol.inverse(),
        })
    }

    /// The law of `sqrt(ab) x + sqrt(1 - ab) eps` for `x` from this Gaussian.
    pub fn diffused(&self, alpha_bar: f64) -> Gaussian {
        let d = self.mean.len();
        Gaussian {
            mean: &self.mean * alpha_bar.sqrt(),
            cov: &self.cov * alpha_bar + DMatrix::identity(d, d) * (1.0 - alpha_bar),
        }
    }

    /// Log density including normalization.
    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
        let r = x - &self.mean;
        let z = chol.solve(&r);
        let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let d = x.len() as f64;
        Ok(-0.5 * (r.dot(&z) + logdet + d * (2.0 * std::f64::consts::PI).ln()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianConditionalModel {
    prior: Gaussian,
    groups: Vec<ObservationGroup>,
    names: Vec<String>,
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0) && m.clone().cholesky().is_some()
}

impl GaussianConditionalModel {
    pub fn new(prior: Gaussian, groups: Vec<ObservationGroup>) -> Result<Self> {
        let d = prior.mean.len();
        if d == 0 {
            return Err(Error::invalid("testbed dimension must be >= 1"));
        }
        if prior.cov.shape() != (d, d) || !is_spd(&prior.cov) {
            return Err(Error::invalid("prior covariance must be d x d symmetric positive definite"));
        }
        if groups.is_empty() || groups.len() > 64 {
            return Err(Error::invalid("testbed needs 1..=64 observation groups"));
        }
        for g in &groups {
            let o = g.observed.len();
            if g.gain.shape() != (o, d) {
                return Err(Error::dim(format!("gain of {} must be {o} x {d}", g.name)));
            }
            if g.noise_cov.shape() != (o, o) || !is_spd(&g.noise_cov) {
                return Err(Error::invalid(format!(
                    "noise covariance of {} must be symmetric positive definite",
                    g.name
                )));
            }
        }
        let names: Vec<String> = groups.iter().map(|g| g.name.clone()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::invalid(format!("duplicate group {n}")));
            }
        }
        Ok(Self { prior, groups, names })
    }

    /// Two-dimensional state with three scalar observations of distinct
    /// gains, so every subset posterior differs.
    pub fn default_2d() -> Self {
        let obs = |name: &str, gain: [f64; 2], var: f64, y: f64| ObservationGroup {
            name: name.into(),
            gain: DMatrix::from_row_slice(1, 2, &gain),
            noise_cov: DMatrix::from_element(1, 1, var),
            observed: DVector::from_element(1, y),
        };
        Self::new(
            Gaussian {
                mean: DVector::zeros(2),
                cov: DMatrix::identity(2, 2),
            },
            vec![
                obs("g0", [1.0, 0.0], 0.3, 1.0),
                obs("g1", [0.0, 1.0], 0.5, -0.8),
                obs("g2", [1.0, 1.0], 0.4, 0.5),
            ],
        )
        .expect("default testbed is valid")
    }

    pub fn dimension(&self) -> usize {
        self.prior.mean.len()
    }

    pub fn group_names(&self) -> &[String] {
        &self.names
    }

    pub fn full_mask(&self) -> GroupMask {
        GroupMask::full(self.groups.len())
    }

    fn check_mask(&self, k: GroupMask) -> Result<()> {
        if k.0 & !self.full_mask().0 != 0 {
            return Err(Error::invalid(format!("subset {:#b} references unknown groups", k.0)));
        }
        Ok(())
    }

    /// Natural parameters of `p(x | K)` up to normalization.
    pub fn posterior_natural(&self, k: GroupMask) -> Result<NaturalParams> {
        self.check_mask(k)?;
        let mut nat = self.prior.natural()?;
        for (j, g) in self.groups.iter().enumerate() {
            if !k.contains(j) {
                continue;
            }
            let rinv = g
                .noise_cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numeric("noise covariance is singular".into()))?
                .inverse();
            let at_rinv = g.gain.transpose() * rinv;
            nat.precision += &at_rinv * &g.gain;
            nat.shift += &at_rinv * &g.observed;
        }
        Ok(nat)
    }

    pub fn posterior(&self, k: GroupMask) -> Result<Gaussian> {
        self.posterior_natural(k)?.to_gaussian()
    }

    /// Law of `x_t` given the groups in `k`.
    pub fn noised_posterior(&self, k: GroupMask, t: usize, sched: &NoiseSchedule) -> Result<Gaussian> {
        Ok(self.posterior(k)?.diffused(sched.alpha_bar(t)))
    }

    /// `grad_x log p_t(x | K)`
    pub fn exact_score(&self, x: &DVector<f64>, k: GroupMask, t: usize, sched: &NoiseSchedule) -> Result<DVector<f64>> {
        if t == 0 || t > sched.len() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", sched.len())));
        }
        if x.len() != self.dimension() {
            return Err(Error::dim(format!("point of dimension {} for a {}-d model", x.len(), self.dimension())));
        }
        Ok(self.noised_posterior(k, t, sched)?.natural()?.gradient(x))
    }

    /// Natural parameters of `p(x|C) prod_i [p(x|K_i) / p(x)]^{w_i}`, which
    /// is `p(x|C) prod_i p(K_i|x)^{w_i}` up to normalization. With
    /// `alpha_bar = Some(ab)` every factor is taken at that noise level.
    pub fn tilted_natural(&self, terms: &[(GroupMask, f64)], alpha_bar: Option<f64>) -> Result<NaturalParams> {
        let level = |k: GroupMask| -> Result<NaturalParams> {
            match alpha_bar {
                None => self.posterior_natural(k),
                Some(ab) => self.posterior(k)?.diffused(ab).natural(),
            }
        };
        let mut nat = level(self.full_mask())?;
        let uncond = level(GroupMask::EMPTY)?;
        for &(k, w) in terms {
            self.check_mask(k)?;
            nat.axpy(w, &level(k)?);
            nat.axpy(-w, &uncond);
        }
        Ok(nat)
    }

    pub fn tilted_distribution(&self, weights: &SubsetWeights) -> Result<Gaussian> {
        if weights.family().universe() != self.group_names() {
            return Err(Error::invalid("subset groups do not match the testbed groups"));
        }
        let terms: Vec<(GroupMask, f64)> = weights
            .subsets()
            .iter()
            .copied()
            .zip(weights.weights().iter().copied())
            .collect();
        self.tilted_natural(&terms, None)?.to_gaussian()
    }

    /// Affine clean-data predictor `x0 = M x_t + c` of subset `K` at step `t`.
    fn x0_map(&self, k: GroupMask, t: usize, sched: &NoiseSchedule) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let post = self.posterior(k)?;
        let ab = sched.alpha_bar(t);
        let noised = post.diffused(ab);
        let nat = noised.natural()?;
        // Tweedie: E[x0 | x_t] = (x_t + (1 - ab) score) / sqrt(ab)
        let d = self.dimension();
        let s = (1.0 - ab) / ab.sqrt();
        let m = (DMatrix::identity(d, d) - &nat.precision * (1.0 - ab)) / ab.sqrt();
        let c = &nat.shift * s;
        Ok((m, c))
    }

    pub fn oracle(&self, sched: &NoiseSchedule) -> OracleDenoiser<'_> {
        OracleDenoiser {
            model: self,
            sched: sched.clone(),
        }
    }
}

/// The exact posterior-mean denoiser of a [`GaussianConditionalModel`].
pub struct OracleDenoiser<'a> {
    model: &'a GaussianConditionalModel,
    sched: NoiseSchedule,
}

fn for_each_point(x: &Tensor, d: usize, mut f: impl FnMut(&DVector<f64>) -> DVector<f64>) -> Result<Tensor> {
    if x.channels() != d {
        return Err(Error::dim(format!("oracle expects {d} channels, got {}", x.channels())));
    }
    let n = x.plane_len();
    let mut out = Tensor::zeros(d, x.height(), x.width());
    let mut v = DVector::zeros(d);
    for p in 0..n {
        for c in 0..d {
            v[c] = x.data()[c * n + p];
        }
        let y = f(&v);
        for c in 0..d {
            out.data_mut()[c * n + p] = y[c];
        }
    }
    Ok(out)
}

impl Denoiser for OracleDenoiser<'_> {
    fn groups(&self) -> &[String] {
        self.model.group_names()
    }

    fn predict_x0(&self, x_t: &Tensor, t: usize, view: GroupMask) -> Result<Tensor> {
        if t == 0 || t > self.sched.len() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.sched.len())));
        }
        let (m, c) = self.model.x0_map(view, t, &self.sched)?;
        for_each_point(x_t, self.model.dimension(), |v| &m * v + &c)
    }

    fn predict_x0_vjp(&self, x_t: &Tensor, t: usize, view: GroupMask, cotangent: &Tensor) -> Result<Tensor> {
        x_t.ensure_same_shape(cotangent, "oracle vjp")?;
        let (m, _) = self.model.x0_map(view, t, &self.sched)?;
        let mt = m.transpose();
        for_each_point(cotangent, self.model.dimension(), |g| &mt * g)
    }
}

/// Endpoint law of the deterministic probability-flow sampler driven by the
/// guided score, started from `x ~ initial` at step `start`. The guided
/// score is affine in `x`, so mean and covariance follow a linear ODE in
/// `rho = sigma / alpha`, integrated here with classic RK4.
pub fn guided_flow_endpoint(
    model: &GaussianConditionalModel,
    terms: &[(GroupMask, f64)],
    start: usize,
    initial: &Gaussian,
    sched: &NoiseSchedule,
    rk_steps: usize,
) -> Result<Gaussian> {
    let d = model.dimension();
    let ab_start = sched.alpha_bar(start);
    let rho0 = ((1.0 - ab_start) / ab_start).sqrt();
    // y = x / alpha; dy/drho = eps(x) = -sigma * (h - P x) = B y + b
    let field = |rho: f64| -> Result<(DMatrix<f64>, DVector<f64>)> {
        let ab = 1.0 / (1.0 + rho * rho);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let nat = model.tilted_natural(terms, Some(ab))?;
        Ok((&nat.precision * (s * a), -&nat.shift * s))
    };
    if initial.mean.len() != d {
        return Err(Error::dim("initial law has the wrong dimension"));
    }
    let mut mean = &initial.mean / ab_start.sqrt();
    let mut cov = &initial.cov / ab_start;
    let n = rk_steps.max(1);
    // integrate in log(rho) for accuracy near rho -> 0, down to a tiny rho
    let (u0, u1) = (rho0.ln(), (1e-8f64).ln());
    let du = (u1 - u0) / n as f64;
    let deriv = |u: f64, m: &DVector<f64>, c: &DMatrix<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let rho = u.exp();
        let (b, bb) = field(rho)?;
        let dm = (&b * m + bb) * rho;
        let dc = (&b * c + c * b.transpose()) * rho;
        Ok((dm, dc))
    };
    let mut u = u0;
    for _ in 0..n {
        let (k1m, k1c) = deriv(u, &mean, &cov)?;
        let (k2m, k2c) = deriv(u + du / 2.0, &(&mean + &k1m * (du / 2.0)), &(&cov + &k1c * (du / 2.0)))?;
        let (k3m, k3c) = deriv(u + du / 2.0, &(&mean + &k2m * (du / 2.0)), &(&cov + &k2c * (du / 2.0)))?;
        let (k4m, k4c) = deriv(u + du, &(&mean + &k3m * du), &(&cov + &k3c * du))?;
        mean += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (du / 6.0);
        cov += (k1c + k2c * 2.0 + k3c * 2.0 + k4c) * (du / 6.0);
        u += du;
    }
    // at rho ~ 0, alpha ~ 1 and x = y
    let ab = 1.0 / (1.0 + u.exp().powi(2));
    Ok(Gaussian {
        mean: mean * ab.sqrt(),
        cov: cov * ab,
    })
}

/// Structured-text parameter file of a testbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestbedSpec {
    pub prior_mean: Vec<f64>,
    pub prior_cov: Vec<Vec<f64>>,
    #[serde(rename = "group")]
    pub groups: Vec<GroupSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub name: String,
    pub gain: Vec<Vec<f64>>,
    pub noise_cov: Vec<Vec<f64>>,
    pub observed: Vec<f64>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl GaussianConditionalModel {
    pub fn from_spec(spec: &TestbedSpec) -> Result<Self> {
        let prior = Gaussian {
            mean: DVector::from_vec(spec.prior_mean.clone()),
            cov: matrix(&spec.prior_cov, "prior_cov")?,
        };
        let groups = spec
            .groups
            .iter()
            .map(|g| {
                Ok(ObservationGroup {
                    name: g.name.clone(),
                    gain: matrix(&g.gain, "gain")?,
                    noise_cov: matrix(&g.noise_cov, "noise_cov")?,
                    observed: DVector::from_vec(g.observed.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(prior, groups).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_spec(&self) -> TestbedSpec {
        TestbedSpec {
            prior_mean: self.prior.mean.iter().copied().collect(),
            prior_cov: rows(&self.prior.cov),
            groups: self
                .groups
                .iter()
                .map(|g| GroupSpec {
                    name: g.name.clone(),
                    gain: rows(&g.gain),
                    noise_cov: rows(&g.noise_cov),
                    observed: g.observed.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: TestbedSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_spec(&spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_spec()).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Sample mean and covariance of the `d`-vectors stored in a tensor.
pub fn sample_moments(x: &Tensor) -> Gaussian {
    let d = x.channels();
    let n = x.plane_len();
    let mut mean = DVector::zeros(d);
    for c in 0..d {
        mean[c] = x.channel(c).iter().sum::<f64>() / n as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = x
                .channel(i)
                .iter()
                .zip(x.channel(j))
                .map(|(a, b)| (a - mean[i]) * (b - mean[j]))
                .sum();
            cov[(i, j)] = s / (n - 1) as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    Gaussian { mean, cov }
}

/// Monte Carlo standard errors of the sample mean and of each sample
/// covariance entry for `n` Gaussian draws with covariance `cov`.
pub fn standard_errors(cov: &DMatrix<f64>, n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let d = cov.nrows();
    let nf = n as f64;
    let mean_se = DVector::from_fn(d, |i, _| (cov[(i, i)] / nf).sqrt());
    let cov_se = DMatrix::from_fn(d, d, |i, j| ((cov[(i, j)].powi(2) + cov[(i, i)] * cov[(j, j)]) / (nf - 1.0)).sqrt());
    (mean_se, cov_se)
}
