//! Classifier-free and composite classifier-free guidance over an abstract
//! denoiser, with subset enumeration and per-view call deduplication.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::diffusion::{x0_to_eps, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::GroupMask;
use crate::tensor::Tensor;

/// A clean-data predictor bound to one conditioning instance. The `view`
/// mask selects which dropout groups are visible; absent groups are treated
/// as dropped (zeroed).
pub trait Denoiser {
    /// Ordered dropout-group names; bit `i` of a view refers to `groups()[i]`.
    fn groups(&self) -> &[String];

    fn predict_x0(&self, x_t: &Tensor, t: usize, view: GroupMask) -> Result<Tensor>;

    /// Vector-Jacobian product `(d x0_pred / d x_t)^T cotangent`.
    fn predict_x0_vjp(&self, _x_t: &Tensor, _t: usize, _view: GroupMask, _cotangent: &Tensor) -> Result<Tensor> {
        Err(Error::Unsupported("this denoiser has no input gradient".into()))
    }

    fn full_view(&self) -> GroupMask {
        GroupMask::full(self.groups().len())
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn groups(&self) -> &[String] {
        (**self).groups()
    }

    fn predict_x0(&self, x_t: &Tensor, t: usize, view: GroupMask) -> Result<Tensor> {
        (**self).predict_x0(x_t, t, view)
    }

    fn predict_x0_vjp(&self, x_t: &Tensor, t: usize, view: GroupMask, cotangent: &Tensor) -> Result<Tensor> {
        (**self).predict_x0_vjp(x_t, t, view, cotangent)
    }
}

/// Wraps a denoiser and counts forward calls (neural function evaluations).
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicU64,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn groups(&self) -> &[String] {
        self.inner.groups()
    }

    fn predict_x0(&self, x_t: &Tensor, t: usize, view: GroupMask) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_x0(x_t, t, view)
    }

    fn predict_x0_vjp(&self, x_t: &Tensor, t: usize, view: GroupMask, cotangent: &Tensor) -> Result<Tensor> {
        self.inner.predict_x0_vjp(x_t, t, view, cotangent)
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// All non-empty subsets of `k` groups that omit at most `p` of them,
/// ordered by omission count and then lexicographically by omitted indices.
pub fn enumerate_subsets(k: usize, p: usize) -> Result<Vec<GroupMask>> {
    if p > k {
        return Err(Error::invalid(format!("cannot omit {p} of {k} groups")));
    }
    if k == 0 || k > 64 {
        return Err(Error::invalid(format!("group count must lie in 1..=64, got {k}")));
    }
    fn combos(start: usize, k: usize, left: usize, mask: GroupMask, out: &mut Vec<GroupMask>) {
        if left == 0 {
            if !mask.is_empty() {
                out.push(mask);
            }
            return;
        }
        for i in start..=k - left {
            combos(i + 1, k, left - 1, mask.without(i), out);
        }
    }
    let mut out = Vec::new();
    for omit in 0..=p {
        combos(0, k, omit, GroupMask::full(k), &mut out);
    }
    debug_assert_eq!(
        out.len(),
        (0..=p).map(|i| binomial(k, i)).sum::<usize>() - usize::from(p == k)
    );
    Ok(out)
}

/// The candidate subsets of conditioning groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetFamily {
    universe: Vec<String>,
    subsets: Vec<GroupMask>,
    max_omitted: usize,
}

impl SubsetFamily {
    pub fn enumerate(universe: Vec<String>, max_omitted: usize) -> Result<Self> {
        let subsets = enumerate_subsets(universe.len(), max_omitted)?;
        Self::new(universe, subsets, max_omitted)
    }

    pub fn new(universe: Vec<String>, subsets: Vec<GroupMask>, max_omitted: usize) -> Result<Self> {
        let k = universe.len();
        if k == 0 || k > 64 {
            return Err(Error::invalid(format!("group count must lie in 1..=64, got {k}")));
        }
        for (i, name) in universe.iter().enumerate() {
            if universe[..i].contains(name) {
                return Err(Error::invalid(format!("duplicate group {name}")));
            }
        }
        let full = GroupMask::full(k);
        for (i, s) in subsets.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::invalid("subsets must be non-empty"));
            }
            if s.0 & !full.0 != 0 {
                return Err(Error::invalid(format!("subset {:#b} references unknown groups", s.0)));
            }
            if k - s.count() > max_omitted {
                return Err(Error::invalid(format!(
                    "subset {} omits more than {max_omitted} groups",
                    mask_string(*s, k)
                )));
            }
            if subsets[..i].contains(s) {
                return Err(Error::invalid(format!("duplicate subset {}", mask_string(*s, k))));
            }
        }
        Ok(Self {
            universe,
            subsets,
            max_omitted,
        })
    }

    pub fn universe(&self) -> &[String] {
        &self.universe
    }

    pub fn subsets(&self) -> &[GroupMask] {
        &self.subsets
    }

    pub fn max_omitted(&self) -> usize {
        self.max_omitted
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    /// Group names contained in subset `i`.
    pub fn members(&self, i: usize) -> Vec<&str> {
        let s = self.subsets[i];
        self.universe
            .iter()
            .enumerate()
            .filter(|(j, _)| s.contains(*j))
            .map(|(_, n)| n.as_str())
            .collect()
    }

    pub fn label(&self, i: usize) -> String {
        let s = self.subsets[i];
        if s == GroupMask::full(self.universe.len()) {
            "all".into()
        } else {
            let omitted: Vec<&str> = self
                .universe
                .iter()
                .enumerate()
                .filter(|(j, _)| !s.contains(*j))
                .map(|(_, n)| n.as_str())
                .collect();
            format!("all-minus-{}", omitted.join("+"))
        }
    }

    fn without(&self, i: usize) -> SubsetFamily {
        let mut out = self.clone();
        out.subsets.remove(i);
        out
    }
}

/// Bit string with character `i` set for group `i`.
pub fn mask_string(mask: GroupMask, k: usize) -> String {
    (0..k).map(|i| if mask.contains(i) { '1' } else { '0' }).collect()
}

pub fn parse_mask(text: &str, k: usize) -> Result<GroupMask> {
    if text.len() != k {
        return Err(Error::Config(format!("mask {text:?} must have {k} characters")));
    }
    text.chars().enumerate().try_fold(GroupMask::EMPTY, |m, (i, c)| match c {
        '1' => Ok(m.with(i)),
        '0' => Ok(m),
        _ => Err(Error::Config(format!("mask {text:?} may contain only 0 and 1"))),
    })
}

/// Composite-guidance configuration: subsets with weights on the W-simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetWeights {
    family: SubsetFamily,
    weights: Vec<f64>,
    total: f64,
}

const SIMPLEX_TOL: f64 = 1e-9;

impl SubsetWeights {
    pub fn new(family: SubsetFamily, weights: Vec<f64>, total: f64) -> Result<Self> {
        if weights.len() != family.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} subsets",
                weights.len(),
                family.len()
            )));
        }
        if !(total.is_finite() && total >= 0.0) {
            return Err(Error::invalid(format!("total weight must be finite and >= 0, got {total}")));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - total).abs() > SIMPLEX_TOL * total.max(1.0) {
            return Err(Error::invalid(format!("weights sum to {sum}, expected {total}")));
        }
        Ok(Self {
            family,
            weights,
            total,
        })
    }

    /// Uniform weights `W / n` over every subset of the family.
    pub fn uniform(family: SubsetFamily, total: f64) -> Result<Self> {
        let n = family.len().max(1) as f64;
        let weights = vec![total / n; family.len()];
        Self::new(family, weights, total)
    }

    /// Standard CFG as a single full-conditioning subset with weight `w`.
    pub fn cfg(universe: Vec<String>, w: f64) -> Result<Self> {
        let k = universe.len();
        let family = SubsetFamily::new(universe, vec![GroupMask::full(k)], 0)?;
        Self::new(family, vec![w], w)
    }

    pub fn family(&self) -> &SubsetFamily {
        &self.family
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn subsets(&self) -> &[GroupMask] {
        self.family.subsets()
    }

    /// Drops subset `i` and its weight, leaving the weights unnormalized.
    pub(crate) fn remove(&self, i: usize) -> (SubsetFamily, Vec<f64>) {
        let mut w = self.weights.clone();
        w.remove(i);
        (self.family.without(i), w)
    }

    /// Same subsets with arbitrary (off-simplex, possibly negative) weights,
    /// for finite-difference probes.
    pub(crate) fn probe(&self, weights: Vec<f64>) -> SubsetWeights {
        debug_assert_eq!(weights.len(), self.weights.len());
        SubsetWeights {
            family: self.family.clone(),
            total: weights.iter().sum(),
            weights,
        }
    }

    /// Keeps only subsets with weight above `threshold`.
    pub fn support(&self, threshold: f64) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.weights[i] > threshold).collect()
    }

    pub fn to_spec(&self) -> SubsetWeightsSpec {
        let k = self.family.universe.len();
        SubsetWeightsSpec {
            groups: self.family.universe.clone(),
            max_omitted: self.family.max_omitted,
            total: self.total,
            subsets: self
                .family
                .subsets
                .iter()
                .zip(&self.weights)
                .map(|(&m, &w)| SubsetEntry {
                    mask: mask_string(m, k),
                    weight: w,
                })
                .collect(),
        }
    }

    pub fn from_spec(spec: &SubsetWeightsSpec) -> Result<Self> {
        let k = spec.groups.len();
        let masks = spec
            .subsets
            .iter()
            .map(|e| parse_mask(&e.mask, k))
            .collect::<Result<Vec<_>>>()?;
        let family = SubsetFamily::new(spec.groups.clone(), masks, spec.max_omitted)
            .map_err(|e| Error::Config(e.to_string()))?;
        Self::new(family, spec.subsets.iter().map(|e| e.weight).collect(), spec.total)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Standalone text block with a `[subset_weights]` table.
    pub fn to_toml(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            subset_weights: &'a SubsetWeightsSpec,
        }
        toml::to_string(&Doc {
            subset_weights: &self.to_spec(),
        })
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            subset_weights: SubsetWeightsSpec,
        }
        let doc: Doc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_spec(&doc.subset_weights)
    }
}

/// Serialized form of [`SubsetWeights`]. Masks are bit strings over
/// `groups`, e.g. `"101"` keeps the first and third group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetWeightsSpec {
    pub groups: Vec<String>,
    pub max_omitted: usize,
    pub total: f64,
    #[serde(rename = "subset")]
    pub subsets: Vec<SubsetEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetEntry {
    pub mask: String,
    pub weight: f64,
}

/// `eps_cond + w (eps_cond - eps_uncond)`
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    eps_cond.ensure_same_shape(eps_uncond, "cfg_combine")?;
    Ok(eps_cond.zip_map(eps_uncond, |c, u| c + w * (c - u)))
}

/// `eps_full + sum_i w_i (eps_subsets[i] - eps_uncond)`
pub fn ccfg_combine(
    eps_full: &Tensor,
    eps_subsets: &[&Tensor],
    eps_uncond: &Tensor,
    weights: &SubsetWeights,
) -> Result<Tensor> {
    combine_weighted(eps_full, eps_subsets, eps_uncond, weights.weights())
}

pub(crate) fn combine_weighted(
    eps_full: &Tensor,
    eps_subsets: &[&Tensor],
    eps_uncond: &Tensor,
    weights: &[f64],
) -> Result<Tensor> {
    if eps_subsets.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} subset predictions for {} weights",
            eps_subsets.len(),
            weights.len()
        )));
    }
    eps_full.ensure_same_shape(eps_uncond, "ccfg_combine")?;
    let mut out = eps_full.clone();
    for (e, &w) in eps_subsets.iter().zip(weights) {
        eps_full.ensure_same_shape(e, "ccfg_combine")?;
        if w != 0.0 {
            out.axpy(w, e);
            out.axpy(-w, eps_uncond);
        }
    }
    Ok(out)
}

/// How the per-step noise prediction is formed.
#[derive(Debug, Clone, PartialEq)]
pub enum Guidance {
    /// Full conditioning only.
    Direct,
    /// Classifier-free guidance with scale `w`.
    Cfg(f64),
    /// Composite guidance over conditioning subsets.
    Composite(SubsetWeights),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Direct,
    Cfg,
    Ccfg,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Scheme::Direct),
            "cfg" => Ok(Scheme::Cfg),
            "ccfg" => Ok(Scheme::Ccfg),
            _ => Err(Error::Config(format!("unknown scheme {s:?}; expected direct, cfg or ccfg"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Direct => "direct",
            Scheme::Cfg => "cfg",
            Scheme::Ccfg => "ccfg",
        })
    }
}

impl Guidance {
    pub fn scheme(&self) -> Scheme {
        match self {
            Guidance::Direct => Scheme::Direct,
            Guidance::Cfg(_) => Scheme::Cfg,
            Guidance::Composite(_) => Scheme::Ccfg,
        }
    }

    fn validate(&self, groups: &[String]) -> Result<()> {
        if let Guidance::Composite(sw) = self {
            if sw.is_empty() {
                return Err(Error::invalid("composite guidance needs at least one subset"));
            }
            if sw.family().universe() != groups {
                return Err(Error::invalid(format!(
                    "subset groups {:?} do not match denoiser groups {:?}",
                    sw.family().universe(),
                    groups
                )));
            }
        }
        Ok(())
    }

    /// Distinct conditioning views evaluated per step, in evaluation order.
    pub fn views(&self, k: usize) -> Vec<GroupMask> {
        let full = GroupMask::full(k);
        let mut out = vec![full];
        let mut push = |m: GroupMask| {
            if !out.contains(&m) {
                out.push(m);
            }
        };
        match self {
            Guidance::Direct => {}
            Guidance::Cfg(_) => push(GroupMask::EMPTY),
            Guidance::Composite(sw) => {
                for &s in sw.subsets() {
                    push(s);
                }
                push(GroupMask::EMPTY);
            }
        }
        out
    }

    /// Denoiser calls per sampling step.
    pub fn nfe_per_step(&self, k: usize) -> usize {
        self.views(k).len()
    }

    /// The guided prediction as a linear combination `sum_v c_v pred_v` over
    /// distinct views; coefficients sum to one.
    pub fn view_coefficients(&self, k: usize) -> Vec<(GroupMask, f64)> {
        let full = GroupMask::full(k);
        let mut coeffs: BTreeMap<GroupMask, f64> = BTreeMap::new();
        *coeffs.entry(full).or_default() += 1.0;
        match self {
            Guidance::Direct => {}
            Guidance::Cfg(w) => {
                *coeffs.entry(full).or_default() += w;
                *coeffs.entry(GroupMask::EMPTY).or_default() -= w;
            }
            Guidance::Composite(sw) => {
                for (&s, &w) in sw.subsets().iter().zip(sw.weights()) {
                    *coeffs.entry(s).or_default() += w;
                    *coeffs.entry(GroupMask::EMPTY).or_default() -= w;
                }
            }
        }
        self.views(k)
            .into_iter()
            .map(|v| (v, coeffs.get(&v).copied().unwrap_or(0.0)))
            .collect()
    }
}

/// Guided noise prediction at `(x_t, t)`. Each distinct conditioning view is
/// evaluated exactly once.
pub fn evaluate_guided_eps(
    denoiser: &dyn Denoiser,
    x_t: &Tensor,
    t: usize,
    guidance: &Guidance,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let groups = denoiser.groups();
    guidance.validate(groups)?;
    let k = groups.len();
    let mut eps: BTreeMap<GroupMask, Tensor> = BTreeMap::new();
    for view in guidance.views(k) {
        let x0 = denoiser.predict_x0(x_t, t, view)?;
        eps.insert(view, x0_to_eps(x_t, &x0, t, sched)?);
    }
    let full = &eps[&GroupMask::full(k)];
    match guidance {
        Guidance::Direct => Ok(full.clone()),
        Guidance::Cfg(w) => cfg_combine(full, &eps[&GroupMask::EMPTY], *w),
        Guidance::Composite(sw) => {
            let subs: Vec<&Tensor> = sw.subsets().iter().map(|s| &eps[s]).collect();
            ccfg_combine(full, &subs, &eps[&GroupMask::EMPTY], sw)
        }
    }
}
