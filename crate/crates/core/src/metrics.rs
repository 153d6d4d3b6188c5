//! Evaluation of predicted high-resolution wind speed: mean-map and
//! per-timestamp RMSE, CRPS, the bicubic baseline, and the bookkeeping that
//! turns sampled ensembles into prediction sets with exact NFE counts.
//!
//! All metrics operate on speed in physical units (m/s).

use crate::denoiser::TrainedDenoiser;
use crate::diffusion::{sample_member, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::grid::{bicubic_upsample, decode_direction, names, FieldGrid, SamplePair};
use crate::guidance::{CountingDenoiser, Guidance};
use crate::seed;

/// Predicted ensembles and ground truth for a sequence of timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    ids: Vec<String>,
    predictions: Vec<Vec<FieldGrid>>,
    truths: Vec<FieldGrid>,
    nfe: u64,
}

impl PredictionSet {
    /// `predictions[i]` is the ensemble for timestamp `i`; `nfe` is the total
    /// number of denoiser calls spent producing all of them.
    pub fn new(ids: Vec<String>, predictions: Vec<Vec<FieldGrid>>, truths: Vec<FieldGrid>, nfe: u64) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::invalid("prediction set needs at least one timestamp"));
        }
        if predictions.len() != truths.len() || ids.len() != truths.len() {
            return Err(Error::dim(format!(
                "{} ids, {} predictions and {} truths",
                ids.len(),
                predictions.len(),
                truths.len()
            )));
        }
        let n = predictions[0].len();
        if n == 0 {
            return Err(Error::invalid("ensemble size must be at least one"));
        }
        let shape = truths[0].shape();
        for (i, (members, truth)) in predictions.iter().zip(&truths).enumerate() {
            if members.len() != n {
                return Err(Error::dim(format!("timestamp {i} has {} members, expected {n}", members.len())));
            }
            if truth.shape() != shape || members.iter().any(|m| m.shape() != shape) {
                return Err(Error::dim(format!("timestamp {i} does not match shape {shape:?}")));
            }
        }
        Ok(Self {
            ids,
            predictions,
            truths,
            nfe,
        })
    }

    /// Deterministic point predictions (ensemble size one).
    pub fn deterministic(ids: Vec<String>, predictions: Vec<FieldGrid>, truths: Vec<FieldGrid>, nfe: u64) -> Result<Self> {
        Self::new(ids, predictions.into_iter().map(|p| vec![p]).collect(), truths, nfe)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn predictions(&self) -> &[Vec<FieldGrid>] {
        &self.predictions
    }

    pub fn truths(&self) -> &[FieldGrid] {
        &self.truths
    }

    pub fn len(&self) -> usize {
        self.truths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truths.is_empty()
    }

    pub fn ensemble_size(&self) -> usize {
        self.predictions[0].len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.truths[0].shape()
    }

    pub fn nfe(&self) -> u64 {
        self.nfe
    }

    /// The first `n` members of every ensemble. Members are drawn from
    /// independent per-member streams, so this equals a run with ensemble
    /// size `n`; the NFE ledger is scaled accordingly.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let m = self.ensemble_size();
        if n == 0 || n > m {
            return Err(Error::invalid(format!("cannot keep {n} of {m} members")));
        }
        if self.nfe % m as u64 != 0 {
            return Err(Error::invalid("NFE ledger is not a whole number of members"));
        }
        Self::new(
            self.ids.clone(),
            self.predictions.iter().map(|e| e[..n].to_vec()).collect(),
            self.truths.clone(),
            self.nfe / m as u64 * n as u64,
        )
    }

    /// Per-timestamp ensemble means.
    pub fn ensemble_means(&self) -> Vec<FieldGrid> {
        self.predictions.iter().map(|e| mean_grid(e)).collect()
    }

    pub fn prediction_mean_map(&self) -> FieldGrid {
        mean_grid(&self.ensemble_means())
    }

    pub fn truth_mean_map(&self) -> FieldGrid {
        mean_grid(&self.truths)
    }

    pub fn mm_rmse(&self) -> f64 {
        rmse_values(self.prediction_mean_map().values(), self.truth_mean_map().values())
    }

    pub fn t_rmse(&self) -> f64 {
        t_rmse(&self.ensemble_means(), &self.truths).expect("validated shapes")
    }

    /// CRPS averaged over pixels and timestamps.
    pub fn crps(&self) -> f64 {
        let (h, w) = self.shape();
        let mut total = 0.0;
        let mut buf = Vec::with_capacity(self.ensemble_size());
        for (members, truth) in self.predictions.iter().zip(&self.truths) {
            for i in 0..h * w {
                buf.clear();
                buf.extend(members.iter().map(|m| m.values()[i]));
                total += crps_unchecked(&mut buf, truth.values()[i]);
            }
        }
        total / (self.len() * h * w) as f64
    }

    /// CRPS of mean maps: one mean map per ensemble member, scored per pixel
    /// against the true mean map and averaged over pixels.
    pub fn mean_map_crps(&self) -> f64 {
        let member_maps: Vec<FieldGrid> = (0..self.ensemble_size())
            .map(|m| mean_grid(&self.predictions.iter().map(|e| e[m].clone()).collect::<Vec<_>>()))
            .collect();
        let truth = self.truth_mean_map();
        let mut buf = Vec::with_capacity(member_maps.len());
        let mut total = 0.0;
        for (i, &y) in truth.values().iter().enumerate() {
            buf.clear();
            buf.extend(member_maps.iter().map(|m| m.values()[i]));
            total += crps_unchecked(&mut buf, y);
        }
        total / truth.values().len() as f64
    }

    /// Per-pixel bias of the prediction mean map against the true one.
    pub fn bias_map(&self) -> FieldGrid {
        let p = self.prediction_mean_map();
        let t = self.truth_mean_map();
        let (h, w) = p.shape();
        let v = p.values().iter().zip(t.values()).map(|(a, b)| a - b).collect();
        FieldGrid::new(h, w, v, p.units()).expect("matching shapes")
    }
}

fn mean_grid(grids: &[FieldGrid]) -> FieldGrid {
    let (h, w) = grids[0].shape();
    let mut acc = vec![0.0; h * w];
    for g in grids {
        for (a, v) in acc.iter_mut().zip(g.values()) {
            *a += v;
        }
    }
    let n = grids.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    FieldGrid::new(h, w, acc, grids[0].units()).expect("shape from first grid")
}

fn check_same_shape(a: &[FieldGrid], b: &[FieldGrid]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::dim(format!("{} predictions vs {} truths", a.len(), b.len())));
    }
    let shape = a[0].shape();
    if a.iter().chain(b).any(|g| g.shape() != shape) {
        return Err(Error::dim("all grids must share one shape"));
    }
    Ok(())
}

/// Per-pixel mean over timestamps.
pub fn mean_map(grids: &[FieldGrid]) -> Result<FieldGrid> {
    check_same_shape(grids, grids)?;
    Ok(mean_grid(grids))
}

fn rmse_values(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.len() as f64).sqrt()
}

pub fn mm_rmse(pred_mean_map: &FieldGrid, true_mean_map: &FieldGrid) -> Result<f64> {
    if pred_mean_map.shape() != true_mean_map.shape() {
        return Err(Error::dim(format!(
            "mean maps {:?} and {:?} differ in shape",
            pred_mean_map.shape(),
            true_mean_map.shape()
        )));
    }
    Ok(rmse_values(pred_mean_map.values(), true_mean_map.values()))
}

/// Root of the squared error averaged over timestamps and pixels.
pub fn t_rmse(predictions: &[FieldGrid], truths: &[FieldGrid]) -> Result<f64> {
    check_same_shape(predictions, truths)?;
    let mut sq = 0.0;
    for (p, t) in predictions.iter().zip(truths) {
        sq += p.values().iter().zip(t.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok((sq / (predictions.len() * truths[0].values().len()) as f64).sqrt())
}

/// Sorts `ens` in place and evaluates the energy form using the sorted
/// pairwise-difference identity.
fn crps_unchecked(ens: &mut [f64], obs: f64) -> f64 {
    ens.sort_by(f64::total_cmp);
    let n = ens.len() as f64;
    let abs_err: f64 = ens.iter().map(|x| (x - obs).abs()).sum::<f64>() / n;
    // sum_{i,j} |x_i - x_j| = 2 sum_i (2i - n + 1) x_(i)
    let spread: f64 = ens
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x)
        .sum::<f64>();
    (abs_err - spread / (n * n)).max(0.0)
}

/// CRPS of the empirical distribution of `ensemble` at observation `obs`.
pub fn crps(ensemble: &[f64], obs: f64) -> Result<f64> {
    if ensemble.is_empty() {
        return Err(Error::invalid("CRPS needs a non-empty ensemble"));
    }
    if !obs.is_finite() || ensemble.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("CRPS inputs must be finite".into()));
    }
    Ok(crps_unchecked(&mut ensemble.to_vec(), obs))
}

/// A high-resolution prediction in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct WindPrediction {
    pub speed: FieldGrid,
    /// Direction in degrees.
    pub direction: FieldGrid,
}

/// Bicubic upsampling of the low-resolution wind. Direction is interpolated
/// through its sin/cos components.
pub fn bicubic_baseline(pair: &SamplePair) -> Result<WindPrediction> {
    let scale = pair.scale_factor()?;
    let lr = |name: &str| {
        pair.conditioning
            .variable(name)
            .ok_or_else(|| Error::invalid(format!("baseline needs {name} in the conditioning")))
    };
    let speed = bicubic_upsample(lr(names::LR_SPEED)?, scale)?;
    let dir = lr(names::LR_DIRECTION)?;
    let sin = bicubic_upsample(&dir.map(|d| d.to_radians().sin())?, scale)?;
    let cos = bicubic_upsample(&dir.map(|d| d.to_radians().cos())?, scale)?;
    let (h, w) = speed.shape();
    let deg = sin.values().iter().zip(cos.values()).map(|(&s, &c)| decode_direction(s, c)).collect();
    Ok(WindPrediction {
        speed,
        direction: FieldGrid::new(h, w, deg, dir.units())?,
    })
}

/// Bicubic baseline over a set of pairs; costs no denoiser calls.
pub fn baseline_predictions(pairs: &[SamplePair]) -> Result<PredictionSet> {
    let mut preds = Vec::with_capacity(pairs.len());
    let mut truths = Vec::with_capacity(pairs.len());
    for p in pairs {
        preds.push(bicubic_baseline(p)?.speed);
        truths.push(p.hr_speed()?.clone());
    }
    PredictionSet::deterministic(pairs.iter().map(|p| p.timestamp_id.clone()).collect(), preds, truths, 0)
}

/// Converts a model-space sample back to physical wind.
pub fn wind_from_tensor(pair: &SamplePair, t: &crate::Tensor) -> Result<WindPrediction> {
    let speed = pair.speed_from_tensor(t)?;
    let (h, w) = speed.shape();
    let deg = t.channel(1).iter().zip(t.channel(2)).map(|(&s, &c)| decode_direction(s, c)).collect();
    Ok(WindPrediction {
        speed,
        direction: FieldGrid::new(h, w, deg, "degrees")?,
    })
}

/// Sampler seed of timestamp `index`; member `m` then uses stream `m` of it,
/// so smaller ensembles are prefixes of larger ones and every scheme sees
/// the same initial noise.
pub fn timestamp_seed(root: u64, index: usize) -> u64 {
    seed::derive(root, index as u64)
}

/// Samples `sampler.ensemble_count` members for every pair and tallies the
/// denoiser calls actually made.
pub fn sample_predictions(
    model: &TrainedDenoiser,
    pairs: &[SamplePair],
    guidance: &Guidance,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<(PredictionSet, Vec<Vec<WindPrediction>>)> {
    sampler.validate(sched)?;
    let mut nfe = 0;
    let mut speeds = Vec::with_capacity(pairs.len());
    let mut winds = Vec::with_capacity(pairs.len());
    let mut truths = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let counter = CountingDenoiser::new(model.bind(pair.assemble_conditioning()?)?);
        let cfg = SamplerConfig {
            seed: timestamp_seed(sampler.seed, i),
            ..*sampler
        };
        let (h, w) = pair.hr_shape()?;
        let shape = (model.model.architecture().target_channels, h, w);
        let mut members = Vec::with_capacity(sampler.ensemble_count);
        for m in 0..sampler.ensemble_count {
            let x = sample_member(&counter, guidance, &cfg, sched, shape, m)?;
            members.push(wind_from_tensor(pair, &x)?);
        }
        nfe += counter.calls();
        speeds.push(members.iter().map(|m| m.speed.clone()).collect());
        winds.push(members);
        truths.push(pair.hr_speed()?.clone());
    }
    let set = PredictionSet::new(pairs.iter().map(|p| p.timestamp_id.clone()).collect(), speeds, truths, nfe)?;
    Ok((set, winds))
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub model: String,
    pub domain: String,
    pub scheme: String,
    pub metric: String,
    /// Denoiser calls per sampling step and member.
    pub nfe_per_step: usize,
    /// Total denoiser calls spent on the whole prediction set.
    pub nfe_total: u64,
    pub ensemble: usize,
    pub value: f64,
}

pub const METRIC_HEADER: &str = "model,domain,scheme,metric,nfe_per_step,nfe_total,ensemble,value";

impl MetricRow {
    pub fn to_delimited(rows: &[MetricRow]) -> String {
        let mut out = String::from(METRIC_HEADER);
        out.push('\n');
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.9}\n",
                r.model, r.domain, r.scheme, r.metric, r.nfe_per_step, r.nfe_total, r.ensemble, r.value
            ));
        }
        out
    }
}

/// The four headline metrics of a prediction set as report rows.
pub fn metric_rows(model: &str, domain: &str, scheme: &str, nfe_per_step: usize, set: &PredictionSet) -> Vec<MetricRow> {
    [
        ("mm_rmse", set.mm_rmse()),
        ("t_rmse", set.t_rmse()),
        ("crps", set.crps()),
        ("mm_crps", set.mean_map_crps()),
    ]
    .into_iter()
    .map(|(metric, value)| MetricRow {
        model: model.into(),
        domain: domain.into(),
        scheme: scheme.into(),
        metric: metric.into(),
        nfe_per_step,
        nfe_total: set.nfe(),
        ensemble: set.ensemble_size(),
        value,
    })
    .collect()
}
