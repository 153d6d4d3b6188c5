//! End-to-end comparisons on the synthetic toy domain. The model is trained
//! once and shared by both checks.

use std::sync::OnceLock;

use ccfg_core::denoiser::{prepare_examples, train, Architecture, TrainConfig, TrainedDenoiser};
use ccfg_core::diffusion::{NoiseSchedule, SamplerConfig};
use ccfg_core::grid::{names, sample_crop, Dataset, SamplePair, SyntheticConfig, SyntheticDomain};
use ccfg_core::guidance::{Guidance, SubsetWeights};
use ccfg_core::metrics::sample_predictions;
use ccfg_core::selection::{run_selection, GradientMode, SelectionConfig, SelectionItem};
use ccfg_core::seed;

use super::Verdict;

const DOMAIN_SEED: u64 = 2024;
const TRAIN_COUNT: usize = 2000;
const EVAL_COUNT: usize = 500;
/// Evaluation timestamps actually sampled, and the centered crop they are
/// cut to; training uses random crops of the same size.
const EVAL_USED: usize = 100;
const CROP: usize = 16;
const EPOCHS: usize = 30;
const SEEDS: u64 = 5;
const SELECTION_ITEMS: usize = 16;
const SAMPLER_STEPS: usize = 10;
const CFG_WEIGHT: f64 = 1.5;
const CURVE_TIMESTAMPS: usize = EVAL_USED;
const CURVE_SIZES: [usize; 5] = [1, 2, 4, 8, 16];

struct Toy {
    model: TrainedDenoiser,
    train: Dataset,
    eval: Vec<SamplePair>,
    sched: NoiseSchedule,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let domain = SyntheticDomain::new(DOMAIN_SEED, SyntheticConfig::default()).unwrap();
        let pair = |i: usize, prefix: &str| {
            domain
                .pair(i as u64, format!("{prefix}-{i:05}"))
                .unwrap()
                .with_inputs(&names::BASIC_INPUTS)
                .unwrap()
        };
        let train_ds = Dataset::from_pairs((0..TRAIN_COUNT).map(|i| pair(i, "train")).collect()).unwrap();
        let eval_ds = Dataset::from_pairs_with_stats(
            (TRAIN_COUNT..TRAIN_COUNT + EVAL_COUNT).map(|i| pair(i, "eval")).collect(),
            train_ds.stats.clone(),
        )
        .unwrap();
        let eval = eval_ds.pairs[..EVAL_USED]
            .iter()
            .map(|p| sample_crop(p, CROP, 0, true).unwrap())
            .collect();
        let sched = NoiseSchedule::default();
        let mut model = TrainedDenoiser::for_dataset(&train_ds, |c| Architecture::new(3, c), seed::derive(DOMAIN_SEED, 1)).unwrap();
        let config = TrainConfig {
            epochs: EPOCHS,
            crop_size: Some(CROP),
            seed: seed::derive(DOMAIN_SEED, 2),
            ..TrainConfig::default()
        };
        train(&mut model, &prepare_examples(&train_ds).unwrap(), &config, &sched).unwrap();
        Toy {
            model,
            train: train_ds,
            eval,
            sched,
        }
    })
}

fn selected_weights(toy: &Toy, s: u64) -> SubsetWeights {
    let start = s as usize * SELECTION_ITEMS;
    let items: Vec<SelectionItem<'_>> = toy.train.pairs[start..start + SELECTION_ITEMS]
        .iter()
        .map(|p| {
            let p = sample_crop(p, CROP, 0, true).unwrap();
            SelectionItem {
                denoiser: Box::new(toy.model.bind(p.assemble_conditioning().unwrap()).unwrap()),
                target: p.target_tensor().unwrap(),
            }
        })
        .collect();
    let config = SelectionConfig {
        gradient_mode: GradientMode::Analytic,
        seed: seed::derive(s, 3),
        ..SelectionConfig::default()
    };
    run_selection(&items, toy.model.groups.clone(), &config, &toy.sched).unwrap().0
}

fn sampler(s: u64, members: usize) -> SamplerConfig {
    SamplerConfig::dpmpp(SAMPLER_STEPS, 2, seed::derive(s, 4)).with_ensemble(members)
}

pub fn guidance_ordering() -> Verdict {
    let toy = toy();
    let mut cfg_wins = 0;
    let mut ccfg_wins = 0;
    let mut notes = Vec::new();
    for s in 0..SEEDS {
        let weights = selected_weights(toy, s);
        let rmse = |g: Guidance| {
            sample_predictions(&toy.model, &toy.eval, &g, &sampler(s, 1), &toy.sched)
                .unwrap()
                .0
                .t_rmse()
        };
        let direct = rmse(Guidance::Direct);
        let cfg = rmse(Guidance::Cfg(CFG_WEIGHT));
        let ccfg = rmse(Guidance::Composite(weights));
        cfg_wins += usize::from(cfg < direct);
        ccfg_wins += usize::from(ccfg <= cfg);
        notes.push(format!("seed {s}: direct {direct:.3} cfg {cfg:.3} ccfg {ccfg:.3}"));
    }
    Verdict::new(
        cfg_wins == SEEDS as usize && ccfg_wins >= 4,
        format!(
            "T-RMSE m/s, cfg < direct in {cfg_wins}/{SEEDS}, ccfg <= cfg in {ccfg_wins}/{SEEDS}; {}",
            notes.join("; ")
        ),
    )
}

pub fn ensemble_curve() -> Verdict {
    let toy = toy();
    let weights = selected_weights(toy, 0);
    let pairs = &toy.eval[..CURVE_TIMESTAMPS];
    let members = *CURVE_SIZES.last().unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for g in [Guidance::Direct, Guidance::Cfg(CFG_WEIGHT), Guidance::Composite(weights)] {
        let (set, _) = sample_predictions(&toy.model, pairs, &g, &sampler(0, members), &toy.sched).unwrap();
        let curve: Vec<f64> = CURVE_SIZES.iter().map(|&n| set.truncated(n).unwrap().t_rmse()).collect();
        ok &= curve.windows(2).all(|w| w[1] <= w[0]);
        notes.push(format!(
            "{:?} {}",
            g.scheme(),
            curve.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" > ")
        ));
    }
    Verdict::new(ok, format!("sizes {CURVE_SIZES:?}: {}", notes.join("; ")))
}
