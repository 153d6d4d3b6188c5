use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::diffusion::{gaussian_like, NoiseSchedule};
use crate::grid::{Dataset, SyntheticConfig, SyntheticDomain};
use crate::seed;

fn rand_tensor(shape: (usize, usize, usize), s: u64) -> Tensor {
    gaussian_like(shape, &mut seed::rng(s))
}

fn speed_stat() -> Stat {
    Stat { mean: 7.0, std: 2.5 }
}

fn tiny_arch(cond: usize) -> Architecture {
    Architecture {
        target_channels: 3,
        cond_channels: cond,
        width: 6,
        time_dim: 8,
        time_hidden: 10,
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

// ---------- loss oracles ----------

#[test]
fn l1_examples_and_oracle() {
    let a = rand_tensor((3, 8, 8), 1);
    assert_eq!(l1_denoise_loss(&a, &a).unwrap(), 0.0);
    let shifted = a.map(|v| v + 0.7);
    assert!((l1_denoise_loss(&shifted, &a).unwrap() - 0.7).abs() < 1e-12);
    let b = rand_tensor((3, 8, 8), 2);
    let mut sum = 0.0;
    for i in 0..a.len() {
        sum += (a.data()[i] - b.data()[i]).abs();
    }
    assert!((l1_denoise_loss(&a, &b).unwrap() - sum / 192.0).abs() < 1e-9);
    assert!(matches!(l1_denoise_loss(&a, &Tensor::zeros(3, 4, 4)), Err(Error::Dimension(_))));
}

/// Separable filter-bank Haar: rows then columns with `(a +- b) / sqrt 2`.
fn filter_bank_details(x: &[f64], h: usize, w: usize) -> (Vec<f64>, f64) {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut lo_rows = vec![0.0; h * w / 2];
    let mut hi_rows = vec![0.0; h * w / 2];
    for y in 0..h {
        for j in 0..w / 2 {
            lo_rows[y * w / 2 + j] = r * (x[y * w + 2 * j] + x[y * w + 2 * j + 1]);
            hi_rows[y * w / 2 + j] = r * (x[y * w + 2 * j] - x[y * w + 2 * j + 1]);
        }
    }
    let cols = |src: &[f64], hi: bool| -> Vec<f64> {
        let mut out = vec![0.0; h / 2 * w / 2];
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let (a, b) = (src[2 * i * w / 2 + j], src[(2 * i + 1) * w / 2 + j]);
                out[i * w / 2 + j] = if hi { r * (a - b) } else { r * (a + b) };
            }
        }
        out
    };
    let ll = cols(&lo_rows, false);
    let energy: f64 = [cols(&lo_rows, true), cols(&hi_rows, false), cols(&hi_rows, true)]
        .iter()
        .flat_map(|v| v.iter())
        .map(|v| v * v)
        .sum();
    (ll, energy)
}

fn dwt_oracle(p: &Tensor, t: &Tensor) -> f64 {
    let (c, h, w) = p.shape();
    let mut total = 0.0;
    for ch in 0..c {
        let r: Vec<f64> = p.channel(ch).iter().zip(t.channel(ch)).map(|(a, b)| a - b).collect();
        let (ll, e1) = filter_bank_details(&r, h, w);
        let (_, e2) = filter_bank_details(&ll, h / 2, w / 2);
        total += e1 + e2;
    }
    total
}

#[test]
fn dwt_examples_and_oracle() {
    let a = rand_tensor((3, 8, 8), 3);
    assert_eq!(dwt_loss(&a, &a).unwrap(), 0.0);
    let c1 = Tensor::filled(2, 8, 8, 1.5);
    let c2 = Tensor::filled(2, 8, 8, -4.0);
    assert_eq!(dwt_loss(&c1, &c2).unwrap(), 0.0);
    // 4x4 checkerboard: every 2x2 block is pure diagonal detail with HH = 2
    let board = Tensor::from_vec(1, 4, 4, (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
    let zeros = Tensor::zeros(1, 4, 4);
    assert_eq!(dwt_loss(&board, &zeros).unwrap(), 16.0);
    assert!((dwt_oracle(&board, &zeros) - 16.0).abs() < 1e-12);
    for (s, n) in [(4u64, 8usize), (5, 16), (6, 32), (7, 12)] {
        let p = rand_tensor((3, n, n), s);
        let t = rand_tensor((3, n, n), s + 100);
        let got = dwt_loss(&p, &t).unwrap();
        assert!((got - dwt_oracle(&p, &t)).abs() < 1e-9 * got.max(1.0), "{n}");
    }
    assert!(matches!(dwt_loss(&Tensor::zeros(1, 6, 8), &Tensor::zeros(1, 6, 8)), Err(Error::Dimension(_))));
}

#[test]
fn haar_perfect_reconstruction() {
    for (s, (h, w)) in [(8u64, (8usize, 8usize)), (9, (16, 32)), (10, (4, 12))] {
        let x = rand_tensor((3, h, w), s);
        let (levels, coarse) = haar_decompose(&x, 2).unwrap();
        assert!(haar_reconstruct(&levels, &coarse).unwrap().max_abs_diff(&x) < 1e-9);
        // orthonormal: energy is preserved
        let energy: f64 = levels.iter().map(|l| l.lh.dot(&l.lh) + l.hl.dot(&l.hl) + l.hh.dot(&l.hh)).sum::<f64>() + coarse.dot(&coarse);
        assert!((energy - x.dot(&x)).abs() < 1e-9 * energy);
    }
    assert!(haar_analysis(&Tensor::zeros(1, 3, 4)).is_err());
}

fn divergence_oracle(uv: &Tensor) -> Vec<f64> {
    let (_, h, w) = uv.shape();
    let u = |y: usize, x: usize| uv[(0, y, x)];
    let v = |y: usize, x: usize| uv[(1, y, x)];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dudx = match x {
                0 => u(y, 1) - u(y, 0),
                _ if x == w - 1 => u(y, w - 1) - u(y, w - 2),
                _ => (u(y, x + 1) - u(y, x - 1)) / 2.0,
            };
            let dvdy = match y {
                0 => v(1, x) - v(0, x),
                _ if y == h - 1 => v(h - 1, x) - v(h - 2, x),
                _ => (v(y + 1, x) - v(y - 1, x)) / 2.0,
            };
            out.push(dudx + dvdy);
        }
    }
    out
}

#[test]
fn divergence_examples_and_oracle() {
    let a = rand_tensor((2, 8, 8), 11);
    assert_eq!(divergence_loss(&a, &a).unwrap(), 0.0);
    let uniform1 = Tensor::from_vec(2, 4, 4, [vec![3.0; 16], vec![-1.0; 16]].concat()).unwrap();
    let uniform2 = Tensor::from_vec(2, 4, 4, [vec![0.5; 16], vec![2.0; 16]].concat()).unwrap();
    assert_eq!(divergence_loss(&uniform1, &uniform2).unwrap(), 0.0);
    // u = x, v = 0 against still air: unit divergence in every cell
    let ramp = Tensor::from_vec(2, 4, 4, [(0..16).map(|i| (i % 4) as f64).collect(), vec![0.0; 16]].concat()).unwrap();
    assert_eq!(divergence_loss(&ramp, &Tensor::zeros(2, 4, 4)).unwrap(), 16.0);
    for (s, n) in [(12u64, 8usize), (13, 17), (14, 32)] {
        let p = rand_tensor((2, n, n), s);
        let t = rand_tensor((2, n, n), s + 50);
        let (dp, dt) = (divergence_oracle(&p), divergence_oracle(&t));
        let want: f64 = dp.iter().zip(&dt).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((divergence_loss(&p, &t).unwrap() - want).abs() < 1e-9 * want.max(1.0));
    }
    assert!(divergence_loss(&Tensor::zeros(3, 4, 4), &Tensor::zeros(3, 4, 4)).is_err());
    assert!(divergence_loss(&Tensor::zeros(2, 4, 4), &Tensor::zeros(2, 4, 5)).is_err());
}

fn sobel_oracle(x: &Tensor) -> f64 {
    let (c, h, w) = x.shape();
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut total = 0.0;
    for ch in 0..c {
        // explicit replicate-padded copy
        let mut pad = vec![vec![0.0; w + 2]; h + 2];
        for (py, row) in pad.iter_mut().enumerate() {
            for (px, v) in row.iter_mut().enumerate() {
                let y = py.saturating_sub(1).min(h - 1);
                let xx = px.saturating_sub(1).min(w - 1);
                *v = x[(ch, y, xx)];
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                for i in 0..3 {
                    for j in 0..3 {
                        gx += kx[i][j] * pad[y + i][xx + j];
                        gy += kx[j][i] * pad[y + i][xx + j];
                    }
                }
                total += gx.abs() + gy.abs();
            }
        }
    }
    total
}

#[test]
fn sobel_examples_and_oracle() {
    let a = rand_tensor((3, 8, 8), 21);
    assert_eq!(sobel_loss(&a, &a).unwrap(), 0.0);
    assert_eq!(sobel_loss(&Tensor::filled(3, 5, 5, 2.0), &Tensor::filled(3, 5, 5, -1.0)).unwrap(), 0.0);
    // unit step between columns 1 and 2: responses 4, 4 in those columns of every row
    let step = Tensor::from_vec(1, 5, 5, (0..25).map(|i| if i % 5 >= 2 { 1.0 } else { 0.0 }).collect()).unwrap();
    assert_eq!(sobel_loss(&step, &Tensor::zeros(1, 5, 5)).unwrap(), 40.0);
    assert_eq!(sobel_oracle(&step), 40.0);
    for (s, n) in [(22u64, 8usize), (23, 16), (24, 31)] {
        let p = rand_tensor((3, n, n), s);
        let t = rand_tensor((3, n, n), s + 9);
        let want = sobel_oracle(&p.lincomb(1.0, &t, -1.0));
        assert!((sobel_loss(&p, &t).unwrap() - want).abs() < 1e-9 * want);
    }
}

#[test]
fn total_loss_composition() {
    let p = rand_tensor((3, 8, 8), 31);
    let t = rand_tensor((3, 8, 8), 32);
    let none = total_loss(&p, &t, &LossWeights::NONE, speed_stat()).unwrap();
    assert_eq!(none.total, l1_denoise_loss(&p, &t).unwrap());
    assert_eq!(total_loss(&t, &t, &LossWeights::default(), speed_stat()).unwrap().total, 0.0);
    let w = LossWeights::default();
    let got = total_loss(&p, &t, &w, speed_stat()).unwrap();
    let div = divergence_loss(&flow_components(&p, speed_stat()).unwrap(), &flow_components(&t, speed_stat()).unwrap()).unwrap();
    let want = l1_denoise_loss(&p, &t).unwrap() + 1e-3 * (dwt_loss(&p, &t).unwrap() + div + sobel_loss(&p, &t).unwrap());
    assert!((got.total - want).abs() < 1e-9);
    assert!(LossWeights { dwt: -1.0, ..w }.validate().is_err());
}

#[test]
fn flow_components_follow_the_from_convention() {
    // wind from the north (sin 0, cos 1) at the mean speed blows southward: v < 0
    let t = Tensor::from_vec(3, 1, 1, vec![0.0, 0.0, 1.0]).unwrap();
    let uv = flow_components(&t, speed_stat()).unwrap();
    assert_eq!(uv.data(), &[-0.0, -7.0]);
}

proptest! {
    #[test]
    fn losses_are_nonnegative_and_zero_on_identity(s in 0u64..500, n in 1usize..4) {
        let side = 4 * n;
        let p = rand_tensor((3, side, side), s);
        let t = rand_tensor((3, side, side), s + 1);
        let uv_p = p.slice_channels(0, 2);
        let uv_t = t.slice_channels(0, 2);
        for v in [
            l1_denoise_loss(&p, &t).unwrap(),
            dwt_loss(&p, &t).unwrap(),
            divergence_loss(&uv_p, &uv_t).unwrap(),
            sobel_loss(&p, &t).unwrap(),
        ] {
            prop_assert!(v >= 0.0);
        }
        prop_assert_eq!(l1_denoise_loss(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(dwt_loss(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(divergence_loss(&uv_p, &uv_p).unwrap(), 0.0);
        prop_assert_eq!(sobel_loss(&p, &p).unwrap(), 0.0);
    }
}

// ---------- gradients ----------

type LossFn = fn(&Tensor, &Tensor) -> Result<(f64, Tensor)>;

fn total_default(p: &Tensor, t: &Tensor) -> Result<(f64, Tensor)> {
    let (b, g) = total_loss_grad(p, t, &LossWeights::default(), speed_stat())?;
    Ok((b.total, g))
}

fn divergence_on_flow(p: &Tensor, t: &Tensor) -> Result<(f64, Tensor)> {
    let w = LossWeights {
        dwt: 0.0,
        divergence: 1.0,
        sobel: 0.0,
    };
    let (b, g) = total_loss_grad(p, t, &w, speed_stat())?;
    // remove the L1 part to isolate the divergence term
    let (l1, gl1) = l1_denoise_loss_grad(p, t)?;
    Ok((b.total - l1, g.lincomb(1.0, &gl1, -1.0)))
}

const LOSSES: [(&str, LossFn); 6] = [
    ("l1", l1_denoise_loss_grad),
    ("dwt", dwt_loss_grad),
    ("divergence", divergence_loss_grad),
    ("divergence-physical", divergence_on_flow),
    ("sobel", sobel_loss_grad),
    ("total", total_default),
];

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = seed::rng(41);
    for (name, f) in LOSSES {
        let c = if name == "divergence" { 2 } else { 3 };
        let p = rand_tensor((c, 8, 8), 42);
        let t = rand_tensor((c, 8, 8), 43);
        let (_, g) = f(&p, &t).unwrap();
        for _ in 0..10 {
            let i = rng.gen_range(0..p.len());
            let h = 1e-6;
            let mut pp = p.clone();
            pp.data_mut()[i] += h;
            let mut pm = p.clone();
            pm.data_mut()[i] -= h;
            let fd = (f(&pp, &t).unwrap().0 - f(&pm, &t).unwrap().0) / (2.0 * h);
            assert!(rel_err(fd, g.data()[i]) < 1e-5, "{name}[{i}]: fd {fd} vs {}", g.data()[i]);
        }
    }
}

fn param_gradient_check(head: impl Fn(&Tensor) -> (f64, Tensor), s: u64) {
    let arch = tiny_arch(2);
    let mut model = DenoiserModel::init(arch, s).unwrap();
    // randomize every parameter so no block starts degenerate
    let mut rng = seed::rng(s + 1);
    for p in model.params_mut() {
        *p = 0.3 * rng.gen_range(-1.0..1.0);
    }
    let input = rand_tensor((5, 8, 8), s + 2);
    let t = 321.0;
    let (out, tape) = model.forward_tape(&input, t).unwrap();
    let (_, dout) = head(&out);
    let mut grad = vec![0.0; model.param_count()];
    let dinput = model.backward(&tape, &dout, Some(&mut grad)).unwrap();
    let h = 1e-4;
    let eval = |m: &DenoiserModel, x: &Tensor| head(&m.forward(x, t).unwrap()).0;
    let mut worst: f64 = 0.0;
    for _ in 0..12 {
        let i = rng.gen_range(0..model.param_count());
        let mut mp = model.clone();
        mp.params_mut()[i] += h;
        let mut mm = model.clone();
        mm.params_mut()[i] -= h;
        let fd = (eval(&mp, &input) - eval(&mm, &input)) / (2.0 * h);
        worst = worst.max(rel_err(fd, grad[i]));
    }
    assert!(worst < 1e-4, "parameter gradient relative error {worst}");
    for _ in 0..6 {
        let i = rng.gen_range(0..input.len());
        let mut xp = input.clone();
        xp.data_mut()[i] += h;
        let mut xm = input.clone();
        xm.data_mut()[i] -= h;
        let fd = (eval(&model, &xp) - eval(&model, &xm)) / (2.0 * h);
        assert!(rel_err(fd, dinput.data()[i]) < 1e-4, "input gradient {fd} vs {}", dinput.data()[i]);
    }
}

#[test]
fn network_gradient_of_linear_head() {
    let c = rand_tensor((3, 8, 8), 50);
    param_gradient_check(move |out| (out.dot(&c), c.clone()), 51);
}

#[test]
fn network_gradient_of_each_loss() {
    let target = rand_tensor((3, 8, 8), 60);
    for (k, (name, f)) in LOSSES.iter().enumerate() {
        if *name == "divergence" {
            continue;
        }
        let target = target.clone();
        let f = *f;
        let head = move |out: &Tensor| f(out, &target).unwrap();
        let result = std::panic::catch_unwind(|| param_gradient_check(head, 61 + k as u64));
        assert!(result.is_ok(), "{name}");
    }
}

#[test]
fn forward_is_pure_and_validates_shapes() {
    let model = DenoiserModel::init(tiny_arch(2), 3).unwrap();
    let x = rand_tensor((5, 8, 8), 4);
    assert_eq!(model.forward(&x, 10.0).unwrap(), model.forward(&x, 10.0).unwrap());
    assert_eq!(model.forward(&x, 10.0).unwrap().shape(), (3, 8, 8));
    assert!(matches!(model.forward(&rand_tensor((4, 8, 8), 4), 1.0), Err(Error::Dimension(_))));
    assert!(matches!(model.forward(&rand_tensor((5, 6, 8), 4), 1.0), Err(Error::Dimension(_))));
    assert_eq!(tiny_arch(2).input_channels(), 5);
    assert!(DenoiserModel::from_params(tiny_arch(2), vec![0.0; 3]).is_err());
}

// ---------- conditioned model ----------

fn small_dataset(domain_seed: u64, n: usize, size: usize) -> Dataset {
    let cfg = SyntheticConfig {
        hr_size: size,
        scale_factor: 4,
        ..SyntheticConfig::default()
    };
    let domain = SyntheticDomain::new(domain_seed, cfg).unwrap();
    let pairs = (0..n)
        .map(|i| {
            let p = domain.pair(i as u64, format!("t{i:04}")).unwrap();
            p.with_inputs(&crate::grid::names::BASIC_INPUTS).unwrap()
        })
        .collect();
    Dataset::from_pairs(pairs).unwrap()
}

fn tiny_model(ds: &Dataset, s: u64) -> TrainedDenoiser {
    TrainedDenoiser::for_dataset(ds, tiny_arch, s).unwrap()
}

#[test]
fn dropped_conditioning_is_ignored() {
    let ds = small_dataset(1, 2, 16);
    let model = tiny_model(&ds, 2);
    let ex = prepare_examples(&ds).unwrap();
    assert_eq!(model.channel_groups.len(), model.model.architecture().cond_channels);
    let x = rand_tensor((3, 16, 16), 5);
    let none = GroupMask::EMPTY;
    let a = model.predict_x0(&x, &ex[0].cond, 400, none).unwrap();
    let b = model.predict_x0(&x, &ex[1].cond, 400, none).unwrap();
    assert_eq!(a, b);
    let full = GroupMask::full(model.groups.len());
    assert_ne!(model.predict_x0(&x, &ex[0].cond, 400, full).unwrap(), model.predict_x0(&x, &ex[1].cond, 400, full).unwrap());
    // a view only zeroes the channels of its missing groups
    let masked = model.mask_conditioning(&ex[0].cond, full.without(0));
    for (c, &g) in model.channel_groups.iter().enumerate() {
        assert_eq!(masked.channel(c).iter().all(|v| *v == 0.0), g == 0 || ex[0].cond.channel(c).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn bound_denoiser_input_gradient() {
    let ds = small_dataset(3, 1, 8);
    let mut model = tiny_model(&ds, 4);
    let mut rng = seed::rng(5);
    for p in model.model.params_mut() {
        *p += 0.05 * rng.gen_range(-1.0..1.0);
    }
    let ex = prepare_examples(&ds).unwrap();
    let den = model.bind(ex[0].cond.clone()).unwrap();
    let x = rand_tensor((3, 8, 8), 6);
    let g = rand_tensor((3, 8, 8), 7);
    let view = GroupMask(0b101);
    let vjp = den.predict_x0_vjp(&x, 250, view, &g).unwrap();
    let h = 1e-5;
    for _ in 0..8 {
        let i = rng.gen_range(0..x.len());
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (den.predict_x0(&xp, 250, view).unwrap().dot(&g) - den.predict_x0(&xm, 250, view).unwrap().dot(&g)) / (2.0 * h);
        assert!(rel_err(fd, vjp.data()[i]) < 1e-5, "{fd} vs {}", vjp.data()[i]);
    }
}

// ---------- training ----------

fn quick_config(s: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 3e-3,
        warmup_steps: 2,
        crop_size: Some(16),
        crop_align: 4,
        seed: s,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let ds = small_dataset(7, 4, 16);
    let ex = prepare_examples(&ds).unwrap();
    let mut model = tiny_model(&ds, 8);
    let before = model.clone();
    let report = train(&mut model, &ex, &TrainConfig { epochs: 0, ..quick_config(1) }, &NoiseSchedule::default()).unwrap();
    assert!(report.curve.is_empty());
    assert_eq!(model, before);
}

#[test]
fn training_is_reproducible() {
    let ds = small_dataset(9, 8, 16);
    let ex = prepare_examples(&ds).unwrap();
    let s = NoiseSchedule::default();
    let run = || {
        let mut m = tiny_model(&ds, 10);
        let r = train(&mut m, &ex, &quick_config(11), &s).unwrap();
        (m, r)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
    assert!((r1.curve.last().unwrap().total - r2.curve.last().unwrap().total).abs() < 1e-9);
    assert_eq!(r1.curve.len(), 4);
    let text = LossRecord::to_delimited(&r1.curve);
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn dropout_extremes() {
    let ds = small_dataset(12, 8, 16);
    let ex = prepare_examples(&ds).unwrap();
    let s = NoiseSchedule::default();
    let full = GroupMask::full(3);
    let mut m = tiny_model(&ds, 13);
    let r = train(&mut m, &ex, &TrainConfig { p_drop: 0.0, ..quick_config(14) }, &s).unwrap();
    assert_eq!(r.view_counts.keys().copied().collect::<Vec<_>>(), vec![full]);
    let mut m = tiny_model(&ds, 13);
    let r = train(&mut m, &ex, &TrainConfig { p_drop: 1.0, ..quick_config(14) }, &s).unwrap();
    assert_eq!(r.view_counts.keys().copied().collect::<Vec<_>>(), vec![GroupMask::EMPTY]);
    let mut m = tiny_model(&ds, 13);
    let r = train(&mut m, &ex, &TrainConfig { p_drop: 0.5, epochs: 6, ..quick_config(14) }, &s).unwrap();
    assert!(r.view_counts.len() > 3);
    assert!(TrainConfig { p_drop: 1.5, ..quick_config(0) }.validate().is_err());
}

#[test]
fn training_reduces_validation_error() {
    let s = NoiseSchedule::default();
    for run in 0..5u64 {
        let ds = small_dataset(100 + run, 24, 32);
        let mut train_ex = prepare_examples(&ds).unwrap();
        let val_ex = train_ex.split_off(16);
        let mut model = tiny_model(&ds, run);
        let before = validation_l1(&model, &val_ex, &s, 77).unwrap();
        let config = TrainConfig {
            epochs: 6,
            crop_size: Some(16),
            ..quick_config(run)
        };
        train(&mut model, &train_ex, &config, &s).unwrap();
        let after = validation_l1(&model, &val_ex, &s, 77).unwrap();
        assert!(after < before, "seed {run}: {before} -> {after}");
    }
}

#[test]
fn divergent_training_aborts() {
    let ds = small_dataset(15, 4, 16);
    let ex = prepare_examples(&ds).unwrap();
    let mut model = tiny_model(&ds, 16);
    model.model.params_mut()[0] = f64::NAN;
    let err = train(&mut model, &ex, &quick_config(1), &NoiseSchedule::default()).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn learning_rate_schedule() {
    assert!((cosine_lr(0, 100, 10, 1.0) - 0.1).abs() < 1e-12);
    assert!((cosine_lr(9, 100, 10, 1.0) - 1.0).abs() < 1e-12);
    assert!((cosine_lr(10, 100, 10, 1.0) - 1.0).abs() < 1e-12);
    assert!((cosine_lr(55, 100, 10, 1.0) - 0.5).abs() < 1e-12);
    assert!(cosine_lr(100, 100, 10, 1.0).abs() < 1e-12);
}

// ---------- checkpoints ----------

#[test]
fn checkpoint_round_trip_quantizes_to_f32() {
    let ds = small_dataset(17, 1, 16);
    let model = tiny_model(&ds, 18);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.toml");
    write_checkpoint(&model, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.groups, model.groups);
    assert_eq!(back.channel_groups, model.channel_groups);
    for (a, b) in back.model.params().iter().zip(model.model.params()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    // a quantized model survives a second round trip bit-exactly
    write_checkpoint(&back, &path).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), back);

    let header = std::fs::read_to_string(&path).unwrap();
    let payload = std::fs::read(dir.path().join("model.params")).unwrap();
    assert!(decode_checkpoint(&header, &payload[..payload.len() - 4]).is_err());
    assert!(decode_checkpoint(&header.replace("width = 6", "width = 7"), &payload).is_err());
    assert!(decode_checkpoint(&format!("{header}\nextra = 1\n"), &payload).is_err());
    let mut bad = payload.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&header, &bad), Err(Error::Checkpoint(_))));
}

#[test]
#[ignore]
fn bench_forward_backward() {
    for (cond, size) in [(4, 32), (9, 32), (4, 16)] {
        let m = DenoiserModel::init(Architecture::new(3, cond), 0).unwrap();
        let x = rand_tensor((3 + cond, size, size), 1);
        let n = 20;
        let start = std::time::Instant::now();
        for _ in 0..n {
            m.forward(&x, 500.0).unwrap();
        }
        let fwd = start.elapsed().as_secs_f64() / n as f64;
        println!("cond {cond} size {size}: params {} forward {:.2} ms", m.param_count(), fwd * 1e3);
    }
}
