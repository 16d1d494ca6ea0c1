//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL` line.
//!
//! Criteria 4, 5 and 6 share one set of training runs on the synthetic suite.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use icnet::checkpoint::save_checkpoint;
use icnet::run::configure_allocator;
use icnet_core::autodiff::{Tape, Tensor, Var};
use icnet_core::eval::{multi_atlas_segment, overlap_metrics, surface_distances};
use icnet_core::losses::{
    folding_count, loss_ant, loss_inv, loss_sim, loss_smo, loss_total, LossWeights, Reduction,
};
use icnet_core::network::{FcnConfig, FcnParams};
use icnet_core::sampler::{estimate_inverse, map_point, warp};
use icnet_core::synth::{make_population, Subject};
use icnet_core::trainer::{evaluate_pair, loss_and_gradients, refine, train, TrainConfig};
use icnet_core::{Flow, GridShape, LabelMap, Volume};

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// ---------------------------------------------------------------- criterion 1

const FD_STEP: f64 = 1e-6;

/// Pushes values away from the kinks of trilinear sampling (integer sample
/// coordinates) and of the anti-folding gate (`g = -1`).
fn kink_free_flow(r: &mut ChaCha8Rng, d: usize, amplitude: f64) -> Vec<f64> {
    let n = d * d * d;
    let mut f = random_vec(r, 3 * n, -amplitude, amplitude);
    for _ in 0..20 {
        let mut moved = false;
        for c in 0..3 {
            for z in 0..d {
                for y in 0..d {
                    for x in 0..d {
                        let i = ((c * d + z) * d + y) * d + x;
                        let p = [x, y, z][c] as f64 + f[i];
                        if (p - p.round()).abs() < 1e-3 {
                            f[i] += 0.01;
                            moved = true;
                        }
                        let stride = [1, d, d * d][c];
                        if [x, y, z][c] + 1 < d && (f[i + stride] - f[i] + 1.0).abs() < 1e-3 {
                            f[i + stride] += 0.01;
                            moved = true;
                        }
                    }
                }
            }
        }
        if !moved {
            break;
        }
    }
    f
}

/// Worst relative error between reverse-mode and central-difference
/// directional derivatives of `build` over random directions.
fn directional_check(inputs: &[Vec<f64>], shape: &[usize], build: &dyn Fn(&mut Tape, &[Var]) -> Var, seed: u64) -> f64 {
    let eval = |xs: &[Vec<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| tape.leaf(Tensor::new(shape.to_vec(), x.clone()).unwrap()))
            .collect();
        let root = build(&mut tape, &vars);
        (tape, vars, root)
    };
    let (tape, vars, root) = eval(inputs);
    let grads = tape.backward(root).unwrap();
    let g: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let dirs: Vec<Vec<f64>> = inputs.iter().map(|x| random_vec(&mut r, x.len(), -1.0, 1.0)).collect();
        let shifted = |s: f64| -> Vec<Vec<f64>> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(x, d)| x.iter().zip(d).map(|(a, b)| a + s * b).collect())
                .collect()
        };
        let value = |s: f64| {
            let (t, _, root) = eval(&shifted(s));
            t.item(root)
        };
        let fd = (value(FD_STEP) - value(-FD_STEP)) / (2.0 * FD_STEP);
        let ad: f64 = g.iter().zip(&dirs).flat_map(|(a, b)| a.iter().zip(b)).map(|(a, b)| a * b).sum();
        worst = worst.max(rel_err(ad, fd));
    }
    worst
}

#[test]
fn criterion_1_gradient_fidelity() {
    let start = Instant::now();
    let d = 8;
    let mut r = rng(1);
    let img_shape = [1, d, d, d];
    let flow_shape = [3, d, d, d];
    let a = random_vec(&mut r, d * d * d, -1.0, 1.0);
    let b = random_vec(&mut r, d * d * d, -1.0, 1.0);
    let gentle = [kink_free_flow(&mut r, d, 1.5), kink_free_flow(&mut r, d, 1.5)];
    let folded = [kink_free_flow(&mut r, d, 2.5), kink_free_flow(&mut r, d, 2.5)];

    let mut results = Vec::new();
    let sim_err = {
        let (a, b) = (a.clone(), b.clone());
        directional_check(
            &gentle,
            &flow_shape,
            &move |t: &mut Tape, v: &[Var]| {
                let va = t.constant(Tensor::new(img_shape.to_vec(), a.clone()).unwrap());
                let vb = t.constant(Tensor::new(img_shape.to_vec(), b.clone()).unwrap());
                loss_sim(t, va, vb, v[0], v[1]).unwrap()
            },
            11,
        )
    };
    results.push(("sim", sim_err));
    results.push((
        "smo",
        directional_check(&gentle, &flow_shape, &|t, v| loss_smo(t, v[0], v[1]).unwrap(), 12),
    ));
    results.push((
        "inv",
        directional_check(&gentle, &flow_shape, &|t, v| loss_inv(t, v[0], v[1]).unwrap(), 13),
    ));
    results.push((
        "ant",
        directional_check(&folded, &flow_shape, &|t, v| loss_ant(t, v[0], v[1]).unwrap(), 14),
    ));

    // Full network, depth 1 and n = 2, with a random head so the flow is generic.
    let config = FcnConfig { n: 2, depth: 1, tau: 7.0 };
    let mut params = FcnParams::init(config, 3).unwrap();
    for w in params.layers.last_mut().unwrap().kernel.data_mut() {
        *w = r.gen_range(-0.3..0.3);
    }
    // Nonzero biases keep ReLU inputs off zero where a neighbourhood is all zero.
    for layer in &mut params.layers {
        for v in layer.bias.data_mut() {
            *v = r.gen_range(-0.1..0.1);
        }
    }
    let shape = GridShape::cube(d).unwrap();
    let va = Volume::new(shape, 1, a.clone()).unwrap();
    let vb = Volume::new(shape, 1, b.clone()).unwrap();
    let weights = LossWeights::default();
    let (_, grads) = loss_and_gradients(&params, &va, &vb, &weights, Reduction::Sum).unwrap();
    let mut worst_net: f64 = 0.0;
    for k in 0..4 {
        let mut dr = rng(100 + k);
        let dirs: Vec<Vec<f64>> = params.tensors().map(|t| random_vec(&mut dr, t.len(), -1.0, 1.0)).collect();
        let value = |s: f64| {
            let mut p = params.clone();
            for (t, dir) in p.tensors_mut().zip(&dirs) {
                for (x, dx) in t.data_mut().iter_mut().zip(dir) {
                    *x += s * dx;
                }
            }
            evaluate_pair(&p, &va, &vb, &weights, Reduction::Sum).unwrap().total
        };
        let fd = (value(FD_STEP) - value(-FD_STEP)) / (2.0 * FD_STEP);
        let ad: f64 = grads.iter().zip(&dirs).flat_map(|(g, dv)| g.iter().zip(dv)).map(|(g, dv)| g * dv).sum();
        worst_net = worst_net.max(rel_err(ad, fd));
    }
    results.push(("network", worst_net));

    // The total on the tape agrees with the recomposed report.
    let mut tape = Tape::new();
    let vars: Vec<Var> = gentle
        .iter()
        .map(|f| tape.leaf(Tensor::new(flow_shape.to_vec(), f.clone()).unwrap()))
        .collect();
    let ta = tape.constant(Tensor::new(img_shape.to_vec(), a).unwrap());
    let tb = tape.constant(Tensor::new(img_shape.to_vec(), b).unwrap());
    let (_, rep) = loss_total(&mut tape, ta, tb, vars[0], vars[1], &weights, Reduction::Sum).unwrap();
    let recomposed = rep.sim + weights.alpha * rep.smo + weights.beta * rep.inv + weights.gamma * rep.ant;

    let elapsed = start.elapsed();
    let worst = results.iter().map(|&(_, e)| e).fold(0.0, f64::max);
    let detail = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        1,
        worst < 1e-5 && rel_err(recomposed, rep.total) < 1e-12 && elapsed < Duration::from_secs(60),
        format!("worst relative error {worst:.2e} ({detail}); {:.1}s", elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------- criterion 2

/// Trilinear interpolation by explicit index arithmetic, for points whose
/// eight corners lie inside the grid.
fn trilinear_oracle(vol: &Volume, p: [f64; 3]) -> f64 {
    let f = p.map(f64::floor);
    let t = [p[0] - f[0], p[1] - f[1], p[2] - f[2]];
    let [x0, y0, z0] = f.map(|v| v as usize);
    let [dx, dy, dz] = vol.shape().extents();
    let at = |x: usize, y: usize, z: usize| vol.data()[(z.min(dz - 1) * dy + y.min(dy - 1)) * dx + x.min(dx - 1)];
    let mut acc = 0.0;
    for (cz, wz) in [(z0, 1.0 - t[2]), (z0 + 1, t[2])] {
        for (cy, wy) in [(y0, 1.0 - t[1]), (y0 + 1, t[1])] {
            for (cx, wx) in [(x0, 1.0 - t[0]), (x0 + 1, t[0])] {
                if wx * wy * wz != 0.0 {
                    acc += wx * wy * wz * at(cx, cy, cz);
                }
            }
        }
    }
    acc
}

#[test]
fn criterion_2_warp_oracles() {
    let shape = GridShape::new(12, 10, 9).unwrap();
    let mut r = rng(2);
    let vol = Volume::new(shape, 1, random_vec(&mut r, shape.voxels(), -3.0, 3.0)).unwrap();
    let identity = warp(&vol, &Flow::zeros(shape)).unwrap() == vol;

    let t = [1.3, -0.7, 2.45];
    let moved = warp(&vol, &Flow::constant(shape, t)).unwrap();
    let [dx, dy, dz] = shape.extents();
    let mut worst: f64 = 0.0;
    let mut interior = 0;
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let p = [x as f64 + t[0], y as f64 + t[1], z as f64 + t[2]];
                let inside = p.iter().zip([dx, dy, dz]).all(|(&c, e)| c >= 0.0 && c <= (e - 1) as f64);
                if inside {
                    interior += 1;
                    worst = worst.max((moved.get(0, x, y, z) - trilinear_oracle(&vol, p)).abs());
                }
            }
        }
    }

    let mut inverse_exact = true;
    for t in [[1.5, -2.25, 0.75], [-0.125, 3.0, -1.625]] {
        let inv = estimate_inverse(&Flow::constant(shape, t));
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    let q = [x as f64 + t[0], y as f64 + t[1], z as f64 + t[2]];
                    if q.iter().zip([dx, dy, dz]).all(|(&c, e)| c >= 0.0 && c <= (e - 1) as f64) {
                        inverse_exact &= inv.at(x, y, z) == [-t[0], -t[1], -t[2]];
                    }
                }
            }
        }
    }
    report(
        2,
        identity && worst <= 1e-6 && interior > 0 && inverse_exact,
        format!(
            "zero-flow identity {identity}; translation max error {worst:.1e} over {interior} interior voxels; \
             constant-flow inverse exact {inverse_exact}"
        ),
    );
}

// ---------------------------------------------------------------- criterion 3

fn single_difference_ant(g: f64) -> (f64, usize) {
    let shape = GridShape::cube(2).unwrap();
    let mut fab = Flow::zeros(shape);
    let i = shape.offset(1, 0, 0);
    fab.data_mut()[i] = g;
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_volume(fab.volume()));
    let b = tape.constant(Tensor::from_volume(Flow::zeros(shape).volume()));
    let ant = loss_ant(&mut tape, a, b).unwrap();
    (tape.item(ant), folding_count(&fab))
}

fn brute_force_folds(flow: &Flow) -> usize {
    let [dx, dy, dz] = flow.volume().shape().extents();
    let mut count = 0;
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let here = flow.at(x, y, z);
                if x + 1 < dx && flow.at(x + 1, y, z)[0] - here[0] + 1.0 <= 0.0 {
                    count += 1;
                }
                if y + 1 < dy && flow.at(x, y + 1, z)[1] - here[1] + 1.0 <= 0.0 {
                    count += 1;
                }
                if z + 1 < dz && flow.at(x, y, z + 1)[2] - here[2] + 1.0 <= 0.0 {
                    count += 1;
                }
            }
        }
    }
    count
}

#[test]
fn criterion_3_anti_folding_arithmetic() {
    let mut hand = vec![(-2.0, single_difference_ant(-2.0), (4.0, 1)), (-1.0, single_difference_ant(-1.0), (0.0, 1))];
    for g in [-0.999, -0.5, 0.0, 0.5, 3.0] {
        hand.push((g, single_difference_ant(g), (0.0, 0)));
    }
    let hand_ok = hand.iter().all(|(_, got, want)| got == want);

    let mut r = rng(3);
    let mut agree = 0;
    let mut folded = 0;
    let trials = 10_000;
    for _ in 0..trials {
        let shape = GridShape::new(r.gen_range(2..5), r.gen_range(2..5), r.gen_range(2..5)).unwrap();
        let amp = r.gen_range(0.1..1.5);
        let flow = Flow::from_fn(shape, |_| [r.gen_range(-amp..amp), r.gen_range(-amp..amp), r.gen_range(-amp..amp)]);
        let expected = brute_force_folds(&flow);
        folded += usize::from(expected > 0);
        agree += usize::from(folding_count(&flow) == expected);
    }
    report(
        3,
        hand_ok && agree == trials,
        format!(
            "hand cases {} (g, (ant, folds)): {:?}; folding_count matches brute force on {agree}/{trials} flows \
             ({folded} with folds)",
            if hand_ok { "exact" } else { "WRONG" },
            hand.iter().map(|(g, got, _)| (*g, *got)).collect::<Vec<_>>()
        ),
    );
}

// ------------------------------------------------------ criteria 4, 5 and 6

const SUITE_SEED: u64 = 2024;
const SUITE_EXTENT: usize = 24;
const SUITE_TRAIN: usize = 24;
const SUITE_HELD_OUT: usize = 40;
const SUITE_MAX_DISP: f64 = 4.0;
const SUITE_BLOBS: usize = 6;
const SUITE_ALPHA: f64 = 0.1;

struct Suite {
    held_out: Vec<Subject>,
    full: FcnParams,
    no_inverse: FcnParams,
    no_antifolding: FcnParams,
    config: TrainConfig,
    elapsed: Duration,
}

fn suite_config(weights: LossWeights) -> TrainConfig {
    TrainConfig {
        weights,
        iterations: 2000,
        seed: 5,
        fcn: FcnConfig { n: 4, depth: 2, tau: 7.0 },
        ..TrainConfig::default()
    }
}

fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(|| {
        configure_allocator();
        let start = Instant::now();
        let shape = GridShape::cube(SUITE_EXTENT).unwrap();
        let mut population =
            make_population(SUITE_SEED, shape, SUITE_TRAIN + SUITE_HELD_OUT, SUITE_MAX_DISP, SUITE_BLOBS).unwrap();
        let held_out = population.split_off(SUITE_TRAIN);
        let volumes: Vec<Volume> = population.into_iter().map(|s| s.volume).collect();
        let base = LossWeights::new(SUITE_ALPHA, 0.1, 1e5).unwrap();
        let run = |w: LossWeights| train(&volumes, &suite_config(w)).unwrap().params;
        let full = run(base);
        let no_inverse = run(base.without_inverse_consistency());
        let no_antifolding = run(base.without_anti_folding());
        Suite {
            held_out,
            full,
            no_inverse,
            no_antifolding,
            config: suite_config(base),
            elapsed: start.elapsed(),
        }
    })
}

/// Held-out pair `k`: subjects `2k` and `2k + 1` of the held-out set.
fn pair(s: &Suite, k: usize) -> (&Subject, &Subject) {
    (&s.held_out[2 * k], &s.held_out[2 * k + 1])
}

#[test]
fn criterion_4_constraint_effects() {
    let s = suite();
    let start = Instant::now();
    let w = &s.config.weights;
    let mut full_folds = Vec::new();
    let mut free_folds = Vec::new();
    let (mut inv_full, mut inv_no_inverse) = (0.0, 0.0);
    for k in 0..5 {
        let (a, b) = pair(s, k);
        let folds = |p: &FcnParams| {
            let (fab, fba) = p.predict(&a.volume, &b.volume).unwrap();
            folding_count(&fab) + folding_count(&fba)
        };
        full_folds.push(folds(&s.full));
        free_folds.push(folds(&s.no_antifolding));
        inv_full += evaluate_pair(&s.full, &a.volume, &b.volume, w, Reduction::Sum).unwrap().inv;
        inv_no_inverse += evaluate_pair(&s.no_inverse, &a.volume, &b.volume, w, Reduction::Sum).unwrap().inv;
    }
    let total = s.elapsed + start.elapsed();
    let full_ok = full_folds.iter().all(|&f| f == 0);
    let free_count = free_folds.iter().filter(|&&f| f > 0).count();
    let ratio = inv_full / inv_no_inverse;
    report(
        4,
        full_ok && free_count >= 3 && ratio <= 0.5 && total < Duration::from_secs(900),
        format!(
            "folds with anti-folding {full_folds:?}, without {free_folds:?} ({free_count}/5 folded); \
             inverse residual ratio {ratio:.3}; {:.0}s",
            total.as_secs_f64()
        ),
    );
}

fn distance(p: [f64; 3], q: [f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

#[test]
fn criterion_5_training_efficacy() {
    let s = suite();
    let w = &s.config.weights;
    let zero = FcnParams::zeros(s.config.fcn).unwrap();
    let (mut sim, mut sim_zero) = (0.0, 0.0);
    let (mut err, mut initial, mut count) = (0.0, 0.0, 0);
    for k in 0..5 {
        let (a, b) = pair(s, k);
        sim += evaluate_pair(&s.full, &a.volume, &b.volume, w, Reduction::Sum).unwrap().sim;
        sim_zero += evaluate_pair(&zero, &a.volume, &b.volume, w, Reduction::Sum).unwrap().sim;
        let (_, fba) = s.full.predict(&a.volume, &b.volume).unwrap();
        for (&la, &lb) in a.landmarks.points.iter().zip(&b.landmarks.points) {
            err += distance(map_point(&fba, la), lb);
            initial += distance(la, lb);
            count += 1;
        }
    }
    let sim_ratio = sim / sim_zero;
    let lm_ratio = err / initial;
    report(
        5,
        sim_ratio <= 0.2 && lm_ratio <= 0.3,
        format!(
            "held-out sim ratio {sim_ratio:.3} (need <= 0.2); landmark error {:.3} vs initial {:.3}, ratio {lm_ratio:.3} \
             (need <= 0.3)",
            err / count as f64,
            initial / count as f64
        ),
    );
}

#[test]
fn criterion_6_refinement() {
    let s = suite();
    let w = &s.config.weights;
    let (mut increased, mut decreased) = (0, 0);
    let mut changes = Vec::new();
    for k in 0..20 {
        let (a, b) = pair(s, k);
        let before = evaluate_pair(&s.full, &a.volume, &b.volume, w, s.config.reduction).unwrap().total;
        let tuned = refine(&s.full, &s.config, &a.volume, &b.volume).unwrap();
        let after = evaluate_pair(&tuned, &a.volume, &b.volume, w, s.config.reduction).unwrap().total;
        increased += usize::from(after > before);
        decreased += usize::from(after < before);
        changes.push((after - before) / before);
    }
    let worst = changes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    report(
        6,
        increased == 0 && decreased >= 18,
        format!(
            "{} steps at lr {:e}: {decreased}/20 pairs decreased, {increased} increased, largest relative change {worst:+.2e}",
            s.config.refine_iterations, s.config.refine_learning_rate
        ),
    );
}

// ---------------------------------------------------------------- criterion 7

fn random_labels(r: &mut ChaCha8Rng, shape: GridShape, labels: u16) -> LabelMap {
    let density = r.gen_range(0.2..0.9);
    let data = (0..shape.voxels())
        .map(|_| if r.gen_bool(density) { r.gen_range(1..=labels) } else { 0 })
        .collect();
    LabelMap::new(shape, data).unwrap()
}

/// Surface voxels via a one-voxel zero-padded copy of the mask.
fn brute_surface(map: &LabelMap, label: u16) -> Vec<[i64; 3]> {
    let [dx, dy, dz] = map.shape().extents();
    let (px, py, pz) = (dx + 2, dy + 2, dz + 2);
    let mut padded = vec![false; px * py * pz];
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                padded[((z + 1) * py + y + 1) * px + x + 1] = map.get(x, y, z) == label;
            }
        }
    }
    let inside = |x: usize, y: usize, z: usize| padded[(z * py + y) * px + x];
    let mut out = Vec::new();
    for z in 1..=dz {
        for y in 1..=dy {
            for x in 1..=dx {
                let exposed = [(x - 1, y, z), (x + 1, y, z), (x, y - 1, z), (x, y + 1, z), (x, y, z - 1), (x, y, z + 1)]
                    .iter()
                    .any(|&(a, b, c)| !inside(a, b, c));
                if inside(x, y, z) && exposed {
                    out.push([x as i64 - 1, y as i64 - 1, z as i64 - 1]);
                }
            }
        }
    }
    out
}

fn brute_directed(from: &[[i64; 3]], to: &[[i64; 3]]) -> (f64, f64) {
    let d: Vec<f64> = from
        .iter()
        .map(|p| {
            to.iter()
                .map(|q| (((p[0] - q[0]).pow(2) + (p[1] - q[1]).pow(2) + (p[2] - q[2]).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    (d.iter().sum::<f64>() / d.len() as f64, d.iter().cloned().fold(0.0, f64::max))
}

fn brute_vote(maps: &[LabelMap], i: usize) -> u16 {
    let mut counts = [0usize; 8];
    for m in maps {
        counts[m.labels()[i] as usize] += 1;
    }
    let mut best = 0;
    for l in 1..counts.len() {
        if counts[l] > counts[best] {
            best = l;
        }
    }
    best as u16
}

#[test]
fn criterion_7_metric_oracles() {
    let shape = GridShape::cube(12).unwrap();
    let mut r = rng(7);
    let (mut checked, mut mismatches) = (0, 0);
    for _ in 0..100 {
        let pred = random_labels(&mut r, shape, 2);
        let truth = random_labels(&mut r, shape, 2);
        for label in truth.foreground_labels() {
            let (mut tp, mut fp, mut fne) = (0.0, 0.0, 0.0);
            for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
                match (p == label, t == label) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fne += 1.0,
                    _ => {}
                }
            }
            let o = overlap_metrics(&pred, &truth, label).unwrap();
            let ppv = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let mut ok = o.dsc == 2.0 * tp / (2.0 * tp + fp + fne) && o.sen == tp / (tp + fne) && o.ppv == ppv;
            let (sp, st) = (brute_surface(&pred, label), brute_surface(&truth, label));
            if !sp.is_empty() {
                let (m1, h1) = brute_directed(&sp, &st);
                let (m2, h2) = brute_directed(&st, &sp);
                let d = surface_distances(&pred, &truth, label).unwrap();
                ok &= d.asd == (m1 + m2) / 2.0 && d.hd == h1.max(h2);
            }
            checked += 1;
            mismatches += usize::from(!ok);
        }
    }

    let (mut voxels, mut vote_mismatches) = (0, 0);
    for _ in 0..200 {
        let s = GridShape::new(r.gen_range(2..5), r.gen_range(2..5), r.gen_range(2..5)).unwrap();
        let k = r.gen_range(1..7);
        let maps: Vec<LabelMap> = (0..k)
            .map(|_| LabelMap::new(s, (0..s.voxels()).map(|_| r.gen_range(0..4)).collect()).unwrap())
            .collect();
        let fused = multi_atlas_segment(&maps).unwrap();
        for i in 0..s.voxels() {
            voxels += 1;
            vote_mismatches += usize::from(fused.labels()[i] != brute_vote(&maps, i));
        }
    }
    report(
        7,
        mismatches == 0 && vote_mismatches == 0 && checked >= 100,
        format!(
            "{checked} label comparisons over 100 random 12^3 pairs, {mismatches} mismatches; \
             majority vote {vote_mismatches} mismatches over {voxels} voxels"
        ),
    );
}

// ---------------------------------------------------------------- criterion 8

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_8_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_icnet");
    let data = tmp.path().join("data");
    let status = Command::new(bin)
        .args(["synth", "--seed", "8", "--shape", "16", "--pairs", "3", "--max-disp", "2"])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    let config = tmp.path().join("run.cfg");
    fs::write(&config, "iterations = 30\nn = 2\ndepth = 2\nvalidation_fraction = 0.34\nvalidation_interval = 10\nseed = 9\n").unwrap();
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        let (ckpt, curves) = (tmp.path().join(name), tmp.path().join(format!("{name}.csv")));
        let out = Command::new(bin)
            .arg("train")
            .args(["--data".as_ref(), data.as_os_str(), "--config".as_ref(), config.as_os_str()])
            .args(["--out".as_ref(), ckpt.as_os_str(), "--curves".as_ref(), curves.as_os_str()])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        runs.push((fs::read(&curves).unwrap(), dir_bytes(&ckpt)));
    }

    // In-process runs agree with each other as well.
    let volumes: Vec<Volume> = icnet::dataset::load_dataset(&data).unwrap().volumes();
    let cfg = icnet::config::load_config(&config).unwrap();
    let (x, y) = (train(&volumes, &cfg).unwrap(), train(&volumes, &cfg).unwrap());
    let (cx, cy) = (tmp.path().join("x"), tmp.path().join("y"));
    save_checkpoint(&x.params, &cx).unwrap();
    save_checkpoint(&y.params, &cy).unwrap();

    let files = runs[0].1.len();
    let same_cli = runs[0] == runs[1];
    let same_lib = x.curve == y.curve && dir_bytes(&cx) == dir_bytes(&cy);
    report(
        8,
        same_cli && same_lib && files > 2,
        format!(
            "command-line runs byte-identical {same_cli} ({} curve bytes, {files} checkpoint files); \
             library runs identical {same_lib}",
            runs[0].0.len()
        ),
    );
}
