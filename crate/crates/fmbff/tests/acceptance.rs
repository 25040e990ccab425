//! Acceptance criteria, run one after another so the timing limits see an
//! otherwise idle machine. Prints one line per criterion; any failure makes
//! the process exit non-zero. Extra arguments that do not start with `-`
//! select criteria by prefix (`6`, `6b`).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fmbff::core::data::{self, augmentation_grid, generate_synthetic, kfold, Sample, BRIGHTNESS, ROTATION_STEP};
use fmbff::core::metrics::{confusion, metrics_from, Confusion};
use fmbff::core::model::{Model, ModelConfig};
use fmbff::core::nn::{Biffm, BiffmConfig, Ctx, Fmcab, FmcabConfig, Frm, Vitm, VitmConfig};
use fmbff::core::tensor::ops::{self, channel_shuffle, shuffle_index, Conv2dSpec};
use fmbff::core::train::{Plateau, TrainConfig, TrainOutcome, Trainer};
use fmbff::core::{Buffers, Mode, ParamStore, Scope, Tensor};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1 ------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_fmbff"))
        .args(["gradcheck", "--blocks", "all"])
        .env_remove("FMBFF_CORRUPT_BACKWARD")
        .output()
        .map_err(e2s)?;
    let elapsed = t.elapsed();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    ensure(out.status.success(), || format!("gradcheck exited with {:?}:\n{}", out.status.code(), text))?;
    let lines: Vec<&str> = text.lines().filter(|l| l.contains("max rel error")).collect();
    ensure(lines.len() == 5 && lines.iter().all(|l| l.ends_with(" ok")), || text.clone())?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {:.1?}", elapsed))?;
    let summary: Vec<String> = lines
        .iter()
        .map(|l| {
            let w: Vec<&str> = l.split_whitespace().collect();
            format!("{} {}", w[0], w[4])
        })
        .collect();
    Ok(format!("{} in {:.1?}", summary.join(", "), elapsed))
}

// 2 ------------------------------------------------------------------------

fn tensor(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn scope_of<R>(seed: u64, f: impl FnOnce(&mut Scope<'_, f64>) -> R) -> (ParamStore<f64>, Buffers<f64>, R) {
    let mut p = ParamStore::new(seed);
    let mut b = Buffers::new();
    let r = f(&mut Scope::new(&mut p, &mut b, "blk"));
    (p, b, r)
}

fn block_special_cases() -> Outcome {
    const TOL: f64 = 1e-6;
    let checked = std::cell::Cell::new(0);
    let close = |name: &str, got: &[f64], want: &[f64]| -> Result<(), String> {
        checked.set(checked.get() + 1);
        ensure(got.len() == want.len() && got.iter().zip(want).all(|(a, b)| (a - b).abs() <= TOL), || {
            format!("{name}: got {got:?}, want {want:?}")
        })
    };

    // focal modulation: constant input, zero-initialized gate bias
    let (p, _, fm) = scope_of(1, |s| Fmcab::new(s, 4, FmcabConfig::default()).unwrap());
    for v in [-1.3, 0.0, 0.7, 12.0] {
        let x = Tensor::<f64>::full(&[2, 4, 3, 3], v).unwrap();
        let (y, gate) = fm.fm.forward(&p, &x).map_err(e2s)?;
        close("fm gate", gate.data(), &[0.5; 8])?;
        close("fm output", y.data(), &vec![0.5 * v; 72])?;
    }
    let mut q = p.clone();
    q.set(fm.fm.gamma, &Tensor::scalar(0.0)).map_err(e2s)?;
    let x = Tensor::<f64>::randn(&[1, 4, 5, 5], 3).map_err(e2s)?;
    close("gamma = 0", fm.fm.forward(&q, &x).map_err(e2s)?.0.data(), &[0.0; 100])?;

    // FMCAB: zero input propagates to zero, extents preserved
    let (p, _, blk) = scope_of(2, |s| Fmcab::new(s, 8, FmcabConfig::default()).unwrap());
    let tr = blk.forward_trace(&p, &Tensor::zeros(&[1, 8, 16, 16]).unwrap()).map_err(e2s)?;
    ensure(tr.out.shape() == [1, 8, 16, 16], || format!("fmcab shape {:?}", tr.out.shape()))?;
    close("fmcab zero i1", tr.i1.data(), &vec![0.0; 2048])?;
    close("fmcab zero out", tr.out.data(), &vec![0.0; 2048])?;

    // ViTM: zero fuse ⇒ identity
    let (mut p, _, v) = scope_of(3, |s| Vitm::new(s, 16, (4, 4), VitmConfig { heads: 4 }).unwrap());
    p.set(v.fuse.weight, &Tensor::zeros(&[16, 32, 1, 1]).unwrap()).map_err(e2s)?;
    let x = Tensor::<f64>::randn(&[1, 16, 4, 4], 2).map_err(e2s)?;
    ensure(v.forward(&p, &x).map_err(e2s)?.data() == x.data(), || "zero fuse is not the identity".into())?;
    checked.set(checked.get() + 1);

    // TSA and GSA shape contracts
    let (p, _, v) = scope_of(4, |s| Vitm::new(s, 8, (4, 4), VitmConfig { heads: 2 }).unwrap());
    let x = Tensor::<f64>::randn(&[1, 8, 4, 4], 5).map_err(e2s)?;
    for (name, out) in [("tsa", v.tsa(&p, &x).map_err(e2s)?.out), ("gsa", v.gsa(&p, &x).map_err(e2s)?.out)] {
        ensure(out.shape() == [1, 8, 4, 4], || format!("{name} shape {:?}", out.shape()))?;
    }

    // GSA on a spatially constant map: uniform scores, constant output
    let (p, _, v) = scope_of(5, |s| Vitm::new(s, 8, (3, 4), VitmConfig { heads: 2 }).unwrap());
    let p = p.jittered(1, 0.3).map_err(e2s)?;
    let mut vals = Vec::new();
    for c in [0.3, -1.0, 2.0, 0.1, 0.0, 0.5, -0.2, 1.1] {
        vals.extend(std::iter::repeat(c).take(12));
    }
    let g = v.gsa(&p, &tensor(&[1, 8, 3, 4], &vals)).map_err(e2s)?;
    close("gsa uniform scores", g.scores.data(), &[1.0 / 12.0; 144])?;
    for plane in g.out.data().chunks(12) {
        close("gsa constant output", plane, &[plane[0]; 12])?;
    }

    // FRM shape table
    let x = Tensor::<f64>::randn(&[1, 8, 4, 4], 1).map_err(e2s)?;
    for (up, side) in [(true, 8), (false, 4)] {
        let (p, mut b, f) = scope_of(6, |s| Frm::new(s, 8, 16, up).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = f.forward(&p, &mut Ctx::new(Mode::Train, &mut rng, &mut b), &x).map_err(e2s)?;
        ensure(y.shape() == [1, 24, side, side], || format!("frm upsample={up}: {:?}", y.shape()))?;
        checked.set(checked.get() + 1);
    }

    // BiFFM shape contract
    let (p, _, bf) = scope_of(7, |s| Biffm::new(s, 16, 40, 16, BiffmConfig::default()).unwrap());
    let d = Tensor::<f64>::randn(&[1, 16, 8, 8], 1).map_err(e2s)?;
    let s = Tensor::<f64>::randn(&[1, 40, 4, 4], 2).map_err(e2s)?;
    let y = bf.forward(&p, &d, &s).map_err(e2s)?;
    ensure(y.shape() == [1, 32, 8, 8], || format!("biffm shape {:?}", y.shape()))?;
    checked.set(checked.get() + 1);

    Ok(format!("{} special cases within {TOL:e}", checked.get()))
}

// 3 ------------------------------------------------------------------------

fn conv_oracle(x: &Tensor<f32>, k: &Tensor<f32>, b: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let (cin, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    let cout = k.dim(0);
    let (mut out, mut scale) = (Vec::new(), Vec::new());
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = b.data()[o] as f64;
                let mut mag = acc.abs();
                for c in 0..cin {
                    for i in 0..3 {
                        for j in 0..3 {
                            let (iy, ix) = (y as isize + i as isize - 1, xx as isize + j as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let term = x.data()[(c * h + iy as usize) * w + ix as usize] as f64
                                * k.data()[((o * cin + c) * 3 + i) * 3 + j] as f64;
                            acc += term;
                            mag += term.abs();
                        }
                    }
                }
                out.push(acc);
                scale.push(mag);
            }
        }
    }
    (out, scale)
}

fn oracle_equivalence() -> Outcome {
    // conv2d against direct summation; the error is measured relative to the
    // magnitude sum of the products, the natural scale of 32-bit rounding
    let mut worst_conv = 0.0f64;
    for seed in 0..200 {
        let x = Tensor::<f32>::randn(&[1, 3, 5, 5], seed).map_err(e2s)?;
        let k = Tensor::<f32>::randn(&[4, 3, 3, 3], seed + 1000).map_err(e2s)?;
        let b = Tensor::<f32>::randn(&[4], seed + 2000).map_err(e2s)?;
        let y = ops::conv2d(&x, &k, Some(&b), Conv2dSpec::same(3, 3)).map_err(e2s)?;
        let (want, scale) = conv_oracle(&x, &k, &b);
        for ((g, w), s) in y.data().iter().zip(&want).zip(&scale) {
            worst_conv = worst_conv.max((*g as f64 - w).abs() / s.max(1.0));
        }
    }
    ensure(worst_conv <= 1e-6, || format!("conv2d error {worst_conv:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_identity = 0.0f64;
    for _ in 0..1000 {
        let h = 1 + (rng.next_u32() % 24) as usize;
        let w = 1 + (rng.next_u32() % 24) as usize;
        let density = rng.next_u32() as f64 / u32::MAX as f64;
        let unit = |r: &mut ChaCha8Rng| r.next_u32() as f64 / (u32::MAX as f64 + 1.0);
        let pred: Vec<f64> = (0..h * w).map(|_| unit(&mut rng)).collect();
        let gt: Vec<f64> = (0..h * w).map(|_| f64::from(u8::from(unit(&mut rng) < density))).collect();
        let mut want = Confusion::default();
        for (&p, &g) in pred.iter().zip(&gt) {
            match (p >= 0.5, g == 1.0) {
                (true, true) => want.tp += 1,
                (true, false) => want.fp += 1,
                (false, true) => want.fn_ += 1,
                (false, false) => want.tn += 1,
            }
        }
        let c = confusion(&tensor(&[1, 1, h, w], &pred), &tensor(&[1, 1, h, w], &gt), 0.5).map_err(e2s)?[0];
        ensure(c == want, || format!("{h}×{w}: {c:?} vs {want:?}"))?;
        let m = metrics_from(&c);
        let r = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        let (tp, tn, fp, fn_) = (want.tp, want.tn, want.fp, want.fn_);
        let brute = [
            r(tp + tn, tp + tn + fp + fn_),
            r(tp, tp + fn_),
            r(tn, tn + fp),
            r(tp, tp + fp + fn_),
            r(2 * tp, 2 * tp + fp + fn_),
            r(tp, tp + fp),
        ];
        ensure(m.values() == brute, || format!("metrics {:?} vs {:?}", m.values(), brute))?;
        worst_identity = worst_identity.max((m.d - 2.0 * m.j / (1.0 + m.j)).abs());
    }
    ensure(worst_identity <= 1e-12, || format!("D vs 2J/(1+J): {worst_identity:e}"))?;
    Ok(format!(
        "conv2d scaled error {worst_conv:.1e} ≤ 1e-6; 1000 masks exact; |D − 2J/(1+J)| ≤ {worst_identity:.1e}"
    ))
}

// 4 ------------------------------------------------------------------------

fn rows_sum_to_one(s: &Tensor<f64>) -> f64 {
    let len = *s.shape().last().unwrap();
    s.data()
        .chunks(len)
        .map(|row| if row.iter().any(|&v| v < 0.0) { f64::INFINITY } else { (row.iter().sum::<f64>() - 1.0).abs() })
        .fold(0.0, f64::max)
}

fn shape_invariants() -> Outcome {
    for size in [16, 32, 64, 128] {
        let cfg = ModelConfig {
            input_size: (size, size),
            encoder_widths: [4, 4, 8, 8],
            decoder_widths: [4, 4, 4, 4],
            vitm: VitmConfig { heads: 2 },
            ..ModelConfig::default()
        };
        let (model, p, mut b) = Model::build::<f32>(&cfg).map_err(e2s)?;
        let x = Tensor::<f32>::randn(&[1, 3, size, size], 1).map_err(e2s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = model.forward(&p, &mut Ctx::new(Mode::Eval, &mut rng, &mut b), &x).map_err(e2s)?;
        ensure(y.shape() == [1, 1, size, size], || format!("{size}²: f_out {:?}", y.shape()))?;
    }

    let mut worst_row = 0.0f64;
    let mut gates = 0usize;
    for seed in 0..20u64 {
        for (heads, side) in [(1, 2), (2, 3), (4, 4)] {
            let c = 4 * heads;
            let (p, _, v) = scope_of(seed, |s| Vitm::new(s, c, (side, side), VitmConfig { heads }).unwrap());
            let p = p.jittered(seed, 0.5).map_err(e2s)?;
            let x = Tensor::<f64>::randn(&[2, c, side, side], seed + 100).map_err(e2s)?;
            worst_row = worst_row.max(rows_sum_to_one(&v.tsa(&p, &x).map_err(e2s)?.scores));
            worst_row = worst_row.max(rows_sum_to_one(&v.gsa(&p, &x).map_err(e2s)?.scores));
        }
        let mut p = ParamStore::<f64>::new(seed);
        let mut b = Buffers::new();
        let fm = Fmcab::new(&mut Scope::new(&mut p, &mut b, "fmcab"), 8, FmcabConfig::default()).map_err(e2s)?;
        let bf = Biffm::new(&mut Scope::new(&mut p, &mut b, "biffm"), 8, 6, 8, BiffmConfig::default()).map_err(e2s)?;
        let p = p.jittered(seed, 0.1).map_err(e2s)?;
        let x = Tensor::<f64>::randn(&[2, 8, 5, 5], seed + 200).map_err(e2s)?;
        let s = Tensor::<f64>::randn(&[2, 6, 3, 3], seed + 300).map_err(e2s)?;
        let t = fm.forward_trace(&p, &x).map_err(e2s)?;
        let f = bf.forward_trace(&p, &x, &s).map_err(e2s)?;
        for g in [&t.se_gate, &t.fm_gate, &f.gate1, &f.gate2] {
            ensure(g.data().iter().all(|&v| v > 0.0 && v < 1.0), || format!("gate outside (0,1), seed {seed}"))?;
            gates += g.numel();
        }
    }
    ensure(worst_row <= 1e-6, || format!("attention row sum off by {worst_row:e}"))?;

    let mut perms = 0;
    for c in 1..=24usize {
        for g in (1..=c).filter(|g| c % g == 0) {
            let image: BTreeSet<usize> = (0..c).map(|i| shuffle_index(i, c, g)).collect();
            ensure(image.len() == c && image.iter().all(|&j| j < c), || format!("shuffle C={c} g={g} not a bijection"))?;
            let x = Tensor::<f64>::randn(&[1, c, 2, 2], c as u64).map_err(e2s)?;
            let y = channel_shuffle(&x, g).map_err(e2s)?;
            let back = channel_shuffle(&y, c / g).map_err(e2s)?;
            ensure(back.data() == x.data(), || format!("shuffle C={c} g={g} not inverted by C/g"))?;
            perms += 1;
        }
    }
    Ok(format!(
        "f_out extents 16..128 ok; attention rows within {worst_row:.1e}; {gates} gates in (0,1); {perms} shuffles bijective"
    ))
}

// 5 ------------------------------------------------------------------------

fn protocol_fidelity() -> Outcome {
    let d = TrainConfig::default();
    ensure(
        d.lr0 == 0.001 && d.plateau_patience == 7 && d.plateau_factor == 0.75 && d.early_stop_patience == 10,
        || format!("defaults {d:?}"),
    )?;
    let mut s = Plateau::new(d.lr0, d.plateau_factor, d.plateau_patience, d.early_stop_patience);
    s.observe(0.5);
    let mut reduced_at = Vec::new();
    let mut stopped_at = None;
    for stagnant in 1..=12 {
        let before = s.lr();
        let ev = s.observe(0.4);
        if ev.reduced {
            reduced_at.push((stagnant, s.lr() / before));
        }
        if ev.stop && stopped_at.is_none() {
            stopped_at = Some(stagnant);
        }
    }
    ensure(reduced_at.first() == Some(&(7, 0.75)), || format!("reductions {reduced_at:?}"))?;
    ensure(stopped_at == Some(10), || format!("stopped after {stopped_at:?}"))?;

    let grid = augmentation_grid();
    let rotations: BTreeSet<u32> = grid.iter().map(|g| g.0).collect();
    ensure(
        grid.len() == 36 && rotations == (0..12).map(|k| k * ROTATION_STEP).collect() && ROTATION_STEP == 30,
        || format!("grid {grid:?}"),
    )?;
    ensure(BRIGHTNESS == [1.0, 0.8, 1.2], || format!("brightness {BRIGHTNESS:?}"))?;
    let expanded = data::expand(&generate_synthetic(2, (16, 16), 0).map_err(e2s)?).map_err(e2s)?;
    ensure(expanded.len() == 72, || format!("expansion of 2 gave {}", expanded.len()))?;

    let ids: Vec<String> = (0..103).map(|i| format!("s{i:03}")).collect();
    let plan = kfold(&ids, 5, 7).map_err(e2s)?;
    let folds = plan.folds.as_ref().unwrap();
    let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
    ensure(sizes == [21, 21, 21, 20, 20], || format!("fold sizes {sizes:?}"))?;
    let union: BTreeSet<&String> = folds.iter().flatten().collect();
    ensure(union.len() == 103 && union.iter().all(|id| ids.contains(id)), || "folds do not cover the ids once".into())?;
    for k in 0..5 {
        let (train, val) = plan.fold(k).map_err(e2s)?;
        ensure(train.len() + val.len() == 103 && val.iter().all(|v| !train.contains(v)), || format!("fold {k} overlaps"))?;
    }
    Ok("lr 0.001 → 0.00075 after 7 stagnant epochs; stop after 10; 12×3 grid; 5-fold of 103 = 21,21,21,20,20".into())
}

// 6 ------------------------------------------------------------------------

/// Desk-sized widths used for the toy-scale runs.
fn compact_model() -> ModelConfig {
    ModelConfig {
        encoder_widths: [8, 16, 32, 64],
        decoder_widths: [32, 16, 16, 8],
        ..ModelConfig::default()
    }
}

fn fit(train: &[Sample], val: &[Sample], config: TrainConfig) -> Result<TrainOutcome<f32>, String> {
    let (model, p, b) = Model::build::<f32>(&compact_model()).map_err(e2s)?;
    Trainer::new(&model, p, b, config).map_err(e2s)?.run(train, val, |_| {}).map_err(e2s)
}

fn overfit() -> Outcome {
    let t = Instant::now();
    let samples = generate_synthetic(8, (64, 64), 1).map_err(e2s)?;
    let out = fit(
        &samples,
        &samples,
        TrainConfig {
            max_epochs: 200,
            max_steps: Some(200),
            target_val_dice: Some(0.95),
            early_stop_patience: 200,
            seed: 3,
            ..TrainConfig::default()
        },
    )?;
    let elapsed = t.elapsed();
    let steps = out.state.step;
    ensure(out.best_val_dice >= 0.95, || format!("Dice {:.4} after {steps} steps", out.best_val_dice))?;
    ensure(steps <= 200, || format!("{steps} steps"))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:.1?}"))?;
    Ok(format!("Dice {:.4} after {steps} steps in {elapsed:.1?}", out.best_val_dice))
}

fn toy_run() -> Outcome {
    let t = Instant::now();
    let samples = generate_synthetic(250, (64, 64), 1).map_err(e2s)?;
    let out = fit(
        &samples[..200],
        &samples[200..],
        TrainConfig {
            max_epochs: 30,
            target_val_dice: Some(0.85),
            seed: 3,
            ..TrainConfig::default()
        },
    )?;
    let elapsed = t.elapsed();
    let epochs = out.history.len();
    ensure(out.best_val_dice >= 0.85, || format!("best val Dice {:.4} after {epochs} epochs", out.best_val_dice))?;
    ensure(elapsed < Duration::from_secs(1200), || format!("took {elapsed:.1?}"))?;
    Ok(format!("best val Dice {:.4} at epoch {epochs} in {elapsed:.1?}", out.best_val_dice))
}

// 7 ------------------------------------------------------------------------

const DET_CONFIG: &str = "\
model.input_size = 16,16
model.encoder_widths = 4,4,8,8
model.decoder_widths = 4,4,4,4
model.vitm.heads = 2
train.max_epochs = 2
train.batch_size = 4
data.augment = random
";

fn run_pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    fs::write(dir.join("cfg.txt"), DET_CONFIG).map_err(e2s)?;
    let steps: [&[&str]; 3] = [
        &["synth", "--n", "10", "--size", "16", "--seed", "4", "--out", "data"],
        &["train", "--data", "data", "--config", "cfg.txt", "--out", "run", "--quiet"],
        &["eval", "--data", "data", "--ckpt", "run/best.ckpt", "--folds", "2", "--out", "eval"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_fmbff"))
            .args(args)
            .current_dir(dir)
            .env("SOURCE_DATE_EPOCH", "1700000000")
            .output()
            .map_err(e2s)?;
        ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))?;
    }
    let mut files = Vec::new();
    for sub in ["data", "data/images", "data/masks", "run", "eval"] {
        for e in fs::read_dir(dir.join(sub)).map_err(e2s)? {
            let p = e.map_err(e2s)?.path();
            if p.is_file() {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).map_err(e2s)?));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(e2s)?, tempfile::tempdir().map_err(e2s)?);
    let fa = run_pipeline(a.path())?;
    let fb = run_pipeline(b.path())?;
    ensure(fa.len() == fb.len(), || "different file sets".into())?;
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        ensure(na == nb && ba == bb, || format!("{na} differs"))?;
    }

    let (model, p, bufs) = Model::build::<f32>(&ModelConfig {
        input_size: (16, 16),
        ..ModelConfig::default()
    })
    .map_err(e2s)?;
    let data = generate_synthetic(6, (16, 16), 2).map_err(e2s)?;
    let cfg = TrainConfig { max_epochs: 2, batch_size: 3, ..TrainConfig::default() };
    let out = Trainer::new(&model, p, bufs, cfg).map_err(e2s)?.run(&data[..4], &data[4..], |_| {}).map_err(e2s)?;
    let ck = fmbff::checkpoint::Checkpoint {
        model: model.config.clone(),
        params: out.last_params,
        buffers: out.last_buffers,
        state: Some(out.state),
    };
    let bytes = fmbff::checkpoint::encode(&fmbff::checkpoint::to_entries(&ck));
    let (_, back) = fmbff::checkpoint::from_entries::<f32>(&fmbff::checkpoint::decode(&bytes, "mem").map_err(e2s)?, "mem")
        .map_err(e2s)?;
    let word_bits = |v: &[Vec<f32>]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    let (s0, s1) = (ck.state.as_ref().unwrap(), back.state.as_ref().unwrap());
    ensure(word_bits(&s0.adam.m) == word_bits(&s1.adam.m), || "Adam first moments differ".into())?;
    ensure(word_bits(&s0.adam.v) == word_bits(&s1.adam.v), || "Adam second moments differ".into())?;
    ensure(s0 == s1, || "train state differs".into())?;
    let params = |p: &ParamStore<f32>| p.iter().flat_map(|(_, _, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    ensure(params(&ck.params) == params(&back.params), || "parameters differ".into())?;
    let again = fmbff::checkpoint::encode(&fmbff::checkpoint::to_entries(&back));
    ensure(again == bytes, || "re-encoded checkpoint differs".into())?;
    Ok(format!(
        "{} files byte-identical across two synth/train/eval runs; {}-byte checkpoint round-trips bitwise",
        fa.len(),
        bytes.len()
    ))
}

// --------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 block special cases", block_special_cases),
        ("3 oracle equivalence", oracle_equivalence),
        ("4 shape and normalization invariants", shape_invariants),
        ("5 protocol fidelity", protocol_fidelity),
        ("6a toy learning: overfit 8 samples", overfit),
        ("6b toy learning: 200/50 run", toy_run),
        ("7 determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.starts_with(p.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
