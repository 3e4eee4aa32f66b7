//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cot_core::checks::loss_gradient_checks;
use cot_core::config::Config;
use cot_core::datagen::generate_benchmark;
use cot_core::eval::{classwise_mmd, evaluate, features_and_probs, mean_diagonal, median_bandwidth, mmd};
use cot_core::losses::ContrastiveBatch;
use cot_core::ot::{solve_exact, solve_sinkhorn, uniform_marginal, CostMatrix, OtConfig};
use cot_core::pointcloud::Dataset;
use cot_core::rng;
use cot_core::tensor::Tensor;
use cot_core::trainer::{fit, spst_finetune, TrainState, FINAL_CKPT, METRICS_CSV};
use rand::seq::SliceRandom;
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn cot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cot"))
}

fn run_cli(args: &[&str], threads: Option<&str>) -> Result<(), String> {
    let mut c = cot();
    c.args(args);
    if let Some(t) = threads {
        c.env("COT_THREADS", t);
    }
    let o = c.output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("cot {} failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gradients() -> Verdict {
    let t0 = Instant::now();
    let checks = match loss_gradient_checks(0, 20) {
        Ok(c) => c,
        Err(e) => return verdict(false, e.to_string()),
    };
    let elapsed = t0.elapsed();
    let parts: Vec<String> = checks.iter().map(|c| format!("{} {:.1e}/{:.0e}", c.name, c.max_error, c.tolerance)).collect();
    verdict(
        checks.iter().all(|c| c.passed()) && elapsed < Duration::from_secs(60),
        format!("{}; {elapsed:.1?}", parts.join(", ")),
    )
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    permutations(k - 1)
        .into_iter()
        .flat_map(|p| {
            (0..=p.len()).map(move |pos| {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                q
            })
        })
        .collect()
}

fn enumerate(c: &CostMatrix) -> f64 {
    let k = c.rows();
    permutations(k)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| c.at(i, j)).sum::<f64>() / k as f64)
        .fold(f64::INFINITY, f64::min)
}

fn random_cost(r: &mut rng::Rng, k: usize) -> CostMatrix {
    CostMatrix::from_vec(k, k, (0..k * k).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

fn exact_solver() -> Verdict {
    let t0 = Instant::now();
    let mut r = rng::stream(2, &[]);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let k = 2 + trial % 5;
        let c = random_cost(&mut r, k);
        let u = uniform_marginal(k);
        match solve_exact(&c, &u, &u) {
            Ok(p) => worst = worst.max((p.objective(&c) - enumerate(&c)).abs()),
            Err(e) => return verdict(false, e.to_string()),
        }
    }
    let elapsed = t0.elapsed();
    verdict(worst <= 1e-9 && elapsed < Duration::from_secs(60), format!("max gap {worst:.1e} over 200 instances; {elapsed:.1?}"))
}

fn sinkhorn() -> Verdict {
    let mut r = rng::stream(3, &[]);
    let (mut marg, mut below) = (0.0f64, 0usize);
    let u8 = uniform_marginal(8);
    for _ in 0..100 {
        let c = random_cost(&mut r, 8);
        let ent = solve_sinkhorn(&c, &u8, &u8, &OtConfig::default()).unwrap().coupling;
        marg = marg.max(ent.marginal_error());
        if ent.objective(&c) < solve_exact(&c, &u8, &u8).unwrap().objective(&c) {
            below += 1;
        }
    }
    let u4 = uniform_marginal(4);
    let cfg = OtConfig {
        sinkhorn_epsilon: 0.01,
        sinkhorn_max_iters: 100_000,
        ..OtConfig::default()
    };
    let mut gap = 0.0f64;
    for _ in 0..20 {
        let c = random_cost(&mut r, 4);
        let ent = solve_sinkhorn(&c, &u4, &u4, &cfg).unwrap().coupling.objective(&c);
        gap = gap.max(ent - solve_exact(&c, &u4, &u4).unwrap().objective(&c));
    }
    verdict(
        marg <= 1e-6 && below == 0 && gap <= 1e-2,
        format!("max marginal error {marg:.1e}; {below} below exact; max gap at eps 0.01 {gap:.1e}"),
    )
}

fn closed_forms() -> Verdict {
    let mut worst = 0.0f64;
    for k in [1usize, 2, 4, 8] {
        let row = [0.6f64, 0.0, 0.8, 0.0];
        let t = Tensor::from_rows(&vec![row.to_vec(); k]).unwrap();
        let b = ContrastiveBatch::new(t.clone(), t.clone(), t, 0.1).unwrap();
        let want = (2.0 * k as f64).ln();
        worst = worst.max((b.loss_3d(false).unwrap() - want).abs());
        worst = worst.max((b.loss_mm(false).unwrap() - want).abs());
    }
    verdict(worst <= 1e-6, format!("max deviation from log(2k) {worst:.1e}"))
}

struct Arm {
    name: &'static str,
    overrides: &'static [(&'static str, &'static str)],
}

const BASELINE: Arm = Arm {
    name: "baseline",
    overrides: &[("use_3d", "false"), ("use_mm", "false"), ("use_ot", "false")],
};
const FULL: Arm = Arm { name: "cot", overrides: &[] };
const NO_OT: Arm = Arm {
    name: "no_ot",
    overrides: &[("use_ot", "false")],
};

#[derive(Default)]
struct SeedResult {
    baseline: f64,
    cot: f64,
    spst: f64,
    no_ot: f64,
    mmd_baseline: f64,
    mmd_cot: f64,
}

fn to64(f: Vec<Vec<f32>>) -> Vec<Vec<f64>> {
    f.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect()
}

fn diagonal_mmd(state: &TrainState, source: &Dataset, target: &Dataset, classes: usize) -> cot_core::Result<f64> {
    let (fs, _) = features_and_probs(&state.model, &source.clouds)?;
    let (ft, _) = features_and_probs(&state.model, &target.clouds)?;
    let m = classwise_mmd(&to64(fs), &source.evaluation_labels()?, &to64(ft), &target.evaluation_labels()?, classes)?;
    Ok(mean_diagonal(&m).unwrap_or(f64::NAN))
}

fn adaptation_seed(base: &Config, seed: u64, dir: &Path) -> cot_core::Result<SeedResult> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    let bench = generate_benchmark(&cfg.benchmark())?;
    let (train, test) = (&bench.train, &bench.test);
    let mut out = SeedResult::default();
    for arm in [BASELINE, FULL, NO_OT] {
        let mut c = cfg.clone();
        for (k, v) in arm.overrides {
            c.set(k, v)?;
        }
        let run = dir.join(format!("{}_{seed}", arm.name));
        let t0 = Instant::now();
        fit(&c, &train.source, &train.target, Some(&test.source), &run)?;
        let mut state = TrainState::load(&c, &run.join(FINAL_CKPT))?;
        let acc = evaluate(&state.model, &test.target)?.overall_accuracy;
        let mut line = format!("  seed {seed} {:8} target {acc:.3}", arm.name);
        match arm.name {
            "baseline" => {
                out.baseline = acc;
                out.mmd_baseline = diagonal_mmd(&state, &test.source, &test.target, c.classes)?;
                line += &format!(" mmd {:.4}", out.mmd_baseline);
            }
            "cot" => {
                out.cot = acc;
                out.mmd_cot = diagonal_mmd(&state, &test.source, &test.target, c.classes)?;
                spst_finetune(&mut state, &c, &train.source, &train.target, None)?;
                out.spst = evaluate(&state.model, &test.target)?.overall_accuracy;
                line += &format!(" mmd {:.4} after self-training {:.3}", out.mmd_cot, out.spst);
            }
            _ => out.no_ot = acc,
        }
        println!("{line} ({:.0?})", t0.elapsed());
    }
    Ok(out)
}

fn naive_mmd(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| (-a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / (2.0 * sigma * sigma)).exp();
    let mut total = 0.0;
    for (set_a, set_b, w) in [(x, x, 1.0), (y, y, 1.0), (x, y, -2.0)] {
        let mut acc = 0.0;
        for a in set_a {
            for b in set_b {
                acc += k(a, b);
            }
        }
        total += w * acc / (set_a.len() * set_b.len()) as f64;
    }
    total.max(0.0).sqrt()
}

fn mmd_oracle_gap() -> f64 {
    let mut r = rng::stream(7, &[]);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n, m, d) = (r.random_range(1..=20), r.random_range(1..=20), r.random_range(1..=8));
        let mut set = |n: usize, shift: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0) + shift).collect()).collect()
        };
        let (x, y) = (set(n, 0.0), set(m, 0.3));
        let sigma = median_bandwidth(&x, &y);
        worst = worst.max((mmd(&x, &y, sigma).unwrap() - naive_mmd(&x, &y, sigma)).abs());
    }
    worst
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn adaptation(dir: &Path) -> [Verdict; 3] {
    let cfg_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/adaptation.cfg");
    let cfg = match Config::load(&cfg_path) {
        Ok(c) => c,
        Err(e) => {
            let v = || verdict(false, format!("config: {e}"));
            return [v(), v(), v()];
        }
    };
    let t0 = Instant::now();
    let mut results = Vec::new();
    for seed in SEEDS {
        match adaptation_seed(&cfg, seed, dir) {
            Ok(r) => results.push(r),
            Err(e) => {
                let v = || verdict(false, format!("seed {seed}: {e}"));
                return [v(), v(), v()];
            }
        }
    }
    let elapsed = t0.elapsed();
    let m = |f: fn(&SeedResult) -> f64| mean(results.iter().map(f));
    let (base, full, spst, no_ot) = (m(|r| r.baseline), m(|r| r.cot), m(|r| r.spst), m(|r| r.no_ot));
    let (mmd_b, mmd_c) = (m(|r| r.mmd_baseline), m(|r| r.mmd_cot));
    let gap = mmd_oracle_gap();
    [
        verdict(
            full - base >= 0.05 && full - spst <= 0.02 && elapsed < Duration::from_secs(20 * 60),
            format!(
                "mean target accuracy cot {:.1}% vs baseline {:.1}% (gain {:+.1}), after self-training {:.1}%; {elapsed:.0?}",
                100.0 * full,
                100.0 * base,
                100.0 * (full - base),
                100.0 * spst
            ),
        ),
        verdict(full > no_ot, format!("mean target accuracy cot {:.1}% vs without alignment {:.1}%", 100.0 * full, 100.0 * no_ot)),
        verdict(
            mmd_c < mmd_b && gap <= 1e-9,
            format!("mean diagonal MMD cot {mmd_c:.4} vs baseline {mmd_b:.4}; estimator vs naive sum {gap:.1e}"),
        ),
    ]
}

fn pgm_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension()? == "pgm").then(|| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        })
        .collect();
    v.sort();
    v
}

fn pixels(pgm: &[u8]) -> &[u8] {
    let header = b"P5\n33 33\n255\n";
    assert!(pgm.starts_with(header), "unexpected PGM header");
    &pgm[header.len()..]
}

fn renderer(dir: &Path) -> Verdict {
    let attempt = || -> Result<String, String> {
        let cloud = cot_core::datagen::generate_shape(4, 1024, 5).map_err(|e| e.to_string())?;
        let xyz = dir.join("torus.xyz");
        cot_core::pointcloud::write_xyz(&xyz, &cloud).map_err(|e| e.to_string())?;
        let mut outputs = Vec::new();
        for (i, threads) in ["1", "1", "4", "4"].into_iter().enumerate() {
            let out = dir.join(format!("render_{i}"));
            run_cli(&["render", "--out", s(&out), "--input", s(&xyz), "--image-size", "33", "--point-radius", "0.03"], Some(threads))?;
            outputs.push(pgm_files(&out));
        }
        if outputs[0].len() != 12 || outputs.iter().any(|o| o != &outputs[0]) {
            return Err("PGM outputs differ between runs or thread counts".into());
        }
        let origin = dir.join("origin.xyz");
        fs::write(&origin, "0 0 0\n").map_err(|e| e.to_string())?;
        for radius in ["0.008", "0.1"] {
            let out = dir.join(format!("origin_{radius}"));
            run_cli(&["render", "--out", s(&out), "--input", s(&origin), "--image-size", "33", "--point-radius", radius], None)?;
            for (name, bytes) in pgm_files(&out) {
                let px = pixels(&bytes);
                let max = *px.iter().max().unwrap();
                if max == 0 || px[16 * 33 + 16] != max {
                    return Err(format!("{name} at radius {radius}: splat not centred on pixel (16,16)"));
                }
                let symmetric = (0..33 * 33).all(|i| px[i] == px[33 * 33 - 1 - i]);
                let lit = px.iter().filter(|&&v| v > 0).count();
                if !symmetric || (radius == "0.008" && lit != 1) {
                    return Err(format!("{name} at radius {radius}: splat not symmetric about the centre"));
                }
            }
        }
        Ok("12 views identical over 2 runs x COT_THREADS 1 and 4; origin splat centred on (16,16) in every view".into())
    };
    match attempt() {
        Ok(d) => verdict(true, d),
        Err(e) => verdict(false, e),
    }
}

const SMALL: &[&str] = &[
    "--train-per-class", "6", "--test-per-class", "4", "--points", "64", "--target-points", "64", "--point-hidden",
    "16,32", "--emb-dim", "32", "--proj-dim", "16", "--conv-channels", "4,8", "--clf-hidden", "16", "--views", "4",
    "--batch-size", "10", "--epochs", "4", "--spst-rounds", "2", "--spst-epochs", "1", "--spst-threshold", "0.3",
    "--seed", "11",
];

fn cli_with(sub: &str, out: &Path, extra: &[&str]) -> Result<(), String> {
    let mut a = vec![sub, "--out", s(out)];
    a.extend_from_slice(SMALL);
    a.extend_from_slice(extra);
    run_cli(&a, None)
}

fn reproducibility(dir: &Path) -> Verdict {
    let attempt = || -> Result<String, String> {
        let data = dir.join("repro_data");
        cli_with("gen-data", &data, &[])?;
        let runs: Vec<PathBuf> = (0..2).map(|i| dir.join(format!("repro_run_{i}"))).collect();
        for run in &runs {
            cli_with("train", run, &["--data", s(&data)])?;
        }
        let head = |run: &Path| -> Vec<String> {
            fs::read_to_string(run.join(METRICS_CSV)).unwrap().lines().take(11).map(String::from).collect()
        };
        let (a, b) = (head(&runs[0]), head(&runs[1]));
        if a.len() < 11 {
            return Err(format!("only {} metric rows", a.len() - 1));
        }
        if a != b {
            return Err("first 10 metric rows differ".into());
        }
        if fs::read(runs[0].join(FINAL_CKPT)).unwrap() != fs::read(runs[1].join(FINAL_CKPT)).unwrap() {
            return Err("final checkpoints differ".into());
        }
        Ok("first 10 metric rows and final checkpoints bit-identical".into())
    };
    match attempt() {
        Ok(d) => verdict(true, d),
        Err(e) => verdict(false, e),
    }
}

fn shuffle_target_labels(data: &Path) -> Result<(), String> {
    let path = data.join(cot_core::datagen::TARGET_LABELS);
    let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let mut lines: Vec<&str> = text.lines().collect();
    let header = lines.remove(0);
    let (paths, mut labels): (Vec<&str>, Vec<&str>) = lines.iter().map(|l| l.rsplit_once(',').unwrap()).unzip();
    let before = labels.clone();
    let mut r = rng::stream(99, &[]);
    while labels == before {
        labels.shuffle(&mut r);
    }
    let body: String = paths.iter().zip(&labels).map(|(p, l)| format!("{p},{l}\n")).collect();
    fs::write(&path, format!("{header}\n{body}")).map_err(|e| e.to_string())
}

fn label_hygiene(dir: &Path) -> Verdict {
    let attempt = || -> Result<String, String> {
        let mut finals = Vec::new();
        for (i, shuffled) in [false, true].into_iter().enumerate() {
            let (data, run) = (dir.join(format!("hygiene_data_{i}")), dir.join(format!("hygiene_run_{i}")));
            cli_with("gen-data", &data, &[])?;
            if shuffled {
                shuffle_target_labels(&data)?;
            }
            cli_with("train", &run, &["--data", s(&data)])?;
            cli_with("spst", &run, &["--data", s(&data)])?;
            finals.push(fs::read(run.join("spst.ckpt")).map_err(|e| e.to_string())?);
        }
        if finals[0] != finals[1] {
            return Err("parameters after train + spst depend on target labels".into());
        }
        Ok("parameters after train + spst bit-identical with shuffled target labels".into())
    };
    match attempt() {
        Ok(d) => verdict(true, d),
        Err(e) => verdict(false, e),
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let dir = tmp.path();
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!("criterion {n:2} {}: {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((n, name, v));
    };
    report(1, "gradient checks", gradients());
    report(2, "exact transport vs enumeration", exact_solver());
    report(3, "entropic transport contract", sinkhorn());
    report(4, "contrastive closed forms", closed_forms());
    report(8, "renderer determinism and centring", renderer(dir));
    report(9, "training reproducibility", reproducibility(dir));
    report(10, "target label hygiene", label_hygiene(dir));
    let [gain, ablation, mmd] = adaptation(dir);
    report(5, "adaptation gain", gain);
    report(6, "alignment ablation", ablation);
    report(7, "class-wise MMD", mmd);

    let failed: Vec<usize> = verdicts.iter().filter(|(_, _, v)| !v.passed).map(|(n, _, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", verdicts.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
