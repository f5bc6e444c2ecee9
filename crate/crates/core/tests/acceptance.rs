//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.
//!
//! Criteria 4 to 9 run the experiment configs in `configs/` inside a scratch
//! directory laid out like the repository (`configs/`, `runs/`).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use l3m::constraints::{exact_constraint_value, offset_cost};
use l3m::harness::config::ExperimentConfig;
use l3m::harness::experiment::{evaluate_checkpoint, run_experiment, train_reward_model, RewardModelSummary, RunSummary};
use l3m::harness::{generate_preference_data, parse_config};
use l3m::rewards::bt_loss_grad;
use l3m::stats::{mean, pearson};
use l3m::trainer::{
    constraint_gradient, exact_policy_gradient, l3m_grad, l3m_grad_exact, sample_batch, surrogate_objective_exact, TrainRun,
};
use l3m::{
    barrier_grad, barrier_value, BarrierParams, ConstraintEstimator, ConstraintKind, ConstraintSpec, GenerationConfig, Policy,
    PreferenceTuple, RewardFn, RewardModel, Token, Vocab,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), String>;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BANDS: [(f64, f64); 3] = [(5.0, 8.0), (8.0, 11.0), (6.0, 7.0)];
/// Threshold offsets from the supervised policy's mean learned rewards.
const HH_OFFSETS: [f64; 2] = [0.05, -0.1];

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn run(&mut self, id: usize, title: &str, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let secs = start.elapsed().as_secs_f64();
        println!("{} [{id}] {title} ({secs:.2}s): {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }
}

// ---------------------------------------------------------------------------
// Random instances

fn random_policy(rng: &mut ChaCha8Rng, vocab: usize, mlp: bool) -> Policy {
    let v = Vocab::new(vocab).unwrap();
    let mut p = if mlp {
        Policy::mlp(v, rng.random_range(2..=4), rng.random_range(3..=6), rng.random()).unwrap()
    } else {
        Policy::tabular(v, rng.random_range(1..=3)).unwrap()
    };
    let scale = rng.random_range(0.1..1.5);
    for w in p.params_mut() {
        *w += scale * (rng.random::<f64>() * 2.0 - 1.0);
    }
    p
}

fn content(rng: &mut ChaCha8Rng, vocab: usize, len: std::ops::RangeInclusive<usize>) -> Vec<Token> {
    let n = rng.random_range(len);
    (0..n).map(|_| rng.random_range(2..vocab as Token)).collect()
}

fn response(rng: &mut ChaCha8Rng, vocab: usize, max: usize) -> Vec<Token> {
    let mut y = content(rng, vocab, 0..=max - 1);
    if y.is_empty() || rng.random_bool(0.7) {
        y.push(Vocab::EOS);
    }
    y
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

const FD_STEP: f64 = 1e-5;

fn central_diff(p: &Policy, mut f: impl FnMut(&Policy) -> f64) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.num_params())
        .map(|j| {
            let w = q.params()[j];
            q.params_mut()[j] = w + FD_STEP;
            let up = f(&q);
            q.params_mut()[j] = w - FD_STEP;
            let down = f(&q);
            q.params_mut()[j] = w;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn rand_constraint(rng: &mut ChaCha8Rng, vocab: usize) -> ConstraintSpec {
    let reward = match rng.random_range(0..3) {
        0 => RewardFn::length(),
        1 => RewardFn::neg_length(),
        _ => RewardFn::token_frequency("freq", rng.random_range(2..vocab as Token)),
    };
    let b = match reward.name.as_str() {
        "length" => rng.random_range(0.5..4.0),
        "neg_length" => -rng.random_range(0.5..4.0),
        _ => rng.random_range(0.0..0.8),
    };
    if rng.random_bool(0.25) {
        ConstraintSpec::new(reward, b, ConstraintKind::Chance { epsilon: rng.random_range(0.1..0.9) }).unwrap()
    } else {
        ConstraintSpec::expectation(reward, b).unwrap()
    }
}

struct Enumerable {
    policy: Policy,
    prompts: Vec<Vec<Token>>,
    task: Vec<(Vec<Token>, Vec<Token>)>,
    constraints: Vec<ConstraintSpec>,
    max_len: usize,
    mu: f64,
}

fn enumerable(rng: &mut ChaCha8Rng) -> Enumerable {
    let vocab = rng.random_range(3..=4);
    let max_len = rng.random_range(1..=3);
    let mlp = rng.random_bool(0.3);
    let policy = random_policy(rng, vocab, mlp);
    let prompts = (0..rng.random_range(1..=2)).map(|_| content(rng, vocab, 1..=3)).collect();
    let task = (0..rng.random_range(1..=3))
        .map(|_| (content(rng, vocab, 1..=3), response(rng, vocab, 4)))
        .collect();
    let constraints = (0..rng.random_range(1..=2)).map(|_| rand_constraint(rng, vocab)).collect();
    Enumerable {
        policy,
        prompts,
        task,
        constraints,
        max_len,
        mu: 10f64.powf(rng.random_range(-1.0..0.0)),
    }
}

// ---------------------------------------------------------------------------
// Criteria 1-3: oracles

fn barrier_convergence() -> Check {
    let mus = [1.0, 0.1, 0.01, 0.001];
    let b = |z: f64, mu: f64| barrier_value(z, BarrierParams::coupled(mu).unwrap());
    let mut pass = true;
    let mut notes = Vec::new();
    for z in [-1.0, -0.5, -0.1] {
        let vals: Vec<f64> = mus.iter().map(|&m| b(z, m).abs()).collect();
        // B(-1) = -mu ln 1 vanishes for every mu, so monotone means non-increasing.
        let mono = vals.windows(2).all(|w| w[1] <= w[0]);
        let small = vals[3] <= 0.05;
        pass &= mono && small;
        notes.push(format!("|B({z})| = {:.4e}{}", vals[3], if mono && small { "" } else { " (not ok)" }));
    }
    for z in [0.1, 1.0] {
        let v = b(z, 1e-3);
        let ok = v >= 1e3;
        pass &= ok;
        notes.push(format!("B({z}) = {v:.3}{}", if ok { "" } else { " < 1e3" }));
    }
    Ok((pass, format!("at mu = 1e-3: {}", notes.join(", "))))
}

fn gradient_oracles() -> Check {
    const N: usize = 120;
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 5];

    // Barrier: log branch and linear branch, central differences kept on one side of z = -s.
    for _ in 0..N {
        let mu = 10f64.powf(rng.random_range(-3.0..0.0));
        let p = BarrierParams::coupled(mu).unwrap();
        let s = p.s();
        let z = if rng.random_bool(0.5) {
            -s * 10f64.powf(rng.random_range(0.05..4.0))
        } else {
            -s + s * 10f64.powf(rng.random_range(-1.0..4.0))
        };
        let h = (1e-6 * z.abs().max(s)).min(0.1 * (z + s).abs());
        let fd = (barrier_value(z + h, p) - barrier_value(z - h, p)) / (2.0 * h);
        worst[0] = worst[0].max(rel_err(&[fd], &[barrier_grad(z, p)]));
    }

    for _ in 0..N {
        let vocab = rng.random_range(3..=8);
        let mlp = rng.random_bool(0.5);
        let p = random_policy(&mut rng, vocab, mlp);
        let x = content(&mut rng, vocab, 1..=4);
        let y = response(&mut rng, vocab, 6);
        let fd = central_diff(&p, |q| q.log_prob(&x, &y).unwrap());
        let g = p.grad_log_prob(&x, &y, false).map_err(err)?;
        let gn = p.grad_log_prob(&x, &y, true).map_err(err)?;
        let fdn: Vec<f64> = fd.iter().map(|v| v / y.len() as f64).collect();
        worst[1] = worst[1].max(rel_err(&fd, &g)).max(rel_err(&fdn, &gn));

        let batch: Vec<(Vec<Token>, Vec<Token>)> = (0..rng.random_range(1..=4))
            .map(|_| (content(&mut rng, vocab, 1..=4), response(&mut rng, vocab, 6)))
            .collect();
        let fd = central_diff(&p, |q| q.mean_perplexity(&batch).unwrap());
        let (g, _) = p.sft_grad(&batch).map_err(err)?;
        worst[2] = worst[2].max(rel_err(&fd, &g));

        let tuples: Vec<PreferenceTuple> = (0..rng.random_range(1..=4))
            .map(|_| loop {
                let x = content(&mut rng, vocab, 1..=3);
                if let Ok(t) = PreferenceTuple::new(x, response(&mut rng, vocab, 6), response(&mut rng, vocab, 6)) {
                    break t;
                }
            })
            .collect();
        let m = RewardModel::new(p.clone());
        let fd = central_diff(&p, |q| bt_loss_grad(&RewardModel::new(q.clone()), &tuples).unwrap().0);
        let (_, g) = bt_loss_grad(&m, &tuples).map_err(err)?;
        worst[3] = worst[3].max(rel_err(&fd, &g));
    }

    // Exact l3m gradient against the surrogate objective. Central differences are only
    // second-order accurate away from the barrier switch point, so instances with a
    // constraint value within reach of -s are redrawn.
    let mut l3m_cases = 0;
    while l3m_cases < N {
        let e = enumerable(&mut rng);
        let s = e.mu * e.mu;
        let near_switch = e.constraints.iter().any(|c| {
            let v = exact_constraint_value(c, &e.policy, &e.prompts, e.max_len).unwrap();
            (v + s).abs() < 1e-3
        });
        if near_switch {
            continue;
        }
        l3m_cases += 1;
        let fd = central_diff(&e.policy, |q| {
            surrogate_objective_exact(q, &e.constraints, e.mu, &e.task, &e.prompts, e.max_len).unwrap()
        });
        let g = l3m_grad_exact(&e.policy, &e.constraints, e.mu, &e.task, &e.prompts, e.max_len).map_err(err)?;
        worst[4] = worst[4].max(rel_err(&fd, &g));
    }

    let names = ["barrier_grad", "grad_log_prob", "sft_grad", "bt_train gradient", "l3m_grad (exact)"];
    let pass = worst.iter().all(|&w| w <= TOL);
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((pass, format!("max relative error over {N} configurations each: {detail}")))
}

fn score_function_identities() -> Check {
    const N: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut zero_mean, mut exact_identity, mut mc_identity) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..N {
        let e = enumerable(&mut rng);
        let (g, _) = exact_policy_gradient(&e.policy, &e.prompts, e.max_len, false, |_, _| Ok(1.0)).map_err(err)?;
        zero_mean = zero_mean.max(g.iter().fold(0.0, |a, v| a.max(v.abs())));

        // Exact: task gradient plus (mu/k) sum_i dC_i / max(-C_i, mu^2).
        let k = e.constraints.len() as f64;
        let (mut manual, _) = e.policy.sft_grad(&e.task).map_err(err)?;
        for c in &e.constraints {
            let (dc, _) = exact_policy_gradient(&e.policy, &e.prompts, e.max_len, false, |x, y| offset_cost(c, x, y)).map_err(err)?;
            let ci = exact_constraint_value(c, &e.policy, &e.prompts, e.max_len).map_err(err)?;
            let w = e.mu / (k * (-ci).max(e.mu * e.mu));
            for (m, d) in manual.iter_mut().zip(&dc) {
                *m += w * d;
            }
        }
        let g = l3m_grad_exact(&e.policy, &e.constraints, e.mu, &e.task, &e.prompts, e.max_len).map_err(err)?;
        exact_identity = exact_identity.max(rel_err(&manual, &g));

        // Monte Carlo: the same composition with EMA denominators and a shared sample batch.
        let estimators: Vec<ConstraintEstimator> = e
            .constraints
            .iter()
            .map(|_| {
                let mut est = ConstraintEstimator::default();
                est.ema_update(rng.random_range(-2.0..1.0)).unwrap();
                est
            })
            .collect();
        let gen = GenerationConfig::new(0.9, e.max_len, 0).map_err(err)?;
        let seed: u64 = rng.random();
        let mut r1 = ChaCha8Rng::seed_from_u64(seed);
        let g = l3m_grad(&e.policy, &e.constraints, &estimators, e.mu, &e.task, &e.prompts, 3, &gen, &mut r1).map_err(err)?;
        let mut r2 = ChaCha8Rng::seed_from_u64(seed);
        let batch = sample_batch(&e.policy, &e.prompts, 3, &gen, &mut r2).map_err(err)?;
        let (mut manual, _) = e.policy.sft_grad(&e.task).map_err(err)?;
        for (c, est) in e.constraints.iter().zip(&estimators) {
            let pg = constraint_gradient(&e.policy, c, &e.prompts, &batch, false).map_err(err)?;
            let w = e.mu / (k * (-est.value().map_err(err)?).max(e.mu * e.mu));
            for (m, d) in manual.iter_mut().zip(&pg.grad) {
                *m += w * d;
            }
        }
        mc_identity = mc_identity.max(rel_err(&manual, &g));
    }
    let pass = zero_mean <= 1e-6 && exact_identity <= 1e-6 && mc_identity <= 1e-6;
    Ok((
        pass,
        format!(
            "{N} instances: max |E[score]| {zero_mean:.1e}, exact composition rel err {exact_identity:.1e}, sampled composition rel err {mc_identity:.1e}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// Experiments

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    /// L3M run directories, for the complementary-slackness check.
    l3m_runs: Vec<PathBuf>,
    sft_checkpoint: Option<PathBuf>,
    reward_models: Vec<RewardModelSummary>,
    rm_seconds: f64,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().expect("scratch directory");
        let root = tmp.path().to_path_buf();
        fs::create_dir_all(root.join("configs")).unwrap();
        Self {
            _tmp: tmp,
            root,
            l3m_runs: Vec::new(),
            sft_checkpoint: None,
            reward_models: Vec::new(),
            rm_seconds: 0.0,
        }
    }

    fn config(&self, file: &str) -> Result<ExperimentConfig, String> {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(file);
        let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        parse_config(&text, &self.root.join("configs")).map_err(err)
    }

    fn dir(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn timed<T>(f: impl FnOnce() -> l3m::Result<T>) -> Result<(T, Duration), String> {
    let t = Instant::now();
    let v = f().map_err(err)?;
    Ok((v, t.elapsed()))
}

fn length_bands(ws: &mut Workspace) -> Check {
    let base = ws.config("length_bands.toml")?;
    let variants = base.expand_suite().map_err(err)?;
    let mut hits = [0usize; 3];
    let mut ppl_ok = true;
    let mut worst_ppl: f64 = 0.0;
    let mut slowest = Duration::ZERO;
    let mut lens = vec![Vec::new(); 3];
    for seed in SEEDS {
        for (b, v) in variants.iter().enumerate() {
            let dir = ws.dir(&format!("runs/bands/seed-{seed}/{}", v.display_name()));
            let (s, t) = timed(|| run_experiment(&v.with_seed(seed), &dir))?;
            slowest = slowest.max(t);
            ws.l3m_runs.push(dir);
            let (lo, hi) = BANDS[b];
            let len = s.eval.response_length.mean;
            lens[b].push(len);
            if len >= lo - 0.25 && len <= hi + 0.25 {
                hits[b] += 1;
            }
            let sft = s.sft.as_ref().ok_or("missing SFT reference")?.perplexity_mean;
            let rel = s.eval.perplexity_mean / sft - 1.0;
            worst_ppl = worst_ppl.max(rel);
            ppl_ok &= rel <= 0.05;
        }
    }
    let bands_ok = hits.iter().all(|&h| h >= 4);
    let time_ok = slowest < Duration::from_secs(15 * 60);
    let detail = BANDS
        .iter()
        .zip(&hits)
        .zip(&lens)
        .map(|((&(lo, hi), h), l)| {
            format!("[{lo},{hi}] {h}/5 (lengths {})", l.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" "))
        })
        .collect::<Vec<_>>()
        .join("; ");
    Ok((
        bands_ok && ppl_ok && time_ok,
        format!(
            "{detail}; worst perplexity increase over SFT {:+.2}%; slowest run {:.1}s",
            100.0 * worst_ppl,
            slowest.as_secs_f64()
        ),
    ))
}

fn weighted_sum_failure(ws: &mut Workspace) -> Check {
    let sft = ws.config("sft.toml")?;
    let wsum = ws.config("weighted_sum.toml")?;
    let band = ws.config("length_bands.toml")?.expand_suite().map_err(err)?.remove(1);
    let (lo, hi) = BANDS[1];
    let mut deltas = Vec::new();
    let mut inside = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let sft_dir = ws.dir(&format!("runs/sft-seed-{seed}"));
        let (_, t0) = timed(|| run_experiment(&sft.with_seed(seed), &sft_dir))?;
        let ckpt = sft_dir.join("policy.ckpt");
        if seed == 0 {
            ws.sft_checkpoint = Some(ckpt.clone());
        }
        let mut c = wsum.with_seed(seed);
        c.trainer.init_checkpoint = Some(ckpt.clone());
        let initial = evaluate_checkpoint(&c, &ckpt, &ws.dir(&format!("runs/ws-init-{seed}"))).map_err(err)?;
        let (s, t1) = timed(|| run_experiment(&c, &ws.dir(&format!("runs/ws-seed-{seed}"))))?;
        deltas.push(s.eval.response_length.mean - initial.response_length.mean);

        let mut c = band.with_seed(seed);
        c.trainer.init_checkpoint = Some(ckpt);
        c.eval.sft_reference = false;
        let dir = ws.dir(&format!("runs/band-from-sft-seed-{seed}"));
        let (s, t2) = timed(|| run_experiment(&c, &dir))?;
        ws.l3m_runs.push(dir);
        inside.push((initial.response_length.mean, s.eval.response_length.mean));
        slowest = slowest.max(t0 + t1 + t2);
    }
    let ws_ok = deltas.iter().all(|d| d.abs() < 0.5);
    let l3m_ok = inside.iter().all(|&(start, end)| !(lo..=hi).contains(&start) && (lo..=hi).contains(&end));
    let time_ok = slowest < Duration::from_secs(15 * 60);
    Ok((
        ws_ok && l3m_ok && time_ok,
        format!(
            "weighted-sum length change {}; l3m [{lo},{hi}] from sft {}; slowest seed {:.1}s",
            deltas.iter().map(|d| format!("{d:+.3}")).collect::<Vec<_>>().join(" "),
            inside.iter().map(|(a, b)| format!("{a:.2}->{b:.2}")).collect::<Vec<_>>().join(" "),
            slowest.as_secs_f64()
        ),
    ))
}

fn train_reward_models(ws: &mut Workspace) -> Result<(), String> {
    let ckpt = ws.sft_checkpoint.clone().ok_or("supervised checkpoint missing")?;
    let t = Instant::now();
    for ch in ["helpful", "harmless"] {
        let mut cfg = ws.config(&format!("reward_{ch}.toml"))?;
        cfg.reward_model.as_mut().unwrap().init_checkpoint = Some(ckpt.clone());
        ws.reward_models.push(train_reward_model(&cfg, &ws.dir("runs/rm")).map_err(err)?);
    }
    ws.rm_seconds = t.elapsed().as_secs_f64();
    Ok(())
}

fn hh_comparison(ws: &mut Workspace) -> Check {
    if ws.reward_models.is_empty() {
        train_reward_models(ws)?;
    }
    let ckpt = ws.sft_checkpoint.clone().ok_or("supervised checkpoint missing")?;
    let mut l3m = ws.config("hh_l3m.toml")?;
    let mut mm = ws.config("hh_mm.toml")?;
    let sft = evaluate_checkpoint(&l3m, &ckpt, &ws.dir("runs/hh-sft")).map_err(err)?;
    let mut thresholds = Vec::new();
    for (i, c) in l3m.constraints.iter_mut().enumerate() {
        let m = sft.reward(&c.reward).ok_or("missing reward")?.summary.mean;
        c.threshold = m + HH_OFFSETS[i];
        mm.constraints[i].threshold = c.threshold;
        thresholds.push(c.threshold);
    }
    let satisfied = |s: &RunSummary| s.eval.constraints.iter().all(|c| c.margin >= -0.02);
    let mut ok = [0usize; 2];
    let mut diffs = Vec::new();
    let mut notes = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let dir = ws.dir(&format!("runs/hh-l3m-seed-{seed}"));
        let (a, ta) = timed(|| run_experiment(&l3m.with_seed(seed), &dir))?;
        ws.l3m_runs.push(dir);
        let (b, tb) = timed(|| run_experiment(&mm.with_seed(seed), &ws.dir(&format!("runs/hh-mm-seed-{seed}"))))?;
        slowest = slowest.max(ta + tb);
        ok[0] += satisfied(&a) as usize;
        ok[1] += satisfied(&b) as usize;
        diffs.push(a.eval.perplexity_mean - b.eval.perplexity_mean);
        let m = |s: &RunSummary| s.eval.constraints.iter().map(|c| format!("{:+.3}", c.margin)).collect::<Vec<_>>().join("/");
        notes.push(format!("{:.4}/{:.4} ({} vs {})", a.eval.perplexity_mean, b.eval.perplexity_mean, m(&a), m(&b)));
    }
    let mut sorted = diffs.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let pass = ok[0] >= 4 && ok[1] >= 4 && median <= 0.0 && slowest < Duration::from_secs(30 * 60);
    Ok((
        pass,
        format!(
            "thresholds {:.4}/{:.4}; satisfied l3m {}/5 mm {}/5; median ppl(l3m) - ppl(mm) {median:+.5}; per seed ppl l3m/mm (margins): {}; slowest pair {:.1}s",
            thresholds[0],
            thresholds[1],
            ok[0],
            ok[1],
            notes.join(", "),
            slowest.as_secs_f64()
        ),
    ))
}

fn complementary_slackness(ws: &Workspace) -> Check {
    let (mut inactive, mut active, mut between) = (0usize, 0usize, 0usize);
    let mut pass = !ws.l3m_runs.is_empty();
    let mut problems = Vec::new();
    for dir in &ws.l3m_runs {
        let run = TrainRun::read(&dir.join("train_run.jsonl")).map_err(err)?;
        let last = run.records.last().ok_or("empty run")?;
        let mu = last.mu.ok_or("missing mu")?;
        let k = last.constraint_ema.len() as f64;
        for (&c, &lambda) in last.constraint_ema.iter().zip(&last.multipliers) {
            if -c >= 0.1 {
                inactive += 1;
                let ok = lambda <= 10.0 * mu / (k * 0.1) && lambda <= mu / (k * c.abs()) * (1.0 + 1e-6);
                if !ok {
                    problems.push(format!("{}: C {c:.3e} multiplier {lambda:.3e}", dir.display()));
                }
                pass &= ok;
            } else if c.abs() <= mu * mu {
                active += 1;
                let target = 1.0 / (k * mu);
                let ok = ((lambda - target) / target).abs() <= 1e-6;
                if !ok {
                    problems.push(format!("{}: active multiplier {lambda:.6e} vs {target:.6e}", dir.display()));
                }
                pass &= ok;
            } else {
                between += 1;
            }
        }
    }
    Ok((
        pass,
        format!(
            "{} l3m runs: {inactive} constraints with margin >= 0.1, {active} within mu_floor^2 of the boundary, {between} in between{}",
            ws.l3m_runs.len(),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    ))
}

fn reward_model_quality(ws: &mut Workspace) -> Check {
    if ws.reward_models.is_empty() {
        train_reward_models(ws)?;
    }
    let mut rewards = Vec::new();
    let mut responses: Vec<(Vec<Token>, Vec<Token>)> = Vec::new();
    for ch in ["helpful", "harmless"] {
        let cfg = ws.config(&format!("reward_{ch}.toml"))?;
        let rm = cfg.reward_model.as_ref().unwrap();
        let data = generate_preference_data(cfg.preferences.as_ref().unwrap(), rm.channel, rm.data_seed).map_err(err)?;
        for t in &data[data.len() - rm.held_out..] {
            responses.push((t.x.clone(), t.y_plus.clone()));
            responses.push((t.x.clone(), t.y_minus.clone()));
        }
    }
    for s in &ws.reward_models {
        let (_, model) = RewardModel::from_checkpoint(l3m::Checkpoint::load(&s.checkpoint).map_err(err)?).map_err(err)?;
        let r = RewardFn::learned(&s.name, model);
        rewards.push(responses.iter().map(|(x, y)| r.reward(x, y)).collect::<l3m::Result<Vec<f64>>>().map_err(err)?);
    }
    let corr = pearson(&rewards[0], &rewards[1]).ok_or("degenerate rewards")?;
    let acc: Vec<f64> = ws.reward_models.iter().map(|s| s.held_out_accuracy).collect();
    let pass = acc.iter().all(|&a| a >= 0.95) && corr <= -0.5 && ws.rm_seconds < 600.0;
    Ok((
        pass,
        format!(
            "held-out accuracy {}; correlation {corr:.3} over {} held-out responses (mean rewards {:.3}/{:.3}); training {:.1}s",
            ws.reward_models.iter().map(|s| format!("{} {:.3}", s.name, s.held_out_accuracy)).collect::<Vec<_>>().join(", "),
            responses.len(),
            mean(&rewards[0]),
            mean(&rewards[1]),
            ws.rm_seconds
        ),
    ))
}

fn determinism(ws: &Workspace) -> Check {
    let ckpt = ws.sft_checkpoint.clone().ok_or("supervised checkpoint missing")?;
    let mut configs = vec![ws.config("sft.toml")?];
    configs.push(ws.config("length_bands.toml")?.expand_suite().map_err(err)?.remove(0));
    let mut c = ws.config("weighted_sum.toml")?;
    c.trainer.init_checkpoint = Some(ckpt.clone());
    configs.push(c);
    // Learned rewards resolve against runs/rm in the scratch layout.
    configs.push(ws.config("hh_l3m.toml")?);
    configs.push(ws.config("hh_mm.toml")?);
    let files = ["train_run.jsonl", "eval_report.json", "summary.json", "policy.ckpt", "lengths.csv", "reward_scatter.csv"];
    let mut checked = Vec::new();
    for (i, mut c) in configs.into_iter().enumerate() {
        c.trainer.total_steps = 500;
        c.seed = 7;
        let a = ws.dir(&format!("runs/det-{i}-a"));
        let b = ws.dir(&format!("runs/det-{i}-b"));
        run_experiment(&c, &a).map_err(err)?;
        run_experiment(&c, &b).map_err(err)?;
        for f in files {
            let (x, y) = (fs::read(a.join(f)).map_err(err)?, fs::read(b.join(f)).map_err(err)?);
            if x != y {
                return Ok((false, format!("{} differs between identical {} runs", f, c.trainer.method.name())));
            }
        }
        // The stored checkpoint reproduces the stored report.
        evaluate_checkpoint(&c, &a.join("policy.ckpt"), &a.join("re-eval")).map_err(err)?;
        if fs::read(a.join("eval_report.json")).map_err(err)? != fs::read(a.join("re-eval/eval_report.json")).map_err(err)? {
            return Ok((false, format!("re-evaluating the {} checkpoint changed the report", c.trainer.method.name())));
        }
        checked.push(c.trainer.method.name());
    }
    Ok((true, format!("bit-identical artifacts and re-evaluation for {}", checked.join(", "))))
}

fn main() {
    let mut report = Report { failed: Vec::new() };
    report.run(1, "barrier convergence", barrier_convergence);
    report.run(2, "gradient oracles", gradient_oracles);
    report.run(3, "score-function zero mean and barrier-gradient identity", score_function_identities);
    let mut ws = Workspace::new();
    report.run(4, "length-constrained reproduction", || length_bands(&mut ws));
    report.run(5, "anti-correlated weighted-sum failure", || weighted_sum_failure(&mut ws));
    report.run(6, "l3m vs mm with learned rewards", || hh_comparison(&mut ws));
    report.run(7, "complementary slackness", || complementary_slackness(&ws));
    report.run(8, "reward model quality", || reward_model_quality(&mut ws));
    report.run(9, "determinism", || determinism(&ws));
    if report.failed.is_empty() {
        println!("acceptance: all 9 criteria passed");
    } else {
        println!("acceptance: {} of 9 criteria failed: {:?}", report.failed.len(), report.failed);
        std::process::exit(1);
    }
}
