//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured values, then asserts.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ibpcl_cli::checkpoint::{Checkpoint, RunState};
use ibpcl_cli::config::{ExperimentConfig, StreamSpec};
use ibpcl_cli::pgm::Raster;
use ibpcl_cli::{resume, run_in};
use ibpcl_core::autodiff::Graph;
use ibpcl_core::cl::{ClState, CoresetMethod, Mode, ResultMatrix};
use ibpcl_core::dist::{self, GaussianParams, KumaraswamyParams};
use ibpcl_core::gradcheck;
use ibpcl_core::ibp::{self, IbpLayer, LayerInit};
use ibpcl_core::net::SupervisedModel;
use ibpcl_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn verdict(n: u32, ok: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
}

fn quiet() -> impl FnMut(usize, &[f64]) {
    |_, _| {}
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- oracles

/// Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

fn integrate(rule: &[(f64, f64)], lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (h, c) = ((hi - lo) / 2.0, (hi + lo) / 2.0);
    rule.iter().map(|&(x, w)| w * f(c + h * x)).sum::<f64>() * h
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let t = x + 7.5;
    let s: f64 = C[0] + (1..9).map(|i| C[i] / (x + i as f64)).sum::<f64>();
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

fn graph_gaussian_kl(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let mut g = Graph::new();
    let q = GaussianParams::new(Tensor::scalar(mq), sq).bind(&mut g);
    let kl = dist::gaussian_kl(&mut g, q, &Tensor::scalar(mp), &Tensor::scalar(sp * sp)).unwrap();
    g.value(kl).item()
}

fn graph_kuma_kl(a: f64, b: f64, alpha: f64, beta: f64) -> f64 {
    let mut g = Graph::new();
    let q = KumaraswamyParams::new(1, a, b).bind(&mut g);
    let kl = dist::kumaraswamy_beta_kl(&mut g, q, alpha, beta).unwrap();
    g.value(kl).item()
}

fn concrete_log_density(y: f64, logit: f64, lambda: f64) -> f64 {
    let mut g = Graph::new();
    let yv = g.constant(Tensor::scalar(y));
    let lv = g.constant(Tensor::scalar(logit));
    let d = dist::concrete_log_density(&mut g, yv, lv, lambda).unwrap();
    g.value(d).item()
}

// ------------------------------------------------------------ 1. gradients

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let prims = gradcheck::primitive_suite(1).unwrap();
    let prim = prims.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let sup = gradcheck::supervised_check(1).unwrap();
    let vae = gradcheck::vae_check(1).unwrap();
    let elapsed = start.elapsed();
    let ok = prim < 1e-4 && sup < 1e-3 && vae < 1e-3 && elapsed < Duration::from_secs(60);
    verdict(
        1,
        ok,
        &format!("primitives {prim:.2e} (<1e-4), supervised ELBO {sup:.2e}, VAE ELBO {vae:.2e} (<1e-3), {elapsed:.1?} (<60s)"),
    );
    assert!(ok);
}

// ---------------------------------------------------- 2. distribution oracles

#[test]
fn criterion_02_distribution_oracles() {
    let start = Instant::now();
    let rule = gauss_legendre(10_000);
    let mut lines = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, got: f64, want: f64, tol: f64, relative: bool| {
        let err = if relative { (got - want).abs() / want.abs() } else { (got - want).abs() };
        let pass = err <= tol;
        ok &= pass;
        lines.push(format!("{name}: {got:.6} vs {want:.6} (err {err:.2e}, tol {tol:e}) {}", if pass { "ok" } else { "MISS" }));
    };

    // Gaussian KL
    check("gauss q=p", graph_gaussian_kl(0.3, 0.7, 0.3, 0.7), 0.0, 1e-6, false);
    check("gauss mean shift", graph_gaussian_kl(1.0, 1.0, 0.0, 1.0), 0.5, 1e-6, false);
    let quad = |mq: f64, sq: f64, mp: f64, sp: f64| {
        let lq = |x: f64| -0.5 * ((x - mq) / sq).powi(2) - sq.ln();
        let lp = |x: f64| -0.5 * ((x - mp) / sp).powi(2) - sp.ln();
        let norm = (2.0 * std::f64::consts::PI).sqrt();
        integrate(&rule, mq - 14.0 * sq, mq + 14.0 * sq, |x| lq(x).exp() / norm * (lq(x) - lp(x)))
    };
    check("gauss wide q", graph_gaussian_kl(0.0, 2.0, 0.0, 1.0), quad(0.0, 2.0, 0.0, 1.0), 1e-3, false);
    check("gauss mixed", graph_gaussian_kl(-0.4, 0.3, 0.5, 1.3), quad(-0.4, 0.3, 0.5, 1.3), 1e-3, false);

    // Kumaraswamy-Beta KL, β = 1 priors
    let kuma_quad = |a: f64, b: f64, alpha: f64, beta: f64| {
        let ln_beta = ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta);
        integrate(&rule, 0.0, 1.0, |v| {
            let lq = (a * b).ln() + (a - 1.0) * v.ln() + (b - 1.0) * (1.0 - v.powf(a)).ln();
            let lp = (alpha - 1.0) * v.ln() + (beta - 1.0) * (1.0 - v).ln() - ln_beta;
            lq.exp() * (lq - lp)
        })
    };
    check("kuma(2,1)|beta(2,1)", graph_kuma_kl(2.0, 1.0, 2.0, 1.0), 0.0, 1e-6, false);
    check("kuma(3,1)|beta(2,1)", graph_kuma_kl(3.0, 1.0, 2.0, 1.0), kuma_quad(3.0, 1.0, 2.0, 1.0), 1e-3, false);
    check("kuma(2,2)|beta(5,1)", graph_kuma_kl(2.0, 2.0, 5.0, 1.0), kuma_quad(2.0, 2.0, 5.0, 1.0), 1e-3, false);

    // Concrete log density
    check("concrete at symmetry point", concrete_log_density(0.0, 0.0, 1.0), -2.0 * 2f64.ln(), 1e-6, false);
    for (logit, lambda) in [(0.0, 1.0), (1.0, 0.5), (-2.0, 2.0)] {
        let mass = integrate(&rule, -50.0, 50.0, |y| concrete_log_density(y, logit, lambda).exp());
        check(&format!("concrete mass ({logit}, {lambda})"), mass, 1.0, 1e-4, false);
    }
    let asym = (concrete_log_density(1.3, 0.7, 0.5) - concrete_log_density(-1.3, -0.7, 0.5)).abs();
    check("concrete reflection", asym, 0.0, 1e-12, false);

    // low-temperature relaxed KL against the Bernoulli KL
    let n = 100_000;
    let (q, p, lambda) = (0.8f64, 0.2f64, 0.25);
    let logit = |x: f64| (x / (1.0 - x)).ln();
    let bernoulli = q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = ibpcl_core::rng::uniform(&mut rng, 1, n);
    let mut g = Graph::new();
    let ql = g.constant(Tensor::full(&[1, n], logit(q)));
    let pl = g.constant(Tensor::full(&[1, n], logit(p)));
    let (y, _) = dist::concrete_sample(&mut g, ql, lambda, &u).unwrap();
    let kl = dist::concrete_kl_mc(&mut g, y, ql, pl, lambda).unwrap();
    let estimate = g.value(kl).item() / n as f64;
    check("relaxed KL vs Bernoulli KL", estimate, bernoulli, 0.10, true);

    let elapsed = start.elapsed();
    let in_time = elapsed < Duration::from_secs(120);
    for l in &lines {
        println!("  {l}");
    }
    verdict(2, ok && in_time, &format!("{} oracle cases, {elapsed:.1?} (<120s)", lines.len()));
    assert!(ok && in_time);
}

// ------------------------------------------------------- 3. stick breaking

#[test]
fn criterion_03_stick_breaking_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut monotone = true;
    for _ in 0..1000 {
        let nu = Tensor::row((0..20).map(|_| rng.random_range(1e-8..1.0 - 1e-8)).collect());
        let pi = ibp::stick_pis(&nu);
        monotone &= pi.data().windows(2).all(|w| w[1] <= w[0]);
    }

    let init = LayerInit::default();
    let mut mask = Tensor::full(&[3, 6], 0.0);
    for c in 0..4 {
        mask.set(c % 3, c, 1.0);
    }
    let (c, g1) = ibp::expansion_count(&mask, 3);
    let mut layer = IbpLayer::new(3, 6, &init, &mut rng);
    let before = layer.clone();
    let grown = ibp::expand(&mut layer, &mask, 3, &init, &mut rng);
    let prefix_kept = (0..3).all(|r| (0..6).all(|k| layer.weights.mean.get(r, k).to_bits() == before.weights.mean.get(r, k).to_bits()));
    let g1_ok = c == vec![0, 0, 0, 0, 1, 1] && g1 == 1 && grown == 1 && layer.truncation() == 7 && prefix_kept;

    let full = Tensor::full(&[2, 5], 1.0);
    let (c2, g2) = ibp::expansion_count(&full, 2);
    let g2_ok = c2.iter().all(|&v| v == 0) && g2 == 2;

    let mut tail = Tensor::full(&[2, 6], 0.0);
    tail.set(0, 0, 1.0);
    tail.set(1, 2, 1.0);
    let mut fixed = IbpLayer::new(2, 6, &init, &mut rng);
    let snapshot = fixed.clone();
    let added = ibp::expand(&mut fixed, &tail, 3, &init, &mut rng);
    let noop_ok = added == 0 && fixed == snapshot;

    let ok = monotone && g1_ok && g2_ok && noop_ok;
    verdict(
        3,
        ok,
        &format!("pi monotone {monotone}, G=1 trace {g1_ok}, G=2 trace {g2_ok}, fixed point {noop_ok}"),
    );
    assert!(ok);
}

// --------------------------------------------- desk-scale split benchmark

fn digits_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits")
}

fn desk_config(mode: Mode, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        mode,
        seed,
        ..ExperimentConfig::default()
    };
    if let StreamSpec::Idx {
        train_images,
        train_labels,
        test_images,
        test_labels,
        ..
    } = &mut cfg.stream
    {
        let dir = digits_dir();
        *train_images = dir.join("train-images.idx");
        *train_labels = dir.join("train-labels.idx");
        *test_images = dir.join("test-images.idx");
        *test_labels = dir.join("test-labels.idx");
    }
    cfg
}

struct SeedRun {
    dir: tempfile::TempDir,
    r: ResultMatrix,
}

impl SeedRun {
    fn final_acc(&self) -> f64 {
        self.r.final_acc().unwrap()
    }

    fn first_task_drop(&self) -> f64 {
        let last = self.r.tasks() - 1;
        self.r.get(0, 0).unwrap() - self.r.get(last, 0).unwrap()
    }

    fn checkpoint(&self, k: usize) -> Checkpoint {
        Checkpoint::load(&self.dir.path().join(format!("checkpoint-task{k}.json"))).unwrap()
    }
}

fn run_seed(cfg: ExperimentConfig) -> SeedRun {
    let dir = tempfile::tempdir().unwrap();
    let r = run_in(&cfg, dir.path(), &mut quiet()).unwrap();
    SeedRun { dir, r }
}

/// All seeds of one learner, each on its own thread.
fn run_seeds(make: impl Fn(u64) -> ExperimentConfig + Sync) -> Vec<SeedRun> {
    std::thread::scope(|s| {
        let handles: Vec<_> = SEEDS.iter().map(|&seed| {
            let cfg = make(seed);
            s.spawn(move || run_seed(cfg))
        }).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

struct Desk {
    npbcl: Vec<SeedRun>,
    naive: Vec<SeedRun>,
    elapsed: Duration,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let npbcl = run_seeds(|s| desk_config(Mode::Npbcl, s));
        let naive = run_seeds(|s| desk_config(Mode::Naive, s));
        Desk {
            npbcl,
            naive,
            elapsed: start.elapsed(),
        }
    })
}

fn per_seed(runs: &[SeedRun], f: impl Fn(&SeedRun) -> f64) -> String {
    runs.iter().map(|r| format!("{:.3}", f(r))).collect::<Vec<_>>().join(" ")
}

#[test]
fn criterion_04_desk_scale_forgetting() {
    let d = desk();
    let npbcl_final = mean(d.npbcl.iter().map(SeedRun::final_acc));
    let naive_final = mean(d.naive.iter().map(SeedRun::final_acc));
    let npbcl_drop = mean(d.npbcl.iter().map(SeedRun::first_task_drop));
    let naive_drop = mean(d.naive.iter().map(SeedRun::first_task_drop));
    let checks = [
        ("npbcl final >= 0.90", npbcl_final >= 0.90),
        ("naive >= 5 points lower", naive_final <= npbcl_final - 0.05),
        ("npbcl task-1 within 5 points", npbcl_drop.abs() <= 0.05),
        ("naive task-1 drops >= 10 points", naive_drop >= 0.10),
        ("runtime < 10 min", d.elapsed < Duration::from_secs(600)),
    ];
    println!("  npbcl final per seed: {}", per_seed(&d.npbcl, SeedRun::final_acc));
    println!("  naive final per seed: {}", per_seed(&d.naive, SeedRun::final_acc));
    for (name, pass) in checks {
        println!("  {name}: {}", if pass { "ok" } else { "MISS" });
    }
    let ok = checks.iter().all(|c| c.1);
    verdict(
        4,
        ok,
        &format!(
            "final ACC npbcl {npbcl_final:.4} naive {naive_final:.4}; task-1 drop npbcl {npbcl_drop:+.4} naive {naive_drop:+.4}; {:.1?}",
            d.elapsed
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_coreset_benefit() {
    let d = desk();
    let with = run_seeds(|s| ExperimentConfig {
        coreset_size: 10,
        coreset_method: CoresetMethod::Random,
        ..desk_config(Mode::Npbcl, s)
    });
    let base = mean(d.npbcl.iter().map(SeedRun::final_acc));
    let core = mean(with.iter().map(SeedRun::final_acc));
    let ok = core >= base - 0.005;
    println!("  with coreset per seed: {}", per_seed(&with, SeedRun::final_acc));
    verdict(5, ok, &format!("final ACC with coreset {core:.4} vs without {base:.4} (bound {:.4})", base - 0.005));
    assert!(ok);
}

#[test]
fn criterion_06_first_layer_sparsity() {
    let d = desk();
    let density = |run: &SeedRun| match &run.checkpoint(1).state {
        RunState::Supervised(s) => {
            let m = &s.masks[0].layers[0];
            m.data().iter().sum::<f64>() / m.numel() as f64
        }
        RunState::Vae(_) => unreachable!(),
    };
    let mean_density = mean(d.npbcl.iter().map(density));
    let ok = mean_density < 0.5;
    println!("  density per seed: {}", per_seed(&d.npbcl, density));
    verdict(6, ok, &format!("mean active fraction of first-layer mask after task 1: {mean_density:.4} (< 0.5)"));
    assert!(ok);
}

// ---------------------------------------------- small synthetic streams

fn blobs(mode: Mode, tasks: usize, extra: &str) -> ExperimentConfig {
    let groups: Vec<String> = (0..tasks).map(|t| format!("[{}, {}]", 2 * t, 2 * t + 1)).collect();
    ExperimentConfig::parse(&format!(
        r#"
mode = "{}"
seed = 4
epochs = 3
finetune_epochs = 2
{extra}
[stream]
source = "synthetic"
test_per_class = 20
[stream.generator]
kind = "gauss-blobs"
classes = {}
dim = 6
per_class = 80
separation = 5.0
[stream.tasks]
kind = "split"
groups = [{}]
"#,
        mode.name(),
        2 * tasks,
        groups.join(", ")
    ))
    .unwrap()
}

fn supervised(ckpt: &Checkpoint) -> &ClState<SupervisedModel> {
    match &ckpt.state {
        RunState::Supervised(s) => s,
        RunState::Vae(_) => panic!("expected a supervised run"),
    }
}

fn same_bits_prefix(a: &Tensor, b: &Tensor) -> bool {
    a.rows() <= b.rows()
        && a.cols() <= b.cols()
        && (0..a.rows()).all(|r| (0..a.cols()).all(|c| a.get(r, c).to_bits() == b.get(r, c).to_bits()))
}

#[test]
fn criterion_07_mask_immutability_and_head_isolation() {
    let cfg = blobs(Mode::Npbcl, 3, "[architecture]\nhidden = [12]\nexpansion_reserve = 2");
    let run = run_seed(cfg);
    let ckpts: Vec<Checkpoint> = (1..=3).map(|k| run.checkpoint(k)).collect();
    let mut masks_ok = true;
    let mut heads_ok = true;
    for t in 1..3 {
        let now = supervised(&ckpts[t]);
        for s in 0..t {
            let then = supervised(&ckpts[s]);
            for (a, b) in then.masks[s].layers.iter().zip(&now.masks[s].layers) {
                let pad_zero = (0..b.rows()).all(|r| (a.cols()..b.cols()).all(|c| b.get(r, c) == 0.0));
                masks_ok &= same_bits_prefix(a, b) && pad_zero;
            }
            let (h0, h1) = (&then.model.heads[s], &now.model.heads[s]);
            heads_ok &= same_bits_prefix(&h0.weights.mean, &h1.weights.mean)
                && same_bits_prefix(&h0.weights.raw_sigma, &h1.weights.raw_sigma)
                && h0.bias == h1.bias;
        }
    }
    let widths: Vec<usize> = ckpts.iter().map(|c| supervised(c).model.hidden[0].truncation()).collect();
    let ok = masks_ok && heads_ok;
    verdict(7, ok, &format!("stored masks bitwise {masks_ok}, earlier heads bitwise {heads_ok}, widths {widths:?}"));
    assert!(ok);
}

#[test]
fn criterion_08_vcl_prior_recursion() {
    let run = run_seed(blobs(Mode::Vcl, 2, "[architecture]\nhidden = [10]"));
    let mut ok = true;
    for k in 1..=2 {
        let ckpt = run.checkpoint(k);
        let s = supervised(&ckpt);
        for (layer, prior) in s.model.hidden.iter().zip(&s.priors.layers) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            ok &= bits(&prior.weights.mean) == bits(&layer.weights.mean)
                && bits(&prior.weights.var) == bits(&layer.weights.variance())
                && bits(&prior.bias.mean) == bits(&layer.bias.mean)
                && bits(&prior.bias.var) == bits(&layer.bias.variance());
            ok &= s.masks.iter().all(|m| m.layers.iter().all(|t| t.data().iter().all(|&v| v == 1.0)));
        }
    }
    verdict(8, ok, "dense masks, fixed K: stored prior equals posterior bitwise after tasks 1 and 2");
    assert!(ok);
}

#[test]
fn criterion_09_vae_stream() {
    let start = Instant::now();
    let cfg = ExperimentConfig::parse(
        r#"
mode = "npbcl"
problem = "vae"
seed = 1
epochs = 20
finetune_epochs = 20
grid_samples = 8
[stream]
source = "synthetic"
test_per_class = 100
[stream.generator]
kind = "cluster-images"
classes = 3
per_class = 600
noise = 0.1
[stream.tasks]
kind = "split"
groups = [[0], [1], [2]]
"#,
    )
    .unwrap();
    let run = run_seed(cfg);
    let just = run.r.get(0, 0).unwrap();
    let after = run.r.get(2, 0).unwrap();
    let degradation = (just - after) / just.abs();
    let mut grids_ok = true;
    for k in 1..=3usize {
        let bytes = std::fs::read(run.dir.path().join(format!("samples-task{k}.pgm")));
        grids_ok &= bytes.ok().and_then(|b| Raster::parse(&b).ok()).is_some_and(|r| r.height == 8 * k + k - 1 && r.width == 8 * 8 + 7);
    }
    let elapsed = start.elapsed();
    let ok = degradation < 0.20 && grids_ok && elapsed < Duration::from_secs(600);
    verdict(
        9,
        ok,
        &format!(
            "task-1 held-out ELBO {just:.3} -> {after:.3} after task 3 (degradation {:.1}% < 20%), grids {grids_ok}, {elapsed:.1?}",
            100.0 * degradation
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_10_metric_formulas() {
    let two = ResultMatrix::from_rows(&[vec![Some(0.9), None], vec![Some(0.8), Some(0.95)]]);
    let bwt_trace = (two.bwt().unwrap() - (-0.1)).abs() < 1e-15;
    let c = 0.83;
    let constant = ResultMatrix::from_rows(&vec![vec![Some(c); 5]; 5]);
    let constant_ok = constant.acc().unwrap() == c && constant.bwt().unwrap() == 0.0;
    let d = desk();
    let npbcl = mean(d.npbcl.iter().map(|r| r.r.bwt().unwrap()));
    let naive = mean(d.naive.iter().map(|r| r.r.bwt().unwrap()));
    let ok = bwt_trace && constant_ok && npbcl >= naive;
    verdict(
        10,
        ok,
        &format!("N=2 BWT -0.1 {bwt_trace}, constant matrix {constant_ok}, BWT npbcl {npbcl:+.4} vs naive {naive:+.4}"),
    );
    assert!(ok);
}

#[test]
fn criterion_11_determinism_and_resume() {
    let d = desk();
    let first = &d.npbcl[0];
    let again = run_seed(desk_config(Mode::Npbcl, SEEDS[0]));
    let read = |dir: &Path, f: &str| std::fs::read(dir.join(f)).unwrap();
    let same_metrics = read(first.dir.path(), "metrics.csv") == read(again.dir.path(), "metrics.csv");

    let resumed_dir = tempfile::tempdir().unwrap();
    let ckpt = resumed_dir.path().join("checkpoint-task2.json");
    std::fs::copy(first.dir.path().join("checkpoint-task2.json"), &ckpt).unwrap();
    let (_, r) = resume(&ckpt, &mut quiet()).unwrap();
    let same_r = r == first.r;
    let same_resumed_metrics = read(resumed_dir.path(), "metrics.csv") == read(first.dir.path(), "metrics.csv");
    let ok = same_metrics && same_r && same_resumed_metrics;
    verdict(
        11,
        ok,
        &format!("rerun metrics.csv identical {same_metrics}; resume after task 2: R identical {same_r}, metrics.csv identical {same_resumed_metrics}"),
    );
    assert!(ok);
}
