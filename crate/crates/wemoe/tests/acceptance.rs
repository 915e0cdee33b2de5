//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wemoe::checkpoint::{load_params, save_params, Checkpoint};
use wemoe::core::analysis::{
    clip_count_configs, count_report, first_choice_matrix, landscape_axis, loss_landscape_grid, observe_routing,
    set_loss,
};
use wemoe::core::gradcheck::entropy_gradient_error;
use wemoe::core::merge::{
    install_heads, task_arithmetic, ties_merge, ties_merged_vector, weight_average, AdaMergingModel, Granularity,
    MergeMethod,
};
use wemoe::core::model::{forward, init_params, mlp_param_names};
use wemoe::core::params::task_vector;
use wemoe::core::synth::{corrupt, derive_seed, Corruption};
use wemoe::core::tta::{entropy_loss, TTAConfig};
use wemoe::core::wemoe::{upscale, Scope, UpscaleOptions, UpscaledModel};
use wemoe::core::{Batch, ModelConfig, NamedParamSet, TaskVector, Tensor};
use wemoe::pipeline::{accuracies, individual_accuracies, mean, upscaled_accuracies, ExperimentConfig, Prepared};

const SCOPES: [Scope; 3] = [Scope::MlpOnly, Scope::AttnAndMlpSeparate, Scope::WholeBlock];
const SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, outcome: Outcome) -> Outcome {
    let took = start.elapsed();
    let detail = format!("{}; {took:.1?} (limit {limit:?})", outcome?);
    ensure(took <= limit, detail)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny(n_tasks: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        seq_len: 4,
        input_dim: 4,
        n_classes: vec![3; n_tasks],
    }
}

fn family(cfg: &ModelConfig, seed: u64) -> (NamedParamSet, Vec<NamedParamSet>) {
    let theta_0 = init_params(cfg, &mut rng(seed)).unwrap();
    let mut r = rng(seed + 1);
    let finetuned = (0..cfg.n_tasks())
        .map(|_| {
            let mut p = theta_0.clone();
            for (_, x) in p.iter_mut() {
                x.axpy(1.0, &Tensor::randn(x.shape().to_vec(), 0.08, &mut r)).unwrap();
            }
            p
        })
        .collect();
    (theta_0, finetuned)
}

fn vectors(theta_0: &NamedParamSet, finetuned: &[NamedParamSet]) -> Vec<TaskVector> {
    finetuned.iter().map(|f| task_vector(f, theta_0).unwrap()).collect()
}

fn batch(cfg: &ModelConfig, rows: usize, task: usize, seed: u64) -> Batch {
    Batch::new(
        Tensor::randn([rows, cfg.seq_len, cfg.input_dim], 1.0, &mut rng(seed)),
        None,
        task,
    )
    .unwrap()
}

fn upscaled(theta_0: &NamedParamSet, ft: &[NamedParamSet], scope: Scope, depth: usize) -> UpscaledModel {
    let opts = UpscaleOptions {
        scope,
        router_depth: depth,
        ..UpscaleOptions::default()
    };
    upscale(theta_0, ft, &tiny(ft.len()), &opts, &mut rng(99)).unwrap()
}

fn c1_counts() -> Outcome {
    let start = Instant::now();
    let rows = count_report(&clip_count_configs());
    let find = |label: &str, depth: usize| {
        rows.iter()
            .find(|r| r.label == label && r.depth == depth && r.n_tasks == 8)
            .map(|r| r.trainable)
    };
    let got = [
        find("CLIP-ViT-B/32", 0),
        find("CLIP-ViT-L/14", 0),
        find("CLIP-ViT-B/32", 2),
        find("CLIP-ViT-L/14", 2),
    ];
    let want = [Some(96), Some(192), Some(7_160_928), Some(25_387_200)];
    within(Duration::from_secs(1), start, ensure(got == want, format!("{got:?}")))
}

fn c2_init_equivalence() -> Outcome {
    let start = Instant::now();
    let cfg = tiny(3);
    let (theta_0, ft) = family(&cfg, 1);
    let ta = task_arithmetic(&theta_0, &vectors(&theta_0, &ft), 0.3).unwrap();
    let mut worst = 0.0f32;
    for scope in SCOPES {
        let mut m = upscaled(&theta_0, &ft, scope, 2);
        m.force_routers(&[0.3; 3]).unwrap();
        for i in 0..100 {
            let b = batch(&cfg, 4, i % 3, 1000 + i as u64);
            worst = worst.max(
                m.logits(&b)
                    .unwrap()
                    .max_abs_diff(&forward(&ta, &cfg, &b, None).unwrap()),
            );
        }
    }
    within(
        Duration::from_secs(10),
        start,
        ensure(
            worst <= 1e-5,
            format!("max |Δlogit| {worst:.2e} over 3 scopes × 100 batches"),
        ),
    )
}

fn c3_one_hot() -> Outcome {
    let start = Instant::now();
    let cfg = tiny(3);
    let (theta_0, ft) = family(&cfg, 2);
    let mut worst = 0.0f32;
    for scope in SCOPES {
        for (i, theta_i) in ft.iter().enumerate() {
            let mut m = upscaled(&theta_0, &ft, scope, 2);
            let mut e = [0.0; 3];
            e[i] = 1.0;
            m.force_routers(&e).unwrap();
            for (name, t) in m.static_params.iter_mut() {
                *t = theta_i.get(name).unwrap().clone();
            }
            for task in 0..3 {
                let b = batch(&cfg, 8, task, 2000 + task as u64);
                worst = worst.max(
                    m.logits(&b)
                        .unwrap()
                        .max_abs_diff(&forward(theta_i, &cfg, &b, None).unwrap()),
                );
            }
        }
    }
    within(
        Duration::from_secs(10),
        start,
        ensure(worst <= 1e-6, format!("max |Δlogit| {worst:.2e}")),
    )
}

fn single(values: &[f64]) -> TaskVector<f64> {
    let mut p = NamedParamSet::new();
    p.insert("w", Tensor::from_slice([values.len()], values).unwrap());
    TaskVector::from_params(p).unwrap()
}

fn elected_sign(vs: &[Vec<f64>], keep: f64, i: usize) -> f64 {
    let n = vs[0].len();
    let k = ((keep * n as f64).ceil() as usize).clamp(1, n);
    let mass: f64 = vs
        .iter()
        .map(|v| {
            let rank = (0..n)
                .filter(|&j| v[j].abs() > v[i].abs() || (v[j].abs() == v[i].abs() && j < i))
                .count();
            if rank < k {
                v[i]
            } else {
                0.0
            }
        })
        .sum();
    mass.signum()
}

fn c4_baseline_algebra() -> Outcome {
    let cfg = tiny(4);
    let (theta_0, ft) = family(&cfg, 3);
    let taus = vectors(&theta_0, &ft);
    let ta = task_arithmetic(&theta_0, &taus, 0.25).unwrap();
    let avg_gap = weight_average(&ft)
        .unwrap()
        .encoder()
        .max_abs_diff(&ta.encoder())
        .unwrap();

    let one = &taus[..1];
    let ties_single = ties_merge(&theta_0, one, 1.0, 0.3)
        .unwrap()
        .bit_eq(&task_arithmetic(&theta_0, one, 0.3).unwrap());

    let mut r = rng(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let n_tasks = r.random_range(2..=5);
        let keep = r.random_range(0.1..=1.0);
        let vs: Vec<Vec<f64>> = (0..n_tasks)
            .map(|_| {
                (0..10)
                    .map(|_| {
                        if r.random_bool(0.3) {
                            f64::from(r.random_range(-2i32..=2))
                        } else {
                            r.random_range(-1.0..1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let tvs: Vec<TaskVector<f64>> = vs.iter().map(|v| single(v)).collect();
        let merged = ties_merged_vector(&tvs, keep).unwrap();
        for (i, &m) in merged.get("w").unwrap().data().iter().enumerate() {
            if m != 0.0 && m.signum() != elected_sign(&vs, keep, i) {
                violations += 1;
            }
        }
    }
    ensure(
        avg_gap <= 1e-6 && ties_single && violations == 0,
        format!("avg vs TA(1/n) {avg_gap:.1e}; single-task ties ≡ TA: {ties_single}; sign violations {violations}/1000 instances"),
    )
}

fn c5_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = tiny(3);
    let (theta_0, ft) = family(&cfg, 5);
    let taus: Vec<TaskVector<f64>> = vectors(&theta_0, &ft).iter().map(|t| t.cast()).collect();
    let theta_0: NamedParamSet<f64> = theta_0.cast();
    let ft: Vec<NamedParamSet<f64>> = ft.iter().map(|p| p.cast()).collect();
    let b: Batch<f64> = batch(&cfg, 3, 1, 6).cast();
    let mut worst = 0.0f64;
    for scope in SCOPES {
        for depth in 0..=2 {
            let opts = UpscaleOptions {
                scope,
                router_depth: depth,
                init_std: 0.5,
                ..UpscaleOptions::default()
            };
            let m = upscale(&theta_0, &ft, &cfg, &opts, &mut rng(7)).unwrap();
            worst = worst.max(entropy_gradient_error(&m, &cfg, &b, 1e-6).unwrap());
        }
    }
    for g in [Granularity::Task, Granularity::Layer] {
        let m = AdaMergingModel::new(&theta_0, &taus, g, 0.3).unwrap();
        worst = worst.max(entropy_gradient_error(&m, &cfg, &b, 1e-6).unwrap());
    }
    within(
        Duration::from_secs(30),
        start,
        ensure(worst <= 1e-3, format!("max relative error {worst:.2e}")),
    )
}

struct DeskRun {
    prepared: Prepared,
    baselines: Vec<(&'static str, f64)>,
    individual: f64,
    wemoe: UpscaledModel,
    wemoe_acc: f64,
    first_choice: Vec<Vec<f64>>,
}

fn desk_run(seed: u64) -> DeskRun {
    let p = Prepared::new(ExperimentConfig::desk(seed)).unwrap();
    let cfg = p.cfg().clone();
    let mut baselines = Vec::new();
    for (label, method) in [
        ("average", MergeMethod::Average),
        ("task_arithmetic", MergeMethod::TaskArithmetic),
        ("ties", MergeMethod::Ties),
        ("adamerging_layer", MergeMethod::AdaMergingLayer),
    ] {
        baselines.push((
            label,
            mean(&accuracies(&p.merge(method).unwrap(), &cfg, &p.test).unwrap()),
        ));
    }
    let individual = mean(&individual_accuracies(&p, &p.test).unwrap());
    let (wemoe, _) = p.wemoe(&p.exp.upscale, &p.test, &p.exp.tta).unwrap();
    let wemoe_acc = mean(&upscaled_accuracies(&wemoe, &p.test).unwrap());
    let first_choice = first_choice_matrix(&observe_routing(&wemoe, &p.test, 64).unwrap());
    DeskRun {
        prepared: p,
        baselines,
        individual,
        wemoe,
        wemoe_acc,
        first_choice,
    }
}

fn c6_ordering(runs: &[DeskRun], took: Duration) -> Outcome {
    let mut passed = 0;
    let mut lines = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let best = r.baselines.iter().map(|b| b.1).fold(0.0, f64::max);
        let ok = r.wemoe_acc >= best && r.individual - r.wemoe_acc <= 0.03;
        passed += usize::from(ok);
        let base: Vec<String> = r.baselines.iter().map(|(l, a)| format!("{l} {a:.3}")).collect();
        lines.push(format!(
            "seed {seed}: wemoe {:.3} vs [{}], individual {:.3}",
            r.wemoe_acc,
            base.join(", "),
            r.individual
        ));
    }
    let detail = format!("{passed}/3 seeds; {}; {took:.0?}", lines.join("; "));
    ensure(passed >= 2 && took <= Duration::from_secs(600), detail)
}

fn set_entropy(m: &UpscaledModel, set: &Batch) -> f64 {
    let mut total = 0.0;
    for start in (0..set.len()).step_by(64) {
        let end = (start + 64).min(set.len());
        let e = entropy_loss(&m.logits(&set.slice(start, end).unwrap()).unwrap()).unwrap();
        total += f64::from(e) * (end - start) as f64;
    }
    total / set.len() as f64
}

fn c7_convergence(run: &DeskRun) -> Outcome {
    let p = &run.prepared;
    let init = p.upscaled(&p.exp.upscale).unwrap();
    let before: Vec<f64> = p.test.iter().map(|s| set_entropy(&init, s)).collect();
    let after: Vec<f64> = p.test.iter().map(|s| set_entropy(&run.wemoe, s)).collect();
    let entropy_down = before.iter().zip(&after).all(|(b, a)| a < b);

    let acc_at = |steps: usize, lr: f64| {
        let tta = TTAConfig {
            steps,
            learning_rate: lr,
            ..p.exp.tta
        };
        let (m, _) = p.wemoe(&p.exp.upscale, &p.test, &tta).unwrap();
        mean(&upscaled_accuracies(&m, &p.test).unwrap())
    };
    let initial = mean(&upscaled_accuracies(&init, &p.test).unwrap());
    let midway = acc_at(100, p.exp.tta.learning_rate);
    let last = run.wemoe_acc;
    let slow = acc_at(p.exp.tta.steps, 3e-4);
    let ok = entropy_down && last >= initial && (last - slow).abs() <= 0.01;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    ensure(
        ok,
        format!(
            "entropy [{}] -> [{}]; accuracy {initial:.3} -> {midway:.3} (100) -> {last:.3} (200); lr 1e-3 {last:.3} vs 3e-4 {slow:.3}",
            fmt(&before),
            fmt(&after)
        ),
    )
}

fn diagonal(fc: &[Vec<f64>], site: usize) -> f64 {
    fc.iter().map(|row| row[site]).sum::<f64>() / fc.len() as f64
}

fn c8_routing(runs: &[DeskRun]) -> Outcome {
    let mut passed = 0;
    let mut lines = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let last = r.wemoe.sites.len() - 1;
        let deep = diagonal(&r.first_choice, last);
        let first = diagonal(&r.first_choice, 0);
        passed += usize::from(deep >= 0.6 && deep > first);
        lines.push(format!("seed {seed}: deepest {deep:.3}, first {first:.3}"));
    }
    ensure(passed >= 2, format!("{passed}/3 seeds; {}", lines.join("; ")))
}

fn c9_landscape() -> Outcome {
    let cfg = tiny(2);
    let (theta_0, mut ft) = family(&cfg, 9);
    let mut base = theta_0.clone();
    install_heads(&mut base, &ft).unwrap();
    let taus = vectors(&theta_0, &ft);
    // fine-tuned encoders evaluated through the same heads as the grid
    for f in &mut ft {
        for (name, t) in f.iter_mut().filter(|(n, _)| n.starts_with("heads.")) {
            *t = base.get(name).unwrap().clone();
        }
    }
    let sets: Vec<Batch> = (0..2)
        .map(|t| {
            let mut b = batch(&cfg, 16, t, 90 + t as u64);
            b.labels = Some((0..16).map(|i| (i * 5 + t) % 3).collect());
            b
        })
        .collect();
    let axis = landscape_axis(11).unwrap();
    let grid = loss_landscape_grid(&base, &taus[0], &taus[1], &cfg, [&sets[0], &sets[1]], &axis).unwrap();
    let at = |v: f64| axis.iter().position(|a| *a == v).unwrap();
    let (o, l) = (at(0.0), at(1.0));
    let mut worst = 0.0f64;
    for (k, set) in sets.iter().enumerate() {
        let g = [&grid.loss_a, &grid.loss_b][k];
        let corners = [(o, o, &base), (l, o, &ft[0]), (o, l, &ft[1])];
        for (i, j, model) in corners {
            worst = worst.max((g[i][j] - set_loss(model, &cfg, set).unwrap()).abs());
        }
    }
    let mut joint = 0.0f64;
    for i in 0..axis.len() {
        for j in 0..axis.len() {
            joint = joint.max((grid.joint[i][j] - grid.loss_a[i][j] - grid.loss_b[i][j]).abs());
        }
    }
    ensure(
        worst <= 1e-6 && joint <= 1e-6,
        format!("corner gap {worst:.1e}; joint gap {joint:.1e}"),
    )
}

fn c10_partial_adamerging() -> Outcome {
    let cfg = tiny(3);
    let (theta_0, ft) = family(&cfg, 10);
    let mut m = upscaled(&theta_0, &ft, Scope::MlpOnly, 0);
    let mut ada = AdaMergingModel::with_groups(&theta_0, &vectors(&theta_0, &ft), 0.3, |name| {
        (0..cfg.n_layers)
            .find(|&l| mlp_param_names(l).iter().any(|n| n == name))
            .map(|l| format!("mlp.{l}"))
    })
    .unwrap();
    let mut r = rng(11);
    for site in &mut m.sites {
        let c = Tensor::randn([3], 0.5, &mut r);
        site.router.tensors_mut()[0] = c.clone();
        let g = ada
            .group_names()
            .iter()
            .position(|g| *g == format!("mlp.{}", site.layer))
            .unwrap();
        ada.coeffs_mut()[g] = c;
    }
    let mut worst = 0.0f32;
    for i in 0..20 {
        let b = batch(&cfg, 4, i % 3, 3000 + i as u64);
        worst = worst.max(m.logits(&b).unwrap().max_abs_diff(&ada.logits(&cfg, &b).unwrap()));
    }
    ensure(worst <= 1e-6, format!("max |Δlogit| {worst:.2e} over 20 batches"))
}

fn c11_robustness(runs: &[DeskRun]) -> Outcome {
    let mut passed = 0;
    let mut lines = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let p = &r.prepared;
        let corrupted: Vec<Batch> = p
            .test
            .iter()
            .enumerate()
            .map(|(t, s)| corrupt(s, Corruption::GaussianNoise, 3, derive_seed(*seed, "corrupt", t as u64)).unwrap())
            .collect();
        let ta = mean(&accuracies(&p.merge(MergeMethod::TaskArithmetic).unwrap(), p.cfg(), &corrupted).unwrap());
        let (m, _) = p.wemoe(&p.exp.upscale, &corrupted, &p.exp.tta).unwrap();
        let we = mean(&upscaled_accuracies(&m, &corrupted).unwrap());
        let clean = mean(&upscaled_accuracies(&r.wemoe, &corrupted).unwrap());
        passed += usize::from(we >= ta);
        lines.push(format!(
            "seed {seed}: wemoe {we:.3} vs task_arithmetic {ta:.3} (clean-adapted wemoe {clean:.3})"
        ));
    }
    ensure(passed >= 2, format!("{passed}/3 seeds; {}", lines.join("; ")))
}

const TINY_RUN: &str = "seed = 3
[model]
d_model = 8
n_layers = 2
n_heads = 2
d_ff = 16
seq_len = 4
input_dim = 4
[tasks]
count = 2
n_classes = 2
subspace = 2
n_train = 64
n_test = 32
[pretrain]
steps = 10
[finetune]
steps = 20
[tta]
steps = 6
batch_size = 8
";

fn wemoe_cli(config: &Path, out: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_wemoe"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap()
        .success()
}

fn c12_persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(2);
    let (theta_0, ft) = family(&cfg, 12);
    let path = dir.path().join("p.wemc");
    save_params(&path, &theta_0, &cfg, &[]).unwrap();
    let params_ok = load_params(&path).unwrap().0.bit_eq(&theta_0);

    let mut upscaled_ok = true;
    for scope in SCOPES {
        for depth in 0..=2 {
            let m = upscaled(&theta_0, &ft, scope, depth);
            let bytes = Checkpoint::from_upscaled(&m).unwrap().to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap().to_upscaled().unwrap();
            upscaled_ok &= back == m && Checkpoint::from_upscaled(&back).unwrap().to_bytes().unwrap() == bytes;
        }
    }

    let config = dir.path().join("run.toml");
    std::fs::write(&config, TINY_RUN).unwrap();
    let out = dir.path().join("run");
    let steps: [&[&str]; 6] = [
        &["pretrain"],
        &["finetune"],
        &["merge", "--method", "ties"],
        &["upscale"],
        &["tta"],
        &["eval"],
    ];
    let files = [
        "pretrained.wemc",
        "finetuned_1.wemc",
        "merged_ties.wemc",
        "upscaled.wemc",
        "adapted.wemc",
        "eval.csv",
    ];
    let mut idempotent = true;
    for (args, file) in steps.iter().zip(files) {
        idempotent &= wemoe_cli(&config, &out, args);
        let first = std::fs::read(out.join(file)).unwrap_or_default();
        idempotent &= wemoe_cli(&config, &out, args) && std::fs::read(out.join(file)).unwrap_or_default() == first;
    }
    ensure(
        params_ok && upscaled_ok && idempotent,
        format!("params {params_ok}; upscaled sites/routers {upscaled_ok}; pipeline idempotent {idempotent}"),
    )
}

fn report(n: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {tag}  {title}: {detail}");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "parameter counts", c1_counts);
    ok &= report(2, "init equivalence", c2_init_equivalence);
    ok &= report(3, "one-hot recovery", c3_one_hot);
    ok &= report(4, "baseline algebra", c4_baseline_algebra);
    ok &= report(5, "gradient soundness", c5_gradients);

    let start = Instant::now();
    let runs = catch_unwind(|| SEEDS.iter().map(|&s| desk_run(s)).collect::<Vec<_>>());
    let took = start.elapsed();
    match &runs {
        Ok(runs) => {
            ok &= report(6, "desk merging ordering", || c6_ordering(runs, took));
            ok &= report(7, "adaptation convergence", || c7_convergence(&runs[0]));
            ok &= report(8, "routing analysis", || c8_routing(runs));
        }
        Err(_) => {
            for (n, title) in [
                (6, "desk merging ordering"),
                (7, "adaptation convergence"),
                (8, "routing analysis"),
            ] {
                ok &= report(n, title, || Err("desk experiment failed".into()));
            }
        }
    }
    ok &= report(9, "loss landscape", c9_landscape);
    ok &= report(10, "bias-only routers are partial AdaMerging", c10_partial_adamerging);
    match &runs {
        Ok(runs) => ok &= report(11, "robustness under gaussian noise", || c11_robustness(runs)),
        Err(_) => {
            ok &= report(11, "robustness under gaussian noise", || {
                Err("desk experiment failed".into())
            })
        }
    }
    ok &= report(12, "persistence", c12_persistence);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
