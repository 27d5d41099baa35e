//! Acceptance suite: one line per criterion. Runs as a plain binary so the
//! lines show up in `cargo test` output; exits non-zero if a gated criterion
//! fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{ansatz_records, cluster, small_config};
use molekit::cli::layered_config;
use molekit::data::{generate_dataset, interleave_tasks, pack_batches, GenConfig, SamplingPlan, TaskOracle, BUNDLED_TASKS};
use molekit::graph::build_graph;
use molekit::mole::{merge_model, MoleLayer, RouterOutput};
use molekit::potential::{DirectForces, ForwardOptions, PotentialModel};
use molekit::reference::{combine_sigmas, fit_linear_reference, hof_reference, ReferenceScheme};
use molekit::scaling::*;
use molekit::sim::*;
use molekit::systems::{AtomicSystem, ElementTable};
use molekit::tape::Tape;
use molekit::train::*;
use molekit::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    /// Recorded outcomes are reported but never fail the run.
    gated: bool,
    detail: String,
}

fn gate(pass: bool, detail: String) -> Outcome {
    Outcome { pass, gated: true, detail }
}

fn record(pass: bool, detail: String) -> Outcome {
    Outcome { pass, gated: false, detail }
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs")).join(name)
}

fn train_config(name: &str, stage: Stage) -> TrainConfig {
    layered_config(&TrainConfig::for_stage(stage), Some(&config_path(name))).unwrap()
}

fn gen_config(seed: u64) -> GenConfig {
    let base: GenConfig = layered_config(&GenConfig::default(), Some(&config_path("data.toml"))).unwrap();
    GenConfig { seed, ..base }
}

fn dataset(task: &str, seed: u64) -> Vec<AtomicSystem> {
    generate_dataset(&TaskOracle::bundled(task).unwrap(), &gen_config(seed)).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

// 1 ------------------------------------------------------------------------

fn merge_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_layer = 0.0f64;
    for _ in 0..1000 {
        let (k, out, inp) = (rng.random_range(1..=8), rng.random_range(1..=24), rng.random_range(1..=24));
        let experts = (0..k).map(|_| (0..out * inp).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let bias = Some((0..out).map(|_| rng.random_range(-1.0..1.0)).collect());
        let layer = MoleLayer::new(out, inp, experts, bias).unwrap();
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
        let s: f64 = logits.iter().sum();
        let mut a: Vec<f64> = logits.iter().map(|l| l / s).collect();
        a[0] = 1.0 - a[1..].iter().sum::<f64>();
        let alpha = RouterOutput::new(a).unwrap();
        let x: Vec<f64> = (0..inp).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mixed = layer.apply_mixture(&alpha, &x).unwrap();
        let merged = layer.merge(&alpha).unwrap().apply(&x).unwrap();
        let scale = mixed.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        for (m, d) in mixed.iter().zip(&merged) {
            worst_layer = worst_layer.max((m - d).abs() / scale);
        }
    }
    let mut worst_model = 0.0f64;
    for seed in 0..10 {
        let model = PotentialModel::new(small_config(2 + seed as usize % 7), seed).unwrap();
        let sys = cluster(BUNDLED_TASKS[seed as usize % 3], 6 + seed as usize, seed);
        let g = build_graph(&sys, model.config.cutoff, None).unwrap();
        let mixture = model.forward_energy_expert_sum(&sys, &g).unwrap();
        let merged = merge_model(&model, &sys.header()).unwrap();
        let e = merged.model().forward_energy(&sys, &g).unwrap().energy;
        worst_model = worst_model.max(rel(e, mixture));
    }
    let t = start.elapsed();
    gate(
        worst_layer <= 1e-12 && worst_model <= 1e-10 && t < Duration::from_secs(60),
        format!("layer max rel {worst_layer:.2e}, model max rel {worst_model:.2e}, {:.1}s", t.as_secs_f64()),
    )
}

// 2 ------------------------------------------------------------------------

fn conservative_forces() -> Outcome {
    let h = 1e-4;
    let (mut worst, mut worst_net) = (0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let model = PotentialModel::new(small_config(1 + seed as usize % 4), 100 + seed).unwrap();
        let n = 8 + (seed as usize % 9);
        let sys = cluster(BUNDLED_TASKS[seed as usize % 3], n, 200 + seed);
        let g = build_graph(&sys, model.config.cutoff, None).unwrap();
        let f = model.energy_and_forces(&sys, &g).unwrap().1;
        let total: f64 = f.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).sum();
        let net = (0..3).map(|k| f.iter().map(|v| v[k]).sum::<f64>().powi(2)).sum::<f64>().sqrt();
        worst_net = worst_net.max(net / total.max(f64::MIN_POSITIVE));
        for i in 0..n {
            for c in 0..3 {
                let energy_at = |d: f64| {
                    let mut p = sys.clone();
                    p.positions[i][c] += d;
                    let mut gp = g.clone();
                    gp.update_vectors(&p);
                    model.forward_energy(&p, &gp).unwrap().energy
                };
                let fd = -(energy_at(h) - energy_at(-h)) / (2.0 * h);
                // Components below 1e-3 are compared absolutely.
                worst = worst.max((fd - f[i][c]).abs() / f[i][c].abs().max(1e-3));
            }
        }
    }
    gate(worst <= 1e-4 && worst_net <= 1e-9, format!("max elementwise rel {worst:.2e}, max net/total {worst_net:.2e}"))
}

// 3 ------------------------------------------------------------------------

fn routing_invariance() -> Outcome {
    let model = PotentialModel::new(small_config(8), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let alpha_of = |sys: &AtomicSystem| {
        let g = build_graph(sys, model.config.cutoff, None).unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, sys, &g, ForwardOptions::default()).unwrap();
        tape.value(fwd.alpha.expect("router")).data.clone()
    };
    let (mut checked, mut differ) = (0, 0);
    for s in 0..10u64 {
        let sys = cluster(BUNDLED_TASKS[s as usize % 3], 4 + s as usize, s);
        let base = alpha_of(&sys);
        let routed = model.route(&sys.header()).unwrap().alpha().to_vec();
        for _ in 0..100 {
            let mut p = sys.clone();
            p.positions.iter_mut().flatten().for_each(|x| *x += rng.random_range(-0.05..0.05));
            let a = alpha_of(&p);
            checked += 1;
            if a.iter().zip(&base).any(|(x, y)| x.to_bits() != y.to_bits()) || a.iter().zip(&routed).any(|(x, y)| x.to_bits() != y.to_bits()) {
                differ += 1;
            }
        }
    }
    gate(differ == 0, format!("{checked} perturbations, {differ} with differing bits"))
}

// Trained single-task models, shared by criteria 4 and 9.

struct Trained {
    direct: PotentialModel,
    conservative: PotentialModel,
    scheme: ReferenceScheme,
    seconds: f64,
}

fn train_two_stage(train: &[AtomicSystem], direct_cfg: &str, conservative_cfg: &str) -> Trained {
    let start = Instant::now();
    let scheme = ReferenceScheme::fit(train, &ElementTable::bundled()).unwrap();
    let c1 = train_config(direct_cfg, Stage::Direct);
    let mut s1 = TrainState::new(PotentialModel::new(c1.model.clone(), c1.seed).unwrap(), Stage::Direct, c1.seed);
    train_stage(&mut s1, train, &scheme, &c1, &mut Vec::new()).unwrap();
    let mut s2 = s1.begin_conservative().unwrap();
    let c2 = TrainConfig { model: s2.model.config.clone(), ..train_config(conservative_cfg, Stage::Conservative) };
    train_stage(&mut s2, train, &scheme, &c2, &mut Vec::new()).unwrap();
    Trained { direct: s1.model, conservative: s2.model, scheme, seconds: start.elapsed().as_secs_f64() }
}

fn single_task(task: &str) -> &'static Trained {
    static CACHE: OnceLock<BTreeMap<&'static str, Trained>> = OnceLock::new();
    &CACHE.get_or_init(|| {
        BUNDLED_TASKS.iter().map(|&t| (t, train_two_stage(&dataset(t, 1), "single-direct.toml", "single-conservative.toml"))).collect()
    })[task]
}

// 4 ------------------------------------------------------------------------

fn nve_conservation() -> Outcome {
    let m = single_task("lj-a");
    let cons = Physical { model: &m.conservative, scheme: &m.scheme };
    let direct_model = DirectForces(&m.direct);
    let direct = Physical { model: &direct_model, scheme: &m.scheme };
    let oracle = TaskOracle::bundled("lj-a").unwrap();
    let start = generate_dataset(&oracle, &GenConfig { n_systems: 1, min_atoms: 16, max_atoms: 16, seed: 99, ..gen_config(99) }).unwrap().remove(0);
    // Begin near a minimum of the learned surface so the cluster stays bound.
    let relaxed = match relax(&cons, &start, 2000, 0.05, &FireConfig::default()) {
        Ok(r) => r.system,
        Err(e) => return gate(false, format!("relaxation failed: {e}")),
    };
    let md = MdConfig { dt: 1e-3, n_steps: 1000, temperature: 0.05, seed: 4, ..Default::default() };
    let a = match run_nve(&cons, &relaxed, &md) {
        Ok(t) => t.report,
        Err(e) => return gate(false, format!("conservative run failed: {e}")),
    };
    // A direct-force trajectory that blows up counts as unbounded drift.
    let b = run_nve(&direct, &relaxed, &md).map(|t| t.report.drift).unwrap_or(f64::INFINITY);
    gate(a.drift <= 1e-4 && b >= 10.0 * a.drift, format!("conservative drift {:.2e}, direct drift {b:.2e}, ratio {:.1e}", a.drift, b / a.drift))
}

// 5 ------------------------------------------------------------------------

fn scaling_recovery() -> Outcome {
    let start = Instant::now();
    let kappa = 6.0;
    let truth = Ansatz { e: 0.0, a: 10.0, b: 5.0, alpha_hat: 0.3, beta_hat: 0.3 };
    let opts = AnsatzOptions::default();
    let clean = fit_ansatz(&ansatz_records(&truth, 1e14, 5, kappa, 0.0, 0), &opts).unwrap().params;
    let clean_err = (clean.alpha_hat - 0.3).abs().max((clean.beta_hat - 0.3).abs());

    // The 10–90 bands are nominal 80% intervals, so the truth cannot sit in
    // them in 90% of trials. Gate on the estimate lying in its own band, and
    // on per-exponent truth coverage within two binomial SDs of 80%.
    let trials = 50;
    let (mut inside, mut covers) = (0, [0usize; 2]);
    for t in 0..trials {
        let rs = ansatz_records(&truth, 1e14, 5, kappa, 0.05, 1000 + t);
        let Ok(fit) = fit_ansatz(&rs, &opts) else { continue };
        let est = [fit.params.alpha_hat, fit.params.beta_hat];
        let Ok(bands) = bootstrap(&rs, 200, t, Resample::Pooled, |s| {
            let p = fit_ansatz(s, &opts)?.params;
            Ok(vec![p.alpha_hat, p.beta_hat])
        }) else {
            continue;
        };
        if (0..2).all(|i| bands.contains(i, est[i])) {
            inside += 1;
        }
        for (i, c) in covers.iter_mut().enumerate() {
            *c += usize::from(bands.contains(i, 0.3));
        }
    }
    let min_cover = (0.8 - 2.0 * (0.8f64 * 0.2 / trials as f64).sqrt()) * trials as f64;

    let mapping_ok = map_exponents(0.3, 0.3) == (0.5, 0.5) && (map_exponents(0.29, 0.4536).0 - 0.4536 / 0.7436).abs() <= 1e-15;
    let minima: Vec<(f64, f64)> = (0..8)
        .map(|i| {
            let c = 10f64.powf(16.0 + 0.5 * i as f64);
            (c, 10f64.powf(0.61 * c.log10() - 4.5))
        })
        .collect();
    let table = fit_power_laws(&minima, kappa).unwrap();
    let t = start.elapsed();
    gate(
        clean_err <= 1e-4 && inside * 10 >= trials * 9 && covers.iter().all(|&c| c as f64 >= min_cover) && mapping_ok && (table.alpha - 0.61).abs() <= 1e-9 && t < Duration::from_secs(300),
        format!(
            "noise-free err {clean_err:.1e}; estimates in band {inside}/{trials}; truth in band alpha_hat {}/{trials}, beta_hat {}/{trials} (need {min_cover:.1}); mapping {}; reference minima give alpha {:.4}; {:.0}s",
            covers[0],
            covers[1],
            if mapping_ok { "ok" } else { "broken" },
            table.alpha,
            t.as_secs_f64()
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn lattice(n: usize, a: f64) -> AtomicSystem {
    let pos = (0..n * n * n).map(|i| [(i / (n * n)) as f64 * a, ((i / n) % n) as f64 * a, (i % n) as f64 * a]).collect();
    let mut s = AtomicSystem::molecule(pos, vec![1; n * n * n], "lj-a");
    let l = n as f64 * a;
    s.cell = Some([[l, 0.0, 0.0], [0.0, l, 0.0], [0.0, 0.0, l]]);
    s.pbc = [true; 3];
    s
}

fn flop_model() -> Outcome {
    let m = PotentialModel::new(ModelConfig { direct_head: false, ..Default::default() }, 2).unwrap();
    let mut worst = 0.0f64;
    for (seed, n) in [(0u64, 32usize), (1, 48), (2, 64)] {
        let s = cluster("lj-a", n, 300 + seed);
        let r = m.count_flops(&s, &build_graph(&s, m.config.cutoff, None).unwrap()).unwrap();
        worst = worst.max(rel(r.kappa, r.kappa_analytic));
    }
    let ks: Vec<f64> = [4, 5]
        .iter()
        .map(|&n| {
            let s = lattice(n, 1.4);
            m.count_flops(&s, &build_graph(&s, m.config.cutoff, None).unwrap()).unwrap().kappa
        })
        .collect();
    let spread = rel(ks[0], ks[1]);
    gate(worst <= 0.05 && spread <= 0.01, format!("instrumented vs analytic max rel {worst:.3}; equal-density kappa spread {spread:.4}"))
}

// 7 ------------------------------------------------------------------------

fn batching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut bad, mut min_util) = (0, f64::INFINITY);
    for case in 0..1000u64 {
        let max = rng.random_range(32..=256);
        let sizes: Vec<usize> = (0..rng.random_range(1..400)).map(|_| rng.random_range(1..=max / 4)).collect();
        let batches = pack_batches(&sizes, max, case).unwrap();
        let mut seen = vec![0; sizes.len()];
        for b in &batches {
            b.indices.iter().for_each(|&i| seen[i] += 1);
            if b.indices.iter().map(|&i| sizes[i]).sum::<usize>() > max {
                bad += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            bad += 1;
        }
        let total: usize = sizes.iter().sum();
        // Utilization is meaningful once there are several batches' worth of atoms.
        if total >= 10 * max {
            min_util = min_util.min(total as f64 / (batches.len() * max) as f64);
        }
    }
    let mut worst_freq = 0.0f64;
    for case in 0..100u64 {
        let ratios: Vec<u32> = (0..rng.random_range(1..5)).map(|_| rng.random_range(1..6)).collect();
        let plan = SamplingPlan::new(ratios.iter().enumerate().map(|(i, r)| (format!("t{i}"), *r)).collect()).unwrap();
        let data: BTreeMap<String, usize> = (0..ratios.len()).map(|i| (format!("t{i}"), rng.random_range(1..50))).collect();
        let window = 10 * plan.total() as usize;
        let stream = interleave_tasks(&data, &plan, 5 * window, case).unwrap();
        for chunk in stream.chunks(window) {
            for (task, r) in &plan.ratios {
                let want = *r as f64 / plan.total() as f64;
                let got = chunk.iter().filter(|(t, _)| t == task).count() as f64 / chunk.len() as f64;
                worst_freq = worst_freq.max((got - want).abs() / want);
            }
        }
    }
    gate(
        bad == 0 && min_util >= 0.9 && worst_freq <= 0.1,
        format!("coverage/overflow violations {bad}, min utilization {min_util:.3}, worst relative frequency error {worst_freq:.3}"),
    )
}

// 8 ------------------------------------------------------------------------

fn referencing() -> Outcome {
    let table = ElementTable::bundled();
    let mut hof_exact = true;
    for (z, entry) in &table.entries {
        for (task, iso) in &entry.isolated {
            let atom = AtomicSystem::molecule(vec![[0.0; 3]], vec![*z], task);
            hof_exact &= hof_reference(*iso, &atom, &table).unwrap() == entry.hof;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let truth: BTreeMap<u8, f64> = [(1, -1.25), (3, 0.5), (6, -3.0), (8, 2.125)].into();
    let kinds: Vec<u8> = truth.keys().copied().collect();
    let systems: Vec<Vec<u8>> = (0..60).map(|_| (0..rng.random_range(2..14)).map(|_| kinds[rng.random_range(0..kinds.len())]).collect()).collect();
    let samples: Vec<(&[u8], f64)> = systems.iter().map(|s| (s.as_slice(), s.iter().map(|z| truth[z]).sum())).collect();
    let fit = fit_linear_reference(&samples, "lj-a").unwrap();
    let linear_err = truth.iter().map(|(z, c)| (fit[z] - c).abs()).fold(0.0, f64::max);

    let mut rdr = csv::Reader::from_path(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/force_rms.csv")).unwrap();
    let parts: Vec<(f64, f64)> = rdr.records().map(|r| r.unwrap()).map(|r| (r[2].parse().unwrap(), r[1].parse().unwrap())).collect();
    let sigma = combine_sigmas(&parts);
    // Hand-computed size-weighted mean of the fixture column.
    let expected = 1.1039551982086777;
    gate(
        hof_exact && linear_err <= 1e-8 && (sigma - expected).abs() <= 1e-12,
        format!("hof identity {}, linear max err {linear_err:.1e}, combined sigma {sigma:.12}", if hof_exact { "exact" } else { "inexact" }),
    )
}

// 9 ------------------------------------------------------------------------

fn training_single() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for task in BUNDLED_TASKS {
        let m = single_task(task);
        let val = dataset(task, 2);
        let metrics = &evaluate(&m.conservative, &val, &m.scheme, false).unwrap()[task];
        let frac = metrics.force_mae / metrics.force_rms;
        pass &= frac <= 0.10 && m.seconds <= 300.0;
        parts.push(format!("{task} force MAE {:.2}% of RMS in {:.0}s", 100.0 * frac, m.seconds));
    }
    gate(pass, parts.join("; "))
}

fn multitask_report() -> &'static (MultitaskReport, String) {
    static REPORT: OnceLock<(MultitaskReport, String)> = OnceLock::new();
    REPORT.get_or_init(|| {
        let train: Vec<AtomicSystem> = BUNDLED_TASKS.iter().flat_map(|t| dataset(t, 1)).collect();
        let val: Vec<AtomicSystem> = BUNDLED_TASKS.iter().flat_map(|t| dataset(t, 2)).collect();
        // Per-task validation loss: conservative force MAE in physical units.
        let losses = |m: &PotentialModel, scheme: &ReferenceScheme, systems: &[AtomicSystem]| -> BTreeMap<String, f64> {
            evaluate(m, systems, scheme, false).unwrap().into_iter().map(|(t, x)| (t, x.force_mae)).collect()
        };
        let baselines: BTreeMap<String, VariantResult> = BUNDLED_TASKS
            .iter()
            .map(|&t| {
                let m = single_task(t);
                let v = VariantResult { name: format!("single-{t}"), active_params: m.conservative.census().active_params, losses: losses(&m.conservative, &m.scheme, &dataset(t, 2)) };
                (t.to_string(), v)
            })
            .collect();
        let mut variants = Vec::new();
        let mut timing = Vec::new();
        for (name, cfg) in [("multi-mole", "multi-mole.toml"), ("multi-dense", "multi-dense.toml")] {
            let m = train_two_stage(&train, cfg, "multi-conservative.toml");
            timing.push(format!("{name} {:.0}s", m.seconds));
            variants.push(VariantResult { name: name.into(), active_params: m.conservative.census().active_params, losses: losses(&m.conservative, &m.scheme, &val) });
        }
        let report = compare_multitask(&baselines, &variants).unwrap();
        let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("multitask_report.txt");
        report.write(&path).unwrap();
        print!("{}", report.to_table());
        (report, timing.join(", "))
    })
}

fn training_mole_vs_single() -> Outcome {
    let (r, timing) = multitask_report();
    let vals: Vec<String> = r.tasks.iter().map(|t| format!("{t} {:.3}", r.get("multi-mole", t).unwrap())).collect();
    let pass = r.tasks.iter().all(|t| r.get("multi-mole", t).unwrap() <= 1.2);
    record(pass, format!("MoLE / single-task loss: {} ({timing})", vals.join(", ")))
}

fn training_dense_vs_mole() -> Outcome {
    let (r, _) = multitask_report();
    let worse = r.tasks.iter().filter(|t| r.get("multi-dense", t).unwrap() >= r.get("multi-mole", t).unwrap()).count();
    let vals: Vec<String> = r.tasks.iter().map(|t| format!("{t} {:.3}", r.get("multi-dense", t).unwrap())).collect();
    record(worse >= 2, format!("dense / single-task loss: {}; dense >= MoLE on {worse}/3 tasks", vals.join(", ")))
}

// 10 -----------------------------------------------------------------------

fn inference_parity() -> Outcome {
    let base = ModelConfig { channels: 32, blocks: 2, ffn_hidden: 64, direct_head: false, ..Default::default() };
    let mole = PotentialModel::new(ModelConfig { experts: 8, ..base.clone() }, 0).unwrap();
    let dense = PotentialModel::new(ModelConfig { experts: 1, ..base }, 0).unwrap();
    let models = [BenchModel { name: "mole-merged", model: &mole, merge: true }, BenchModel { name: "dense", model: &dense, merge: false }];
    let cfg = BenchConfig { sizes: vec![16, 32, 64], repeats: 15, min_sample_secs: 0.05, ..Default::default() };
    let table = bench_inference(&models, &cfg).unwrap();
    let ratios: Vec<f64> = table.ratio("mole-merged", "dense").into_iter().map(|r| r.unwrap_or(f64::NAN)).collect();
    let pass = ratios.iter().all(|r| (0.85..=1.15).contains(r));
    gate(pass, format!("merged/dense throughput at n={:?}: {}", cfg.sizes, ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")))
}

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 12] = [
        ("1", "merge equivalence", merge_equivalence),
        ("2", "conservative-force correctness", conservative_forces),
        ("3", "routing position-invariance", routing_invariance),
        ("4", "NVE conservation", nve_conservation),
        ("5", "scaling-law recovery", scaling_recovery),
        ("6", "FLOP model", flop_model),
        ("7", "batching", batching),
        ("8", "referencing", referencing),
        ("9a", "single-task training", training_single),
        ("9b", "multi-task MoLE vs single-task", training_mole_vs_single),
        ("9c", "multi-task dense vs MoLE", training_dense_vs_mole),
        ("10", "inference parity", inference_parity),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| id.starts_with(w.as_str())) {
            continue;
        }
        let o = run();
        let status = match (o.pass, o.gated) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "MISS",
        };
        let kind = if o.gated { "" } else { " (recorded)" };
        println!("criterion {id:<3} {status} {name}{kind}: {}", o.detail);
        if !o.pass && o.gated {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
