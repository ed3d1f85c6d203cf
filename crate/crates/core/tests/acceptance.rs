//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any hard criterion fails. Criterion 7 and 9 share one
//! desk-scale sweep configured by `configs/desk.toml`; its CSVs and curve
//! files are kept under the cargo target tmp dir for inspection.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use flexrel_core::experiments::{
    accuracy_vs_delta, accuracy_vs_rho, emit_curves, run_sweep, CurveKind, ExperimentConfig, ResultTable, RhoPoint,
};
use flexrel_core::pruning::{magnitude_scores, UnitScore};
use flexrel_core::splitsim::{epoch_time, protocol_breakdowns};
use flexrel_core::{
    cut_payload, plan_prune, time_to_accuracy, AdamState, Checkpoint, Network, NormScope, ScoreTable, SplitModels,
    Technique, TimeToAccuracy, Workload,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn desk_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn c1_gradients() -> Outcome {
    let mut rng = rng(101);
    let mut worst = (String::new(), 0.0f64);
    for _ in 0..100 {
        let (what, err) = gradient_case(&mut rng);
        if !(err <= worst.1) {
            worst = (what, err);
        }
    }
    check(worst.1 < 1e-4, format!("100 configurations, worst relative error {:.2e} ({})", worst.1, worst.0))
}

fn c2_conv_oracle() -> Outcome {
    let mut rng = rng(102);
    let mut worst = (String::new(), 0.0f64);
    for _ in 0..50 {
        let (what, diff) = conv_case(&mut rng);
        if !(diff <= worst.1) {
            worst = (what, diff);
        }
    }
    check(worst.1 <= 1e-9, format!("50 shapes, worst |diff| {:.2e} ({})", worst.1, worst.0))
}

fn c3_conservation() -> Outcome {
    let mut rng = rng(103);
    let worst = (0..50).map(|_| conservation_case(&mut rng, 1e-6)).fold(0.0, f64::max);
    check(worst <= 1e-2, format!("50 zero-bias nets, worst relative error {worst:.2e}"))
}

fn c4_parameter_relevance() -> Outcome {
    let mut rng = rng(104);
    let (dg, dw) = dense_parameter_relevance_pair(&mut rng, 3, 2, 1e-6);
    let (cg, cw) = conv_parameter_relevance_pair(&mut rng, 1e-6);
    let (d, c) = (max_abs_diff(&dg, &dw), max_abs_diff(&cg, &cw));
    check(d <= 1e-9 && c <= 1e-9, format!("dense(3,2) max diff {d:.2e}, conv(1,1,2,2) max diff {c:.2e}"))
}

fn random_table(rng: &mut impl Rng) -> (Vec<UnitScore>, Vec<UnitScore>) {
    let mut m = Vec::new();
    let mut r = Vec::new();
    for layer in 0..rng.gen_range(1..=4) {
        let params = rng.gen_range(1..=60);
        for unit in 0..rng.gen_range(2..=12) {
            m.push(UnitScore { layer, unit, value: rng.gen_range(0.0..1.0), params });
            r.push(UnitScore { layer, unit, value: rng.gen_range(-1.0..1.0), params });
        }
    }
    (m, r)
}

fn unit_set(t: &ScoreTable, rho: f64) -> Option<BTreeSet<(usize, usize)>> {
    plan_prune(t, rho).ok().map(|p| p.units.into_iter().collect())
}

fn c5_delta_endpoints() -> Outcome {
    let mut rng = rng(105);
    let mut compared = 0;
    for _ in 0..20 {
        let (m, r) = random_table(&mut rng);
        let build = |t, d| ScoreTable::build(&m, Some(&r), t, d, NormScope::PerLayer).unwrap();
        for rho in [0.1, 0.3, 0.5, 0.7] {
            let pairs = [
                (build(Technique::FlexRel, 0.0), build(Technique::Magnitude, 0.5)),
                (build(Technique::FlexRel, 1.0), build(Technique::Relevance, 0.5)),
            ];
            for (flex, plain) in &pairs {
                if unit_set(flex, rho) != unit_set(plain, rho) {
                    return Err(format!("plans differ at rho {rho}"));
                }
                compared += 1;
            }
        }
    }
    Ok(format!("20 tables, {compared} plan pairs identical"))
}

fn c6_accounting() -> Outcome {
    let mut rng = rng(106);
    let mut tables = Vec::new();
    for seed in 0..3 {
        let net = Network::from_kinds(vec![1, 16, 16], &Network::desk_cnn_kinds(16, 10), 3, seed).unwrap();
        tables.push(ScoreTable::from_scores(&magnitude_scores(&net).unwrap()));
    }
    for _ in 0..20 {
        let (m, r) = random_table(&mut rng);
        tables.push(ScoreTable::build(&m, Some(&r), Technique::FlexRel, rng.gen_range(0.0..=1.0), NormScope::PerLayer).unwrap());
    }
    let mut plans = 0;
    for t in &tables {
        let total: usize = t.rows.iter().map(|r| r.params).sum();
        let largest = t.rows.iter().map(|r| r.params).max().unwrap() as f64 / total as f64;
        let mut prev: Vec<(usize, usize)> = Vec::new();
        for rho in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7] {
            let plan = match plan_prune(t, rho) {
                Ok(p) => p,
                // small random tables may not reach high factors without emptying a layer
                Err(_) => break,
            };
            let a = plan.achieved_fraction;
            if a < rho || a > rho + largest + 1e-12 {
                return Err(format!("rho {rho}: achieved {a} outside [rho, rho + {largest}]"));
            }
            if plan.units[..prev.len()] != prev[..] {
                return Err(format!("plan at rho {rho} does not extend the previous one"));
            }
            prev = plan.units;
            plans += 1;
        }
    }
    Ok(format!("{plans} plans within bounds and nested"))
}

fn c8_cost_model() -> Outcome {
    let models = SplitModels::default();
    let net = Network::from_kinds(vec![1, 16, 16], &Network::desk_cnn_kinds(16, 10), 3, 1).unwrap();
    let workload = Workload::new(600, 32, 64);
    let mut notes = Vec::new();

    let (up, down) = cut_payload(&net, 3, 32, workload.batches_per_epoch).map_err(|e| e.to_string())?;
    let e = epoch_time(&net, &models, &workload, false).map_err(|e| e.to_string())?;
    let ratio = e.t_downlink / e.t_uplink;
    if up != down || (ratio - 7.5).abs() > 1e-12 {
        return Err(format!("payload {up}/{down}, downlink/uplink ratio {ratio}"));
    }
    notes.push(format!("down/up {ratio}"));

    let mut pruned = net.clone();
    for unit in 0..8 {
        pruned.apply_mask(0, unit).map_err(|e| e.to_string())?;
    }
    let (half, _) = cut_payload(&pruned, 3, 32, workload.batches_per_epoch).map_err(|e| e.to_string())?;
    if half * 2 != up {
        return Err(format!("halved cut channels give {half} bytes, dense {up}"));
    }
    notes.push("bytes(rho=0.5 at cut) = 50%".into());

    for technique in Technique::ALL {
        let b = protocol_breakdowns(&net, &pruned, 5, 15, technique, &models, &workload).map_err(|e| e.to_string())?;
        let charged: Vec<usize> = (0..b.len()).filter(|&i| b[i].t_relevance > 0.0).collect();
        let want: Vec<usize> = if technique.needs_relevance() { vec![4] } else { vec![] };
        if charged != want {
            return Err(format!("{technique}: relevance charged at epochs {charged:?}"));
        }
        let accs: Vec<f64> = (0..b.len()).map(|i| i as f64 / b.len() as f64).collect();
        for target in [0.1, 0.5, 0.9] {
            if let TimeToAccuracy::Reached { epoch, seconds, bytes, components: c } =
                time_to_accuracy(&accs, &b, target).map_err(|e| e.to_string())?
            {
                let parts = c.t_device_compute + c.t_server_compute + c.t_uplink + c.t_downlink + c.t_relevance;
                let mut prefix = flexrel_core::EpochTimeBreakdown::default();
                for x in &b[..epoch] {
                    prefix.accumulate(x);
                }
                if seconds != parts || c != prefix || bytes != prefix.bytes() {
                    return Err(format!("{technique} target {target}: {seconds} vs components {parts}"));
                }
            }
        }
        if technique.needs_relevance() {
            let r = &b[4];
            let share = r.t_relevance / (r.t_device_compute + r.t_server_compute);
            if share >= 0.1 {
                return Err(format!("relevance is {share:.3} of one epoch's compute"));
            }
            notes.push(format!("{technique} relevance/compute {share:.4}"));
        }
    }
    notes.push("components add up exactly".into());
    Ok(notes.join(", "))
}

fn c10_determinism() -> Outcome {
    let mut cfg = ExperimentConfig::load(desk_config_path()).map_err(|e| e.to_string())?;
    cfg.seeds = vec![7];
    cfg.rhos = vec![0.0, 0.5];
    cfg.deltas = vec![0.5];
    cfg.train.epochs_dense = 2;
    cfg.train.epochs_pruned = 2;
    let mut dirs = Vec::new();
    for run in ["determinism-a", "determinism-b"] {
        let mut c = cfg.clone();
        c.out_dir = scratch(run);
        let table = run_sweep(&c).map_err(|e| e.to_string())?;
        for kind in CurveKind::ALL {
            emit_curves(&table, kind, c.out_dir.join("curves")).map_err(|e| e.to_string())?;
        }
        dirs.push(c.out_dir);
    }
    let files = csv_files(&dirs[0]);
    if files.is_empty() || files != csv_files(&dirs[1]) {
        return Err("runs wrote different file sets".into());
    }
    for f in &files {
        if fs::read(dirs[0].join(f)).unwrap() != fs::read(dirs[1].join(f)).unwrap() {
            return Err(format!("{} differs between reruns", f.display()));
        }
    }
    Ok(format!("{} CSV/data files byte-identical across reruns", files.len()))
}

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "dat")) {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c11_checkpoint() -> Outcome {
    use flexrel_core::training::train_step;
    use flexrel_core::{synth_dataset, AdamConfig, SynthSpec};
    let mut net = Network::from_kinds(vec![1, 16, 16], &Network::desk_cnn_kinds(16, 10), 3, 4).unwrap();
    for (l, u) in [(0, 3), (3, 9), (6, 40), (10, 100)] {
        net.apply_mask(l, u).map_err(|e| e.to_string())?;
    }
    let data = synth_dataset(&SynthSpec { train: 16, test: 10, ..SynthSpec::default() }, 4).map_err(|e| e.to_string())?;
    let mut opt = AdamState::for_network(&net);
    for _ in 0..2 {
        train_step(&mut net, &mut opt, &AdamConfig::default(), &data.train, &[0, 5, 9, 12]).map_err(|e| e.to_string())?;
    }
    let ckpt = Checkpoint { network: net, epoch: 2, optimizer: opt };
    let path = scratch("checkpoint").with_extension("fxpr");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    if loaded != ckpt {
        return Err("loaded checkpoint differs".into());
    }
    let bytes = fs::read(&path).unwrap();
    let mut rng = rng(111);
    let mut positions: Vec<usize> = (0..24).collect();
    positions.extend((0..200).map(|_| rng.gen_range(0..bytes.len())));
    positions.push(bytes.len() - 1);
    for &i in &positions {
        let mut bad = bytes.clone();
        bad[i] ^= 1 << rng.gen_range(0..8);
        if Checkpoint::from_bytes(&bad).is_ok() {
            return Err(format!("flipped byte {i} went undetected"));
        }
    }
    if Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_ok() {
        return Err("truncated file accepted".into());
    }
    Ok(format!("round trip equal (masks, optimizer step {}), {} corruptions detected", ckpt.optimizer.step, positions.len()))
}

struct DeskSweep {
    table: ResultTable,
    classes: usize,
    seeds: usize,
}

fn desk_sweep() -> Result<DeskSweep, String> {
    let mut cfg = ExperimentConfig::load(desk_config_path()).map_err(|e| e.to_string())?;
    cfg.out_dir = scratch("desk-sweep");
    let table = run_sweep(&cfg).map_err(|e| e.to_string())?;
    for kind in CurveKind::ALL {
        emit_curves(&table, kind, cfg.out_dir.join("curves")).map_err(|e| e.to_string())?;
    }
    let classes = cfg.load_dataset().map_err(|e| e.to_string())?.classes;
    Ok(DeskSweep { table, classes, seeds: cfg.seeds.len() })
}

fn curve_mean(points: &[RhoPoint], curve: &str, rho: f64) -> Option<f64> {
    points.iter().find(|p| p.curve == curve && p.rho == rho).map(|p| p.accuracy.mean)
}

fn c7_desk(sweep: &DeskSweep) -> (Outcome, Outcome, Outcome) {
    let t = &sweep.table;
    let points = match accuracy_vs_rho(t) {
        Ok(p) => p,
        Err(e) => {
            let e = e.to_string();
            return (Err(e.clone()), Err(e.clone()), Err(e));
        }
    };
    let curves = ["magnitude", "relevance", "flexrel_best"];
    let rhos: Vec<f64> = points.iter().filter(|p| p.curve == "magnitude").map(|p| p.rho).collect();

    let complete = t.failed() == 0
        && curves.iter().all(|c| {
            rhos.iter().all(|&r| {
                points
                    .iter()
                    .any(|p| p.curve == *c && p.rho == r && p.accuracy.n == sweep.seeds && (0.0..=1.0).contains(&p.accuracy.mean))
            })
        });
    let a = check(
        complete,
        format!("{} cells, {} failed, {} rho points per curve", t.rows.len(), t.failed(), rhos.len()),
    );

    let chance = 1.0 / sweep.classes as f64;
    let mut ok = true;
    let mut detail = Vec::new();
    for c in curves {
        let (r0, r1, r8) = (curve_mean(&points, c, 0.0), curve_mean(&points, c, 0.1), curve_mean(&points, c, 0.8));
        match (r0, r1, r8) {
            (Some(r0), Some(r1), Some(r8)) => {
                let plateau = (r1 - r0).abs() <= 0.05;
                let collapse = r8 < 2.0 * chance;
                ok &= plateau && collapse;
                detail.push(format!(
                    "{c}: acc(0)={r0:.3} acc(0.1)={r1:.3}{} acc(0.8)={r8:.3}{}",
                    if plateau { "" } else { " [plateau violated]" },
                    if collapse { "" } else { " [no collapse]" }
                ));
            }
            _ => {
                ok = false;
                detail.push(format!("{c}: missing rho 0, 0.1 or 0.8"));
            }
        }
    }
    let b = check(ok, detail.join("; "));

    let mut dominated = Vec::new();
    let mut seed_detail = Vec::new();
    for &rho in rhos.iter().filter(|&&r| r <= 0.5) {
        let (Some(best), Some(rel)) = (curve_mean(&points, "flexrel_best", rho), curve_mean(&points, "relevance", rho)) else {
            continue;
        };
        if best < rel {
            dominated.push(rho);
        }
        let delta = points.iter().find(|p| p.curve == "flexrel_best" && p.rho == rho).and_then(|p| p.delta);
        let per_seed: Vec<String> = t
            .rows
            .iter()
            .filter(|r| r.key.rho == rho && r.is_ok())
            .filter(|r| r.key.technique == Technique::Relevance || (r.key.technique == Technique::FlexRel && r.key.delta == delta))
            .map(|r| format!("{}s{}={:.3}", &r.key.technique.to_string()[..3], r.key.seed, r.final_accuracy))
            .collect();
        seed_detail.push(format!("rho {rho}: best {best:.3} (delta {delta:?}) vs relevance {rel:.3} [{}]", per_seed.join(" ")));
    }
    let c = check(
        dominated.is_empty(),
        format!(
            "{}; {}",
            if dominated.is_empty() { "dominates at every rho <= 0.5".to_string() } else { format!("below relevance at rho {dominated:?}") },
            seed_detail.join("; ")
        ),
    );
    (a, b, c)
}

fn c9_delta_sweep(sweep: &DeskSweep) -> Outcome {
    let points = accuracy_vs_delta(&sweep.table).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    let mut ok = true;
    let mut checked = 0;
    for rho in [0.3, 0.5] {
        let at: Vec<_> = points.iter().filter(|p| p.rho == rho).collect();
        let Some(best) = at.iter().find(|p| p.best) else {
            ok = false;
            detail.push(format!("rho {rho}: no best-delta marker"));
            continue;
        };
        for end in [0.0, 1.0] {
            let Some(e) = at.iter().find(|p| p.delta == end) else {
                ok = false;
                detail.push(format!("rho {rho}: endpoint delta {end} missing"));
                continue;
            };
            let slack = e.accuracy.std.max(best.accuracy.std);
            ok &= best.accuracy.mean >= e.accuracy.mean - slack;
        }
        checked += 1;
        let curve: Vec<String> = at.iter().map(|p| format!("{}:{:.3}", p.delta, p.accuracy.mean)).collect();
        detail.push(format!("rho {rho}: best delta {} [{}]", best.delta, curve.join(" ")));
    }
    check(ok && checked == 2, detail.join("; "))
}

fn report(id: &str, title: &str, started: Instant, outcome: &Outcome, hard: bool) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let (tag, text) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => (if hard { "FAIL" } else { "SOFT-FAIL" }, d),
    };
    println!("[{tag}] criterion {id:<3} {title} ({secs:.1}s): {text}");
    outcome.is_ok() || !hard
}

fn main() -> ExitCode {
    let mut all = true;
    let quick: [(&str, &str, fn() -> Outcome); 8] = [
        ("1", "gradient correctness", c1_gradients),
        ("2", "convolution oracle", c2_conv_oracle),
        ("3", "relevance conservation", c3_conservation),
        ("4", "parameter relevance oracle", c4_parameter_relevance),
        ("5", "delta endpoint equivalence", c5_delta_endpoints),
        ("6", "pruning accounting", c6_accounting),
        ("8", "split cost model", c8_cost_model),
        ("11", "checkpoint round trip", c11_checkpoint),
    ];
    for (id, title, f) in quick {
        let t = Instant::now();
        all &= report(id, title, t, &f(), true);
    }

    let t = Instant::now();
    match desk_sweep() {
        Ok(sweep) => {
            let (a, b, c) = c7_desk(&sweep);
            all &= report("7a", "desk sweep completes with valid curves", t, &a, true);
            all &= report("7b", "three-region shape", t, &b, true);
            report("7c", "best-delta flexrel dominates relevance (soft)", t, &c, false);
            let t9 = Instant::now();
            all &= report("9", "delta sweep best markers", t9, &c9_delta_sweep(&sweep), true);
        }
        Err(e) => {
            let err: Outcome = Err(e);
            all &= report("7", "desk sweep", t, &err, true);
            all &= report("9", "delta sweep", t, &err, true);
        }
    }

    let t = Instant::now();
    all &= report("10", "determinism", t, &c10_determinism(), true);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
