//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so every verdict is printed. Pass
//! criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 7`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unbuild::config::{CameraConfig, ExperimentConfig, HeatmapConfig};
use unbuild::experiment::{default_input_instances, search_budget, train_value};
use unbuild::heatmap::{decode_heatmap, encode_points, from_grid, GRID};
use unbuild::render::{render_boxes, Camera, SceneBox};
use unbuild::search::{steps_table, Method};
use unbuild::unmake::{assembly_from_path, unmake_path};
use unbuild::value::{encode, generate_labels, LabelKind, StateValue, ValueDataConfig, ValueNet, ENCODING_DIM};
use unbuild::world::{orientations_for, Aabb};
use unbuild::{Category, Orientation, Variant, WorldState};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn gamma_pow(gamma: f64, n: usize) -> f64 {
    (0..n).fold(1.0, |acc, _| acc * gamma)
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let counts: Vec<usize> = [3, 4, 5].iter().map(|&h| Category::arch(h).unwrap().instances().len()).collect();
    let el = t.elapsed();
    verdict(counts == [4, 16, 49] && el < Duration::from_secs(1), format!("counts {counts:?} in {el:.2?}"))
}

fn criterion_2() -> Verdict {
    let t = Instant::now();
    let mut pairs = 0;
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for h in [3, 4, 5] {
        let cat = Category::arch(h).unwrap();
        let ws = Arc::new(cat.workspace());
        for inst in cat.instances() {
            let goal = inst.instantiate(ws.clone()).unwrap();
            for _ in 0..8 {
                let (states, actions) = unmake_path(&goal, &mut rng).unwrap();
                let assembly = assembly_from_path(&states, &actions).unwrap();
                let mut s = states.last().unwrap().clone();
                for a in &assembly {
                    s = s.apply_action(a).unwrap();
                }
                pairs += 1;
                if !cat.classify(&s, Variant::Success) || s.canonical_key() != goal.canonical_key() {
                    failures.push(inst.id.clone());
                }
            }
        }
    }
    let el = t.elapsed();
    verdict(
        pairs >= 500 && failures.is_empty() && el < Duration::from_secs(60),
        format!("{pairs} paths, {} failed, {el:.2?}", failures.len()),
    )
}

/// Steps table at desk scale. Trains one network per height with the default
/// configuration, checks the dataset size, then compares all methods.
fn criterion_3() -> Verdict {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let episodes = cfg.search.episodes;
    let budget = search_budget(&cfg);
    let mut notes = Vec::new();
    let mut pass = cfg.value.rounds == 5 && episodes >= 200;
    for h in [3u8, 4, 5] {
        let cat = Category::arch(h).unwrap();
        let out = match train_value(&cat, None, &cfg, cfg.seed.wrapping_add(h as u64), |_| {}) {
            Ok(o) => o,
            Err(e) => return verdict(false, format!("training failed at {h}U: {e}")),
        };
        let min_pairs = out.metrics.iter().map(|m| m.raw_pairs).min().unwrap_or(0);
        pass &= min_pairs >= 20_000;
        let table = steps_table(
            &[h],
            &[Method::Random, Method::Mcts, Method::Ours, Method::Oracle],
            episodes,
            &budget,
            Some(&out.net as &dyn StateValue),
            cfg.value.rollout_steps(),
            cfg.seed,
            |c| eprintln!("  {}U {}: mean {:.4e} ({}/{})", c.height, c.method.name(), c.mean, c.successes, c.episodes),
        )
        .unwrap();
        let m = |k| table.get(h, k).unwrap().mean;
        let (random, mcts, ours, oracle) = (m(Method::Random), m(Method::Mcts), m(Method::Ours), m(Method::Oracle));
        let ratio = ours / oracle;
        pass &= ratio <= 1.2;
        if h >= 4 {
            pass &= random / ours >= 50.0 && mcts > ours && mcts < random;
        }
        notes.push(format!(
            "{h}U ours/oracle {ratio:.3} random {random:.2e} mcts {mcts:.2e} ours {ours:.2} oracle {oracle:.2} (D_V {min_pairs})"
        ));
    }
    let el = t.elapsed();
    pass &= el <= Duration::from_secs(30 * 60);
    notes.push(format!("{el:.0?}"));
    verdict(pass, notes.join("; "))
}

fn criterion_4() -> Verdict {
    let cfg = ExperimentConfig::default();
    let gamma = cfg.gamma;
    let dcfg = ValueDataConfig {
        gamma,
        target_pairs: 6_000,
        min_expansions_per_state: 2,
        paths_per_instance: 1,
        walk_length: cfg.value.walk_length,
        unmake: cfg.unmake_config(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    let mut bad = 0;
    for h in [3u8, 4, 5] {
        let cat = Category::arch(h).unwrap();
        let mut insts = default_input_instances(&cat);
        insts.extend(cat.instances().into_iter().step_by(7));
        let records = generate_labels(&insts, &cat, &dcfg, 40 + h as u64).unwrap();
        // Graph values by key, from the trajectory records themselves.
        let mut known = HashMap::new();
        for r in &records {
            if matches!(r.kind, LabelKind::Trajectory { .. }) {
                known.entry(r.state.canonical_key()).or_insert(r.target);
            }
        }
        let want = if h == 5 { 10_000 - checked } else { 3_333 };
        for r in records.choose_multiple(&mut rng, want) {
            let ok = match r.kind {
                LabelKind::Trajectory { depth } => {
                    depth == r.state.len() - r.state.structural_ids().len() && r.target == gamma_pow(gamma, depth)
                }
                LabelKind::Expansion { parent, reused } => match known.get(&r.state.canonical_key()) {
                    Some(&v) => reused && r.target == v,
                    None => !reused && r.target == gamma * parent,
                },
            };
            bad += !ok as usize;
            checked += 1;
        }
    }
    verdict(checked == 10_000 && bad == 0, format!("{checked} labels checked, {bad} violations"))
}

/// Same state up to loose primitive positions and list order.
fn loose_variant(s: &WorldState, rng: &mut ChaCha8Rng) -> WorldState {
    let mut t = s.clone();
    for id in s.primitives().iter().map(|p| p.id).collect::<Vec<_>>() {
        if !t.is_loose(id) {
            continue;
        }
        let len = t.get(id).unwrap().length;
        let o = *orientations_for(len).choose(rng).unwrap();
        if let Some(a) = t.random_table_move(id, o, rng) {
            t = t.apply_action(&a).unwrap();
        }
    }
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.shuffle(rng);
    t.permuted(&order)
}

fn criterion_5() -> Verdict {
    let cfg = ExperimentConfig::default();
    let dcfg = ValueDataConfig { target_pairs: 3_000, ..Default::default() };
    let mut states = Vec::new();
    for h in [3u8, 4, 5] {
        let cat = Category::arch(h).unwrap();
        let insts: Vec<_> = cat.instances().into_iter().step_by(5).collect();
        states.extend(generate_labels(&insts, &cat, &dcfg, h as u64).unwrap().into_iter().map(|r| r.state));
    }
    let tower = Category::tower(5).unwrap();
    states.extend((0..50).map(|e| unbuild::search::sample_episode(&tower, e)));
    let net = ValueNet::new(ENCODING_DIM, cfg.gamma, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut moved = 0;
    let mut bad = 0;
    for _ in 0..1000 {
        let s = states.choose(&mut rng).unwrap();
        let t = loose_variant(s, &mut rng);
        moved += (t.to_json() != s.sorted_by_id().to_json()) as usize;
        let same_key = s.canonical_key() == t.canonical_key();
        let (es, et) = (encode(s), encode(&t));
        let bits = es.iter().zip(et.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        let v = net.values(&[s.clone(), t]);
        if !(same_key && bits && v[0].to_bits() == v[1].to_bits()) {
            bad += 1;
        }
    }
    verdict(bad == 0 && moved > 500, format!("1000 pairs ({moved} with moved primitives), {bad} mismatches"))
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = ValueNet::new(24, 0.95, 6);
    // Move batch-norm parameters off their initial values.
    let mut p = net.params().to_vec();
    for (name, r) in net.param_groups() {
        if name.starts_with("bn_") {
            for v in &mut p[r] {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    net.set_params(p);
    let groups = net.param_groups();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for _ in 0..10 {
        let rows = 16;
        let x = Array2::from_shape_fn((rows, 24), |_| rng.random_range(-1.0..1.0));
        let t: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, grad) = net.loss_and_grad(x.view(), &t);
        let base = net.params().to_vec();
        let pattern = net.relu_pattern(&base, x.view());
        for (_, r) in &groups {
            let picks: Vec<usize> = (0..4.min(r.len())).map(|_| rng.random_range(r.clone())).collect();
            for k in picks {
                let mut plus = base.clone();
                plus[k] += h;
                let mut minus = base.clone();
                minus[k] -= h;
                if net.relu_pattern(&plus, x.view()) != pattern || net.relu_pattern(&minus, x.view()) != pattern {
                    skipped += 1;
                    continue;
                }
                let fd = (net.loss_train(&plus, x.view(), &t) - net.loss_train(&minus, x.view(), &t)) / (2.0 * h);
                let denom = fd.abs().max(grad[k].abs()).max(1e-7);
                worst = worst.max((fd - grad[k]).abs() / denom);
                checked += 1;
            }
        }
    }
    verdict(worst <= 1e-4 && checked > 300, format!("{checked} coordinates, worst relative error {worst:.2e}, {skipped} at ReLU kinks"))
}

fn criterion_7() -> Verdict {
    let cfg = HeatmapConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = 0;
    let mut total = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=6);
        let mut pts: Vec<([f64; 2], Orientation)> = Vec::new();
        let mut grid: Vec<[f64; 2]> = Vec::new();
        while pts.len() < k {
            let g = [rng.random_range(0.0..(GRID - 1) as f64), rng.random_range(0.0..(GRID - 1) as f64)];
            if grid.iter().all(|q| (q[0] - g[0]).abs().max((q[1] - g[1]).abs()) >= 4.0) {
                grid.push(g);
                pts.push((from_grid(g[0], g[1]), *Orientation::ALL.choose(&mut rng).unwrap()));
            }
        }
        let hm = encode_points(&pts, cfg.sigma).unwrap();
        let dec = decode_heatmap(&hm, k, &cfg);
        total += k;
        let mut ok = dec.len() == k;
        for (g, (_, o)) in grid.iter().zip(&pts) {
            ok &= dec.iter().any(|d| {
                (d.u as f64 - g[0]).abs() <= 1.0 && (d.v as f64 - g[1]).abs() <= 1.0 && d.orientation == *o
            });
        }
        bad += !ok as usize;
    }
    verdict(bad == 0, format!("1000 sets ({total} actions), {bad} sets not recovered"))
}

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_unbuild"))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn criterion_8(tmp: &Path) -> Verdict {
    let runs: [(&str, Vec<&str>); 4] = [
        ("tower-3", vec!["--task", "tower", "--cubes", "3"]),
        ("tower-5", vec!["--task", "tower", "--cubes", "5"]),
        ("tower-7", vec!["--task", "tower", "--cubes", "7"]),
        ("arch-3", vec!["--task", "arch", "--height", "3"]),
    ];
    let mut pass = true;
    let mut notes = Vec::new();
    for (name, task) in runs {
        let dir = tmp.join(format!("oracle-{name}"));
        let mut args = vec!["eval-oracle-policy", "--episodes", "50", "--out", dir.to_str().unwrap()];
        args.extend(task);
        match run_cli(&args) {
            Ok(stdout) => {
                let v: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap_or_default();
                let rate = v["success_rate"].as_f64().unwrap_or(0.0);
                let n = v["episodes"].as_u64().unwrap_or(0);
                pass &= rate == 1.0 && n == 50;
                notes.push(format!("{name} {:.0}%", rate * 100.0));
            }
            Err(e) => {
                pass = false;
                notes.push(format!("{name} error {}", e.trim()));
            }
        }
    }
    verdict(pass, notes.join(", "))
}

fn camera() -> Camera {
    Camera::from_config(&CameraConfig::default())
}

/// Distance along the ray through a pixel to an axis-aligned plane, if the
/// hit lies within the given face rectangle.
fn ray_plane(cam: &Camera, col: usize, row: usize, axis: usize, at: f64, lo: [f64; 3], hi: [f64; 3]) -> Option<f64> {
    let d = cam.ray(col, row);
    if d[axis].abs() < 1e-12 {
        return None;
    }
    let t = (at - cam.eye[axis]) / d[axis];
    let p = [cam.eye[0] + t * d[0], cam.eye[1] + t * d[1], cam.eye[2] + t * d[2]];
    let inside = (0..3).all(|k| k == axis || (p[k] >= lo[k] - 1e-9 && p[k] <= hi[k] + 1e-9));
    (t > 0.0 && inside).then_some(t)
}

fn criterion_9() -> Verdict {
    let cam = camera();
    let m_per_u = 0.045;
    // One box in view; pixels chosen by projecting points on its top face,
    // its camera-facing side and the open table.
    let b = Aabb::from_center([7.5, 9.0, 1.0], [3.0, 2.0, 2.0]);
    let boxes = [SceneBox { bounds: b, label: 3 }];
    let (depth, seg) = render_boxes(&boxes, &cam);
    let mut probes: Vec<([f64; 3], usize, f64)> = Vec::new();
    for (x, y) in [(6.5, 8.5), (7.5, 9.0), (8.5, 9.5), (6.8, 9.6), (8.2, 8.4), (7.0, 8.2), (8.0, 9.8)] {
        probes.push(([x, y, b.max[2]], 2, b.max[2]));
    }
    for (x, z) in [(6.5, 0.5), (7.5, 1.0), (8.5, 1.5), (6.8, 1.2), (8.2, 0.7), (7.2, 1.7)] {
        probes.push(([x, b.min[1], z], 1, b.min[1]));
    }
    for (x, y) in [(2.0, 3.0), (13.0, 4.0), (1.0, 14.0), (15.0, 15.0), (8.0, 2.0), (4.0, 12.0), (12.0, 13.0), (3.0, 8.0), (13.0, 9.0), (10.0, 1.0), (5.0, 5.0)] {
        probes.push(([x, y, 0.0], 2, 0.0));
    }
    let mut worst: f64 = 0.0;
    let mut used = 0;
    for (p, axis, at) in probes {
        let Some((u, v)) = cam.project(p) else { continue };
        let (col, row) = (u.floor() as usize, v.floor() as usize);
        let (lo, hi) = if at == 0.0 && axis == 2 { ([-1e9; 3], [1e9; 3]) } else { (b.min, b.max) };
        let Some(t) = ray_plane(&cam, col, row, axis, at, lo, hi) else { continue };
        // The table point must not be hidden by the box.
        if at == 0.0 && boxes.iter().any(|sb| unbuild::render::ray_box(cam.eye, cam.ray(col, row), &sb.bounds).is_some()) {
            continue;
        }
        let got = depth[row * cam.width + col] as f64;
        worst = worst.max((got - t * m_per_u).abs());
        let want_label = if at == 0.0 && axis == 2 { 0 } else { 3 };
        if seg[row * cam.width + col] != want_label {
            worst = f64::INFINITY;
        }
        used += 1;
    }
    // Occlusion: a two-box render is the per-pixel nearest of the singles.
    let small = Camera::from_config(&CameraConfig { width: 64, height: 64, ..CameraConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut occl_bad = 0;
    for _ in 0..200 {
        let mut rand_box = |label| {
            let e = [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)];
            let c = [rng.random_range(2.0..14.0), rng.random_range(2.0..14.0), rng.random_range(0.0..3.0) + e[2] / 2.0];
            SceneBox { bounds: Aabb::from_center(c, e), label }
        };
        let (a, bx) = (rand_box(1), rand_box(2));
        let (da, sa) = render_boxes(std::slice::from_ref(&a), &small);
        let (db, sb) = render_boxes(std::slice::from_ref(&bx), &small);
        let (dab, sab) = render_boxes(&[a, bx], &small);
        for i in 0..dab.len() {
            let want = da[i].min(db[i]);
            let label = if sa[i] != 0 && da[i] <= db[i] {
                sa[i]
            } else if sb[i] != 0 && db[i] < da[i] {
                sb[i]
            } else {
                0
            };
            if dab[i] != want || sab[i] != label {
                occl_bad += 1;
                break;
            }
        }
    }
    verdict(
        used >= 20 && worst <= 1e-4 && occl_bad == 0,
        format!("{used} analytic pixels, max error {worst:.2e} m; {occl_bad}/200 occlusion failures"),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    if dir.is_file() {
        out.insert(PathBuf::new(), std::fs::read(dir).unwrap());
        return out;
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_10(tmp: &Path) -> Verdict {
    let cfg_path = tmp.join("small.toml");
    std::fs::write(
        &cfg_path,
        "seed = 3\n[value]\nrounds = 2\nepochs = 5\ndv_target_pairs = 400\ndiscovery_attempts = 5\n\
         [search]\nmax_env_steps = 3000\nepisodes = 3\n[camera]\nwidth = 48\nheight = 48\n\
         [eval]\nepisodes = 2\n",
    )
    .unwrap();
    let c = cfg_path.to_str().unwrap();
    let net = tmp.join("det-net");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("enumerate", vec!["enumerate".into(), "--height".into(), "4".into()]),
        ("unmake", vec!["unmake".into(), "--height".into(), "3".into()]),
        ("train-value", vec!["train-value".into(), "--height".into(), "3".into()]),
        (
            "steps-table",
            vec![
                "steps-table".into(),
                "--heights".into(),
                "3".into(),
                "--net".into(),
                net.join("value_net.ubvn").to_str().unwrap().into(),
            ],
        ),
        ("gen-policy-data", vec!["gen-policy-data".into(), "--task".into(), "tower".into(), "--cubes".into(), "3".into()]),
        ("render", vec!["render".into(), "--height".into(), "3".into()]),
        ("eval-oracle-policy", vec!["eval-oracle-policy".into(), "--task".into(), "tower".into(), "--cubes".into(), "3".into()]),
    ];
    let mut differing = Vec::new();
    let mut files = 0;
    for (name, args) in &commands {
        let dir = if *name == "train-value" { net.clone() } else { tmp.join(format!("det-{name}")) };
        let mut first = None;
        for _ in 0..2 {
            let _ = std::fs::remove_dir_all(&dir);
            let _ = std::fs::remove_file(&dir);
            let mut a: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
            a.extend(["--config", c, "--out", dir.to_str().unwrap()]);
            let stdout = match run_cli(&a) {
                Ok(s) => s,
                Err(e) => return verdict(false, format!("{name} failed: {}", e.trim())),
            };
            let snap = (snapshot(&dir), stdout);
            match &first {
                None => first = Some(snap),
                Some(f) => {
                    if *f != snap {
                        differing.push(name.to_string());
                    }
                    files += snap.0.len();
                }
            }
        }
    }
    verdict(
        differing.is_empty() && files > 0,
        format!("{} commands, {files} files compared, differing: {differing:?}", commands.len()),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let tmp = tempfile::tempdir().unwrap();
    let mut failed = 0;
    for n in 1..=10u32 {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let v = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(),
            8 => criterion_8(tmp.path()),
            9 => criterion_9(),
            _ => criterion_10(tmp.path()),
        };
        failed += !v.pass as usize;
        println!("criterion {n:>2}: {} ({}) [{:.1?}]", if v.pass { "PASS" } else { "FAIL" }, v.detail, t.elapsed());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
