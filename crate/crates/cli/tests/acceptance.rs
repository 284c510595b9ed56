//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anchorcut::affinity::{augment_with_anchors, build_affinity, sparse_affinity_from_tokens, AnchoredGraph, FeatureGraph};
use anchorcut::binarize::{threshold_roc, Mask, Orientation, ThresholdStrategy};
use anchorcut::exchange::{l2_normalize, write_token_grid};
use anchorcut::fixtures::planted_clusters;
use anchorcut::metrics::{iou, ipr};
use anchorcut::nalgebra::DMatrix;
use anchorcut::pipeline::{prepare_graph, segment_image, PipelineConfig};
use anchorcut::prior::{Label, PriorBank, PriorEntry, RetrievalConfig};
use anchorcut::spectral::{dense_eig_oracle, normalized_laplacian, solve_fiedler, SolverConfig, SolverMethod};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn connected(g: &AnchoredGraph) -> bool {
    let w = g.to_dense();
    let n = w.nrows();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for j in 0..n {
            if !seen[j] && w[(i, j)] > 0.0 {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Random anchored graph with between 16 and 512 vertices in total.
fn random_graph(rng: &mut ChaCha8Rng) -> AnchoredGraph {
    loop {
        let m = rng.random_range(14..=510);
        let dim = rng.random_range(3..=32);
        let tau = rng.random_range(0.2..1.5);
        let kappa = [1.0, 10.0, 100.0, 1000.0][rng.random_range(0..4)] * rng.random_range(0.5..2.0);
        let x = if rng.random_bool(0.5) {
            DMatrix::from_fn(m, dim, |_, _| StandardNormal.sample(&mut *rng))
        } else {
            // A few tight clusters give small, close eigenvalues.
            let k = rng.random_range(2..5);
            let centers: DMatrix<f64> = DMatrix::from_fn(k, dim, |_, _| StandardNormal.sample(&mut *rng));
            let spread = rng.random_range(0.05..0.5);
            DMatrix::from_fn(m, dim, |r, c| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                centers[(r % k, c)] + spread * z
            })
        };
        let x = l2_normalize(&x).unwrap();
        let feat: FeatureGraph = if rng.random_bool(0.3) {
            let xi = rng.random_range(3..=(m - 1).min(40));
            sparse_affinity_from_tokens(&x, tau, xi).unwrap().into()
        } else {
            build_affinity(&x, tau).unwrap().into()
        };
        let n_lab = rng.random_range(2..=(m / 2).min(60));
        let mut idx: Vec<usize> = (0..m).collect();
        for i in 0..n_lab {
            let j = rng.random_range(i..m);
            idx.swap(i, j);
        }
        let split = rng.random_range(1..n_lab);
        let g = augment_with_anchors(feat, &idx[..split], &idx[split..n_lab], kappa).unwrap();
        if connected(&g) {
            return g;
        }
    }
}

/// LOBPCG against the dense oracle in both the symmetric and the rescaled mode.
fn eigensolver(spectra: &mut Vec<Vec<f64>>) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xE16E);
    let graphs: Vec<AnchoredGraph> = (0..200).map(|_| random_graph(&mut rng)).collect();
    let start = Instant::now();
    let mut worst_gap = 0.0f64;
    let mut worst_align = 1.0f64;
    let mut failures = Vec::new();
    pool.install(|| {
        for (n, g) in graphs.iter().enumerate() {
            let lap = normalized_laplacian(g).unwrap();
            let oracle = dense_eig_oracle(&lap).unwrap();
            spectra.push(oracle.eigenvalues.clone());
            for rescale in [false, true] {
                let cfg = SolverConfig {
                    dense_below: 0,
                    dense_fallback: false,
                    rescale_generalized: rescale,
                    ..SolverConfig::default()
                };
                let reference = solve_fiedler(&lap, &SolverConfig { method: SolverMethod::Dense, ..cfg.clone() });
                match (solve_fiedler(&lap, &cfg), reference) {
                    (Ok(a), Ok(b)) => {
                        let gap = (a.lambda2 - oracle.lambda2).abs();
                        let align = dot(&a.fiedler, &b.fiedler).abs();
                        worst_gap = worst_gap.max(gap);
                        worst_align = worst_align.min(align);
                        if gap > 1e-8 || align < 1.0 - 1e-6 || a.method != SolverMethod::Lobpcg {
                            failures.push(format!("graph {n} (size {}, rescale {rescale}): gap {gap:.2e}, alignment {align}", lap.size()));
                        }
                    }
                    (Err(e), _) | (_, Err(e)) => failures.push(format!("graph {n}: {e}")),
                }
            }
        }
    });
    let elapsed = start.elapsed();
    let summary = format!(
        "200 graphs x 2 modes, worst |gap| {worst_gap:.1e}, worst alignment 1-{:.1e}, {:.1}s on one thread",
        1.0 - worst_align,
        elapsed.as_secs_f64()
    );
    if !failures.is_empty() {
        return Err(format!("{summary}; {} failures, first: {}", failures.len(), failures[0]));
    }
    if elapsed > Duration::from_secs(120) {
        return Err(format!("{summary}; over the two-minute budget"));
    }
    Ok(summary)
}

fn small_cfg(kappa: f64) -> PipelineConfig {
    PipelineConfig {
        kappa,
        retrieval: RetrievalConfig::with_quota(8),
        ..PipelineConfig::default()
    }
}

fn sign_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x516E);
    for n in 0..100 {
        let h = rng.random_range(4..10);
        let w = rng.random_range(4..10);
        let p = planted_clusters(h, w, rng.random_range(4..16), rng.random_range(2..4), rng.random_range(0.6..FRAC_PI_2), rng.random_range(0.0..0.6), rng.random())
            .map_err(|e| e.to_string())?;
        let mut cfg = small_cfg(rng.random_range(0.5..500.0));
        cfg.tau = rng.random_range(0.3..1.2);
        cfg.orientation = if rng.random_bool(0.5) { Orientation::Median } else { Orientation::Mean };
        cfg.threshold = if rng.random_bool(0.8) { ThresholdStrategy::Roc } else { ThresholdStrategy::Median };
        cfg.threshold_exact = rng.random_bool(0.2);
        cfg.solver.rescale_generalized = rng.random_bool(0.5);
        let prep = prepare_graph(&p.grid, &p.bank, &cfg, &[]).map_err(|e| e.to_string())?;
        let s = prep.solve(&cfg).map_err(|e| e.to_string())?;
        let neg: Vec<f64> = s.fiedler.iter().map(|x| -x).collect();
        let a = prep.binarize(&s.fiedler, &cfg).map_err(|e| e.to_string())?;
        let b = prep.binarize(&neg, &cfg).map_err(|e| e.to_string())?;
        if a.mask != b.mask || a.threshold.t_star.to_bits() != b.threshold.t_star.to_bits() {
            return Err(format!("pipeline {n}: masks differ between v and -v"));
        }
    }
    Ok("100 random pipelines, bit-identical masks and thresholds".into())
}

fn swapped(bank: &PriorBank) -> PriorBank {
    let entries: Vec<PriorEntry> = bank
        .entries()
        .iter()
        .map(|e| PriorEntry {
            label: match e.label {
                Label::Positive => Label::Negative,
                Label::Negative => Label::Positive,
            },
            ..e.clone()
        })
        .collect();
    PriorBank::new(entries, bank.dim()).unwrap()
}

fn planted() -> Outcome {
    let p = planted_clusters(6, 6, 8, 2, FRAC_PI_2, 0.0, 0).map_err(|e| e.to_string())?;
    let flipped = swapped(&p.bank);
    let mut runs = 0;
    for kappa in [1.0, 100.0] {
        for rescale in [true, false] {
            let mut cfg = small_cfg(kappa);
            cfg.solver.rescale_generalized = rescale;
            let s = segment_image(&p.grid, &p.bank, &cfg).map_err(|e| e.to_string())?;
            if s.mask != p.truth {
                return Err(format!("kappa {kappa}, rescale {rescale}: mask differs from ground truth"));
            }
            let t = segment_image(&p.grid, &flipped, &cfg).map_err(|e| e.to_string())?;
            if t.mask != p.truth.complement() {
                return Err(format!("kappa {kappa}, rescale {rescale}: swapped labels do not complement the mask"));
            }
            runs += 2;
        }
    }
    Ok(format!("6x6 orthogonal fixture, kappa in {{1, 100}}, both vector modes: {runs} exact masks"))
}

/// Counts with plain loops over a candidate list; first maximizer wins.
fn youden(pos: &[f64], neg: &[f64], cands: &[f64]) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &t in cands {
        let tp = pos.iter().filter(|&&s| s > t).count() as f64 / pos.len() as f64;
        let fp = neg.iter().filter(|&&s| s > t).count() as f64 / neg.len() as f64;
        if tp - fp > best.0 {
            best = (tp - fp, t);
        }
    }
    best
}

/// Uniform scores, optionally rounded onto a coarse lattice to force ties.
fn draw(rng: &mut ChaCha8Rng, k: usize, lo: f64, hi: f64, quant: Option<f64>) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let v: f64 = rng.random_range(lo..=hi);
            quant.map_or(v, |q| (v * q).round() / q)
        })
        .collect()
}

fn threshold_oracle() -> Outcome {
    let mut labels = vec![Label::Positive; 2];
    labels.extend([Label::Negative; 2]);
    let r = threshold_roc(&[0.9, 0.8, 0.1, 0.3], &labels, 200).map_err(|e| e.to_string())?;
    if r.t_star != 60.0 / 199.0 {
        return Err(format!("worked example gave t* = {}, want 60/199", r.t_star));
    }
    let steps = 200;
    let h = 1.0 / (steps - 1) as f64;
    let grid: Vec<f64> = (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7E5);
    let mut resolved = 0;
    for n in 0..1000 {
        let quant = rng.random_bool(0.3).then(|| rng.random_range(4..40) as f64);
        let np = rng.random_range(1..40);
        let nn = rng.random_range(1..40);
        let shift = rng.random_range(0.0..0.5);
        let pos = draw(&mut rng, np, shift, 1.0, quant);
        let neg = draw(&mut rng, nn, 0.0, 1.0 - shift, quant);
        let scores: Vec<f64> = pos.iter().chain(&neg).copied().collect();
        let mut lab = vec![Label::Positive; np];
        lab.extend(vec![Label::Negative; nn]);
        let r = threshold_roc(&scores, &lab, steps).map_err(|e| e.to_string())?;
        let j_grid = r.j_stat.unwrap_or(f64::NAN);
        let (j_ref, t_ref) = youden(&pos, &neg, &grid);
        if j_grid != j_ref || r.t_star != t_ref {
            return Err(format!("set {n}: grid result ({}, {j_grid}) differs from the loop oracle ({t_ref}, {j_ref})", r.t_star));
        }
        let mut uniq = scores.clone();
        uniq.push(0.0);
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        let (j_exact, t_exact) = youden(&pos, &neg, &uniq);
        if j_grid > j_exact + 1e-12 {
            return Err(format!("set {n}: grid J {j_grid} exceeds exhaustive J {j_exact}"));
        }
        // The first optimal plateau [t_exact, next) holds a grid point when it
        // is wider than a cell; the grid must then find J within that cell.
        let next = uniq.iter().copied().find(|&u| u > t_exact).unwrap_or(1.0 + h);
        if next - t_exact > h {
            resolved += 1;
            if j_grid != j_exact || r.t_star < t_exact || r.t_star > t_exact + h {
                return Err(format!("set {n}: grid t* {} J {j_grid} vs exhaustive t {t_exact} J {j_exact}", r.t_star));
            }
        }
    }
    Ok(format!("t* = 60/199 exactly; 1000 random sets match the loop oracle, {resolved} resolvable optima found within one cell"))
}

fn sparsity() -> Outcome {
    let m = 6400;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5BA);
    let x = l2_normalize(&DMatrix::from_fn(m, 32, |_, _| StandardNormal.sample(&mut rng))).unwrap();
    let mut parts = Vec::new();
    for (xi, lo, hi) in [(80usize, 0.0125, 0.025), (20, 0.003125, 0.00625)] {
        let s = sparse_affinity_from_tokens(&x, 0.7, xi).map_err(|e| e.to_string())?;
        let d = s.density();
        if !(lo..=hi).contains(&d) {
            return Err(format!("xi {xi}: density {:.4}% outside [{}%, {}%]", 100.0 * d, 100.0 * lo, 100.0 * hi));
        }
        parts.push(format!("xi {xi}: {:.4}%", 100.0 * d));
    }
    Ok(format!("M = 6400, {}", parts.join(", ")))
}

fn dense_sparse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD5);
    for n in 0..50 {
        let p = planted_clusters(rng.random_range(4..9), rng.random_range(4..9), rng.random_range(4..12), rng.random_range(2..4), rng.random_range(0.6..FRAC_PI_2), rng.random_range(0.0..0.5), rng.random())
            .map_err(|e| e.to_string())?;
        let mut cfg = small_cfg(rng.random_range(0.5..200.0));
        cfg.solver.rescale_generalized = rng.random_bool(0.5);
        let prep = prepare_graph(&p.grid, &p.bank, &cfg, &[]).map_err(|e| e.to_string())?;
        let m = prep.n_tokens() + prep.n_priors();
        let dense = segment_image(&p.grid, &p.bank, &cfg).map_err(|e| e.to_string())?;
        let sparse = segment_image(&p.grid, &p.bank, &PipelineConfig { xi: Some(m - 1), ..cfg })
            .map_err(|e| e.to_string())?;
        if dense.mask != sparse.mask {
            return Err(format!("fixture {n}: xi = M-1 mask differs from the dense mask"));
        }
    }
    Ok("50 random fixtures, identical masks".into())
}

fn metrics(spectra: &[Vec<f64>]) -> Outcome {
    let mut one_hot = vec![0.0; 37];
    one_hot[11] = -4.0;
    if (ipr(&one_hot).map_err(|e| e.to_string())? - 1.0).abs() > 1e-12 {
        return Err("IPR of a one-hot vector is not 1".into());
    }
    for n in [1usize, 2, 3, 10, 100, 1000, 6400] {
        let r = ipr(&vec![0.3; n]).map_err(|e| e.to_string())?;
        if (r - 1.0 / n as f64).abs() > 1e-12 {
            return Err(format!("IPR of a uniform {n}-vector is {r}"));
        }
    }
    let a = Mask::new(2, 3, vec![true, true, true, true, false, false]).unwrap();
    let b = Mask::new(2, 3, vec![false, false, true, true, true, true]).unwrap();
    let (ab, ba) = (iou(&a, &b).map_err(|e| e.to_string())?, iou(&b, &a).map_err(|e| e.to_string())?);
    if ab != 2.0 / 6.0 || ab != ba {
        return Err(format!("IoU counting case gave {ab} / {ba}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x1D);
    for _ in 0..200 {
        let n = rng.random_range(1..80);
        let a = Mask::new(1, n, (0..n).map(|_| rng.random_bool(0.5)).collect()).unwrap();
        let b = Mask::new(1, n, (0..n).map(|_| rng.random_bool(0.5)).collect()).unwrap();
        if iou(&a, &b).unwrap() != iou(&b, &a).unwrap() {
            return Err("IoU is not symmetric".into());
        }
    }
    let mut count = 0;
    for ev in spectra.iter().flatten() {
        count += 1;
        if !(-1e-9..=2.0 + 1e-9).contains(ev) {
            return Err(format!("eigenvalue {ev} outside [-1e-9, 2+1e-9]"));
        }
    }
    Ok(format!("IPR and IoU identities hold; {count} oracle eigenvalues from {} solves inside the band", spectra.len()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = planted_clusters(12, 12, 16, 3, 1.0, 0.3, 21).map_err(|e| e.to_string())?;
    let grid = dir.path().join("scene.panc");
    write_token_grid(&p.grid, &grid).map_err(|e| e.to_string())?;
    let bank = dir.path().join("bank");
    p.bank.write_dir(&bank).map_err(|e| e.to_string())?;
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "kappa = 5.0\nseed = 11\n\n[retrieval]\nmax_per_label = 6\nmode = \"random\"\n").map_err(|e| e.to_string())?;
    let run = |out: &Path| -> Result<Vec<u8>, String> {
        let status = Command::new(env!("CARGO_BIN_EXE_anchorcut"))
            .args(["segment", "--grid"])
            .arg(&grid)
            .arg("--bank")
            .arg(&bank)
            .arg("--out")
            .arg(out)
            .arg("--config")
            .arg(&cfg)
            .args(["--workers", "4"])
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("segment exited with {status}"));
        }
        let stem = p.grid.meta().image_id.clone();
        fs::read(out.join(format!("{stem}.pgm"))).map_err(|e| e.to_string())
    };
    let a = run(&dir.path().join("a"))?;
    let b = run(&dir.path().join("b"))?;
    if a != b {
        return Err("mask files differ between runs".into());
    }
    Ok(format!("two CLI runs wrote byte-identical {}-byte mask files", a.len()))
}

fn main() -> ExitCode {
    let mut spectra = Vec::new();
    let results: Vec<(&str, Outcome)> = vec![
        ("eigensolver oracle equivalence", eigensolver(&mut spectra)),
        ("sign invariance", sign_invariance()),
        ("planted clusters end to end", planted()),
        ("threshold oracle", threshold_oracle()),
        ("sparsity accounting", sparsity()),
        ("dense/sparse consistency", dense_sparse()),
        ("metric identities and spectrum band", metrics(&spectra)),
        ("determinism", determinism()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
