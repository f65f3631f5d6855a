//! Acceptance criteria, one status line each. Runs as a plain binary so the
//! lines always reach stdout; exits non-zero if any gating criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddccanet::config::PipelineConfig;
use ddccanet::data::{load_dataset, ViewPairDataset};
use ddccanet::dcca::solve_dcca;
use ddccanet::encoder::{encode_sample, feature_len, EncoderConfig};
use ddccanet::exec::ExecSettings;
use ddccanet::moments::{reduce_batches, DiscriminantMoments, MomentAccumulator};
use ddccanet::network::SampleMaps;
use ddccanet::patches::{BatchSpec, PatchMatrix};
use ddccanet::pipeline::{bench_on, cmd_eval, cmd_extract, cmd_train, raw_pixel_baseline};
use ddccanet::synth::{generate_blobs, write_blob_corpus, BlobSpec};
use ddccanet::views::{apply_recipe, ViewRecipe};

enum Status {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Status {
    if ok {
        Status::Pass(detail)
    } else {
        Status::Fail(detail)
    }
}

fn frob(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn rel_frob(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    frob(&(a - b)) / frob(b).max(f64::MIN_POSITIVE)
}

fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Moments accumulated from explicit columns split into `k` contiguous batches.
fn batched_moments(x1: &Array2<f64>, x2: &Array2<f64>, labels: &[usize], classes: usize, k: usize) -> MomentAccumulator {
    let n = x1.ncols();
    let ranges = BatchSpec { batch_size: n.div_ceil(k) }.partition(n).unwrap();
    assert_eq!(ranges.len(), k);
    reduce_batches(ranges.len(), x1.nrows(), classes, &ExecSettings::default(), |b, acc| {
        let r = ranges[b].clone();
        let p1 = PatchMatrix::from_columns(&x1.slice(ndarray::s![.., r.clone()]), 0);
        let p2 = PatchMatrix::from_columns(&x2.slice(ndarray::s![.., r.clone()]), 0);
        acc.accumulate_batch(&p1, &p2, &labels[r])
    })
    .unwrap()
}

fn criterion_1() -> Status {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (dim, n, classes, eps) = (64, 10_000, 5, 1e-4);
    let x1 = random_matrix(dim, n, &mut rng);
    let x2 = random_matrix(dim, n, &mut rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();

    // monolithic reference computed directly
    let ridge = |c: Array2<f64>| {
        let r = eps * c.diag().sum() / dim as f64;
        c + Array2::<f64>::eye(dim) * r
    };
    let c11 = ridge(x1.dot(&x1.t()));
    let c22 = ridge(x2.dot(&x2.t()));
    let mut cw = Array2::<f64>::zeros((dim, dim));
    for c in 0..classes {
        let cols: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
        let s1 = x1.select(Axis(1), &cols).sum_axis(Axis(1));
        let s2 = x2.select(Axis(1), &cols).sum_axis(Axis(1));
        cw = cw + s1.insert_axis(Axis(1)).dot(&s2.insert_axis(Axis(0)));
    }

    let mut worst = 0.0f64;
    for k in [1, 2, 7, 64] {
        let m = batched_moments(&x1, &x2, &labels, classes, k).finalize(eps).unwrap();
        worst = worst.max(rel_frob(&m.c11, &c11)).max(rel_frob(&m.c22, &c22)).max(rel_frob(&m.cw, &cw));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-10 && secs < 5.0,
        format!("max relative Frobenius error {worst:.2e} (tol 1e-10), {secs:.2} s (limit 5 s)"),
    )
}

fn criterion_2() -> Status {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let dim = rng.random_range(1..=8);
        let n = rng.random_range(1..=50);
        let classes = rng.random_range(1..=4);
        let x1 = random_matrix(dim, n, &mut rng);
        let x2 = random_matrix(dim, n, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let m = batched_moments(&x1, &x2, &labels, classes, 1).finalize(0.0).unwrap();
        let mut brute = Array2::<f64>::zeros((dim, dim));
        for i in 0..n {
            for j in 0..n {
                if labels[i] == labels[j] {
                    for a in 0..dim {
                        for b in 0..dim {
                            brute[[a, b]] += x1[[a, i]] * x2[[b, j]];
                        }
                    }
                }
            }
        }
        if frob(&brute) > 0.0 {
            worst = worst.max(rel_frob(&m.cw, &brute));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-12 && secs < 1.0,
        format!("200 instances, max relative error {worst:.2e} (tol 1e-12), {secs:.3} s (limit 1 s)"),
    )
}

fn criterion_3() -> Status {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut ordered = true;
    for _ in 0..100 {
        let dim = rng.random_range(2..=64);
        let n = rng.random_range(dim..=4 * dim);
        let classes = rng.random_range(1..=6);
        let filters = rng.random_range(1..=8usize.min(dim));
        let x1 = random_matrix(dim, n, &mut rng);
        let x2 = random_matrix(dim, n, &mut rng) + &x1 * 0.5;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let m = batched_moments(&x1, &x2, &labels, classes, 1).finalize(1e-4).unwrap();
        let pairs = solve_dcca(&m, filters).unwrap();
        let eye = Array2::<f64>::eye(filters);
        let g1 = pairs.w1.t().dot(&m.c11).dot(&pairs.w1) - &eye;
        let g2 = pairs.w2.t().dot(&m.c22).dot(&pairs.w2) - &eye;
        worst = worst.max(max_abs(&g1)).max(max_abs(&g2));
        ordered &= pairs.rho.iter().all(|&r| r >= 0.0);
        ordered &= pairs.rho.windows(2).into_iter().all(|w| w[0] >= w[1]);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-6 && ordered && secs < 10.0,
        format!("100 problems, max |WᵀCW - I| {worst:.2e} (tol 1e-6), rho ordered and non-negative: {ordered}, {secs:.2} s (limit 10 s)"),
    )
}

fn cholesky(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            l[[i, j]] = if i == j { (a[[i, i]] - s).sqrt() } else { (a[[i, j]] - s) / l[[j, j]] };
        }
    }
    l
}

/// `L^{-1} B` by forward substitution.
fn lower_solve(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in 0..l.nrows() {
            let s: f64 = (0..i).map(|k| l[[i, k]] * x[[k, c]]).sum();
            x[[i, c]] = (b[[i, c]] - s) / l[[i, i]];
        }
    }
    x
}

fn criterion_4() -> Status {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let spd = |rng: &mut ChaCha8Rng| {
            let a = random_matrix(5, 5, rng);
            a.dot(&a.t()) + Array2::<f64>::eye(5) * 0.5
        };
        let c11 = spd(&mut rng);
        let c22 = spd(&mut rng);
        let ct = random_matrix(5, 5, &mut rng);
        let m = DiscriminantMoments {
            c11: c11.clone(),
            c22: c22.clone(),
            cw: ct.clone(),
            cb: Array2::zeros((5, 5)),
            ctilde: ct.clone(),
        };
        let rho = solve_dcca(&m, 1).unwrap().rho[0];

        // Cholesky whitening differs from the symmetric one by orthogonal
        // factors, so the singular values agree
        let l1 = cholesky(&c11);
        let l2 = cholesky(&c22);
        let t = lower_solve(&l2, &lower_solve(&l1, &ct).t().to_owned()).t().to_owned();
        let mtm = t.t().dot(&t);
        let mut v = Array1::from_elem(5, 1.0);
        let mut lambda = 0.0;
        for _ in 0..1_000_000 {
            let next = mtm.dot(&v);
            let norm = next.dot(&next).sqrt();
            let next = next / norm;
            let change = (&next - &v).iter().fold(0.0f64, |a, x| a.max(x.abs()));
            v = next;
            lambda = v.dot(&mtm.dot(&v));
            if change < 1e-14 {
                break;
            }
        }
        worst = worst.max((rho - lambda.sqrt()).abs() / lambda.sqrt());
    }
    check(worst <= 1e-8, format!("50 trials, max relative rho1 error {worst:.2e} (tol 1e-8)"))
}

fn naive_features(maps: &SampleMaps, l: usize, block: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for view in [&maps.view1, &maps.view2] {
        for group in view.chunks(l) {
            let (h, w) = group[0].dim();
            let mut codes = vec![vec![0usize; w]; h];
            for (bit, m) in group.iter().enumerate() {
                for i in 0..h {
                    for j in 0..w {
                        if m[[i, j]] > 0.0 {
                            codes[i][j] += 2usize.pow(bit as u32);
                        }
                    }
                }
            }
            for bi in 0..h / block {
                for bj in 0..w / block {
                    let mut hist = vec![0usize; 1 << l];
                    for i in bi * block..(bi + 1) * block {
                        for j in bj * block..(bj + 1) * block {
                            hist[codes[i][j]] += 1;
                        }
                    }
                    for &count in &hist {
                        out.push(if count == 0 { 0.0 } else { -(count as f64 / (block * block) as f64).ln() });
                    }
                }
            }
        }
    }
    out
}

fn criterion_5() -> Status {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let cfg = EncoderConfig { block_h: 8, block_w: 8, ..Default::default() };
    let mut exact = true;
    let mut len = 0;
    for _ in 0..20 {
        let map = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((16, 16), |_| {
                if rng.random_bool(0.1) {
                    0.0
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
        };
        let maps = SampleMaps {
            view1: (0..64).map(|_| map(&mut rng)).collect(),
            view2: (0..64).map(|_| map(&mut rng)).collect(),
            label: 0,
        };
        let got = encode_sample(&maps, 8, &cfg).unwrap().values;
        let want = naive_features(&maps, 8, 8);
        exact &= got.len() == want.len() && got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
        len = got.len();
    }
    let law = feature_len(64, 8, 4);
    check(
        exact && len == 16_384 && law == 16_384,
        format!("20 map sets bit-identical to naive oracle: {exact}; feature length {len} (expected 16384)"),
    )
}

const SMOKE_CONFIG: &str = "data.train = train.csv\ndata.test = test.csv\nmodel.path = model.txt\n\
view.recipe = lbp_plus_gray\nnet.layers = 2\nnet.filters = 4\npatch.l1 = 5\npatch.l2 = 5\n\
batch.size = 16\nencode.block_h = 8\nencode.block_w = 8\nclf.kind = ridge\nexec.threads = 1\n";

fn smoke_corpus(dir: &Path) {
    let spec = BlobSpec {
        size: 16,
        train_per_class: 50,
        test_per_class: 50,
        seed: 6,
        ..Default::default()
    };
    write_blob_corpus(dir, &spec).unwrap();
    fs::write(dir.join("config.txt"), SMOKE_CONFIG).unwrap();
}

fn criterion_6() -> Status {
    let dir = tempfile::tempdir().unwrap();
    smoke_corpus(dir.path());
    let start = Instant::now();
    let cfg = PipelineConfig::load(dir.path().join("config.txt")).unwrap();
    let exec = ExecSettings::sequential();
    cmd_train(&cfg, None).unwrap();
    let report = cmd_eval(&dir.path().join("model.txt"), &dir.path().join("test.csv"), &exec).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let train = load_dataset(dir.path().join("train.csv"), &ViewRecipe::LbpPlusGray).unwrap();
    let test = load_dataset(dir.path().join("test.csv"), &ViewRecipe::LbpPlusGray).unwrap();
    let baseline = raw_pixel_baseline(&train, &test, &exec).unwrap();
    let acc = report.accuracy;
    check(
        acc >= 0.95 && acc >= baseline && secs < 60.0,
        format!(
            "test accuracy {:.1}% (need >= 95%), raw-pixel NN baseline {:.1}%, {secs:.2} s single-threaded (limit 60 s)",
            100.0 * acc,
            100.0 * baseline
        ),
    )
}

fn criterion_7() -> Status {
    let dir = tempfile::tempdir().unwrap();
    smoke_corpus(dir.path());
    let mut models = Vec::new();
    let mut features = Vec::new();
    for (run, threads) in [1, 1, 8, 8].into_iter().enumerate() {
        let mut cfg = PipelineConfig::load(dir.path().join("config.txt")).unwrap();
        cfg.exec = ExecSettings { threads, deterministic: true };
        let model = dir.path().join(format!("model_{run}.txt"));
        let csv = dir.path().join(format!("features_{run}.csv"));
        cmd_train(&cfg, Some(&model)).unwrap();
        cmd_extract(&model, &dir.path().join("test.csv"), &csv, &cfg.exec).unwrap();
        models.push(fs::read(&model).unwrap());
        features.push(fs::read(&csv).unwrap());
    }
    let same_models = models.windows(2).all(|w| w[0] == w[1]);
    let same_features = features.windows(2).all(|w| w[0] == w[1]);
    check(
        same_models && same_features,
        format!("4 runs (threads 1,1,8,8): model files identical {same_models}, feature CSVs identical {same_features}"),
    )
}

fn criterion_8() -> Status {
    let physical = num_cpus::get_physical();
    let (train, _) = generate_blobs(&BlobSpec {
        size: 32,
        train_per_class: 1000,
        test_per_class: 0,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let pairs = train
        .into_iter()
        .map(|(img, l)| {
            let (a, b) = apply_recipe(&[img], &ViewRecipe::LbpPlusGray).unwrap();
            (a, b, l)
        })
        .collect();
    let ds = ViewPairDataset::from_labeled(pairs).unwrap();
    let mut cfg = PipelineConfig::from_kv(ddccanet::config::parse_kv(SMOKE_CONFIG).unwrap()).unwrap();
    cfg.network.batch = BatchSpec { batch_size: 128 };
    let rows = bench_on(&ds, &cfg, &[1, 4]).unwrap();
    let identical = rows.iter().all(|r| r.outputs_match);
    let speedup = rows
        .iter()
        .find(|r| r.stage == "total" && r.threads == 4)
        .map_or(0.0, |r| r.speedup);
    let detail = format!(
        "2000 samples 32x32; outputs identical across 1 and 4 threads: {identical}; total speedup at 4 threads {speedup:.2}x; {physical} physical core(s)"
    );
    if !identical {
        Status::Fail(detail)
    } else if physical < 4 {
        Status::Skip(format!("speedup precondition unmet (needs >= 4 physical cores); {detail}"))
    } else {
        check(speedup >= 2.0, format!("{detail} (need >= 2.0x)"))
    }
}

fn criterion_9() -> Status {
    let Ok(config) = std::env::var("DDCCANET_ORL_CONFIG") else {
        return Status::Skip("set DDCCANET_ORL_CONFIG to a config with data.train/data.test for the ORL split".into());
    };
    let run = || -> ddccanet::Result<f64> {
        let cfg = PipelineConfig::load(&config)?;
        let model = std::env::temp_dir().join("ddccanet_orl_model.txt");
        cmd_train(&cfg, Some(&model))?;
        let test = cfg
            .test_manifest
            .clone()
            .ok_or_else(|| ddccanet::Error::Config("data.test is not set".into()))?;
        Ok(cmd_eval(&model, &test, &cfg.exec)?.accuracy)
    };
    match run() {
        // informational only
        Ok(acc) => Status::Skip(format!(
            "not gating; ORL test accuracy {:.2}% (target 95.50% +/- 2 points, within: {})",
            100.0 * acc,
            (100.0 * acc - 95.5).abs() <= 2.0
        )),
        Err(e) => Status::Skip(format!("not gating; ORL run failed: {e}")),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Status); 9] = [
        ("partition invariance", criterion_1),
        ("within-class oracle", criterion_2),
        ("constraint satisfaction", criterion_3),
        ("solver oracle", criterion_4),
        ("encoder oracle", criterion_5),
        ("end-to-end smoke", criterion_6),
        ("determinism", criterion_7),
        ("parallel speedup", criterion_8),
        ("ORL accuracy (optional)", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let status = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Status::Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match status {
            Status::Pass(d) => ("PASS", d),
            Status::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Status::Skip(d) => ("SKIP", d),
        };
        println!("criterion {} {name}: {tag} - {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
