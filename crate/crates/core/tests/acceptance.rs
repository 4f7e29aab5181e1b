//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stderr (bypassing output capture) and then asserts.
//!
//! Tests are serialized so the wall-clock budgets are not skewed by
//! siblings competing for the CPU.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use hope_cnn::data::{
    read_record_file, serialize_records, synthetic_split, CifarFormat, Colorspace, Dataset,
    CIFAR10_BATCH_BYTES,
};
use hope_cnn::gradcheck::tiny_net_config;
use hope_cnn::hope::{ortho_measure, penalty_gradient, penalty_value, ProjectionWeights};
use hope_cnn::layers::{ConvLayer, Mode};
use hope_cnn::model::{stacked_config, Architecture, Network};
use hope_cnn::optim::{beta_at_epoch, lr_at_epoch, Hyperparameters, TrainState};
use hope_cnn::tensor::{he_init, Matrix, Tensor4};
use hope_cnn::train::{evaluate, run_epoch, EpochMetrics};
use hope_cnn::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: &str, pass: bool, detail: &str) {
    let line = format!(
        "{} {criterion}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{criterion}: {detail}");
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let denom = norm(a).max(norm(b));
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum of |cos| over row pairs, straight from the definition.
fn pairwise_penalty(u: &Matrix<f64>) -> f64 {
    let mut p = 0.0;
    for i in 0..u.rows() {
        for j in i + 1..u.rows() {
            let (a, b) = (u.row(i), u.row(j));
            p += (dot(a, b) / (norm(a) * norm(b))).abs();
        }
    }
    p
}

/// Per-row derivative of the pairwise sum: for row k,
/// Σ_j sign(c_kj) (u_j / (|u_k||u_j|) − c_kj u_k / |u_k|²).
fn pairwise_gradient(u: &Matrix<f64>) -> Vec<f64> {
    let (m, n) = u.shape();
    let mut g = vec![0.0; m * n];
    for k in 0..m {
        let uk = u.row(k);
        let nk = norm(uk);
        for j in (0..m).filter(|&j| j != k) {
            let uj = u.row(j);
            let nj = norm(uj);
            let c = dot(uk, uj) / (nk * nj);
            let s = c.signum();
            for t in 0..n {
                g[k * n + t] += s * (uj[t] / (nk * nj) - c * uk[t] / (nk * nk));
            }
        }
    }
    g
}

/// Nudges rows until every |cos| clears `margin`.
fn off_kinks(mut u: Matrix<f64>, margin: f64) -> Matrix<f64> {
    for _ in 0..1000 {
        let mut clean = true;
        for i in 0..u.rows() {
            for j in i + 1..u.rows() {
                let (ni, nj) = (norm(u.row(i)), norm(u.row(j)));
                let c = dot(u.row(i), u.row(j)) / (ni * nj);
                if c.abs() < margin {
                    clean = false;
                    let ui: Vec<f64> = u.row(i).to_vec();
                    let push = if c >= 0.0 {
                        3.0 * margin
                    } else {
                        -3.0 * margin
                    };
                    for (t, v) in u.row_mut(j).iter_mut().enumerate() {
                        *v += push * nj * ui[t] / ni;
                    }
                }
            }
        }
        if clean {
            return u;
        }
    }
    panic!("could not move rows off the kinks");
}

#[test]
fn penalty_gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_fd, mut worst_oracle, mut worst_value) = (0.0f64, 0.0f64, 0.0f64);
    let h = 1e-6;
    for trial in 0..20 {
        let (m, n) = if trial == 0 {
            (32, 128)
        } else {
            let m = rng.random_range(2..=32);
            (m, rng.random_range(m + 1..=128))
        };
        // rows of roughly unit norm, the scale He initialization produces
        let scale = (3.0 / n as f64).sqrt();
        let raw: Vec<f64> = (0..m * n)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        let u = off_kinks(Matrix::new(m, n, raw).unwrap(), 1e-3);
        let analytic = penalty_gradient(&u).unwrap();
        let mut fd = vec![0.0; m * n];
        let mut probe = u.clone();
        for (t, slot) in fd.iter_mut().enumerate() {
            let x = probe.data()[t];
            probe.data_mut()[t] = x + h;
            let up = penalty_value(&probe).unwrap();
            probe.data_mut()[t] = x - h;
            let down = penalty_value(&probe).unwrap();
            probe.data_mut()[t] = x;
            *slot = (up - down) / (2.0 * h);
        }
        worst_fd = worst_fd.max(rel_err(analytic.data(), &fd));
        let oracle = pairwise_gradient(&u);
        let diff = analytic
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let value_diff = (penalty_value(&u).unwrap() - pairwise_penalty(&u)).abs();
        worst_oracle = worst_oracle.max(diff);
        worst_value = worst_value.max(value_diff / pairwise_penalty(&u));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "penalty gradient correctness",
        worst_fd < 1e-8 && worst_oracle < 1e-12 && worst_value < 1e-12 && secs < 10.0,
        &format!("worst FD rel err {worst_fd:.2e} (< 1e-8), worst oracle abs diff {worst_oracle:.2e} (< 1e-12), penalty value vs pairwise sum {worst_value:.1e}, {secs:.2}s (< 10s)"),
    );
}

#[test]
fn orthogonalization_dynamics() {
    let _g = serial();
    let start = Instant::now();
    let mut u: Matrix<f64> = he_init(16, 64, 64, 11).unwrap();
    let p0 = penalty_value(&u).unwrap();
    for _ in 0..500 {
        let g = penalty_gradient(&u).unwrap();
        for (w, d) in u.data_mut().iter_mut().zip(g.data()) {
            *w -= 0.1 * d;
        }
    }
    let p = penalty_value(&u).unwrap();
    let ortho = ortho_measure(&u).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        "orthogonalization dynamics",
        p < 1e-3 && ortho < 0.01 && secs < 5.0,
        &format!(
            "P {p0:.4} -> {p:.4e} (< 1e-3), ortho_measure {ortho:.4e} (< 0.01), {secs:.2}s (< 5s)"
        ),
    );
}

#[test]
fn scale_invariance() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(2..=16);
        let n = rng.random_range(m + 1..=48);
        let u = Matrix::new(
            m,
            n,
            (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut scaled = u.clone();
        for r in 0..m {
            let s = 10f64.powf(rng.random_range(-3.0..3.0));
            scaled.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let (a, b) = (penalty_value(&u).unwrap(), penalty_value(&scaled).unwrap());
        worst = worst.max((a - b).abs() / a.abs());
    }
    report(
        "scale invariance",
        worst < 1e-10,
        &format!("worst relative change {worst:.2e} over 100 trials (< 1e-10)"),
    );
}

#[test]
fn full_network_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let config = tiny_net_config();
    let net = Network::<f64>::build(&config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor4::from_fn([4, 2, 8, 8], |_| rng.random_range(-1.0..1.0)).unwrap();
    let labels = [1, 0, 2, 1];
    let loss = |n: &Network<f64>| n.clone().forward(&x, &labels, Mode::Train, 0).unwrap().loss;
    let pass = net.clone().forward(&x, &labels, Mode::Train, 0).unwrap();
    let grads = net.backward(&pass).unwrap();
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for (i, g) in grads.iter().enumerate() {
        let mut fd = vec![0.0; g.data().len()];
        let mut probe = net.clone();
        for (t, slot) in fd.iter_mut().enumerate() {
            let x0 = probe.params()[i].value[t];
            probe.params_mut()[i].value[t] = x0 + h;
            let up = loss(&probe);
            probe.params_mut()[i].value[t] = x0 - h;
            let down = loss(&probe);
            probe.params_mut()[i].value[t] = x0;
            *slot = (up - down) / (2.0 * h);
        }
        // exact-zero gradients (a conv bias ahead of batch norm) are compared absolutely
        let diff: Vec<f64> = g.data().iter().zip(&fd).map(|(a, b)| a - b).collect();
        let err = norm(&diff) / norm(g.data()).max(norm(&fd)).max(1e-6);
        if err >= worst.0 {
            worst = (err, net.params()[i].name.clone());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "full-network gradient check",
        worst.0 < 1e-4 && secs < 60.0,
        &format!(
            "{} parameter tensors, worst rel err {:.2e} at {} (< 1e-4), {secs:.2}s (< 60s)",
            grads.len(),
            worst.0,
            worst.1
        ),
    );
}

fn direct_conv(x: &Tensor4<f64>, layer: &ConvLayer<f64>) -> Tensor4<f64> {
    let [n, c, h, w] = x.dims();
    let (k, s, p) = (layer.kernel, layer.stride, layer.pad as isize);
    let m = layer.bias.len();
    let oh = (h + 2 * layer.pad - k) / s + 1;
    let ow = (w + 2 * layer.pad - k) / s + 1;
    let mut out = Tensor4::zeros([n, m, oh, ow]).unwrap();
    for b in 0..n {
        for o in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = layer.bias[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p;
                                let ix = (ox * s + kx) as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = layer.weights.get(ci * k * k + ky * k + kx, o);
                                acc += wv * x.at(b, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

#[test]
fn layer_oracle_equivalence() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_conv = 0.0f64;
    for (c, m, k, s, p, hw) in [
        (3, 4, 3, 1, 1, 9),
        (2, 5, 3, 2, 1, 9),
        (4, 3, 1, 1, 0, 6),
        (3, 2, 5, 1, 2, 8),
    ] {
        let weights = Matrix::new(
            c * k * k,
            m,
            (0..c * k * k * m)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let bias = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = ConvLayer::new(weights, bias, k, s, p).unwrap();
        let x = Tensor4::from_fn([2, c, hw, hw], |_| rng.random_range(-1.0..1.0)).unwrap();
        let got = layer.forward(&x).unwrap();
        let want = direct_conv(&x, &layer);
        assert_eq!(got.dims(), want.dims());
        let diff = got
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_conv = worst_conv.max(diff);
    }

    let u = Matrix::new(1, 4, vec![0.25; 4]).unwrap();
    let proj = ProjectionWeights::new(u, 2, 1, 2, 0, true).unwrap();
    let x = Tensor4::from_fn([3, 1, 8, 8], |_| rng.random_range(-1.0..1.0)).unwrap();
    let y = proj.forward(&x).unwrap();
    let mut exact = y.dims() == [3, 1, 4, 4];
    for b in 0..3 {
        for oy in 0..4 {
            for ox in 0..4 {
                let (iy, ix) = (2 * oy, 2 * ox);
                let avg = (x.at(b, 0, iy, ix)
                    + x.at(b, 0, iy, ix + 1)
                    + x.at(b, 0, iy + 1, ix)
                    + x.at(b, 0, iy + 1, ix + 1))
                    * 0.25;
                exact &= y.at(b, 0, oy, ox) == avg;
            }
        }
    }
    report(
        "layer oracle equivalence",
        worst_conv < 1e-10 && exact,
        &format!("conv vs direct loops max abs diff {worst_conv:.2e} (< 1e-10); uniform 0.25 projection equals 2x2 average pooling exactly: {exact}"),
    );
}

#[test]
fn schedule_conformance() {
    let _g = serial();
    let h = Hyperparameters::default();
    let lr = [(0, 0.06), (25, 0.03), (60, 0.015)];
    let beta = [(0, 0.15), (25, 0.085714), (50, 0.048980)];
    let mut worst = 0.0f64;
    for (e, want) in lr {
        worst = worst.max((lr_at_epoch(&h, e) - want).abs());
    }
    // the beta targets are printed to six decimals
    for (e, want) in beta {
        let exact = 0.15 / 1.75f64.powi((e / 25) as i32);
        worst = worst.max((beta_at_epoch(&h, e) - exact).abs());
        assert!((exact - want).abs() < 5e-7);
    }
    report(
        "schedule conformance",
        worst <= 1e-9,
        &format!("lr 0.06/0.03/0.015 at 0/25/60 and beta 0.15/0.085714/0.048980 at 0/25/50, max deviation {worst:.1e} (<= 1e-9)"),
    );
}

fn cifar10_dir() -> Option<PathBuf> {
    let candidates = std::env::var_os("HOPE_CIFAR10_DIR")
        .map(PathBuf::from)
        .into_iter()
        .chain([
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar-10-batches-bin"),
            PathBuf::from("/data/cifar-10-batches-bin"),
        ]);
    for dir in candidates {
        for d in [dir.clone(), dir.join("cifar-10-batches-bin")] {
            if d.join("data_batch_1.bin").is_file() {
                return Some(d);
            }
        }
    }
    None
}

#[test]
fn loader_fidelity() {
    let _g = serial();
    let Some(dir) = cifar10_dir() else {
        report(
            "loader fidelity",
            false,
            "genuine CIFAR-10 binary batches not found (set HOPE_CIFAR10_DIR); criterion not evaluated",
        );
        return;
    };
    let mut notes = Vec::new();
    let mut ok = true;
    let files: Vec<String> = (1..=5)
        .map(|i| format!("data_batch_{i}.bin"))
        .chain(["test_batch.bin".to_string()])
        .collect();
    for name in &files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).unwrap();
        let records = read_record_file(&path, CifarFormat::Cifar10, 10_000).unwrap();
        let labels_ok = records.iter().all(|r| r.label <= 9);
        let identical = serialize_records(&records, CifarFormat::Cifar10) == bytes;
        ok &= records.len() == 10_000
            && labels_ok
            && identical
            && bytes.len() as u64 == CIFAR10_BATCH_BYTES;
        notes.push(format!(
            "{name}: {} records, labels ok {labels_ok}, byte-identical {identical}",
            records.len()
        ));
    }
    let tmp = tempfile::tempdir().unwrap();
    let cut = tmp.path().join("truncated.bin");
    let bytes = std::fs::read(dir.join(&files[0])).unwrap();
    std::fs::write(&cut, &bytes[..bytes.len() - 1000]).unwrap();
    let rejected = matches!(
        read_record_file(&cut, CifarFormat::Cifar10, 10_000),
        Err(Error::FileSize { .. })
    );
    ok &= rejected;
    notes.push(format!("truncated file rejected {rejected}"));
    report("loader fidelity", ok, &notes.join("; "));
}

fn reduced_net(constrained: bool, seed: u64) -> Network<f32> {
    let arch = if constrained {
        Architecture::HopeInput
    } else {
        Architecture::LinInput
    };
    Network::build(&stacked_config(arch, 10, 2), seed).unwrap()
}

fn train_for(
    net: &mut Network<f32>,
    train: &Dataset<f32>,
    val: &Dataset<f32>,
    epochs: usize,
    seed: u64,
) -> Vec<EpochMetrics> {
    let mut state = TrainState::new(net, Hyperparameters::default(), seed).unwrap();
    (0..epochs)
        .map(|_| run_epoch(net, &mut state, train, val, true).unwrap())
        .collect()
}

fn synthetic_signal() -> (bool, String) {
    let start = Instant::now();
    let (train, val) = synthetic_split::<f32>(800, 200, 10, 42, Colorspace::Yuv).unwrap();
    let mut net = reduced_net(true, 42);
    let mut state = TrainState::new(&net, Hyperparameters::default(), 42).unwrap();
    let mut reached = None;
    let mut acc = 0.0;
    for _ in 0..5 {
        let m = run_epoch(&mut net, &mut state, &train, &val, true).unwrap();
        acc = 1.0 - m.val_err;
        if acc > 0.9 {
            reached = Some(m.epoch);
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = reached.is_some() && secs < 180.0;
    let detail = match reached {
        Some(e) => format!("synthetic 800/200: {:.1}% val accuracy at epoch {e} (> 90% within 5), {secs:.0}s (< 180s)", acc * 100.0),
        None => format!("synthetic 800/200: {:.1}% after 5 epochs (> 90% required), {secs:.0}s", acc * 100.0),
    };
    (ok, detail)
}

fn cifar_signal(dir: &Path) -> (bool, String) {
    let start = Instant::now();
    let (train, val) =
        hope_cnn::data::load_cifar10::<f32>(dir, Colorspace::Yuv, Some(5000), Some(1000)).unwrap();
    let mut net = reduced_net(true, 1);
    let history = train_for(&mut net, &train, &val, 20, 1);
    let secs = start.elapsed();
    let (first, last) = (history[0], history[19]);
    let drop = 1.0 - last.penalty_sum / first.penalty_sum;
    let eval = evaluate(&net, &val, 100).unwrap();
    let ok = eval.error <= 0.6 && drop >= 0.5 && secs <= Duration::from_secs(30 * 60);
    (
        ok,
        format!(
            "CIFAR-10 5000/1000: val error {:.3} (<= 0.60), penalty {:.3} -> {:.3} ({:.0}% drop, >= 50%), {:.0}s (<= 1800s)",
            eval.error,
            first.penalty_sum,
            last.penalty_sum,
            drop * 100.0,
            secs.as_secs_f64()
        ),
    )
}

#[test]
fn desk_scale_training_signal() {
    let _g = serial();
    let (syn_ok, syn) = synthetic_signal();
    let (cifar_ok, cifar) = match cifar10_dir() {
        Some(dir) => cifar_signal(&dir),
        None => (
            false,
            "CIFAR-10 part not evaluated: genuine batches not found (set HOPE_CIFAR10_DIR)"
                .to_string(),
        ),
    };
    report(
        "desk-scale training signal",
        syn_ok && cifar_ok,
        &format!("{syn}; {cifar}"),
    );
}

#[test]
fn hope_vs_lin_differential() {
    let _g = serial();
    let (train, val) = synthetic_split::<f32>(800, 200, 10, 42, Colorspace::Yuv).unwrap();
    let mut measures = Vec::new();
    for constrained in [true, false] {
        let mut net = reduced_net(constrained, 42);
        train_for(&mut net, &train, &val, 2, 42);
        let (_, p) = net.projections().next().unwrap();
        measures.push(ortho_measure(&p.u).unwrap() as f64);
    }
    let (hope, lin) = (measures[0], measures[1]);
    report(
        "HOPE-vs-LIN differential",
        hope < lin && lin - hope > 0.1,
        &format!("final ortho_measure constrained {hope:.4} vs unconstrained {lin:.4}, gap {:.4} (> 0.1)", lin - hope),
    );
}

#[test]
fn determinism() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_hope-cnn"))
            .args([
                "train",
                "--arch",
                "hope_input",
                "--blocks",
                "2",
                "--dataset",
                "synthetic",
            ])
            .args([
                "--limit-train",
                "200",
                "--limit-val",
                "100",
                "--epochs",
                "2",
                "--batch",
                "50",
            ])
            .args(["--seed", "9", "--no-timing", "--out-dir"])
            .arg(dir)
            .env("HOPE_NET_THREADS", "1")
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(dir.join("metrics.csv")).unwrap()
    };
    let a = run(&tmp.path().join("a"));
    let b = run(&tmp.path().join("b"));
    let rows = String::from_utf8_lossy(&a).lines().count() - 1;
    report(
        "determinism",
        a == b && rows == 2,
        &format!("two train runs, HOPE_NET_THREADS=1: metrics.csv bitwise identical {} ({rows} rows, {} bytes)", a == b, a.len()),
    );
}
