//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Criteria 6-8 train the full desk pipeline twice (once through the
//! binary, once in process), which takes a while on a single core.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use clap::Parser as _;
use mgms::conditioning::{embed_style, style_from_scalar};
use mgms::data::{ink_density, read_split};
use mgms::gradsuite::full_suite;
use mgms::losses::{mim_loss, MimNorm};
use mgms::masking::{apply_mask, inference_masked_count, sample_ratio, MaskedTokens, MASK_SENTINEL};
use mgms::pipeline::{decode_checkpoint, encode_checkpoint, iterative_decode_with, synthesize, Checkpoint, InferenceConfig, Model};
use mgms::rng::rng_for;
use mgms::tensor::{Graph, Tensor};
use mgms::transformer::{TokenLogits, TokenPredictor};
use mgms::vq::{quantize_nearest, reconstruction_error, TokenGrid};
use mgms::GrayImage;
use mgms_cli::Cli;
use rand::Rng as _;

const SEED: u64 = 0;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

type Outcome = Result<Verdict, String>;

fn main() -> ExitCode {
    // honour `cargo test -- <filter>` loosely: any filter other than
    // "acceptance" skips the suite
    if std::env::args().skip(1).any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let out = f();
        let line = match &out {
            Ok(v) => format!("{} {name}: {} ({:.1}s)", if v.passed { "PASS" } else { "FAIL" }, v.detail, t.elapsed().as_secs_f64()),
            Err(e) => format!("FAIL {name}: error: {e}"),
        };
        println!("{line}");
        results.push((name, out));
    };

    record("1 gradient suite", &gradient_suite);
    record("2 mask schedule", &mask_schedule);
    record("3 masking and MIM loss semantics", &masking_semantics);
    record("4 quantizer oracle", &quantizer_oracle);
    record("5 decoding invariants", &decoding_invariants);

    let pipeline = desk_pipeline();
    record("6 end-to-end desk benchmark", &|| benchmark(pipeline.as_ref().map_err(Clone::clone)?));
    record("7 style behaviour", &|| style_behaviour(pipeline.as_ref().map_err(Clone::clone)?));
    record("8 determinism and persistence", &|| determinism(pipeline.as_ref().map_err(Clone::clone)?));

    let failed = results.iter().filter(|(_, r)| !matches!(r, Ok(v) if v.passed)).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let cases = full_suite().map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    let worst = cases.iter().filter(|c| c.name != "end_to_end.mim").map(|c| c.error).fold(0.0, f64::max);
    let e2e = cases.iter().find(|c| c.name == "end_to_end.mim").map_or(f64::NAN, |c| c.error);
    Ok(verdict(
        failed.is_empty() && elapsed <= Duration::from_secs(120),
        format!("{} checks, worst primitive {worst:.2e}, end-to-end {e2e:.2e}, {:.1}s, failed {failed:?}", cases.len(), elapsed.as_secs_f64()),
    ))
}

fn mask_schedule() -> Outcome {
    const DRAWS: usize = 100_000;
    let mut rng = rng_for(SEED, "acceptance-mask");
    let mut ratios: Vec<f64> = (0..DRAWS).map(|_| sample_ratio(256, &mut rng).ratio).collect();
    let mean = ratios.iter().sum::<f64>() / DRAWS as f64;
    // R = cos(pi U / 2) has CDF F(x) = 1 - (2/pi) acos(x) on [0, 1]
    ratios.sort_by(f64::total_cmp);
    let cdf = |x: f64| 1.0 - 2.0 / PI * x.clamp(0.0, 1.0).acos();
    let n = DRAWS as f64;
    let d = ratios
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let critical = 1.6276 / n.sqrt();
    let target = 2.0 / PI;
    Ok(verdict(
        (mean - target).abs() <= 0.01 && d < critical,
        format!("mean {mean:.5} vs {target:.5}, KS D {d:.5} < {critical:.5}"),
    ))
}

fn masking_semantics() -> Outcome {
    let err = |e: mgms::Error| e.to_string();
    // exhaustive substitution rule
    let mut cases = 0usize;
    for n in 1..=6usize {
        for c in 1..=4usize {
            for code in 0..c.pow(n as u32) {
                let tokens: Vec<usize> = (0..n).map(|i| code / c.pow(i as u32) % c).collect();
                let z = TokenGrid::new(tokens.clone(), 1, n, c).map_err(err)?;
                for bits in 0..1u32 << n {
                    let mask: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
                    let m = apply_mask(&z, &mask).map_err(err)?;
                    for i in 0..n {
                        let want = if mask[i] { MASK_SENTINEL } else { tokens[i] as i64 };
                        if m.values()[i] != want || m.mask()[i] != mask[i] {
                            return Ok(verdict(false, format!("apply_mask mismatch at N={n} C={c} tokens {tokens:?} mask {mask:?}")));
                        }
                    }
                    cases += 1;
                }
            }
        }
    }

    // cross-entropy oracle and gradient support
    let mut rng = rng_for(SEED, "acceptance-mim");
    let (batch, n, c) = (3usize, 6usize, 5usize);
    let mut worst = 0.0f64;
    let mut leaked = 0usize;
    for trial in 0..50 {
        let logits: Vec<f64> = (0..batch * n * c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let targets: Vec<usize> = (0..batch * n).map(|_| rng.random_range(0..c)).collect();
        let mut mask: Vec<bool> = (0..batch * n).map(|_| rng.random_bool(0.5)).collect();
        for b in 0..batch {
            mask[b * n + (trial + b) % n] = true;
        }

        let mut oracle = 0.0;
        for b in 0..batch {
            let (mut sum, mut count) = (0.0, 0.0);
            for i in b * n..(b + 1) * n {
                if !mask[i] {
                    continue;
                }
                let row = &logits[i * c..(i + 1) * c];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                sum += -(row[targets[i]].exp() / z).ln();
                count += 1.0;
            }
            oracle += sum / count;
        }
        oracle /= batch as f64;

        let leaf = Tensor::new(&[batch * n, c], logits).map_err(err)?.with_grad();
        let mut g = Graph::new();
        let l = g.leaf(&leaf);
        let loss = mim_loss(&mut g, l, &targets, &mask, batch, MimNorm::Masked).map_err(err)?;
        worst = worst.max((g.value(loss)[0] - oracle).abs());
        let grads = g.backward(loss).map_err(err)?;
        let grad = grads.wrt(l).ok_or("no gradient for logits")?;
        leaked += (0..batch * n).filter(|&i| !mask[i] && grad[i * c..(i + 1) * c].iter().any(|&v| v != 0.0)).count();
    }
    Ok(verdict(
        worst <= 1e-9 && leaked == 0,
        format!("{cases} exhaustive substitutions exact, loss error {worst:.1e}, {leaked} unmasked rows with gradient"),
    ))
}

fn quantizer_oracle() -> Outcome {
    let err = |e: mgms::Error| e.to_string();
    let (c, d) = (64usize, 8usize);
    let mut rng = rng_for(SEED, "acceptance-quantizer");
    let brute = |x: &[f32], book: &[f32]| {
        let mut best = (f32::INFINITY, 0);
        for k in 0..c {
            let dist: f32 = x.iter().zip(&book[k * d..(k + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, k);
            }
        }
        best.1
    };

    // continuous codebook with duplicated rows, and a small integer lattice
    // where equal distances are common
    let mut smooth: Vec<f32> = (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    for k in [5, 17, 40, 63] {
        smooth.copy_within(k * d..(k + 1) * d, (k - 3) * d);
    }
    let lattice: Vec<f32> = (0..c * d).map(|_| rng.random_range(-1i32..=1) as f32).collect();

    let (mut agree, mut ties) = (0, 0);
    for i in 0..1000 {
        let (book, x): (&[f32], Vec<f32>) = if i % 2 == 0 {
            let x = if i % 10 == 0 {
                // exactly on a duplicated entry
                smooth[2 * d..3 * d].to_vec()
            } else {
                (0..d).map(|_| rng.random_range(-1.2..1.2)).collect()
            };
            (&smooth, x)
        } else {
            (&lattice, (0..d).map(|_| rng.random_range(-1i32..=1) as f32).collect())
        };
        let want = brute(&x, book);
        let best: f32 = x.iter().zip(&book[want * d..(want + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum();
        let tied = (0..c)
            .filter(|&k| x.iter().zip(&book[k * d..(k + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum::<f32>() == best)
            .count();
        ties += usize::from(tied > 1);
        let got = quantize_nearest(&x, &Tensor::new(&[c, d], book.to_vec()).map_err(err)?).map_err(err)?;
        agree += usize::from(got == [want]);
    }
    Ok(verdict(agree == 1000 && ties > 0, format!("{agree}/1000 indices agree, {ties} vectors with tied nearest entries")))
}

/// Logits hashed from the whole current grid.
struct Hashing {
    side: usize,
    vocab: usize,
    calls: RefCell<usize>,
}

impl TokenPredictor for Hashing {
    fn grid(&self) -> (usize, usize) {
        (self.side, self.side)
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn predict(&self, masked: &MaskedTokens) -> mgms::Result<TokenLogits> {
        *self.calls.borrow_mut() += 1;
        let mut h = 0x51_7cc1_b727_220au64;
        for &v in masked.values() {
            h = (h ^ v as u64).wrapping_mul(0x0100_0000_01b3);
        }
        let values = (0..self.side * self.side * self.vocab)
            .map(|i| {
                h = (h ^ i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(23);
                (h >> 11) as f64 / (1u64 << 53) as f64 * 5.0
            })
            .collect();
        TokenLogits::new(self.side, self.side, self.vocab, values)
    }
}

fn decoding_invariants() -> Outcome {
    let t = Instant::now();
    let mut runs = 0;
    let mut problems = Vec::new();
    for side in [2usize, 4, 8, 16] {
        let n = side * side;
        for steps in [1usize, 2, 4, 8] {
            for (seed, temperature) in [(0u64, 0.0), (1, 1.0)] {
                let p = Hashing { side, vocab: 11, calls: RefCell::new(0) };
                let mut prev = MaskedTokens::fully_masked(n);
                let mut bad = None;
                let grid = iterative_decode_with(&p, steps, temperature, &mut rng_for(seed, "acceptance-decode"), |t, cur| {
                    let expected = inference_masked_count(t - 1, steps, n).expect("valid time");
                    if cur.masked_count() != expected {
                        bad.get_or_insert(format!("N={n} T={steps} t={t}: {} masked, schedule {expected}", cur.masked_count()));
                    }
                    if (0..n).any(|i| !prev.mask()[i] && (cur.mask()[i] || cur.values()[i] != prev.values()[i])) {
                        bad.get_or_insert(format!("N={n} T={steps} t={t}: a revealed token changed"));
                    }
                    prev = cur.clone();
                })
                .map_err(|e| e.to_string())?;
                if prev.values().contains(&MASK_SENTINEL) || grid.len() != n || *p.calls.borrow() != steps {
                    bad.get_or_insert(format!("N={n} T={steps}: final grid incomplete"));
                }
                problems.extend(bad);
                runs += 1;
            }
        }
    }
    let elapsed = t.elapsed();
    Ok(verdict(
        problems.is_empty() && elapsed <= Duration::from_secs(60),
        format!("{runs} decodes, {} violations {:?}", problems.len(), problems.first()),
    ))
}

/// Artifacts of the scripted run plus a second in-process run.
#[derive(Clone)]
struct Pipeline {
    _tmp: std::sync::Arc<tempfile::TempDir>,
    a: PathBuf,
    b: Option<PathBuf>,
    wall: Duration,
}

fn desk_pipeline() -> Result<Pipeline, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let seed = SEED.to_string();

    let t = Instant::now();
    for cmd in ["gen-data", "train-vq", "pretrain", "finetune", "eval"] {
        let out = Command::new(env!("CARGO_BIN_EXE_mgms"))
            .args([cmd, "--seed", &seed, "--out"])
            .arg(&a)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("mgms {cmd} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
        }
        println!("  run A: {cmd} done at {:.0}s", t.elapsed().as_secs_f64());
    }
    let wall = t.elapsed();

    let t = Instant::now();
    let mut b_ok = true;
    for cmd in ["gen-data", "train-vq", "pretrain", "finetune", "eval"] {
        let cli = Cli::try_parse_from(["mgms", cmd, "--seed", &seed, "--out", b.to_str().ok_or("non-UTF-8 temp path")?]).map_err(|e| e.to_string())?;
        if let Err(e) = mgms_cli::run(cli.command) {
            println!("  run B: {cmd} failed: {e:#}");
            b_ok = false;
            break;
        }
    }
    println!("  run B: in-process pipeline done at {:.0}s", t.elapsed().as_secs_f64());
    Ok(Pipeline { _tmp: std::sync::Arc::new(tmp), a, b: b_ok.then_some(b), wall })
}

fn load(path: &Path) -> Result<Model, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    decode_checkpoint(&bytes).and_then(|c| c.to_model()).map_err(|e| e.to_string())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn report_value(report: &str, key: &str) -> Result<f64, String> {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .ok_or_else(|| format!("report lacks {key}"))?
        .parse()
        .map_err(|e| format!("{key}: {e}"))
}

fn benchmark(p: &Pipeline) -> Outcome {
    let err = |e: mgms::Error| e.to_string();
    let codec = load(&p.a.join("checkpoints/codec.ckpt"))?;
    let heldout = read_split(&p.a.join("corpus/heldout")).map_err(err)?;
    let sketches: Vec<GrayImage> = heldout.iter().map(|x| x.sketch.clone()).collect();
    let l1 = reconstruction_error(&codec.codec, &sketches).map_err(err)?;

    let log = std::fs::read_to_string(p.a.join("logs/pretrain.log")).map_err(|e| e.to_string())?;
    let mim: Vec<f64> = log
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().nth(2).and_then(|v| v.parse().ok()).ok_or(format!("bad log line {l:?}")))
        .collect::<Result<_, _>>()?;
    if mim.len() < 100 {
        return Err(format!("pretrain log has only {} steps", mim.len()));
    }
    let (first, last) = (mean(&mim[..50]), mean(&mim[mim.len() - 50..]));
    let fall = 1.0 - last / first;

    let report = std::fs::read_to_string(p.a.join("eval/heldout/report.txt")).map_err(|e| e.to_string())?;
    let (ssim, baseline) = (report_value(&report, "mean_ssim")?, report_value(&report, "baseline_ssim")?);
    let budget = Duration::from_secs(20 * 60);

    let checks = [l1 < 0.08, fall >= 0.5, ssim - baseline >= 0.05, p.wall <= budget];
    Ok(verdict(
        checks.iter().all(|&c| c),
        format!(
            "stage-0 L1 {l1:.4} (<0.08), MIM {first:.3}->{last:.3} fell {:.0}% (>=50%), SSIM {ssim:.3} vs baseline {baseline:.3} (+{:.3}, >=0.05), wall {:.0}s on {} core(s) (<=1200s)",
            fall * 100.0,
            ssim - baseline,
            p.wall.as_secs_f64(),
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    ))
}

fn style_behaviour(p: &Pipeline) -> Outcome {
    let err = |e: mgms::Error| e.to_string();
    let model = load(&p.a.join("checkpoints/finetune.ckpt"))?;
    let k = model.config.transformer.num_styles;
    let anchors = model.transformer.style_anchors().cast::<f64>();
    let d = anchors.shape()[1];
    let (a, b) = (&anchors.data()[..d], &anchors.data()[d..2 * d]);
    let embed = |s: f64| embed_style(&style_from_scalar(s, 0, 1, k)?, &anchors).map(|e| e.vector);

    let mut linear = embed(0.0).map_err(err)? == a && embed(1.0).map_err(err)? == b;
    let gap: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let embeds: Vec<Vec<f64>> = grid.iter().map(|&s| embed(s)).collect::<Result<_, _>>().map_err(err)?;
    for (i, ei) in embeds.iter().enumerate() {
        let s = grid[i];
        let exact = a.iter().zip(b).map(|(x, y)| (1.0 - s) * x + s * y);
        linear &= ei.iter().zip(exact).all(|(v, w)| (v - w).abs() <= 1e-12 * (1.0 + w.abs()));
        for (j, ej) in embeds.iter().enumerate() {
            let dist: f64 = ei.iter().zip(ej).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            linear &= (dist - (s - grid[j]).abs() * gap).abs() <= 1e-12 * (1.0 + gap);
        }
    }

    // which way does ink density separate the two anchor styles in training data?
    let train = read_split(&p.a.join("corpus/finetune")).map_err(err)?;
    let ink_of = |style| mean(&train.iter().filter(|x| x.style == style).map(|x| ink_density(&x.sketch)).collect::<Vec<_>>());
    let direction = (ink_of(1) - ink_of(0)).signum();

    let heldout = read_split(&p.a.join("corpus/heldout")).map_err(err)?;
    let photos: Vec<&GrayImage> = heldout.iter().map(|x| &x.photo).take(32).collect();
    let cfg = InferenceConfig::default();
    let mut consistent = 0;
    for photo in &photos {
        let at = |s| synthesize(&model, photo, &InferenceConfig { style: s, ..cfg.clone() }).map(|img| ink_density(&img));
        let delta = at(1.0).map_err(err)? - at(0.0).map_err(err)?;
        consistent += usize::from(delta * direction > 0.0);
    }
    let needed = (photos.len() * 3).div_ceil(4);
    Ok(verdict(
        linear && photos.len() == 32 && consistent >= needed,
        format!("embedding linear and Lipschitz-exact: {linear}; ink ordering consistent on {consistent}/{} photos (>= {needed})", photos.len()),
    ))
}

fn tree(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| format!("{}: {e}", d.display()))? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
                out.insert(p.strip_prefix(dir).expect("under root").to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

fn determinism(p: &Pipeline) -> Outcome {
    let b = p.b.as_ref().ok_or("second run failed")?;
    let (ta, tb) = (tree(&p.a)?, tree(b)?);
    let differing: Vec<_> = ta.iter().filter(|(k, v)| tb.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let same_files = ta.len() == tb.len() && differing.is_empty();
    let images = ta.keys().filter(|k| k.starts_with("eval")).count();
    let checkpoints = ta.keys().filter(|k| k.starts_with("checkpoints")).count();

    let mut round_trip = true;
    for stage in ["codec", "pretrain", "finetune"] {
        let bytes = &ta[Path::new(&format!("checkpoints/{stage}.ckpt"))];
        let ck = decode_checkpoint(bytes).map_err(|e| e.to_string())?;
        round_trip &= encode_checkpoint(&ck).map_err(|e| e.to_string())? == *bytes;
        let model = ck.to_model().map_err(|e| e.to_string())?;
        round_trip &= encode_checkpoint(&Checkpoint::from_model(&model)).map_err(|e| e.to_string())? == *bytes;
    }
    Ok(verdict(
        same_files && checkpoints == 3 && images > 0 && round_trip,
        format!(
            "{} files compared ({checkpoints} checkpoints, {images} eval outputs), {} differ {:?}; checkpoint round-trip exact: {round_trip}",
            ta.len(),
            differing.len(),
            differing.first()
        ),
    ))
}
