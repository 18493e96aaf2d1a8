//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. The experiment criteria share one set of runs over five seeds.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use acp_core::evalkit::{compute_eer, ScoreRecord, ScoreSet};
use acp_core::experiment::{self, ExperimentConfig, Init, RunPaths};
use acp_core::losses::{pair_loss, Class, PairLabel};
use acp_core::nn::{check_case, layer_cases, CheckLoss, GradCheckOptions, Mode, Network, Tensor4};
use acp_core::optim::{AdamConfig, AdamState};
use acp_core::pairs::{pair_label, sample_pairs, PairBudget, UtteranceInfo};
use acp_core::synthcorpus::Split;
use acp_core::transfer::{self, CheckpointMeta, Phase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Half an EER percentage point, as a fraction.
const TIE: f64 = 0.005;

fn cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: clock_gettime only writes the timespec we pass.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "process CPU clock unavailable");
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn record(results: &mut Vec<Outcome>, name: &'static str, verdict: Result<String, String>) {
    let (pass, detail) = match verdict {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    results.push(Outcome { name, pass, detail });
}

fn gradient_fidelity() -> Result<String, String> {
    let start = cpu_seconds();
    let opts = GradCheckOptions::default();
    let mut worst = (0.0f64, String::new());
    let mut runs = 0;
    for seed in 0..20u64 {
        for (case, spec) in layer_cases(2) {
            for loss in [CheckLoss::CrossEntropy, CheckLoss::Pair] {
                let report = check_case(&spec, loss, seed, &opts).map_err(|e| format!("{case}: {e}"))?;
                runs += 1;
                if report.max_rel_error > worst.0 {
                    worst = (report.max_rel_error, format!("{case}/{loss:?}/seed {seed}"));
                }
                if !report.passed {
                    return Err(format!("{case} {loss:?} seed {seed}: max rel error {:.3e}", report.max_rel_error));
                }
            }
        }
    }
    let secs = cpu_seconds() - start;
    let detail = format!("{runs} checks, worst rel error {:.2e} ({}) < 1e-4, {secs:.1}s CPU", worst.0, worst.1);
    if secs < 120.0 {
        Ok(detail)
    } else {
        Err(format!("{detail}; exceeds 2 min"))
    }
}

fn pair_loss_contract() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst_sym = 0.0f64;
    let mut worst_scale = 0.0f64;
    for i in 0..10_000 {
        let dim = rng.random_range(2..=64);
        let x1: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut x2: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if i % 10 == 0 {
            // near-parallel pairs probe the Same-label upper region
            x2 = x1.iter().map(|v| v * 0.7 + 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
        }
        let label = if rng.random::<bool>() { PairLabel::Same } else { PairLabel::Different };
        let l = pair_loss(&x1, &x2, label).map_err(|e| e.to_string())?.loss;
        let (lo, hi) = match label {
            PairLabel::Same => (0.0, 2.0),
            PairLabel::Different => (0.0, 1.0),
        };
        if !(lo..=hi).contains(&l) {
            return Err(format!("pair {i}: loss {l} outside [{lo}, {hi}] for {label:?}"));
        }
        let swapped = pair_loss(&x2, &x1, label).map_err(|e| e.to_string())?.loss;
        worst_sym = worst_sym.max((l - swapped).abs());
        let a = 10f64.powf(rng.random_range(-3.0..3.0));
        let b = 10f64.powf(rng.random_range(-3.0..3.0));
        let s1: Vec<f64> = x1.iter().map(|v| v * a).collect();
        let s2: Vec<f64> = x2.iter().map(|v| v * b).collect();
        let scaled = pair_loss(&s1, &s2, label).map_err(|e| e.to_string())?.loss;
        worst_scale = worst_scale.max((l - scaled).abs());
    }
    let detail = format!("10^4 pairs, bounds hold, symmetry gap {worst_sym:.1e}, scale gap {worst_scale:.1e}");
    if worst_sym <= 1e-6 && worst_scale <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Independent EER: counts errors directly at every candidate threshold
/// (accept when score >= t) and interpolates at the sign change of FAR - FRR.
fn oracle_eer(scores: &[(f64, Class)]) -> f64 {
    let n_bona = scores.iter().filter(|s| s.1 == Class::Bonafide).count() as f64;
    let n_spoof = scores.len() as f64 - n_bona;
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let rates = |t: f64| {
        let fa = scores.iter().filter(|s| s.1 == Class::Spoof && s.0 >= t).count() as f64;
        let fr = scores.iter().filter(|s| s.1 == Class::Bonafide && s.0 < t).count() as f64;
        (fa / n_spoof, fr / n_bona)
    };
    let mut prev = rates(thresholds[0]);
    for &t in &thresholds {
        let (far, frr) = rates(t);
        if far - frr <= 0.0 {
            if far == frr {
                return far;
            }
            let (pfar, pfrr) = prev;
            let alpha = (pfar - pfrr) / ((pfar - pfrr) - (far - frr));
            return pfar + alpha * (far - pfar);
        }
        prev = (far, frr);
    }
    unreachable!("FAR reaches 0 at +inf")
}

fn score_set(scores: &[(f64, Class)]) -> ScoreSet {
    let records = scores
        .iter()
        .enumerate()
        .map(|(i, &(score, truth))| ScoreRecord { trial_id: format!("t{i}"), truth, score })
        .collect();
    ScoreSet::new(records).expect("valid scores")
}

fn eer_oracle_equivalence() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xeea);
    let mut worst = 0.0f64;
    for set in 0..100 {
        let n = if set < 10 { 10 + set } else { rng.random_range(10..=2000) };
        let bona_frac = rng.random_range(0.02..0.98);
        let shift = rng.random_range(-1.0..4.0);
        let quantise = set % 4 == 0;
        let mut scores: Vec<(f64, Class)> = (0..n)
            .map(|_| {
                let bona = rng.random_bool(bona_frac);
                let mut s: f64 = rng.sample(StandardNormal);
                if bona {
                    s += shift;
                }
                if quantise {
                    s = (s * 2.0).round() / 2.0;
                }
                (s, if bona { Class::Bonafide } else { Class::Spoof })
            })
            .collect();
        // both classes present
        scores[0].1 = Class::Bonafide;
        scores[1].1 = Class::Spoof;
        let got = compute_eer(&score_set(&scores)).map_err(|e| e.to_string())?.eer;
        let want = oracle_eer(&scores);
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 1e-9 {
            return Err(format!("set {set} (n={n}): compute_eer {got} vs oracle {want}"));
        }
    }
    let separated: Vec<(f64, Class)> = (0..50)
        .map(|i| (i as f64, if i >= 20 { Class::Bonafide } else { Class::Spoof }))
        .collect();
    let sep = compute_eer(&score_set(&separated)).map_err(|e| e.to_string())?.eer;
    let tied: Vec<(f64, Class)> = (0..37).map(|i| (0.25, if i % 3 == 0 { Class::Bonafide } else { Class::Spoof })).collect();
    let tie = compute_eer(&score_set(&tied)).map_err(|e| e.to_string())?.eer;
    if sep != 0.0 || tie != 0.5 {
        return Err(format!("separated gives {sep}, identical scores give {tie}"));
    }
    Ok(format!("100 sets, max gap {worst:.1e}; separated -> 0, identical -> 0.5"))
}

fn pair_sampler_exactness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa1b);
    let mut total = 0;
    for m in 0..50 {
        let speakers = rng.random_range(1..=20);
        let mut utts = Vec::new();
        for s in 0..speakers {
            for u in 0..rng.random_range(2..=8) {
                utts.push(UtteranceInfo { id: format!("m{m}s{s}u{u}"), speaker: format!("s{s}"), frames: rng.random_range(2..=400) });
            }
        }
        let pps = 2 * rng.random_range(1..=100);
        let budget = PairBudget { pairs_per_speaker: pps, target_fraction: 0.5, seed: rng.random() };
        let pairs = sample_pairs(&utts, &budget, 200).map_err(|e| format!("manifest {m}: {e}"))?;
        for s in 0..speakers {
            let name = format!("s{s}");
            let mine: Vec<_> = pairs.iter().filter(|p| utts[p.utt_a].speaker == name).collect();
            let same = mine.iter().filter(|p| p.label == PairLabel::Same).count();
            if mine.len() != pps || 2 * same != pps {
                return Err(format!("manifest {m} speaker {name}: {} pairs, {same} positive, budget {pps}", mine.len()));
            }
        }
        for p in &pairs {
            let (a, b) = (&utts[p.utt_a], &utts[p.utt_b]);
            if a.speaker != b.speaker || pair_label(a, b) != Ok(p.label) {
                return Err(format!("manifest {m}: bad pair {} / {}", a.id, b.id));
            }
            if p.label == PairLabel::Same && p.offset_a == p.offset_b {
                return Err(format!("manifest {m}: positive pair with equal offsets"));
            }
        }
        total += pairs.len();
    }
    Ok(format!("50 manifests, {total} pairs, exact per-speaker counts and balance, no cross-speaker pairs"))
}

fn trained(net: &mut Network<f32>, adam: &mut AdamState, seed: u64, frames: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = net.spec().clone();
    for _ in 0..3 {
        let dims = [4, frames, spec.input_bins, 1];
        let x = Tensor4::from_vec(dims, (0..dims.iter().product()).map(|_| rng.sample(StandardNormal)).collect());
        let pass = net.forward(&x, Mode::Train).expect("forward");
        let g = Tensor4::from_vec(pass.output.dims(), (0..pass.output.data().len()).map(|_| rng.sample(StandardNormal)).collect());
        let grads = net.backward(&pass, &g, false).expect("backward");
        adam.step(net.params_mut(), &grads.params).expect("step");
    }
}

fn bits_equal(a: &Network<f32>, b: &Network<f32>) -> Result<(), String> {
    for (x, y) in a.params().tensors.iter().zip(&b.params().tensors) {
        if x.name != y.name || x.dims != y.dims || x.data.iter().zip(&y.data).any(|(p, q)| p.to_bits() != q.to_bits()) {
            return Err(format!("tensor {} differs", x.name));
        }
    }
    Ok(())
}

fn checkpoint_roundtrip(dir: &Path) -> Result<String, String> {
    let cfg = ExperimentConfig::default();
    let mut pre = Network::<f32>::build(&cfg.net.embedder_spec(), 11).map_err(|e| e.to_string())?;
    let mut adam = AdamState::new(AdamConfig::with_lr(1e-3), pre.params());
    trained(&mut pre, &mut adam, 12, cfg.pre_crop_frames);
    let meta = CheckpointMeta { phase: Phase::Pretrain, seed: 11, epoch: 2, frozen_upto: None };
    let path = dir.join("roundtrip.ckpt");
    transfer::save_checkpoint(&pre, Some(&adam), &meta, &path).map_err(|e| e.to_string())?;
    let back = transfer::load_checkpoint(&path).map_err(|e| e.to_string())?;
    bits_equal(&pre, &back.network)?;
    let buffers = pre.params().tensors.iter().filter(|t| t.name.contains("running")).count();
    let moments = back.adam.as_ref().ok_or("Adam state missing")?;
    let same_moments = moments.t == adam.t
        && moments.m.iter().flatten().zip(adam.m.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits())
        && moments.v.iter().flatten().zip(adam.v.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same_moments || back.meta != meta {
        return Err("Adam moments or metadata changed on reload".into());
    }

    let mut main = Network::<f32>::build(&cfg.net.classifier_spec(), 99).map_err(|e| e.to_string())?;
    transfer::transfer_weights(&back, &mut main, None).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let dims = [3, cfg.main_crop_frames, cfg.net.input_bins, 1];
    let probe = Tensor4::from_vec(dims, (0..dims.iter().product()).map(|_| rng.sample(StandardNormal)).collect());
    let want = pre.infer(&probe).map_err(|e| e.to_string())?.embedding;
    let got = main.infer(&probe).map_err(|e| e.to_string())?.embedding;
    if want.data().iter().zip(got.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("transferred prefix forward differs from the pre-trained forward".into());
    }
    Ok(format!("{} tensors ({buffers} running-stat buffers) and Adam moments bit-exact; probe embeddings bit-equal", pre.params().len()))
}

#[derive(Default)]
struct SeedRuns {
    random: f64,
    pretrained: f64,
    half: f64,
    doubled: f64,
    frozen: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn eval_main(cfg: &ExperimentConfig, seed: u64, bank: &experiment::FeatureBank, init: &Init, out: &Path) -> Result<f64, String> {
    let main = experiment::train_main(cfg, seed, bank, init, out).map_err(|e| e.to_string())?;
    let ck = transfer::load_checkpoint(&main.best).map_err(|e| e.to_string())?;
    Ok(experiment::evaluate(&ck, bank, Split::Eval, out).map_err(|e| e.to_string())?.eer)
}

fn pretrained_init(cfg: &ExperimentConfig, seed: u64, bank: &experiment::FeatureBank, out: &Path) -> Result<Init, String> {
    let o = experiment::pretrain(cfg, seed, bank, out).map_err(|e| e.to_string())?;
    Ok(Init::Pretrained(Box::new(transfer::load_checkpoint(&o.best).map_err(|e| e.to_string())?)))
}

struct Experiments {
    runs: Vec<SeedRuns>,
    central_cpu: f64,
    base: ExperimentConfig,
}

fn experiments(root: &Path) -> Result<Experiments, String> {
    let base = ExperimentConfig { output_dir: root.to_path_buf(), ..ExperimentConfig::default() };
    let mut runs = Vec::new();
    let mut central_cpu = 0.0;
    for seed in SEEDS {
        let wall = Instant::now();
        let t0 = cpu_seconds();
        let random = experiment::run_pipeline(&base, seed, false).map_err(|e| e.to_string())?;
        let pre = experiment::run_pipeline(&base, seed, true).map_err(|e| e.to_string())?;
        central_cpu += cpu_seconds() - t0;

        let paths = RunPaths::new(&base, seed);
        let pre_bank = experiment::load_bank(&base, &paths.data(), "pretrain").map_err(|e| e.to_string())?;
        let main_bank = experiment::load_bank(&base, &paths.data(), "main").map_err(|e| e.to_string())?;

        let half_cfg = ExperimentConfig { pretrain_speaker_fraction: 0.5, ..base.clone() };
        let half_init = pretrained_init(&half_cfg, seed, &pre_bank, &paths.root.join("pretrain_half"))?;
        let half = eval_main(&base, seed, &main_bank, &half_init, &paths.train("half"))?;

        let mut dbl_cfg = base.clone();
        dbl_cfg.pairs.pairs_per_speaker *= 2;
        let dbl_init = pretrained_init(&dbl_cfg, seed, &pre_bank, &paths.root.join("pretrain_doubled"))?;
        let doubled = eval_main(&base, seed, &main_bank, &dbl_init, &paths.train("doubled"))?;

        let full = transfer::load_checkpoint(&pre.pretrain.as_ref().expect("pretrained arm").best).map_err(|e| e.to_string())?;
        let frz_cfg = ExperimentConfig { freeze_upto: Some(base.net.last_block_layer()), ..base.clone() };
        let frozen = eval_main(&frz_cfg, seed, &main_bank, &Init::Pretrained(Box::new(full)), &paths.train("frozen"))?;

        let r = SeedRuns { random: random.eval.eer, pretrained: pre.eval.eer, half, doubled, frozen };
        println!(
            "  seed {seed}: eval EER random {:.4} pretrained {:.4} half {:.4} doubled {:.4} frozen {:.4} ({:.0}s)",
            r.random,
            r.pretrained,
            r.half,
            r.doubled,
            r.frozen,
            wall.elapsed().as_secs_f64()
        );
        runs.push(r);
    }
    Ok(Experiments { runs, central_cpu, base })
}

fn central_claim(x: &Experiments) -> Result<String, String> {
    let r = mean(x.runs.iter().map(|s| s.random));
    let p = mean(x.runs.iter().map(|s| s.pretrained));
    let rel = 1.0 - p / r;
    let detail = format!(
        "mean eval EER random {:.2}% -> pretrained {:.2}% ({:.1}% relative), {:.1} min CPU",
        100.0 * r,
        100.0 * p,
        100.0 * rel,
        x.central_cpu / 60.0
    );
    if p < r && rel >= 0.10 && x.central_cpu < 15.0 * 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn at_most(name: &str, better: f64, worse: f64, better_name: &str, worse_name: &str) -> Result<String, String> {
    let detail = format!("{name}: {better_name} {:.2}% vs {worse_name} {:.2}%", 100.0 * better, 100.0 * worse);
    if better <= worse + TIE {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism(x: &Experiments, root: &Path) -> Result<String, String> {
    let again = ExperimentConfig { output_dir: root.join("rerun"), ..x.base.clone() };
    let seed = SEEDS[0];
    experiment::run_pipeline(&again, seed, true).map_err(|e| e.to_string())?;
    let a = RunPaths::new(&x.base, seed);
    let b = RunPaths::new(&again, seed);
    let mut files: Vec<PathBuf> = Vec::new();
    for name in ["dev_scores.tsv", "eval_scores.tsv", "dev_det.csv", "eval_det.csv"] {
        files.push(Path::new("eval_pretrained").join(name));
    }
    files.push(PathBuf::from("pretrain/best.ckpt"));
    files.push(PathBuf::from("train_pretrained/best.ckpt"));
    files.push(PathBuf::from("data/main.tsv"));
    for f in &files {
        let left = fs::read(a.root.join(f)).map_err(|e| format!("{}: {e}", f.display()))?;
        let right = fs::read(b.root.join(f)).map_err(|e| format!("{}: {e}", f.display()))?;
        if left != right {
            return Err(format!("{} differs between identical runs", f.display()));
        }
    }
    Ok(format!("{} artifacts byte-identical across reruns of seed {seed}", files.len()))
}

fn main() {
    let mut results = Vec::new();
    let dir = tempfile::tempdir().expect("temp dir");

    record(&mut results, "gradient fidelity", gradient_fidelity());
    record(&mut results, "pair loss contract", pair_loss_contract());
    record(&mut results, "EER oracle equivalence", eer_oracle_equivalence());
    record(&mut results, "pair sampler exactness", pair_sampler_exactness());
    record(&mut results, "checkpoint roundtrip", checkpoint_roundtrip(dir.path()));

    match experiments(dir.path()) {
        Ok(x) => {
            let m = |f: fn(&SeedRuns) -> f64| mean(x.runs.iter().map(f));
            record(&mut results, "central claim", central_claim(&x));
            record(
                &mut results,
                "data scaling",
                at_most("mean eval EER", m(|s| s.pretrained), m(|s| s.half), "all speakers", "half speakers"),
            );
            record(
                &mut results,
                "pair doubling",
                at_most("mean eval EER", m(|s| s.doubled), m(|s| s.pretrained), "doubled pairs", "single budget"),
            );
            record(
                &mut results,
                "freezing",
                at_most("mean eval EER", m(|s| s.pretrained), m(|s| s.frozen), "fine-tuned", "frozen through last block"),
            );
            record(&mut results, "determinism", determinism(&x, dir.path()));
        }
        Err(e) => {
            for name in ["central claim", "data scaling", "pair doubling", "freezing", "determinism"] {
                record(&mut results, name, Err(format!("experiment runs failed: {e}")));
            }
        }
    }

    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        for r in results.iter().filter(|r| !r.pass) {
            eprintln!("failed: {} ({})", r.name, r.detail);
        }
        std::process::exit(1);
    }
}
