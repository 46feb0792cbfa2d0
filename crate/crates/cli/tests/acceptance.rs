//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. The real-checkpoint check runs only when `SD_CHECKPOINT` names a
//! safetensors file.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use attn_surgery::attention::{attention_map, attention_output};
use attn_surgery::baseline::{compare_closed_form, OptimizerConfig};
use attn_surgery::debias::{
    aggregate_delta, delta_p, search_lambda, BiasObservation, SearchConfig,
};
use attn_surgery::edit::{multi_edit, EditContext, LayerPattern, ModelWeights};
use attn_surgery::eval::{aggregate, evaluate_dataset, harmonic_mean, EvalReport};
use attn_surgery::linalg::{ridge_closed_form, ridge_loss, Matrix, RidgeProblem, Vector};
use attn_surgery::rng::Xoshiro256;
use attn_surgery::synthetic::{edit_fixture, random_ridge_problem, EditFixture, LAMBDA_GRID};
use attn_surgery::tensor_store::{parse_file, Dtype, TensorFile, TensorWriter};
use attn_surgery_cli::cmd::inspect::{inspect, InspectArgs};
use attn_surgery_cli::PatternArgs;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, message: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(message())
    }
}

fn instance(rng: &mut Xoshiro256, i: usize) -> RidgeProblem {
    random_ridge_problem(rng, 16, 8, LAMBDA_GRID[i % LAMBDA_GRID.len()])
}

fn numeric_gradient(problem: &RidgeProblem, w: &Matrix, h: f64) -> Matrix {
    let mut g = Matrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let mut plus = w.clone();
            plus.row_mut(i)[j] += h;
            let mut minus = w.clone();
            minus.row_mut(i)[j] -= h;
            let d = ridge_loss(problem, &plus).unwrap() - ridge_loss(problem, &minus).unwrap();
            g.row_mut(i)[j] = d / (2.0 * h);
        }
    }
    g
}

/// `‖∂data‖_F + ‖∂reg‖_F` at `w`, the scale the net gradient is measured against.
fn gradient_scale(problem: &RidgeProblem, w: &Matrix) -> f64 {
    let mut data = Matrix::zeros(w.rows(), w.cols());
    for (c, t) in problem.inputs().iter().zip(problem.targets()) {
        let r = w.matvec(c.as_slice()).unwrap().add(&t.scale(-1.0));
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                data.row_mut(i)[j] += 2.0 * r.as_slice()[i] * c.as_slice()[j];
            }
        }
    }
    let reg = w
        .sub(problem.original())
        .unwrap()
        .scale(2.0 * problem.lambda());
    data.frobenius_norm() + reg.frobenius_norm()
}

fn closed_form_correctness() -> Check {
    let mut rng = Xoshiro256::seed_from_u64(0xacce_0001);
    let mut worst_gradient = 0.0f64;
    for i in 0..200 {
        let p = instance(&mut rng, i);
        let w = ridge_closed_form(&p).map_err(|e| e.to_string())?;
        let rel =
            numeric_gradient(&p, &w, 1e-3).frobenius_norm() / gradient_scale(&p, &w).max(1e-300);
        worst_gradient = worst_gradient.max(rel);
        ensure(rel <= 1e-5, || {
            format!("instance {i}: relative gradient {rel:e}")
        })?;
        let best = ridge_loss(&p, &w).unwrap();
        let slack = 1e-12 * (1.0 + best);
        ensure(
            best <= ridge_loss(&p, p.original()).unwrap() + slack,
            || format!("instance {i}: original W has lower loss"),
        )?;
        for k in 0..100 {
            let size = 10f64.powi(-(k % 7));
            let d = Matrix::new(w.rows(), w.cols(), rng.normal_vec(w.rows() * w.cols())).unwrap();
            let probe = ridge_loss(&p, &w.add(&d.scale(size)).unwrap()).unwrap();
            ensure(best <= probe + slack, || {
                format!("instance {i}: perturbation {k} has lower loss")
            })?;
        }
    }
    Ok(format!(
        "200 instances, worst relative gradient {worst_gradient:.2e}"
    ))
}

fn oracle_equivalence() -> Check {
    let mut rng = Xoshiro256::seed_from_u64(0xacce_0002);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let p = instance(&mut rng, i);
        let gap = compare_closed_form(&p, &OptimizerConfig::for_problem(&p, 20_000))
            .map_err(|e| e.to_string())?;
        worst = worst.max(gap);
        ensure(gap <= 1e-4, || {
            format!("instance {i} (lambda {}): gap {gap:e}", p.lambda())
        })?;
    }
    Ok(format!("100 instances, worst relative gap {worst:.2e}"))
}

fn identity_and_limit_laws() -> Check {
    let mut rng = Xoshiro256::seed_from_u64(0xacce_0003);
    let (mut fixed, mut limit, mut dup, mut perm) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..100 {
        let p = instance(&mut rng, i);
        let lambda = p.lambda();
        let w0 = p.original();

        let targets = p
            .inputs()
            .iter()
            .map(|c| w0.matvec(c.as_slice()).unwrap())
            .collect();
        let q = RidgeProblem::new(w0.clone(), p.inputs().to_vec(), targets, lambda).unwrap();
        fixed = fixed.max(ridge_closed_form(&q).unwrap().max_abs_diff(w0));

        let w = ridge_closed_form(&p.with_lambda(1e12).unwrap()).unwrap();
        limit = limit.max(w.sub(w0).unwrap().frobenius_norm() / w0.frobenius_norm());

        let doubled = RidgeProblem::new(
            w0.clone(),
            p.inputs().iter().chain(p.inputs()).cloned().collect(),
            p.targets().iter().chain(p.targets()).cloned().collect(),
            lambda,
        )
        .unwrap();
        let half = ridge_closed_form(&p.with_lambda(lambda / 2.0).unwrap()).unwrap();
        dup = dup.max(ridge_closed_form(&doubled).unwrap().max_abs_diff(&half));

        let mut order: Vec<usize> = (0..p.len()).collect();
        rng.shuffle(&mut order);
        let shuffled = RidgeProblem::new(
            w0.clone(),
            order.iter().map(|&k| p.inputs()[k].clone()).collect(),
            order.iter().map(|&k| p.targets()[k].clone()).collect(),
            lambda,
        )
        .unwrap();
        perm = perm.max(
            ridge_closed_form(&shuffled)
                .unwrap()
                .max_abs_diff(&ridge_closed_form(&p).unwrap()),
        );
    }

    let f = edit_fixture();
    let contexts = f
        .request
        .contexts(&f.embeddings, 0.1)
        .map_err(|e| e.to_string())?;
    let twice = multi_edit(&f.model, &[contexts[0].clone(), contexts[0].clone()], true).unwrap();
    let half = multi_edit(&f.model, &[contexts[0].with_lambda(0.05).unwrap()], true).unwrap();
    for (a, b) in twice.layers().iter().zip(half.layers()) {
        dup = dup
            .max(a.w_k().max_abs_diff(b.w_k()))
            .max(a.w_v().max_abs_diff(b.w_v()));
    }

    ensure(fixed <= 1e-10, || {
        format!("identity edit moved W by {fixed:e}")
    })?;
    ensure(limit <= 1e-9, || {
        format!("lambda=1e12 relative deviation {limit:e}")
    })?;
    ensure(dup <= 1e-10, || {
        format!("duplicated context differs from lambda/2 by {dup:e}")
    })?;
    ensure(perm <= 1e-12, || {
        format!("permutation changed W' by {perm:e}")
    })?;
    Ok(format!("fixed point {fixed:.1e}, lambda=1e12 {limit:.1e}, duplicate {dup:.1e}, permutation {perm:.1e}"))
}

fn monotone_deviation() -> Check {
    let mut rng = Xoshiro256::seed_from_u64(0xacce_0004);
    for i in 0..50 {
        let p = instance(&mut rng, i);
        let mut previous = f64::INFINITY;
        for e in -4..=12 {
            let lambda = 10f64.powf(f64::from(e) / 2.0);
            let w = ridge_closed_form(&p.with_lambda(lambda).unwrap()).unwrap();
            let dev = w.sub(p.original()).unwrap().frobenius_norm();
            ensure(dev <= previous + 1e-12, || {
                format!("instance {i}: deviation rose at lambda {lambda:e}")
            })?;
            previous = dev;
        }
    }
    Ok("50 instances, 17-point grid 1e-2..1e6".into())
}

fn harmonic_mean_reproduction() -> Check {
    let hm = 100.0 * harmonic_mean(0.6780, 0.6540);
    ensure((hm - 66.58).abs() <= 0.005, || format!("got {hm:.4}"))?;
    Ok(format!("{hm:.4}"))
}

fn attention_correctness() -> Check {
    let mut rng = Xoshiro256::seed_from_u64(0xacce_0005);
    let (mut row_err, mut shift_err, mut loop_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (n, l, m, d) = (
            1 + rng.below(12),
            1 + rng.below(12),
            1 + rng.below(10),
            1 + rng.below(10),
        );
        let scale = 10f64.powf(rng.next_f64() * 4.0 - 2.0);
        let q = Matrix::new(n, m, rng.normal_vec(n * m)).unwrap();
        let k = Matrix::new(l, m, rng.normal_vec(l * m)).unwrap();
        let v = Matrix::new(l, d, rng.normal_vec(l * d)).unwrap();
        let scaled = attention_map(&q.scale(scale), &k.scale(scale)).unwrap();
        for i in 0..n {
            row_err = row_err.max((scaled.matrix().row(i).iter().sum::<f64>() - 1.0).abs());
        }
        let map = attention_map(&q, &k).unwrap();
        let u = rng.normal_vec(m);
        let mut shifted = k.clone();
        for j in 0..l {
            shifted
                .row_mut(j)
                .iter_mut()
                .zip(&u)
                .for_each(|(x, du)| *x += du);
        }
        shift_err = shift_err.max(
            attention_map(&q, &shifted)
                .unwrap()
                .matrix()
                .max_abs_diff(map.matrix()),
        );
        let out = attention_output(&map, &v).unwrap();
        for i in 0..n {
            for c in 0..d {
                let naive: f64 = (0..l).map(|j| map.matrix().row(i)[j] * v.row(j)[c]).sum();
                loop_err = loop_err.max((out.row(i)[c] - naive).abs());
            }
        }
    }
    let two = attention_map(
        &Matrix::from_rows(&[[1.0]]),
        &Matrix::from_rows(&[[1.0], [0.0]]),
    )
    .unwrap();
    let (a, b) = (two.matrix().row(0)[0], two.matrix().row(0)[1]);
    ensure(row_err <= 1e-9, || format!("row sum error {row_err:e}"))?;
    ensure(shift_err <= 1e-12, || format!("shift error {shift_err:e}"))?;
    ensure(
        (a - 0.73106).abs() <= 1e-5 && (b - 0.26894).abs() <= 1e-5,
        || format!("softmax([1,0]) = ({a}, {b})"),
    )?;
    ensure(loop_err <= 1e-12, || {
        format!("naive loop error {loop_err:e}")
    })?;
    Ok(format!(
        "rows {row_err:.1e}, shift {shift_err:.1e}, softmax ({a:.5}, {b:.5}), loop {loop_err:.1e}"
    ))
}

fn fixture_report(f: &EditFixture, lambda: f64) -> EvalReport {
    let contexts = f.request.contexts(&f.embeddings, lambda).unwrap();
    let edited = multi_edit(&f.model, &contexts, true).unwrap();
    aggregate(
        &evaluate_dataset(
            &f.dataset,
            &f.model,
            &edited,
            &f.embeddings,
            &f.config,
            &f.seeds(),
        )
        .unwrap(),
    )
    .unwrap()
}

fn desk_scale_semantics() -> Check {
    let f = edit_fixture();
    let before = aggregate(
        &evaluate_dataset(
            &f.dataset,
            &f.model,
            &f.model,
            &f.embeddings,
            &f.config,
            &f.seeds(),
        )
        .unwrap(),
    )
    .unwrap();
    let r = fixture_report(&f, EditFixture::LAMBDA);
    let (e, g, s) = (r.efficacy.mean, r.generality.mean, r.specificity.mean);
    ensure(r.seeds == 24, || format!("{} seeds", r.seeds))?;
    ensure(before.efficacy.mean <= 0.20, || {
        format!("pre-edit efficacy {}", before.efficacy.mean)
    })?;
    ensure(e >= 0.95 && g >= 0.80 && s >= 0.90, || {
        format!("efficacy {e:.3} generality {g:.3} specificity {s:.3}")
    })?;
    let low = fixture_report(&f, 0.01);
    let high = fixture_report(&f, 1e4);
    ensure(high.generality.mean < low.generality.mean, || {
        "generality did not fall with lambda".into()
    })?;
    ensure(high.specificity.mean > low.specificity.mean, || {
        "specificity did not rise with lambda".into()
    })?;
    Ok(format!(
        "pre {:.3}; efficacy {e:.3} generality {g:.3} specificity {s:.3}; sweep G {:.3}->{:.3} S {:.3}->{:.3}",
        before.efficacy.mean, low.generality.mean, high.generality.mean, low.specificity.mean, high.specificity.mean
    ))
}

fn debias_search() -> Check {
    let r = search_lambda("p", &SearchConfig::default(), |l, _| {
        Ok::<_, String>(100.0 / (1.0 + l / 1000.0))
    })
    .map_err(|e| e.to_string())?;
    let ratio = r.lambda / 1000.0;
    ensure((1.0 / 1.02..=1.02).contains(&ratio), || {
        format!("lambda {}", r.lambda)
    })?;
    ensure(r.delta_p < 0.1 && r.iterations <= 30, || {
        format!("gap {} after {} iterations", r.delta_p, r.iterations)
    })?;
    let d4 = delta_p(4.0).unwrap();
    let d50 = delta_p(50.0).unwrap();
    let obs: Vec<_> = [4.0, 50.0, 96.0]
        .iter()
        .map(|&f| BiasObservation::new("p", f).unwrap())
        .collect();
    let agg = aggregate_delta(&obs).unwrap().delta;
    ensure((d4 - 0.92).abs() <= 1e-12 && d50 == 0.0, || {
        format!("delta_p(4)={d4} delta_p(50)={d50}")
    })?;
    ensure((agg - 1.84 / 3.0).abs() <= 1e-6, || {
        format!("aggregate {agg}")
    })?;
    Ok(format!(
        "lambda {:.2} in {} iterations, gap {:.2e}; aggregate {agg:.6}",
        r.lambda, r.iterations, r.delta_p
    ))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attn-surgery"))
}

fn format_fidelity() -> Check {
    let mut rng = Xoshiro256::seed_from_u64(0xacce_0006);
    for _ in 0..200 {
        let mut w = TensorWriter::new();
        for t in 0..1 + rng.below(6) {
            let shape: Vec<usize> = (0..rng.below(4)).map(|_| rng.below(5)).collect();
            let n: usize = shape.iter().product();
            let dtype = if rng.below(2) == 0 {
                Dtype::F32
            } else {
                Dtype::F64
            };
            w.add_values(&format!("t{t}"), shape, &rng.normal_vec(n), dtype)
                .unwrap();
        }
        let bytes = w.to_bytes();
        let file = parse_file(&bytes).map_err(|e| e.to_string())?;
        let mut again = TensorWriter::new();
        for name in file.names() {
            again.copy_from(&file, name).unwrap();
        }
        ensure(again.to_bytes() == bytes, || {
            "round trip changed bytes".into()
        })?;
    }

    let base = edit_fixture().model.to_bytes().unwrap();
    let previous_hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut rejected = 0;
    let mut panicked = 0;
    for case in 0..20_000 {
        let mut bytes = base.clone();
        match case % 4 {
            0 => {
                for _ in 0..1 + rng.below(8) {
                    let i = rng.below(bytes.len());
                    bytes[i] = rng.next_u64() as u8;
                }
            }
            1 => {
                let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
                let i = 8 + rng.below(header_len);
                bytes[i] = b" {}[]\",:0123456789-eE.FI"[rng.below(24)];
            }
            2 => bytes.truncate(rng.below(bytes.len())),
            _ => bytes[..8].copy_from_slice(&rng.next_u64().to_le_bytes()),
        }
        match panic::catch_unwind(AssertUnwindSafe(|| {
            parse_file(&bytes).map(|f| f.names().filter(|n| f.read_values(n).is_ok()).count())
        })) {
            Ok(Err(e)) => {
                rejected += 1;
                if e.to_string().is_empty() {
                    panicked += 1;
                }
            }
            Ok(Ok(_)) => {}
            Err(_) => panicked += 1,
        }
    }
    panic::set_hook(previous_hook);
    ensure(panicked == 0, || {
        format!("{panicked} of 20000 corrupted inputs panicked")
    })?;

    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let model_path = dir.path().join("model.safetensors");
    let f = edit_fixture();
    std::fs::write(&model_path, &base).unwrap();
    std::fs::write(
        dir.path().join("embeddings.safetensors"),
        f.embeddings.as_bytes(),
    )
    .unwrap();
    let identity = serde_json::json!({"edits": [{"pairs": [
        {"source": "a rose", "destination": "a rose"},
        {"source": "a tulip", "destination": "a tulip"},
    ]}]});
    std::fs::write(dir.path().join("identity.json"), identity.to_string()).unwrap();
    let out_path = dir.path().join("out.safetensors");
    let status = bin()
        .args(["edit", "--weights"])
        .arg(&model_path)
        .arg("--edits")
        .arg(dir.path().join("identity.json"))
        .arg("--embeddings")
        .arg(dir.path().join("embeddings.safetensors"))
        .arg("--out")
        .arg(&out_path)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        String::from_utf8_lossy(&status.stderr).into_owned()
    })?;
    let original = parse_file(&base).unwrap();
    let saved = parse_file(&std::fs::read(&out_path).unwrap()).unwrap();
    let passthrough: Vec<&str> = original
        .names()
        .filter(|n| !n.contains(".to_k.") && !n.contains(".to_v."))
        .collect();
    ensure(!passthrough.is_empty(), || {
        "fixture has no passthrough tensors".into()
    })?;
    for name in &passthrough {
        ensure(
            saved.payload(name).ok() == original.payload(name).ok(),
            || format!("{name} changed"),
        )?;
    }
    Ok(format!(
        "200 round trips; 20000 corrupted inputs, {rejected} rejected, none panicked; {} passthrough tensors preserved",
        passthrough.len()
    ))
}

fn real_checkpoint(path: &Path) -> Check {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let file = TensorFile::from_bytes(bytes).map_err(|e| e.to_string())?;
    let prefix = file
        .names()
        .any(|n| n.starts_with("model.diffusion_model."))
        .then(|| "model.diffusion_model.".to_string());
    let report = inspect(&InspectArgs {
        weights: path.to_path_buf(),
        patterns: PatternArgs {
            key_pattern: ".attn2.to_k.weight".into(),
            value_pattern: ".attn2.to_v.weight".into(),
            transpose: false,
        },
        scope_prefix: prefix,
        summary: true,
    })
    .map_err(|e| e.to_json())?;
    let fraction = 100.0 * report.edited_fraction;
    ensure(report.pair_count == 16, || {
        format!("{} pairs", report.pair_count)
    })?;
    ensure((fraction - 2.2).abs() <= 0.3, || {
        format!("edited fraction {fraction:.3}%")
    })?;

    let model = ModelWeights::from_tensor_file(&file, &LayerPattern::default())
        .map_err(|e| e.to_string())?;
    let dim = model.embed_dim().ok_or("no layers")?;
    let mut rng = Xoshiro256::seed_from_u64(7);
    let vectors = |rng: &mut Xoshiro256| {
        (0..8)
            .map(|_| Vector::new(rng.normal_vec(dim)).unwrap())
            .collect::<Vec<_>>()
    };
    let ctx = EditContext::new(vectors(&mut rng), vectors(&mut rng), 0.1).unwrap();
    let start = Instant::now();
    multi_edit(&model, &[ctx], true).map_err(|e| e.to_string())?;
    let solve = start.elapsed();
    ensure(solve <= Duration::from_secs(5), || {
        format!("solve took {solve:?}")
    })?;
    Ok(format!(
        "16 pairs, edited fraction {fraction:.2}%, solve {:.3} s",
        solve.as_secs_f64()
    ))
}

fn run(name: &str, limit: Option<Duration>, check: impl FnOnce() -> Check) -> Verdict {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(check));
    let elapsed = start.elapsed();
    let timing = format!("{:.2} s", elapsed.as_secs_f64());
    match result {
        Ok(Ok(detail)) => match limit {
            Some(l) if elapsed > l => {
                Verdict::Fail(format!("{detail}; took {timing}, limit {} s", l.as_secs()))
            }
            _ => Verdict::Pass(format!("{detail}; {timing}")),
        },
        Ok(Err(why)) => Verdict::Fail(format!("{why}; {timing}")),
        Err(_) => Verdict::Fail(format!("{name} panicked")),
    }
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut verdicts = vec![
        (
            "closed-form correctness",
            run("closed-form", Some(secs(10)), closed_form_correctness),
        ),
        (
            "oracle equivalence",
            run("oracle", Some(secs(60)), oracle_equivalence),
        ),
        (
            "identity and limit laws",
            run("laws", None, identity_and_limit_laws),
        ),
        (
            "monotone deviation",
            run("monotone", None, monotone_deviation),
        ),
        (
            "harmonic-mean reproduction",
            run("hm", None, harmonic_mean_reproduction),
        ),
        (
            "attention correctness",
            run("attention", None, attention_correctness),
        ),
        (
            "desk-scale edit semantics",
            run("desk", Some(secs(30)), desk_scale_semantics),
        ),
        ("debias search", run("debias", None, debias_search)),
        (
            "format fidelity",
            run("format", Some(secs(30)), format_fidelity),
        ),
    ];
    let real = match std::env::var_os("SD_CHECKPOINT").map(PathBuf::from) {
        Some(path) if path.is_file() => run("real", None, || real_checkpoint(&path)),
        Some(path) => Verdict::Skip(format!("{} does not exist", path.display())),
        None => Verdict::Skip("set SD_CHECKPOINT to a Stable Diffusion v1 safetensors file".into()),
    };
    verdicts.push(("real-checkpoint smoke", real));

    let mut failed = 0;
    for (name, v) in &verdicts {
        match v {
            Verdict::Pass(d) => println!("PASS  {name}: {d}"),
            Verdict::Fail(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
            Verdict::Skip(d) => println!("SKIP  {name}: {d}"),
        }
    }
    println!(
        "{} passed, {failed} failed",
        verdicts
            .iter()
            .filter(|(_, v)| matches!(v, Verdict::Pass(_)))
            .count()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
