use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde_json::{json, Value};
use wiener_cubature::estimator::{
    convergence_experiment, cubature_estimate, mc_estimate, CubatureSettings, LeafSource,
};
use wiener_cubature::formula::{formula_for_degree, verify_cubature, CubatureFormula};
use wiener_cubature::ode::ito_to_stratonovich;
use wiener_cubature::partition::make_partition;
use wiener_cubature::recombination::{preprocess, TestBasis, WeightTable};
use wiener_cubature::signature::MAX_SIGNATURE_LEVEL;
use wiener_cubature::training::data::generate_ou;
use wiener_cubature::training::train_on;
use wiener_cubature::Error;

use crate::config::ExperimentConfig;
use crate::NumericalFailure;

const VERIFY_TOL: f64 = 1e-10;

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn prepare(c: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))
}

fn manifest(c: &ExperimentConfig, command: &str, results: Value) -> Result<()> {
    let m = json!({ "command": command, "config": c, "results": results });
    write(
        &c.out,
        &format!("{command}.manifest.json"),
        &serde_json::to_string_pretty(&m)?,
    )
}

fn read_required(path: &Path, what: &str) -> Result<String> {
    if !path.exists() {
        return Err(Error::ManifestMismatch(format!(
            "{what} file {} does not exist",
            path.display()
        ))
        .into());
    }
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_formula(c: &ExperimentConfig, dim: usize) -> Result<CubatureFormula> {
    match &c.formula_file {
        Some(p) => Ok(CubatureFormula::from_json(&read_required(p, "formula")?)?),
        None => Ok(formula_for_degree(c.formula.degree, dim)?),
    }
}

pub fn formula(c: &ExperimentConfig) -> Result<()> {
    let f = formula_for_degree(c.formula.degree, c.formula.dim)?;
    let m = c.formula.verify_degree.unwrap_or(c.formula.degree);
    if m == 0 || m > MAX_SIGNATURE_LEVEL {
        return Err(Error::InvalidParameter(format!(
            "verify degree must be in 1..={MAX_SIGNATURE_LEVEL}, got {m}"
        ))
        .into());
    }
    let report = verify_cubature(&f, m, VERIFY_TOL);
    prepare(c)?;
    write(&c.out, "formula.json", &f.to_json())?;
    let failures: Vec<Value> = report
        .failures
        .iter()
        .map(|(w, d)| json!({ "word": w.to_string(), "defect": d }))
        .collect();
    let summary = json!({
        "degree": f.degree(),
        "dim": f.dim(),
        "paths": f.len(),
        "verify_degree": m,
        "words_checked": report.words_checked,
        "max_defect": report.max_defect,
        "worst_word": report.worst_word.as_ref().map(|w| w.to_string()),
        "passed": report.passed,
        "failures": failures,
        "fingerprint": f.fingerprint(),
    });
    write(
        &c.out,
        "verification.json",
        &serde_json::to_string_pretty(&summary)?,
    )?;
    manifest(c, "formula", summary)?;
    println!("paths: {}", f.len());
    println!("words checked: {}", report.words_checked);
    println!("max defect: {:e}", report.max_defect);
    if !report.passed {
        for (w, d) in &report.failures {
            println!("failed word {w}: defect {d:e}");
        }
        let (w, d) = &report.failures[0];
        return Err(
            NumericalFailure(format!("moment condition fails on word {w} (defect {d:e})")).into(),
        );
    }
    println!("passed");
    Ok(())
}

pub fn preprocess_cmd(c: &ExperimentConfig) -> Result<()> {
    let f = load_formula(c, c.formula.dim)?;
    let p = &c.partition;
    let partition = make_partition(p.horizon, p.k, p.gamma)?;
    let basis = TestBasis::new(f.dim(), c.preprocess.basis_degree);
    let table = preprocess(&f, &partition, &basis, c.preprocess.radius)?;
    prepare(c)?;
    write(&c.out, "table.json", &table.to_json())?;
    let m = &table.manifest;
    for (i, s) in m.survivors.iter().enumerate() {
        println!("interval {}: {s} surviving paths", i + 1);
    }
    println!("leaves: {}", table.leaf_count());
    println!("seconds: {:.3}", m.seconds);
    manifest(
        c,
        "preprocess",
        json!({ "survivors": m.survivors, "leaves": table.leaf_count(), "seconds": m.seconds }),
    )
}

fn fmt_error(value: f64, oracle: Option<f64>) -> String {
    oracle
        .map(|o| format!("{:e}", (value - o).abs()))
        .unwrap_or_default()
}

pub fn estimate(c: &ExperimentConfig) -> Result<()> {
    let e = &c.estimate;
    let problem = e.problem.build();
    let f = load_formula(c, problem.ito.db())?;
    let partition = make_partition(problem.horizon, c.partition.k, c.partition.gamma)?;
    let table: Option<WeightTable> = match &c.table_file {
        Some(p) => Some(WeightTable::from_json(&read_required(p, "weight table")?)?),
        None if e.use_table && c.partition.k >= 2 => {
            let basis = TestBasis::new(f.dim(), c.preprocess.basis_degree);
            Some(preprocess(&f, &partition, &basis, c.preprocess.radius)?)
        }
        None => None,
    };
    let source = match &table {
        Some(t) => LeafSource::Table(t),
        None => LeafSource::Raw,
    };
    let fields = ito_to_stratonovich(&problem.ito)?;
    let settings = CubatureSettings {
        steps_per_segment: e.steps_per_segment,
        ..CubatureSettings::default()
    };
    let cub = cubature_estimate(
        &problem.functional,
        &fields,
        &f,
        &partition,
        source,
        &problem.x0,
        &settings,
    )?;
    let mc = mc_estimate(
        &problem.functional,
        &problem.ito,
        &problem.x0,
        problem.horizon,
        e.mc_paths,
        e.mc_steps,
        e.mc_seed,
        false,
    )?;
    let mut csv = String::from("method,n,value,error,seconds\n");
    for (name, r) in [("cubature", &cub), ("mc", &mc)] {
        csv.push_str(&format!(
            "{name},{},{:e},{},{:e}\n",
            r.n,
            r.value,
            fmt_error(r.value, problem.oracle),
            r.seconds
        ));
        println!("{name}: {} (n = {})", r.value, r.n);
    }
    if let Some(o) = problem.oracle {
        println!("oracle: {o}");
    }
    prepare(c)?;
    write(&c.out, "estimate.csv", &csv)?;
    manifest(
        c,
        "estimate",
        json!({
            "problem": problem.name,
            "oracle": problem.oracle,
            "cubature": { "value": cub.value, "n": cub.n, "solves": cub.solves },
            "mc": { "value": mc.value, "n": mc.n },
        }),
    )
}

pub fn bench(c: &ExperimentConfig) -> Result<()> {
    let problem = c.bench.problem.build();
    let result = convergence_experiment(&problem, &c.bench.sweep)?;
    prepare(c)?;
    write(&c.out, "convergence.csv", &result.to_csv())?;
    println!("oracle: {}", result.oracle);
    println!("mc slope: {:.3}", result.mc_slope);
    println!(
        "cubature slope: {:.3} over {} points",
        result.cubature_slope, result.cubature_fit_points
    );
    manifest(
        c,
        "bench",
        json!({
            "problem": problem.name,
            "oracle": result.oracle,
            "mc_slope": result.mc_slope,
            "cubature_slope": result.cubature_slope,
            "cubature_fit_points": result.cubature_fit_points,
        }),
    )
}

pub fn train(c: &ExperimentConfig) -> Result<()> {
    let t = &c.train;
    let data = generate_ou(t.dim, &t.data)?;
    let clock = Instant::now();
    let log = train_on(t, &data)?;
    prepare(c)?;
    write(&c.out, "data.csv", &data.to_csv())?;
    write(&c.out, "train_log.csv", &log.to_csv())?;
    write(&c.out, "params_initial.json", &log.initial.to_json())?;
    write(&c.out, "params_cubature.json", &log.cubature.to_json())?;
    write(&c.out, "params_mc.json", &log.mc.to_json())?;
    let summary = |arm: &str| {
        let l = log.losses(arm);
        json!({
            "first_loss": l.first(),
            "last_loss": l.last(),
            "median_epoch_seconds": log.median_seconds(arm),
        })
    };
    for arm in ["cubature", "mc"] {
        let l = log.losses(arm);
        if let (Some(a), Some(b)) = (l.first(), l.last()) {
            println!(
                "{arm}: loss {a:.6} -> {b:.6}, {:.4} s/epoch",
                log.median_seconds(arm)
            );
        }
    }
    manifest(
        c,
        "train",
        json!({
            "cubature_paths": log.cubature_paths,
            "mc_paths": log.mc_paths,
            "preprocess_seconds": log.preprocess_seconds,
            "seconds": clock.elapsed().as_secs_f64(),
            "cubature": summary("cubature"),
            "mc": summary("mc"),
        }),
    )
}
