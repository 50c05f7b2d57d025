use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bcgan::checkpoint::Stage;
use bcgan::dataset::{
    generate_synthetic_dataset, ingest_real_dataset, match_multiplicity_stats, split_pairs, write_dataset, write_split, OutfitDataset,
    SplitManifest,
};
use bcgan::image::{compose_grid, save_rgb, Domain, Image};
use bcgan::latent_lab::{interpolation_strip, mix_ratio_study, MixSchedule};
use bcgan::losses::default_extractor;
use bcgan::metrics::{f2bt_table, generate_outputs, input_seed, EvaluationSet, MetricsReport};
use bcgan::networks::{GeneratorBundle, LatentCode};
use bcgan::rng::seeded;
use bcgan::trainer::{append_jsonl, bundle_from_checkpoint, BcganTrainer, Pretrainer, TrainingData};
use bcgan::Error;
use serde_json::json;

use crate::plot;
use crate::run::{create, read_inputs, write_json, Run};

/// Frozen-weight audit cadence during BC-GAN training.
const AUDIT_EVERY: u64 = 100;

pub fn dataset(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let ds = match (&cfg.ingest_root, &cfg.ingest_manifest) {
        (Some(root), Some(manifest)) => {
            let mut ds = ingest_real_dataset(Path::new(root), Path::new(manifest), cfg.resolution)?;
            let absorbed = ds.merge_duplicates(cfg.dedup_threshold, default_extractor())?;
            println!("merged {absorbed} duplicate garment image(s)");
            ds
        }
        _ => generate_synthetic_dataset(&cfg.dataset_spec())?,
    };
    if ds.pairs.is_empty() {
        return Err(Error::Data("the dataset has no outfit pairs".into()).into());
    }
    let split = split_pairs(&ds.pairs, cfg.direction()?, cfg.split_ratio, cfg.split_seed)?;
    let dir = run.dataset_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    write_dataset(&ds, &dir)?;
    write_split(&split, &dir)?;
    run.stamp_dataset()?;

    let stats = match_multiplicity_stats(&ds.pairs)?;
    println!("{} upper / {} lower garments, {} pairs", ds.uppers.len(), ds.lowers.len(), ds.pairs.len());
    println!("split: {} train / {} test pairs", split.train_pairs.len(), split.test_pairs.len());
    for domain in [Domain::Upper, Domain::Lower] {
        let hist = stats.histogram(domain);
        let cells: Vec<String> = hist.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        println!("{} matches per item -> count: {}", domain.dir_name(), cells.join(" "));
        println!("{} single-match fraction: {:.1}%", domain.dir_name(), 100.0 * stats.single_match_fraction(domain));
    }
    Ok(())
}

/// Distinct held-out given items and target garments, sorted by id.
fn held_out<'a>(ds: &'a OutfitDataset, split: &SplitManifest) -> Result<(Vec<&'a Image>, Vec<&'a Image>)> {
    let (sd, td) = (split.direction.source(), split.direction.target());
    let test = split.test(&ds.pairs);
    let ids = |d: Domain| test.iter().map(|p| p.item(d).to_string()).collect::<BTreeSet<_>>();
    let look = |d: Domain, set: BTreeSet<String>| {
        set.iter()
            .map(|id| ds.garment(d, id).map(|g| g.image()).ok_or_else(|| Error::Data(format!("unknown {} item {id}", d.dir_name()))))
            .collect::<Result<Vec<_>, _>>()
    };
    Ok((look(sd, ids(sd))?, look(td, ids(td))?))
}

fn open_log(path: &Path, keep_before: Option<u64>) -> Result<BufWriter<fs::File>> {
    let kept: Vec<String> = match keep_before {
        Some(limit) if path.exists() => BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?)
            .lines()
            .map_while(|l| l.ok())
            .filter(|l| {
                serde_json::from_str::<serde_json::Value>(l).ok().and_then(|v| v["iter"].as_u64()).is_some_and(|i| i < limit)
            })
            .collect(),
        _ => Vec::new(),
    };
    let mut out = BufWriter::new(create(path)?);
    for line in kept {
        writeln!(out, "{line}")?;
    }
    Ok(out)
}

pub fn pretrain(run: &Run, resume: bool) -> Result<()> {
    let cfg = &run.cfg;
    let (ds, split) = run.load_data()?;
    let target = split.direction.target();
    let images = TrainingData::from_split(&ds, &split)?.targets;
    let dir = run.subdir(&["pretrain"])?;
    let ck_path = dir.join("checkpoint.bin");
    let pcfg = cfg.pretrain_config();
    let mut t = if resume && ck_path.exists() {
        let ck = run.load_checkpoint(&ck_path, Stage::Pretrain)?;
        ck.require_digest(&pcfg.digest(&cfg.architecture(), target))?;
        let mut t = Pretrainer::from_checkpoint(&ck, images)?;
        t.config.iterations = pcfg.iterations;
        println!("resuming pre-training at iteration {}", t.iteration());
        t
    } else {
        Pretrainer::new(cfg.architecture(), target, images, pcfg)?
    };
    let log_path = dir.join("log.jsonl");
    let mut log = open_log(&log_path, Some(t.iteration()))?;
    while t.iteration() < t.config.iterations {
        let record = match t.step() {
            Ok(r) => r,
            Err(e) => {
                log.flush()?;
                run.save_checkpoint(t.to_checkpoint(), &dir, false)?;
                return Err(e.into());
            }
        };
        append_jsonl(&mut log, &record)?;
        if t.iteration() % cfg.checkpoint_every == 0 {
            log.flush()?;
            run.save_checkpoint(t.to_checkpoint(), &dir, true)?;
            println!("pre-training {} / {}: dis {:.4} adv {:.4}", t.iteration(), t.config.iterations, record.dis, record.adv);
        }
    }
    log.flush()?;
    run.save_checkpoint(t.to_checkpoint(), &dir, false)?;
    let samples = t.bundle.sample_unconditional(16, &mut seeded(cfg.eval_seed));
    let refs: Vec<&Image> = samples.iter().collect();
    let grid = dir.join("samples.png");
    save_rgb(&compose_grid(&[refs[..8].to_vec(), refs[8..].to_vec()])?, &grid)?;
    run.sidecar(&dir, &[log_path, grid], json!({ "iterations": t.iteration(), "frozen_digest": t.bundle.frozen_digest() }))?;
    println!("pre-training finished at iteration {}; frozen digest {}", t.iteration(), t.bundle.frozen_digest());
    Ok(())
}

fn pretrained_bundle(run: &Run) -> Result<GeneratorBundle> {
    let cfg = &run.cfg;
    let path = run.pretrain_dir().join("checkpoint.bin");
    let ck = run.load_checkpoint(&path, Stage::Pretrain).context("no pre-trained generator; run `bcgan pretrain` first")?;
    let target = cfg.direction()?.target();
    ck.require_digest(&cfg.pretrain_config().digest(&cfg.architecture(), target))?;
    if ck.iteration < cfg.pretrain_iterations {
        log::warn!("pre-training stopped at iteration {} of {}", ck.iteration, cfg.pretrain_iterations);
    }
    Ok(bundle_from_checkpoint(&ck)?)
}

pub fn train(run: &Run, resume: bool) -> Result<()> {
    let cfg = &run.cfg;
    let (ds, split) = run.load_data()?;
    let data = TrainingData::from_split(&ds, &split)?;
    let tcfg = cfg.train_config()?;
    let dir = run.subdir(&["train", &cfg.variant()])?;
    let ck_path = dir.join("checkpoint.bin");
    let mut t = if resume && ck_path.exists() {
        let ck = run.load_checkpoint(&ck_path, Stage::Bcgan)?;
        let t = BcganTrainer::resume(&ck, data, tcfg)?;
        println!("resuming {} at iteration {}", cfg.variant(), t.iteration());
        t
    } else {
        BcganTrainer::new(pretrained_bundle(run)?, data, tcfg)?
    };
    let frozen = t.initial_frozen_digest().to_string();
    let log_path = dir.join("log.jsonl");
    let mut log = open_log(&log_path, Some(t.iteration()))?;
    while t.iteration() < t.config.iterations {
        let record = match t.step() {
            Ok(r) => r,
            Err(e) => {
                log.flush()?;
                run.save_checkpoint(t.to_checkpoint(), &dir, false)?;
                return Err(e.into());
            }
        };
        append_jsonl(&mut log, &record)?;
        let it = t.iteration();
        if it % AUDIT_EVERY == 0 && t.bundle().frozen_digest() != frozen {
            return Err(Error::Data(format!("frozen generator weights changed by iteration {it}")).into());
        }
        if it % cfg.checkpoint_every == 0 {
            log.flush()?;
            run.save_checkpoint(t.to_checkpoint(), &dir, true)?;
            println!("{} {} / {}: adv {:.4} div {:.4} cmp {:.4} total {:.4}", cfg.variant(), it, t.config.iterations, record.adv, record.div, record.cmp, record.total);
        }
    }
    log.flush()?;
    if t.bundle().frozen_digest() != frozen {
        return Err(Error::Data("frozen generator weights changed during training".into()).into());
    }
    run.save_checkpoint(t.to_checkpoint(), &dir, false)?;
    run.sidecar(&dir, &[log_path], json!({ "iterations": t.iteration(), "variant": cfg.variant(), "frozen_digest": frozen }))?;
    println!("training finished at iteration {}", t.iteration());
    Ok(())
}

fn trained_bundle(run: &Run, checkpoint: Option<&Path>) -> Result<(GeneratorBundle, PathBuf)> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.train_dir().join("checkpoint.bin"));
    let ck = run.load_checkpoint(&path, Stage::Bcgan).context("no trained model; run `bcgan train` first or pass --checkpoint")?;
    let bundle = bundle_from_checkpoint(&ck)?;
    let direction = run.cfg.direction()?;
    if bundle.target != direction.target() {
        return Err(Error::DomainMismatch { expected: direction.target(), actual: bundle.target }.into());
    }
    Ok((bundle, path))
}

pub fn generate(run: &Run, input: &Path, n: usize, checkpoint: Option<&Path>) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("-n must be at least 1".into()).into());
    }
    let (bundle, ck_path) = trained_bundle(run, checkpoint)?;
    let inputs = read_inputs(input, run.cfg.resolution, bundle.source())?;
    let refs: Vec<&Image> = inputs.iter().collect();
    let outputs = generate_outputs(&bundle, &refs, n, run.cfg.seed)?;
    let out_dir = run.subdir(&["generate", &run.cfg.variant()])?;
    let mut files = Vec::new();
    for (x, ys) in inputs.iter().zip(&outputs) {
        let d = out_dir.join(&x.entity_id);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (k, y) in ys.iter().enumerate() {
            let p = d.join(format!("{k:02}.png"));
            y.save_png(&p)?;
            files.push(p);
        }
    }
    let rows: Vec<Vec<&Image>> = inputs.iter().zip(&outputs).map(|(x, ys)| std::iter::once(x).chain(ys).collect()).collect();
    let grid = out_dir.join("grid.png");
    save_rgb(&compose_grid(&rows)?, &grid)?;
    files.push(grid);
    run.sidecar(&out_dir, &files, json!({ "checkpoint": ck_path, "n": n, "seed": run.cfg.seed }))?;
    println!("wrote {} image(s) and a grid to {}", files.len() - 1, out_dir.display());
    Ok(())
}

pub fn evaluate(run: &Run, checkpoint: Option<&Path>, compare: &[String]) -> Result<()> {
    let cfg = &run.cfg;
    let (ds, split) = run.load_data()?;
    let (inputs, targets) = held_out(&ds, &split)?;
    let evaluator = run.evaluator(&ds)?;
    let oracle = run.oracle(&ds);
    let set = EvaluationSet {
        direction: split.direction,
        reference: evaluator.extract_features(&targets)?,
        inputs,
        evaluator: &evaluator,
        oracle: &oracle,
    };
    let (bundle, ck_path) = trained_bundle(run, checkpoint)?;
    let outputs = generate_outputs(&bundle, &set.inputs, cfg.eval_outputs, cfg.eval_seed)?;
    let mut report = set.score(&outputs, &cfg.digest(), cfg.eval_seed)?;
    if compare.is_empty() {
        report.note = Some("f2bt needs at least two checkpoints; pass --compare NAME=PATH".into());
    } else {
        let mut methods = vec![(cfg.variant(), outputs)];
        for item in compare {
            let (name, path) = item.split_once('=').ok_or_else(|| Error::Config(format!("--compare {item:?} is not NAME=PATH")))?;
            if methods.iter().any(|(m, _)| m == name) {
                return Err(Error::Config(format!("method name {name:?} is used twice")).into());
            }
            let (other, _) = trained_bundle(run, Some(Path::new(path)))?;
            methods.push((name.to_string(), generate_outputs(&other, &set.inputs, 1, cfg.eval_seed)?));
        }
        report.f2bt = Some(f2bt_table(&set.scoreboard(&methods)?));
    }
    let dir = run.subdir(&["evaluate", &cfg.variant()])?;
    let path = dir.join("report.json");
    write_json(&path, &report)?;
    run.sidecar(&dir, std::slice::from_ref(&path), json!({ "checkpoint": ck_path, "compare": compare }))?;
    print_report(&report);
    println!("report written to {}", path.display());
    Ok(())
}

fn print_report(r: &MetricsReport) {
    println!("diversity {:.4}  fid {:.4}  oracle compatibility {:.1}%", r.diversity, r.fid, 100.0 * r.oracle_compat_rate);
    if let Some(table) = &r.f2bt {
        for (m, pct) in table {
            println!("  f2bt {m}: {pct:.1}%");
        }
    }
}

pub fn interpolate(run: &Run, input: &Path, schedule: Option<&str>, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = &run.cfg;
    let schedule: MixSchedule = match schedule {
        Some(s) => s.parse()?,
        None => MixSchedule::default(),
    };
    let (bundle, ck_path) = trained_bundle(run, checkpoint)?;
    let inputs = read_inputs(input, cfg.resolution, bundle.source())?;
    let x = inputs.first().expect("read_inputs never returns an empty list");
    if inputs.len() > 1 {
        log::warn!("interpolating only the first of {} inputs", inputs.len());
    }
    let z = LatentCode::sample(bundle.arch.latent_dim, &mut seeded(input_seed(cfg.seed, x)));
    let frames = interpolation_strip(&bundle, x, &z, &schedule)?;
    let dir = run.subdir(&["interpolate", &cfg.variant()])?;
    let strip = dir.join(format!("{}_strip.png", x.entity_id));
    save_rgb(&compose_grid(&[frames.iter().collect()])?, &strip)?;

    let (ds, split) = run.load_data()?;
    let (test_inputs, _) = held_out(&ds, &split)?;
    let table = mix_ratio_study(&bundle, split.direction, &test_inputs, cfg.eval_outputs, cfg.eval_seed, &schedule, &run.oracle(&ds))?;
    let table_path = dir.join("beat_table.json");
    write_json(&table_path, &json!({ "config_digest": cfg.digest(), "table": table }))?;
    run.sidecar(&dir, &[strip.clone(), table_path.clone()], json!({ "checkpoint": ck_path, "ratios": schedule.ratios() }))?;
    for row in &table.rows {
        println!("{}: {:.1}% ({} / {})", row.label, row.percent, row.wins, row.trials);
    }
    println!("strip written to {}", strip.display());
    Ok(())
}

pub fn report(run: &Run) -> Result<()> {
    let out = run.subdir(&["report"])?;
    let mut files = Vec::new();
    let mut summary = BTreeMap::new();
    let mut logs = vec![("pretrain".to_string(), run.pretrain_dir().join("log.jsonl"), vec!["dis", "adv"])];
    if let Ok(entries) = fs::read_dir(run.dir.join("train")) {
        let mut names: Vec<String> = entries.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        for n in names {
            let p = run.dir.join("train").join(&n).join("log.jsonl");
            logs.push((format!("train-{n}"), p, vec!["dis", "cmp_dis", "adv", "div", "cmp", "total"]));
        }
    }
    for (name, path, keys) in logs {
        if !path.exists() {
            continue;
        }
        let records = read_log(&path)?;
        let series: Vec<(String, Vec<(f64, f64)>)> = keys
            .iter()
            .map(|k| (k.to_string(), records.iter().filter_map(|r| Some((r["iter"].as_f64()?, r[*k].as_f64()?))).collect()))
            .collect();
        let png = out.join(format!("{name}.png"));
        save_rgb(&plot::line_chart(&series, 640, 360), &png)?;
        files.push(png);
        let last = records.last().cloned().unwrap_or_default();
        summary.insert(name, json!({ "records": records.len(), "last": last, "legend": plot::legend(&keys) }));
    }
    let mut reports = BTreeMap::new();
    for kind in ["evaluate", "interpolate"] {
        let Ok(entries) = fs::read_dir(run.dir.join(kind)) else { continue };
        for e in entries.filter_map(|e| e.ok()) {
            let file = if kind == "evaluate" { "report.json" } else { "beat_table.json" };
            let p = e.path().join(file);
            if let Ok(text) = fs::read_to_string(&p) {
                let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                reports.insert(format!("{kind}/{}", e.file_name().to_string_lossy()), v);
            }
        }
    }
    let path = out.join("summary.json");
    write_json(&path, &json!({ "config_digest": run.cfg.digest(), "logs": summary, "results": reports }))?;
    files.push(path.clone());
    run.sidecar(&out, &files, json!({}))?;
    println!("report written to {}", out.display());
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<serde_json::Value>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).with_context(|| format!("bad record in {}", path.display()))
        })
        .collect()
}
