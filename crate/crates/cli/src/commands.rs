use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use spikyspace::checkpoint;
use spikyspace::config::KeyValues;
use spikyspace::data::{all_windows, coupled_sinusoids, load_csv, make_windows, split_ranges, SeriesDataset, SplitRatios, WindowSet, Windows};
use spikyspace::energy::{ann_op_counts, compare_ann_energy, profile, EnergyTable};
use spikyspace::metrics::{horizon_slice, r2, rrse};
use spikyspace::spike::window_for_bits;
use spikyspace::ssm::{Mode, Model, ModelConfig, Normalization};
use spikyspace::train::{apply_threshold_scaling, fit_with, predict, EpochStats, TrainConfig, TrainOutcome};
use spikyspace::{Scalar, Tensor};

use crate::{ConvertArgs, DataArgs, EnergyArgs, EvalArgs, ForecastArgs, PlotArgs, Precision, Split, Status, SynthArgs, TrainArgs};

const CHUNK: usize = 256;

pub fn load_data(d: &DataArgs) -> Result<SeriesDataset> {
    load_csv(&d.data, !d.no_header).with_context(|| format!("loading {}", d.data.display()))
}

pub fn load_model(path: &Path) -> Result<Model<f64>> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_config(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        None => Ok(KeyValues::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            KeyValues::parse(&text).with_context(|| format!("in {}", p.display()))
        }
    }
}

fn all_keys() -> Vec<&'static str> {
    let mut keys = TrainConfig::KEYS.to_vec();
    keys.extend(ModelConfig::KEYS);
    keys.extend(SplitRatios::KEYS);
    keys
}

fn split_ratios(path: Option<&Path>) -> Result<SplitRatios> {
    let kv = read_config(path)?;
    kv.reject_unknown(&all_keys()).with_context(|| format!("in {}", path.unwrap().display()))?;
    let mut r = SplitRatios::default();
    r.apply(&kv)?;
    Ok(r)
}

fn norm_of(model: &Model<f64>) -> Result<&Normalization> {
    model
        .norm
        .as_ref()
        .context("checkpoint carries no normalization statistics")
}

fn check_vars(model: &Model<f64>, ds: &SeriesDataset) -> Result<()> {
    ensure!(
        model.config.n_vars == ds.n_vars(),
        "model expects {} variables, data has {}",
        model.config.n_vars,
        ds.n_vars()
    );
    Ok(())
}

/// Normalized windows of one split, with the split taken over every
/// stride-1 window of the series.
fn split_windows(model: &Model<f64>, ds: &SeriesDataset, split: Split, ratios: &SplitRatios) -> Result<WindowSet<f64>> {
    check_vars(model, ds)?;
    let cfg = &model.config;
    let all = all_windows::<f64>(ds, cfg.history, cfg.horizon, norm_of(model)?)?;
    let range = match split {
        Split::All => 0..all.len(),
        s => {
            let [tr, va, te] = split_ranges(all.len(), ratios);
            match s {
                Split::Train => tr,
                Split::Val => va,
                _ => te,
            }
        }
    };
    ensure!(!range.is_empty(), "the {split:?} split has no windows");
    let idx: Vec<usize> = range.clone().collect();
    let (x, y) = all.gather(&idx);
    Ok(WindowSet {
        x,
        y,
        starts: all.starts[range].to_vec(),
    })
}

/// R² and RRSE per horizon step and overall, on de-normalized values.
struct Scores {
    steps: Vec<(f64, f64)>,
    overall: (f64, f64),
}

fn score(y: &Tensor<f64>, pred: &Tensor<f64>) -> Result<Scores> {
    let mut steps = Vec::new();
    for k in 0..y.shape()[1] {
        let (a, b) = (horizon_slice(y, k)?, horizon_slice(pred, k)?);
        steps.push((r2(&a, &b)?, rrse(&a, &b)?));
    }
    Ok(Scores {
        steps,
        overall: (r2(y, pred)?, rrse(y, pred)?),
    })
}

fn evaluate(model: &Model<f64>, ws: &WindowSet<f64>, norm: &Normalization) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let pred = predict(model, &ws.x, CHUNK)?;
    Ok((norm.invert(&ws.y), norm.invert(&pred)))
}

fn print_scores(label: &str, s: &Scores) {
    println!("{label}: R2 {:.6}  RRSE {:.6}", s.overall.0, s.overall.1);
    for (k, (r, e)) in s.steps.iter().enumerate() {
        println!("  step {:>3}: R2 {r:.6}  RRSE {e:.6}", k + 1);
    }
}

fn progress(quiet: bool) -> impl FnMut(&EpochStats) {
    move |s: &EpochStats| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  train {:.6}  val {:.6}  best {:.6}",
                s.epoch + 1,
                s.train_loss,
                s.val_loss,
                s.best_val
            );
        }
    }
}

fn cast_windows<U: Scalar>(w: &Windows<f64>) -> Windows<U> {
    Windows {
        train: w.train.cast(),
        val: w.val.cast(),
        test: w.test.cast(),
        norm: w.norm.clone(),
    }
}

pub fn train(a: &TrainArgs) -> Result<Status> {
    let ds = load_data(&a.data)?;
    let kv = read_config(a.config.as_deref())?;
    if let Some(p) = &a.config {
        kv.reject_unknown(&all_keys()).with_context(|| format!("in {}", p.display()))?;
    }
    let mut mc = ModelConfig::new(ds.n_vars(), 12, 3);
    mc.apply(&kv)?;
    let mut tc = TrainConfig::default();
    tc.apply(&kv)?;
    let mut ratios = SplitRatios::default();
    ratios.apply(&kv)?;
    if let Some(h) = a.history {
        mc.history = h;
    }
    if let Some(g) = a.horizon {
        mc.horizon = g;
    }
    if let Some(b) = a.bits {
        tc.bits = b;
    }
    if let Some(e) = a.max_epochs {
        tc.max_epochs = e;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    mc.validate()?;
    tc.validate()?;

    let w = make_windows::<f64>(&ds, mc.history, mc.horizon, &ratios)?;
    if !a.quiet {
        eprintln!(
            "{} rows x {} variables; windows train {} / val {} / test {}; H={} G={} bits={} (T={})",
            ds.rows(),
            ds.n_vars(),
            w.train.len(),
            w.val.len(),
            w.test.len(),
            mc.history,
            mc.horizon,
            tc.bits,
            window_for_bits(tc.bits)
        );
    }
    let out: TrainOutcome<Model<f64>> = match a.precision {
        Precision::F64 => fit_with(&w, mc, &tc, progress(a.quiet))?,
        Precision::F32 => {
            let o = fit_with(&cast_windows::<f32>(&w), mc, &tc, progress(a.quiet))?;
            TrainOutcome {
                model: o.model.cast(),
                history: o.history,
                best_epoch: o.best_epoch,
                stopped_early: o.stopped_early,
            }
        }
    };
    // Scores reflect the checkpoint as stored.
    let model = out.model.snapped_to_f32();
    println!(
        "trained {} epochs, best epoch {}{}",
        out.history.len(),
        out.best_epoch + 1,
        if out.stopped_early { " (early stop)" } else { "" }
    );
    for (label, ws) in [("val", &w.val), ("test", &w.test)] {
        if ws.is_empty() {
            continue;
        }
        let (y, p) = evaluate(&model, ws, &w.norm)?;
        print_scores(label, &score(&y, &p)?);
    }
    checkpoint::save(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(Status::Ok)
}

pub fn convert(a: &ConvertArgs) -> Result<Status> {
    let m = load_model(&a.input)?;
    if m.mode != Mode::Ann {
        bail!("{} is already a converted ({}) checkpoint", a.input.display(), m.mode.name());
    }
    let mut s = spikyspace::train::convert(&m)?;
    if a.threshold_scale {
        s = apply_threshold_scaling(&s)?;
    }
    checkpoint::save(&s, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "converted: T = {}, threshold scaling {}; wrote {}",
        window_for_bits(s.config.bits),
        if a.threshold_scale { "on" } else { "off" },
        a.out.display()
    );
    Ok(Status::Ok)
}

fn csv_writer(out: Option<&Path>) -> Result<csv::Writer<Box<dyn std::io::Write>>> {
    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

pub fn forecast(a: &ForecastArgs) -> Result<Status> {
    let model = load_model(&a.model)?;
    let ds = load_data(&a.data)?;
    check_vars(&model, &ds)?;
    let norm = norm_of(&model)?;
    let (h, n) = (model.config.history, ds.n_vars());
    ensure!(ds.rows() >= h, "series has {} rows, the model needs {h}", ds.rows());
    let starts: Vec<usize> = if a.all_windows { (0..=ds.rows() - h).collect() } else { vec![ds.rows() - h] };
    let z = norm.apply(&ds.values);
    let mut x = Vec::with_capacity(starts.len() * h * n);
    for &s in &starts {
        x.extend_from_slice(&z.data()[s * n..(s + h) * n]);
    }
    let x = Tensor::new(&[starts.len(), h, n], x)?;
    let pred = norm.invert(&predict(&model, &x, CHUNK)?);
    let g = model.config.horizon;
    let mut w = csv_writer(a.out.as_deref())?;
    let mut header = vec!["t".to_string(), "step".to_string()];
    header.extend(ds.names.iter().cloned());
    w.write_record(&header)?;
    for (i, &s) in starts.iter().enumerate() {
        for k in 0..g {
            let mut rec = vec![(s + h + k).to_string(), (k + 1).to_string()];
            rec.extend((0..n).map(|c| pred[(i * g + k) * n + c].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(Status::Ok)
}

pub fn eval(a: &EvalArgs) -> Result<Status> {
    let model = load_model(&a.model)?;
    let ds = load_data(&a.data)?;
    let ratios = split_ratios(a.config.as_deref())?;
    let ws = split_windows(&model, &ds, a.split, &ratios)?;
    let (y, p) = evaluate(&model, &ws, norm_of(&model)?)?;
    println!("model {} ({}), {} windows", a.model.display(), model.mode.name(), ws.len());
    print_scores(&format!("{:?}", a.split).to_lowercase(), &score(&y, &p)?);
    Ok(Status::Ok)
}

pub fn plot_data(a: &PlotArgs) -> Result<Status> {
    let model = load_model(&a.model)?;
    let ds = load_data(&a.data)?;
    let ratios = split_ratios(a.config.as_deref())?;
    let ws = split_windows(&model, &ds, a.split, &ratios)?;
    let (y, p) = evaluate(&model, &ws, norm_of(&model)?)?;
    let (g, n, h) = (model.config.horizon, ds.n_vars(), model.config.history);
    let mut w = csv_writer(Some(&a.out))?;
    w.write_record(["t", "variable", "step", "true", "predicted"])?;
    for (i, &s) in ws.starts.iter().enumerate() {
        for k in 0..g {
            for c in 0..n {
                let j = (i * g + k) * n + c;
                w.write_record([
                    (s + h + k).to_string(),
                    ds.names[c].clone(),
                    (k + 1).to_string(),
                    y[j].to_string(),
                    p[j].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    println!("wrote {} rows to {}", ws.len() * g * n, a.out.display());
    Ok(Status::Ok)
}

pub fn energy(a: &EnergyArgs) -> Result<Status> {
    let model = load_model(&a.model)?;
    if model.mode != Mode::Snn {
        bail!("{} is an ANN checkpoint; run `spikyspace convert` first", a.model.display());
    }
    let text = fs::read_to_string(&a.table).with_context(|| format!("reading {}", a.table.display()))?;
    let table = EnergyTable::parse(&text).with_context(|| format!("in {}", a.table.display()))?;
    let ds = load_data(&a.data)?;
    let ratios = split_ratios(a.config.as_deref())?;
    let mut ws = split_windows(&model, &ds, a.split, &ratios)?;
    if let Some(k) = a.max_windows {
        ensure!(k > 0, "--max-windows must be >= 1");
        let idx: Vec<usize> = (0..ws.len().min(k)).collect();
        let (x, y) = ws.gather(&idx);
        ws = WindowSet {
            x,
            y,
            starts: ws.starts[..idx.len()].to_vec(),
        };
    }
    let report = profile(&model, &ws.x, &table)?;
    println!("{report}");
    let cmp = compare_ann_energy(&ann_op_counts(&model, ws.len()), &report.counters, &table);
    println!("dense quantized ANN vs spike-driven: {cmp}");
    if let Some(p) = &a.kv_out {
        let mut kv = report.to_key_values();
        kv.push_str(&format!(
            "ann.energy_j = {:e}\nratio = {}\nreduction_pct = {}\n",
            cmp.ann_energy, cmp.ratio, cmp.reduction_pct
        ));
        fs::write(p, kv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(Status::Ok)
}

pub fn synth(a: &SynthArgs) -> Result<Status> {
    ensure!(a.steps > 0, "--steps must be >= 1");
    let ds = coupled_sinusoids(a.steps, a.noise, a.seed);
    let mut w = csv_writer(Some(&a.out))?;
    w.write_record(&ds.names)?;
    for t in 0..ds.rows() {
        w.write_record(ds.row(t).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    println!("wrote {} rows to {}", ds.rows(), a.out.display());
    Ok(Status::Ok)
}
