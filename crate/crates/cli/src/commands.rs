use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use emov2::backbone::{Backbone, BackboneConfig};
use emov2::checks::{random_tensor, suites, Outcome};
use emov2::cost::{parse_stack, report_model, steps_to_csv, Reachability};
use emov2::io::{load_tensor, load_weights, save_tensor, save_weights, DType};
use emov2::nn::{named_tensors, ForwardCtx};
use emov2::tensor::no_grad;
use emov2::train::{self, TrainConfig};

use crate::{CmdResult, Common, Failure, EXIT_IO};

const DEFAULT_ERF_SIDE: usize = 16;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
}

/// Prints to stdout, or writes to --out when given.
fn emit(c: &Common, text: &str) -> CmdResult {
    match &c.out {
        Some(path) => write_file(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn required_out<'a>(c: &'a Common, what: &str) -> Result<&'a Path, Failure> {
    c.out.as_deref().ok_or_else(|| Failure::usage(format!("{what} needs --out")))
}

pub fn cost(c: &Common) -> CmdResult {
    let config = c.model()?;
    let res = c.res.unwrap_or(config.resolution);
    let report = report_model(&config, res, res)?;
    log::info!(
        "{res}x{res}: {} params, {} FLOPs ({} MACs)",
        report.total_params(),
        report.total_flops(),
        report.total_macs()
    );
    emit(c, &report.to_csv())
}

pub fn check(c: &Common, name: &str) -> CmdResult {
    let selected = suites().resolve(name)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.threads())
        .build()
        .map_err(|e| Failure::usage(format!("thread pool: {e}")))?;
    let seed = c.seed;
    let results: Vec<Vec<Outcome>> = pool.install(|| selected.par_iter().map(|s| s.run(seed)).collect());
    let outcomes: Vec<Outcome> = results.into_iter().flatten().collect();
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let mut text: String = outcomes.iter().map(|o| format!("{o}\n")).collect();
    text.push_str(&format!("{} passed, {failed} failed\n", outcomes.len() - failed));
    if let Some(path) = &c.out {
        write_file(path, &text)?;
    }
    print!("{text}");
    if failed > 0 {
        Err(Failure::verify(format!("{failed} check(s) failed")))
    } else {
        Ok(())
    }
}

pub fn forward(c: &Common, input: &Path, weights: Option<&Path>) -> CmdResult {
    let config = c.model()?;
    let mut model = Backbone::build(&config, c.seed)?;
    if let Some(path) = weights {
        load_weights(path, &mut model)?;
    }
    let x = load_tensor(input)?;
    match x.shape() {
        [_, 3, _, _] => {}
        s => return Err(Failure::usage(format!("input must be [N,3,H,W], got {s:?}"))),
    }
    let (feats, logits) = no_grad(|| model.classify_features(&x, &ForwardCtx::eval()))?;
    println!("input: {:?}", x.shape());
    for (i, f) in feats.iter().enumerate() {
        println!("stage{}: {:?}", i + 1, f.shape());
    }
    println!("logits: {:?}", logits.shape());
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("logits.emot"));
    save_tensor(&out, &logits, DType::F64)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

pub fn train_toy(c: &Common, steps: usize, lr: f64, batch: usize, dataset: usize) -> CmdResult {
    let config = if c.preset.is_none() && c.config.is_none() {
        BackboneConfig::toy()
    } else {
        c.model()?
    };
    let tc = TrainConfig {
        steps,
        lr,
        batch_size: batch,
        dataset_size: dataset,
        seed: c.seed,
    };
    let (_, losses) = train::train_toy(&config, &tc)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    let (first, last) = (losses[0], losses[losses.len() - 1]);
    log::info!("loss {first:.4} -> {last:.4} ({:.1}%)", 100.0 * last / first);
    emit(c, &csv)
}

pub fn erf(c: &Common, stack: &str, height: Option<usize>, width: Option<usize>) -> CmdResult {
    let layers = parse_stack(stack)?;
    let h = height.or(c.res).unwrap_or(DEFAULT_ERF_SIDE);
    let w = width.or(c.res).unwrap_or(h);
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("erf"));
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    let mut r = Reachability::new(h, w);
    let center = r.center();
    let mut steps = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        r.apply(layer)?;
        steps.push(r.step(i + 1));
        write_file(&dir.join(format!("layer_{:02}.pgm", i + 1)), r.to_pgm(center))?;
    }
    let csv = steps_to_csv(&steps);
    write_file(&dir.join("coverage.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn tensor(c: &Common, shape: &str, dtype: &str) -> CmdResult {
    let dims: Vec<usize> = shape
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::usage(format!("bad --shape `{shape}`: {e}")))?;
    let dtype = match dtype {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(Failure::usage(format!("--dtype must be f32 or f64, got `{other}`"))),
    };
    let out = required_out(c, "tensor")?;
    save_tensor(out, &random_tensor(&dims, c.seed, 1.0), dtype)?;
    Ok(())
}

pub fn weights_save(c: &Common) -> CmdResult {
    let model = Backbone::build(&c.model()?, c.seed)?;
    let out = required_out(c, "weights save")?;
    save_weights(out, &model)?;
    println!("{} tensors, {} parameters", named_tensors(&model).len(), model.param_count());
    Ok(())
}

pub fn weights_load(c: &Common, path: &Path) -> CmdResult {
    let mut model = Backbone::build(&c.model()?, c.seed)?;
    load_weights(path, &mut model)?;
    println!("{} tensors, {} parameters", named_tensors(&model).len(), model.param_count());
    Ok(())
}
