use crate::config::{CliError, RunConfig};
use gpq_core::bench::{
    count_flops, encode_scenes, eval_map, flops_reduction, frequency_csv, measure_latency, reference_points_csv,
    selection_frequency, write_atomic, EvalConfig, FlopsConfig,
};
use gpq_core::checkpoint::Checkpoint;
use gpq_core::detector::{format_scenes, generate_dataset, generate_eval_set, parse_scenes, Detector, ModelConfig, Scene};
use gpq_core::gpq::finetune;
use gpq_core::optim;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

/// Artifacts written by one task, recorded in `manifest.txt`.
struct Run<'a> {
    cfg: &'a RunConfig,
    task: &'static str,
    artifacts: Vec<(String, String)>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig, task: &'static str) -> Result<Self, CliError> {
        std::fs::create_dir_all(&cfg.out)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", cfg.out.display())))?;
        Ok(Run {
            cfg,
            task,
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.cfg.out.join(name), bytes)?;
        let digest = Sha256::digest(bytes);
        let hex = digest.iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        });
        self.artifacts.push((name.to_string(), hex));
        Ok(())
    }

    fn finish(self) -> Result<(), CliError> {
        let mut text = format!("task={}\n", self.task);
        for (k, v) in self.cfg.entries() {
            writeln!(text, "{k}={v}").unwrap();
        }
        for (name, hex) in &self.artifacts {
            writeln!(text, "sha256.{name}={hex}").unwrap();
        }
        write_atomic(&self.cfg.out.join("manifest.txt"), text.as_bytes())?;
        Ok(())
    }
}

fn read_scenes(path: &Path) -> Result<Vec<Scene>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(parse_scenes(&text)?)
}

fn train_set(cfg: &RunConfig) -> Result<Vec<Scene>, CliError> {
    match &cfg.data {
        Some(p) => read_scenes(p),
        None => Ok(generate_dataset(cfg.seed, cfg.scenes, &cfg.scene())?),
    }
}

fn eval_set(cfg: &RunConfig) -> Result<Vec<Scene>, CliError> {
    match &cfg.eval_data {
        Some(p) => read_scenes(p),
        None => Ok(generate_eval_set(cfg.seed, cfg.eval_scenes, &cfg.scene())?),
    }
}

fn load(cfg: &RunConfig, task: &str) -> Result<Checkpoint, CliError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("checkpoint", format!("`{task}` needs a checkpoint")))?;
    Checkpoint::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn checkpoint_bytes(model: Detector, cfg: &RunConfig, iteration: u64, task: &str) -> Result<Vec<u8>, CliError> {
    let mut ck = Checkpoint::new(model, cfg.seed, iteration);
    ck.meta.push(("task".into(), task.into()));
    Ok(ck.to_bytes()?)
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let mut run = Run::new(cfg, "gen-data")?;
    let train = generate_dataset(cfg.seed, cfg.scenes, &cfg.scene())?;
    let eval = generate_eval_set(cfg.seed, cfg.eval_scenes, &cfg.scene())?;
    run.write("dataset.txt", format_scenes(&train).as_bytes())?;
    run.write("eval.txt", format_scenes(&eval).as_bytes())?;
    println!("wrote {} training and {} held-out scenes", train.len(), eval.len());
    run.finish()
}

/// Every scene must stay matchable: a query count below `max_objects`
/// would fail mid-run.
fn check_capacity(field: &str, queries: usize, cfg: &RunConfig) -> Result<(), CliError> {
    if queries < cfg.max_objects {
        return Err(CliError::config(
            field,
            format!("{queries} queries cannot cover scenes with up to {} objects", cfg.max_objects),
        ));
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    check_capacity("num_queries", cfg.num_queries, cfg)?;
    let data = train_set(cfg)?;
    let mut run = Run::new(cfg, "train")?;
    let mut model = Detector::new(cfg.model(), cfg.seed)?;
    let losses = optim::train(&mut model, &data, cfg.train())?;
    let mut csv = String::from("iteration,loss\n");
    for (t, l) in losses.iter().enumerate() {
        writeln!(csv, "{},{l}", t + 1).unwrap();
    }
    run.write("loss.csv", csv.as_bytes())?;
    run.write("reference_points.csv", reference_points_csv(&model.bank).as_bytes())?;
    run.write("model.gpq", &checkpoint_bytes(model, cfg, cfg.iterations as u64, "train")?)?;
    println!("trained {} iterations, final loss {:.4}", losses.len(), losses.last().copied().unwrap_or(0.0));
    run.finish()
}

pub fn prune(cfg: &RunConfig) -> Result<(), CliError> {
    let (model, start, train_cfg) = if cfg.from_scratch {
        (Detector::new(cfg.model(), cfg.seed)?, 0, cfg.train())
    } else {
        let ck = load(cfg, "prune")?;
        (ck.model, ck.iteration, cfg.train().halved())
    };
    let sched = cfg.schedule(model.num_queries())?;
    check_capacity("final_queries", cfg.final_queries, cfg)?;
    let data = train_set(cfg)?;
    let mut run = Run::new(cfg, "prune")?;
    let (model, report) = finetune(model, &data, &sched, train_cfg)?;
    run.write("prune_report.csv", report.to_csv().as_bytes())?;
    run.write("reference_points.csv", reference_points_csv(&model.bank).as_bytes())?;
    println!(
        "{} prune events ({}), {} queries remain",
        report.events.len(),
        sched.criterion.as_str(),
        report.final_alive.len()
    );
    let iteration = start + sched.total_iterations as u64;
    run.write("pruned.gpq", &checkpoint_bytes(model, cfg, iteration, "prune")?)?;
    run.finish()
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let ck = load(cfg, "eval")?;
    let scenes = eval_set(cfg)?;
    let mut run = Run::new(cfg, "eval")?;
    let report = eval_map(
        &ck.model,
        &scenes,
        &EvalConfig {
            top_k: cfg.top_k,
            ..EvalConfig::default()
        },
    )?;
    run.write("map.csv", report.to_csv().as_bytes())?;
    println!("mAP {:.4} over {} scenes ({} queries)", report.map, scenes.len(), ck.model.num_queries());
    run.finish()
}

pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    if !cfg.flops && !cfg.latency {
        return Err(CliError::config("flops", "bench needs --flops and/or --latency"));
    }
    let base = match &cfg.checkpoint {
        Some(_) => Some(load(cfg, "bench")?.model),
        None => None,
    };
    let model_cfg: ModelConfig = base.as_ref().map(|m| m.config).unwrap_or_else(|| cfg.model());
    let own = base.as_ref().map(|m| m.num_queries()).unwrap_or(model_cfg.num_queries);
    let counts = if cfg.nq.is_empty() { vec![own] } else { cfg.nq.clone() };
    let mut run = Run::new(cfg, "bench")?;

    if cfg.flops {
        let mut fc = FlopsConfig::from_model(&model_cfg, own);
        if let Some(nk) = cfg.num_keys {
            fc.num_keys = nk as u64;
        }
        let mut csv = String::from("num_queries,self_attention,cross_attention,ffn,heads,query_embed,total,gflops\n");
        let mut first = None;
        for &nq in &counts {
            let r = count_flops(&fc.with_queries(nq as u64))?;
            let parts: Vec<String> = r.parts().iter().map(|(_, n)| n.to_string()).collect();
            writeln!(csv, "{nq},{},{},{}", parts.join(","), r.total(), r.gflops()).unwrap();
            let first = *first.get_or_insert(r);
            println!(
                "nq={nq} flops={} ({:.3} GFLOPs) reduction vs nq={}: {:.2}%",
                r.total(),
                r.gflops(),
                counts[0],
                100.0 * flops_reduction(&first, &r)
            );
        }
        run.write("flops.csv", csv.as_bytes())?;
    }

    if cfg.latency {
        let scenes = eval_set(cfg)?;
        let scenes = &scenes[..scenes.len().min(16)];
        let mut csv = String::from("num_queries,trials,median_ms,p90_ms\n");
        for &nq in &counts {
            let model = match &base {
                Some(m) if m.num_queries() == nq => m.clone(),
                _ => Detector::new(
                    ModelConfig {
                        num_queries: nq,
                        ..model_cfg
                    },
                    cfg.seed,
                )?,
            };
            let features = encode_scenes(&model, scenes)?;
            let stats = measure_latency(&model, &features, cfg.trials, cfg.warmup_trials)?;
            writeln!(csv, "{nq},{},{},{}", stats.trials, stats.median_ms, stats.p90_ms).unwrap();
            println!("nq={nq} median {:.3} ms p90 {:.3} ms", stats.median_ms, stats.p90_ms);
        }
        run.write("latency.csv", csv.as_bytes())?;
    }
    run.finish()
}

pub fn analyze(cfg: &RunConfig) -> Result<(), CliError> {
    let ck = load(cfg, "analyze")?;
    let scenes = eval_set(cfg)?;
    let mut run = Run::new(cfg, "analyze")?;
    let freq = selection_frequency(&ck.model, &scenes, cfg.select_k)?;
    run.write("selection_frequency.csv", frequency_csv(&freq).as_bytes())?;
    run.write("reference_points.csv", reference_points_csv(&ck.model.bank).as_bytes())?;
    let (lo, hi) = (freq.first().map_or(0, |f| f.1), freq.last().map_or(0, |f| f.1));
    println!(
        "selection counts over {} scenes (k={}): min {lo} max {hi}, {} of {} queries never selected",
        scenes.len(),
        cfg.select_k,
        freq.iter().filter(|f| f.1 == 0).count(),
        freq.len()
    );
    run.finish()
}
