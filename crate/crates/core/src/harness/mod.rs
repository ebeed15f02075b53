//! Training, evaluation and ablation loops over a generated dataset.

mod config;
mod pipeline;

pub use config::{TrainConfig, CONFIG_VERSION};
pub use pipeline::{forward, image_tensor, objective, Forward, Prepared};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::eval::{ablation_compare, comparison_table, count_metrics, predict_labels, Comparison, MetricCounts, MetricReport, RunMetrics};
use crate::losses::LossReport;
use crate::scenes::io::{Dataset, Split};
use crate::scenes::{augment, SceneSample};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::toynet::ToyNet;

/// Adam with decoupled weight decay.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, weight_decay: cfg.weight_decay, t: 0, moments: BTreeMap::new() }
    }

    pub fn step(&mut self, net: &mut ToyNet, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        for (name, g) in grads {
            let p = net.param_mut(name).expect("gradient for a known parameter");
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *x -= lr * (update + self.weight_decay * *x);
            }
        }
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub sample_id: String,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// Written next to the run when training hits a non-finite value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailureDump {
    pub step: u64,
    pub sample_id: String,
    pub augment_seed: Option<u64>,
    pub losses: LossReport,
    pub nonfinite_gradients: Vec<String>,
    pub parameter_max_abs: BTreeMap<String, f64>,
    pub image_max: [f64; 2],
}

#[derive(Debug)]
pub enum TrainError {
    Failed(Error),
    NonFinite(Box<FailureDump>),
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Failed(e)
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Failed(e) => e,
            TrainError::NonFinite(d) => Error::Numeric(format!("non-finite loss or gradient at step {} on sample {}", d.step, d.sample_id)),
        }
    }
}

/// Train in memory. Samples are consumed in order, cycling; `on_step` sees
/// every step's record and the parameters after its update.
pub fn fit(
    cfg: &TrainConfig,
    samples: &[SceneSample],
    mut on_step: impl FnMut(&StepRecord, &ToyNet) -> Result<()>,
) -> std::result::Result<ToyNet, TrainError> {
    cfg.validate()?;
    let n_classes = samples.first().map_or(1, |s| s.labels.n_classes());
    let mut net = ToyNet::new(cfg.model_config(n_classes))?;
    if cfg.steps == 0 {
        return Ok(net);
    }
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()).into());
    }
    let prepared = samples.iter().map(|s| Prepared::new(s, cfg)).collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(cfg);
    let aug = cfg.augment_params();
    for step in 0..cfg.steps {
        let idx = (step % samples.len() as u64) as usize;
        let prep = &prepared[idx];
        let augment_seed = cfg.augment.then(|| derive_seed(cfg.seed, "augment", step));
        let images = match augment_seed {
            Some(seed) => prep.with_images(&augment(&samples[idx], &aug, seed)),
            None => prep.images.clone(),
        };
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let fwd = forward(&net, &mut g, &bound, prep, &images, cfg)?;
        let (loss, losses) = objective(&mut g, &fwd, prep, cfg, step)?;
        let mut raw = g.backward(loss);
        let grads = net.gradients(&bound, &mut raw);
        let nonfinite: Vec<String> = grads.iter().filter(|(_, t)| !t.all_finite()).map(|(k, _)| k.clone()).collect();
        if !losses.l_total.is_finite() || !nonfinite.is_empty() {
            return Err(TrainError::NonFinite(Box::new(FailureDump {
                step,
                sample_id: prep.sample_id.clone(),
                augment_seed,
                losses,
                nonfinite_gradients: nonfinite,
                parameter_max_abs: net.params().iter().map(|(k, v)| (k.clone(), v.max_abs())).collect(),
                image_max: [images[0].max_abs(), images[1].max_abs()],
            })));
        }
        let lr = cfg.lr_at(step);
        opt.step(&mut net, &grads, lr);
        on_step(&StepRecord { step, sample_id: prep.sample_id.clone(), lr, losses }, &net)?;
    }
    Ok(net)
}

/// Files written into a run directory.
pub mod run_files {
    pub const CONFIG: &str = "config.toml";
    pub const MANIFEST: &str = "manifest.json";
    pub const LOSS_LOG: &str = "loss_log.jsonl";
    pub const MODEL: &str = "model.ssck";
    pub const CHECKPOINTS: &str = "checkpoints";
    pub const FAILURE: &str = "failure.json";
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    /// Seconds since the Unix epoch; the only non-reproducible field.
    pub created_unix: u64,
    pub data: String,
    pub train_ids: Vec<String>,
    pub steps: u64,
    pub files: Vec<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn write_model(path: &Path, net: &ToyNet) -> Result<()> {
    let mut bytes = Vec::new();
    net.write_checkpoint(&mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn partial_path(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

/// Replace `out` with the finished directory `tmp`.
fn publish(tmp: &Path, out: &Path) -> Result<()> {
    if out.exists() {
        fs::remove_dir_all(out)?;
    }
    fs::rename(tmp, out)?;
    Ok(())
}

/// Training scenes selected by the config, in manifest order.
pub fn training_ids(cfg: &TrainConfig, dataset: &Dataset) -> Vec<String> {
    let ids = dataset.manifest.ids(Split::Train);
    let n = if cfg.train_scenes == 0 { ids.len() } else { cfg.train_scenes.min(ids.len()) };
    ids[..n].to_vec()
}

/// Train on a dataset and write a run directory. The directory is built
/// under a temporary name and renamed into place only on success; a
/// numeric failure leaves `<out>.failed` holding the log and a dump.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, out: &Path) -> Result<ToyNet> {
    cfg.validate()?;
    let ids = training_ids(cfg, dataset);
    let samples = ids.iter().map(|id| dataset.load(id)).collect::<Result<Vec<_>>>()?;
    let tmp = partial_path(out, ".partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(tmp.join(run_files::CHECKPOINTS))?;
    fs::write(tmp.join(run_files::CONFIG), cfg.to_toml_string())?;
    let mut log = std::io::BufWriter::new(fs::File::create(tmp.join(run_files::LOSS_LOG))?);
    let result = fit(cfg, &samples, |rec, net| {
        serde_json::to_writer(&mut log, rec)?;
        log.write_all(b"\n")?;
        let done = rec.step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
            write_model(&tmp.join(run_files::CHECKPOINTS).join(format!("step_{done:06}.ssck")), net)?;
        }
        Ok(())
    });
    log.flush()?;
    drop(log);
    let net = match result {
        Ok(net) => net,
        Err(TrainError::NonFinite(dump)) => {
            write_json(&tmp.join(run_files::FAILURE), &dump)?;
            let failed = partial_path(out, ".failed");
            publish(&tmp, &failed)?;
            return Err(TrainError::NonFinite(dump).into());
        }
        Err(TrainError::Failed(e)) => {
            fs::remove_dir_all(&tmp)?;
            return Err(e);
        }
    };
    write_model(&tmp.join(run_files::MODEL), &net)?;
    let mut files: Vec<String> = vec![run_files::CONFIG.into(), run_files::LOSS_LOG.into(), run_files::MODEL.into()];
    let mut ckpts: Vec<String> = fs::read_dir(tmp.join(run_files::CHECKPOINTS))?
        .map(|e| e.map(|e| format!("{}/{}", run_files::CHECKPOINTS, e.file_name().to_string_lossy())))
        .collect::<std::io::Result<_>>()?;
    ckpts.sort();
    files.extend(ckpts);
    let manifest = RunManifest {
        version: 1,
        created_unix: std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        data: fs::canonicalize(&dataset.root).unwrap_or_else(|_| dataset.root.clone()).display().to_string(),
        train_ids: ids,
        steps: cfg.steps,
        files,
    };
    write_json(&tmp.join(run_files::MANIFEST), &manifest)?;
    publish(&tmp, out)?;
    Ok(net)
}

/// Read a finished run's config and final model.
pub fn load_run(run: &Path) -> Result<(TrainConfig, ToyNet)> {
    let model_path = run.join(run_files::MODEL);
    if !model_path.is_file() {
        return Err(Error::MissingCheckpoint(format!("{} (train a model first)", model_path.display())));
    }
    let cfg = TrainConfig::load(&run.join(run_files::CONFIG), &[])?;
    let net = ToyNet::read_checkpoint(fs::File::open(&model_path)?)?;
    if net.config.channels != cfg.channels || net.config.depth_bins != cfg.depth_bins {
        return Err(Error::load("checkpoint does not match the run config"));
    }
    Ok((cfg, net))
}

pub fn read_loss_log(run: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(run.join(run_files::LOSS_LOG))?;
    text.lines().filter(|l| !l.is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Class logits for one sample with frozen parameters.
pub fn predict(net: &ToyNet, cfg: &TrainConfig, sample: &SceneSample) -> Result<Tensor> {
    let prep = Prepared::new(sample, cfg)?;
    let mut g = Graph::new();
    let b = net.bind_frozen(&mut g);
    let fwd = forward(net, &mut g, &b, &prep, &prep.images, cfg)?;
    Ok(g.value(fwd.sem_logits).clone())
}

/// Per-pixel depth distributions of both views, `[h, w, D]` each.
pub fn predict_depth(net: &ToyNet, cfg: &TrainConfig, sample: &SceneSample) -> Result<[Tensor; 2]> {
    let prep = Prepared::new(sample, cfg)?;
    let mut g = Graph::new();
    let b = net.bind_frozen(&mut g);
    let mut out = Vec::new();
    for img in &prep.images {
        let x = g.constant(img.clone());
        let levels = net.encode_2d_op(&mut g, &b, x)?;
        let logits = net.depth_head_op(&mut g, &b, levels[3]);
        out.push(crate::autograd::softmax_rows(g.value(logits)));
    }
    Ok([out[0].clone(), out[1].clone()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: BTreeMap<String, MetricReport>,
    pub aggregate: MetricReport,
}

pub fn evaluate_samples(net: &ToyNet, cfg: &TrainConfig, samples: &[SceneSample], split: &str) -> Result<EvalReport> {
    let n_classes = samples.first().map_or(net.config.n_classes, |s| s.labels.n_classes());
    if n_classes != net.config.n_classes {
        return Err(Error::load(format!("model predicts {} classes, data has {n_classes}", net.config.n_classes)));
    }
    let mut total = MetricCounts::new(n_classes);
    let mut per_sample = BTreeMap::new();
    for s in samples {
        let pred = predict_labels(&predict(net, cfg, s)?, n_classes)?;
        let counts = count_metrics(&pred, &s.labels)?;
        total.accumulate(&counts);
        per_sample.insert(s.sample_id.clone(), counts.report());
    }
    Ok(EvalReport { split: split.into(), samples: per_sample, aggregate: total.report() })
}

/// Evaluate a run on a split and write `metrics_<split>.json` into it.
pub fn evaluate(run: &Path, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let (cfg, net) = load_run(run)?;
    let samples = dataset.load_split(split)?;
    let report = evaluate_samples(&net, &cfg, &samples, split.name())?;
    let path = run.join(format!("metrics_{}.json", split.name()));
    let tmp = path.with_extension("json.partial");
    write_json(&tmp, &report)?;
    fs::rename(tmp, path)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    StereoSfa,
    Oad,
    Distill,
}

impl Toggle {
    pub fn name(self) -> &'static str {
        match self {
            Toggle::StereoSfa => "stereo_sfa",
            Toggle::Oad => "oad",
            Toggle::Distill => "distill",
        }
    }

    fn disable(self, cfg: &mut TrainConfig) {
        match self {
            Toggle::StereoSfa => cfg.stereo_sfa = false,
            Toggle::Oad => cfg.oad = false,
            Toggle::Distill => cfg.distill = false,
        }
    }
}

impl std::str::FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Toggle::StereoSfa, Toggle::Oad, Toggle::Distill]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown toggle {s:?} (expected stereo_sfa, oad or distill)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub split: String,
    pub seeds: Vec<u64>,
    /// Variant name to one evaluated run per seed.
    pub runs: BTreeMap<String, Vec<RunMetrics>>,
    pub comparisons: Vec<Comparison>,
    pub table: String,
}

pub struct AblationPlan {
    pub toggles: Vec<Toggle>,
    pub seeds: Vec<u64>,
    /// Also train one variant per depth discretization.
    pub discretization_sweep: bool,
    pub split: Split,
}

/// The variants an ablation trains, keyed by name.
pub fn ablation_variants(cfg: &TrainConfig, plan: &AblationPlan) -> Vec<(String, TrainConfig)> {
    let mut out = vec![("full".to_string(), cfg.clone())];
    for &t in &plan.toggles {
        let mut c = cfg.clone();
        t.disable(&mut c);
        out.push((format!("without_{}", t.name()), c));
    }
    if plan.discretization_sweep {
        for mode in crate::camera::Discretization::ALL {
            let c = TrainConfig { discretization: mode, ..cfg.clone() };
            out.push((format!("discretization_{}", mode.name()), c));
        }
    }
    out
}

/// Train and evaluate every variant under every seed, then compare each
/// against the full model. `progress` receives `(variant, seed, report)`.
pub fn ablate(
    cfg: &TrainConfig,
    dataset: &Dataset,
    plan: &AblationPlan,
    mut progress: impl FnMut(&str, u64, &MetricReport),
) -> Result<AblationReport> {
    let train_samples =
        training_ids(cfg, dataset).iter().map(|id| dataset.load(id)).collect::<Result<Vec<_>>>()?;
    let eval_ids = dataset.manifest.ids(plan.split).to_vec();
    let eval_samples = dataset.load_split(plan.split)?;
    let mut runs: BTreeMap<String, Vec<RunMetrics>> = BTreeMap::new();
    let variants = ablation_variants(cfg, plan);
    for (name, vcfg) in &variants {
        for &seed in &plan.seeds {
            let c = TrainConfig { seed, ..vcfg.clone() };
            let net = fit(&c, &train_samples, |_, _| Ok(()))?;
            let report = evaluate_samples(&net, &c, &eval_samples, plan.split.name())?;
            progress(name, seed, &report.aggregate);
            runs.entry(name.clone()).or_default().push(RunMetrics {
                seed,
                split: plan.split.name().into(),
                sample_ids: eval_ids.clone(),
                aggregate: report.aggregate,
            });
        }
    }
    let full = &runs["full"];
    let comparisons = variants[1..]
        .iter()
        .map(|(name, _)| ablation_compare("full", full, name, &runs[name]))
        .collect::<Result<Vec<_>>>()?;
    let table = comparison_table(&comparisons);
    Ok(AblationReport { split: plan.split.name().into(), seeds: plan.seeds.clone(), runs, comparisons, table })
}
