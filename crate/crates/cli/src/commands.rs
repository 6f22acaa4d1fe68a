use std::fs;
use std::path::{Path, PathBuf};

use ped_core::datagen::{make_shape_latents, marginal_samples, sample_dataset, sample_deep_dataset};
use ped_core::deep::{enumerate_deep_relu, infer_deep_all, DeepInferOptions, DeepPedSpec, DeepSpecRecord};
use ped_core::eval::{align_latents, downstream_run, qr_view, tally_wins, Alignment, Backbone, DownstreamReport};
use ped_core::expfam::ExpFamily;
use ped_core::io::{
    read_dataset, read_json, read_matrix_csv, write_dataset, write_json, write_losses_csv, write_marginals_csv,
    write_matrix_csv, DatasetFiles, DatasetMeta,
};
use ped_core::numkernel::linalg::symmetric_eigen;
use ped_core::numkernel::matrix::Matrix;
use ped_core::numkernel::rng::RngStream;
use ped_core::shallow::{enumerate_relu_fixed_points, infer_all, AssumptionReport, InferOptions, LayerRecord, MAX_ENUMERATION_DIM};
use ped_core::train::{init_deep, init_layer, resume_deep, resume_shallow, LossRecord, ResumeState, TrainConfig};
use ped_core::{kappa, CanonicalMap, PedError, PedLayer, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Shallow(PedLayer),
    Deep(DeepPedSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRecord {
    Shallow(LayerRecord),
    Deep(DeepSpecRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model: ModelRecord,
    pub resume: ResumeState,
    pub history: Vec<LossRecord>,
}

impl Model {
    fn record(&self) -> ModelRecord {
        match self {
            Model::Shallow(l) => ModelRecord::Shallow(l.to_record()),
            Model::Deep(s) => ModelRecord::Deep(s.to_record()),
        }
    }

    fn from_record(rec: ModelRecord) -> Result<Self> {
        Ok(match rec {
            ModelRecord::Shallow(r) => Model::Shallow(PedLayer::from_record(r)?),
            ModelRecord::Deep(r) => Model::Deep(DeepPedSpec::from_record(r)?),
        })
    }

    fn input_dim(&self) -> usize {
        match self {
            Model::Shallow(l) => l.d(),
            Model::Deep(s) => s.observed_dim(),
        }
    }
}

/// A full checkpoint, or a bare layer or deep-spec record.
pub fn load_model(path: &Path) -> Result<Model> {
    let value: Value = read_json(path)?;
    let ctx = |e: serde_json::Error| PedError::Validation(format!("{}: {e}", path.display()));
    let rec = if value.get("model").is_some() {
        serde_json::from_value::<Checkpoint>(value).map_err(ctx)?.model
    } else if value.get("layers").is_some() {
        ModelRecord::Deep(serde_json::from_value(value).map_err(ctx)?)
    } else {
        ModelRecord::Shallow(serde_json::from_value(value).map_err(ctx)?)
    };
    Model::from_record(rec)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PedError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn check_dims(model: &Model, data: &DatasetFiles) -> Result<()> {
    if model.input_dim() != data.y.rows() {
        return Err(PedError::Validation(format!(
            "model expects {} observed dimensions, dataset has {}",
            model.input_dim(),
            data.y.rows()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- gen-data

fn generate_one(cfg: &RunConfig, dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let d = &cfg.dataset;
    let mut latents = make_shape_latents(d.resolution)?;
    if let Some(m) = d.samples {
        latents = latents.subsample(m, seed);
    }
    let (w_true, y, clamp_count) = if d.dims.len() == 2 {
        let ds = sample_dataset(&latents, d.dims[0], d.family, &d.maps[0], seed)?;
        (vec![ds.w_true], ds.y, ds.clamp_count)
    } else {
        let ds = sample_deep_dataset(&latents, &d.dims, &d.maps, d.family, seed)?;
        let y = ds.y().clone();
        (ds.weights, y, ds.clamp_count)
    };
    let files = DatasetFiles {
        meta: DatasetMeta {
            family: d.family,
            maps: d.maps.clone(),
            seed,
            dims: d.dims.clone(),
            resolution: d.resolution,
            samples: y.cols(),
            clamp_count,
        },
        y,
        z_true: latents.z,
        w_true,
    };
    let mut written = write_dataset(dir, &files)?;
    if let Some(m) = &d.marginal {
        let s = marginal_samples(d.family, &d.maps[0], m.draws, m.lambda_prior, seed)?;
        let p = dir.join("marginals.csv");
        write_marginals_csv(&p, &s)?;
        written.push(p);
    }
    Ok(written)
}

pub fn gen_data(cfg: &RunConfig, out: &Path, sweep: Option<usize>, seed: Option<u64>) -> Result<()> {
    let base = seed.unwrap_or(cfg.dataset.seed);
    create_dir(out)?;
    match sweep {
        None => {
            let files = generate_one(cfg, out, base)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Some(n) => {
            let results: Vec<Result<u64>> = (0..n as u64)
                .into_par_iter()
                .map(|k| {
                    let member = RngStream::new(base).split(k).seed();
                    generate_one(cfg, &out.join(format!("seed{k}")), member).map(|_| member)
                })
                .collect();
            for (k, r) in results.into_iter().enumerate() {
                println!("seed{k}: dataset seed {}", r?);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- train

pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let data = read_dataset(data_dir)?;
    let model_cfg = cfg.resolve_model(&data.meta.dims, &data.meta.maps)?;
    let mut tcfg: TrainConfig = cfg.train_config(model_cfg.is_deep())?;
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    let (model, state, mut history) = match resume {
        Some(p) => {
            let ck: Checkpoint = read_json(p)?;
            (Model::from_record(ck.model)?, Some(ck.resume), ck.history)
        }
        None => {
            let mut rng = RngStream::new(tcfg.seed).split(u64::MAX);
            let m = if model_cfg.is_deep() {
                if data.meta.family != ExpFamily::Gaussian {
                    return Err(PedError::Validation("deep models need a gaussian dataset".into()));
                }
                Model::Deep(init_deep(&model_cfg.dims, model_cfg.data_precision, &model_cfg.lambdas, &model_cfg.maps, &mut rng)?)
            } else {
                let map: CanonicalMap = model_cfg.maps[0].clone();
                Model::Shallow(init_layer(model_cfg.dims[0], model_cfg.dims[1], model_cfg.lambdas[0], data.meta.family, map, &mut rng)?)
            };
            (m, None, Vec::new())
        }
    };
    check_dims(&model, &data)?;
    let next = state.as_ref().map_or(0, |s| s.next_epoch).max(tcfg.epochs);
    let report = |epoch: usize| eprintln!("epoch {}/{} done", epoch + 1, tcfg.epochs);
    let (trained, resume_state, new_history) = match model {
        Model::Shallow(layer) => {
            let r = resume_shallow(&data.y, &layer, state, &tcfg, |e, _| report(e))?;
            (
                Model::Shallow(r.layer),
                ResumeState { next_epoch: next, optimizer: vec![r.optimizer], latents: r.latents },
                r.history,
            )
        }
        Model::Deep(spec) => {
            let r = resume_deep(&data.y, &spec, state, &tcfg, |e, _| report(e))?;
            (
                Model::Deep(r.spec),
                ResumeState { next_epoch: next, optimizer: r.optimizer, latents: r.states },
                r.history,
            )
        }
    };
    history.extend(new_history);
    create_dir(out)?;
    let ck = Checkpoint {
        model: trained.record(),
        resume: resume_state,
        history,
    };
    write_json(&out.join("checkpoint.json"), &ck)?;
    write_json(&out.join("model.json"), &ck.model)?;
    write_losses_csv(&out.join("losses.csv"), &ck.history)?;
    let last = ck.history.last().map_or(f64::NAN, |h| h.objective);
    println!("trained {} steps, final batch objective {last}", ck.history.len());
    Ok(())
}

// ---------------------------------------------------------------- embed

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub alignment: Alignment,
    pub nonconverged: usize,
    pub boundary: usize,
}

pub fn embed(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let data = read_dataset(data_dir)?;
    check_dims(&model, &data)?;
    let solver = cfg.train_config(matches!(model, Model::Deep(_)))?.solver;
    let (z, nonconverged, boundary) = match &model {
        Model::Shallow(layer) => {
            let o = infer_all(&data.y, layer, &solver, &InferOptions::default())?;
            (o.z.clone(), o.nonconverged().len(), o.boundary.iter().filter(|b| **b).count())
        }
        Model::Deep(spec) => {
            let o = infer_deep_all(&data.y, spec, &solver, &DeepInferOptions::default())?;
            (o.bottleneck.clone(), o.nonconverged().len(), o.boundary.iter().filter(|b| **b).count())
        }
    };
    let top_w = match &model {
        Model::Shallow(layer) => &layer.w,
        Model::Deep(spec) => &spec.layers.last().expect("deep spec has layers").w,
    };
    create_dir(out)?;
    write_matrix_csv(&out.join("embeddings.csv"), &z)?;
    write_matrix_csv(&out.join("embeddings_qr.csv"), &qr_view(top_w, &z))?;
    let alignment = align_latents(&z, &data.z_true)?;
    let r2: Vec<String> = alignment.r2.iter().map(|r| format!("{r:.4}")).collect();
    println!("alignment R^2: {}{}", r2.join(" "), if alignment.rank_deficient { " (rank deficient)" } else { "" });
    if nonconverged > 0 {
        eprintln!("warning: {nonconverged} samples did not converge");
    }
    write_json(&out.join("alignment.json"), &EmbedSummary {
        alignment,
        nonconverged,
        boundary,
    })
}

// ---------------------------------------------------------------- diagnose

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub samples: usize,
    pub nonconverged: usize,
    pub boundary: usize,
    pub mean_iterations: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenStats {
    pub probed: usize,
    pub min: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogRow {
    pub pattern: String,
    pub z_star: Vec<f64>,
    pub consistent: bool,
    pub hessian_pd: Option<bool>,
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnosis {
    pub layer: usize,
    pub kappa: f64,
    pub gram_norm: f64,
    pub product: f64,
    pub verdict: String,
    pub numerical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub layers: Vec<LayerDiagnosis>,
    pub solver: Option<SolverStats>,
    pub hessian_min_eigenvalue: Option<EigenStats>,
    pub jacobian_norm_bound: Option<f64>,
    pub catalog: Option<Vec<CatalogRow>>,
    pub errors: Vec<String>,
}

fn layer_diagnosis(layer: usize, r: &AssumptionReport) -> LayerDiagnosis {
    LayerDiagnosis {
        layer,
        kappa: r.kappa,
        gram_norm: r.gram_norm,
        product: r.product(),
        verdict: r.verdict().into(),
        numerical: r.numerical,
    }
}

fn eigen_stats(mut mins: Vec<f64>) -> Option<EigenStats> {
    if mins.is_empty() {
        return None;
    }
    mins.sort_by(f64::total_cmp);
    Some(EigenStats {
        probed: mins.len(),
        min: mins[0],
        median: mins[mins.len() / 2],
    })
}

fn pattern_string(p: &[bool]) -> String {
    p.iter().map(|b| if *b { '1' } else { '0' }).collect()
}

pub struct DiagnoseOptions {
    pub enumerate: bool,
    pub sample: usize,
    pub probes: usize,
}

pub fn diagnose(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, out: Option<&Path>, opts: &DiagnoseOptions) -> Result<()> {
    let model = load_model(checkpoint)?;
    let data = read_dataset(data_dir)?;
    check_dims(&model, &data)?;
    let solver = cfg.train_config(matches!(model, Model::Deep(_)))?.solver;
    let mut report = DiagnoseReport {
        layers: Vec::new(),
        solver: None,
        hessian_min_eigenvalue: None,
        jacobian_norm_bound: None,
        catalog: None,
        errors: Vec::new(),
    };
    let y = &data.y;
    let probe_idx: Vec<usize> = (0..y.cols().min(opts.probes)).collect();
    let stats = |its: &[usize], bad: usize, boundary: usize| SolverStats {
        samples: its.len(),
        nonconverged: bad,
        boundary,
        mean_iterations: its.iter().sum::<usize>() as f64 / its.len().max(1) as f64,
        max_iterations: its.iter().copied().max().unwrap_or(0),
    };
    let sample = opts.sample.min(y.cols().saturating_sub(1));
    match &model {
        Model::Shallow(layer) => {
            match kappa(layer, Some(y)) {
                Ok(r) => report.layers.push(layer_diagnosis(1, &r)),
                Err(e) => report.errors.push(format!("kappa: {e}")),
            }
            match infer_all(y, layer, &solver, &InferOptions::default()) {
                Ok(o) => {
                    let its: Vec<usize> = o.results.iter().map(|r| r.iterations).collect();
                    report.solver = Some(stats(&its, o.nonconverged().len(), o.boundary.iter().filter(|b| **b).count()));
                    let mins: Vec<f64> = probe_idx
                        .iter()
                        .filter(|&&s| o.results[s].converged && !o.boundary[s])
                        .filter_map(|&s| {
                            let h = layer.hessian_latent(&o.results[s].z_star, &y.column(s)).ok()?;
                            symmetric_eigen(&h).ok().map(|(v, _)| v[0])
                        })
                        .collect();
                    report.hessian_min_eigenvalue = eigen_stats(mins);
                }
                Err(e) => report.errors.push(format!("inference: {e}")),
            }
            if opts.enumerate && y.cols() > 0 {
                if !matches!(layer.map(), CanonicalMap::Relu) {
                    report.errors.push("enumeration needs a relu layer".into());
                } else if layer.d() > MAX_ENUMERATION_DIM {
                    report.errors.push(format!("enumeration needs d <= {MAX_ENUMERATION_DIM}, got {}", layer.d()));
                } else {
                    match enumerate_relu_fixed_points(&y.column(sample), layer) {
                        Ok(cat) => {
                            report.catalog = Some(
                                cat.entries
                                    .iter()
                                    .map(|e| CatalogRow {
                                        pattern: pattern_string(&e.pattern),
                                        z_star: e.z_star.clone(),
                                        consistent: e.pattern_consistent,
                                        hessian_pd: Some(e.hessian_pd),
                                        boundary: e.boundary_flag,
                                    })
                                    .collect(),
                            )
                        }
                        Err(e) => report.errors.push(format!("enumeration: {e}")),
                    }
                }
            }
        }
        Model::Deep(spec) => {
            for (l, layer) in spec.layers.iter().enumerate() {
                let data_arg = (l == 0).then_some(y);
                match kappa(layer, data_arg) {
                    Ok(r) => report.layers.push(layer_diagnosis(l + 1, &r)),
                    Err(e) => report.errors.push(format!("kappa layer {}: {e}", l + 1)),
                }
            }
            match infer_deep_all(y, spec, &solver, &DeepInferOptions::default()) {
                Ok(o) => {
                    let its: Vec<usize> = o.results.iter().map(|r| r.iterations).collect();
                    report.solver = Some(stats(&its, o.nonconverged().len(), o.boundary.iter().filter(|b| **b).count()));
                    let good: Vec<usize> = probe_idx.iter().copied().filter(|&s| o.results[s].converged && !o.boundary[s]).collect();
                    let mins: Vec<f64> = good
                        .iter()
                        .filter_map(|&s| {
                            let h = spec.hessian_blocks(&o.results[s].z_star, &y.column(s)).ok()?.to_dense();
                            symmetric_eigen(&h).ok().map(|(v, _)| v[0])
                        })
                        .collect();
                    report.hessian_min_eigenvalue = eigen_stats(mins);
                    report.jacobian_norm_bound = good
                        .iter()
                        .filter_map(|&s| spec.jacobian_norm_bound(&o.results[s].z_star, &y.column(s)).ok())
                        .reduce(f64::max);
                }
                Err(e) => report.errors.push(format!("inference: {e}")),
            }
            if opts.enumerate && y.cols() > 0 {
                match enumerate_deep_relu(&y.column(sample), spec) {
                    Ok(entries) => {
                        report.catalog = Some(
                            entries
                                .iter()
                                .map(|e| CatalogRow {
                                    pattern: e.pattern.iter().map(|p| pattern_string(p)).collect::<Vec<_>>().join("|"),
                                    z_star: e.zeta.clone(),
                                    consistent: e.pattern_consistent,
                                    hessian_pd: None,
                                    boundary: e.boundary_flag,
                                })
                                .collect(),
                        )
                    }
                    Err(e) => report.errors.push(format!("enumeration: {e}")),
                }
            }
        }
    }
    print_diagnosis(&report);
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("diagnose.json"), &report)?;
    }
    Ok(())
}

fn print_diagnosis(r: &DiagnoseReport) {
    for l in &r.layers {
        println!(
            "layer {}: kappa = {:.6}, |W^T W|_2 = {:.6}, kappa*|W^T W|_2 = {:.6}, verdict: {}{}",
            l.layer,
            l.kappa,
            l.gram_norm,
            l.product,
            l.verdict,
            if l.numerical { " (grid probe)" } else { "" }
        );
    }
    if let Some(s) = &r.solver {
        println!(
            "solver: {} samples, {} non-converged, {} boundary, iterations mean {:.2} max {}",
            s.samples, s.nonconverged, s.boundary, s.mean_iterations, s.max_iterations
        );
    }
    if let Some(e) = &r.hessian_min_eigenvalue {
        println!("hessian min eigenvalue over {} samples: min {:.6}, median {:.6}", e.probed, e.min, e.median);
    }
    if let Some(j) = r.jacobian_norm_bound {
        println!("jacobian norm bound (max over probed samples): {j:.6}");
    }
    if let Some(cat) = &r.catalog {
        println!("relu fixed-point catalog ({} patterns):", cat.len());
        for row in cat {
            let z: Vec<String> = row.z_star.iter().map(|v| format!("{v:.6}")).collect();
            println!(
                "  pattern {}  z* = ({})  consistent={}  hessian_pd={}  boundary={}",
                row.pattern,
                z.join(", "),
                row.consistent,
                row.hessian_pd.map_or("-".into(), |b| b.to_string()),
                row.boundary
            );
        }
    }
    for e in &r.errors {
        println!("note: {e}");
    }
}

// ---------------------------------------------------------------- eval-downstream

pub fn eval_downstream(
    cfg: &RunConfig,
    data_dir: &Path,
    checkpoint: Option<&Path>,
    external: &[(String, PathBuf)],
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let data = read_dataset(data_dir)?;
    let model = checkpoint.map(load_model).transpose()?;
    if let Some(m) = &model {
        check_dims(m, &data)?;
    }
    let seeds = seed.map_or_else(|| cfg.eval.seeds.clone(), |s| vec![s]);
    let ext: Vec<(String, Matrix)> = external
        .iter()
        .map(|(n, p)| Ok((n.clone(), read_matrix_csv(p)?)))
        .collect::<Result<_>>()?;
    let mut backbones: Vec<Backbone> = Vec::new();
    for name in &cfg.eval.backbones {
        let finetune = match name.as_str() {
            "frozen-pca" => {
                backbones.push(Backbone::FrozenPca);
                continue;
            }
            "ped-finetune" => true,
            "ped-frozen" => false,
            other => return Err(PedError::Validation(format!("unknown backbone {other:?}"))),
        };
        match &model {
            Some(Model::Shallow(layer)) => backbones.push(Backbone::Ped { layer, finetune }),
            Some(Model::Deep(spec)) => backbones.push(Backbone::DeepPed { spec, finetune }),
            None => return Err(PedError::Validation(format!("backbone {name} needs --checkpoint"))),
        }
    }
    for (name, features) in &ext {
        backbones.push(Backbone::External { name: name.clone(), features });
    }
    if backbones.is_empty() {
        return Err(PedError::Validation("no backbones to evaluate".into()));
    }
    let mut reports: Vec<DownstreamReport> = Vec::with_capacity(backbones.len());
    for b in &backbones {
        eprintln!("evaluating {}", b.name());
        reports.push(downstream_run(b, &data.y, &data.z_true, &seeds, &cfg.eval.downstream)?);
    }
    tally_wins(&mut reports);
    create_dir(out)?;
    write_json(&out.join("downstream.json"), &reports)?;
    for r in &reports {
        let mses: Vec<String> = r.seeds.iter().map(|s| format!("{:.6}", s.test_mse)).collect();
        println!("{:<20} wins {:>3}   test mse [{}]", r.backbone, r.wins, mses.join(", "));
    }
    Ok(())
}
