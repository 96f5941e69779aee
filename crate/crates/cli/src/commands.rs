use augoverlap::encoder::{initial_encoder, EncoderParams, TrainingTrace};
use augoverlap::eval::{
    bounds_report, conditional_variance, linear_probe, loglog_slope, lse_approximation_error,
    mean_ce_loss, uniform_counterexample, BoundsReport, FeatureTable,
};
use augoverlap::graph::{
    dataset_critical_radii, scaling_experiment, write_scaling_csv, AugmentationGraph, ClassDiameters,
    CriticalRadii, Diameter, LabelViolations,
};
use augoverlap::metrics::{
    acr_sweep, arc, build_augmented_features, confusion_ratio_all, write_sweep_csv, AugmentedFeatureSet,
    ConfusionReport,
};
use augoverlap::sphere::UnitVector;
use augoverlap::{build_graph, train as fit, ConstantEncoder, LabeledSphereDataset};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::OutDir;
use crate::CliError;

/// Distinct, reproducible seed for a sub-task of a run.
fn derive(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Serialize)]
struct GraphStats {
    n: usize,
    r: f64,
    connect_factor: f64,
    num_edges: usize,
    num_components: usize,
    classwise_connected: Vec<bool>,
    #[serde(flatten)]
    violations: LabelViolations,
    diameters: ClassDiameters,
    critical_radii: CriticalRadii,
}

pub fn simulate_graph(cfg: &ExperimentConfig, out: &OutDir) -> Result<(), CliError> {
    let (train, _) = cfg.datasets(cfg.seed)?;
    let g = build_graph(&train, cfg.graph.r, cfg.graph.connect_factor)?;
    let stats = GraphStats {
        n: g.num_vertices(),
        r: g.r(),
        connect_factor: g.connect_factor(),
        num_edges: g.num_edges(),
        num_components: g.num_components(),
        classwise_connected: g.is_classwise_connected()?,
        violations: g.label_consistency_violations()?,
        diameters: g.intra_class_diameter()?,
        critical_radii: dataset_critical_radii(&train)?,
    };
    out.write_with("edges.csv", |w| Ok(g.write_edges_csv(w)?))?;
    out.write_with("components.csv", |w| Ok(g.write_components_csv(w)?))?;
    out.write_with("samples.csv", |w| Ok(train.write_csv(w)?))?;
    out.write_json("stats.json", &stats)
}

#[derive(Serialize)]
struct TrainReport {
    r: f64,
    final_loss: Option<f64>,
    probe_train_acc: f64,
    probe_test_acc: f64,
    probe_iterations: usize,
    var_cond: f64,
    #[serde(rename = "L_ce_mu")]
    l_ce_mu: f64,
}

pub fn train(cfg: &ExperimentConfig, out: &OutDir) -> Result<(), CliError> {
    let (train, test) = cfg.datasets(cfg.seed)?;
    let (params, trace) = fit(&train, &cfg.train)?;
    let k = train.num_classes().max(test.num_classes());
    let train_t = FeatureTable::from_encoder(&params, &train)?.with_num_classes(k);
    let test_t = FeatureTable::from_encoder(&params, &test)?.with_num_classes(k);
    let probe = linear_probe(&train_t, &test_t, &cfg.metrics.probe)?;
    let report = TrainReport {
        r: cfg.train.r,
        final_loss: trace.final_loss(),
        probe_train_acc: probe.train_acc,
        probe_test_acc: probe.test_acc,
        probe_iterations: probe.iterations,
        var_cond: conditional_variance(&train_t)?,
        l_ce_mu: mean_ce_loss(&train_t)?,
    };
    log::info!("probe test accuracy {:.4}", probe.test_acc);
    out.write_with("checkpoint.json", |w| Ok(w.write_all(params.to_json()?.as_bytes())?))?;
    out.write_with("trace.csv", |w| Ok(trace.write_csv(w)?))?;
    out.write_with("features_train.csv", |w| Ok(train_t.write_csv(w)?))?;
    out.write_with("features_test.csv", |w| Ok(test_t.write_csv(w)?))?;
    out.write_json("report.json", &report)
}

struct Trained {
    seed: u64,
    train: LabeledSphereDataset,
    test: LabeledSphereDataset,
    init: EncoderParams,
    finals: Vec<(EncoderParams, TrainingTrace)>,
}

/// One training run per (seed, strength) of the sweep grid.
fn train_grid(cfg: &ExperimentConfig) -> Result<Vec<Trained>, CliError> {
    cfg.sweep
        .seeds
        .iter()
        .map(|&seed| {
            let (train, test) = cfg.datasets(seed)?;
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            let init = initial_encoder(train.ambient_dim(), &tc)?;
            let finals = cfg
                .sweep
                .r_list
                .iter()
                .map(|&r| {
                    log::info!("training seed {seed} at r = {r}");
                    fit(&train, &augoverlap::TrainConfig { r, ..tc.clone() })
                })
                .collect::<augoverlap::Result<Vec<_>>>()?;
            Ok(Trained {
                seed,
                train,
                test,
                init,
                finals,
            })
        })
        .collect()
}

fn diameter_at(cfg: &ExperimentConfig, ds: &LabeledSphereDataset, r: f64) -> Result<Diameter, CliError> {
    let sub = ds.subsample(cfg.graph.diameter_max_nodes);
    let g = build_graph(&sub, r, cfg.graph.connect_factor)?;
    Ok(g.intra_class_diameter()?.max)
}

pub fn sweep(cfg: &ExperimentConfig, out: &OutDir) -> Result<(), CliError> {
    let grid = train_grid(cfg)?;
    let metrics_cfg = cfg.metrics.sweep_metrics();
    let mut lines = vec!["r,seed,probe_acc,final_loss,var_cond,acr_init,acr_final,arc,diameter".to_string()];
    let mut rows = Vec::new();
    for t in &grid {
        let encs: Vec<EncoderParams> = t.finals.iter().map(|(p, _)| p.clone()).collect();
        let acr = acr_sweep(&t.train, &t.test, &t.init, &encs, &cfg.sweep.r_list, &metrics_cfg, derive(t.seed, 1))?;
        for ((row, (p, trace)), &r) in acr.iter().zip(&t.finals).zip(&cfg.sweep.r_list) {
            let var = conditional_variance(&FeatureTable::from_encoder(p, &t.train)?)?;
            let d = diameter_at(cfg, &t.train, r)?;
            rows.push((
                r,
                t.seed,
                format!(
                    "{r},{},{},{},{var},{},{},{},{d}",
                    t.seed,
                    row.probe_acc,
                    trace.final_loss().unwrap_or(f64::NAN),
                    row.acr_init,
                    row.acr_final,
                    fmt_real(row.arc),
                ),
            ));
        }
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    lines.extend(rows.into_iter().map(|(_, _, l)| l));
    out.write_with("sweep.csv", |w| {
        for l in &lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })
}

fn fmt_real(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        v.to_string()
    }
}

#[derive(Serialize)]
struct ConfusionEntry {
    seed: u64,
    r: f64,
    #[serde(flatten)]
    report: ConfusionReport,
}

#[derive(Serialize)]
struct ImportedArc {
    acr_init: f64,
    acr_final: f64,
    arc: Option<f64>,
}

pub fn metrics(cfg: &ExperimentConfig, out: &OutDir) -> Result<(), CliError> {
    let m = &cfg.metrics;
    if let Some(path) = &m.features {
        let set = AugmentedFeatureSet::read_csv(std::fs::File::open(path)?, m.k)?;
        let report = confusion_ratio_all(&set);
        if let Some(init_path) = &m.features_init {
            let init = AugmentedFeatureSet::read_csv(std::fs::File::open(init_path)?, m.k)?;
            let acr_init = confusion_ratio_all(&init).acr;
            let value = arc(acr_init, report.acr)?;
            out.write_json(
                "arc.json",
                &ImportedArc {
                    acr_init,
                    acr_final: report.acr,
                    arc: value.is_finite().then_some(value),
                },
            )?;
        }
        return out.write_json("confusion.json", &report);
    }

    let grid = train_grid(cfg)?;
    let metrics_cfg = m.sweep_metrics();
    let mut reports = Vec::new();
    for t in &grid {
        let encs: Vec<EncoderParams> = t.finals.iter().map(|(p, _)| p.clone()).collect();
        let rows = acr_sweep(&t.train, &t.test, &t.init, &encs, &cfg.sweep.r_list, &metrics_cfg, derive(t.seed, 1))?;
        out.write_with(&format!("acr_sweep_seed{}.csv", t.seed), |w| Ok(write_sweep_csv(&rows, w)?))?;
        let sub = t.train.subsample(m.max_sources);
        for ((p, _), &r) in t.finals.iter().zip(&cfg.sweep.r_list) {
            let set = build_augmented_features(p, &sub, m.views, r, m.k, derive(t.seed, 2))?;
            reports.push(ConfusionEntry {
                seed: t.seed,
                r,
                report: confusion_ratio_all(&set),
            });
        }
    }
    out.write_json("confusion.json", &reports)
}

#[derive(Serialize)]
struct LabeledBounds {
    encoder: &'static str,
    #[serde(flatten)]
    report: BoundsReport,
}

#[derive(Serialize)]
struct LseSummary {
    points: Vec<augoverlap::eval::LseErrorPoint>,
    loglog_slope: f64,
}

pub fn bounds(cfg: &ExperimentConfig, out: &OutDir) -> Result<(), CliError> {
    let (train, _) = cfg.datasets(cfg.seed)?;
    let r = cfg.train.r;
    let random = initial_encoder(train.ambient_dim(), &cfg.train)?;
    let (trained, _) = fit(&train, &cfg.train)?;
    let constant = ConstantEncoder(UnitVector::basis(cfg.train.output_dim, 0));
    let sub = train.subsample(cfg.graph.diameter_max_nodes);
    let graph: AugmentationGraph = build_graph(&sub, r, cfg.graph.connect_factor)?;

    let mut reports = Vec::new();
    for (i, &m) in cfg.metrics.m_list.iter().enumerate() {
        let seed = derive(cfg.seed, 10 + i as u64);
        let encoders: [(&'static str, &dyn augoverlap::Encoder); 3] =
            [("random", &random), ("trained", &trained), ("constant", &constant)];
        for (name, enc) in encoders {
            let report = bounds_report(enc, &train, r, m, Some(&graph), &cfg.metrics.bounds, seed)?;
            log::info!(
                "{name} M={m}: upper_holds={} lower_holds={}",
                report.upper_holds,
                report.lower_holds
            );
            reports.push(LabeledBounds { encoder: name, report });
        }
    }
    out.write_json("bounds.json", &reports)?;

    let table = FeatureTable::from_encoder(&trained, &train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 3));
    let m_list: Vec<usize> = cfg.metrics.lse_m_list.iter().map(|&m| m.min(table.len())).collect();
    let points = lse_approximation_error(&table, &m_list, cfg.metrics.lse_trials, &mut rng)?;
    let xs: Vec<f64> = points.iter().map(|p| p.m as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_abs_error).collect();
    let summary = LseSummary {
        loglog_slope: loglog_slope(&xs, &ys),
        points,
    };
    out.write_json("lse_error.json", &summary)
}

pub fn scaling(cfg: &ExperimentConfig, out: &OutDir) -> Result<(), CliError> {
    let s = &cfg.graph.scaling;
    let records = scaling_experiment(&s.n_list, s.d, s.trials, s.cap, cfg.seed)?;
    out.write_with("scaling.csv", |w| Ok(write_scaling_csv(&records, w)?))
}

pub fn counterexample(cfg: &ExperimentConfig, out: &OutDir) -> Result<(), CliError> {
    let c = &cfg.metrics.counterexample;
    let result = uniform_counterexample(c.n, c.k, c.m, cfg.seed)?;
    log::info!("probe accuracy {:.4} (chance {:.4})", result.probe_acc, result.chance);
    out.write_json("counterexample.json", &result)
}
