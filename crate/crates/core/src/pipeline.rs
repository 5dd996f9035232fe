//! Command-level workflows shared by the CLI and the experiment harness.
//! Each returns its numeric outcome together with a [`Report`] whose body
//! depends only on the inputs, never on paths, timing, or thread count.

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::DatasetBundle;
use crate::ensemble::{ensemble_report, rank_distribution, Strategy};
use crate::error::{Error, Result};
use crate::fga::{evolve_generation, render_lineage, Member, Origin, Population};
use crate::metrics::ClassificationReport;
use crate::model::build;
use crate::par::{with_thread_cap, Execution};
use crate::report::{confusion_table, rank_table, text_table, Report};
use crate::trainer::{evaluate, train, Evaluation, TrainReport};

/// Seed of network `index` in a population started from `base`.
pub fn network_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedNetwork {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

fn data_section(data: &DatasetBundle) -> String {
    let [c, h, w] = data.image_shape();
    let rows: Vec<Vec<String>> = data
        .class_names()
        .iter()
        .zip(data.counts())
        .enumerate()
        .map(|(i, (name, n))| vec![i.to_string(), name.clone(), n.to_string()])
        .collect();
    format!(
        "samples = {}\nimage = {c}x{h}x{w}\n{}",
        data.len(),
        text_table(&["class", "name", "count"], &rows)
    )
}

/// Trains `nets` networks from the config, network `i` seeded with
/// [`network_seed`]`(train.seed, i)`. `workers` fans out across networks.
pub fn train_networks(cfg: &RunConfig, data: &DatasetBundle, nets: usize, workers: Execution) -> Result<Vec<TrainedNetwork>> {
    if nets == 0 {
        return Err(Error::config("at least one network is required"));
    }
    let base = cfg.train_config(&data.counts())?;
    let spec = cfg.network_spec(data.image_shape(), data.classes())?;
    let window = base.plateau_window;
    with_thread_cap(cfg.threads, || {
        workers
            .map_range(nets, |i| {
                let seed = network_seed(base.seed, i);
                let mut state = build::<f32>(&spec, seed)?;
                let tc = crate::trainer::TrainConfig { seed, ..base.clone() };
                let report = train(&mut state, data, &tc)?;
                let fitness = report.fitness(window);
                Ok(TrainedNetwork {
                    checkpoint: Checkpoint::new(state, report.status, fitness),
                    report,
                })
            })
            .into_iter()
            .collect()
    })
}

pub fn train_report(cfg: &RunConfig, data: &DatasetBundle, nets: &[TrainedNetwork]) -> Result<Report> {
    let mut r = Report::new("train", cfg.render());
    r.section("data", data_section(data));
    let policy = cfg.loss_policy(&data.counts())?;
    let weights = policy
        .class_weights
        .as_ref()
        .map(|w| w.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","))
        .unwrap_or_else(|| "none".into());
    r.section(
        "loss",
        format!("policy = {}\nepsilon = {}\nclass_weights = {weights}\n", policy.render_entries(), policy.epsilon),
    );
    let rows: Vec<Vec<String>> = nets
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let s = &n.checkpoint.state;
            vec![
                i.to_string(),
                s.seed.to_string(),
                n.report.epochs.len().to_string(),
                n.report.switch_epoch.map_or("-".into(), |e| e.to_string()),
                n.report.status.to_string(),
                format!("{:.6}", n.report.epochs.last().map_or(f64::NAN, |e| e.loss)),
                format!("{:.4}", n.report.epochs.last().map_or(f64::NAN, |e| e.accuracy)),
                n.checkpoint.fitness.map_or("-".into(), |f| format!("{f:.6}")),
            ]
        })
        .collect();
    r.section(
        "networks",
        text_table(&["net", "seed", "epochs", "switch", "status", "final_loss", "train_acc", "fitness"], &rows),
    );
    for (i, n) in nets.iter().enumerate() {
        let rows: Vec<Vec<String>> = n
            .report
            .epochs
            .iter()
            .enumerate()
            .map(|(e, rec)| {
                let tally: Vec<String> = rec.loss_tally.iter().map(|(k, c)| format!("{k}:{c}")).collect();
                vec![
                    e.to_string(),
                    format!("{:.6}", rec.loss),
                    format!("{:.4}", rec.accuracy),
                    format!("{:.3e}", rec.lr),
                    tally.join(","),
                ]
            })
            .collect();
        r.section(format!("history net{i}"), text_table(&["epoch", "loss", "acc", "lr", "losses"], &rows));
    }
    for (i, n) in nets.iter().enumerate() {
        r.metric(format!("net{i}.status"), n.report.status);
        r.metric(format!("net{i}.epochs"), n.report.epochs.len());
        if let Some(e) = n.report.epochs.last() {
            r.metric(format!("net{i}.final_loss"), format!("{:.6}", e.loss));
            r.metric_f64(format!("net{i}.train_accuracy"), e.accuracy);
        }
    }
    Ok(r)
}

/// Refuses checkpoints whose network specs differ.
pub fn check_same_spec(checkpoints: &[Checkpoint]) -> Result<()> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::input("no checkpoints given"))?;
    for (i, ck) in checkpoints.iter().enumerate().skip(1) {
        if ck.state.spec != first.state.spec {
            return Err(Error::config(format!("checkpoint {i} has a different network spec than checkpoint 0")));
        }
    }
    Ok(())
}

pub fn evaluate_all(checkpoints: &[Checkpoint], data: &DatasetBundle, execution: Execution) -> Result<Vec<Evaluation>> {
    check_same_spec(checkpoints)?;
    checkpoints
        .iter()
        .map(|ck| evaluate(&ck.state, data, execution))
        .collect()
}

fn logits_of(evals: &[Evaluation]) -> Vec<Vec<Vec<f64>>> {
    evals.iter().map(|e| e.logits.clone()).collect()
}

fn command_section(lines: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in lines {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

fn strategy_params(strategy: Strategy) -> String {
    match strategy {
        Strategy::T2v { alpha, beta } => format!("{} alpha={alpha} beta={beta}", strategy.name()),
        _ => strategy.name().to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutcome {
    pub single_accuracy: Vec<f64>,
    pub ensemble: ClassificationReport,
}

impl EnsembleOutcome {
    pub fn mean_single_accuracy(&self) -> f64 {
        self.single_accuracy.iter().sum::<f64>() / self.single_accuracy.len() as f64
    }
}

pub fn ensemble_eval(
    config: &str,
    evals: &[Evaluation],
    data: &DatasetBundle,
    strategy: Strategy,
    execution: Execution,
) -> Result<(EnsembleOutcome, Report)> {
    let ensemble = ensemble_report(&logits_of(evals), data.labels(), data.classes(), strategy, execution)?;
    let single_accuracy: Vec<f64> = evals.iter().map(Evaluation::accuracy).collect();
    let outcome = EnsembleOutcome {
        single_accuracy,
        ensemble,
    };
    let mut r = Report::new("ensemble-eval", config);
    r.section(
        "command",
        command_section(&[("strategy", strategy_params(strategy)), ("members", evals.len().to_string())]),
    );
    r.section("data", data_section(data));
    let rows: Vec<Vec<String>> = outcome
        .single_accuracy
        .iter()
        .enumerate()
        .map(|(i, a)| vec![i.to_string(), format!("{a:.4}")])
        .collect();
    r.section("members", text_table(&["net", "accuracy"], &rows));
    r.section("confusion %", confusion_table(&outcome.ensemble, data.class_names()));
    r.metric("strategy", strategy.name());
    r.metric("members", evals.len());
    r.metric_f64("accuracy", outcome.ensemble.accuracy);
    r.metric_f64("mean_single_accuracy", outcome.mean_single_accuracy());
    for (c, a) in outcome.ensemble.per_class_accuracy.iter().enumerate() {
        r.metric_f64(format!("class{c}.accuracy"), *a);
    }
    Ok((outcome, r))
}

/// Ensemble accuracy for each size `k`, using the first `k` members.
pub fn sweep(
    config: &str,
    evals: &[Evaluation],
    data: &DatasetBundle,
    strategy: Strategy,
    sizes: &[usize],
    execution: Execution,
) -> Result<(Vec<(usize, f64)>, Report)> {
    if sizes.is_empty() {
        return Err(Error::config("sweep needs at least one size"));
    }
    let logits = logits_of(evals);
    let mut points = Vec::with_capacity(sizes.len());
    for &k in sizes {
        if k == 0 || k > evals.len() {
            return Err(Error::config(format!("ensemble size {k} outside 1..={}", evals.len())));
        }
        let rep = ensemble_report(&logits[..k], data.labels(), data.classes(), strategy, execution)?;
        points.push((k, rep.accuracy));
    }
    let mut r = Report::new("sweep", config);
    let size_list: Vec<String> = sizes.iter().map(usize::to_string).collect();
    r.section(
        "command",
        command_section(&[("strategy", strategy_params(strategy)), ("sizes", size_list.join(","))]),
    );
    let rows: Vec<Vec<String>> = points.iter().map(|(k, a)| vec![k.to_string(), format!("{a:.4}")]).collect();
    r.section("sweep", text_table(&["size", "accuracy"], &rows));
    for (k, a) in &points {
        r.metric_f64(format!("size{k}.accuracy"), *a);
    }
    Ok((points, r))
}

pub fn rank_dist(config: &str, eval: &Evaluation, data: &DatasetBundle, label: &str) -> Result<(Vec<f64>, Report)> {
    let dist = rank_distribution(&eval.logits, data.labels())?;
    let mut r = Report::new("rank-dist", config);
    r.section("rank distribution", rank_table(label, &dist));
    for (k, v) in dist.iter().enumerate() {
        r.metric_f64(format!("rank{}", k + 1), *v);
    }
    r.metric_f64("accuracy", eval.accuracy());
    Ok((dist, r))
}

/// Wraps trained checkpoints as generation-0 members.
pub fn population_from_checkpoints(checkpoints: Vec<Checkpoint>) -> Result<Population> {
    check_same_spec(&checkpoints)?;
    let members = checkpoints
        .into_iter()
        .enumerate()
        .map(|(i, ck)| {
            let fitness = ck
                .fitness
                .ok_or_else(|| Error::Precondition(format!("checkpoint {i} carries no fitness; train it first")))?;
            Ok(Member {
                train_seed: ck.state.seed,
                state: ck.state,
                fitness,
                status: ck.status,
                origin: Origin::Initial,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Population::new(members)
}

pub fn population_checkpoints(population: &Population) -> Vec<Checkpoint> {
    population
        .members
        .iter()
        .map(|m| Checkpoint::new(m.state.clone(), m.status, Some(m.fitness)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuseOutcome {
    pub population: Population,
    /// Test accuracy per member before the first and after the last
    /// generation, when a test set was given.
    pub before: Option<Vec<f64>>,
    pub after: Option<Vec<f64>>,
}

fn accuracies(pop: &Population, test: &DatasetBundle, execution: Execution) -> Result<Vec<f64>> {
    pop.members
        .iter()
        .map(|m| evaluate(&m.state, test, execution).map(|e| e.accuracy()))
        .collect()
}

fn best(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Runs `generations` rounds of fusion, selection and retraining.
pub fn fuse(
    cfg: &RunConfig,
    population: Population,
    train_data: &DatasetBundle,
    test: Option<&DatasetBundle>,
    generations: usize,
) -> Result<(FuseOutcome, Report)> {
    let tc = cfg.train_config(&train_data.counts())?;
    let exec = tc.execution;
    let before = test.map(|t| accuracies(&population, t, exec)).transpose()?;
    let mut r = Report::new("fuse", cfg.render());
    r.section("command", command_section(&[("generations", generations.to_string())]));
    let mut lineage = render_lineage(&population.lineage());
    let mut pop = population;
    with_thread_cap(cfg.threads, || -> Result<()> {
        for _ in 0..generations {
            pop = evolve_generation(&pop, &cfg.fga, &tc, train_data)?;
            lineage.push_str(&render_lineage(&pop.lineage()));
        }
        Ok(())
    })?;
    r.section("lineage", lineage);
    let after = test.map(|t| accuracies(&pop, t, exec)).transpose()?;
    if let (Some(b), Some(a)) = (&before, &after) {
        let rows: Vec<Vec<String>> = (0..a.len())
            .map(|i| vec![i.to_string(), format!("{:.4}", b[i]), format!("{:.4}", a[i])])
            .collect();
        r.section("test accuracy", text_table(&["slot", "before", "after"], &rows));
        r.metric_f64("best_before", best(b));
        r.metric_f64("best_after", best(a));
    }
    r.metric("generations", generations);
    let fit = pop.fitness();
    r.metric("best_fitness", format!("{:.6}", fit.iter().copied().fold(f64::INFINITY, f64::min)));
    Ok((
        FuseOutcome {
            population: pop,
            before,
            after,
        },
        r,
    ))
}

impl FuseOutcome {
    pub fn best_before(&self) -> Option<f64> {
        self.before.as_deref().map(best)
    }

    pub fn best_after(&self) -> Option<f64> {
        self.after.as_deref().map(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::report::strip_header;

    fn small() -> (RunConfig, DatasetBundle, DatasetBundle) {
        let (train, test) = generate_synthetic(&SynthConfig::new(vec![12, 8, 6], 0.5, 16, 0.1, 2)).unwrap();
        let mut cfg = RunConfig::default();
        cfg.train.max_epochs = 2;
        cfg.train.batch_size = 8;
        cfg.fga.fusions = 1;
        cfg.fga.parents = 2;
        cfg.fga.fresh = 1;
        cfg.fga.child_max_epochs = 1;
        (cfg, train, test)
    }

    #[test]
    fn end_to_end_reports_are_reproducible() {
        let (cfg, train, test) = small();
        let run = || {
            let nets = train_networks(&cfg, &train, 3, Execution::Parallel).unwrap();
            let tr = train_report(&cfg, &train, &nets).unwrap().render(0);
            let cks: Vec<Checkpoint> = nets.into_iter().map(|n| n.checkpoint).collect();
            let evals = evaluate_all(&cks, &test, Execution::Parallel).unwrap();
            let (_, er) = ensemble_eval("x = 1\n", &evals, &test, cfg.t2v(), Execution::Parallel).unwrap();
            let (_, sr) = sweep("x = 1\n", &evals, &test, cfg.t2v(), &[1, 2, 3], Execution::Parallel).unwrap();
            let pop = population_from_checkpoints(cks).unwrap();
            let (_, fr) = fuse(&cfg, pop, &train, Some(&test), 1).unwrap();
            [tr, er.render(0), sr.render(0), fr.render(0)]
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(strip_header(x), strip_header(y));
        }
        assert!(a[3].contains("fused("));
    }

    #[test]
    fn single_member_ensemble_matches_network() {
        let (cfg, train, test) = small();
        let nets = train_networks(&cfg, &train, 1, Execution::Sequential).unwrap();
        let cks: Vec<Checkpoint> = nets.into_iter().map(|n| n.checkpoint).collect();
        let evals = evaluate_all(&cks, &test, Execution::Sequential).unwrap();
        let (out, _) = ensemble_eval("", &evals, &test, cfg.t2v(), Execution::Sequential).unwrap();
        assert_eq!(out.ensemble.accuracy, evals[0].accuracy());
        let (dist, rep) = rank_dist("", &evals[0], &test, "net0").unwrap();
        assert_eq!(dist[0], evals[0].accuracy());
        assert!(rep.render(0).contains("rank1="));
    }

    #[test]
    fn spec_mismatch_is_a_config_error() {
        let (cfg, train, _) = small();
        let a = train_networks(&cfg, &train, 1, Execution::Sequential).unwrap().remove(0).checkpoint;
        let mut other = cfg.clone();
        other.model.hidden = 16;
        let b = train_networks(&other, &train, 1, Execution::Sequential).unwrap().remove(0).checkpoint;
        assert!(matches!(check_same_spec(&[a, b]), Err(Error::Config(_))));
    }
}
