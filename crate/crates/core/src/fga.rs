//! Feature fusion among networks: element-wise parameter averaging of
//! same-architecture networks inside a genetic selection and retraining loop.
//!
//! A generation keeps the fittest survivors, adds fused children built from
//! loss-weighted parent draws, adds freshly initialized networks, and
//! retrains every new member. There is no mutation operator; fresh networks
//! supply exploration.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::model::{build, NetworkState};
use crate::tensor::{Real, Tensor};
use crate::trainer::{train, TrainConfig, TrainReport, TrainStatus};

/// Element-wise mean of every parameter tensor of the parents. The child
/// starts with epoch 0 and an empty loss history.
pub fn fuse_weights<T: Real>(parents: &[&NetworkState<T>]) -> Result<NetworkState<T>> {
    let first = parents
        .first()
        .ok_or_else(|| Error::config("fusion needs at least one parent"))?;
    for (i, p) in parents.iter().enumerate().skip(1) {
        if p.spec != first.spec {
            return Err(Error::config(format!(
                "parent {i} has a different network spec; fusion requires identical structures"
            )));
        }
    }
    for p in parents {
        p.check_params()?;
    }
    let m = T::from_usize(parents.len()).unwrap();
    let params = first
        .params
        .iter()
        .map(|(name, t0)| {
            let mut sum = Tensor::zeros(t0.shape());
            for p in parents {
                sum.add_scaled(&p.params[name], T::one())?;
            }
            Ok((name.clone(), sum.map(|v| v / m)))
        })
        .collect::<Result<_>>()?;
    Ok(NetworkState {
        spec: first.spec.clone(),
        params,
        epoch: 0,
        seed: first.seed,
        loss_history: Vec::new(),
    })
}

/// Boltzmann weights `exp(-loss/τ) / Σ exp(-loss_k/τ)`: lower loss, higher
/// probability.
pub fn selection_probabilities(losses: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("selection temperature {tau} must be positive")));
    }
    if losses.is_empty() {
        return Err(Error::input("selection over an empty population"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::input("non-finite fitness value"));
    }
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = losses.iter().map(|&l| (-(l - min) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Draws `k` distinct indices without replacement, each draw proportional to
/// the remaining members' selection probabilities.
pub fn select_parents<R: Rng + ?Sized>(losses: &[f64], tau: f64, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > losses.len() {
        return Err(Error::config(format!(
            "cannot select {k} parents from {} members",
            losses.len()
        )));
    }
    let mut weights = selection_probabilities(losses, tau)?;
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in weights.iter().enumerate() {
                acc += w;
                if w > 0.0 && u < acc {
                    pick = Some(i);
                    break;
                }
            }
            pick.or_else(|| weights.iter().rposition(|&w| w > 0.0))
        } else {
            None
        };
        // every remaining weight underflowed: fall back to uniform over the rest
        let i = match pick {
            Some(i) => i,
            None => {
                let rest: Vec<usize> = (0..losses.len()).filter(|i| !chosen.contains(i)).collect();
                rest[rng.gen_range(0..rest.len())]
            }
        };
        chosen.push(i);
        weights[i] = 0.0;
    }
    Ok(chosen)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaConfig {
    /// Fused children per generation.
    pub fusions: usize,
    /// Parents averaged into each child.
    pub parents: usize,
    /// Freshly initialized networks per generation.
    pub fresh: usize,
    /// Selection temperature.
    pub tau: f64,
    /// Epoch cap for retraining fused children.
    pub child_max_epochs: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            fusions: 2,
            parents: 3,
            fresh: 2,
            tau: 0.5,
            child_max_epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Origin {
    Initial,
    /// Kept from the previous generation (index there).
    Survivor(usize),
    /// Averaged from these previous-generation indices.
    Fused(Vec<usize>),
    Fresh,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Initial => f.write_str("initial"),
            Origin::Survivor(i) => write!(f, "survivor({i})"),
            Origin::Fused(p) => {
                let list: Vec<String> = p.iter().map(usize::to_string).collect();
                write!(f, "fused({})", list.join("+"))
            }
            Origin::Fresh => f.write_str("fresh"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub state: NetworkState<f32>,
    /// Mean training loss over the final plateau window.
    pub fitness: f64,
    pub status: TrainStatus,
    pub origin: Origin,
    /// Seed of the training run that produced this member.
    pub train_seed: u64,
}

impl Member {
    /// Wraps a state trained by `report`.
    pub fn from_training(state: NetworkState<f32>, report: &TrainReport, window: usize, origin: Origin, train_seed: u64) -> Result<Self> {
        let fitness = report
            .fitness(window)
            .ok_or_else(|| Error::Precondition("member has no training history".into()))?;
        Ok(Self {
            state,
            fitness,
            status: report.status,
            origin,
            train_seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub members: Vec<Member>,
    pub generation: usize,
}

/// One line of the per-generation lineage log.
#[derive(Clone, Debug, PartialEq)]
pub struct LineageEntry {
    pub generation: usize,
    pub slot: usize,
    pub origin: Origin,
    pub seed: u64,
    pub fitness: f64,
    pub status: TrainStatus,
}

impl Population {
    pub fn new(members: Vec<Member>) -> Result<Self> {
        let p = Self {
            members,
            generation: 0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::config("empty population"))?;
        for (i, m) in self.members.iter().enumerate() {
            if m.state.spec != first.state.spec {
                return Err(Error::config(format!("member {i} has a different network spec")));
            }
            if !(m.fitness.is_finite() && m.fitness >= 0.0) {
                return Err(Error::input(format!("member {i} has invalid fitness {}", m.fitness)));
            }
        }
        Ok(())
    }

    pub fn fitness(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.fitness).collect()
    }

    pub fn select_parents<R: Rng + ?Sized>(&self, k: usize, tau: f64, rng: &mut R) -> Result<Vec<usize>> {
        select_parents(&self.fitness(), tau, k, rng)
    }

    pub fn lineage(&self) -> Vec<LineageEntry> {
        self.members
            .iter()
            .enumerate()
            .map(|(slot, m)| LineageEntry {
                generation: self.generation,
                slot,
                origin: m.origin.clone(),
                seed: m.train_seed,
                fitness: m.fitness,
                status: m.status,
            })
            .collect()
    }
}

pub fn render_lineage(entries: &[LineageEntry]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>4} {:>4}  {:<16} {:>20} {:>10}  status", "gen", "slot", "origin", "seed", "fitness");
    for e in entries {
        let _ = writeln!(
            s,
            "{:>4} {:>4}  {:<16} {:>20} {:>10.6}  {}",
            e.generation,
            e.slot,
            e.origin.to_string(),
            e.seed,
            e.fitness,
            e.status
        );
    }
    s
}

enum Job {
    Child { parents: Vec<usize>, seed: u64 },
    Fresh { seed: u64 },
}

/// Runs one generation. Every member must already be trained. Population
/// size is preserved: the best `size - fusions - fresh` members by fitness
/// survive, followed by the retrained children and fresh networks.
pub fn evolve_generation(
    population: &Population,
    ga: &GaConfig,
    train_cfg: &TrainConfig,
    data: &DatasetBundle,
) -> Result<Population> {
    population.validate()?;
    if let Some(i) = population.members.iter().position(|m| !m.status.is_trained()) {
        return Err(Error::Precondition(format!("member {i} has not been trained")));
    }
    let size = population.members.len();
    if ga.fusions + ga.fresh > size {
        return Err(Error::config(format!(
            "{} fusions + {} fresh networks exceed the population of {size}",
            ga.fusions, ga.fresh
        )));
    }
    if ga.fusions > 0 && (ga.parents == 0 || ga.parents > size) {
        return Err(Error::config(format!(
            "cannot fuse {} parents from a population of {size}",
            ga.parents
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(ga.seed);
    rng.set_stream(population.generation as u64 + 1);
    let fitness = population.fitness();
    let mut jobs = Vec::with_capacity(ga.fusions + ga.fresh);
    for _ in 0..ga.fusions {
        let mut parents = select_parents(&fitness, ga.tau, ga.parents, &mut rng)?;
        parents.sort_unstable();
        jobs.push(Job::Child {
            parents,
            seed: rng.gen(),
        });
    }
    for _ in 0..ga.fresh {
        jobs.push(Job::Fresh { seed: rng.gen() });
    }

    let spec = &population.members[0].state.spec;
    let window = train_cfg.plateau_window;
    let trained = train_cfg.execution.map(&jobs, |job| -> Result<Member> {
        let (mut state, cfg, origin, seed) = match job {
            Job::Child { parents, seed } => {
                let refs: Vec<&NetworkState<f32>> = parents.iter().map(|&i| &population.members[i].state).collect();
                let mut child = fuse_weights(&refs)?;
                child.seed = *seed;
                let cfg = TrainConfig {
                    max_epochs: train_cfg.max_epochs.min(ga.child_max_epochs),
                    seed: *seed,
                    ..train_cfg.clone()
                };
                (child, cfg, Origin::Fused(parents.clone()), *seed)
            }
            Job::Fresh { seed } => {
                let cfg = TrainConfig {
                    seed: *seed,
                    ..train_cfg.clone()
                };
                (build::<f32>(spec, *seed)?, cfg, Origin::Fresh, *seed)
            }
        };
        let report = train(&mut state, data, &cfg)?;
        Member::from_training(state, &report, window, origin, seed)
    });

    let mut ranked: Vec<usize> = (0..size).collect();
    ranked.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(a.cmp(&b)));
    let keep = size - ga.fusions - ga.fresh;
    let mut members: Vec<Member> = ranked[..keep]
        .iter()
        .map(|&i| Member {
            origin: Origin::Survivor(i),
            ..population.members[i].clone()
        })
        .collect();
    for m in trained {
        members.push(m?);
    }
    if ga.fusions == 0 && ga.fresh == 0 {
        // nothing changed; keep the original order and provenance
        members = population.members.clone();
    }
    let next = Population {
        members,
        generation: population.generation + 1,
    };
    next.validate()?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MiniCnnOptions, NetworkSpec};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> NetworkSpec {
        NetworkSpec::mini_cnn([1, 16, 16], 3, &MiniCnnOptions::default()).unwrap()
    }

    #[test]
    fn single_parent_fuses_to_copy() {
        let a = build::<f32>(&spec(), 1).unwrap();
        assert_eq!(fuse_weights(&[&a]).unwrap().params, a.params);
        let child = fuse_weights(&[&a, &a, &a]).unwrap();
        for (k, v) in &child.params {
            assert!(v.max_abs_diff(&a.params[k]).unwrap() <= 1e-7);
        }
    }

    #[test]
    fn fusion_is_permutation_invariant() {
        let s = spec();
        let (a, b, c) = (build::<f64>(&s, 1).unwrap(), build::<f64>(&s, 2).unwrap(), build::<f64>(&s, 3).unwrap());
        let x = fuse_weights(&[&a, &b, &c]).unwrap();
        let y = fuse_weights(&[&c, &a, &b]).unwrap();
        for (k, v) in &x.params {
            assert!(v.max_abs_diff(&y.params[k]).unwrap() < 1e-15);
        }
    }

    #[test]
    fn mismatched_specs_refuse_to_fuse() {
        let a = build::<f32>(&spec(), 1).unwrap();
        let other = NetworkSpec::mini_cnn([1, 16, 16], 4, &MiniCnnOptions::default()).unwrap();
        let b = build::<f32>(&other, 1).unwrap();
        assert!(matches!(fuse_weights(&[&a, &b]), Err(Error::Config(_))));
        assert!(matches!(fuse_weights::<f32>(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn selection_probability_cases() {
        assert_eq!(selection_probabilities(&[0.7; 4], 0.5).unwrap(), vec![0.25; 4]);
        assert_eq!(selection_probabilities(&[3.0], 0.5).unwrap(), vec![1.0]);
        let p = selection_probabilities(&[0.0, 2f64.ln()], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(selection_probabilities(&[1.0, f64::NAN], 1.0), Err(Error::Input(_))));
        assert!(matches!(selection_probabilities(&[1.0], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn exhaustive_selection_returns_everyone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut picked = select_parents(&[0.3, 0.1, 0.9, 0.4], 0.5, 4, &mut rng).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, vec![0, 1, 2, 3]);
        assert!(matches!(select_parents(&[0.3, 0.1], 0.5, 3, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn selection_is_seeded() {
        let losses = [0.3, 0.1, 0.9, 0.4, 0.2];
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            select_parents(&losses, 0.5, 3, &mut rng).unwrap()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn underflowed_weights_still_draw_distinct_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut picked = select_parents(&[0.0, 1e6, 2e6], 0.01, 3, &mut rng).unwrap();
        assert_eq!(picked[0], 0);
        picked.sort_unstable();
        assert_eq!(picked, vec![0, 1, 2]);
    }

    fn member(seed: u64, fitness: f64, status: TrainStatus) -> Member {
        Member {
            state: build(&spec(), seed).unwrap(),
            fitness,
            status,
            origin: Origin::Initial,
            train_seed: seed,
        }
    }

    #[test]
    fn untrained_members_are_rejected() {
        let pop = Population::new(vec![member(1, 0.2, TrainStatus::EpochCap), member(2, 0.3, TrainStatus::Untrained)]).unwrap();
        let (data, _) = crate::data::generate_synthetic(&crate::data::SynthConfig::new(vec![4, 4, 4], 0.25, 16, 0.1, 1)).unwrap();
        let err = evolve_generation(&pop, &GaConfig::default(), &TrainConfig::default(), &data).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn empty_generation_is_a_no_op() {
        let pop = Population::new(vec![member(1, 0.2, TrainStatus::Plateau), member(2, 0.3, TrainStatus::EpochCap)]).unwrap();
        let (data, _) = crate::data::generate_synthetic(&crate::data::SynthConfig::new(vec![4, 4, 4], 0.25, 16, 0.1, 1)).unwrap();
        let ga = GaConfig {
            fusions: 0,
            fresh: 0,
            ..GaConfig::default()
        };
        let next = evolve_generation(&pop, &ga, &TrainConfig::default(), &data).unwrap();
        assert_eq!(next.members, pop.members);
        assert_eq!(next.generation, 1);
    }

    #[test]
    fn generation_keeps_size_and_spec() {
        let pop = Population::new(vec![
            member(1, 0.5, TrainStatus::EpochCap),
            member(2, 0.2, TrainStatus::EpochCap),
            member(3, 0.9, TrainStatus::EpochCap),
            member(4, 0.4, TrainStatus::EpochCap),
        ])
        .unwrap();
        let (data, _) = crate::data::generate_synthetic(&crate::data::SynthConfig::new(vec![6, 6, 6], 0.25, 16, 0.1, 1)).unwrap();
        let ga = GaConfig {
            fusions: 1,
            parents: 2,
            fresh: 1,
            seed: 3,
            ..GaConfig::default()
        };
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 9,
            ..TrainConfig::default()
        };
        let a = evolve_generation(&pop, &ga, &cfg, &data).unwrap();
        let b = evolve_generation(&pop, &ga, &cfg, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.members.len(), 4);
        assert_eq!(a.members[0].origin, Origin::Survivor(1));
        assert_eq!(a.members[1].origin, Origin::Survivor(3));
        assert!(matches!(a.members[2].origin, Origin::Fused(ref p) if p.len() == 2));
        assert_eq!(a.members[3].origin, Origin::Fresh);
        assert!(a.members.iter().all(|m| m.state.spec == pop.members[0].state.spec));
        assert!(render_lineage(&a.lineage()).contains("fused("));
    }
}
