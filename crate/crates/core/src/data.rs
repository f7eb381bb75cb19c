//! Offline datasets: trajectory sampling, the two-fold subsampling step,
//! visit counting and aggregation of per-source empirical models.
//!
//! Subsampling follows the split-and-trim construction used to make retained
//! transitions behave like independent draws: shuffle trajectories, use the
//! first half only to set a per-tuple budget, and keep at most that many
//! samples from the second half.

use std::path::Path;

use ndarray::{s, Array1, Array3, Array4, Array5};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dims, EpisodicMdp, InitDist, Policy, ZeroSumGame, SUPPORT_FLOOR};
use crate::seed::rng;

/// Action set of a dataset. Game datasets store flattened joint actions
/// `a1 * A2 + a2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Single(usize),
    Joint(usize, usize),
}

impl ActionSpace {
    pub fn total(&self) -> usize {
        match *self {
            ActionSpace::Single(a) => a,
            ActionSpace::Joint(a1, a2) => a1 * a2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// `K` length-`H` trajectories collected from one source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDataset {
    pub source_id: usize,
    pub horizon: usize,
    pub num_states: usize,
    pub actions: ActionSpace,
    pub trajectories: Vec<Vec<Step>>,
}

impl SourceDataset {
    pub fn num_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn dims(&self) -> Dims {
        Dims {
            horizon: self.horizon,
            states: self.num_states,
            actions: self.actions.total(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        for (k, traj) in self.trajectories.iter().enumerate() {
            if traj.len() != d.horizon {
                return Err(Error::DataIntegrity(format!(
                    "source {} trajectory {k} has {} steps, expected {}",
                    self.source_id,
                    traj.len(),
                    d.horizon
                )));
            }
            for (h, st) in traj.iter().enumerate() {
                if st.state >= d.states || st.next_state >= d.states || st.action >= d.actions {
                    return Err(Error::DataIntegrity(format!(
                        "source {} trajectory {k} step {h}: index out of range",
                        self.source_id
                    )));
                }
                if !(0.0..=1.0).contains(&st.reward) {
                    return Err(Error::DataIntegrity(format!(
                        "source {} trajectory {k} step {h}: reward {} outside [0, 1]",
                        self.source_id, st.reward
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every step of every trajectory, in trajectory order.
    pub fn to_transitions(&self) -> TransitionSet {
        let samples = self
            .trajectories
            .iter()
            .flat_map(|t| t.iter().enumerate().map(|(h, st)| Transition::new(h, st)))
            .collect();
        TransitionSet {
            source_id: self.source_id,
            horizon: self.horizon,
            num_states: self.num_states,
            actions: self.actions,
            samples,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub step: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

impl Transition {
    fn new(step: usize, st: &Step) -> Self {
        Transition {
            step,
            state: st.state,
            action: st.action,
            reward: st.reward,
            next_state: st.next_state,
        }
    }
}

/// Unordered transition samples; what the counting step consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionSet {
    pub source_id: usize,
    pub horizon: usize,
    pub num_states: usize,
    pub actions: ActionSpace,
    pub samples: Vec<Transition>,
}

impl TransitionSet {
    pub fn dims(&self) -> Dims {
        Dims {
            horizon: self.horizon,
            states: self.num_states,
            actions: self.actions.total(),
        }
    }
}

struct Sampler {
    init: WeightedIndex<f64>,
    actions: Vec<WeightedIndex<f64>>,
    next: Vec<WeightedIndex<f64>>,
}

fn weighted(row: impl IntoIterator<Item = f64>) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(row).map_err(|e| Error::input(format!("cannot sample from row: {e}")))
}

pub fn sample_dataset(
    source: &EpisodicMdp,
    behavior: &Policy,
    xi: &InitDist,
    num_trajectories: usize,
    seed: u64,
    source_id: usize,
) -> Result<SourceDataset> {
    let d = source.dims();
    sample_joint(source, behavior, xi, num_trajectories, seed, source_id, ActionSpace::Single(d.actions))
}

/// Game trajectories under a product (or joint mixed) behavior policy.
pub fn sample_game_dataset(
    source: &ZeroSumGame,
    behavior: &Policy,
    xi: &InitDist,
    num_trajectories: usize,
    seed: u64,
    source_id: usize,
) -> Result<SourceDataset> {
    let joint = source.joint_mdp()?;
    let space = ActionSpace::Joint(source.max_actions(), source.min_actions());
    sample_joint(&joint, behavior, xi, num_trajectories, seed, source_id, space)
}

fn sample_joint(
    mdp: &EpisodicMdp,
    behavior: &Policy,
    xi: &InitDist,
    num_trajectories: usize,
    seed: u64,
    source_id: usize,
    actions: ActionSpace,
) -> Result<SourceDataset> {
    if num_trajectories == 0 {
        return Err(Error::param("K", "need at least one trajectory"));
    }
    let d = mdp.dims();
    crate::dp::check_init(mdp, xi)?;
    let probs = behavior.check_shape(d)?;
    let sampler = Sampler {
        init: weighted(xi.probs().iter().copied())?,
        actions: probs
            .rows()
            .into_iter()
            .map(|r| weighted(r.iter().copied()))
            .collect::<Result<_>>()?,
        next: mdp
            .transitions()
            .lanes(ndarray::Axis(3))
            .into_iter()
            .map(|r| weighted(r.iter().copied()))
            .collect::<Result<_>>()?,
    };
    let mut rng = rng(seed);
    let mut trajectories = Vec::with_capacity(num_trajectories);
    for _ in 0..num_trajectories {
        let mut state = sampler.init.sample(&mut rng);
        let mut traj = Vec::with_capacity(d.horizon);
        for h in 0..d.horizon {
            let action = sampler.actions[h * d.states + state].sample(&mut rng);
            let next_state = sampler.next[(h * d.states + state) * d.actions + action].sample(&mut rng);
            traj.push(Step {
                state,
                action,
                reward: mdp.reward(h, state, action),
                next_state,
            });
            state = next_state;
        }
        trajectories.push(traj);
    }
    Ok(SourceDataset {
        source_id,
        horizon: d.horizon,
        num_states: d.states,
        actions,
        trajectories,
    })
}

/// Trim rule of the two-fold subsampling step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleConfig {
    /// When false every sample is kept.
    pub enabled: bool,
    /// Multiplier `T` in `N_aux − T·sqrt(N_aux·log(K·H·L/δ))`.
    pub trim_constant: f64,
}

impl Default for SubsampleConfig {
    fn default() -> Self {
        SubsampleConfig {
            enabled: true,
            trim_constant: 10.0,
        }
    }
}

impl SubsampleConfig {
    pub fn passthrough() -> Self {
        SubsampleConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trim_constant >= 0.0 && self.trim_constant.is_finite() {
            Ok(())
        } else {
            Err(Error::param("trim_constant", "must be non-negative"))
        }
    }

    /// Apply the configured rule: subsample or pass every step through.
    pub fn apply(&self, dataset: &SourceDataset, delta: f64, num_sources: usize, seed: u64) -> Result<TransitionSet> {
        if self.enabled {
            two_fold_subsample(dataset, delta, num_sources, self.trim_constant, seed)
        } else {
            Ok(dataset.to_transitions())
        }
    }
}

/// Budget kept at a tuple seen `aux` times in the auxiliary half.
pub fn trim_budget(aux: u64, log_term: f64, trim_constant: f64) -> u64 {
    let n = aux as f64;
    (n - trim_constant * (n * log_term).sqrt()).max(0.0).floor() as u64
}

pub fn two_fold_subsample(
    dataset: &SourceDataset,
    delta: f64,
    num_sources: usize,
    trim_constant: f64,
    seed: u64,
) -> Result<TransitionSet> {
    let k = dataset.num_trajectories();
    if k < 2 {
        return Err(Error::input(format!("two-fold subsampling needs K ≥ 2, got {k}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param("delta", format!("must lie in (0, 1), got {delta}")));
    }
    if num_sources == 0 {
        return Err(Error::param("num_sources", "must be positive"));
    }
    let d = dataset.dims();
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng(seed));
    let (aux, main) = order.split_at(k / 2);

    let mut aux_counts = Array3::<u64>::zeros((d.horizon, d.states, d.actions));
    for &i in aux {
        for (h, st) in dataset.trajectories[i].iter().enumerate() {
            aux_counts[[h, st.state, st.action]] += 1;
        }
    }
    let log_term = ((k * d.horizon * num_sources) as f64 / delta).ln();
    let mut budget = aux_counts.mapv(|n| trim_budget(n, log_term, trim_constant));

    let mut main_sorted = main.to_vec();
    main_sorted.sort_unstable();
    let mut samples = Vec::new();
    for &i in &main_sorted {
        for (h, st) in dataset.trajectories[i].iter().enumerate() {
            let left = &mut budget[[h, st.state, st.action]];
            if *left > 0 {
                *left -= 1;
                samples.push(Transition::new(h, st));
            }
        }
    }
    Ok(TransitionSet {
        source_id: dataset.source_id,
        horizon: d.horizon,
        num_states: d.states,
        actions: dataset.actions,
        samples,
    })
}

/// Per-source visit and reward tallies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitCounts {
    pub source_id: usize,
    pub actions: ActionSpace,
    /// `N_h(s, a)`.
    pub visits: Array3<u64>,
    /// `N_h(s, a, s')`.
    pub transitions: Array4<u64>,
    pub reward_sum: Array3<f64>,
    reward_lo: Array3<f64>,
    reward_hi: Array3<f64>,
}

impl VisitCounts {
    pub fn empty(source_id: usize, horizon: usize, states: usize, actions: ActionSpace) -> Self {
        let a = actions.total();
        VisitCounts {
            source_id,
            actions,
            visits: Array3::zeros((horizon, states, a)),
            transitions: Array4::zeros((horizon, states, a, states)),
            reward_sum: Array3::zeros((horizon, states, a)),
            reward_lo: Array3::from_elem((horizon, states, a), f64::INFINITY),
            reward_hi: Array3::from_elem((horizon, states, a), f64::NEG_INFINITY),
        }
    }

    pub fn dims(&self) -> Dims {
        let (horizon, states, actions) = self.visits.dim();
        Dims {
            horizon,
            states,
            actions,
        }
    }

    pub fn record(&mut self, t: &Transition) {
        let idx = [t.step, t.state, t.action];
        self.visits[idx] += 1;
        self.transitions[[t.step, t.state, t.action, t.next_state]] += 1;
        self.reward_sum[idx] += t.reward;
        self.reward_lo[idx] = self.reward_lo[idx].min(t.reward);
        self.reward_hi[idx] = self.reward_hi[idx].max(t.reward);
    }

    pub fn total(&self) -> u64 {
        self.visits.sum()
    }

    /// First tuple where two different rewards were observed.
    pub fn reward_conflict(&self) -> Option<(usize, usize, usize)> {
        self.visits
            .indexed_iter()
            .find(|&(idx, &n)| n > 0 && self.reward_lo[idx] != self.reward_hi[idx])
            .map(|(idx, _)| idx)
    }
}

/// Anything that can be tallied into [`VisitCounts`].
pub trait Countable {
    fn source_id(&self) -> usize;
    fn shape(&self) -> (usize, usize, ActionSpace);
    fn for_each_transition(&self, f: &mut dyn FnMut(&Transition));
}

impl Countable for TransitionSet {
    fn source_id(&self) -> usize {
        self.source_id
    }

    fn shape(&self) -> (usize, usize, ActionSpace) {
        (self.horizon, self.num_states, self.actions)
    }

    fn for_each_transition(&self, f: &mut dyn FnMut(&Transition)) {
        self.samples.iter().for_each(f)
    }
}

impl Countable for SourceDataset {
    fn source_id(&self) -> usize {
        self.source_id
    }

    fn shape(&self) -> (usize, usize, ActionSpace) {
        (self.horizon, self.num_states, self.actions)
    }

    fn for_each_transition(&self, f: &mut dyn FnMut(&Transition)) {
        for traj in &self.trajectories {
            for (h, st) in traj.iter().enumerate() {
                f(&Transition::new(h, st));
            }
        }
    }
}

pub fn count_visits(data: &impl Countable) -> VisitCounts {
    let (h, s, a) = data.shape();
    let mut counts = VisitCounts::empty(data.source_id(), h, s, a);
    data.for_each_transition(&mut |t| counts.record(t));
    counts
}

/// Aggregated empirical model over `L` sources.
///
/// Tuples no source visited carry a sentinel (zero reward, uniform row);
/// solvers assign them the maximal penalty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedModel {
    pub dims: Dims,
    pub actions: ActionSpace,
    /// `r̂_h(s, a)`.
    pub rewards: Array3<f64>,
    /// `P̂_h(s'|s, a)`.
    pub transitions: Array4<f64>,
    /// `L̂_h(s, a)`: number of sources with a visit.
    pub active: Array3<usize>,
    /// `N_{h,l}(s, a)` indexed `(l, h, s, a)`.
    pub source_visits: Array4<u64>,
    /// Per-source empirical rewards, zero where unvisited.
    pub source_rewards: Array4<f64>,
    /// Per-source empirical rows, zero where unvisited.
    pub source_transitions: Array5<f64>,
}

impl AggregatedModel {
    pub fn num_sources(&self) -> usize {
        self.source_visits.dim().0
    }

    /// Indices of sources that visited `(h, s, a)`.
    pub fn active_sources(&self, h: usize, s: usize, a: usize) -> Vec<usize> {
        (0..self.num_sources())
            .filter(|&l| self.source_visits[[l, h, s, a]] > 0)
            .collect()
    }

    /// Positive visit counts at `(h, s, a)`, one per active source.
    pub fn visit_counts(&self, h: usize, s: usize, a: usize) -> Vec<u64> {
        self.source_visits
            .slice(s![.., h, s, a])
            .iter()
            .copied()
            .filter(|&n| n > 0)
            .collect()
    }

    pub fn row(&self, h: usize, s: usize, a: usize) -> Vec<f64> {
        self.transitions.slice(s![h, s, a, ..]).to_vec()
    }

    /// Smallest positive entry of `P̂_h(·|s, a)`; `None` when unvisited.
    pub fn p_min(&self, h: usize, s: usize, a: usize) -> Option<f64> {
        if self.active[[h, s, a]] == 0 {
            return None;
        }
        self.transitions
            .slice(s![h, s, a, ..])
            .iter()
            .copied()
            .filter(|&p| p > SUPPORT_FLOOR)
            .reduce(f64::min)
    }

    /// Treat all sources as one: counts and rewards are pooled before
    /// normalizing. Used by the pooled-PEVI baseline.
    pub fn pooled(counts: &[VisitCounts]) -> Result<AggregatedModel> {
        let first = check_consistent(counts)?;
        let mut merged = VisitCounts::empty(0, first.dims().horizon, first.dims().states, first.actions);
        for c in counts {
            merged.visits += &c.visits;
            merged.transitions += &c.transitions;
            merged.reward_sum += &c.reward_sum;
        }
        build(std::slice::from_ref(&merged))
    }
}

fn check_consistent(counts: &[VisitCounts]) -> Result<&VisitCounts> {
    let first = counts
        .first()
        .ok_or_else(|| Error::input("aggregation needs at least one source"))?;
    if let Some(c) = counts.iter().find(|c| c.visits.dim() != first.visits.dim() || c.actions != first.actions) {
        return Err(Error::shape(format!(
            "source {} counts have shape {:?}, source {} has {:?}",
            c.source_id,
            c.visits.dim(),
            first.source_id,
            first.visits.dim()
        )));
    }
    Ok(first)
}

/// Average the per-source empirical models over the sources that visited
/// each tuple.
pub fn aggregate_model(counts: &[VisitCounts]) -> Result<AggregatedModel> {
    check_consistent(counts)?;
    for c in counts {
        if let Some((h, s, a)) = c.reward_conflict() {
            return Err(Error::DataIntegrity(format!(
                "source {} observed two different rewards at (s={s}, a={a}, h={h})",
                c.source_id
            )));
        }
    }
    build(counts)
}

fn build(counts: &[VisitCounts]) -> Result<AggregatedModel> {
    let first = &counts[0];
    let dims = first.dims();
    let (hn, sn, an) = (dims.horizon, dims.states, dims.actions);
    let ln = counts.len();
    let mut source_visits = Array4::zeros((ln, hn, sn, an));
    let mut source_rewards = Array4::zeros((ln, hn, sn, an));
    let mut source_transitions = Array5::zeros((ln, hn, sn, an, sn));
    let mut rewards = Array3::<f64>::zeros((hn, sn, an));
    let mut transitions = Array4::<f64>::zeros((hn, sn, an, sn));
    let mut active = Array3::<usize>::zeros((hn, sn, an));
    for (l, c) in counts.iter().enumerate() {
        for ((h, s, a), &n) in c.visits.indexed_iter() {
            if n == 0 {
                continue;
            }
            let nf = n as f64;
            source_visits[[l, h, s, a]] = n;
            let r = c.reward_sum[[h, s, a]] / nf;
            source_rewards[[l, h, s, a]] = r;
            rewards[[h, s, a]] += r;
            active[[h, s, a]] += 1;
            for x in 0..sn {
                let p = c.transitions[[h, s, a, x]] as f64 / nf;
                source_transitions[[l, h, s, a, x]] = p;
                transitions[[h, s, a, x]] += p;
            }
        }
    }
    let uniform = Array1::from_elem(sn, 1.0 / sn as f64);
    for ((h, s, a), &l_hat) in active.indexed_iter() {
        if l_hat == 0 {
            transitions.slice_mut(s![h, s, a, ..]).assign(&uniform);
        } else {
            let lf = l_hat as f64;
            rewards[[h, s, a]] = (rewards[[h, s, a]] / lf).clamp(0.0, 1.0);
            transitions.slice_mut(s![h, s, a, ..]).mapv_inplace(|p| p / lf);
        }
    }
    Ok(AggregatedModel {
        dims,
        actions: first.actions,
        rewards,
        transitions,
        active,
        source_visits,
        source_rewards,
        source_transitions,
    })
}

/// One CSV row per step: `source_id,traj,step,s,a,r,s_next`, with `a`
/// replaced by `a1,a2` for game datasets.
pub fn write_datasets(path: impl AsRef<Path>, datasets: &[SourceDataset]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let joint = matches!(datasets.first().map(|d| d.actions), Some(ActionSpace::Joint(..)));
    if joint {
        w.write_record(["source_id", "traj", "step", "s", "a1", "a2", "r", "s_next"])?;
    } else {
        w.write_record(["source_id", "traj", "step", "s", "a", "r", "s_next"])?;
    }
    for ds in datasets {
        for (k, traj) in ds.trajectories.iter().enumerate() {
            for (h, st) in traj.iter().enumerate() {
                let mut rec = vec![ds.source_id.to_string(), k.to_string(), h.to_string(), st.state.to_string()];
                match ds.actions {
                    ActionSpace::Joint(_, a2) => {
                        rec.push((st.action / a2).to_string());
                        rec.push((st.action % a2).to_string());
                    }
                    ActionSpace::Single(_) => rec.push(st.action.to_string()),
                }
                rec.push(st.reward.to_string());
                rec.push(st.next_state.to_string());
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Load datasets written by [`write_datasets`], validating every record.
pub fn read_datasets(
    path: impl AsRef<Path>,
    horizon: usize,
    states: usize,
    actions: ActionSpace,
) -> Result<Vec<SourceDataset>> {
    let mut r = csv::Reader::from_path(path)?;
    let joint = matches!(actions, ActionSpace::Joint(..));
    let expected: &[&str] = if joint {
        &["source_id", "traj", "step", "s", "a1", "a2", "r", "s_next"]
    } else {
        &["source_id", "traj", "step", "s", "a", "r", "s_next"]
    };
    let header = r.headers()?.clone();
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::DataIntegrity(format!(
            "dataset header {:?} does not match {:?}",
            header.iter().collect::<Vec<_>>(),
            expected
        )));
    }
    let mut out: Vec<SourceDataset> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::DataIntegrity(format!("record {}: bad {what}", line + 1));
        let int = |i: usize, what: &str| rec[i].parse::<usize>().map_err(|_| bad(what));
        let source_id = int(0, "source_id")?;
        let traj = int(1, "traj")?;
        let step = int(2, "step")?;
        let state = int(3, "s")?;
        let (action, rest) = match actions {
            ActionSpace::Joint(a1n, a2n) => {
                let (a1, a2) = (int(4, "a1")?, int(5, "a2")?);
                if a1 >= a1n || a2 >= a2n {
                    return Err(bad("joint action"));
                }
                (a1 * a2n + a2, 6)
            }
            ActionSpace::Single(_) => (int(4, "a")?, 5),
        };
        let reward: f64 = rec[rest].parse().map_err(|_| bad("r"))?;
        let next_state = int(rest + 1, "s_next")?;

        if out.last().map(|d| d.source_id) != Some(source_id) {
            if out.iter().any(|d| d.source_id == source_id) {
                return Err(Error::DataIntegrity(format!("source {source_id} records are not contiguous")));
            }
            out.push(SourceDataset {
                source_id,
                horizon,
                num_states: states,
                actions,
                trajectories: Vec::new(),
            });
        }
        let ds = out.last_mut().expect("pushed above");
        if step == 0 {
            if traj != ds.trajectories.len() {
                return Err(bad("traj (trajectories must be numbered 0, 1, ... in order)"));
            }
            ds.trajectories.push(Vec::with_capacity(horizon));
        }
        let count = ds.trajectories.len();
        match ds.trajectories.last_mut() {
            Some(t) if traj + 1 == count && t.len() == step => t.push(Step {
                state,
                action,
                reward,
                next_state,
            }),
            _ => return Err(bad("step (steps must run 0..H within a trajectory)")),
        }
    }
    for ds in &out {
        ds.validate()?;
    }
    Ok(out)
}
