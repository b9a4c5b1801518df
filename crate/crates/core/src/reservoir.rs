//! Fixed-dynamics echo-state reservoir.
//!
//! The reservoir is sized from the class count (`N = K * nodes_per_class`)
//! and every node has one primary input feature. Node counts per feature
//! follow either a round-robin or a rank-proportional allocation.
//!
//! State update (leaky-integrator tanh):
//!
//! ```text
//! s_t = (1 - alpha) s_{t-1} + alpha tanh(W_in x_t + W s_{t-1})
//! ```

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::stats::stream_rng;

pub const DEFAULT_NODES_PER_CLASS: usize = 4;
pub const DEFAULT_LEAK_ALPHA: f64 = 0.8;
pub const DEFAULT_SPECTRAL_RADIUS: f64 = 0.9;
pub const DEFAULT_INPUT_SCALING: f64 = 1.0;
pub const DEFAULT_CONNECTIVITY: f64 = 0.1;
pub const DEFAULT_DRIVE_STEPS: usize = 10;

/// Cross-term magnitude relative to `input_scaling`.
const CROSS_SCALE: f64 = 0.1;
const SCHUR_EPS: f64 = 1e-14;
const SCHUR_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    RoundRobin,
    Ranked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirConfig {
    pub num_nodes: usize,
    pub num_features: usize,
    pub leak_alpha: f64,
    pub spectral_radius: f64,
    pub input_scaling: f64,
    /// Fraction of nonzero recurrent weights.
    pub connectivity: f64,
    /// Steps a static feature vector is held to settle the dynamics.
    pub drive_steps: usize,
    pub node_to_feature: Vec<usize>,
    pub allocation: Allocation,
    pub seed: u64,
}

impl ReservoirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.num_features == 0 {
            return Err(Error::invalid("reservoir needs nodes and features"));
        }
        if !(self.leak_alpha > 0.0 && self.leak_alpha <= 1.0) {
            return Err(Error::invalid("leak_alpha must lie in (0, 1]"));
        }
        if !(self.spectral_radius > 0.0 && self.spectral_radius < 1.0) {
            return Err(Error::invalid("spectral_radius must lie in (0, 1)"));
        }
        if !(self.input_scaling > 0.0) {
            return Err(Error::invalid("input_scaling must be positive"));
        }
        if !(self.connectivity > 0.0 && self.connectivity <= 1.0) {
            return Err(Error::invalid("connectivity must lie in (0, 1]"));
        }
        if self.drive_steps == 0 {
            return Err(Error::invalid("drive_steps must be positive"));
        }
        if self.node_to_feature.len() != self.num_nodes {
            return Err(Error::dim(format!(
                "node_to_feature covers {} nodes, reservoir has {}",
                self.node_to_feature.len(),
                self.num_nodes
            )));
        }
        if let Some(&f) = self.node_to_feature.iter().find(|&&f| f >= self.num_features) {
            return Err(Error::dim(format!("node assigned to feature {f} out of range")));
        }
        Ok(())
    }

    /// Number of nodes owned by each feature.
    pub fn node_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_features];
        for &f in &self.node_to_feature {
            counts[f] += 1;
        }
        counts
    }
}

/// Nonnegative importance weights over groups of features.
///
/// Every group gets at least one node; the remainder is shared in proportion
/// to the weights. Inside a group, nodes go round-robin over its members.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRanks {
    pub weights: Vec<f64>,
    pub groups: Vec<Vec<usize>>,
}

impl FeatureRanks {
    /// One group per feature.
    pub fn per_feature(weights: Vec<f64>) -> Self {
        let groups = (0..weights.len()).map(|j| vec![j]).collect();
        Self { weights, groups }
    }

    /// Contiguous, equally sized feature blocks (one per channel).
    pub fn blocks(weights: Vec<f64>, num_features: usize) -> Result<Self> {
        let g = weights.len();
        if g == 0 || num_features % g != 0 {
            return Err(Error::dim(format!(
                "{g} rank groups do not tile {num_features} features"
            )));
        }
        let per = num_features / g;
        let groups = (0..g).map(|i| (i * per..(i + 1) * per).collect()).collect();
        Ok(Self { weights, groups })
    }
}

/// Largest-remainder apportionment of `total` items with a floor of one per
/// group. Returns `None` when no weight is positive.
pub fn apportion(total: usize, weights: &[f64]) -> Result<Option<Vec<usize>>> {
    let g = weights.len();
    if total < g {
        return Err(Error::invalid(format!(
            "{total} nodes cannot give each of {g} groups a floor node"
        )));
    }
    let clipped: Vec<f64> = weights.iter().map(|&w| if w > 0.0 { w } else { 0.0 }).collect();
    let sum: f64 = clipped.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Ok(None);
    }
    let spare = total - g;
    let quotas: Vec<f64> = clipped.iter().map(|w| w / sum * spare as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(spare - assigned) {
        counts[i] += 1;
    }
    Ok(Some(counts.into_iter().map(|c| c + 1).collect()))
}

/// Deals nodes across groups in turn and, inside a group, across its members.
pub fn round_robin_groups(num_nodes: usize, groups: &[Vec<usize>]) -> Vec<usize> {
    let g = groups.len();
    (0..num_nodes)
        .map(|n| {
            let members = &groups[n % g];
            members[(n / g) % members.len()]
        })
        .collect()
}

/// Node assignment for `num_nodes` under `ranks`; `None` if the ranking is
/// degenerate (no positive weight).
pub fn allocate_nodes(
    num_nodes: usize,
    num_features: usize,
    ranks: &FeatureRanks,
) -> Result<Option<Vec<usize>>> {
    if ranks.weights.len() != ranks.groups.len() {
        return Err(Error::dim("rank weights and groups differ in length"));
    }
    if ranks.groups.iter().flatten().any(|&f| f >= num_features) {
        return Err(Error::dim("rank group references unknown feature"));
    }
    if ranks.groups.iter().any(Vec::is_empty) {
        return Err(Error::invalid("empty rank group"));
    }
    let Some(counts) = apportion(num_nodes, &ranks.weights)? else {
        return Ok(None);
    };
    let mut assignment = Vec::with_capacity(num_nodes);
    for (members, &count) in ranks.groups.iter().zip(&counts) {
        assignment.extend((0..count).map(|t| members[t % members.len()]));
    }
    Ok(Some(assignment))
}

/// Reservoir sized to `num_classes * nodes_per_class` nodes. Without ranks,
/// nodes go round-robin over the features.
pub fn size_reservoir(
    num_classes: usize,
    num_features: usize,
    ranks: Option<&FeatureRanks>,
    nodes_per_class: usize,
) -> Result<ReservoirConfig> {
    match ranks {
        Some(r) => size_reservoir_grouped(num_classes, num_features, &r.groups, Some(&r.weights), nodes_per_class),
        None => {
            let singletons: Vec<Vec<usize>> = (0..num_features).map(|j| vec![j]).collect();
            size_reservoir_grouped(num_classes, num_features, &singletons, None, nodes_per_class)
        }
    }
}

/// Like [`size_reservoir`], with the round-robin fallback dealing nodes
/// across `groups` rather than single features.
pub fn size_reservoir_grouped(
    num_classes: usize,
    num_features: usize,
    groups: &[Vec<usize>],
    weights: Option<&[f64]>,
    nodes_per_class: usize,
) -> Result<ReservoirConfig> {
    if num_classes < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if num_features == 0 || nodes_per_class == 0 {
        return Err(Error::invalid("num_features and nodes_per_class must be positive"));
    }
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(Error::invalid("feature groups must be nonempty"));
    }
    if groups.iter().flatten().any(|&f| f >= num_features) {
        return Err(Error::dim("feature group references unknown feature"));
    }
    let num_nodes = num_classes * nodes_per_class;
    let ranked = match weights {
        None => None,
        Some(w) => {
            let ranks = FeatureRanks {
                weights: w.to_vec(),
                groups: groups.to_vec(),
            };
            let a = allocate_nodes(num_nodes, num_features, &ranks)?;
            if a.is_none() {
                log::warn!("degenerate feature ranking, keeping round-robin allocation");
            }
            a
        }
    };
    let (node_to_feature, allocation) = match ranked {
        Some(a) => (a, Allocation::Ranked),
        None => (round_robin_groups(num_nodes, groups), Allocation::RoundRobin),
    };
    Ok(ReservoirConfig {
        num_nodes,
        num_features,
        leak_alpha: DEFAULT_LEAK_ALPHA,
        spectral_radius: DEFAULT_SPECTRAL_RADIUS,
        input_scaling: DEFAULT_INPUT_SCALING,
        connectivity: DEFAULT_CONNECTIVITY,
        drive_steps: DEFAULT_DRIVE_STEPS,
        node_to_feature,
        allocation,
        seed: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirWeights {
    /// `[N x F]`
    pub w_in: Matrix,
    /// `[N x N]`
    pub w: Matrix,
}

/// Largest eigenvalue modulus, from a real Schur decomposition.
pub fn spectral_radius(m: &Matrix) -> Option<f64> {
    let (r, c) = m.shape();
    if r != c {
        return None;
    }
    let dm = DMatrix::from_row_slice(r, c, m.as_slice());
    let schur = dm.try_schur(SCHUR_EPS, SCHUR_MAX_ITER)?;
    Some(
        schur
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max),
    )
}

fn draw_recurrent(n: usize, connectivity: f64, rng: &mut impl Rng) -> Matrix {
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        let mut any = false;
        for j in 0..n {
            if rng.random::<f64>() < connectivity {
                w.set(i, j, rng.random_range(-1.0..1.0));
                any = true;
            }
        }
        // Every node feeds back somewhere, so the graph has a cycle and a
        // nonzero spectral radius.
        if !any {
            let j = rng.random_range(0..n);
            w.set(i, j, rng.random_range(-1.0..1.0));
        }
    }
    w
}

pub fn init_reservoir(cfg: &ReservoirConfig) -> Result<ReservoirWeights> {
    cfg.validate()?;
    let n = cfg.num_nodes;
    let f = cfg.num_features;
    let s = cfg.input_scaling;
    let mut rng = stream_rng(cfg.seed, 0);

    let mut w_in = Matrix::zeros(n, f);
    for node in 0..n {
        for j in 0..f {
            w_in.set(node, j, rng.random_range(-CROSS_SCALE * s..CROSS_SCALE * s));
        }
        // Positive, so each node rises with its feature like the prior it inherits.
        w_in.set(node, cfg.node_to_feature[node], s * rng.random_range(0.5..=1.0));
    }

    for attempt in 0..2u64 {
        let mut draw_rng = stream_rng(cfg.seed, 1 + attempt);
        let w = draw_recurrent(n, cfg.connectivity, &mut draw_rng);
        match spectral_radius(&w) {
            Some(radius) if radius > 1e-12 && radius.is_finite() => {
                let scale = cfg.spectral_radius / radius;
                return Ok(ReservoirWeights {
                    w_in,
                    w: w.map(|v| v * scale),
                });
            }
            _ => log::debug!("degenerate recurrent draw (attempt {attempt}), reseeding"),
        }
    }
    Err(Error::Numerical(
        "could not draw a recurrent matrix with nonzero spectral radius".into(),
    ))
}

/// One reservoir update in place. `pre` is scratch space of length N.
fn step(w: &ReservoirWeights, alpha: f64, x: &[f64], state: &mut [f64], pre: &mut [f64]) {
    for (i, p) in pre.iter_mut().enumerate() {
        *p = dot(w.w_in.row(i), x) + dot(w.w.row(i), state);
    }
    for (s, p) in state.iter_mut().zip(pre.iter()) {
        *s = (1.0 - alpha) * *s + alpha * p.tanh();
    }
}

/// Drives the reservoir through `sequence` from `s0`; returns the final state.
pub fn run_reservoir(
    w: &ReservoirWeights,
    cfg: &ReservoirConfig,
    sequence: &[Vec<f64>],
    s0: &[f64],
) -> Result<Vec<f64>> {
    if sequence.is_empty() {
        return Err(Error::invalid("empty input sequence"));
    }
    if s0.len() != cfg.num_nodes {
        return Err(Error::dim("initial state length differs from node count"));
    }
    let mut state = s0.to_vec();
    let mut pre = vec![0.0; cfg.num_nodes];
    for x in sequence {
        if x.len() != cfg.num_features {
            return Err(Error::dim("input vector length differs from feature count"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite reservoir input"));
        }
        step(w, cfg.leak_alpha, x, &mut state, &mut pre);
    }
    Ok(state)
}

/// Final state for a static input held for `steps` updates from rest.
pub fn drive_static(
    w: &ReservoirWeights,
    cfg: &ReservoirConfig,
    x: &[f64],
    steps: usize,
) -> Result<Vec<f64>> {
    if x.len() != cfg.num_features {
        return Err(Error::dim("input vector length differs from feature count"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite reservoir input"));
    }
    let mut state = vec![0.0; cfg.num_nodes];
    let mut pre = vec![0.0; cfg.num_nodes];
    for _ in 0..steps {
        step(w, cfg.leak_alpha, x, &mut state, &mut pre);
    }
    Ok(state)
}

/// States `[num_windows x N]`, each window's feature vector held for
/// `cfg.drive_steps` steps.
pub fn collect_states(
    w: &ReservoirWeights,
    cfg: &ReservoirConfig,
    rows: &[Vec<f64>],
) -> Result<Matrix> {
    collect_states_with(w, cfg, rows, cfg.drive_steps)
}

pub fn collect_states_with(
    w: &ReservoirWeights,
    cfg: &ReservoirConfig,
    rows: &[Vec<f64>],
    drive_steps: usize,
) -> Result<Matrix> {
    if drive_steps == 0 {
        return Err(Error::invalid("drive_steps must be positive"));
    }
    let states: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|x| drive_static(w, cfg, x, drive_steps))
        .collect::<Result<_>>()?;
    let mut out = Matrix::zeros(rows.len(), cfg.num_nodes);
    for (i, s) in states.iter().enumerate() {
        out.row_mut(i).copy_from_slice(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::norm;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(num_classes: usize, num_features: usize, seed: u64) -> ReservoirConfig {
        let mut c = size_reservoir(num_classes, num_features, None, 4).unwrap();
        c.seed = seed;
        c
    }

    #[test]
    fn round_robin_over_seven_features() {
        let c = size_reservoir(5, 7, None, 4).unwrap();
        assert_eq!(c.num_nodes, 20);
        assert_eq!(c.node_counts(), vec![3, 3, 3, 3, 3, 3, 2]);
        assert_eq!(c.allocation, Allocation::RoundRobin);
    }

    #[test]
    fn all_mass_on_one_feature_keeps_floors() {
        let ranks = FeatureRanks::per_feature(vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let c = size_reservoir(5, 7, Some(&ranks), 4).unwrap();
        assert_eq!(c.node_counts(), vec![1, 14, 1, 1, 1, 1, 1]);
        assert_eq!(c.allocation, Allocation::Ranked);
    }

    #[test]
    fn uniform_ranks_reproduce_round_robin_counts() {
        let ranks = FeatureRanks::per_feature(vec![0.3; 7]);
        let c = size_reservoir(5, 7, Some(&ranks), 4).unwrap();
        assert_eq!(c.node_counts(), vec![3, 3, 3, 3, 3, 3, 2]);
    }

    #[test]
    fn single_class_rejected() {
        assert!(size_reservoir(1, 7, None, 4).is_err());
    }

    #[test]
    fn degenerate_ranks_fall_back() {
        let ranks = FeatureRanks::per_feature(vec![-1.0; 7]);
        let c = size_reservoir(5, 7, Some(&ranks), 4).unwrap();
        assert_eq!(c.allocation, Allocation::RoundRobin);
        assert_eq!(c.node_to_feature, (0..20).map(|n| n % 7).collect::<Vec<_>>());
    }

    #[test]
    fn grouped_round_robin_covers_every_channel() {
        let groups: Vec<Vec<usize>> = (0..7).map(|c| (5 * c..5 * c + 5).collect()).collect();
        let c = size_reservoir_grouped(5, 35, &groups, None, 4).unwrap();
        assert_eq!(c.allocation, Allocation::RoundRobin);
        let per_channel: Vec<usize> = groups
            .iter()
            .map(|g| c.node_to_feature.iter().filter(|j| g.contains(j)).count())
            .collect();
        assert_eq!(per_channel, vec![3, 3, 3, 3, 3, 3, 2]);
        assert_eq!(&c.node_to_feature[..8], &[0, 5, 10, 15, 20, 25, 30, 1]);

        let ranked = size_reservoir_grouped(5, 35, &groups, Some(&[1.0; 7]), 4).unwrap();
        let mut a = ranked.node_to_feature.clone();
        let mut b = c.node_to_feature.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn spectral_radius_hits_target() {
        for seed in 0..10 {
            let c = cfg(5, 35, seed);
            let w = init_reservoir(&c).unwrap();
            let r = spectral_radius(&w.w).unwrap();
            assert!((r - 0.9).abs() <= 1e-6, "seed {seed}: {r}");
        }
    }

    /// Gelfand's formula as an independent check of the eigenvalue route.
    #[test]
    fn gelfand_agrees_with_schur() {
        let c = cfg(5, 35, 3);
        let w = init_reservoir(&c).unwrap();
        let n = c.num_nodes;
        let mut p = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
        let mut log_scale = 0.0;
        let k = 4000;
        for _ in 0..k {
            let mut next = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for t in 0..n {
                        acc += w.w.get(i, t) * p.get(t, j);
                    }
                    next.set(i, j, acc);
                }
            }
            let fro = norm(next.as_slice());
            log_scale += fro.ln();
            p = next.map(|v| v / fro);
        }
        let estimate = (log_scale / k as f64).exp();
        assert!((estimate - 0.9).abs() < 5e-3, "{estimate}");
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let c = cfg(5, 35, 17);
        let a = init_reservoir(&c).unwrap();
        let b = init_reservoir(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.w_in.shape(), (20, 35));
        for node in 0..20 {
            let row = a.w_in.row(node);
            let primary = row[c.node_to_feature[node]];
            assert!((0.5..=1.0).contains(&primary), "node {node}: {primary}");
            let others = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != c.node_to_feature[node])
                .map(|(_, v)| v.abs())
                .fold(0.0, f64::max);
            assert!(primary > others, "node {node}");
        }
    }

    #[test]
    fn zero_input_stays_at_rest() {
        let c = cfg(4, 6, 1);
        let w = init_reservoir(&c).unwrap();
        let s = run_reservoir(&w, &c, &vec![vec![0.0; 6]; 25], &vec![0.0; c.num_nodes]).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_without_recurrence() {
        let mut c = cfg(3, 5, 2);
        c.leak_alpha = 1.0;
        let mut w = init_reservoir(&c).unwrap();
        w.w = Matrix::zeros(c.num_nodes, c.num_nodes);
        let x = vec![0.3, -1.2, 0.8, 2.0, -0.1];
        let s = run_reservoir(&w, &c, &[x.clone()], &vec![0.0; c.num_nodes]).unwrap();
        let expected: Vec<f64> = w.w_in.mul_vec(&x).iter().map(|v| v.tanh()).collect();
        assert_eq!(s, expected);
    }

    #[test]
    fn non_finite_input_rejected() {
        let c = cfg(2, 3, 0);
        let w = init_reservoir(&c).unwrap();
        let err = run_reservoir(&w, &c, &[vec![0.0, f64::NAN, 0.0]], &vec![0.0; c.num_nodes]);
        assert!(err.is_err());
        assert!(run_reservoir(&w, &c, &[], &vec![0.0; c.num_nodes]).is_err());
    }

    fn contraction(rho: f64, seed: u64) -> f64 {
        let mut c = cfg(5, 35, seed);
        c.spectral_radius = rho;
        c.leak_alpha = 1.0;
        let w = init_reservoir(&c).unwrap();
        let mut rng = stream_rng(seed, 99);
        let a: Vec<f64> = (0..c.num_nodes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..c.num_nodes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zeros = vec![vec![0.0; 35]; 100];
        let sa = run_reservoir(&w, &c, &zeros, &a).unwrap();
        let sb = run_reservoir(&w, &c, &zeros, &b).unwrap();
        let d0: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let dt: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| x - y).collect();
        norm(&dt) / norm(&d0)
    }

    #[test]
    fn initial_state_is_forgotten() {
        for seed in 0..20 {
            let ratio = contraction(0.9, seed);
            assert!(ratio < 1e-3, "seed {seed}: ratio {ratio}");
        }
    }

    #[test]
    fn states_collected_per_window() {
        let c = cfg(5, 35, 4);
        let w = init_reservoir(&c).unwrap();
        let row: Vec<f64> = (0..35).map(|j| (j as f64 * 0.1).sin()).collect();
        let rows = vec![row.clone(); 100];
        let states = collect_states(&w, &c, &rows).unwrap();
        assert_eq!(states.shape(), (100, 20));
        assert!((1..100).all(|i| states.row(i) == states.row(0)));
        let short = collect_states_with(&w, &c, &rows[..1], 1).unwrap();
        assert_ne!(short.row(0), states.row(0));
    }

    proptest! {
        #[test]
        fn states_bounded(seed in 0u64..200, alpha in 0.05f64..=1.0,
                          xs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 8), 1..20)) {
            let mut c = cfg(3, 8, seed);
            c.leak_alpha = alpha;
            let w = init_reservoir(&c).unwrap();
            let s = run_reservoir(&w, &c, &xs, &vec![0.0; c.num_nodes]).unwrap();
            prop_assert!(s.iter().all(|v| v.abs() < 1.0 && v.is_finite()));
        }

        #[test]
        fn allocation_covers_all_nodes(k in 2usize..8, npc in 2usize..6,
                                       weights in prop::collection::vec(-1.0f64..1.0, 1..8)) {
            let f = weights.len();
            prop_assume!(k * npc >= f);
            let ranks = FeatureRanks::per_feature(weights.clone());
            let c = size_reservoir(k, f, Some(&ranks), npc).unwrap();
            let counts = c.node_counts();
            prop_assert_eq!(counts.iter().sum::<usize>(), k * npc);
            if c.allocation == Allocation::Ranked {
                prop_assert!(counts.iter().all(|&n| n >= 1));
            }
        }
    }
}
