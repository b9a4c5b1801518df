//! Exact Shapley attribution over channel groups.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, STATS_PER_CHANNEL};
use crate::model::FaultModel;
use crate::readout::{predictive_log_likelihood, sample_weights};
use crate::reservoir::{allocate_nodes, Allocation, FeatureRanks, ReservoirConfig};
use crate::signals::{ChannelId, FaultLabel, NUM_CHANNELS};
use crate::stats::stream_rng;

pub const MAX_PLAYERS: usize = 12;
pub const MIN_VALIDATION_PER_CLASS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub values: Vec<f64>,
    /// Player indices by descending value (ties by index).
    pub ranking: Vec<usize>,
    pub baseline_value: f64,
    pub full_value: f64,
}

impl ShapleyReport {
    pub fn efficiency_gap(&self) -> f64 {
        self.values.iter().sum::<f64>() - (self.full_value - self.baseline_value)
    }

    pub fn rank_of(&self, player: usize) -> usize {
        self.ranking.iter().position(|&p| p == player).unwrap_or(usize::MAX)
    }
}

fn check_players(g: usize) -> Result<()> {
    if g == 0 || g > MAX_PLAYERS {
        return Err(Error::invalid(format!(
            "exact Shapley supports 1..={MAX_PLAYERS} players, got {g}"
        )));
    }
    Ok(())
}

pub fn ranking_of(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Shapley values from a full coalition table indexed by bitmask
/// (bit `i` set means player `i` is present).
pub fn shapley_from_table(table: &[f64], g: usize) -> Result<ShapleyReport> {
    check_players(g)?;
    if table.len() != 1 << g {
        return Err(Error::dim(format!(
            "coalition table has {} entries, expected {}",
            table.len(),
            1usize << g
        )));
    }
    // |S|! (G - |S| - 1)! / G!
    let mut weight = vec![0.0; g];
    for (s, w) in weight.iter_mut().enumerate() {
        let mut v = 1.0 / g as f64;
        for t in 1..=s {
            v *= t as f64 / (g - t) as f64;
        }
        *w = v;
    }
    let full = (1usize << g) - 1;
    let values: Vec<f64> = (0..g)
        .map(|i| {
            let bit = 1usize << i;
            let mut phi = 0.0;
            for mask in 0..=full {
                if mask & bit == 0 {
                    let size = mask.count_ones() as usize;
                    phi += weight[size] * (table[mask | bit] - table[mask]);
                }
            }
            phi
        })
        .collect();
    Ok(ShapleyReport {
        ranking: ranking_of(&values),
        values,
        baseline_value: table[0],
        full_value: table[full],
    })
}

/// Evaluates `v` on all `2^g` coalitions (in parallel, order-preserving)
/// and returns the exact Shapley values.
pub fn exact_shapley(v: impl Fn(u32) -> f64 + Sync, g: usize) -> Result<ShapleyReport> {
    check_players(g)?;
    let table: Vec<f64> = (0..1u32 << g).into_par_iter().map(&v).collect();
    shapley_from_table(&table, g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRanking {
    pub channels: Vec<ChannelId>,
    pub classes: Vec<FaultLabel>,
    pub aggregate: ShapleyReport,
    pub per_class: Vec<ShapleyReport>,
}

impl ChannelRanking {
    pub fn top(&self, n: usize) -> Vec<ChannelId> {
        self.aggregate.ranking.iter().take(n).map(|&i| self.channels[i]).collect()
    }
}

/// Coalition value = mean validation log predictive likelihood with the
/// features of absent channels replaced by their training mean (0 after
/// standardization). Weight draws are shared across coalitions.
pub fn rank_channels(
    model: &FaultModel,
    rows: &[FeatureVector],
    mc_samples: usize,
    seed: u64,
) -> Result<ChannelRanking> {
    if model.epochs_trained == 0 {
        return Err(Error::Untrained);
    }
    let z = model.transform_rows(rows);
    let labels = model.class_indices(rows)?;
    rank_channels_transformed(model, &z, &labels, mc_samples, seed)
}

pub(crate) fn rank_channels_transformed(
    model: &FaultModel,
    z: &[Vec<f64>],
    labels: &[usize],
    mc_samples: usize,
    seed: u64,
) -> Result<ChannelRanking> {
    if mc_samples == 0 {
        return Err(Error::invalid("mc_samples must be at least 1"));
    }
    let k = model.classes.len();
    let mut counts = vec![0usize; k];
    for &y in labels {
        counts[y] += 1;
    }
    if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n < MIN_VALIDATION_PER_CLASS) {
        return Err(Error::InsufficientClass {
            label: model.classes[c].code(),
            count: n,
            required: MIN_VALIDATION_PER_CLASS,
        });
    }
    if model.reservoir.num_features != NUM_CHANNELS * STATS_PER_CHANNEL {
        return Err(Error::dim("channel ranking needs the full per-channel feature layout"));
    }
    let mut rng = stream_rng(seed, 0x7368_6170);
    let samples = sample_weights(&model.posterior, mc_samples, &mut rng);

    let table: Vec<Vec<f64>> = (0..1u32 << NUM_CHANNELS)
        .into_par_iter()
        .map(|mask| -> Result<Vec<f64>> {
            let masked: Vec<Vec<f64>> = z
                .iter()
                .map(|x| {
                    let mut x = x.clone();
                    for c in 0..NUM_CHANNELS {
                        if mask & (1 << c) == 0 {
                            for j in c * STATS_PER_CHANNEL..(c + 1) * STATS_PER_CHANNEL {
                                x[j] = model.masked_value(j);
                            }
                        }
                    }
                    x
                })
                .collect();
            let states = model.states(&masked)?;
            let mut per_class = vec![0.0; k + 1];
            for (i, &y) in labels.iter().enumerate() {
                let ll = predictive_log_likelihood(&samples, states.row(i), y);
                per_class[y] += ll;
                per_class[k] += ll;
            }
            for (c, v) in per_class.iter_mut().take(k).enumerate() {
                *v /= counts[c] as f64;
            }
            per_class[k] /= labels.len() as f64;
            Ok(per_class)
        })
        .collect::<Result<_>>()?;

    let column = |j: usize| -> Vec<f64> { table.iter().map(|r| r[j]).collect() };
    let aggregate = shapley_from_table(&column(k), NUM_CHANNELS)?;
    let per_class = (0..k)
        .map(|c| shapley_from_table(&column(c), NUM_CHANNELS))
        .collect::<Result<_>>()?;
    Ok(ChannelRanking {
        channels: ChannelId::ALL.to_vec(),
        classes: model.classes.clone(),
        aggregate,
        per_class,
    })
}

/// Reallocates nodes over channel blocks in proportion to the positive part
/// of the Shapley values. A degenerate report leaves `cfg` unchanged.
pub fn structure_from_ranks(report: &ShapleyReport, cfg: &ReservoirConfig) -> Result<ReservoirConfig> {
    let groups = FeatureRanks::blocks(report.values.clone(), cfg.num_features)?.groups;
    structure_from_ranks_grouped(report, cfg, &groups)
}

/// [`structure_from_ranks`] with explicit feature groups; inside a group,
/// nodes are dealt to members in the listed order.
pub fn structure_from_ranks_grouped(
    report: &ShapleyReport,
    cfg: &ReservoirConfig,
    groups: &[Vec<usize>],
) -> Result<ReservoirConfig> {
    let ranks = FeatureRanks {
        weights: report.values.clone(),
        groups: groups.to_vec(),
    };
    match allocate_nodes(cfg.num_nodes, cfg.num_features, &ranks)? {
        Some(assignment) => Ok(ReservoirConfig {
            node_to_feature: assignment,
            allocation: Allocation::Ranked,
            ..cfg.clone()
        }),
        None => {
            log::warn!("no channel has a positive Shapley value, keeping the current allocation");
            Ok(cfg.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::size_reservoir_grouped;
    use itertools::Itertools;
    use rand::Rng;

    /// Average marginal contribution over every ordering of the players.
    fn permutation_oracle(table: &[f64], g: usize) -> Vec<f64> {
        let mut phi = vec![0.0; g];
        let mut count = 0.0;
        for perm in (0..g).permutations(g) {
            let mut mask = 0usize;
            for &p in &perm {
                let before = table[mask];
                mask |= 1 << p;
                phi[p] += table[mask] - before;
            }
            count += 1.0;
        }
        phi.iter().map(|v| v / count).collect()
    }

    fn table_of(g: usize, v: impl FnMut(usize) -> f64) -> Vec<f64> {
        (0..1usize << g).map(v).collect()
    }

    #[test]
    fn additive_game() {
        let c = [1.0, 2.0, 3.0];
        let r = exact_shapley(
            |m| (0..3).filter(|i| m & (1 << i) != 0).map(|i| c[i]).sum(),
            3,
        )
        .unwrap();
        for (a, b) in r.values.iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(r.ranking, vec![2, 1, 0]);
    }

    #[test]
    fn dummy_player_gets_zero() {
        let r = exact_shapley(|m| ((m & 0b011).count_ones() as f64).powi(2), 3).unwrap();
        assert_eq!(r.values[2], 0.0);
    }

    #[test]
    fn three_player_game_matches_oracle() {
        // Bit order: player 1 = bit 0, player 2 = bit 1, player 3 = bit 2.
        let table = [0.0, 1.0, 1.0, 3.0, 0.0, 1.0, 1.0, 3.0];
        let r = shapley_from_table(&table, 3).unwrap();
        let oracle = permutation_oracle(&table, 3);
        for (a, b) in r.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r.values[0] - 1.5).abs() < 1e-12);
        assert!((r.values[1] - 1.5).abs() < 1e-12);
        assert!(r.values[2].abs() < 1e-12);
        assert!(r.efficiency_gap().abs() < 1e-12);
    }

    #[test]
    fn random_games_match_oracle() {
        let mut rng = stream_rng(31, 0);
        for trial in 0..20 {
            let g = 1 + trial % 6;
            let table = table_of(g, |_| rng.random_range(-5.0..5.0));
            let r = shapley_from_table(&table, g).unwrap();
            let oracle = permutation_oracle(&table, g);
            for (a, b) in r.values.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "g={g}: {a} vs {b}");
            }
            assert!(r.efficiency_gap().abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_players_share_equally() {
        // Players 0 and 1 are interchangeable.
        let v = |m: usize| {
            let a = (m & 1) as f64;
            let b = ((m >> 1) & 1) as f64;
            let c = ((m >> 2) & 1) as f64;
            (a + b).powi(2) + 0.7 * c * (a + b) + 0.2 * c
        };
        let r = shapley_from_table(&table_of(3, v), 3).unwrap();
        assert!((r.values[0] - r.values[1]).abs() < 1e-12);
    }

    #[test]
    fn ranking_survives_affine_maps() {
        let mut rng = stream_rng(8, 1);
        for _ in 0..20 {
            let g = 5;
            let table = table_of(g, |_| rng.random_range(-1.0..1.0));
            let r = shapley_from_table(&table, g).unwrap();
            let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-10.0..10.0));
            let mapped: Vec<f64> = table.iter().map(|v| a * v + b).collect();
            assert_eq!(shapley_from_table(&mapped, g).unwrap().ranking, r.ranking);
        }
    }

    #[test]
    fn too_many_players_refused() {
        assert!(exact_shapley(|_| 0.0, 13).is_err());
        assert!(shapley_from_table(&[0.0; 3], 2).is_err());
    }

    #[test]
    fn parallel_table_is_bit_identical() {
        let v = |m: u32| (m as f64).sin() * 1e3 + (m as f64).sqrt();
        let serial: Vec<f64> = (0..1u32 << 10).map(v).collect();
        let a = shapley_from_table(&serial, 10).unwrap();
        let b = exact_shapley(v, 10).unwrap();
        assert_eq!(a, b);
    }

    fn channel_groups() -> Vec<Vec<usize>> {
        (0..NUM_CHANNELS).map(|c| (5 * c..5 * c + 5).collect()).collect()
    }

    fn report(values: Vec<f64>) -> ShapleyReport {
        ShapleyReport {
            ranking: ranking_of(&values),
            values,
            baseline_value: 0.0,
            full_value: 0.0,
        }
    }

    #[test]
    fn dominant_channel_takes_most_nodes() {
        let base = size_reservoir_grouped(5, 35, &channel_groups(), None, 4).unwrap();
        let mut values = vec![0.1 / 6.0; 7];
        values[1] = 0.9;
        let cfg = structure_from_ranks(&report(values), &base).unwrap();
        let torque = cfg.node_to_feature.iter().filter(|&&j| (5..10).contains(&j)).count();
        assert!(torque as f64 >= 0.6 * 20.0, "{torque}");
        assert_eq!(cfg.allocation, Allocation::Ranked);
        for c in 0..7 {
            assert!(cfg.node_to_feature.iter().any(|&j| j / 5 == c));
        }
    }

    #[test]
    fn uniform_values_give_round_robin_counts() {
        let base = size_reservoir_grouped(5, 35, &channel_groups(), None, 4).unwrap();
        let cfg = structure_from_ranks(&report(vec![0.2; 7]), &base).unwrap();
        let mut a = cfg.node_to_feature.clone();
        let mut b = base.node_to_feature.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_report_keeps_config() {
        let base = size_reservoir_grouped(5, 35, &channel_groups(), None, 4).unwrap();
        assert_eq!(structure_from_ranks(&report(vec![0.0; 7]), &base).unwrap(), base);
        assert_eq!(structure_from_ranks(&report(vec![-1.0; 7]), &base).unwrap(), base);
    }

    #[test]
    fn negative_values_clip_to_floor() {
        let base = size_reservoir_grouped(5, 35, &channel_groups(), None, 4).unwrap();
        let cfg = structure_from_ranks(&report(vec![1.0, -3.0, 1.0, 1.0, 1.0, 1.0, 1.0]), &base).unwrap();
        let speed_nodes = cfg.node_to_feature.iter().filter(|&&j| (5..10).contains(&j)).count();
        assert_eq!(speed_nodes, 1);
    }
}
