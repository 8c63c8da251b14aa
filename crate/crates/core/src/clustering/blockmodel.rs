//! Bernoulli stochastic blockmodels fitted by greedy single-node moves.
//!
//! Two likelihoods share one optimiser. The planted-partition model has one
//! rate inside groups and one across; if the fitted inside rate falls below
//! the outside rate both are pooled, so only assortative structure is
//! rewarded. The full model has a rate per group pair and therefore also
//! captures disassortative roles. Model order is chosen by
//! `log L - 1/2 * k(k+1)/2 * ln(n(n-1)/2)`.
//!
//! Super-nodes carry a size and an internal edge count, so the same code
//! fits partitions of quotient graphs when building a hierarchy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::weighted::{renumber, WeightedGraph};
use super::{AlgorithmTag, Clustering, ClusteringMeta};
use crate::error::{Error, Result};
use crate::graph::Graph;

const MIN_GAIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedPartitionParams {
    pub k_max: usize,
    pub seed: u64,
    /// Upper bound on move sweeps per restart.
    pub sweeps: usize,
    pub restarts: usize,
}

impl Default for PlantedPartitionParams {
    fn default() -> Self {
        PlantedPartitionParams {
            k_max: 32,
            seed: 0,
            sweeps: 50,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchicalParams {
    /// Largest group count tried at the finest level.
    pub k_max: usize,
    pub seed: u64,
    pub sweeps: usize,
    pub restarts: usize,
}

impl Default for HierarchicalParams {
    fn default() -> Self {
        HierarchicalParams {
            k_max: 16,
            seed: 0,
            sweeps: 30,
            restarts: 3,
        }
    }
}

/// Nested partitions, finest first. Each level is a coarsening of the
/// previous one.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<Clustering>,
    /// Index of the level with the fewest clusters above one.
    pub selected: usize,
    /// Every level has a single cluster; `selected` is then the finest.
    pub collapsed: bool,
}

impl Hierarchy {
    pub fn clustering(&self) -> &Clustering {
        &self.levels[self.selected]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Model {
    Planted,
    Full,
}

/// `e ln(e/N) + (N-e) ln(1-e/N)` with `0 ln 0 = 0`.
fn bern(e: f64, pairs: f64) -> f64 {
    if pairs <= 0.0 {
        return 0.0;
    }
    let e = e.clamp(0.0, pairs);
    let mut ll = 0.0;
    if e > 0.0 {
        ll += e * (e / pairs).ln();
    }
    if pairs - e > 0.0 {
        ll += (pairs - e) * ((pairs - e) / pairs).ln();
    }
    ll
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

struct Totals {
    edges: f64,
    pairs: f64,
    ln_pairs: f64,
}

impl Totals {
    fn of(g: &WeightedGraph) -> Self {
        let n: f64 = g.size.iter().sum();
        let edges = g.self_w.iter().sum::<f64>() + g.weights.iter().sum::<f64>() / 2.0;
        let pairs = choose2(n);
        Totals {
            edges,
            pairs,
            ln_pairs: pairs.max(1.0).ln(),
        }
    }

    fn penalty(&self, k: usize) -> f64 {
        let k = k as f64;
        0.5 * (k * (k + 1.0) / 2.0) * self.ln_pairs
    }

    fn planted_loglik(&self, e_in: f64, p_in: f64) -> f64 {
        let e_out = self.edges - e_in;
        let p_out = self.pairs - p_in;
        if p_in > 0.0 && p_out > 0.0 && e_in / p_in < e_out / p_out {
            bern(self.edges, self.pairs)
        } else {
            bern(e_in, p_in) + bern(e_out, p_out)
        }
    }
}

/// Mutable fit state for a fixed label budget `k`.
struct State<'a> {
    g: &'a WeightedGraph,
    t: &'a Totals,
    model: Model,
    k: usize,
    labels: Vec<usize>,
    size: Vec<f64>,
    /// Symmetric `k x k` edge counts; the diagonal counts internal edges.
    e: Vec<f64>,
    e_in: f64,
    p_in: f64,
    occupied: usize,
}

impl<'a> State<'a> {
    fn new(g: &'a WeightedGraph, t: &'a Totals, model: Model, labels: Vec<usize>, k: usize) -> Self {
        let mut size = vec![0.0; k];
        let mut e = vec![0.0; k * k];
        for v in 0..g.n() {
            let a = labels[v];
            size[a] += g.size[v];
            e[a * k + a] += g.self_w[v];
            for (u, w) in g.adj(v) {
                let b = labels[u];
                if a == b {
                    e[a * k + a] += w / 2.0;
                } else {
                    e[a * k + b] += w;
                }
            }
        }
        let e_in = (0..k).map(|r| e[r * k + r]).sum();
        let p_in = size.iter().map(|&s| choose2(s)).sum();
        let occupied = size.iter().filter(|&&s| s > 0.0).count();
        State {
            g,
            t,
            model,
            k,
            labels,
            size,
            e,
            e_in,
            p_in,
            occupied,
        }
    }

    fn loglik(&self) -> f64 {
        match self.model {
            Model::Planted => self.t.planted_loglik(self.e_in, self.p_in),
            Model::Full => {
                let k = self.k;
                let mut ll = 0.0;
                for r in 0..k {
                    if self.size[r] == 0.0 {
                        continue;
                    }
                    ll += bern(self.e[r * k + r], choose2(self.size[r]));
                    for s in r + 1..k {
                        if self.size[s] > 0.0 {
                            ll += bern(self.e[r * k + s], self.size[r] * self.size[s]);
                        }
                    }
                }
                ll
            }
        }
    }

    fn score(&self) -> f64 {
        self.loglik() - self.t.penalty(self.occupied)
    }

    /// Log-likelihood change of moving `v` (weights `d` to each group) from
    /// `r` to `s`.
    fn delta_loglik(&self, v: usize, r: usize, s: usize, d: &[f64]) -> f64 {
        let w = self.g.size[v];
        let sv = self.g.self_w[v];
        let (nr, ns) = (self.size[r], self.size[s]);
        let (nr2, ns2) = (nr - w, ns + w);
        match self.model {
            Model::Planted => {
                let e_in = self.e_in - d[r] + d[s];
                let p_in = self.p_in - choose2(nr) + choose2(nr2) - choose2(ns) + choose2(ns2);
                self.t.planted_loglik(e_in, p_in) - self.t.planted_loglik(self.e_in, self.p_in)
            }
            Model::Full => {
                let k = self.k;
                let e = &self.e;
                let mut delta = 0.0;
                for t in 0..k {
                    if t == r || t == s || self.size[t] == 0.0 {
                        continue;
                    }
                    let nt = self.size[t];
                    delta += bern(e[r * k + t] - d[t], nr2 * nt) - bern(e[r * k + t], nr * nt);
                    delta += bern(e[s * k + t] + d[t], ns2 * nt) - bern(e[s * k + t], ns * nt);
                }
                delta += bern(e[r * k + r] - d[r] - sv, choose2(nr2)) - bern(e[r * k + r], choose2(nr));
                delta += bern(e[s * k + s] + d[s] + sv, choose2(ns2)) - bern(e[s * k + s], choose2(ns));
                delta += bern(e[r * k + s] + d[r] - d[s], nr2 * ns2) - bern(e[r * k + s], nr * ns);
                delta
            }
        }
    }

    fn apply_move(&mut self, v: usize, r: usize, s: usize, d: &[f64]) {
        let k = self.k;
        let w = self.g.size[v];
        let sv = self.g.self_w[v];
        for t in 0..k {
            if d[t] == 0.0 || t == r {
                continue;
            }
            self.e[r * k + t] -= d[t];
            self.e[t * k + r] -= d[t];
        }
        self.e[r * k + r] -= d[r] + sv;
        for t in 0..k {
            if d[t] == 0.0 || t == s {
                continue;
            }
            self.e[s * k + t] += d[t];
            self.e[t * k + s] += d[t];
        }
        self.e[s * k + s] += d[s] + sv;
        self.e_in += d[s] - d[r];
        self.p_in +=
            choose2(self.size[r] - w) - choose2(self.size[r]) + choose2(self.size[s] + w) - choose2(self.size[s]);
        if self.size[s] == 0.0 {
            self.occupied += 1;
        }
        self.size[r] -= w;
        self.size[s] += w;
        if self.size[r] <= 0.0 {
            self.size[r] = 0.0;
            self.occupied -= 1;
        }
        self.labels[v] = s;
    }

    /// One pass over all nodes in random order. Returns the number of moves.
    fn sweep(&mut self, rng: &mut ChaCha8Rng, d: &mut [f64], touched: &mut Vec<usize>) -> usize {
        let mut order: Vec<usize> = (0..self.g.n()).collect();
        order.shuffle(rng);
        let mut moves = 0;
        for v in order {
            let r = self.labels[v];
            for (u, w) in self.g.adj(v) {
                let t = self.labels[u];
                if d[t] == 0.0 {
                    touched.push(t);
                }
                d[t] += w;
            }
            let empties_r = self.size[r] == self.g.size[v];
            let mut best: Option<(usize, f64)> = None;
            let mut consider = |s: usize, state: &State| {
                let dk = empties_r as i64 - (state.size[s] == 0.0) as i64;
                let dpen = state.t.penalty(state.occupied) - state.t.penalty((state.occupied as i64 - dk) as usize);
                let gain = state.delta_loglik(v, r, s, d) + dpen;
                if gain > MIN_GAIN && best.is_none_or(|(_, b)| gain > b) {
                    best = Some((s, gain));
                }
            };
            match self.model {
                Model::Planted => {
                    touched.sort_unstable();
                    for &s in touched.iter() {
                        if s != r {
                            consider(s, self);
                        }
                    }
                }
                Model::Full => {
                    for s in 0..self.k {
                        if s != r && self.size[s] > 0.0 {
                            consider(s, self);
                        }
                    }
                }
            }
            if let Some((s, _)) = best {
                self.apply_move(v, r, s, d);
                moves += 1;
            }
            for &t in touched.iter() {
                d[t] = 0.0;
            }
            touched.clear();
        }
        moves
    }
}

/// Candidate group counts: every value up to 16, then steps of about 25%.
fn k_ladder(k_max: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (1..=k_max.min(16)).collect();
    let mut k = 16usize;
    while k < k_max {
        k = ((k as f64 * 1.25).round() as usize).min(k_max);
        ks.push(k);
    }
    ks
}

struct Fit {
    labels: Vec<usize>,
    k: usize,
    score: f64,
}

/// Best penalized fit over the candidate group counts.
fn fit_over_k(
    g: &WeightedGraph,
    model: Model,
    ks: &[usize],
    sweeps: usize,
    restarts: usize,
    rng: &mut ChaCha8Rng,
) -> Fit {
    let t = Totals::of(g);
    let n = g.n();
    let mut best: Option<Fit> = None;
    let mut d = vec![0.0; n.max(1)];
    let mut touched = Vec::new();
    for &k in ks {
        let k = k.min(n).max(1);
        for _ in 0..if k == 1 { 1 } else { restarts.max(1) } {
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let mut st = State::new(g, &t, model, labels, k);
            for _ in 0..sweeps {
                if st.sweep(rng, &mut d[..k], &mut touched) == 0 {
                    break;
                }
            }
            let score = st.score();
            if best.as_ref().is_none_or(|b| score > b.score + MIN_GAIN) {
                let mut labels = st.labels;
                let k = renumber(&mut labels);
                best = Some(Fit { labels, k, score });
            }
        }
    }
    best.expect("at least one candidate k")
}

fn check_nonempty(g: &Graph) -> Result<()> {
    if g.n() == 0 {
        return Err(Error::Empty("cannot fit a blockmodel to an empty graph".into()));
    }
    Ok(())
}

/// Assortative planted-partition fit with model selection over
/// `1..=k_max` groups.
pub fn planted_partition_fit(g: &Graph, params: &PlantedPartitionParams) -> Result<Clustering> {
    if params.k_max < 1 {
        return Err(Error::InvalidParameter("k_max must be at least 1".into()));
    }
    check_nonempty(g)?;
    let wg = WeightedGraph::from_graph(g);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let fit = fit_over_k(
        &wg,
        Model::Planted,
        &k_ladder(params.k_max.min(g.n())),
        params.sweeps,
        params.restarts,
        &mut rng,
    );
    Ok(Clustering::from_assignment(&fit.labels).with_meta(ClusteringMeta {
        algorithm: Some(AlgorithmTag::BPP),
        params: serde_json::to_value(params).expect("params serialize"),
        seed: Some(params.seed),
        quality: Some(fit.score),
    }))
}

/// Builds nested full-blockmodel partitions. The finest level is fitted on
/// the graph; each further level is fitted on the quotient of the previous
/// one and kept only if its penalized score beats leaving the groups as
/// they are. Stops at one group.
pub fn hierarchical_levels(g: &Graph, params: &HierarchicalParams) -> Result<Vec<Clustering>> {
    if params.k_max < 1 {
        return Err(Error::InvalidParameter("k_max must be at least 1".into()));
    }
    check_nonempty(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let base = WeightedGraph::from_graph(g);
    let t = Totals::of(&base);
    let fit = fit_over_k(
        &base,
        Model::Full,
        &k_ladder(params.k_max.min(g.n())),
        params.sweeps,
        params.restarts,
        &mut rng,
    );
    let mut node_labels = fit.labels;
    let mut k = fit.k;
    let mut levels = vec![node_labels.clone()];
    let mut level = base.aggregate(&node_labels, k);
    while k > 1 {
        let identity = State::new(&level, &t, Model::Full, (0..k).collect(), k).score();
        let ks: Vec<usize> = k_ladder(k - 1);
        let coarse = fit_over_k(&level, Model::Full, &ks, params.sweeps, params.restarts, &mut rng);
        if coarse.score <= identity + MIN_GAIN {
            break;
        }
        for l in node_labels.iter_mut() {
            *l = coarse.labels[*l];
        }
        level = level.aggregate(&coarse.labels, coarse.k);
        k = coarse.k;
        levels.push(node_labels.clone());
    }
    let params_json = serde_json::to_value(params).expect("params serialize");
    Ok(levels
        .iter()
        .enumerate()
        .map(|(depth, labels)| {
            Clustering::from_assignment(labels).with_meta(ClusteringMeta {
                algorithm: Some(AlgorithmTag::H1),
                params: serde_json::json!({ "level": depth, "fit": params_json }),
                seed: Some(params.seed),
                quality: None,
            })
        })
        .collect())
}

/// Hierarchical blockmodel; selects the level with the smallest cluster
/// count above one.
pub fn hierarchical_fit(g: &Graph, params: &HierarchicalParams) -> Result<Hierarchy> {
    let levels = hierarchical_levels(g, params)?;
    let selected = levels
        .iter()
        .enumerate()
        .filter(|(_, c)| c.num_clusters() > 1)
        .min_by_key(|(i, c)| (c.num_clusters(), std::cmp::Reverse(*i)))
        .map(|(i, _)| i);
    Ok(match selected {
        Some(selected) => Hierarchy {
            levels,
            selected,
            collapsed: false,
        },
        None => Hierarchy {
            levels,
            selected: 0,
            collapsed: true,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::correlation_coefficient;
    use crate::synthetic::{bridge_of_cliques, complete, cycle, sbm, star_forest};

    fn full_score_brute(g: &Graph, labels: &[usize]) -> f64 {
        let k = labels.iter().max().unwrap() + 1;
        let mut size = vec![0.0; k];
        let mut e = vec![vec![0.0; k]; k];
        for &l in labels {
            size[l] += 1.0;
        }
        for (u, v) in g.edges() {
            let (a, b) = (labels[u].min(labels[v]), labels[u].max(labels[v]));
            e[a][b] += 1.0;
        }
        let mut ll = 0.0;
        for a in 0..k {
            for b in a..k {
                let pairs = if a == b { choose2(size[a]) } else { size[a] * size[b] };
                if pairs > 0.0 {
                    let p = e[a][b] / pairs;
                    if p > 0.0 {
                        ll += e[a][b] * p.ln();
                    }
                    if p < 1.0 {
                        ll += (pairs - e[a][b]) * (1.0 - p).ln();
                    }
                }
            }
        }
        let n = g.n() as f64;
        let kf = k as f64;
        ll - 0.5 * kf * (kf + 1.0) / 2.0 * (n * (n - 1.0) / 2.0).ln()
    }

    #[test]
    fn incremental_deltas_match_rescoring() {
        let (g, _) = sbm(&[8, 8, 8], 0.5, 0.1, 3);
        let wg = WeightedGraph::from_graph(&g);
        let t = Totals::of(&wg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for model in [Model::Planted, Model::Full] {
            let labels: Vec<usize> = (0..g.n()).map(|_| rng.random_range(0..4)).collect();
            let mut st = State::new(&wg, &t, model, labels, 4);
            for _ in 0..40 {
                let v = rng.random_range(0..g.n());
                let s = rng.random_range(0..4);
                let r = st.labels[v];
                if r == s || st.size[r] == 1.0 {
                    continue;
                }
                let mut d = vec![0.0; 4];
                for (u, w) in wg.adj(v) {
                    d[st.labels[u]] += w;
                }
                let before = st.loglik();
                let predicted = st.delta_loglik(v, r, s, &d);
                st.apply_move(v, r, s, &d);
                let fresh = State::new(&wg, &t, model, st.labels.clone(), 4);
                assert!((fresh.loglik() - st.loglik()).abs() < 1e-8);
                assert!((st.loglik() - before - predicted).abs() < 1e-8);
                assert!(fresh.e.iter().zip(&st.e).all(|(a, b)| (a - b).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn full_score_matches_brute_force() {
        let g = bridge_of_cliques(5, 5);
        let labels = vec![0, 0, 0, 1, 1, 1, 2, 2, 0, 2];
        let wg = WeightedGraph::from_graph(&g);
        let t = Totals::of(&wg);
        let st = State::new(&wg, &t, Model::Full, labels.clone(), 3);
        assert!((st.score() - full_score_brute(&g, &labels)).abs() < 1e-9);
    }

    #[test]
    fn planted_pools_disassortative_rates() {
        let t = Totals {
            edges: 10.0,
            pairs: 45.0,
            ln_pairs: 45f64.ln(),
        };
        // inside rate 0 below outside rate: pooled
        assert_eq!(t.planted_loglik(0.0, 20.0), bern(10.0, 45.0));
        assert!(t.planted_loglik(10.0, 20.0) > bern(10.0, 45.0));
    }

    #[test]
    fn planted_recovers_sbm_blocks() {
        let (g, blocks) = sbm(&[50, 50, 50, 50], 0.3, 0.02, 11);
        let c = planted_partition_fit(&g, &PlantedPartitionParams::default()).unwrap();
        c.validate().unwrap();
        let truth = Clustering::from_assignment(&blocks);
        assert!(correlation_coefficient(&c, &truth).unwrap() >= 0.9);
        assert_eq!(c.meta.algorithm, Some(AlgorithmTag::BPP));
    }

    #[test]
    fn planted_selects_one_group_without_structure() {
        for g in [complete(12), Graph::from_edges(12, &[]).unwrap()] {
            let c = planted_partition_fit(&g, &PlantedPartitionParams::default()).unwrap();
            assert_eq!(c.num_clusters(), 1);
        }
    }

    #[test]
    fn planted_is_deterministic_and_relabeling_invariant() {
        let (g, _) = sbm(&[30, 30, 30], 0.4, 0.02, 5);
        let p = PlantedPartitionParams {
            seed: 9,
            ..Default::default()
        };
        let a = planted_partition_fit(&g, &p).unwrap();
        let b = planted_partition_fit(&g, &p).unwrap();
        assert_eq!(a, b);
        let mut perm: Vec<usize> = (0..g.n()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
        let c = planted_partition_fit(&g.permuted(&perm), &p).unwrap();
        assert!(c.same_partition(&a.permuted(&perm)));
    }

    #[test]
    fn rejects_zero_k_max() {
        let g = cycle(5);
        let p = PlantedPartitionParams {
            k_max: 0,
            ..Default::default()
        };
        assert!(matches!(planted_partition_fit(&g, &p), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn hierarchy_splits_bridged_cliques_in_two() {
        let g = bridge_of_cliques(5, 5);
        let h = hierarchical_fit(&g, &HierarchicalParams::default()).unwrap();
        assert!(!h.collapsed);
        let expected = Clustering::from_assignment(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert!(h.clustering().same_partition(&expected));
    }

    #[test]
    fn hierarchy_groups_leaves_by_role() {
        let (g, role) = star_forest(3, 6);
        let h = hierarchical_fit(&g, &HierarchicalParams::default()).unwrap();
        for level in &h.levels {
            level.validate().unwrap();
        }
        // leaves of a common hub share a cluster at some level
        let grouped = h.levels.iter().any(|c| {
            (1..=3).all(|r| {
                let members: Vec<usize> = (0..g.n()).filter(|&v| role[v] == r).collect();
                members.iter().all(|&v| c.cluster_of(v) == c.cluster_of(members[0]))
            })
        });
        assert!(grouped);
        // hubs are never grouped with leaves at the finest level
        let fine = &h.levels[0];
        assert!((3..g.n()).all(|leaf| fine.cluster_of(leaf) != fine.cluster_of(0)));
    }

    #[test]
    fn hierarchy_levels_are_nested() {
        let (g, _) = sbm(&[20, 20, 20, 20], 0.5, 0.03, 2);
        let levels = hierarchical_levels(&g, &HierarchicalParams::default()).unwrap();
        for w in levels.windows(2) {
            assert!(w[1].num_clusters() < w[0].num_clusters());
            for members in w[0].clusters() {
                assert!(members
                    .iter()
                    .all(|&v| w[1].cluster_of(v) == w[1].cluster_of(members[0])));
            }
        }
    }

    #[test]
    fn six_cycle_never_returns_singletons() {
        let h = hierarchical_fit(&cycle(6), &HierarchicalParams::default()).unwrap();
        let k = h.clustering().num_clusters();
        assert!(k < 6);
        if !h.collapsed {
            assert!((2..=3).contains(&k));
        }
    }
}
