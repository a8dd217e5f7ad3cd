//! User partitioning: Lloyd's k-means and a genetic wrapper around it (GAK-means).

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("cannot form {n} clusters from {points} points")]
    InvalidK { n: usize, points: usize },
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("invalid GA parameter: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

const MAX_LLOYD_ITERS: usize = 500;

/// A total assignment of points to `centroids.len()` disjoint, non-empty clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
}

impl Clustering {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.centroids.len()];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == cluster)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaParams {
    pub population_size: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population_size: 20,
            generations: 30,
            mutation_rate: 0.1,
            crossover_rate: 0.8,
            rng_seed: 0,
        }
    }
}

impl GaParams {
    /// A population of one is accepted: it turns the GA into plain k-means.
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 {
            return Err(ClusterError::InvalidParams("population_size must be >= 1".into()));
        }
        if self.generations == 0 {
            return Err(ClusterError::InvalidParams("generations must be >= 1".into()));
        }
        for (name, r) in [("mutation_rate", self.mutation_rate), ("crossover_rate", self.crossover_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(ClusterError::InvalidParams(format!("{name} must be in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn check_input(points: &[[f64; 2]], n: usize) -> Result<()> {
    if n == 0 || n > points.len() {
        return Err(ClusterError::InvalidK { n, points: points.len() });
    }
    if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(ClusterError::NonFinite(i));
    }
    Ok(())
}

/// Within-cluster sum of squared distances to each cluster's centroid.
pub fn wcss(clustering: &Clustering, points: &[[f64; 2]]) -> f64 {
    points
        .iter()
        .zip(&clustering.assignment)
        .map(|(&p, &c)| sq_dist(p, clustering.centroids[c]))
        .sum()
}

/// Fitness used by the GA selection step.
pub fn fitness(wcss: f64) -> f64 {
    1.0 / wcss
}

/// Counts point-to-centroid distance evaluations.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct DistanceCounter {
    pub evaluations: u64,
}

fn means(points: &[[f64; 2]], assignment: &[usize], n: usize) -> Vec<[f64; 2]> {
    let mut acc = vec![[0.0f64; 2]; n];
    let mut cnt = vec![0usize; n];
    for (p, &a) in points.iter().zip(assignment) {
        acc[a][0] += p[0];
        acc[a][1] += p[1];
        cnt[a] += 1;
    }
    acc.iter()
        .zip(&cnt)
        .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64])
        .collect()
}

/// Moves the farthest member of the largest cluster into each empty cluster.
fn repair_empty(points: &[[f64; 2]], assignment: &mut [usize], centroids: &[[f64; 2]], counter: &mut DistanceCounter) {
    let n = centroids.len();
    loop {
        let mut sizes = vec![0usize; n];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        // largest cluster, lowest index on ties
        let largest = (0..n).fold(0, |best, c| if sizes[c] > sizes[best] { c } else { best });
        let members: Vec<usize> = (0..points.len()).filter(|&i| assignment[i] == largest).collect();
        let centre = means(
            &members.iter().map(|&i| points[i]).collect::<Vec<_>>(),
            &vec![0; members.len()],
            1,
        )[0];
        let mut far = members[0];
        let mut far_d = -1.0;
        for &i in &members {
            counter.evaluations += 1;
            let d = sq_dist(points[i], centre);
            if d > far_d {
                far_d = d;
                far = i;
            }
        }
        assignment[far] = empty;
    }
}

/// One Lloyd iteration from the given centroids: nearest-centroid assignment
/// (ties to the lowest index), empty-cluster repair, then centroid update.
pub fn lloyd_pass(points: &[[f64; 2]], centroids: &[[f64; 2]], counter: &mut DistanceCounter) -> Clustering {
    let n = centroids.len();
    let mut assignment = Vec::with_capacity(points.len());
    for &p in points {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &m) in centroids.iter().enumerate() {
            let d = sq_dist(p, m);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignment.push(best);
    }
    counter.evaluations += (points.len() * n) as u64;
    repair_empty(points, &mut assignment, centroids, counter);
    let centroids = means(points, &assignment, n);
    Clustering { assignment, centroids }
}

/// Lloyd iterations from `init` until the assignment stops changing.
pub fn lloyd_converge(points: &[[f64; 2]], init: &[[f64; 2]], counter: &mut DistanceCounter) -> Clustering {
    let mut cur = lloyd_pass(points, init, counter);
    for _ in 0..MAX_LLOYD_ITERS {
        let next = lloyd_pass(points, &cur.centroids, counter);
        if next.assignment == cur.assignment {
            return next;
        }
        cur = next;
    }
    log::warn!("k-means hit the iteration cap of {MAX_LLOYD_ITERS}");
    cur
}

fn forgy(points: &[[f64; 2]], n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    sample(rng, points.len(), n).into_iter().map(|i| points[i]).collect()
}

/// Plain k-means with Forgy initialisation.
pub fn kmeans(points: &[[f64; 2]], n: usize, seed: u64) -> Result<Clustering> {
    kmeans_counted(points, n, seed, &mut DistanceCounter::default())
}

pub fn kmeans_counted(points: &[[f64; 2]], n: usize, seed: u64, counter: &mut DistanceCounter) -> Result<Clustering> {
    check_input(points, n)?;
    let mut rng = rng::stream(seed, "kmeans-init", 0);
    let init = forgy(points, n, &mut rng);
    Ok(lloyd_converge(points, &init, counter))
}

struct Individual {
    clustering: Clustering,
    wcss: f64,
}

impl Individual {
    fn new(clustering: Clustering, points: &[[f64; 2]]) -> Self {
        let wcss = wcss(&clustering, points);
        Self { clustering, wcss }
    }
}

fn tournament<'a>(pop: &'a [Individual], rng: &mut ChaCha8Rng) -> &'a Individual {
    let a = &pop[rng.gen_range(0..pop.len())];
    let b = &pop[rng.gen_range(0..pop.len())];
    if fitness(b.wcss) > fitness(a.wcss) {
        b
    } else {
        a
    }
}

/// Genetic k-means. Individual 0 of the initial population is the plain
/// [`kmeans`] result for the same seed and the best individual always survives,
/// so the returned WCSS never exceeds plain k-means.
pub fn gak_means(points: &[[f64; 2]], n: usize, ga: &GaParams) -> Result<Clustering> {
    check_input(points, n)?;
    ga.validate()?;
    let seed = ga.rng_seed;
    let mut counter = DistanceCounter::default();

    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let sigma = [0.05 * (hi[0] - lo[0]), 0.05 * (hi[1] - lo[1])];

    let mut pop = Vec::with_capacity(ga.population_size);
    pop.push(Individual::new(kmeans(points, n, seed)?, points));
    for i in 1..ga.population_size {
        let mut r = rng::stream(seed, "gak-init", i as u64);
        let init = forgy(points, n, &mut r);
        pop.push(Individual::new(lloyd_converge(points, &init, &mut counter), points));
    }

    for gen in 0..ga.generations {
        let mut r = rng::stream(seed, "gak-generation", gen as u64);
        let mut children = Vec::with_capacity(ga.population_size);
        for _ in 0..ga.population_size {
            let p1 = tournament(&pop, &mut r);
            let p2 = tournament(&pop, &mut r);
            let mut genes = p1.clustering.centroids.clone();
            if n > 1 && r.gen_bool(ga.crossover_rate) {
                let cut = r.gen_range(1..n);
                genes[cut..].copy_from_slice(&p2.clustering.centroids[cut..]);
            }
            for g in genes.iter_mut() {
                for d in 0..2 {
                    if sigma[d] > 0.0 && r.gen_bool(ga.mutation_rate) {
                        g[d] += Normal::new(0.0, sigma[d]).expect("positive sigma").sample(&mut r);
                    }
                }
            }
            children.push(Individual::new(lloyd_pass(points, &genes, &mut counter), points));
        }
        pop.extend(children);
        // stable sort keeps parents ahead of equally fit children
        pop.sort_by(|a, b| a.wcss.total_cmp(&b.wcss));
        pop.truncate(ga.population_size);
        log::trace!("generation {gen}: best wcss {:.3}", pop[0].wcss);
    }

    let best = pop.swap_remove(0);
    let polished = lloyd_converge(points, &best.clustering.centroids, &mut counter);
    log::debug!("gak-means: {} distance evaluations", counter.evaluations);
    if wcss(&polished, points) <= best.wcss {
        Ok(polished)
    } else {
        Ok(best.clustering)
    }
}
